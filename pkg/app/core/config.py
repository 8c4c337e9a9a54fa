import hashlib
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Tuple

from pydantic import BaseModel, ConfigDict, ValidationError, field_validator, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from .errors import InvalidConfig


class Settings(BaseSettings):
    app_name: str = "Heartbeat Valence Estimator"

    # Logging
    log_level: str = "INFO"
    log_format: str = "%(asctime)s %(levelname)s %(name)s: %(message)s"

    # Execution
    default_workers: int = 1
    posterior_chunk_size: int = 100

    model_config = SettingsConfigDict(env_file=".env", env_prefix="VALENCE_", extra="ignore")


settings = Settings()


def derive_seed(seed: int, *names) -> int:
    """Seed for a named component, e.g. derive_seed(run_seed, "fold", 3)."""
    key = ":".join([str(int(seed))] + [str(n) for n in names])
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") >> 1


class DetectorConfig(BaseModel):
    """Constants of the adaptive-threshold R-peak detector and the IBI cleaning band"""
    model_config = ConfigDict(frozen=True)

    baseline_window_s: float = 0.6
    smoothing_window_s: float = 0.04
    threshold_init_window_s: float = 5.0
    threshold_init_fraction: float = 0.6
    threshold_reset_fraction: float = 0.6
    threshold_decay: float = 0.999
    refractory_s: float = 0.2
    peak_search_s: float = 0.08
    min_ibi_s: float = 0.2
    max_ibi_s: float = 3.0
    min_duration_s: float = 2.0

    @model_validator(mode="after")
    def _check(self):
        if not 0.0 < self.threshold_decay <= 1.0:
            raise ValueError("threshold_decay must be in (0, 1]")
        if self.min_ibi_s >= self.max_ibi_s:
            raise ValueError("min_ibi_s must be below max_ibi_s")
        for name in ("baseline_window_s", "smoothing_window_s", "refractory_s", "threshold_init_window_s"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        return self


class ModelConfig(BaseModel):
    """Architecture and training hyperparameters of the dual-stream network"""
    model_config = ConfigDict(frozen=True)

    conv_layers: int = 4
    conv_filters: int = 128
    conv_window_sizes: Tuple[int, ...] = (8, 6, 4, 2)
    conv_dropout_rate: float = 0.5
    lstm_hidden_units: int = 32
    lstm_dropout_rate: float = 0.8
    dense_output_dim: int = 1
    epochs: int = 1500
    lr_initial: float = 1e-3
    lr_floor: float = 1e-4
    lr_patience_epochs: int = 100
    batch_size: int = 16
    seed: int = 0
    label_scale: Tuple[float, float] = (1.0, 9.0)
    input_length: Optional[int] = None
    log_every: int = 50

    @model_validator(mode="after")
    def _check(self):
        windows = self.conv_window_sizes
        if self.conv_layers < 1 or len(windows) != self.conv_layers:
            raise ValueError("conv_window_sizes must list one window per conv layer")
        if any(w < 1 for w in windows) or any(a <= b for a, b in zip(windows, windows[1:])):
            raise ValueError("conv_window_sizes must be positive and strictly decreasing")
        if self.conv_filters < 1 or self.lstm_hidden_units < 1:
            raise ValueError("conv_filters and lstm_hidden_units must be positive")
        for name in ("conv_dropout_rate", "lstm_dropout_rate"):
            rate = getattr(self, name)
            if not 0.0 <= rate < 1.0:
                raise ValueError(f"{name} must be in [0, 1)")
        if self.dense_output_dim != 1:
            raise ValueError("dense_output_dim must be 1 (scalar valence regression)")
        if not 0 < self.lr_floor <= self.lr_initial:
            raise ValueError("require 0 < lr_floor <= lr_initial")
        if self.epochs < 1 or self.batch_size < 1 or self.lr_patience_epochs < 1:
            raise ValueError("epochs, batch_size and lr_patience_epochs must be positive")
        if self.label_scale[0] >= self.label_scale[1]:
            raise ValueError("label_scale must be (scale_min, scale_max) with scale_min < scale_max")
        if self.input_length is not None and self.input_length < 1:
            raise ValueError("input_length must be positive")
        return self

    @property
    def feature_size(self) -> int:
        """Width of the concatenated stream output entering the dense layer"""
        return self.conv_filters + 2 * self.lstm_hidden_units


DEFAULT_ALPHAS: Tuple[float, ...] = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))

ARRAY_KEYS = {"conv_window_sizes", "label_scale", "alphas"}


class RunConfig(BaseModel):
    """Everything one command needs; serialised verbatim beside its outputs"""
    model_config = ConfigDict(frozen=True)

    dataset_root: Optional[Path] = None
    output_dir: Path = Path("out")
    use_precomputed_ibi: bool = False
    n_passes: int = 1000
    alphas: Tuple[float, ...] = DEFAULT_ALPHAS
    k_out: int = 2
    n_folds: int = 10
    n_val_subjects: int = 4
    seed: int = 0
    workers: int = settings.default_workers
    model: ModelConfig = ModelConfig()
    detector: DetectorConfig = DetectorConfig()

    @field_validator("alphas")
    @classmethod
    def _alphas_in_range(cls, alphas):
        for a in alphas:
            if not 0.5 <= a <= 1.0:
                raise ValueError(f"alpha {a} outside [0.5, 1]")
        iter_alpha_labels(alphas)
        return alphas

    @model_validator(mode="after")
    def _check(self):
        if self.n_passes < 1:
            raise ValueError("n_passes must be >= 1")
        if self.k_out < 1 or self.n_folds < 1 or self.n_val_subjects < 1:
            raise ValueError("k_out, n_folds and n_val_subjects must be positive")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        return self

    def with_overrides(self, **overrides) -> "RunConfig":
        """Apply CLI overrides; `seed` also reaches the model config"""
        overrides = {k: v for k, v in overrides.items() if v is not None}
        if not overrides:
            return self
        flat = self.to_flat()
        flat.update({k: format_value(v) for k, v in overrides.items()})
        return run_config_from_flat(flat)

    def to_flat(self) -> Dict[str, str]:
        flat: Dict[str, str] = {}
        for name in type(self).model_fields:
            if name in ("model", "detector"):
                continue
            value = getattr(self, name)
            if value is None:
                continue
            flat[name] = format_value(value)
        for name in ModelConfig.model_fields:
            if name == "seed":
                continue
            value = getattr(self.model, name)
            if value is None:
                continue
            flat[name] = format_value(value)
        for name in DetectorConfig.model_fields:
            flat[name] = format_value(getattr(self.detector, name))
        return flat

    def dump(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in self.to_flat().items())

    def write(self, out_dir: Path, name: str = "run_config.txt") -> Path:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        path = out_dir / name
        path.write_text(self.dump(), encoding="utf-8")
        return path


def format_value(value) -> str:
    if isinstance(value, (tuple, list)):
        return ", ".join(format_value(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_key_value_text(text: str) -> Dict[str, Tuple[int, str]]:
    """Parse `key = value` lines; `#` starts a comment. Returns key -> (line, raw value)."""
    entries: Dict[str, Tuple[int, str]] = {}
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidConfig(f"line {line_no}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise InvalidConfig(f"line {line_no}: empty key")
        if key in entries:
            raise InvalidConfig(f"line {line_no}: duplicate key {key!r}")
        entries[key] = (line_no, value)
    return entries


def _split_array(value: str) -> List[str]:
    return [v.strip() for v in value.split(",") if v.strip()]


def run_config_from_flat(flat: Dict[str, str], lines: Optional[Dict[str, int]] = None) -> RunConfig:
    """Route flat keys into RunConfig / ModelConfig / DetectorConfig and validate"""
    lines = lines or {}
    top: Dict[str, object] = {}
    model: Dict[str, object] = {}
    detector: Dict[str, object] = {}
    for key, value in flat.items():
        parsed: object = _split_array(value) if key in ARRAY_KEYS else value
        if key == "seed":
            top[key] = parsed
            model[key] = parsed
        elif key in ModelConfig.model_fields:
            model[key] = parsed
        elif key in DetectorConfig.model_fields:
            detector[key] = parsed
        elif key in RunConfig.model_fields and key not in ("model", "detector"):
            top[key] = parsed
        else:
            where = f"line {lines[key]}: " if key in lines else ""
            raise InvalidConfig(f"{where}unknown key {key!r}")
    try:
        return RunConfig(model=ModelConfig(**model), detector=DetectorConfig(**detector), **top)
    except ValidationError as e:
        raise InvalidConfig(_describe_validation_error(e, lines)) from e


def _describe_validation_error(error: ValidationError, lines: Dict[str, int]) -> str:
    parts = []
    for item in error.errors():
        loc = [str(p) for p in item.get("loc", ()) if not isinstance(p, int)]
        key = loc[-1] if loc else ""
        where = f"line {lines[key]}: " if key in lines else ""
        parts.append(f"{where}{key or 'config'}: {item.get('msg')}")
    return "; ".join(parts)


def load_run_config(path: Optional[Path]) -> RunConfig:
    """Read a run config file; a missing path yields the defaults"""
    if path is None:
        return RunConfig()
    path = Path(path)
    if not path.exists():
        raise InvalidConfig(f"Config file not found: {path}")
    entries = parse_key_value_text(path.read_text(encoding="utf-8"))
    flat = {k: v for k, (_, v) in entries.items()}
    line_map = {k: line for k, (line, _) in entries.items()}
    return run_config_from_flat(flat, line_map)


def model_config_with(base: ModelConfig, overrides: Dict[str, str]) -> ModelConfig:
    """Copy of `base` with string-valued overrides validated (used by the grid sweep)"""
    values: Dict[str, object] = base.model_dump()
    for key, value in overrides.items():
        if key not in ModelConfig.model_fields:
            raise InvalidConfig(f"unknown model key {key!r}")
        values[key] = _split_array(value) if key in ARRAY_KEYS else value
    try:
        return ModelConfig(**values)
    except ValidationError as e:
        raise InvalidConfig(_describe_validation_error(e, {})) from e


def iter_alpha_labels(alphas: Iterable[float]) -> List[str]:
    """Two decimals where that is exact, more digits otherwise; labels name report files so must be unique"""
    alphas = list(alphas)
    labels = [f"{a:.2f}" if abs(a - round(a, 2)) < 1e-12 else f"{a:.6g}" for a in alphas]
    if len(set(labels)) != len(labels):
        raise InvalidConfig(f"alphas {list(alphas)} do not have distinct labels")
    return labels
