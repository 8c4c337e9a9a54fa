"""
Two-file model persistence.

model.meta  key = value text: format tag, seed, config fields, tensor directory
model.bin   little-endian float64 values of every tensor, in directory order
"""
import logging
from collections import OrderedDict
from pathlib import Path
from typing import Dict, Tuple

import numpy as np

from ..core.config import ModelConfig, format_value, model_config_with, parse_key_value_text, settings
from ..core.errors import InvalidConfig
from .network import ModelParams

logger = logging.getLogger(__name__)

FORMAT_TAG = "valence-model/1"
META_NAME = "model.meta"
BIN_NAME = "model.bin"


def save_model(out_dir: Path, params: ModelParams, config: ModelConfig, seed: int) -> Tuple[Path, Path]:
    """
    Write `model.meta` (config, seed and tensor directory as key = value lines)
    and `model.bin` (little-endian float64 tensors in directory order).

    Returns:
        (meta path, bin path)
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if not params.matches(config):
        raise InvalidConfig("parameters do not match the model config being saved")

    lines = [f"format = {FORMAT_TAG}", f"created_by = {settings.app_name}", f"seed = {int(seed)}"]
    for name in ModelConfig.model_fields:
        value = getattr(config, name)
        if value is not None:
            lines.append(f"config.{name} = {format_value(value)}")

    offset = 0
    chunks = []
    for name, tensor in params.items():
        shape = "x".join(str(d) for d in tensor.shape)
        lines.append(f"tensor.{name} = {shape} @ {offset}")
        chunks.append(np.ascontiguousarray(tensor, dtype="<f8").tobytes())
        offset += tensor.size

    meta_path = out_dir / META_NAME
    bin_path = out_dir / BIN_NAME
    meta_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    bin_path.write_bytes(b"".join(chunks))
    logger.info(f"Saved {params.size} parameters to {bin_path}")
    return meta_path, bin_path


def load_model(model_dir: Path) -> Tuple[ModelParams, ModelConfig, Dict[str, str]]:
    """Bit-exact inverse of save_model; also returns the raw meta entries"""
    model_dir = Path(model_dir)
    meta_path = model_dir / META_NAME
    bin_path = model_dir / BIN_NAME
    if not meta_path.exists() or not bin_path.exists():
        raise InvalidConfig(f"model files not found in {model_dir}")

    entries = {k: v for k, (_, v) in parse_key_value_text(meta_path.read_text(encoding="utf-8")).items()}
    if entries.get("format") != FORMAT_TAG:
        raise InvalidConfig(f"unsupported model format {entries.get('format')!r}")

    config = model_config_with(
        ModelConfig(),
        {k[len("config."):]: v for k, v in entries.items() if k.startswith("config.")},
    )
    values = np.frombuffer(bin_path.read_bytes(), dtype="<f8")

    tensors: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for key, value in entries.items():
        if not key.startswith("tensor."):
            continue
        shape_text, offset_text = (part.strip() for part in value.split("@"))
        shape = tuple(int(d) for d in shape_text.split("x"))
        offset = int(offset_text)
        count = int(np.prod(shape))
        if offset + count > values.size:
            raise InvalidConfig(f"tensor {key} runs past the end of {bin_path.name}")
        tensors[key[len("tensor."):]] = values[offset:offset + count].astype(np.float64).reshape(shape)

    params = ModelParams(tensors)
    if not params.matches(config):
        raise InvalidConfig("stored tensors do not match the stored config")
    return params, config, entries
