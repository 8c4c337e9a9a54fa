"""
Dual-stream valence regressor.

  stream A: [conv -> dropout -> relu] x L -> global average pool   (F values)
  stream B: bidirectional LSTM -> dropout                          (2H values)
  concat -> dense -> scalar valence estimate
"""
import logging
from collections import OrderedDict
from dataclasses import dataclass
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from ..core.config import ModelConfig, derive_seed, settings
from ..core.errors import ShapeMismatch, StaleCache
from ..models.domain import DropoutMask, PreparedSeries
from .layers import (
    bilstm_backward,
    bilstm_forward,
    conv1d_backward,
    conv1d_forward,
    dropout_apply,
    dropout_backward,
    global_avg_pool,
    global_avg_pool_backward,
    make_dropout_mask,
    relu,
    relu_backward,
)

logger = logging.getLogger(__name__)

LSTM_DIRECTIONS = ("lstm_fwd", "lstm_bwd")


def param_shapes(config: ModelConfig) -> "OrderedDict[str, Tuple[int, ...]]":
    shapes: "OrderedDict[str, Tuple[int, ...]]" = OrderedDict()
    channels = 1
    for layer, window in enumerate(config.conv_window_sizes):
        shapes[f"conv{layer}.weight"] = (config.conv_filters, channels, window)
        shapes[f"conv{layer}.bias"] = (config.conv_filters,)
        channels = config.conv_filters
    hidden = config.lstm_hidden_units
    for direction in LSTM_DIRECTIONS:
        shapes[f"{direction}.W"] = (1, 4 * hidden)
        shapes[f"{direction}.U"] = (hidden, 4 * hidden)
        shapes[f"{direction}.b"] = (4 * hidden,)
    shapes["dense.weight"] = (config.feature_size,)
    shapes["dense.bias"] = (1,)
    return shapes


@dataclass
class ModelParams:
    """All trainable tensors, keyed by name in a fixed order"""
    tensors: "OrderedDict[str, np.ndarray]"

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    @property
    def names(self) -> List[str]:
        return list(self.tensors)

    @property
    def shapes(self) -> Dict[str, Tuple[int, ...]]:
        return {k: tuple(v.shape) for k, v in self.tensors.items()}

    @property
    def size(self) -> int:
        return int(sum(v.size for v in self.tensors.values()))

    def copy(self) -> "ModelParams":
        return ModelParams(OrderedDict((k, v.copy()) for k, v in self.tensors.items()))

    def zeros_like(self) -> "ModelParams":
        return ModelParams(OrderedDict((k, np.zeros_like(v)) for k, v in self.tensors.items()))

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.tensors.values())

    def lstm(self, direction: str) -> Dict[str, np.ndarray]:
        return {key: self.tensors[f"{direction}.{key}"] for key in ("W", "U", "b")}

    def matches(self, config: ModelConfig) -> bool:
        expected = param_shapes(config)
        return list(expected) == self.names and all(expected[k] == self.shapes[k] for k in expected)


def he_normal_init(config: ModelConfig, seed: int) -> ModelParams:
    """Weights ~ N(0, 2 / fan_in); biases zero except the LSTM forget gates (1.0)"""
    rng = np.random.default_rng(seed)
    hidden = config.lstm_hidden_units
    tensors: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for name, shape in param_shapes(config).items():
        if name.endswith(".bias") or name.endswith(".b"):
            value = np.zeros(shape)
            if name.endswith(".b"):
                value[hidden:2 * hidden] = 1.0
        else:
            fan_in = shape[1] * shape[2] if name.startswith("conv") else shape[0]
            value = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        tensors[name] = value
    return ModelParams(tensors)


# ----------------------------------------------------------------------
# Forward / backward
# ----------------------------------------------------------------------

def _as_input_batch(x, config: ModelConfig) -> np.ndarray:
    if isinstance(x, PreparedSeries):
        batch = x.values[None, :]
    elif isinstance(x, (list, tuple)) and x and isinstance(x[0], PreparedSeries):
        lengths = {p.padded_length for p in x}
        if len(lengths) != 1:
            raise ShapeMismatch(f"batch mixes padded lengths {sorted(lengths)}")
        batch = np.stack([p.values for p in x])
    else:
        batch = np.asarray(x, dtype=np.float64)
        if batch.ndim == 1:
            batch = batch[None, :]
    if batch.ndim != 2:
        raise ShapeMismatch(f"expected (batch, time) input, got shape {batch.shape}")
    if config.input_length is not None and batch.shape[1] != config.input_length:
        raise ShapeMismatch(f"model expects padded length {config.input_length}, got {batch.shape[1]}")
    return batch


def _site_names(config: ModelConfig) -> List[str]:
    return [f"conv{layer}" for layer in range(config.conv_layers)] + ["lstm"]


def _site_shape(site: str, config: ModelConfig, batch: int, steps: int) -> Tuple[int, ...]:
    if site == "lstm":
        return (batch, 2 * config.lstm_hidden_units)
    return (batch, config.conv_filters, steps)


def _site_rate(site: str, config: ModelConfig) -> float:
    return config.lstm_dropout_rate if site == "lstm" else config.conv_dropout_rate


def dropout_masks(config: ModelConfig, batch: int, steps: int, rng_seed: int) -> Dict[str, DropoutMask]:
    """One mask per dropout site, each seeded from (rng_seed, site name)"""
    return {
        site: make_dropout_mask(_site_shape(site, config, batch, steps), _site_rate(site, config), derive_seed(rng_seed, site))
        for site in _site_names(config)
    }


def _forward(batch: np.ndarray, params: ModelParams, config: ModelConfig,
             masks: Optional[Dict[str, DropoutMask]]) -> Tuple[np.ndarray, dict]:
    steps = batch.shape[1]
    conv_inputs, dropped = [], []
    h = batch[:, None, :]
    for layer in range(config.conv_layers):
        conv_inputs.append(h)
        z = conv1d_forward(h, params[f"conv{layer}.weight"], params[f"conv{layer}.bias"])
        d = dropout_apply(z, masks[f"conv{layer}"]) if masks else z
        h = relu(d)
        dropped.append(d)
    pooled = global_avg_pool(h)

    lstm_out, lstm_cache = bilstm_forward(batch[:, :, None], params.lstm("lstm_fwd"), params.lstm("lstm_bwd"))
    lstm_dropped = dropout_apply(lstm_out, masks["lstm"]) if masks else lstm_out

    features = np.concatenate([pooled, lstm_dropped], axis=1)
    y = features @ params["dense.weight"] + params["dense.bias"][0]
    cache = {
        "config": config,
        "params": params,
        "masks": masks,
        "steps": steps,
        "batch_size": batch.shape[0],
        "conv_inputs": conv_inputs,
        "dropped": dropped,
        "lstm": lstm_cache,
        "features": features,
    }
    return y, cache


def forward_batch(x, params: ModelParams, config: ModelConfig, dropout_on: bool,
                  rng_seed: int = 0) -> Tuple[np.ndarray, dict]:
    """Forward pass over a batch; one dropout mask draw covers the whole batch"""
    batch = _as_input_batch(x, config)
    masks = dropout_masks(config, batch.shape[0], batch.shape[1], rng_seed) if dropout_on else None
    return _forward(batch, params, config, masks)


def model_forward(x: PreparedSeries, params: ModelParams, config: ModelConfig, dropout_on: bool,
                  rng_seed: int = 0) -> Tuple[float, dict]:
    y, cache = forward_batch(x, params, config, dropout_on, rng_seed)
    if y.shape[0] != 1:
        raise ShapeMismatch("model_forward takes a single series; use forward_batch for batches")
    return float(y[0]), cache


def model_backward(cache: dict, d_y: Union[float, np.ndarray]) -> ModelParams:
    """Gradients of (d_y . y_hat) with respect to every parameter, dropout masks reused"""
    config: ModelConfig = cache["config"]
    params: ModelParams = cache["params"]
    if not params.matches(config):
        raise StaleCache("cached parameters do not match the cached model config")
    batch_size = cache["batch_size"]
    d_y = np.asarray(d_y, dtype=np.float64).ravel()
    if d_y.size == 1 and batch_size > 1:
        d_y = np.full(batch_size, d_y[0])
    if d_y.size != batch_size:
        raise StaleCache(f"d_y has {d_y.size} entries for a cached batch of {batch_size}")

    grads = params.zeros_like().tensors
    masks = cache["masks"]
    features = cache["features"]
    filters = config.conv_filters

    grads["dense.weight"] = features.T @ d_y
    grads["dense.bias"] = np.array([d_y.sum()])
    d_features = np.outer(d_y, params["dense.weight"])

    d_lstm = d_features[:, filters:]
    if masks:
        d_lstm = dropout_backward(d_lstm, masks["lstm"])
    for direction, g in zip(LSTM_DIRECTIONS, bilstm_backward(d_lstm, cache["lstm"])):
        for key, value in g.items():
            grads[f"{direction}.{key}"] = value

    d_h = global_avg_pool_backward(d_features[:, :filters], cache["steps"])
    for layer in reversed(range(config.conv_layers)):
        d_d = relu_backward(d_h, cache["dropped"][layer])
        d_z = dropout_backward(d_d, masks[f"conv{layer}"]) if masks else d_d
        d_h, d_w, d_b = conv1d_backward(d_z, cache["conv_inputs"][layer], params[f"conv{layer}.weight"])
        grads[f"conv{layer}.weight"] = d_w
        grads[f"conv{layer}.bias"] = d_b
    return ModelParams(grads)


# ----------------------------------------------------------------------
# Inference helpers
# ----------------------------------------------------------------------

def predict_batch(xs: Sequence, params: ModelParams, config: ModelConfig,
                  chunk_size: Optional[int] = None) -> np.ndarray:
    """Dropout-off predictions for many series"""
    batch = _as_input_batch(list(xs) if not isinstance(xs, np.ndarray) else xs, config)
    chunk = chunk_size or settings.posterior_chunk_size
    out = [_forward(batch[i:i + chunk], params, config, None)[0] for i in range(0, batch.shape[0], chunk)]
    return np.concatenate(out) if out else np.zeros(0)


def predict_passes(x: PreparedSeries, params: ModelParams, config: ModelConfig, seeds: Sequence[int],
                   chunk_size: Optional[int] = None) -> np.ndarray:
    """
    Dropout-on prediction for one series under each pass seed; entry i equals
    model_forward(x, ..., dropout_on=True, rng_seed=seeds[i]).
    """
    single = _as_input_batch(x, config)
    steps = single.shape[1]
    if config.conv_dropout_rate == 0.0 and config.lstm_dropout_rate == 0.0:
        # every mask keeps everything: all passes are the dropout-off prediction
        return np.full(len(seeds), _forward(single, params, config, None)[0][0])
    chunk = chunk_size or settings.posterior_chunk_size
    out = np.empty(len(seeds))
    for start in range(0, len(seeds), chunk):
        block = seeds[start:start + chunk]
        per_pass = [dropout_masks(config, 1, steps, s) for s in block]
        masks = {
            site: DropoutMask(
                np.concatenate([m[site].keep_flags for m in per_pass]),
                _site_rate(site, config),
                int(block[0]),
            )
            for site in _site_names(config)
        }
        batch = np.repeat(single, len(block), axis=0)
        out[start:start + len(block)] = _forward(batch, params, config, masks)[0]
    return out


def check_gradients(params: ModelParams, config: ModelConfig, xs, targets, dropout_on: bool = False,
                    rng_seed: int = 0, step: float = 1e-5) -> Dict[str, float]:
    """
    Worst elementwise error of analytic vs central-difference gradients of the
    batch MSE, per parameter tensor. Differences below 1e-8 count as zero; larger
    ones are measured relative to max(|a|, |n|).
    """
    from .training import mse_grad, mse_loss

    targets = np.asarray(targets, dtype=np.float64)

    def loss_at(p: ModelParams) -> float:
        y, _ = forward_batch(xs, p, config, dropout_on, rng_seed)
        return mse_loss(y, targets)

    y, cache = forward_batch(xs, params, config, dropout_on, rng_seed)
    analytic = model_backward(cache, mse_grad(y, targets))

    worst: Dict[str, float] = {}
    perturbed = params.copy()
    for name, tensor in perturbed.items():
        errors = []
        flat = tensor.reshape(-1)
        grad = analytic[name].reshape(-1)
        for k in range(flat.size):
            original = flat[k]
            flat[k] = original + step
            up = loss_at(perturbed)
            flat[k] = original - step
            down = loss_at(perturbed)
            flat[k] = original
            numeric = (up - down) / (2.0 * step)
            diff = abs(grad[k] - numeric)
            errors.append(0.0 if diff <= 1e-8 else diff / max(abs(grad[k]), abs(numeric)))
        worst[name] = float(max(errors)) if errors else 0.0
    return worst
