"""
Float64 kernels for the valence network: same-padded 1-D convolution, ReLU,
global average pooling, inverted dropout and a unidirectional/bidirectional
LSTM, each with its hand-derived backward pass.

Every kernel accepts an optional leading batch axis.
"""
from typing import Dict, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from ..core.errors import NonFiniteActivation, ShapeMismatch
from ..models.domain import DropoutMask

LstmParams = Dict[str, np.ndarray]  # W (D, 4H), U (H, 4H), b (4H,); gate order i, f, g, o


def _as_batch(x: np.ndarray, ndim: int) -> Tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == ndim:
        return x[None], True
    if x.ndim == ndim + 1:
        return x, False
    raise ShapeMismatch(f"expected {ndim}-D input (or batched {ndim + 1}-D), got shape {x.shape}")


# ----------------------------------------------------------------------
# Convolution
# ----------------------------------------------------------------------

def same_padding(window: int) -> Tuple[int, int]:
    left = (window - 1) // 2
    return left, window - 1 - left


def conv1d_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Stride-1 cross-correlation, zero 'same' padding: x (C, T) -> (F, T)"""
    xb, squeeze = _as_batch(x, 2)
    filters, channels, window = weight.shape
    if xb.shape[1] != channels:
        raise ShapeMismatch(f"conv expects {channels} input channels, got {xb.shape[1]}")
    if bias.shape != (filters,):
        raise ShapeMismatch(f"conv bias shape {bias.shape} != ({filters},)")
    left, right = same_padding(window)
    padded = np.pad(xb, ((0, 0), (0, 0), (left, right)))
    windows = sliding_window_view(padded, window, axis=2)  # (B, C, T, k)
    out = np.einsum("fcj,bctj->bft", weight, windows, optimize=True) + bias[None, :, None]
    return out[0] if squeeze else out


def conv1d_backward(dout: np.ndarray, x: np.ndarray, weight: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns (dx, dweight, dbias) for conv1d_forward"""
    xb, squeeze = _as_batch(x, 2)
    db_out, _ = _as_batch(dout, 2)
    window = weight.shape[2]
    steps = xb.shape[2]
    left, right = same_padding(window)
    padded = np.pad(xb, ((0, 0), (0, 0), (left, right)))
    windows = sliding_window_view(padded, window, axis=2)
    dweight = np.einsum("bft,bctj->fcj", db_out, windows, optimize=True)
    dbias = db_out.sum(axis=(0, 2))
    dpadded = np.zeros_like(padded)
    for j in range(window):
        dpadded[:, :, j:j + steps] += np.einsum("fc,bft->bct", weight[:, :, j], db_out, optimize=True)
    dx = dpadded[:, :, left:left + steps]
    return (dx[0] if squeeze else dx), dweight, dbias


# ----------------------------------------------------------------------
# Elementwise / pooling
# ----------------------------------------------------------------------

def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


def relu_backward(dout: np.ndarray, x: np.ndarray) -> np.ndarray:
    return dout * (x > 0.0)


def global_avg_pool(x: np.ndarray) -> np.ndarray:
    """Mean over the last (time) axis: (F, T) -> (F,)"""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] < 1:
        raise ShapeMismatch("global_avg_pool needs at least one time step")
    return x.mean(axis=-1)


def global_avg_pool_backward(dout: np.ndarray, steps: int) -> np.ndarray:
    return np.repeat(dout[..., None] / steps, steps, axis=-1)


# ----------------------------------------------------------------------
# Dropout
# ----------------------------------------------------------------------

def make_dropout_mask(shape: Tuple[int, ...], rate: float, rng_seed: int) -> DropoutMask:
    """Keep flags are a pure function of (rate, rng_seed, shape)"""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        keep = np.ones(shape, dtype=bool)
    else:
        keep = np.random.default_rng(rng_seed).random(shape) >= rate
    return DropoutMask(keep, rate, int(rng_seed))


def dropout_apply(x: np.ndarray, mask: DropoutMask) -> np.ndarray:
    """Inverted dropout: kept entries scaled by 1 / (1 - rate), dropped entries zero"""
    x = np.asarray(x, dtype=np.float64)
    if mask.keep_flags.shape != x.shape:
        raise ShapeMismatch(f"dropout mask shape {mask.keep_flags.shape} != input shape {x.shape}")
    if mask.rate == 0.0:
        return x.copy()
    return x * mask.keep_flags * mask.scale


def dropout_backward(dout: np.ndarray, mask: DropoutMask) -> np.ndarray:
    if mask.rate == 0.0:
        return dout
    return dout * mask.keep_flags * mask.scale


# ----------------------------------------------------------------------
# LSTM
# ----------------------------------------------------------------------

def lstm_forward(x: np.ndarray, params: LstmParams) -> Tuple[np.ndarray, dict]:
    """
    Run one LSTM direction over x (T, D) or (B, T, D) from zero state.
    Returns the final hidden state (H,) / (B, H) and the step cache for BPTT.
    """
    xb, squeeze = _as_batch(x, 2)
    W, U, b = params["W"], params["U"], params["b"]
    batch, steps, features = xb.shape
    if W.shape[0] != features:
        raise ShapeMismatch(f"LSTM expects {W.shape[0]} input features, got {features}")
    hidden = U.shape[0]

    h = np.zeros((batch, hidden))
    c = np.zeros((batch, hidden))
    hs, cs, gates = [h], [c], []
    for t in range(steps):
        z = xb[:, t, :] @ W + h @ U + b
        i = expit(z[:, :hidden])
        f = expit(z[:, hidden:2 * hidden])
        g = np.tanh(z[:, 2 * hidden:3 * hidden])
        o = expit(z[:, 3 * hidden:])
        c = f * c + i * g
        h = o * np.tanh(c)
        gates.append((i, f, g, o))
        hs.append(h)
        cs.append(c)

    if not (np.all(np.isfinite(h)) and np.all(np.isfinite(c))):
        raise NonFiniteActivation("LSTM state became non-finite")
    cache = {"x": xb, "hs": hs, "cs": cs, "gates": gates, "params": params, "squeeze": squeeze}
    return (h[0] if squeeze else h), cache


def lstm_backward(dh_final: np.ndarray, cache: dict) -> LstmParams:
    """Backpropagation through time from a gradient on the final hidden state"""
    params = cache["params"]
    W, U = params["W"], params["U"]
    xb, hs, cs, gates = cache["x"], cache["hs"], cache["cs"], cache["gates"]
    hidden = U.shape[0]

    dW = np.zeros_like(W)
    dU = np.zeros_like(U)
    db = np.zeros_like(params["b"])
    dh = np.array(dh_final, dtype=np.float64).reshape(xb.shape[0], hidden)
    dc = np.zeros_like(dh)

    for t in reversed(range(len(gates))):
        i, f, g, o = gates[t]
        c, c_prev, h_prev = cs[t + 1], cs[t], hs[t]
        tc = np.tanh(c)
        do = dh * tc
        dc = dc + dh * o * (1.0 - tc ** 2)
        di = dc * g
        dg = dc * i
        df = dc * c_prev
        dz = np.concatenate(
            [di * i * (1.0 - i), df * f * (1.0 - f), dg * (1.0 - g ** 2), do * o * (1.0 - o)],
            axis=1,
        )
        dW += xb[:, t, :].T @ dz
        dU += h_prev.T @ dz
        db += dz.sum(axis=0)
        dh = dz @ U.T
        dc = dc * f
    return {"W": dW, "U": dU, "b": db}


def bilstm_forward(x: np.ndarray, forward_params: LstmParams, backward_params: LstmParams) -> Tuple[np.ndarray, dict]:
    """[h_fwd(T), h_bwd(1)] for x (T, D) or (B, T, D)"""
    xb, squeeze = _as_batch(x, 2)
    h_fwd, cache_fwd = lstm_forward(xb, forward_params)
    h_bwd, cache_bwd = lstm_forward(xb[:, ::-1, :], backward_params)
    out = np.concatenate([h_fwd, h_bwd], axis=1)
    return (out[0] if squeeze else out), {"fwd": cache_fwd, "bwd": cache_bwd}


def bilstm_backward(dout: np.ndarray, cache: dict) -> Tuple[LstmParams, LstmParams]:
    dout = np.atleast_2d(dout)
    hidden = dout.shape[1] // 2
    return lstm_backward(dout[:, :hidden], cache["fwd"]), lstm_backward(dout[:, hidden:], cache["bwd"])
