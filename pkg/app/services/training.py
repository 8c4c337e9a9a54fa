import logging
from collections import OrderedDict
from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np

from ..core.config import ModelConfig, derive_seed
from ..core.errors import EmptyDataset, LengthMismatch, NonFiniteLoss, ShapeMismatch
from ..models.domain import EpochRecord, TrainHistory, TrialSample
from .network import ModelParams, forward_batch, he_normal_init, model_backward, predict_batch

logger = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPSILON = 1e-8


def mse_loss(predictions, targets) -> float:
    p = np.asarray(predictions, dtype=np.float64).ravel()
    t = np.asarray(targets, dtype=np.float64).ravel()
    if p.size != t.size:
        raise LengthMismatch(f"{p.size} predictions vs {t.size} targets")
    if p.size == 0:
        raise LengthMismatch("mse_loss needs at least one prediction")
    return float(np.mean((p - t) ** 2))


def mse_grad(predictions, targets) -> np.ndarray:
    """d(mse)/d(prediction) = 2 (pred - target) / n"""
    p = np.asarray(predictions, dtype=np.float64).ravel()
    t = np.asarray(targets, dtype=np.float64).ravel()
    if p.size != t.size:
        raise LengthMismatch(f"{p.size} predictions vs {t.size} targets")
    return 2.0 * (p - t) / p.size


@dataclass
class AdamMoments:
    first: ModelParams
    second: ModelParams

    @classmethod
    def zeros(cls, params: ModelParams) -> "AdamMoments":
        return cls(params.zeros_like(), params.zeros_like())


def adam_step(params: ModelParams, grads: ModelParams, moments: AdamMoments, step_index: int,
              learning_rate: float) -> Tuple[ModelParams, AdamMoments]:
    """One bias-corrected Adam update; returns new parameters and moments"""
    if step_index < 1:
        raise ValueError(f"step_index must be >= 1, got {step_index}")
    if grads.shapes != params.shapes:
        raise ShapeMismatch("gradient shapes do not match parameter shapes")

    bc1 = 1.0 - ADAM_BETA1 ** step_index
    bc2 = 1.0 - ADAM_BETA2 ** step_index
    new_params, new_first, new_second = OrderedDict(), OrderedDict(), OrderedDict()
    for name, value in params.items():
        g = grads[name]
        m = ADAM_BETA1 * moments.first[name] + (1.0 - ADAM_BETA1) * g
        v = ADAM_BETA2 * moments.second[name] + (1.0 - ADAM_BETA2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        new_params[name] = value - learning_rate * m_hat / (np.sqrt(v_hat) + ADAM_EPSILON)
        new_first[name] = m
        new_second[name] = v
    return ModelParams(new_params), AdamMoments(ModelParams(new_first), ModelParams(new_second))


def stack_samples(samples: Sequence[TrialSample], config: ModelConfig) -> Tuple[np.ndarray, np.ndarray]:
    """Inputs (N, T) and [0, 1] targets for a list of trials"""
    lengths = {s.prepared.padded_length for s in samples}
    if len(lengths) > 1:
        raise ShapeMismatch(f"samples mix padded lengths {sorted(lengths)}")
    x = np.stack([s.prepared.values for s in samples])
    if config.input_length is not None and x.shape[1] != config.input_length:
        raise ShapeMismatch(f"samples padded to {x.shape[1]}, model expects {config.input_length}")
    y = np.array([s.target for s in samples], dtype=np.float64)
    return x, y


def evaluate_mse(params: ModelParams, config: ModelConfig, samples: Sequence[TrialSample]) -> float:
    """Dropout-off MSE over a sample list"""
    x, y = stack_samples(samples, config)
    return mse_loss(predict_batch(x, params, config), y)


def train(config: ModelConfig, train_set: Sequence[TrialSample], val_set: Sequence[TrialSample],
          seed: int) -> Tuple[ModelParams, TrainHistory]:
    """
    Adam on mini-batch MSE for `config.epochs` epochs. The learning rate halves
    (down to `lr_floor`) after `lr_patience_epochs` epochs without a new best
    validation MSE; the parameters from the best validation epoch are returned.
    """
    if not train_set:
        raise EmptyDataset("training set is empty")
    if not val_set:
        raise EmptyDataset("validation set is empty")

    x_train, y_train = stack_samples(train_set, config)
    x_val, y_val = stack_samples(val_set, config)
    if x_train.shape[1] != x_val.shape[1]:
        raise ShapeMismatch(f"train length {x_train.shape[1]} != validation length {x_val.shape[1]}")

    params = he_normal_init(config, derive_seed(seed, "init"))
    moments = AdamMoments.zeros(params)
    history = TrainHistory()
    best_params = params.copy()
    learning_rate = config.lr_initial
    since_best = 0
    step = 0
    n = x_train.shape[0]

    logger.info(
        f"Training on {n} trials ({x_val.shape[0]} validation), length {x_train.shape[1]}, "
        f"{config.epochs} epochs, batch {config.batch_size}"
    )
    for epoch in range(config.epochs):
        order = np.random.default_rng(derive_seed(seed, "shuffle", epoch)).permutation(n)
        squared_error = 0.0
        for batch_index, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start:start + config.batch_size]
            y_hat, cache = forward_batch(x_train[idx], params, config, True, derive_seed(seed, "dropout", epoch, batch_index))
            loss = mse_loss(y_hat, y_train[idx])
            if not np.isfinite(loss):
                raise NonFiniteLoss(epoch, loss)
            squared_error += loss * idx.size
            grads = model_backward(cache, mse_grad(y_hat, y_train[idx]))
            step += 1
            params, moments = adam_step(params, grads, moments, step, learning_rate)

        train_mse = squared_error / n
        val_mse = mse_loss(predict_batch(x_val, params, config), y_val)
        if not np.isfinite(val_mse):
            raise NonFiniteLoss(epoch, val_mse)
        history.epochs.append(EpochRecord(epoch, train_mse, val_mse, learning_rate))

        if val_mse < history.best_val_mse:
            history.best_val_mse = val_mse
            history.best_epoch = epoch
            best_params = params.copy()
            since_best = 0
        else:
            since_best += 1
            if since_best >= config.lr_patience_epochs:
                halved = max(learning_rate / 2.0, config.lr_floor)
                if halved < learning_rate:
                    logger.info(f"Epoch {epoch}: no improvement for {since_best} epochs, lr {learning_rate:g} -> {halved:g}")
                learning_rate = halved
                since_best = 0

        if config.log_every and (epoch + 1) % config.log_every == 0:
            logger.info(f"Epoch {epoch + 1}/{config.epochs}: train {train_mse:.5f} val {val_mse:.5f} lr {learning_rate:g}")

    logger.info(f"Best validation MSE {history.best_val_mse:.5f} at epoch {history.best_epoch}")
    return best_params, history
