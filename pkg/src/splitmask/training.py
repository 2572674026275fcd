"""Training and inference with every bilinear layer offloaded through the masking protocol.

The coordinator keeps plaintext activations (for the nonlinear backward pass)
and the encoded layer inputs of the current virtual batch (reused by the
weight-gradient equations). Nonlinearities, bias terms, the loss, and the SGD
update all stay on the coordinator.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .errors import ConfigError, IntegrityError, NonFiniteLossError
from .nn import (SEED_INIT, SEED_PROTOCOL, Model, TrainConfig, TrainResult, _epoch_metrics, add_bias,
                 batch_schedule, bias_grad, flat_params, input_grad, nonlinear_backward, nonlinear_forward,
                 sgd_update, softmax_cross_entropy)
from .protocol import STREAM_GRAD, Coordinator, ProtocolConfig
from .serialize import derive_seed

POLICIES = ("abort", "retry-batch", "log-and-continue")


@dataclass
class ProtocolTrainResult(TrainResult):
    transcript: object = None
    verdicts: list = field(default_factory=list)


def session_config(pcfg: ProtocolConfig, precision, seed):
    """Protocol settings for a training or inference session under ``seed``."""
    return replace(pcfg, precision=precision, seed=derive_seed(seed, SEED_PROTOCOL))


def _check_verdict(verdict, log, where):
    if verdict is None:
        return True
    log.append((where, verdict))
    return verdict.passed


class _VirtualBatchFailed(Exception):
    def __init__(self, where, verdict):
        super().__init__(where)
        self.where = where
        self.verdict = verdict


def _run_virtual_batch(coord: Coordinator, model: Model, params, xs, ys, strict, log):
    """Forward and backward for one virtual batch of K examples.

    Returns ``(loss_sum, grads)``; ``grads`` maps layer index to summed
    ``W``/``b`` gradients. With ``strict`` the first failed verdict raises
    :class:`_VirtualBatchFailed`; otherwise failures are only logged.
    """
    batch_id = coord.new_batch()
    dtype = coord.cfg.dtype
    first = model.first_param_layer()
    acts = [list(xs)]
    records = {}
    for l, (layer, p) in enumerate(zip(model.layers, params)):
        h = acts[-1]
        if layer.bilinear:
            rec = coord.masked_linear(l, h, batch_id)
            if not _check_verdict(rec.verdict, log, ("forward", batch_id, l)) and strict:
                raise _VirtualBatchFailed(("forward", batch_id, l), rec.verdict)
            records[l] = rec
            acts.append([add_bias(layer, y, p["b"]) for y in rec.outputs])
        else:
            acts.append([nonlinear_forward(layer, x) for x in h])
    loss_sum = 0.0
    deltas = []
    for logits, label in zip(acts[-1], ys):
        loss, d = softmax_cross_entropy(logits, int(label))
        if not np.isfinite(loss):
            raise NonFiniteLossError(f"non-finite loss in virtual batch {batch_id}")
        loss_sum += loss
        deltas.append(d.astype(dtype, copy=False))
    grads = {}
    for l in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[l]
        if layer.bilinear:
            dW, verdict = coord.masked_weight_grad(records[l], deltas)
            if not _check_verdict(verdict, log, ("backward", batch_id, l)) and strict:
                raise _VirtualBatchFailed(("backward", batch_id, l), verdict)
            db = bias_grad(layer, deltas[0])
            for d in deltas[1:]:
                db = db + bias_grad(layer, d)
            grads[l] = {"W": dW, "b": db}
            if l > first:
                in_shape = acts[l][0].shape
                if coord.cfg.offload_input_grad:
                    rec = coord.masked_linear(l, deltas, batch_id, stream=STREAM_GRAD, input_shape=in_shape)
                    if not _check_verdict(rec.verdict, log, ("input_grad", batch_id, l)) and strict:
                        raise _VirtualBatchFailed(("input_grad", batch_id, l), rec.verdict)
                    deltas = rec.outputs
                else:
                    deltas = [input_grad(layer, params[l]["W"], d, in_shape) for d in deltas]
        elif l > first:
            deltas = [nonlinear_backward(layer, x, d) for x, d in zip(acts[l], deltas)]
    return loss_sum, grads


def _public_weights(model, params):
    return {l: p["W"] for l, p in enumerate(params) if p is not None}


def train_protocol(model: Model, cfg: TrainConfig, dataset, workers, pcfg: Optional[ProtocolConfig] = None,
                   policy="abort", max_retries=3, record_wall_time=False) -> ProtocolTrainResult:
    """Masked-offload SGD with the same initial weights and data order as the plaintext trainer.

    Integrity ``policy``: ``abort`` raises :class:`IntegrityError` on the first
    failed verdict; ``retry-batch`` re-runs the virtual batch with a fresh
    scheme up to ``max_retries`` times before aborting; ``log-and-continue``
    counts the failure and keeps the decoded values.
    """
    if policy not in POLICIES:
        raise ConfigError(f"integrity policy must be one of {POLICIES}")
    pcfg = session_config(pcfg or ProtocolConfig(), cfg.precision, cfg.seed)
    K = pcfg.K
    if cfg.batch_size % K:
        raise ConfigError(f"batch_size {cfg.batch_size} is not a multiple of K={K}")
    dtype = cfg.dtype
    params = model.init_params(derive_seed(cfg.seed, SEED_INIT), dtype)
    coord = Coordinator(model.layers, workers, pcfg)
    coord.broadcast_weights(_public_weights(model, params))
    X = dataset.X.astype(dtype, copy=False)
    result = ProtocolTrainResult(params=params, transcript=coord.transcript)
    epoch_losses, epoch_failures, cur_epoch, t0 = [], 0, 0, time.perf_counter()
    step = 0
    for epoch, idx in batch_schedule(len(X), cfg):
        if epoch != cur_epoch:
            result.metrics.append(_epoch_metrics(model, params, cur_epoch, epoch_losses, dataset,
                                                 epoch_failures, t0, record_wall_time))
            epoch_losses, epoch_failures, cur_epoch, t0 = [], 0, epoch, time.perf_counter()
        grads = {l: {"W": np.zeros_like(p["W"]), "b": np.zeros_like(p["b"])}
                 for l, p in enumerate(params) if p is not None}
        batch_loss = 0.0
        for start in range(0, len(idx), K):
            sel = idx[start:start + K]
            xs, ys = [X[i] for i in sel], dataset.y[sel]
            attempt = 0
            while True:
                log = []
                try:
                    loss, g = _run_virtual_batch(coord, model, params, xs, ys, policy != "log-and-continue", log)
                except _VirtualBatchFailed as exc:
                    epoch_failures += 1
                    result.integrity_failures += 1
                    result.verdicts.extend(log)
                    attempt += 1
                    if policy == "abort" or attempt > max_retries:
                        raise IntegrityError(f"integrity check failed at {exc.where[0]} of virtual batch "
                                             f"{exc.where[1]}, layer {exc.where[2]}: residual "
                                             f"{exc.verdict.max_residual:.3e} >= tau {exc.verdict.tau:.3e}",
                                             exc.verdict) from None
                    continue
                failed = sum(1 for _, v in log if not v.passed)
                epoch_failures += failed
                result.integrity_failures += failed
                result.verdicts.extend(log)
                break
            batch_loss += loss
            for l in grads:
                grads[l]["W"] += g[l]["W"]
                grads[l]["b"] += g[l]["b"]
        for l, g in grads.items():
            params[l]["W"] = sgd_update(params[l]["W"], g["W"], cfg.learning_rate, len(idx))
            params[l]["b"] = sgd_update(params[l]["b"], g["b"], cfg.learning_rate, len(idx))
        coord.broadcast_weights(_public_weights(model, params))
        step += 1
        result.losses.append(batch_loss / len(idx))
        epoch_losses.append(batch_loss / len(idx))
        if step % cfg.log_every == 0:
            result.trajectory.append((step, flat_params(params)))
    result.metrics.append(_epoch_metrics(model, params, cur_epoch, epoch_losses, dataset, epoch_failures, t0,
                                         record_wall_time))
    result.params = params
    return result


@dataclass
class InferResult:
    logits: np.ndarray
    predictions: np.ndarray
    integrity_failures: int
    transcript: object


def infer_protocol(model: Model, params, inputs, workers, pcfg: Optional[ProtocolConfig] = None, seed=0,
                   policy="abort", precision=None) -> InferResult:
    """Masked forward pass over ``inputs`` in virtual batches of K.

    The last virtual batch is padded with zero inputs whose outputs are dropped.
    """
    if policy not in POLICIES:
        raise ConfigError(f"integrity policy must be one of {POLICIES}")
    pcfg = pcfg or ProtocolConfig()
    pcfg = session_config(pcfg, precision or pcfg.precision, seed)
    dtype = pcfg.dtype
    params = [None if p is None else {k: v.astype(dtype) for k, v in p.items()} for p in params]
    coord = Coordinator(model.layers, workers, pcfg)
    coord.broadcast_weights(_public_weights(model, params))
    inputs = np.asarray(inputs, dtype=dtype)
    K = pcfg.K
    if len(inputs) == 0:
        return InferResult(np.zeros((0, 0), dtype=dtype), np.zeros(0, dtype=np.int64), 0, coord.transcript)
    logits, failures = [], 0
    for start in range(0, len(inputs), K):
        xs = list(inputs[start:start + K])
        real = len(xs)
        xs += [np.zeros_like(inputs[0])] * (K - real)
        attempt = 0
        while True:
            batch_id = coord.new_batch()
            h = xs
            bad = None
            for l, (layer, p) in enumerate(zip(model.layers, params)):
                if layer.bilinear:
                    rec = coord.masked_linear(l, h, batch_id)
                    if rec.verdict is not None and not rec.verdict.passed and bad is None:
                        bad = rec.verdict
                    h = [add_bias(layer, y, p["b"]) for y in rec.outputs]
                else:
                    h = [nonlinear_forward(layer, x) for x in h]
            if bad is None:
                break
            failures += 1
            attempt += 1
            if policy == "log-and-continue":
                break
            if policy == "abort" or attempt > 3:
                raise IntegrityError(f"integrity check failed during inference: residual "
                                     f"{bad.max_residual:.3e} >= tau {bad.tau:.3e}", bad)
        logits.extend(h[:real])
    logits = np.array(logits).reshape(len(inputs), -1)
    return InferResult(logits, logits.argmax(axis=1), failures, coord.transcript)
