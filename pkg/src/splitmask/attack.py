"""Reconstruction attacks by colluding workers that pool their encoded payloads."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .nn import LayerSpec
from .privacy import PrivacyParams, mi_bound_colluding
from .protocol import Coordinator, ProtocolConfig, WorkerProfile
from .serialize import derive_seed

KNOWLEDGE = ("none", "coefficients-known")
LSTSQ_RCOND = 1e-9
ATTACK_GROUP = 0


@dataclass
class CollusionLog:
    group_id: int
    payloads: list = field(default_factory=list)  # (encoding_index, tensor)
    assumed_knowledge: str = "coefficients-known"

    def __post_init__(self):
        if self.assumed_knowledge not in KNOWLEDGE:
            raise ValueError(f"assumed_knowledge must be one of {KNOWLEDGE}")

    @classmethod
    def from_board(cls, board, group_id, batch_id, layer_ref=0, assumed_knowledge="coefficients-known"):
        return cls(group_id, board.payloads(group_id, batch_id, layer_ref), assumed_knowledge)


def reconstruct_least_squares(log: CollusionLog, scheme, shape=None, truth=None, prior_mean=0.0):
    """Estimate the K inputs from the pooled encodings.

    With known coefficients the attacker solves ``A[:, S]^T Z = observed`` for
    the stacked ``Z = [X; R]`` in the least-squares, minimum-norm sense. An
    attacker without coefficients (or without any payload) can only return the
    prior mean. Returns ``(estimates, mse_per_input)``; the MSE list is
    ``None`` unless ``truth`` is given.
    """
    K = scheme.K
    if shape is None:
        if not log.payloads:
            raise ValueError("shape is required when the log is empty")
        shape = np.shape(log.payloads[0][1])
    if log.assumed_knowledge == "none" or not log.payloads:
        est = [np.full(shape, prior_mean, dtype=np.float64) for _ in range(K)]
    else:
        cols = [idx for idx, _ in log.payloads]
        A_S = scheme.full_matrix()[:, cols]
        obs = np.stack([np.asarray(t, dtype=np.float64).ravel() for _, t in log.payloads])
        Z, *_ = np.linalg.lstsq(A_S.T, obs, rcond=LSTSQ_RCOND)
        est = [Z[k].reshape(shape) for k in range(K)]
    mse = None
    if truth is not None:
        mse = [float(np.mean((e - np.asarray(t, dtype=np.float64)) ** 2)) for e, t in zip(est, truth)]
    return est, mse


def reconstruct_lmmse(log: CollusionLog, scheme, sigma2, input_var=1.0, noise_mean=0.0, shape=None,
                      truth=None):
    """Bayes-optimal linear estimate under Gaussian priors on inputs and noise.

    A stronger attacker than least squares: it shrinks towards the prior, so
    its MSE never exceeds the prior variance by more than estimation noise.
    """
    K, M = scheme.K, scheme.M
    if shape is None:
        shape = np.shape(log.payloads[0][1])
    if log.assumed_knowledge == "none" or not log.payloads:
        return reconstruct_least_squares(log, scheme, shape, truth)
    cols = [idx for idx, _ in log.payloads]
    A_S = scheme.full_matrix()[:, cols]
    mu = np.array([0.0] * K + [noise_mean] * M)
    cov = np.diag([input_var] * K + [sigma2] * M)
    obs = np.stack([np.asarray(t, dtype=np.float64).ravel() for _, t in log.payloads])
    gain = cov @ A_S @ np.linalg.pinv(A_S.T @ cov @ A_S, rcond=LSTSQ_RCOND)
    Z = mu[:, None] + gain @ (obs - (A_S.T @ mu)[:, None])
    est = [Z[k].reshape(shape) for k in range(K)]
    mse = None
    if truth is not None:
        mse = [float(np.mean((e - np.asarray(t, dtype=np.float64)) ** 2)) for e, t in zip(est, truth)]
    return est, mse


def collusion_trial(K, M, n_colluders, sigma2, dim=64, seed=0, C_min=0.1, input_var=1.0,
                    assumed_knowledge="coefficients-known", estimator="least-squares"):
    """Run one masked offload with ``n_colluders`` colluding workers and attack their pool.

    Inputs are i.i.d. Normal(0, input_var). Colluders hold encodings
    ``0 .. n_colluders - 1``. Returns a dict with the attack MSE and the
    empirical input variance.
    """
    P = K + M
    if not 0 <= n_colluders <= P:
        raise ValueError(f"n_colluders must lie in [0, {P}]")
    rng = np.random.default_rng(derive_seed(seed, 0))
    xs = [rng.standard_normal(dim) * math.sqrt(input_var) for _ in range(K)]
    profiles = [WorkerProfile.colluding(i, ATTACK_GROUP) if i < n_colluders else WorkerProfile.honest(i)
                for i in range(P)]
    cfg = ProtocolConfig(K=K, M=M, E=0, sigma2=sigma2, C_min=C_min, seed=seed, record_digests=False)
    layer = LayerSpec.dense(dim, 1)
    coord = Coordinator([layer], profiles, cfg)
    coord.broadcast_weights({0: np.ones((1, dim))})
    batch_id = coord.new_batch()
    rec = coord.masked_linear(0, xs, batch_id)
    log = CollusionLog.from_board(coord.board, ATTACK_GROUP, batch_id, assumed_knowledge=assumed_knowledge)
    if estimator == "lmmse":
        _, mse = reconstruct_lmmse(log, rec.scheme, sigma2, input_var, shape=(dim,), truth=xs)
    else:
        _, mse = reconstruct_least_squares(log, rec.scheme, shape=(dim,), truth=xs)
    return {"seed": seed, "colluders": n_colluders, "M": M, "sigma2": sigma2, "mse": float(np.mean(mse)),
            "input_var": float(np.mean(np.square(xs))), "payloads": len(log.payloads)}


def leakage_proxy(input_var, mse):
    """``max(0, 0.5 ln(Var / mse))`` nats; the Gaussian rate needed to reach ``mse``."""
    if mse <= 0:
        return math.inf
    return max(0.0, 0.5 * math.log(input_var / mse))


def leakage_report(trials, p: PrivacyParams, n_colluders=None, dim=64, seed=0, C_min=0.1, input_var=1.0):
    """One row per trial: seed, colluders, M, sigma2, mse, bound_colluding."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    n_colluders = p.M if n_colluders is None else n_colluders
    bound = mi_bound_colluding(p)
    rows = []
    for t in range(trials):
        s = derive_seed(seed, t)
        r = collusion_trial(p.K, p.M, n_colluders, p.sigma2, dim, s, C_min, input_var)
        rows.append({"seed": s, "colluders": n_colluders, "M": p.M, "sigma2": p.sigma2, "mse": r["mse"],
                     "bound_colluding": bound})
    return rows
