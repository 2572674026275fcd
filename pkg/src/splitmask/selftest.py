"""Fast built-in invariant checks behind the ``selftest`` subcommand."""

from __future__ import annotations

import numpy as np

from . import coding
from .attack import collusion_trial
from .nn import LayerSpec, linear_forward, weight_grad
from .privacy import PrivacyParams, mi_bound_single, mi_oracle_scalar, lemma_bound, paper_table_rows
from .protocol import Coordinator, ProtocolConfig, WorkerProfile, honest_workers


def _rel(a, b):
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300))


def check_scheme_constraints():
    worst = 0.0
    for K in range(1, 5):
        for M in (1, 2):
            s = coding.gen_scheme(K, M, 1, 0.1, seed=K * 10 + M)
            worst = max(worst, s.constraint_residual())
    return worst < 1e-10, f"max constraint residual {worst:.2e}"


def check_forward_backward_exactness():
    rng = np.random.default_rng(0)
    layers = [LayerSpec.dense(12, 5), LayerSpec.conv2d(2, 3, 3)]
    shapes = [(12,), (2, 6, 6)]
    worst = 0.0
    for layer, shape in zip(layers, shapes):
        W = rng.standard_normal(layer.weight_shape)
        for K in (1, 3):
            cfg = ProtocolConfig(K=K, M=1, E=1, seed=K, record_digests=False)
            coord = Coordinator([layer], honest_workers(cfg.P + cfg.E), cfg)
            coord.broadcast_weights({0: W})
            xs = [rng.standard_normal(shape) for _ in range(K)]
            rec = coord.masked_linear(0, xs, coord.new_batch())
            for y, x in zip(rec.outputs, xs):
                worst = max(worst, _rel(y, linear_forward(layer, W, x)))
            ds = [rng.standard_normal(y.shape) for y in rec.outputs]
            dW, _ = coord.masked_weight_grad(rec, ds)
            worst = max(worst, _rel(dW, sum(weight_grad(layer, d, x) for d, x in zip(ds, xs))))
    return worst < 1e-8, f"max relative decode error {worst:.2e}"


def check_integrity(trials=50):
    layer = LayerSpec.dense(10, 6)
    rng = np.random.default_rng(1)
    W = rng.standard_normal(layer.weight_shape)
    missed = false_pos = 0
    for t in range(trials):
        xs = [rng.standard_normal(10) for _ in range(2)]
        for faulty in (False, True):
            profiles = honest_workers(4)
            if faulty:
                profiles[t % 4] = WorkerProfile.faulty(t % 4, 1e-2)
            cfg = ProtocolConfig(seed=t, record_digests=False)
            coord = Coordinator([layer], profiles, cfg)
            coord.broadcast_weights({0: W})
            rec = coord.masked_linear(0, xs, coord.new_batch())
            if faulty and rec.verdict.passed:
                missed += 1
            if not faulty and not rec.verdict.passed:
                false_pos += 1
    return missed == 0 and false_pos == 0, f"{missed} missed, {false_pos} false positives over {trials} trials"


def check_bounds():
    rows = paper_table_rows()
    got = [r["bound_single"] for r in rows[:4]]
    ok = got == [1.25e-6, 8e-7, 2e-7, 5e-8]
    p = PrivacyParams(K=2, C1=1.0, sigma2=4e8, alpha_max=np.sqrt(10.0), alpha_min=1.0)
    ok = ok and abs(mi_bound_single(p) - 2.5e-8) < 1e-20
    rng = np.random.default_rng(2)
    worst = -np.inf
    for _ in range(200):
        C1, a, b = rng.uniform(0.1, 2), rng.uniform(-2, 2), rng.uniform(0.1, 2)
        s2 = 10 ** rng.uniform(-2, 4)
        worst = max(worst, mi_oracle_scalar(C1, a, b, s2) - lemma_bound(C1, a, b, s2))
    return ok and worst <= 1e-6, f"table {got}, oracle excess {worst:.2e}"


def check_collusion():
    lo = min(collusion_trial(1, 1, 1, 1e8, 32, seed=s)["mse"] for s in range(10))
    hi = max(collusion_trial(1, 1, 2, 1e8, 32, seed=s)["mse"] for s in range(10))
    return lo >= 0.5 and hi <= 1e-8, f"|S|=M min mse {lo:.2e}, |S|=M+1 max mse {hi:.2e}"


def check_determinism():
    def run():
        layer = LayerSpec.dense(6, 3)
        coord = Coordinator([layer], honest_workers(4), ProtocolConfig(seed=5))
        coord.broadcast_weights({0: np.arange(18.0).reshape(3, 6)})
        coord.masked_linear(0, [np.ones(6), np.arange(6.0)], coord.new_batch())
        return coord.transcript.to_jsonl()
    return run() == run(), "transcripts identical"


CHECKS = [
    ("scheme constraints", check_scheme_constraints),
    ("forward/backward exactness", check_forward_backward_exactness),
    ("integrity detection", check_integrity),
    ("leakage bounds", check_bounds),
    ("collusion tightness", check_collusion),
    ("determinism", check_determinism),
]


def run_selftest(out=print):
    ok_all = True
    for name, fn in CHECKS:
        try:
            ok, detail = fn()
        except Exception as exc:  # report, keep going
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        ok_all &= bool(ok)
        out(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    out(f"selftest: {'all passed' if ok_all else 'FAILURES'}")
    return ok_all
