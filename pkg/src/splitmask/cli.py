"""Command-line entry point.

Exit codes: 0 success, 2 configuration or input error, 3 integrity abort,
1 any other failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import config as config_mod
from .attack import leakage_report
from .data import load_dataset
from .errors import ConfigError, IngestionError, InsufficientWorkersError, IntegrityError, SplitMaskError
from .nn import LayerSpec, predict, train_plaintext
from .privacy import DISCREPANCY_NOTE, PrivacyParams, direct_rows, paper_table_rows
from .protocol import Coordinator, ProtocolConfig, WorkerProfile, honest_workers
from .selftest import run_selftest
from .serialize import derive_seed, dumps17, fmt17
from .training import infer_protocol, train_protocol

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_INTEGRITY = 0, 1, 2, 3
COMMANDS = ("train", "infer", "analyze-privacy", "attack-demo", "verify-integrity", "selftest")

PRIVACY_COLUMNS = ["K", "M", "C1", "sigma2", "alpha_ratio", "bound_single", "bound_joint", "bound_colluding",
                   "perfect_privacy_f32", "source"]
ATTACK_COLUMNS = ["seed", "colluders", "M", "sigma2", "mse", "bound_colluding"]
INTEGRITY_COLUMNS = ["trial", "scenario", "stage", "passed", "max_residual", "offending_index"]


def _cell(v):
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return fmt17(v)
    if v is None:
        return ""
    return str(v)


def write_csv(path, columns, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_cell(r[c]) for c in columns])


def write_jsonl(path, records):
    with open(path, "w") as fh:
        for r in records:
            fh.write(dumps17(r) + "\n")


def _dataset(cfg, model):
    ds = load_dataset(cfg["dataset"])
    return ds.reshape(model.input_shape)


def _params_to_json(params):
    return [None if p is None else {"W": p["W"], "b": p["b"]} for p in params]


def _params_from_json(obj):
    return [None if p is None else {"W": np.array(p["W"], dtype=np.float64), "b": np.array(p["b"], dtype=np.float64)}
            for p in obj]


def cmd_train(cfg, out: Path):
    model = config_mod.build_model(cfg)
    tcfg = config_mod.train_config(cfg)
    pcfg = config_mod.protocol_config(cfg)
    workers = config_mod.worker_profiles(cfg, pcfg)
    ds = _dataset(cfg, model)
    res = train_protocol(model, tcfg, ds, workers, pcfg, policy=cfg["train"]["integrity_policy"],
                         max_retries=int(cfg["train"]["max_retries"]))
    write_jsonl(out / "metrics.jsonl", res.metrics)
    (out / "weights.json").write_text(dumps17(_params_to_json(res.params)) + "\n")
    if cfg["output"]["transcript"]:
        res.transcript.write(out / "transcript.jsonl")
    last = res.metrics[-1]
    print(f"trained {len(res.losses)} steps: loss {last['loss']:.4f}, train_acc {last['train_acc']:.4f}, "
          f"integrity failures {res.integrity_failures}")
    return EXIT_OK


def cmd_infer(cfg, out: Path):
    model = config_mod.build_model(cfg)
    tcfg = config_mod.train_config(cfg)
    pcfg = config_mod.protocol_config(cfg)
    workers = config_mod.worker_profiles(cfg, pcfg)
    ds = _dataset(cfg, model)
    if cfg["infer"]["weights"]:
        with open(cfg["infer"]["weights"]) as fh:
            params = _params_from_json(json.load(fh))
    else:
        params = train_plaintext(model, tcfg, ds).params
    X, y = (ds.X_val, ds.y_val) if len(ds.X_val) else (ds.X, ds.y)
    if cfg["infer"]["count"] is not None:
        X, y = X[:cfg["infer"]["count"]], y[:cfg["infer"]["count"]]
    res = infer_protocol(model, params, X, workers, pcfg, seed=tcfg.seed, policy=cfg["train"]["integrity_policy"],
                         precision=tcfg.precision)
    plain = np.array([predict(model, params, x.astype(np.float64)) for x in X]).reshape(len(X), -1)
    rows = []
    for i in range(len(X)):
        err = float(np.max(np.abs(res.logits[i] - plain[i])) / max(np.max(np.abs(plain[i])), 1e-300))
        rows.append({"index": i, "label": int(y[i]), "plaintext": int(plain[i].argmax()),
                     "protocol": int(res.predictions[i]), "rel_err": err})
    write_csv(out / "predictions.csv", ["index", "label", "plaintext", "protocol", "rel_err"], rows)
    agreement = float(np.mean([r["plaintext"] == r["protocol"] for r in rows])) if rows else 1.0
    summary = {"n": len(rows), "agreement": agreement,
               "max_rel_err": max((r["rel_err"] for r in rows), default=0.0),
               "integrity_failures": res.integrity_failures}
    (out / "infer.json").write_text(dumps17(summary) + "\n")
    if cfg["output"]["transcript"]:
        res.transcript.write(out / "transcript.jsonl")
    print(f"inferred {len(rows)} inputs: argmax agreement {agreement:.4f}, max rel err {summary['max_rel_err']:.3e}")
    return EXIT_OK


def _privacy_params(cfg, sigma2):
    p = cfg["privacy"]
    return PrivacyParams(K=p["K"], M=p["M"], C1=p["C1"], sigma2=sigma2, alpha_max=p["alpha_max"],
                         alpha_min=p["alpha_min"], C_min=p["C_min"], var_sum=p["var_sum"])


def cmd_analyze_privacy(cfg, out: Path):
    p = cfg["privacy"]
    try:
        if p["preset"] == "paper-table":
            rows = paper_table_rows(K=p["K"], M=p["M"], C1=p["C1"], C_min=p["C_min"])
        else:
            rows = direct_rows([_privacy_params(cfg, s2) for s2 in p["sigma2_values"]])
    except ValueError as exc:
        raise ConfigError(f"invalid privacy parameters: {exc}") from None
    write_csv(out / "privacy.csv", PRIVACY_COLUMNS, rows)
    for r in rows:
        print(f"sigma2={r['sigma2']:.3g}  single={r['bound_single']:.4g}  joint={r['bound_joint']:.4g}  "
              f"colluding={r['bound_colluding']:.4g}  perfect_f32={r['perfect_privacy_f32']}  [{r['source']}]")
    if p["preset"] == "paper-table":
        print(DISCREPANCY_NOTE)
    return EXIT_OK


def cmd_attack_demo(cfg, out: Path):
    p, a = cfg["privacy"], cfg["attack"]
    seed = cfg["train"]["seed"]
    colluder_counts = [a["colluders"]] if a["colluders"] is not None else [p["M"], p["M"] + 1]
    rows = []
    for s2 in a["sigma2_values"]:
        params = PrivacyParams(K=p["K"], M=p["M"], C1=p["C1"], sigma2=s2, C_min=p["C_min"],
                               var_sum=p["K"] * a["dim"] * a["input_var"])
        for n in colluder_counts:
            rows += leakage_report(int(a["trials"]), params, n, a["dim"], derive_seed(seed, n), p["C_min"],
                                   a["input_var"])
    write_csv(out / "attack.csv", ATTACK_COLUMNS, rows)
    for n in colluder_counts:
        for s2 in a["sigma2_values"]:
            mses = [r["mse"] for r in rows if r["colluders"] == n and r["sigma2"] == s2]
            print(f"|S|={n} sigma2={s2:.3g}: mse min {min(mses):.4g} median {float(np.median(mses)):.4g}")
    return EXIT_OK


def cmd_verify_integrity(cfg, out: Path):
    icfg = cfg["integrity"]
    pcfg = config_mod.protocol_config(cfg)
    if pcfg.E < 1:
        raise ConfigError("verify-integrity needs privacy.E >= 1")
    n_workers = pcfg.P + pcfg.E
    fw = int(icfg["faulty_worker"])
    if not 0 <= fw < n_workers:
        raise ConfigError(f"integrity.faulty_worker must lie in 0..{n_workers - 1}")
    layer = LayerSpec.dense(icfg["in_features"], icfg["out_features"])
    rows = []
    flagged = {"honest": 0, "faulty": 0}
    for t in range(int(icfg["trials"])):
        rng = np.random.default_rng(derive_seed(pcfg.seed, 100, t))
        W = rng.standard_normal(layer.weight_shape).astype(pcfg.dtype)
        xs = [rng.standard_normal(layer.in_features) for _ in range(pcfg.K)]
        ds = [rng.standard_normal(layer.out_features) for _ in range(pcfg.K)]
        for scenario in ("honest", "faulty"):
            profiles = honest_workers(n_workers)
            if scenario == "faulty":
                profiles[fw] = WorkerProfile.faulty(fw, icfg["perturbation_scale"])
            trial_cfg = ProtocolConfig(**{**pcfg.to_dict(), "seed": derive_seed(pcfg.seed, t),
                                          "record_digests": False})
            coord = Coordinator([layer], profiles, trial_cfg)
            coord.broadcast_weights({0: W})
            rec = coord.masked_linear(0, xs, coord.new_batch())
            _, gverdict = coord.masked_weight_grad(rec, ds)
            caught = False
            for stage, v in (("forward", rec.verdict), ("backward", gverdict)):
                rows.append({"trial": t, "scenario": scenario, "stage": stage, "passed": v.passed,
                             "max_residual": v.max_residual, "offending_index": v.offending_index})
                caught |= not v.passed
            flagged[scenario] += caught
    write_csv(out / "integrity.csv", INTEGRITY_COLUMNS, rows)
    n = int(icfg["trials"])
    print(f"faulty batches flagged: {flagged['faulty']}/{n}; honest false positives: {flagged['honest']}/{n}")
    return EXIT_OK


def cmd_selftest(cfg, out: Path):
    return EXIT_OK if run_selftest() else EXIT_FAIL


HANDLERS = {"train": cmd_train, "infer": cmd_infer, "analyze-privacy": cmd_analyze_privacy,
            "attack-demo": cmd_attack_demo, "verify-integrity": cmd_verify_integrity, "selftest": cmd_selftest}


def build_parser():
    parser = argparse.ArgumentParser(prog="splitmask", description="Masked split-execution simulator.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", metavar="PATH", help="JSON config file")
        sp.add_argument("--seed", type=int, help="override train.seed")
        sp.add_argument("--out", metavar="DIR", help="output directory")
        sp.add_argument("--precision", choices=("f32", "f64"))
        sp.add_argument("--workers", type=int, metavar="N", help="number of workers")
        sp.add_argument("--paper-literal", action="store_true",
                        help="send raw per-input gradients to workers and let them mix them")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    overrides = {"seed": args.seed, "precision": args.precision, "workers": args.workers,
                 "paper_literal": args.paper_literal, "out": args.out}
    try:
        if args.config:
            cfg = config_mod.load(args.config, **overrides)
        else:
            cfg = config_mod.resolve({}, **overrides)
        out = Path(cfg["output"]["dir"])
        out.mkdir(parents=True, exist_ok=True)
        (out / "run.json").write_text(dumps17(config_mod.RunRecord(args.command, cfg).to_dict()) + "\n")
        return HANDLERS[args.command](cfg, out)
    except (ConfigError, IngestionError, InsufficientWorkersError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except IntegrityError as exc:
        print(f"integrity abort: {exc}", file=sys.stderr)
        return EXIT_INTEGRITY
    except SplitMaskError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
