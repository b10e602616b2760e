"""Command-line entry point.

Exit codes: 0 success, 2 invalid input or config, 3 training diverged,
4 missing or unreadable files.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import warnings
from pathlib import Path

import numpy as np

from . import checkpoint
from .config import RunConfig, dump_json
from .data import (EncodedData, SynthSpec, Vocab, generate_synthetic, load_tsv, make_batches,
                   write_manifest, write_tsv)
from .grad_align import DEFAULT_GAMMA_THRES, angle_histogram, gated_step_grads
from .inference import ExitPolicy, exit_accuracies, layer_score_curve, run_policy, write_curve
from .losses import ContrastiveBatch, DegenerateBatchWarning, acl_embed_loss, ce_loss, scl_loss
from .model import MultiExitModel
from .tensor import Tape
from .training import TrainingDiverged, ablation_presets, run_experiment, train_model

DEFAULT_GRID = (0.005, 0.01, 0.02, 0.1, 0.5, 1.0)
EXIT_OK, EXIT_INVALID, EXIT_DIVERGED, EXIT_IO = 0, 2, 3, 4


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write(path: Path, text: str) -> None:
    path.write_text(text, encoding="utf-8", newline="\n")


def _echo(out: Path, resolved: dict) -> None:
    _write(out / "config.json", dump_json(resolved))


def _load_model(path) -> MultiExitModel:
    return checkpoint.load(path)


def _encode(model: MultiExitModel, tsv) -> EncodedData:
    vocab = model.meta.get("vocab")
    if not vocab:
        raise ValueError("checkpoint carries no vocabulary")
    records = load_tsv(tsv)
    bad = [r.line for r in records if r.label >= model.config.n_classes]
    if bad:
        raise ValueError(f"{tsv}:{bad[0]}: label outside 1..{model.config.n_classes}")
    return EncodedData.from_records(records, Vocab(vocab), model.config.max_seq_len)


# --- commands -------------------------------------------------------------------------


def cmd_synth(args) -> int:
    try:
        raw = json.loads(Path(args.spec).read_text(encoding="utf-8"))
    except json.JSONDecodeError as err:
        raise ValueError(f"{args.spec}: invalid JSON ({err})") from None
    spec = SynthSpec.from_dict(raw)
    train, evl = generate_synthetic(spec)
    out = _out_dir(args.out)
    write_tsv(train, out / "train.tsv")
    write_tsv(evl, out / "eval.tsv")
    write_manifest(out / "manifest.json", spec, len(Vocab.build(train)))
    _echo(out, {"spec": spec.to_dict()})
    return EXIT_OK


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    if getattr(args, "seed", None) is not None:
        cfg.seeds = [args.seed]
    if getattr(args, "epochs", None) is not None:
        cfg.regime = dataclasses.replace(cfg.regime, epochs=args.epochs).validate()
    return cfg


def cmd_train(args) -> int:
    cfg = _apply_overrides(RunConfig.load(args.config), args)
    dataset = cfg.load_data()
    mcfg = cfg.model_config(dataset)
    train, evl = dataset.encoded(mcfg.max_seq_len)
    resolved = cfg.resolved(dataset)
    out = _out_dir(args.out)
    _echo(out, resolved)

    rows, summary = [], {"runs": {}}
    for seed in cfg.seeds:
        rc = dataclasses.replace(cfg.regime, seed=seed).validate()
        model = MultiExitModel(mcfg, seed=seed)
        model.meta = {"vocab": dataset.vocab.tokens, "regime": rc.to_dict()}
        try:
            log = train_model(model, train, rc, evl)
        except TrainingDiverged as err:
            _write(out / "diverged.json", dump_json({"seed": seed, **err.diagnostic}))
            raise
        checkpoint.save(model, out / f"checkpoint-s{seed}.mxac")
        _write(out / f"metrics-s{seed}.jsonl", log.metrics_jsonl())
        if log.angles:
            _write(out / f"angles-s{seed}.jsonl", log.angles_jsonl())
        scores = exit_accuracies(model, evl)
        rows += [(seed, m, scores[m]) for m in sorted(scores)]
        summary["runs"][str(seed)] = {
            "run_id": log.run_id, "scores": {str(m): s for m, s in sorted(scores.items())},
            "cross_layer_average": float(np.mean(list(scores.values()))),
            "gated_fraction": log.gated_fraction, "n_angle_records": len(log.angles),
        }
    avgs = [r["cross_layer_average"] for r in summary["runs"].values()]
    summary["cross_layer_mean"] = float(np.mean(avgs))
    summary["cross_layer_std"] = float(np.std(avgs))
    _write(out / "scores.csv", "seed,exit_layer,score\n"
           + "".join(f"{s},{m},{v!r}\n" for s, m, v in rows))
    _write(out / "summary.json", dump_json(summary))
    print(dump_json(summary), end="")
    return EXIT_OK


def cmd_eval(args) -> int:
    model = _load_model(args.checkpoint)
    data = _encode(model, args.data)
    policy = ExitPolicy.parse(args.policy) if args.policy else ExitPolicy("fixed_layer", layer=model.n_layers)
    trace = run_policy(model, data, policy)
    summary = trace.summary()
    if args.out:
        out = _out_dir(args.out)
        trace.write_jsonl(out / "trace.jsonl")
        _write(out / "eval_summary.json", dump_json(summary))
        _echo(out, {"command": "eval", "checkpoint": str(args.checkpoint), "data": str(args.data),
                    "policy": dataclasses.asdict(policy)})
    print(dump_json(summary), end="")
    return EXIT_OK


def cmd_curve(args) -> int:
    model = _load_model(args.checkpoint)
    data = _encode(model, args.data)
    curve = layer_score_curve(model, data)
    out = _out_dir(args.out)
    write_curve(curve, len(data), out / "curve.csv", out / "curve.json")
    _echo(out, {"command": "curve", "checkpoint": str(args.checkpoint), "data": str(args.data)})
    return EXIT_OK


ANGLE_OBJECTIVES = {"ce_scl": "ce_scl", "ce+scl": "ce_scl", "scl": "ce_scl",
                    "acl": "acl_embed", "acl_embed": "acl_embed"}


def angle_records(model: MultiExitModel, data: EncodedData, objective: str, batch_size: int = 32,
                  seed: int = 0, exit_layer: int | None = None, temperature: float = 0.5,
                  gamma_thres: float = DEFAULT_GAMMA_THRES, lam: float = 0.02) -> list[dict]:
    """Angle between the CE and contrastive gradients on each batch, parameters fixed.

    The model runs in eval mode and is never updated. The scope is the
    backbone plus the probed exit.
    """
    m = model.n_layers if exit_layer is None else exit_layer
    scope = f"backbone+exit:{m}"
    saved = model.state_dict()
    records = []
    for step, batch in enumerate(make_batches(data, batch_size, seed=seed, epoch=0)):
        with Tape() as tape, warnings.catch_warnings():
            warnings.simplefilter("ignore", DegenerateBatchWarning)
            rep, logits = model.forward(batch.ids, exits=[m], train=False)[m]
            ce = ce_loss(logits, batch.labels)
            if objective == "ce_scl":
                acl = scl_loss(ContrastiveBatch(rep, batch.labels, temperature))
            else:
                acl = acl_embed_loss(rep, batch.labels, model.label_embedding_tensor(m), temperature)
            report, _ = gated_step_grads(model, tape, ce, acl, lam, gamma_thres, scope)
        records.append({"step": step, "stage": "probe", "exit_layer": m,
                        "cos_gamma": report.cos_gamma, "gamma_deg": report.gamma_deg,
                        "gated": report.gated, "lambda_prime": report.lambda_prime,
                        "loss_ce": ce.item(), "loss_acl": acl.item()})
    for name, value in saved.items():
        if not np.array_equal(model.params[name].data, value):
            raise RuntimeError("angle probe modified the model")
    return records


def cmd_angles(args) -> int:
    if args.objective not in ANGLE_OBJECTIVES:
        raise ValueError(f"objective must be one of {sorted(ANGLE_OBJECTIVES)}")
    objective = ANGLE_OBJECTIVES[args.objective]
    model = _load_model(args.checkpoint)
    data = _encode(model, args.data)
    records = angle_records(model, data, objective, args.batch_size, args.seed, args.exit_layer,
                            gamma_thres=args.gamma_thres)
    hist = angle_histogram(records, bins=args.bins)
    out = _out_dir(args.out)
    _write(out / f"angles-{objective}.jsonl", "".join(json.dumps(r, sort_keys=True) + "\n" for r in records))
    _write(out / f"histogram-{objective}.json", hist.to_json() + "\n")
    _echo(out, {"command": "angles", "checkpoint": str(args.checkpoint), "data": str(args.data),
                "objective": objective, "batch_size": args.batch_size, "seed": args.seed,
                "exit_layer": args.exit_layer or model.n_layers, "gamma_thres": args.gamma_thres,
                "bins": args.bins})
    print(json.dumps({"mean": hist.mean, "std": hist.std, "gated_fraction": hist.gated_fraction,
                      "n_reports": hist.n_reports}, sort_keys=True))
    return EXIT_OK


SWEEP_METHODS = ("ce_scl", "acl")


def sweep_lambda(cfg: RunConfig, grid) -> tuple[list[dict], dict]:
    """Cross-layer average per (method, lambda), averaged over the config's seeds."""
    dataset = cfg.load_data()
    mcfg = cfg.model_config(dataset)
    train, evl = dataset.encoded(mcfg.max_seq_len)
    presets = ablation_presets(cfg.regime)
    rows = []
    for lam in grid:
        row = {"lambda": float(lam)}
        for method in SWEEP_METHODS:
            rc = dataclasses.replace(presets[method], lam=float(lam)).validate()
            row[method] = run_experiment(rc, mcfg, train, evl, cfg.seeds).mean
        rows.append(row)
    spread = {}
    for method in SWEEP_METHODS:
        vals = np.array([r[method] for r in rows])
        spread[method] = {"max_minus_min": float(vals.max() - vals.min()), "std": float(vals.std())}
    return rows, spread


def cmd_sweep_lambda(args) -> int:
    cfg = _apply_overrides(RunConfig.load(args.config), args)
    grid = DEFAULT_GRID if args.grid is None else tuple(float(x) for x in args.grid.split(","))
    if not grid or any(not 0.0 <= g <= 1.0 for g in grid):
        raise ValueError("grid values must lie in [0, 1]")
    rows, spread = sweep_lambda(cfg, grid)
    out = _out_dir(args.out)
    lines = ["lambda," + ",".join(SWEEP_METHODS)]
    lines += [f"{r['lambda']!r}," + ",".join(repr(r[m]) for m in SWEEP_METHODS) for r in rows]
    _write(out / "sweep.csv", "\n".join(lines) + "\n")
    _write(out / "sweep_summary.json", dump_json({"grid": list(grid), "spread": spread}))
    _echo(out, {**cfg.resolved(cfg.load_data()), "grid": list(grid)})
    print(dump_json(spread), end="")
    return EXIT_OK


# --- parser ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="aligncl", description="Multi-exit contrastive training toolkit.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("--spec", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train a multi-exit model")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--epochs", type=int)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="early-exit evaluation")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--policy", help="fixed:<m>, entropy:<threshold> or patience:<t>; default is the last exit")
    s.add_argument("--out")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("curve", help="layer-score curve")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_curve)

    s = sub.add_parser("angles", help="gradient-angle histogram on a fixed checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--objective", default="acl")
    s.add_argument("--out", required=True)
    s.add_argument("--batch-size", type=int, default=32)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--exit-layer", type=int)
    s.add_argument("--gamma-thres", type=float, default=DEFAULT_GAMMA_THRES)
    s.add_argument("--bins", type=int, default=36)
    s.set_defaults(func=cmd_angles)

    s = sub.add_parser("sweep-lambda", help="lambda sensitivity of CE+SCL vs ACL")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--grid", help="comma-separated lambda values")
    s.add_argument("--seed", type=int)
    s.add_argument("--epochs", type=int)
    s.set_defaults(func=cmd_sweep_lambda)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except TrainingDiverged as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_DIVERGED
    except (checkpoint.CheckpointError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, IndexError, KeyError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
