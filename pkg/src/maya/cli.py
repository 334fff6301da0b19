"""Command-line entry point.

Exit codes: 0 success, 2 bad input, 3 divergence, 4 artifact mismatch,
5 gradient check failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
import time
import warnings
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from .data import DataError, EncodedDataset, FeatureInfo, Schema, SchemaError, prepare
from .decoder import CandidateCache, FingerprintError
from .model import (ABLATIONS, CheckpointError, ConfigError, ModelConfig, build, count_encoder_params, forward_train,
                    load, make_ablation, param_ratio, save)
from .tensor import ContractError, grad_check_detailed
from .train import DivergenceError, evaluate, fit, loss, metric_name, multi_seed, write_summary

EXIT_OK, EXIT_INPUT, EXIT_DIVERGED, EXIT_MISMATCH, EXIT_GRADCHECK = 0, 2, 3, 4, 5
GRAD_TOL = 1e-4

# toy problem for gradcheck: 4 rows, 2 numerical + 1 categorical feature
TOY_CONFIG = ModelConfig(num_layers=2, hidden_size=16, num_heads=4, num_branch=3, num_decoder_layers=2,
                         dropout=0.0, decoder_dropout=0.0, batch_size=4)


class InputError(Exception):
    """Bad command-line input; maps to exit code 2."""


def parse_seeds(text: str) -> List[int]:
    """``"3"`` -> [3]; ``"0..4"`` -> [0, 1, 2, 3, 4] (inclusive); ``"1,5"`` -> [1, 5]."""
    text = text.strip()
    try:
        if ".." in text:
            a, b = text.split("..", 1)
            lo, hi = int(a), int(b)
            if hi < lo:
                raise InputError(f"empty seed range {text!r}")
            return list(range(lo, hi + 1))
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise InputError(f"cannot parse seeds {text!r}") from None


def _config(args) -> ModelConfig:
    overrides = list(getattr(args, "override", None) or [])
    if getattr(args, "config", None):
        try:
            return ModelConfig.read(args.config, overrides)
        except OSError as e:
            raise InputError(f"cannot read config: {e}") from None
    return ModelConfig.from_text("", overrides)


def _load_data(path) -> EncodedDataset:
    if path is None:
        raise InputError("--data is required")
    try:
        return EncodedDataset.load(path)
    except (OSError, ValueError, KeyError) as e:
        raise InputError(f"cannot load prepared data from {path}: {e}") from None


def _header(fh, seed) -> None:
    fh.write(f"# seed={seed}\n")


# ---------------------------------------------------------------------------
# subcommands


def cmd_prepare(args) -> int:
    if not args.csv or not args.schema or not args.out:
        raise InputError("prepare needs --csv, --schema and --out")
    schema = Schema.read(args.schema)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        ds = prepare(args.csv, schema, args.seed)
    for w in caught:
        print(f"warning: {w.message}")
    ds.save(args.out)
    s = ds.split
    print(f"seed {args.seed}: rows {s.n} -> train {len(s.train)} / val {len(s.val)} / test {len(s.test)}")
    print(f"features: {len(ds.num_columns)} numerical, {len(ds.cat_columns)} categorical; task {ds.task}")
    return EXIT_OK


def _train_one(config: ModelConfig, ds: EncodedDataset, seed: int, out: Path, log_every: int):
    model = build(config, ds.info, seed)
    try:
        report, cache = fit(model, ds, seed, log_every=log_every)
    except DivergenceError as e:
        out.mkdir(parents=True, exist_ok=True)
        save(model, out / "last_good")
        if e.report is not None:
            e.report.write(out)
        raise
    save(model, out, cache)
    report.write(out)
    print(f"seed {seed}: epochs {len(report.epochs)} best {report.best_epoch} "
          f"val_{report.metric} {report.best_val:.6g} test_{report.metric} {report.test_metric:.6g}")
    return report


def cmd_train(args) -> int:
    if not args.out:
        raise InputError("train needs --out")
    config = _config(args)
    ds = _load_data(args.data)
    config = config.replace(task=ds.task, num_classes=ds.num_classes if ds.task != "regression" else 0).validate()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(config.to_text(), encoding="utf-8")
    log_every = 1 if args.verbose else 0
    if args.seeds is None:
        _train_one(config, ds, args.seed, out, log_every)
        return EXIT_OK
    seeds = parse_seeds(args.seeds)
    rows = []
    for s in seeds:
        rep = _train_one(config, ds, s, out / f"seed_{s}", log_every)
        rows.append((s, len(rep.epochs), rep.best_epoch, rep.best_val, rep.test_metric))
    with open(out / "seeds.csv", "w", newline="") as fh:
        fh.write(f"# seeds={','.join(map(str, seeds))}\n")
        w = csv.writer(fh)
        name = metric_name(config.task)
        w.writerow(["seed", "epochs", "best_epoch", f"val_{name}", f"test_{name}"])
        for r in rows:
            w.writerow([r[0], r[1], r[2], repr(r[3]), repr(r[4])])
    tests = [r[4] for r in rows]
    print(f"test_{metric_name(config.task)} mean {np.mean(tests):.6g} std {np.std(tests):.6g} over {len(seeds)} seeds")
    return EXIT_OK


def _load_checkpoint(path):
    if path is None:
        raise InputError("--checkpoint is required")
    try:
        return load(path)
    except CheckpointError as e:
        raise FingerprintError(str(e)) from None


def _cache_for(model, ds: EncodedDataset, checkpoint) -> Optional[CandidateCache]:
    if model.decoder is None:
        return None
    path = Path(checkpoint)
    if (path / "cache.meta").exists():
        cache = CandidateCache.load(path)
        cache.check(model.fingerprint())
        return cache
    print("candidate cache missing; rebuilding from the training split")
    x_num, x_cat, y = ds.rows(ds.split.train)
    return model.build_cache(x_num, x_cat, y)


def cmd_eval(args) -> int:
    model = _load_checkpoint(args.checkpoint)
    ds = _load_data(args.data)
    if model.data_fingerprint and model.data_fingerprint != ds.fingerprint():
        raise FingerprintError(f"checkpoint was trained on data {model.data_fingerprint}, "
                               f"given data is {ds.fingerprint()}")
    cache = _cache_for(model, ds, args.checkpoint)
    value = evaluate(model, cache, ds, args.split)
    name = metric_name(ds.task)
    print(f"{args.split} {name} {value!r}")
    out = Path(args.out) if args.out else Path(args.checkpoint)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "metrics.csv", "w", newline="") as fh:
        _header(fh, model.seed)
        w = csv.writer(fh)
        w.writerow(["split", "metric", "value"])
        w.writerow([args.split, name, repr(value)])
    return EXIT_OK


def toy_problem(task: str, seed: int):
    rng = np.random.default_rng([seed, 7])
    b = 4
    x_num = rng.normal(size=(b, 2))
    x_cat = rng.integers(0, 3, size=(b, 1))
    if task == "regression":
        return FeatureInfo(2, [3], task, 0), x_num, x_cat, rng.normal(size=b)
    return FeatureInfo(2, [3], task, 3), x_num, x_cat, np.array([0, 1, 2, 1])


def gradcheck_cases(config: ModelConfig, both_tasks: bool = False):
    """(label, config, task): the base model in both tasks, then every
    ablation variant, alternating regression and classification."""
    cases = [("base", config, "regression"), ("base", config, "multiclass")]
    for i, v in enumerate(ABLATIONS):
        tasks = ("regression", "multiclass") if both_tasks else (("regression", "multiclass")[i % 2],)
        cases += [(v, make_ablation(config, v), t) for t in tasks]
    return cases


def run_gradcheck(config: ModelConfig, seed: int = 0, both_tasks: bool = False, n_coords: int = 64,
                  echo=print):
    """Returns a list of (label, task, worst error, worst parameter)."""
    # dropout off: finite differences need a deterministic objective
    config = config.replace(dropout=0.0, decoder_dropout=0.0)
    results = []
    for label, cfg, task in gradcheck_cases(config, both_tasks):
        info, x_num, x_cat, y = toy_problem(task, seed)
        model = build(cfg, info, seed).train()
        t0 = time.perf_counter()
        errs = grad_check_detailed(lambda: loss(forward_train(model, x_num, x_cat, y).logits, y, task),
                                   model.parameters(), n_coords=n_coords, seed=seed)
        worst = max(errs, key=errs.get)
        results.append((label, task, errs[worst], worst))
        echo(f"{label:18s} {task:10s} max_rel_err {errs[worst]:.3e} ({worst}) {time.perf_counter() - t0:.1f}s")
    return results


def cmd_gradcheck(args) -> int:
    config = _config(args) if (args.config or args.override) else TOY_CONFIG
    print(f"# seed={args.seed}")
    results = run_gradcheck(config, args.seed, args.both_tasks)
    label, task, err, name = max(results, key=lambda r: r[2])
    print(f"max relative error {err:.3e}")
    if not err < GRAD_TOL:
        print(f"FAIL: worst parameter {name} ({label}, {task}) error {err:.3e} >= {GRAD_TOL:g}")
        return EXIT_GRADCHECK
    print("PASS")
    return EXIT_OK


def dump_attention(model, x_num, x_cat, out: Path, layers: Optional[Sequence[int]] = None) -> List[Path]:
    """Write one (k+1)x(k+1) map per (layer, branch, head), averaged over rows,
    plus ``branch_weights.csv``. Layer, branch and head indices start at 0."""
    model.eval()
    enc = model.encode(x_num, x_cat, capture_maps=True)
    n_layers = len(enc.maps)
    layers = list(range(n_layers)) if layers is None else list(layers)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for li in layers:
        maps = enc.maps[li].mean(axis=1)  # [n, heads, T, T]
        for j in range(maps.shape[0]):
            for h in range(maps.shape[1]):
                path = out / f"attn_L{li}_B{j}_H{h}.csv"
                with open(path, "w") as fh:
                    _header(fh, model.seed)
                    np.savetxt(fh, maps[j, h], delimiter=",", fmt="%.17g")
                written.append(path)
    with open(out / "branch_weights.csv", "w", newline="") as fh:
        _header(fh, model.seed)
        w = csv.writer(fh)
        wb = model.branch_weights()
        w.writerow(["layer"] + [f"branch{j}" for j in range(wb.shape[1])])
        for li, row in enumerate(wb):
            w.writerow([li] + [repr(float(x)) for x in row])
    return written


def cmd_attn_dump(args) -> int:
    if not args.out:
        raise InputError("attn-dump needs --out")
    model = _load_checkpoint(args.checkpoint)
    ds = _load_data(args.data)
    n_layers = model.config.num_layers
    layers = None
    if args.layer is not None:
        if not 0 <= args.layer < n_layers:
            raise InputError(f"--layer {args.layer} out of range [0, {n_layers})")
        layers = [args.layer]
    idx = ds.split.val[:args.n_instances]
    if len(idx) == 0:
        raise InputError("validation split is empty")
    x_num, x_cat, _ = ds.rows(idx)
    files = dump_attention(model, x_num, x_cat, Path(args.out), layers)
    print(f"wrote {len(files)} attention maps over {len(idx)} validation rows to {args.out}")
    return EXIT_OK


def _num(x: float) -> str:
    return str(int(x)) if float(x).is_integer() else f"{x:.6g}"


def cmd_params(args) -> int:
    base = _config(args)
    variants = [args.variant] if args.variant else []
    if args.all_variants:
        variants = list(ABLATIONS[:2])
    rows = [("base", base)] + [(v, make_ablation(base, v)) for v in variants]
    print("config              d  branches heads  P_attn      P_ffn        P_total       exact         ratio")
    for name, cfg in rows:
        c = count_encoder_params(cfg)
        print(f"{name:16s} {cfg.hidden_size:4d} {cfg.num_branch:8d} {cfg.num_heads:5d}  {_num(c['P_attn']):<11s} "
              f"{_num(c['P_ffn']):<12s} {_num(c['P_total']):<13s} {c['exact']:<13d} {param_ratio(cfg, base):.1f}x")
    return EXIT_OK


def cmd_ablate(args) -> int:
    if not args.out:
        raise InputError("ablate needs --out")
    base = _config(args)
    ds = _load_data(args.data)
    base = base.replace(task=ds.task, num_classes=ds.num_classes if ds.task != "regression" else 0).validate()
    seeds = parse_seeds(args.seeds) if args.seeds is not None else [args.seed]
    configs = {"base": base}
    for v in ABLATIONS:
        configs[v] = make_ablation(base, v)
    rows = multi_seed(configs, {args.dataset_name: ds}, seeds)
    for r in rows:
        r.param_ratio = param_ratio(configs[r.config], base)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_summary(rows, out / "summary.csv", seeds)
    for r in rows:
        print(f"{r.config:18s} mean {r.mean:.6g} std {r.std:.4g} rank {r.rank:g} params {r.param_ratio:.1f}x")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="maya", description="Multi-branch attention tabular transformer.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True, data=False, out=False, seeds=False):
        if config:
            sp.add_argument("--config", help="flat key = value config file")
            sp.add_argument("--override", action="append", default=[], metavar="K=V",
                            help="override one config key (repeatable)")
        if data:
            sp.add_argument("--data", help="prepared dataset directory")
        if out:
            sp.add_argument("--out", help="output directory")
        sp.add_argument("--seed", type=int, default=0)
        if seeds:
            sp.add_argument("--seeds", help="seed list: a..b (inclusive) or comma separated")
        sp.add_argument("-v", "--verbose", action="store_true")

    sp = sub.add_parser("prepare", help="encode a CSV into a prepared dataset directory")
    common(sp, config=False, out=True)
    sp.add_argument("--csv", required=True)
    sp.add_argument("--schema", required=True)
    sp.set_defaults(func=cmd_prepare)

    sp = sub.add_parser("train", help="fit a model and write checkpoint, cache and report")
    common(sp, data=True, out=True, seeds=True)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    common(sp, config=False, data=True, out=True)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--split", choices=("train", "val", "test"), default="test")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("gradcheck", help="finite-difference check of the full model and all ablations")
    common(sp)
    sp.add_argument("--both-tasks", action="store_true", help="check every ablation in both tasks")
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("attn-dump", help="write averaged attention maps and branch weights")
    common(sp, config=False, data=True, out=True)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--layer", type=int, help="dump only this block (0-based)")
    sp.add_argument("--n-instances", type=int, default=256, help="validation rows to average over")
    sp.set_defaults(func=cmd_attn_dump)

    sp = sub.add_parser("params", help="encoder parameter counts and ablation ratios")
    common(sp)
    sp.add_argument("--variant", choices=ABLATIONS)
    sp.add_argument("--all-variants", action="store_true", help="show both MHA comparison variants")
    sp.set_defaults(func=cmd_params)

    sp = sub.add_parser("ablate", help="multi-seed run of the base config and every ablation")
    common(sp, data=True, out=True, seeds=True)
    sp.add_argument("--dataset-name", default="data")
    sp.set_defaults(func=cmd_ablate)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (InputError, ConfigError, SchemaError, DataError, ContractError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except DivergenceError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except FingerprintError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_MISMATCH


if __name__ == "__main__":
    sys.exit(main())
