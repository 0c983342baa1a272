"""``dmm`` command line: generate | mask | train | impute | evaluate | sweep | window | selftest.

Exit status is 0 on success, 1 on invalid input and 2 on a numerical abort.
"""
from __future__ import annotations

import argparse
import csv
import os
import statistics
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import fields, replace
from itertools import product
from pathlib import Path

import numpy as np

from .data import fit_normalizer, normalize
from .errors import ConfigError, DmmError, NumericalError, ValidationError
from .experiment import CellConfig, run_cell
from .io import (
    RunManifest,
    format_value,
    apply_config,
    load_config,
    read_long_csv,
    read_series_csv,
    window,
    write_rows_csv,
    write_series_csv,
)
from .maskgen import make_mask, parse_mechanism
from .metrics import REPORT_FIELDS, evaluate, impute
from .model import ModelConfig, init_params, load_checkpoint, save_checkpoint
from .synthgen import GenProcessSpec, generate_dataset
from .train import TrainConfig, train

MODEL_KEYS = {"n_c", "enc_hidden", "kernel", "decoder_hidden", "prior_hidden", "slope"}
TRAIN_KEYS = {f.name for f in fields(TrainConfig)}
GEN_KEYS = {"batch", "T", "seed"}
SWEEP_LIST_KEYS = {"mechanisms", "ratios", "variants", "seeds", "betas", "gammas"}
SWEEP_KEYS = SWEEP_LIST_KEYS | {"n_train", "n_val"} | TRAIN_KEYS | MODEL_KEYS
HISTORY_FIELDS = ("epoch", "recon", "kl_z", "kl_c", "total", "split")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ValidationError(message)


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _config(args, known: set[str]) -> dict[str, str]:
    return load_config(args.config, known) if args.config else {}


def _seed(args, cfg: dict[str, str], default: int = 0) -> int:
    if args.seed is not None:
        return int(args.seed)
    return int(cfg.get("seed", default))


def _split_config(values: dict[str, str]) -> tuple[dict[str, str], dict[str, str]]:
    model = {k: v for k, v in values.items() if k in MODEL_KEYS}
    tr = {k: v for k, v in values.items() if k in TRAIN_KEYS}
    return model, tr


def _model_kwargs(values: dict[str, str]) -> dict:
    out = {}
    for k, v in values.items():
        if k in ("decoder_hidden", "prior_hidden"):
            out[k] = tuple(int(s) for s in v.replace(",", " ").split())
        elif k == "slope":
            out[k] = float(v)
        else:
            out[k] = int(v)
    return out


# -- commands ---------------------------------------------------------------------

def cmd_generate(args) -> int:
    start = time.perf_counter()
    cfg = _config(args, GEN_KEYS)
    seed = _seed(args, cfg)
    batch = int(args.batch if args.batch is not None else cfg.get("batch", 10_000))
    spec = GenProcessSpec.dataset_a(seed, T=int(cfg.get("T", 5)))
    series, latents = generate_dataset(spec, batch)
    out = _out_dir(args)
    paths = {"series": out / "series.csv", "latents": out / "latents.csv"}
    write_series_csv(paths["series"], series.values)
    write_series_csv(paths["latents"], latents.z, prefix="z")
    RunManifest("generate", {"batch": batch, "T": spec.T, "n": spec.n, "L": spec.L}, seed,
                outputs={k: str(v) for k, v in paths.items()},
                seconds=time.perf_counter() - start).finalize().write(out / "manifest.json")
    return 0


def cmd_mask(args) -> int:
    start = time.perf_counter()
    cfg = _config(args, {"seed"})
    seed = _seed(args, cfg)
    mech, _ = parse_mechanism(args.mechanism)
    x = read_series_csv(args.data)
    mask, scores = make_mask(x, args.mechanism, args.rate, seed)
    out = _out_dir(args)
    paths = {"mask": out / "mask.csv"}
    write_series_csv(paths["mask"], mask.r, integer=True)
    if scores is not None:
        paths["c_truth"] = out / "c_truth.csv"
        write_series_csv(paths["c_truth"], scores, prefix="c")
    RunManifest("mask", {"mechanism": args.mechanism, "rate": args.rate}, seed,
                inputs={"data": str(args.data)}, outputs={k: str(v) for k, v in paths.items()},
                seconds=time.perf_counter() - start,
                extra={"achieved_rate": mask.achieved_rate, "mechanism": mask.mechanism}).finalize().write(out / "manifest.json")
    return 0


def _load_pair(data_path, mask_path) -> tuple[np.ndarray, np.ndarray]:
    x = read_series_csv(data_path)
    r = read_series_csv(mask_path, integer=True).astype(np.float64)
    if x.shape != r.shape:
        raise ValidationError(f"data {x.shape} and mask {r.shape} shapes differ")
    return x, r


def cmd_train(args) -> int:
    start = time.perf_counter()
    cfg = _config(args, TRAIN_KEYS | MODEL_KEYS)
    model_vals, train_vals = _split_config(cfg)
    tcfg = apply_config(TrainConfig, train_vals)
    if args.regime is not None:
        tcfg = replace(tcfg, regime=args.regime)
    tcfg = replace(tcfg, seed=_seed(args, cfg, tcfg.seed))
    if args.epochs is not None:
        tcfg = replace(tcfg, epochs=args.epochs)
    x_raw, r = _load_pair(args.data, args.mask)
    n_seq = x_raw.shape[0]
    n_val = min(1024, max(1, n_seq // 5))
    val_idx = np.arange(n_seq - n_val, n_seq)
    mean, std = fit_normalizer(x_raw[: n_seq - n_val], r[: n_seq - n_val])
    truth = None
    if tcfg.regime == "supervised":
        truth_raw = read_series_csv(args.truth) if args.truth else x_raw
        if truth_raw.shape != x_raw.shape:
            raise ValidationError("truth shape differs from data")
        truth = normalize(truth_raw, mean, std).values
    # missing entries of the data file are never shown to the model
    x = normalize(np.where(r > 0, x_raw, 0.0), mean, std).values
    mcfg = ModelConfig(n_obs=x.shape[2], T=x.shape[1], variant=args.variant,
                       beta=tcfg.beta, gamma=tcfg.gamma, **_model_kwargs(model_vals))
    params = init_params(mcfg, seed=tcfg.seed)
    params, history = train(params, x, r, truth, tcfg, val_idx=val_idx)
    out = _out_dir(args)
    paths = {"checkpoint": out / "checkpoint.json", "history": out / "history.csv"}
    save_checkpoint(params, paths["checkpoint"], extra={"mean": mean.tolist(), "std": std.tolist(), "best_epoch": history.best_epoch})
    write_rows_csv(paths["history"], history.rows(), HISTORY_FIELDS)
    RunManifest("train", {"train": tcfg.__dict__, "model": mcfg.to_dict()}, tcfg.seed,
                inputs={"data": str(args.data), "mask": str(args.mask)},
                outputs={k: str(v) for k, v in paths.items()}, seconds=time.perf_counter() - start,
                extra={"best_epoch": history.best_epoch, "epochs_run": len(history)}).finalize().write(out / "manifest.json")
    return 0


def _checkpoint_and_norm(path):
    import json

    with open(path) as fh:
        extra = json.load(fh).get("extra", {})
    params = load_checkpoint(path)
    mean = np.asarray(extra.get("mean", np.zeros(params.config.n_obs)))
    std = np.asarray(extra.get("std", np.ones(params.config.n_obs)))
    return params, mean, std


def cmd_impute(args) -> int:
    start = time.perf_counter()
    params, mean, std = _checkpoint_and_norm(args.checkpoint)
    x_raw, r = _load_pair(args.data, args.mask)
    x = normalize(np.where(r > 0, x_raw, 0.0), mean, std).values
    filled = impute(params, x, r).values * std + mean
    filled = np.where(r > 0, x_raw, filled)
    out = _out_dir(args)
    path = out / "imputed.csv"
    write_series_csv(path, filled)
    RunManifest("impute", {}, 0, inputs={"checkpoint": str(args.checkpoint), "data": str(args.data), "mask": str(args.mask)},
                outputs={"imputed": str(path)}, seconds=time.perf_counter() - start).finalize().write(out / "manifest.json")
    return 0


def cmd_evaluate(args) -> int:
    start = time.perf_counter()
    params, mean, std = _checkpoint_and_norm(args.checkpoint)
    x_raw, r = _load_pair(args.data, args.mask)
    truth_raw = read_series_csv(args.truth) if args.truth else x_raw
    if truth_raw.shape != x_raw.shape:
        raise ValidationError("truth shape differs from data")
    x = normalize(np.where(r > 0, x_raw, 0.0), mean, std).values
    truth = normalize(truth_raw, mean, std).values
    z = read_series_csv(args.latents) if args.latents else None
    c = read_series_csv(args.c_truth) if args.c_truth else None
    for name, arr in (("latents", z), ("c_truth", c)):
        if arr is not None and arr.shape[:2] != x.shape[:2]:
            raise ValidationError(f"{name} file does not match the data's (batch, T)")
    report = evaluate(params, x, r, truth, z, c)
    row = report.row(dataset=args.dataset, mechanism=args.mechanism, ratio=round(1.0 - float(r.mean()), 6),
                     variant=params.variant, regime=args.regime, seed=args.seed if args.seed is not None else "")
    out = _out_dir(args)
    path = out / "metrics.csv"
    write_rows_csv(path, [row], REPORT_FIELDS)
    RunManifest("evaluate", {}, args.seed or 0, inputs={"checkpoint": str(args.checkpoint), "data": str(args.data)},
                outputs={"metrics": str(path)}, seconds=time.perf_counter() - start,
                extra={"n_eval": report.n_eval}).finalize().write(out / "manifest.json")
    print(",".join(REPORT_FIELDS))
    print(",".join(str(row[k]) for k in REPORT_FIELDS))
    return 0


def _split_list(text: str) -> list[str]:
    return [s for s in text.replace(",", " ").split() if s]


def sweep_cells(values: dict[str, str], base_seed: int = 0) -> list[CellConfig]:
    """Expand a sweep spec into cells (mechanism × ratio × variant × β × γ × seed)."""
    lists = {k: _split_list(values[k]) for k in SWEEP_LIST_KEYS if k in values}
    if not any(lists.values()):
        raise ConfigError("sweep spec lists no cells")
    mechs = lists.get("mechanisms", ["mar"])
    for m in mechs:
        parse_mechanism(m)
    ratios = [float(v) for v in lists.get("ratios", ["0.2"])]
    variants = [v.upper() for v in lists.get("variants", ["MAR"])]
    seeds = [int(v) for v in lists.get("seeds", [str(base_seed)])]
    model_vals, train_vals = _split_config({k: v for k, v in values.items() if k not in SWEEP_LIST_KEYS})
    tcfg = apply_config(TrainConfig, train_vals)
    betas = [float(v) for v in lists.get("betas", [repr(tcfg.beta)])]
    gammas = [float(v) for v in lists.get("gammas", [repr(tcfg.gamma)])]
    n_train = int(values.get("n_train", 10_000))
    n_val = int(values.get("n_val", 1024))
    cells = []
    for mech, ratio, variant, beta, gamma, seed in product(mechs, ratios, variants, betas, gammas, seeds):
        cells.append(CellConfig(mech, ratio, variant, seed, n_train, n_val,
                                replace(tcfg, beta=beta, gamma=gamma, seed=seed), _model_kwargs(model_vals)))
    if not cells:
        raise ConfigError("sweep spec expands to no cells")
    return cells


def _run_cell_safe(cell: CellConfig) -> dict:
    row = {"dataset": "A", "mechanism": cell.mechanism, "ratio": cell.ratio, "variant": cell.variant,
           "regime": cell.train.regime, "seed": cell.seed, "beta": cell.train.beta, "gamma": cell.train.gamma}
    try:
        res = run_cell(cell)
        row.update(res.row(), beta=cell.train.beta, gamma=cell.train.gamma,
                   baseline_mse=res.baseline_mse, seconds=res.seconds, error="")
    except DmmError as exc:
        row["error"] = f"{type(exc).__name__}: {exc}"
    return row


def worker_count(n_jobs: int) -> int:
    cap = os.environ.get("DMM_THREADS")
    limit = int(cap) if cap else (os.cpu_count() or 1)
    return max(1, min(limit, n_jobs))


def aggregate(rows: list[dict]) -> list[dict]:
    """Median over seeds of each metric for every other combination of keys."""
    groups: dict[tuple, list[dict]] = {}
    keys = ("mechanism", "ratio", "variant", "regime", "beta", "gamma")
    for row in rows:
        groups.setdefault(tuple(row[k] for k in keys), []).append(row)
    out = []
    for key, members in groups.items():
        ok = [m for m in members if not m.get("error")]
        agg = dict(zip(keys, key), n_ok=len(ok), n_failed=len(members) - len(ok))
        for metric in ("mse", "mae", "mcc_z", "mcc_c", "baseline_mse"):
            vals = [float(m[metric]) for m in ok if m.get(metric) not in ("", None)]
            agg[metric] = statistics.median(vals) if vals else ""
        out.append(agg)
    return out


CELL_FIELDS = ("dataset", "mechanism", "ratio", "variant", "regime", "beta", "gamma", "seed",
               "mse", "mae", "mcc_z", "mcc_c", "baseline_mse", "seconds", "error")
SUMMARY_FIELDS = ("mechanism", "ratio", "variant", "regime", "beta", "gamma", "n_ok", "n_failed",
                  "mse", "mae", "mcc_z", "mcc_c", "baseline_mse")


def run_sweep(cells: list[CellConfig], out: Path, progress=None) -> list[dict]:
    """Run cells (in worker processes when allowed), streaming rows to
    ``cells.csv`` as they finish, then write the median ``summary.csv``."""
    out.mkdir(parents=True, exist_ok=True)
    workers = worker_count(len(cells))
    rows = []
    with open(out / "cells.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CELL_FIELDS, extrasaction="ignore")
        writer.writeheader()

        def record(row):
            rows.append(row)
            writer.writerow({k: format_value(row.get(k, "")) for k in CELL_FIELDS})
            fh.flush()
            if progress is not None:
                progress(row)

        if workers == 1:
            for c in cells:
                record(_run_cell_safe(c))
        else:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                for row in pool.map(_run_cell_safe, cells):
                    record(row)
    write_rows_csv(out / "summary.csv", aggregate(rows), SUMMARY_FIELDS)
    return rows


def cmd_sweep(args) -> int:
    start = time.perf_counter()
    if not args.config:
        raise ConfigError("sweep needs --config with a sweep spec")
    values = load_config(args.config, SWEEP_KEYS)
    cells = sweep_cells(values, base_seed=args.seed or 0)
    out = _out_dir(args)
    rows = run_sweep(cells, out)
    paths = {"cells": out / "cells.csv", "summary": out / "summary.csv"}
    RunManifest("sweep", values, args.seed or 0, inputs={"config": str(args.config)},
                outputs={k: str(v) for k, v in paths.items()}, seconds=time.perf_counter() - start,
                extra={"cells": len(cells), "failed": sum(1 for r in rows if r.get("error")),
                       "workers": worker_count(len(cells))}).finalize().write(out / "manifest.json")
    return 0


def cmd_window(args) -> int:
    start = time.perf_counter()
    names, series = read_long_csv(args.data)
    if np.isnan(series).any():
        raise ValidationError(f"{args.data}: contains empty or NaN values")
    windows = window(series, args.T, args.stride)
    out = _out_dir(args)
    path = out / "series.csv"
    write_series_csv(path, windows)
    RunManifest("window", {"T": args.T, "stride": args.stride or args.T}, 0, inputs={"data": str(args.data)},
                outputs={"series": str(path)}, seconds=time.perf_counter() - start,
                extra={"columns": names, "mean": series.mean(axis=0).tolist(), "std": series.std(axis=0).tolist(),
                       "windows": int(windows.shape[0])}).finalize().write(out / "manifest.json")
    return 0


def cmd_selftest(args) -> int:
    from .selftest import run_selftest

    results = run_selftest()
    width = max(len(name) for name, _, _ in results)
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'}  {name:<{width}}  {detail}")
    failed = sum(not ok for _, ok, _ in results)
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return 0 if failed == 0 else 1


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", default=".", help="output directory")

    p = _Parser(prog="dmm", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", parents=[common], help="synthetic dataset A with latent ground truth")
    g.add_argument("--batch", type=int)
    g.set_defaults(func=cmd_generate)

    m = sub.add_parser("mask", parents=[common], help="observation mask under a mechanism")
    m.add_argument("--data", required=True)
    m.add_argument("--mechanism", required=True, help="mcar | mar | mnar | mnar-future | mixed:a:b:c")
    m.add_argument("--rate", type=float, required=True)
    m.set_defaults(func=cmd_mask)

    t = sub.add_parser("train", parents=[common], help="fit DMM-MAR or DMM-MNAR")
    t.add_argument("--data", required=True)
    t.add_argument("--mask", required=True)
    t.add_argument("--truth", help="ground-truth values (supervised; defaults to --data)")
    t.add_argument("--variant", type=str.upper, choices=("MAR", "MNAR"), required=True)
    t.add_argument("--regime", choices=("supervised", "unsupervised"))
    t.add_argument("--epochs", type=int)
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("impute", parents=[common], help="fill missing entries with a trained model")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--data", required=True)
    i.add_argument("--mask", required=True)
    i.set_defaults(func=cmd_impute)

    e = sub.add_parser("evaluate", parents=[common], help="imputation error and MCC as one CSV row")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--mask", required=True)
    e.add_argument("--truth")
    e.add_argument("--latents")
    e.add_argument("--c-truth", dest="c_truth")
    e.add_argument("--dataset", default="")
    e.add_argument("--mechanism", default="")
    e.add_argument("--regime", default="")
    e.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("sweep", parents=[common], help="grid of synthetic cells, median over seeds")
    s.set_defaults(func=cmd_sweep)

    w = sub.add_parser("window", parents=[common], help="slice a long series CSV into windows")
    w.add_argument("--data", required=True)
    w.add_argument("--T", type=int, default=24)
    w.add_argument("--stride", type=int)
    w.set_defaults(func=cmd_window)

    st = sub.add_parser("selftest", parents=[common], help="built-in correctness checks")
    st.set_defaults(func=cmd_selftest)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
