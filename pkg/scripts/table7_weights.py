"""Sensitivity of DMM-MAR on A-MAR (ratio 0.4) to the KL weights beta and gamma.

Runs the 5 × 5 grid {0, 1e-4, 1e-3, 1e-2, 1e-1}² and prints a beta-by-gamma
table of median validation MSE and mcc_z.

Usage:
    python3 scripts/table7_weights.py --out results/table7 [--seeds 0] [--epochs 50]
"""
import argparse
from pathlib import Path

from dmm.cli import run_sweep, sweep_cells

GRID = ["0", "0.0001", "0.001", "0.01", "0.1"]


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="results/table7")
    p.add_argument("--mechanism", default="mar")
    p.add_argument("--variant", default="MAR")
    p.add_argument("--ratio", default="0.4")
    p.add_argument("--seeds", nargs="+", default=["0"])
    p.add_argument("--epochs", default="50")
    p.add_argument("--n-train", default="10000")
    args = p.parse_args()

    cells = sweep_cells({
        "mechanisms": args.mechanism, "ratios": args.ratio, "variants": args.variant,
        "seeds": " ".join(args.seeds), "betas": " ".join(GRID), "gammas": " ".join(GRID),
        "epochs": args.epochs, "n_train": args.n_train,
    })
    rows = run_sweep(cells, Path(args.out), progress=lambda r: print(
        f"beta={r['beta']:g} gamma={r['gamma']:g} seed={r['seed']} mse={r.get('mse', '')} "
        f"mcc_z={r.get('mcc_z', '')} {r.get('error', '')}", flush=True))

    for metric in ("mse", "mcc_z"):
        print(f"\nmedian {metric} (rows: beta, columns: gamma)")
        print("beta\\gamma " + " ".join(f"{g:>9}" for g in GRID))
        for b in GRID:
            line = []
            for g in GRID:
                vals = sorted(float(r[metric]) for r in rows
                              if not r.get("error") and r["beta"] == float(b) and r["gamma"] == float(g))
                line.append(f"{vals[len(vals) // 2]:9.4f}" if vals else f"{'-':>9}")
            print(f"{b:>10} " + " ".join(line))


if __name__ == "__main__":
    main()
