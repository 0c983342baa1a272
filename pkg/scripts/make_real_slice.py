"""Write the bundled 2,000-row real-series slice used by the smoke test.

Source: weekly atmospheric CO2 at Mauna Loa (NOAA, public domain) as shipped
with statsmodels.  Gaps are filled by time interpolation so every row is
numeric; the pipeline then masks entries itself.

Usage:
    python3 scripts/make_real_slice.py [--out tests/data/co2_weekly.csv] [--rows 2000]
"""
import argparse

from statsmodels.datasets import co2


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="tests/data/co2_weekly.csv")
    p.add_argument("--rows", type=int, default=2000)
    args = p.parse_args()
    df = co2.load_pandas().data.interpolate(method="time").dropna()
    df = df.iloc[: args.rows]
    df.index.name = "date"
    df.to_csv(args.out, float_format="%.1f", date_format="%Y-%m-%d")
    print(f"{args.out}: {len(df)} rows, {df.index[0].date()} .. {df.index[-1].date()}")


if __name__ == "__main__":
    main()
