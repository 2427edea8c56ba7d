"""Toggle ablation and alpha sweep through the CLI, sharing one generated dataset."""
import argparse
from pathlib import Path

from fedcanon.cli import main as cli

ROOT = Path(__file__).resolve().parent.parent


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/ablation")
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--seed", type=int, default=None)
    args = ap.parse_args()
    out = Path(args.out)
    seed = [] if args.seed is None else ["--seed", str(args.seed)]

    code = cli(["gen-data", "--spec", str(ROOT / "configs" / "data.toml"), "--out", str(out / "data"), *seed])
    if code:
        raise SystemExit(code)
    status = 0
    for group in ("ablation", "alpha"):
        print(f"\n## {group}")
        status |= cli(["sweep", "--configs", str(ROOT / "configs" / group / "*.toml"),
                       "--data", str(out / "data"), "--out", str(out / group),
                       "--jobs", str(args.jobs), *seed])
    raise SystemExit(status)


if __name__ == "__main__":
    main()
