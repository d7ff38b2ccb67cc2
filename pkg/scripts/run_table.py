"""Run every config in scripts/configs and print the comparison table.

    python scripts/run_table.py --out runs            # all configs
    python scripts/run_table.py --out runs clean regions_ortho

Completed runs are skipped, so an interrupted sweep can simply be restarted.
Each desk run trains two to three convnets and takes several minutes on one core.
"""
import argparse
import pathlib
import sys

from unlearnable import cli
from unlearnable.config import load_config

CONFIGS = pathlib.Path(__file__).resolve().parent / "configs"


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", default="runs")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--configs", type=pathlib.Path, default=CONFIGS, help="directory of JSON configs")
    parser.add_argument("names", nargs="*", help="config names without .json (default: all)")
    args = parser.parse_args(argv)

    names = args.names or sorted(p.stem for p in args.configs.glob("*.json"))
    run_dirs = []
    for name in names:
        path = args.configs / f"{name}.json"
        extra = [] if args.seed is None else ["--seed", str(args.seed)]
        code = cli.main(["run", "--config", str(path), "--out", args.out] + extra)
        if code:
            print(f"{name}: exit code {code}", file=sys.stderr)
            continue
        cfg = load_config(path)
        if args.seed is not None:
            cfg.seed = args.seed
        run_dirs.append(str(pathlib.Path(args.out) / cfg.run_id()))
    return cli.main(["report", *run_dirs, "--out", args.out])


if __name__ == "__main__":
    sys.exit(main())
