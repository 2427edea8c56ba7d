"""Command line entry point: gen-data, run, sweep, report."""
from __future__ import annotations

import argparse
import glob as globlib
import json
import os
import re
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, fields
from pathlib import Path

from .datagen import MODES, CorpusSpec, build_dataset, read_dataset, write_dataset
from .metrics import RunSummary, compare, summarize, table_to_csv, table_to_markdown
from .orchestrator import AGGREGATORS, FederationConfig, read_metrics, run_federation, write_metrics

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

SEED_ENV = "FEDCANON_SEED"
PARTITION_KEYS = {"num_clients": 5, "num_rounds": 10, "mode": "image_image",
                  "eval_fraction": 0.2, "gamma": 0.5}


class CliError(Exception):
    """Reported as one JSON object on stderr."""

    def __init__(self, kind: str, message: str, exit_code: int = 1, **extra):
        super().__init__(message)
        self.kind, self.exit_code, self.extra = kind, exit_code, extra

    def payload(self) -> dict:
        return {"error": self.kind, "message": str(self)} | self.extra


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise CliError("usage", message, exit_code=2)


def load_config_file(path: str | Path) -> dict:
    """Parse a TOML or JSON file (chosen by extension, .json means JSON)."""
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as e:
        raise CliError("io", f"cannot read {p}: {e.strerror}", file=str(p)) from e
    if p.suffix.lower() == ".json":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as e:
            raise CliError("parse", f"{p}:{e.lineno}:{e.colno}: {e.msg}", file=str(p),
                           line=e.lineno) from e
    else:
        try:
            data = tomllib.loads(text)
        except tomllib.TOMLDecodeError as e:
            m = re.search(r"line (\d+)", str(e))
            line = int(m.group(1)) if m else None
            raise CliError("parse", f"{p}:{line}: {e}", file=str(p), line=line) from e
    if not isinstance(data, dict):
        raise CliError("parse", f"{p}: top level must be a table/object", file=str(p))
    return data


def _seed_override(cli_seed: int | None) -> int | None:
    if cli_seed is not None:
        return cli_seed
    env = os.environ.get(SEED_ENV)
    if env is None or env == "":
        return None
    try:
        return int(env)
    except ValueError:
        raise CliError("usage", f"{SEED_ENV}={env!r} is not an integer", exit_code=2) from None


def resolve_config(path: str | Path, cli_seed: int | None = None) -> FederationConfig:
    raw = load_config_file(path)
    seed = _seed_override(cli_seed)
    if seed is not None:
        raw["seed"] = seed
    agg = raw.get("aggregator", "fedcmp")
    if agg not in AGGREGATORS:
        raise CliError("usage", f"{path}: unknown aggregator {agg!r}; valid values: "
                       f"{', '.join(AGGREGATORS)}", exit_code=2, file=str(path),
                       valid=list(AGGREGATORS))
    try:
        return FederationConfig.from_dict(raw)
    except (TypeError, ValueError) as e:
        raise CliError("config", f"{path}: {e}", file=str(path)) from e


def resolve_data_spec(path: str | Path, cli_seed: int | None = None) -> tuple[CorpusSpec, dict]:
    """Corpus fields at top level, plus an optional [partition] table."""
    raw = load_config_file(path)
    part = dict(PARTITION_KEYS)
    part_raw = raw.pop("partition", {})
    unknown = sorted(set(part_raw) - set(part))
    if unknown:
        raise CliError("config", f"{path}: unknown partition keys: {', '.join(unknown)}", file=str(path))
    part.update(part_raw)
    if part["mode"] not in MODES:
        raise CliError("usage", f"{path}: unknown partition mode {part['mode']!r}; valid values: "
                       f"{', '.join(MODES)}", exit_code=2, file=str(path))
    known = {f.name for f in fields(CorpusSpec)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise CliError("config", f"{path}: unknown corpus keys: {', '.join(unknown)}", file=str(path))
    seed = _seed_override(cli_seed)
    if seed is not None:
        raw["seed"] = seed
    try:
        return CorpusSpec(**raw), part
    except (TypeError, ValueError) as e:
        raise CliError("config", f"{path}: {e}", file=str(path)) from e


def _load_data(data_dir: str | Path):
    d = Path(data_dir)
    if not (d / "manifest.json").exists():
        raise CliError("io", f"{d}: no manifest.json; run gen-data first", file=str(d))
    try:
        return read_dataset(d)
    except (OSError, ValueError, KeyError) as e:
        raise CliError("data", f"{d}: {e}", file=str(d)) from e


def execute_run(cfg: FederationConfig, data_dir: str | Path | None, out_dir: str | Path) -> dict:
    """Run one federation and write its outputs; returns the summary row."""
    if data_dir is not None:
        corpus, plan, _ = _load_data(data_dir)
    else:
        try:
            corpus, plan = build_dataset(cfg.corpus_spec(), cfg.num_clients, cfg.num_rounds,
                                         cfg.partition_mode, cfg.eval_fraction)
        except (TypeError, ValueError) as e:
            raise CliError("data", f"cannot build dataset from config: {e}") from e
    try:
        result = run_federation(cfg, corpus, plan)
    except Exception as e:
        raise CliError("run", str(e)) from e
    out = Path(out_dir)
    write_metrics(result.records, out)
    result.final_params.save(out / "final_params.npz")
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    summary = summarize(result.records)
    rows = compare([(out.name, summary)])
    (out / "summary.csv").write_text(table_to_csv(rows))
    return rows[0]


def cmd_gen_data(args) -> int:
    spec, part = resolve_data_spec(args.spec, args.seed)
    try:
        corpus, plan = build_dataset(spec, part["num_clients"], part["num_rounds"], part["mode"],
                                     part["eval_fraction"], part["gamma"])
    except ValueError as e:
        raise CliError("partition", f"{args.spec}: {e}", file=str(args.spec)) from e
    manifest = write_dataset(args.out, corpus, plan, part["eval_fraction"])
    print(json.dumps({"out": str(args.out), "num_samples": manifest["num_samples"],
                      "num_train": manifest["num_train"], "num_eval": manifest["num_eval"]}))
    return 0


def cmd_run(args) -> int:
    cfg = resolve_config(args.config, args.seed)
    row = execute_run(cfg, args.data, args.out)
    print(json.dumps(row))
    return 0


def _sweep_one(job: tuple[str, str | None, str, int | None]) -> tuple[str, dict | None, dict | None]:
    path, data, out, seed = job
    name = Path(path).stem
    try:
        cfg = resolve_config(path, seed)
        execute_run(cfg, data, Path(out) / name)
        records = read_metrics(Path(out) / name / "metrics.jsonl")
        return name, asdict(summarize(records)), None
    except CliError as e:
        return name, None, e.payload()
    except Exception as e:  # noqa: BLE001 - a sweep records failures and moves on
        return name, None, {"error": type(e).__name__, "message": str(e)}


def _write_report(out: Path, named: list[tuple[str, object]], failures: list[dict]) -> list[dict]:
    runs = [(n, None if s is None else RunSummary(**s) if isinstance(s, dict) else s) for n, s in named]
    try:
        rows = compare(runs)
    except ValueError as e:
        raise CliError("report", str(e)) from e
    out.mkdir(parents=True, exist_ok=True)
    (out / "summary.csv").write_text(table_to_csv(rows))
    (out / "summary.md").write_text(table_to_markdown(rows))
    ok = [(n, s) for n, s in runs if s is not None]
    if ok:
        lines = ["round," + ",".join(n for n, _ in ok)]
        for r in range(ok[0][1].num_rounds):
            lines.append(f"{r + 1}," + ",".join(repr(s.eval_series[r]) for _, s in ok))
        (out / "eval_series.csv").write_text("\n".join(lines) + "\n")
    if failures:
        (out / "failures.json").write_text(json.dumps(failures, indent=2) + "\n")
    return rows


def cmd_sweep(args) -> int:
    paths = sorted(globlib.glob(args.configs))
    if not paths:
        raise CliError("usage", f"no config files match {args.configs!r}", exit_code=2)
    if args.jobs < 1:
        raise CliError("usage", "--jobs must be >= 1", exit_code=2)
    jobs = [(p, args.data, args.out, args.seed) for p in paths]
    if args.jobs > 1:
        with ProcessPoolExecutor(args.jobs) as ex:
            results = list(ex.map(_sweep_one, jobs))
    else:
        results = [_sweep_one(j) for j in jobs]
    failures = [{"run": n} | err for n, _, err in results if err is not None]
    rows = _write_report(Path(args.out), [(n, s) for n, s, _ in results], failures)
    print(table_to_markdown(rows), end="")
    if failures:
        print(json.dumps({"error": "sweep", "message": f"{len(failures)} of {len(paths)} runs failed",
                          "failures": failures}), file=sys.stderr)
        return 1
    return 0


def cmd_report(args) -> int:
    named = []
    for d in args.runs:
        path = Path(d) / "metrics.jsonl"
        if not path.exists():
            raise CliError("io", f"{d}: no metrics.jsonl", file=str(d))
        named.append((Path(d).name, summarize(read_metrics(path))))
    rows = _write_report(Path(args.out), named, [])
    print(table_to_markdown(rows), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fedcanon", description="Federated projector alignment experiments.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate a synthetic corpus and partition plan")
    g.add_argument("--spec", required=True, help="TOML/JSON corpus spec with optional [partition] table")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--seed", type=int, help=f"overrides the seed in the corpus file (and {SEED_ENV})")
    g.set_defaults(func=cmd_gen_data)

    r = sub.add_parser("run", help="run one federation")
    r.add_argument("--config", required=True, help="TOML/JSON federation config")
    r.add_argument("--data", help="dataset directory from gen-data; built from the config if omitted")
    r.add_argument("--out", required=True, help="output directory")
    r.add_argument("--seed", type=int, help=f"overrides the config seed (and {SEED_ENV})")
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("sweep", help="run every matching config and compare")
    s.add_argument("--configs", required=True, help="glob of config files (quote it)")
    s.add_argument("--data", help="shared dataset directory")
    s.add_argument("--out", required=True, help="output directory; one subdirectory per config")
    s.add_argument("--jobs", type=int, default=1, help="parallel runs (default 1)")
    s.add_argument("--seed", type=int, help=f"overrides every config seed (and {SEED_ENV})")
    s.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="compare finished runs")
    p.add_argument("runs", nargs="+", help="run output directories")
    p.add_argument("--out", required=True, help="report directory")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except CliError as e:
        print(json.dumps(e.payload()), file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
