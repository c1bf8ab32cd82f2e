"""``alsrec`` command line: train, recommend, evaluate, sweep, synth.

Exit codes: 0 success, 1 runtime error, 2 usage error.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from contextlib import contextmanager
from datetime import datetime, timezone
from pathlib import Path
from typing import Sequence

from . import __version__
from .dataset import InteractionDataset, NoEligibleInvestorsError, ingest, read_csv, transpose, write_csv
from .evaluation import EvalConfig, sweep, write_sweep_csv, write_trials_csv
from .factorization import TrainConfig, load_model, save_model, train
from .recommend import top_k_batch, write_csv as write_recs_csv, write_jsonl
from .synth import planted_block_records

_logger = logging.getLogger("alsrec")

THREADS_ENV = "ALSREC_THREADS"


class CliError(Exception):
    """Runtime failure reported with exit code 1."""


# -- argument types --------------------------------------------------------

def _int_at_least(lo: int):
    def parse(text: str) -> int:
        try:
            v = int(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
        if v < lo:
            raise argparse.ArgumentTypeError(f"must be >= {lo}, got {v}")
        return v
    return parse


positive_int = _int_at_least(1)
non_negative_int = _int_at_least(0)


def non_negative_float(text: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {text!r}") from None
    if not v >= 0 or v == float("inf"):
        raise argparse.ArgumentTypeError(f"must be a finite number >= 0, got {text}")
    return v


def probability(text: str) -> float:
    v = non_negative_float(text)
    if v > 1:
        raise argparse.ArgumentTypeError(f"must be in [0, 1], got {text}")
    return v


def fraction(text: str) -> float:
    v = probability(text)
    if v == 0:
        raise argparse.ArgumentTypeError("must be in (0, 1]")
    return v


def list_of(item_type):
    def parse(text: str) -> list:
        parts = [p.strip() for p in text.split(",")]
        if not all(parts):
            raise argparse.ArgumentTypeError(f"malformed list {text!r}")
        return [item_type(p) for p in parts]
    return parse


def default_threads() -> int:
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            return positive_int(env)
        except argparse.ArgumentTypeError as exc:
            raise CliError(f"{THREADS_ENV}: {exc}") from None
    return os.cpu_count() or 1


# -- parser ----------------------------------------------------------------

def _add_training_flags(p: argparse.ArgumentParser, grid: bool) -> None:
    if grid:
        p.add_argument("--factors", type=list_of(positive_int), default=[1400],
                       help="comma-separated latent factor counts")
        p.add_argument("--iterations", type=list_of(positive_int), default=[2],
                       help="comma-separated iteration counts")
        p.add_argument("--lambda", dest="lam", type=list_of(non_negative_float), default=[0.0],
                       help="comma-separated regularization values")
    else:
        p.add_argument("--factors", type=positive_int, default=1400)
        p.add_argument("--iterations", type=positive_int, default=2)
        p.add_argument("--lambda", dest="lam", type=non_negative_float, default=0.0)
    p.add_argument("--cg-steps", type=positive_int, default=3,
                   help="conjugate-gradient steps per row and half-iteration")
    p.add_argument("--convergence-delta", type=non_negative_float, default=None,
                   help="stop once no factor entry changes by this much")
    p.add_argument("--transpose", action="store_true",
                   help="swap investors and companies (recommend investors to companies)")


def _add_common(p: argparse.ArgumentParser, seed: bool = True, threads: bool = True) -> None:
    if seed:
        p.add_argument("--seed", type=non_negative_int, default=0)
    if threads:
        p.add_argument("--threads", type=positive_int, default=None,
                       help=f"worker threads (default: ${THREADS_ENV} or all cores)")
    p.add_argument("--manifest", type=Path, default=None,
                   help="where to write the run manifest (JSON)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="alsrec", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="fit a factor model")
    p.add_argument("--input", type=Path, required=True)
    p.add_argument("--model-out", type=Path, required=True)
    _add_training_flags(p, grid=False)
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("recommend", help="top-k recommendations from a model")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--input", type=Path, default=None,
                   help="training CSV for masking (default: taken from the model's manifest)")
    p.add_argument("--transpose", action="store_true", default=None)
    who = p.add_mutually_exclusive_group(required=True)
    who.add_argument("--entity", action="append", help="entity ID (repeatable)")
    who.add_argument("--all", action="store_true", help="every entity in the model")
    p.add_argument("--top-k", type=positive_int, default=10)
    p.add_argument("--format", choices=("jsonl", "csv"), default="jsonl")
    p.add_argument("--output", type=Path, default=None, help="default: standard output")
    _add_common(p, seed=False, threads=False)
    p.set_defaults(func=cmd_recommend)

    for name, grid in (("evaluate", False), ("sweep", True)):
        p = sub.add_parser(
            name,
            help="holdout hit@k accuracy" if not grid else "holdout accuracy over a grid",
        )
        p.add_argument("--input", type=Path, required=True)
        _add_training_flags(p, grid=grid)
        p.add_argument("--trials", type=positive_int, default=50)
        p.add_argument("--holdout", type=fraction, default=0.10,
                       help="fraction of eligible investors to hold one pair out from")
        p.add_argument("--top-k", type=positive_int, default=10)
        p.add_argument("--jobs", type=positive_int, default=1, help="trials run concurrently")
        p.add_argument("--output", type=Path, default=None, help="sweep CSV (default: standard output)")
        p.add_argument("--trials-out", type=Path, default=None, help="per-trial CSV")
        p.add_argument("--record-time", action="store_true",
                       help="fill wall_time_s (makes the CSV run-dependent)")
        _add_common(p)
        p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("synth", help="generate planted block-model interactions")
    p.add_argument("--investors", type=positive_int, required=True)
    p.add_argument("--companies", type=positive_int, required=True)
    p.add_argument("--blocks", type=positive_int, default=2)
    p.add_argument("--density", type=probability, default=0.8)
    p.add_argument("--noise", type=probability, default=0.0)
    p.add_argument("--output", type=Path, default=None, help="default: standard output")
    _add_common(p, threads=False)
    p.set_defaults(func=cmd_synth)
    return parser


# -- manifest --------------------------------------------------------------

def file_digest(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="milliseconds")


_NOT_CONFIG = {"func", "verbose", "manifest"}


def resolved_config(args: argparse.Namespace) -> dict:
    out = {}
    for k, v in sorted(vars(args).items()):
        if k in _NOT_CONFIG:
            continue
        out[k] = str(v) if isinstance(v, Path) else v
    return out


def config_to_argv(config: dict, parser: argparse.ArgumentParser | None = None) -> list[str]:
    """Rebuild a command line from a manifest's ``config`` block."""
    parser = parser or build_parser()
    command = config["command"]
    sub = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    subparser = sub.choices[command]
    argv = [command]
    for action in subparser._actions:
        if not action.option_strings or action.dest not in config or action.dest in _NOT_CONFIG:
            continue
        value = config[action.dest]
        flag = action.option_strings[-1]
        if value is None or value is False:
            continue
        if isinstance(action, argparse._StoreTrueAction):
            argv.append(flag)
        elif isinstance(action, argparse._AppendAction):
            for v in value:
                argv += [flag, str(v)]
        elif isinstance(value, list):
            argv += [flag, ",".join(repr(v) if isinstance(v, float) else str(v) for v in value)]
        else:
            argv += [flag, repr(value) if isinstance(value, float) else str(value)]
    return argv


@contextmanager
def run_manifest(args: argparse.Namespace, default_path: Path | None):
    manifest = {
        "tool": "alsrec",
        "version": __version__,
        "command": args.command,
        "config": resolved_config(args),
        "inputs": {},
        "artifacts": [],
        "started": _now(),
    }
    yield manifest
    manifest["finished"] = _now()
    text = json.dumps(manifest, indent=2, sort_keys=True) + "\n"
    path = args.manifest or default_path
    if path is None:
        sys.stderr.write(text)
    else:
        _write_text(path, text)


def _write_text(path: Path, text: str) -> None:
    try:
        path.write_text(text, encoding="utf-8")
    except OSError as exc:
        raise CliError(f"cannot write {path}: {exc.strerror}") from exc


def _manifest_path(out: Path | None) -> Path | None:
    return None if out is None else out.with_name(out.name + ".manifest.json")


def _load_input(path: Path, manifest: dict, transposed: bool) -> InteractionDataset:
    if not path.is_file():
        raise CliError(f"input file not found: {path}")
    manifest["inputs"][str(path)] = {"sha256": file_digest(path)}
    d = read_csv(path)
    _logger.info("loaded %r", d)
    return transpose(d) if transposed else d


def _threads(args) -> int:
    if args.threads is None:
        args.threads = default_threads()
    return args.threads


# -- commands --------------------------------------------------------------

def cmd_train(args) -> None:
    _threads(args)
    with run_manifest(args, _manifest_path(args.model_out)) as manifest:
        d = _load_input(args.input, manifest, args.transpose)
        cfg = TrainConfig(
            factors=args.factors, iterations=args.iterations, cg_steps=args.cg_steps,
            lam=args.lam, seed=args.seed, threads=args.threads,
            convergence_delta=args.convergence_delta,
        )
        model = train(d, cfg)
        try:
            save_model(model, args.model_out)
        except OSError as exc:
            raise CliError(f"cannot write {args.model_out}: {exc.strerror}") from exc
        manifest["artifacts"].append(str(args.model_out))
        manifest["results"] = {
            "companies": d.n_companies, "investors": d.n_investors, "pairs": d.nnz,
            "loss_trace": model.loss_trace,
        }


def _training_source(args) -> tuple[Path, bool]:
    """Training CSV and orientation for a model, from flags or its train manifest."""
    path, transposed = args.input, args.transpose
    if path is None or transposed is None:
        mpath = _manifest_path(args.model)
        if not mpath.is_file():
            if path is not None:
                return path, False
            raise CliError(
                f"no --input given and no training manifest at {mpath}; "
                "pass the training CSV with --input"
            )
        cfg = json.loads(mpath.read_text(encoding="utf-8"))["config"]
        path = path if path is not None else Path(cfg["input"])
        transposed = transposed if transposed is not None else bool(cfg.get("transpose"))
    return path, transposed


def cmd_recommend(args) -> None:
    with run_manifest(args, _manifest_path(args.output)) as manifest:
        if not args.model.is_file():
            raise CliError(f"model file not found: {args.model}")
        model = load_model(args.model)
        manifest["inputs"][str(args.model)] = {"sha256": file_digest(args.model)}
        path, transposed = _training_source(args)
        mask = _load_input(path, manifest, transposed)
        if (mask.company_ids, mask.investor_ids) != (model.company_ids, model.investor_ids):
            raise CliError(f"{path} does not match the ID tables of {args.model}")
        if args.all:
            entities = range(model.n_investors)
        else:
            index = mask.investor_index
            missing = [e for e in args.entity if e not in index]
            if missing:
                raise CliError("unknown entity ID: " + ", ".join(missing))
            entities = [index[e] for e in args.entity]
        lists = top_k_batch(model, entities, args.top_k, mask)
        write = write_jsonl if args.format == "jsonl" else write_recs_csv
        if args.output is None:
            write(lists, sys.stdout)
        else:
            try:
                with open(args.output, "w", encoding="utf-8", newline="") as fh:
                    write(lists, fh)
            except OSError as exc:
                raise CliError(f"cannot write {args.output}: {exc.strerror}") from exc
            manifest["artifacts"].append(str(args.output))


def cmd_sweep(args) -> None:
    _threads(args)
    grid = args.command == "sweep"
    factors = args.factors if grid else [args.factors]
    iterations = args.iterations if grid else [args.iterations]
    lambdas = args.lam if grid else [args.lam]
    with run_manifest(args, _manifest_path(args.output)) as manifest:
        d = _load_input(args.input, manifest, args.transpose)
        cfg = EvalConfig(
            train=TrainConfig(
                factors=factors[0], iterations=iterations[0], cg_steps=args.cg_steps,
                lam=lambdas[0], threads=args.threads, convergence_delta=args.convergence_delta,
            ),
            holdout_fraction=args.holdout, top_k=args.top_k, trials=args.trials,
            base_seed=args.seed, jobs=args.jobs,
        )
        try:
            results = sweep(d, factors, iterations, lambdas, cfg)
        except Exception as exc:
            root = exc
            while root.__cause__ is not None:
                root = root.__cause__
            if isinstance(root, NoEligibleInvestorsError):
                raise CliError(
                    f"{root}. The protocol hides one interaction from each of a sample of "
                    "investors with at least two distinct interactions."
                ) from exc
            raise
        if args.output is None:
            write_sweep_csv(results, sys.stdout, with_time=args.record_time)
        else:
            try:
                with open(args.output, "w", encoding="utf-8", newline="") as fh:
                    write_sweep_csv(results, fh, with_time=args.record_time)
            except OSError as exc:
                raise CliError(f"cannot write {args.output}: {exc.strerror}") from exc
            manifest["artifacts"].append(str(args.output))
        if args.trials_out is not None:
            with open(args.trials_out, "w", encoding="utf-8", newline="") as fh:
                write_trials_csv(results, fh)
            manifest["artifacts"].append(str(args.trials_out))
        manifest["results"] = [
            {"factors": r.factors, "iterations": r.iterations, "lambda": r.lam,
             "accuracy_mean": r.accuracy_mean, "accuracy_std": r.accuracy_std,
             "wall_time_s": r.wall_time}
            for r in results
        ]


def cmd_synth(args, parser: argparse.ArgumentParser) -> None:
    if args.blocks > min(args.investors, args.companies):
        parser.error(
            f"--blocks ({args.blocks}) cannot exceed min(--investors, --companies) "
            f"({min(args.investors, args.companies)})"
        )
    with run_manifest(args, _manifest_path(args.output)) as manifest:
        records = planted_block_records(
            args.investors, args.companies, args.blocks, args.density, args.noise, args.seed
        )
        if not records:
            raise CliError("generated no interactions; raise --density or --noise")
        d = ingest(records)
        if args.output is None:
            write_csv(d, sys.stdout)
        else:
            try:
                write_csv(d, args.output)
            except OSError as exc:
                raise CliError(f"cannot write {args.output}: {exc.strerror}") from exc
            manifest["artifacts"].append(str(args.output))
        manifest["results"] = {"companies": d.n_companies, "investors": d.n_investors, "pairs": d.nnz}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        if args.func is cmd_synth:
            cmd_synth(args, parser)
        else:
            args.func(args)
    except CliError as exc:
        print(f"alsrec: error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, ArithmeticError, OSError, RuntimeError) as exc:
        print(f"alsrec: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
