"""Command-line entry point: preprocess, train, detect, evaluate, stats, grid.

Every option can also come from the environment as ``REENTRA_<NAME>``
(flag name upper-cased, dashes turned into underscores). Precedence is
flag, then environment, then built-in default.

Exit status: 0 success, 1 usage error, 2 data error, 3 internal
invariant violation.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import tempfile
import warnings
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .corpus import corpus_stats, load_manifest
from .errors import ContractViolation, DataError, ReentraError
from .metrics import Prediction, evaluate, roc_csv
from .preproc import SnippetRecord, preprocess_source, read_snippet_records, snippet_records
from .seqmodel import predict_proba
from .trainer import (
    DEFAULT_DROPOUT_GRID,
    DEFAULT_LR_GRID,
    Detector,
    Hyperparams,
    cross_validate,
    fit,
    grid_csv,
    grid_search,
    mean_metrics,
)

logger = logging.getLogger("reentra")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INVARIANT = 0, 1, 2, 3
ENV_PREFIX = "REENTRA_"


class UsageError(ReentraError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# --------------------------------------------------------------------------
# Configuration
# --------------------------------------------------------------------------


def _float_list(text: str) -> tuple[float, ...]:
    try:
        values = tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None
    if not values:
        raise argparse.ArgumentTypeError("list must not be empty")
    return values


# flag name -> (type, default); defaults of None mean "not applicable unless given"
_OPTIONS = {
    "manifest": (str, None),
    "snippets": (str, None),
    "checkpoint": (str, None),
    "out": (str, "."),
    "seed": (int, Hyperparams.seed),
    "lr": (float, Hyperparams.lr),
    "dropout": (float, Hyperparams.dropout),
    "batch-size": (int, Hyperparams.batch_size),
    "embed-dim": (int, Hyperparams.embed_dim),
    "seq-len": (int, Hyperparams.seq_len),
    "hidden": (int, Hyperparams.hidden),
    "epochs": (int, Hyperparams.epochs),
    "folds": (int, None),
    "lr-grid": (_float_list, DEFAULT_LR_GRID),
    "dropout-grid": (_float_list, DEFAULT_DROPOUT_GRID),
}

_HP_FLAGS = ("seed", "lr", "dropout", "batch-size", "embed-dim", "seq-len", "hidden", "epochs")

_COMMAND_FLAGS = {
    "preprocess": ("manifest", "out"),
    "train": ("snippets", "out", "folds", *_HP_FLAGS),
    "detect": ("checkpoint", "manifest", "out"),
    "evaluate": ("checkpoint", "snippets", "manifest", "out"),
    "stats": ("manifest", "out"),
    "grid": ("snippets", "out", "folds", "lr-grid", "dropout-grid", *_HP_FLAGS),
}


@dataclass
class RunConfig:
    """Fully resolved settings for one invocation."""

    command: str
    out: str
    manifest: str | None = None
    snippets: str | None = None
    checkpoint: str | None = None
    targets: list[str] = field(default_factory=list)
    folds: int | None = None
    lr_grid: list[float] | None = None
    dropout_grid: list[float] | None = None
    hyperparams: dict | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    def provenance(self) -> dict:
        """The settings that determine results; file locations are left out
        so artifacts from identical runs in different directories match."""
        doc = {"command": self.command, "version": __version__}
        for key in ("folds", "lr_grid", "dropout_grid", "hyperparams"):
            if getattr(self, key) is not None:
                doc[key] = getattr(self, key)
        return doc


def _resolve(args: argparse.Namespace, command: str, environ) -> dict:
    values = {}
    for flag in _COMMAND_FLAGS[command]:
        dest = flag.replace("-", "_")
        kind, default = _OPTIONS[flag]
        value = getattr(args, dest)
        if value is None:
            raw = environ.get(ENV_PREFIX + dest.upper())
            if raw is not None:
                try:
                    value = kind(raw)
                except (ValueError, argparse.ArgumentTypeError) as exc:
                    raise UsageError(f"{ENV_PREFIX}{dest.upper()}: {exc}") from None
        values[dest] = default if value is None else value
    return values


def _hyperparams(values: dict) -> Hyperparams:
    try:
        return Hyperparams(
            lr=values["lr"],
            dropout=values["dropout"],
            batch_size=values["batch_size"],
            embed_dim=values["embed_dim"],
            seq_len=values["seq_len"],
            hidden=values["hidden"],
            epochs=values["epochs"],
            seed=values["seed"],
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="reentra", description="Reentrancy detection for Solidity contracts.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    helps = {
        "preprocess": "turn a manifest of contracts into a snippet file",
        "train": "train a detector on a snippet file (optionally with k-fold CV)",
        "detect": "classify contracts with a trained checkpoint",
        "evaluate": "score a checkpoint on labeled snippets or contracts",
        "stats": "label and category counts of a manifest",
        "grid": "cross-validated search over learning rate and dropout",
    }
    for command, flags in _COMMAND_FLAGS.items():
        p = sub.add_parser(command, help=helps[command])
        for flag in flags:
            kind, default = _OPTIONS[flag]
            shown = ",".join(map(str, default)) if isinstance(default, tuple) else default
            p.add_argument(f"--{flag}", type=kind, default=None, help=f"default: {shown}")
        if command == "detect":
            p.add_argument("targets", nargs="*", help=".sol files or directories to scan")
    return parser


# --------------------------------------------------------------------------
# Output helpers
# --------------------------------------------------------------------------


def write_atomic(path: Path, text: str) -> None:
    """Write via a temporary file in the same directory, then rename."""
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _json(doc) -> str:
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def _jsonl(docs) -> str:
    return "".join(json.dumps(d, sort_keys=True) + "\n" for d in docs)


def _require(value, flag: str):
    if value is None:
        raise UsageError(f"--{flag} is required")
    return value


def _read_snippets(path: str) -> list[SnippetRecord]:
    try:
        with open(path, encoding="utf-8") as fh:
            return read_snippet_records(fh)
    except OSError as exc:
        raise DataError(f"cannot read snippet file {path}: {exc.strerror}") from None


def _load_detector(path: str) -> Detector:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"checkpoint {path} is not valid JSON: {exc}") from None
    try:
        return Detector.from_dict(doc)
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"checkpoint {path} is malformed: {exc}") from None


def _load_records(path: str, lenient: bool = False):
    if not Path(path).is_file():
        raise DataError(f"manifest not found: {path}")
    if lenient:
        return load_manifest(path, on_error=lambda err: logger.error("skipping: %s", err))
    return load_manifest(path)


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------


def cmd_preprocess(cfg: RunConfig, out: Path) -> list[str]:
    records = _load_records(_require(cfg.manifest, "manifest"), lenient=True)
    lines, ok, failed = [], 0, 0
    for rec in records:
        try:
            snippets = snippet_records(rec.id, rec.source, rec.label)
        except DataError as exc:
            logger.error("skipping %s: %s", rec.id, exc)
            failed += 1
            continue
        ok += 1
        print(f"{rec.id}\t{len(snippets)}")
        lines.extend(s.to_json() for s in snippets)
    if failed and not ok:
        raise DataError("no contract could be preprocessed")
    if not lines:
        logger.warning("no anchor statements found; snippet file is empty")
    write_atomic(out / "snippets.jsonl", _jsonl(lines))
    return ["snippets.jsonl"]


def cmd_train(cfg: RunConfig, out: Path) -> list[str]:
    hp = Hyperparams(**cfg.hyperparams)
    records = _read_snippets(_require(cfg.snippets, "snippets"))
    if not records:
        raise DataError("snippet file is empty")
    log_lines = []

    def on_epoch(epoch, loss):
        log_lines.append({"epoch": epoch + 1, "mean_loss": loss})
        logger.info("epoch %d mean_loss %.6f", epoch + 1, loss)

    detector = fit(records, hp, on_epoch=on_epoch)
    write_atomic(out / "checkpoint.json", json.dumps(detector.to_dict(), sort_keys=True) + "\n")
    write_atomic(out / "train_log.jsonl", _jsonl(log_lines))
    written = ["checkpoint.json", "train_log.jsonl"]
    if cfg.folds is not None:
        reports = cross_validate(records, hp, cfg.folds)
        doc = {
            "config": cfg.provenance(),
            "folds": [dict(r.to_dict(), fold=i, n_test=len(r.predictions)) for i, r in enumerate(reports)],
            "mean": mean_metrics(reports),
        }
        write_atomic(out / "folds.json", _json(doc))
        written.append("folds.json")
        print(json.dumps(doc["mean"], sort_keys=True))
    return written


def _target_files(targets: Sequence[str]) -> list[Path]:
    files = []
    for t in targets:
        p = Path(t)
        if p.is_dir():
            files.extend(sorted(p.rglob("*.sol")))
        else:
            files.append(p)
    return files


def _detect_one(detector: Detector, cid: str, raw: bytes) -> dict:
    try:
        seqs = preprocess_source(raw, cid)
    except DataError as exc:
        return {"id": cid, "verdict": "error", "max_score": "", "note": str(exc)}
    if not seqs:
        return {"id": cid, "verdict": 0, "max_score": "", "note": "no-anchor"}
    probs = predict_proba(detector.params, [detector.encode(s.tokens) for s in seqs])
    verdict = int(np.any(probs[:, 1] > probs[:, 0]))
    return {"id": cid, "verdict": verdict, "max_score": repr(float(probs[:, 1].max())), "note": ""}


def cmd_detect(cfg: RunConfig, out: Path) -> list[str]:
    detector = _load_detector(_require(cfg.checkpoint, "checkpoint"))
    rows = []
    if cfg.manifest is not None:
        for rec in _load_records(cfg.manifest, lenient=True):
            rows.append(_detect_one(detector, rec.id, rec.source))
    for path in _target_files(cfg.targets):
        try:
            raw = path.read_bytes()
        except OSError as exc:
            rows.append({"id": str(path), "verdict": "error", "max_score": "", "note": exc.strerror or "unreadable"})
            continue
        rows.append(_detect_one(detector, str(path), raw))
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=["id", "verdict", "max_score", "note"], lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    write_atomic(out / "predictions.csv", buf.getvalue())
    for row in rows:
        print(f"{row['id']}\t{row['verdict']}")
    return ["predictions.csv"]


def cmd_evaluate(cfg: RunConfig, out: Path) -> list[str]:
    detector = _load_detector(_require(cfg.checkpoint, "checkpoint"))
    if cfg.snippets is not None:
        records = _read_snippets(cfg.snippets)
    elif cfg.manifest is not None:
        records = [s for rec in _load_records(cfg.manifest) for s in snippet_records(rec.id, rec.source, rec.label)]
    else:
        raise UsageError("--snippets or --manifest is required")
    if not records:
        raise DataError("nothing to evaluate")
    report = evaluate(detector.predictions(records))
    doc = dict(report.to_dict(), config=dict(cfg.provenance(), hyperparams=detector.hp.to_dict()))
    write_atomic(out / "metrics.json", _json(doc))
    write_atomic(out / "roc.csv", roc_csv(report.roc))
    write_atomic(out / "eval_predictions.jsonl", _jsonl(_prediction_doc(p) for p in report.predictions))
    print(json.dumps(report.to_dict(), sort_keys=True))
    return ["metrics.json", "roc.csv", "eval_predictions.jsonl"]


def _prediction_doc(p: Prediction) -> dict:
    return {"id": p.id, "score": p.score, "label": p.label, "predicted": p.predicted}


def cmd_stats(cfg: RunConfig, out: Path) -> list[str]:
    stats = corpus_stats(_load_records(_require(cfg.manifest, "manifest")))
    doc = dict(stats.to_dict(), config=cfg.provenance())
    write_atomic(out / "stats.json", _json(doc))
    print(json.dumps(stats.to_dict(), sort_keys=True))
    return ["stats.json"]


def cmd_grid(cfg: RunConfig, out: Path) -> list[str]:
    hp = Hyperparams(**cfg.hyperparams)
    records = _read_snippets(_require(cfg.snippets, "snippets"))
    if not records:
        raise DataError("snippet file is empty")
    best, table = grid_search(records, hp, cfg.lr_grid, cfg.dropout_grid, cfg.folds or 10)
    write_atomic(out / "grid.csv", grid_csv(table))
    doc = {"config": cfg.provenance(), "best": {"lr": best.lr, "dropout": best.dropout}, "points": len(table)}
    write_atomic(out / "grid_best.json", _json(doc))
    print(json.dumps(doc["best"], sort_keys=True))
    return ["grid.csv", "grid_best.json"]


COMMANDS = {
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "detect": cmd_detect,
    "evaluate": cmd_evaluate,
    "stats": cmd_stats,
    "grid": cmd_grid,
}


# --------------------------------------------------------------------------
# Entry point
# --------------------------------------------------------------------------


def _config(args: argparse.Namespace, environ) -> RunConfig:
    values = _resolve(args, args.command, environ)
    cfg = RunConfig(command=args.command, out=values["out"])
    for f in fields(RunConfig):
        if f.name in values and f.name != "out":
            v = values[f.name]
            setattr(cfg, f.name, list(v) if isinstance(v, tuple) else v)
    if args.command in ("train", "grid"):
        cfg.hyperparams = _hyperparams(values).to_dict()
        if cfg.folds is not None and cfg.folds < 2:
            raise UsageError("--folds must be at least 2")
    if args.command == "detect":
        cfg.targets = list(args.targets)
    return cfg


def main(argv: Sequence[str] | None = None, environ=None) -> int:
    environ = os.environ if environ is None else environ
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # --help, --version and argument errors
        return EXIT_USAGE if exc.code is None else int(exc.code)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    saved_format = warnings.formatwarning
    warnings.formatwarning = lambda message, category, *_args, **_kw: f"{category.__name__}: {message}"
    logging.captureWarnings(True)
    try:
        return _run(parser, args, environ)
    finally:
        logging.captureWarnings(False)
        warnings.formatwarning = saved_format


def _run(parser: argparse.ArgumentParser, args: argparse.Namespace, environ) -> int:
    try:
        cfg = _config(args, environ)
        out = Path(cfg.out)
        written = COMMANDS[args.command](cfg, out)
        run = {"config": cfg.to_dict(), "version": __version__, "outputs": written}
        write_atomic(out / "run.json", _json(run))
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"reentra: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ContractViolation as exc:
        logger.error("invariant violated: %s", exc)
        return EXIT_INVARIANT
    except (DataError, ValueError) as exc:
        logger.error("%s", exc)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
