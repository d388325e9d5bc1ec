"""Command-line entry point: preprocess, train, evaluate, topics, coherence, grid, synth.

Every command that writes files writes ``manifest.json`` into its output
directory before doing any work.  Exit codes: 0 success, 2 input error,
3 consistency (hash) error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import platform
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import model as m
from . import topics as tp
from .baselines import PmfConfig
from .corpus import (
    CORPUS_VERSION,
    REVIEW_LENGTH,
    CorpusError,
    CorpusMismatch,
    build_corpus,
    corpus_statistics,
    load_corpus,
    read_review_file,
    save_corpus,
    subsample_top_items,
)
from .embeddings import EmbeddingFormatError, file_digest, load_embedding_table
from .numerics import NumericError
from .training import (
    ARTIFACT_DEFAULT,
    PAPER_FACTORS,
    PAPER_FIXED,
    PAPER_LAMBDAS,
    USER_SET,
    TrainConfig,
    evaluate_rmse,
    fit_offset,
    fit_pmf,
    load_pmf,
    pmf_metrics_csv,
    run_grid,
    save_pmf,
    train_convmf,
)

log = logging.getLogger("convmf")

EXIT_OK, EXIT_INPUT, EXIT_CONSISTENCY, EXIT_NUMERIC = 0, 2, 3, 4
MANIFEST_NAME = "manifest.json"
CORPUS_FILES = ("corpus.bin", "vocab.txt", "ids.json")


class InputError(Exception):
    """Unusable command-line input (missing file, bad flag value)."""


# ---------------------------------------------------------------------------
# run manifest


@dataclass
class RunManifest:
    command: str
    config: dict  # field -> {"value": ..., "provenance": ...}
    inputs: dict  # path -> sha256
    seed: int
    outputs: list
    versions: dict = field(default_factory=dict)

    def __post_init__(self):
        for name, entry in self.config.items():
            if entry.get("provenance") not in (PAPER_FIXED, ARTIFACT_DEFAULT, USER_SET):
                raise ValueError(f"config field {name!r} lacks a provenance flag")
        if not self.versions:
            self.versions = {
                "convmf": __version__,
                "python": platform.python_version(),
                "numpy": np.__version__,
                "corpus_format": CORPUS_VERSION,
                "checkpoint_format": m.CHECKPOINT_VERSION,
            }

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    def write(self, directory) -> Path:
        path = Path(directory) / MANIFEST_NAME
        path.write_text(self.to_json(), encoding="utf-8")
        return path


def _annotate(values: dict, provenance: dict) -> dict:
    return {k: {"value": v, "provenance": provenance[k]} for k, v in values.items()}


def _provenance(values: dict, paper_fixed=(), user_set=()) -> dict:
    return {k: USER_SET if k in user_set else PAPER_FIXED if k in paper_fixed else ARTIFACT_DEFAULT for k in values}


def _sha256(path) -> str:
    return file_digest(path)


def _corpus_inputs(directory) -> dict:
    directory = Path(directory)
    return {str(directory / f): _sha256(directory / f) for f in CORPUS_FILES}


def _start(out, manifest: RunManifest) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    manifest.write(out)
    return out


# ---------------------------------------------------------------------------
# argument helpers


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _ints(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def _require_file(path, what="input") -> Path:
    p = Path(path)
    if not p.is_file():
        raise InputError(f"{what} not found or not a file: {p}")
    try:
        with open(p, "rb") as fh:
            fh.read(1)
    except OSError as exc:
        raise InputError(f"{what} unreadable: {p}: {exc}") from exc
    return p


def _require_corpus(directory) -> Path:
    d = Path(directory)
    for f in CORPUS_FILES:
        _require_file(d / f, "corpus file")
    return d


def _user_set(args, mapping: dict) -> set:
    """Config fields whose flags were given explicitly (their argparse default is None)."""
    return {fname for flag, fname in mapping.items() if getattr(args, flag, None) is not None}


TRAIN_FLAGS = {
    "lam": "lam",
    "factors": "n_factors",
    "epochs": "epochs",
    "batch_size": "batch_size",
    "step_size": "step_size",
    "weight_decay": "weight_decay",
    "patience": "patience",
    "min_epochs": "min_epochs",
    "seed": "seed",
    "mask_pad": "mask_pad",
    "freeze_embeddings": "freeze_embeddings",
    "review_cap": "review_cap",
    "nonlinearity": "nonlinearity",
}


def _train_config(args, n_factors=None) -> tuple[TrainConfig, set]:
    overrides = {}
    for flag, fname in TRAIN_FLAGS.items():
        value = getattr(args, flag, None)
        if value is None:
            continue
        if flag == "factors":
            if len(value) != 1:
                raise InputError("--factors takes a single value here")
            value = value[0]
        overrides[fname] = value
    if n_factors is not None:
        overrides["n_factors"] = n_factors
    try:
        cfg = TrainConfig(**overrides)
    except (TypeError, ValueError) as exc:
        raise InputError(str(exc)) from exc
    return cfg, _user_set(args, TRAIN_FLAGS)


def _pmf_config(args) -> tuple[PmfConfig, set]:
    flags = {"factors": "n_factors", "epochs": "epochs", "batch_size": "batch_size", "step_size": "step_size",
             "patience": "patience", "min_epochs": "min_epochs", "seed": "seed"}
    overrides = {}
    for flag, fname in flags.items():
        value = getattr(args, flag, None)
        if value is not None:
            overrides[fname] = value[0] if flag == "factors" else value
    return PmfConfig(**overrides), _user_set(args, flags)


def _train_provenance(cfg: TrainConfig, user_set) -> dict:
    return _annotate(asdict(cfg), cfg.provenance(user_set))


# ---------------------------------------------------------------------------
# commands


def cmd_preprocess(args) -> int:
    raw = _require_file(args.input)
    ratios = tuple(args.split)
    if len(ratios) != 3:
        raise InputError("--split needs three comma-separated ratios")
    values = {"split": list(ratios), "seed": args.seed, "min_count": args.min_count,
              "review_length": REVIEW_LENGTH, "subsample": args.subsample}
    given = {k for k in ("split", "seed", "min_count", "subsample") if args.explicit.get(k)}
    manifest = RunManifest(
        "preprocess",
        _annotate(values, _provenance(values, paper_fixed={"review_length"}, user_set=given)),
        {str(raw): _sha256(raw)},
        args.seed,
        [*CORPUS_FILES, "stats.json"],
    )
    errors: list = []
    records = read_review_file(raw, errors)
    if not records:
        raise InputError(f"{raw}: no usable review records ({len(errors)} malformed lines)")
    out = _start(args.out, manifest)
    full_stats = corpus_statistics(records)
    if args.subsample:
        records = subsample_top_items(records, args.subsample)
    corpus = build_corpus(records, ratios, args.seed, args.min_count)
    save_corpus(corpus, out)
    stats = {"raw": full_stats.to_dict(), "used": corpus_statistics(records).to_dict(),
             "malformed_lines": len(errors), "vocabulary_size": len(corpus.vocab)}
    (out / "stats.json").write_text(json.dumps(stats, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(full_stats.table())
    if args.subsample:
        print(f"subsample of top {args.subsample} items: {len(records)} reviews")
    print(f"vocabulary: {len(corpus.vocab)} tokens; malformed lines skipped: {len(errors)}")
    return EXIT_OK


def _load_inputs(args, need_glove=True):
    corpus_dir = _require_corpus(args.input)
    inputs = _corpus_inputs(corpus_dir)
    glove = None
    if need_glove:
        if not args.glove:
            raise InputError("--glove is required for this command")
        glove = _require_file(args.glove, "embedding file")
        inputs[str(glove)] = _sha256(glove)
    return corpus_dir, glove, inputs


def cmd_train(args) -> int:
    if args.model == "pmf":
        corpus_dir, _, inputs = _load_inputs(args, need_glove=False)
        cfg, user_set = _pmf_config(args)
        prov = _provenance(asdict(cfg), user_set=user_set)
        manifest = RunManifest("train", _annotate({"model": "pmf", **asdict(cfg)}, {"model": USER_SET, **prov}),
                               inputs, cfg.seed, ["checkpoint.json", "metrics.csv"])
        corpus = load_corpus(corpus_dir)
        out = _start(args.out, manifest)
        params = fit_pmf(corpus, cfg)
        save_pmf(out / "checkpoint.json", params, corpus.vocab.hash, cfg)
        (out / "metrics.csv").write_text(pmf_metrics_csv(params), encoding="utf-8")
        rmse = evaluate_rmse("pmf", params, corpus, "test")
        print(f"pmf best epoch {params.best_epoch}; test RMSE {rmse:.6f}")
        return EXIT_OK

    corpus_dir, glove, inputs = _load_inputs(args)
    cfg, user_set = _train_config(args)
    manifest = RunManifest("train", _train_provenance(cfg, user_set), inputs, cfg.seed,
                           ["checkpoint.json", "metrics.csv", "timing.csv"])
    corpus = load_corpus(corpus_dir)
    table = load_embedding_table(glove, corpus.vocab, seed=cfg.seed)
    out = _start(args.out, manifest)

    def on_epoch(rec):
        log.info("epoch %d  train %.6f  rmse %.6f  H %.4f bits  val %.6f", rec.epoch, rec.train_total,
                 rec.train_rmse, rec.train_entropy_bits, rec.val_rmse)

    try:
        params, history = train_convmf(cfg, corpus, table, on_epoch=on_epoch)
    except NumericError as exc:
        good = getattr(exc, "checkpoint", None)
        if good is not None:
            m.save_model(out / "checkpoint.json", good, corpus.vocab.hash, table.source)
            (out / "metrics.csv").write_text(exc.history.metrics_csv(), encoding="utf-8")
        raise
    m.save_model(out / "checkpoint.json", params, corpus.vocab.hash, table.source)
    (out / "metrics.csv").write_text(history.metrics_csv(), encoding="utf-8")
    (out / "timing.csv").write_text(history.timing_csv(), encoding="utf-8")
    rmse = evaluate_rmse("convmf", params, corpus, "test", table.matrix)
    best = history.best()
    print(f"convmf best epoch {best.epoch}; val RMSE {best.val_rmse:.6f}; test RMSE {rmse:.6f}; "
          f"final entropy {history.final().train_entropy_bits:.4f} bits")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    need_glove = args.model == "convmf"
    corpus_dir, glove, inputs = _load_inputs(args, need_glove=need_glove)
    if args.model != "offset":
        if not args.checkpoint:
            raise InputError(f"--checkpoint is required for --model {args.model}")
        ckpt = _require_file(args.checkpoint, "checkpoint")
        inputs[str(ckpt)] = _sha256(ckpt)
    values = {"model": args.model, "split": args.split}
    manifest = RunManifest("evaluate", _annotate(values, _provenance(values, user_set=set(values))), inputs,
                           args.seed, ["evaluation.json"] if args.out else [])
    corpus = load_corpus(corpus_dir)
    if args.model == "offset":
        model, matrix = fit_offset(corpus), None
    elif args.model == "pmf":
        model, matrix = load_pmf(args.checkpoint, corpus.vocab.hash), None
    else:
        table = load_embedding_table(glove, corpus.vocab, seed=_checkpoint_seed(args.checkpoint, args.seed))
        model = m.load_model(args.checkpoint, corpus.vocab.hash, table.source)
        matrix = table.matrix
    if args.out:
        out = _start(args.out, manifest)
    rmse = evaluate_rmse(args.model, model, corpus, args.split, matrix)
    if args.out:
        result = {"model": args.model, "split": args.split, "rmse": rmse}
        (out / "evaluation.json").write_text(json.dumps(result, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(f"{args.model} {args.split} RMSE {rmse!r}")
    return EXIT_OK


def _checkpoint_seed(path, default: int) -> int:
    """Training seed recorded in a checkpoint; unmatched word rows are drawn from it."""
    try:
        return int(json.loads(Path(path).read_text(encoding="utf-8"))["meta"]["config"]["seed"])
    except (KeyError, TypeError, ValueError, json.JSONDecodeError):
        return default


def _print_report(report: tp.TopicReport) -> None:
    for t in report.factors:
        words = " ".join(tok for tok, _, _ in t.keywords)
        coh = "excluded" if t.excluded else f"{t.coherence:.4f}"
        print(f"factor {t.index:>3}  coherence {coh:>9}  {words}")
    overall = "undefined" if report.overall_coherence is None else f"{report.overall_coherence:.4f}"
    print(f"overall coherence {overall}; skipped pairs {report.skipped_pairs}")


def cmd_topics(args) -> int:
    corpus_dir, glove, inputs = _load_inputs(args)
    ckpt = _require_file(args.checkpoint, "checkpoint")
    inputs[str(ckpt)] = _sha256(ckpt)
    values = {"top_k": args.top_k, "count_floor": args.count_floor, "absolute": args.absolute}
    given = {k for k in values if args.explicit.get(k)}
    manifest = RunManifest("topics", _annotate(values, _provenance(values, user_set=given)), inputs, args.seed,
                           ["topics.json"])
    corpus = load_corpus(corpus_dir)
    table = load_embedding_table(glove, corpus.vocab, seed=_checkpoint_seed(ckpt, args.seed))
    params = m.load_model(ckpt, corpus.vocab.hash, table.source)
    out = _start(args.out, manifest)
    report = tp.topic_report(params, corpus, table, k=args.top_k, count_floor=args.count_floor,
                             absolute=args.absolute)
    (out / "topics.json").write_text(report.to_json() + "\n", encoding="utf-8")
    _print_report(report)
    return EXIT_OK


def cmd_coherence(args) -> int:
    corpus_dir, glove, inputs = _load_inputs(args)
    rep_path = _require_file(args.report, "topic report")
    inputs[str(rep_path)] = _sha256(rep_path)
    try:
        report = json.loads(rep_path.read_text(encoding="utf-8"))
        report["factors"]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise InputError(f"{rep_path}: not a topic report: {exc}") from exc
    manifest = RunManifest("coherence", {}, inputs, args.seed, ["coherence.json"] if args.out else [])
    corpus = load_corpus(corpus_dir)
    table = load_embedding_table(glove, corpus.vocab, seed=args.seed)
    rescored = tp.rescore_report(report, corpus.vocab, table)
    if args.out:
        out = _start(args.out, manifest)
        (out / "coherence.json").write_text(rescored.to_json() + "\n", encoding="utf-8")
    _print_report(rescored)
    return EXIT_OK


def _grid_csv(table: dict) -> str:
    """Rows = n_factors, columns = lambda, in the layout of a results table."""
    lams = sorted({float(l) for row in table.values() for l in row}, key=float)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["n_factors", *[repr(l) for l in lams]])
    for f in sorted(table, key=int):
        row = table[f]
        w.writerow([f, *["" if row.get(repr(l)) is None else repr(row[repr(l)]) for l in lams]])
    return buf.getvalue()


def cmd_grid(args) -> int:
    corpus_dir, glove, inputs = _load_inputs(args)
    lambdas = args.lambdas if args.lambdas is not None else list(PAPER_LAMBDAS)
    factors = args.factors if args.factors is not None else list(PAPER_FACTORS)
    if not lambdas or not factors:
        raise InputError("grid needs at least one lambda and one factor count")
    args_no_f = argparse.Namespace(**{**vars(args), "factors": None, "lam": None})
    template, user_set = _train_config(args_no_f)
    config = _train_provenance(template, user_set)
    config.pop("lam")
    config.pop("n_factors")
    config["lambdas"] = {"value": lambdas, "provenance": USER_SET if args.lambdas is not None else PAPER_FIXED}
    config["factors"] = {"value": factors, "provenance": USER_SET if args.factors is not None else PAPER_FIXED}
    config["top_k"] = {"value": args.top_k, "provenance": USER_SET if args.explicit.get("top_k") else ARTIFACT_DEFAULT}
    manifest = RunManifest("grid", config, inputs, template.seed, ["grid.json", "rmse.csv", "coherence.csv"])
    corpus = load_corpus(corpus_dir)
    table = load_embedding_table(glove, corpus.vocab, seed=template.seed)
    out = _start(args.out, manifest)

    def on_cell(cell):
        print(f"lambda={cell.lam} F={cell.n_factors}: {cell.status} rmse={cell.rmse} coherence={cell.coherence}",
              flush=True)

    grid = run_grid(template, lambdas, factors, corpus, table, top_k=args.top_k, on_cell=on_cell)
    (out / "grid.json").write_text(json.dumps(grid, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    (out / "rmse.csv").write_text(_grid_csv(grid["rmse"]), encoding="utf-8")
    (out / "coherence.csv").write_text(_grid_csv(grid["coherence"]), encoding="utf-8")
    failed = [c for c in grid["cells"] if c["status"] != "ok"]
    if failed and len(failed) == len(grid["cells"]):
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_synth(args) -> int:
    from .synthetic import WorldSpec, generate_world

    spec = WorldSpec(seed=args.seed)
    values = asdict(spec)
    values["review_words"] = list(values["review_words"])
    manifest = RunManifest("synth", _annotate(values, _provenance(values, user_set={"seed"})), {}, args.seed,
                           ["reviews.jsonl", "vectors.txt", "world.json"])
    out = _start(args.out, manifest)
    world = generate_world(spec)
    world.write(out)
    print(f"wrote {len(world.records)} reviews and {len(world.glove_words)} vectors to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


class _Explicit(argparse.Action):
    """Store the value and remember that the flag was given."""

    def __call__(self, parser, namespace, values, option_string=None):
        setattr(namespace, self.dest, values)
        namespace.explicit = {**getattr(namespace, "explicit", {}), self.dest: True}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="convmf", description=__doc__.splitlines()[0])
    p.add_argument("--log-level", default="WARNING", help="logging level (default WARNING)")
    p.set_defaults(explicit={})
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, corpus=True, glove=False, out=True, out_required=True):
        if corpus:
            sp.add_argument("--input", required=True, help="preprocessed corpus directory")
        if glove:
            sp.add_argument("--glove", help="word vectors in GloVe text format")
        if out:
            sp.add_argument("--out", required=out_required, help="output directory")

    def training_flags(sp, grid=False):
        sp.add_argument("--seed", type=int, default=None, help="seed for every random choice (default 0)")
        if not grid:
            sp.add_argument("--lambda", dest="lam", type=float, default=None, help="entropy weight (default 0.0)")
        sp.add_argument("--factors", type=_ints, default=None,
                        help="latent factors; comma-separated list for grid" if grid else "latent factors (default 8)")
        sp.add_argument("--epochs", type=int, default=None)
        sp.add_argument("--batch-size", type=int, default=None, help="items per batch")
        sp.add_argument("--step-size", type=float, default=None)
        sp.add_argument("--weight-decay", type=float, default=None)
        sp.add_argument("--patience", type=int, default=None)
        sp.add_argument("--min-epochs", type=int, default=None)
        sp.add_argument("--review-cap", type=int, default=None, help="max reviews per item per batch")
        sp.add_argument("--nonlinearity", choices=["identity", "tanh"], default=None)
        sp.add_argument("--mask-pad", action="store_const", const=True, default=None,
                        help="exclude all-PAD windows from the entropy term")
        sp.add_argument("--freeze-embeddings", action=argparse.BooleanOptionalAction, default=None,
                        help="keep input word vectors fixed (default on)")

    sp = sub.add_parser("preprocess", help="tokenize raw reviews into a corpus directory")
    sp.add_argument("--input", required=True, help="JSON-lines review file (.json, .jsonl or .gz)")
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int, default=42, action=_Explicit)
    sp.add_argument("--split", type=_floats, default=[0.8, 0.1, 0.1], action=_Explicit,
                    help="train,valid,test ratios (default 0.8,0.1,0.1)")
    sp.add_argument("--min-count", type=int, default=5, action=_Explicit)
    sp.add_argument("--subsample", type=int, default=None, action=_Explicit,
                    help="keep only the N most-reviewed items")
    sp.set_defaults(func=cmd_preprocess)

    sp = sub.add_parser("train", help="train ConvMF or PMF")
    common(sp, glove=True)
    sp.add_argument("--model", choices=["convmf", "pmf"], default="convmf")
    training_flags(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("evaluate", help="RMSE of a model on a split")
    common(sp, glove=True, out_required=False)
    sp.add_argument("--model", choices=["offset", "pmf", "convmf"], required=True)
    sp.add_argument("--checkpoint")
    sp.add_argument("--split", choices=["train", "valid", "test"], default="test")
    sp.add_argument("--seed", type=int, default=0, help="seed used for unmatched word vectors")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("topics", help="extract per-factor keywords and coherence")
    common(sp, glove=True)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--top-k", type=int, default=10, action=_Explicit)
    sp.add_argument("--count-floor", type=int, default=5, action=_Explicit,
                    help="minimum training occurrences for a keyword")
    sp.add_argument("--absolute", action="store_true", help="rank by |mean activation|")
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_topics)

    sp = sub.add_parser("coherence", help="rescore an exported topic report")
    common(sp, glove=True, out_required=False)
    sp.add_argument("--report", required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_coherence)

    sp = sub.add_parser("grid", help="lambda x factors experiment grid")
    common(sp, glove=True)
    sp.add_argument("--lambdas", type=_floats, default=None, help="comma-separated (default 0,0.4,...,2.0)")
    sp.add_argument("--top-k", type=int, default=10, action=_Explicit)
    training_flags(sp, grid=True)
    sp.set_defaults(func=cmd_grid)

    sp = sub.add_parser("synth", help="write a seeded synthetic review world")
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int, default=7)
    sp.set_defaults(func=cmd_synth)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CorpusMismatch, m.CheckpointMismatch) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONSISTENCY
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (InputError, CorpusError, EmbeddingFormatError, FileNotFoundError, tp.UndefinedCoherence) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
