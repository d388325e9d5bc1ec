"""Paired-run protocol behind the trend checks: seeds x factors x lambdas, plus baselines."""

from __future__ import annotations

import logging
import os
import tempfile
from dataclasses import asdict, dataclass
from pathlib import Path

from .baselines import PmfConfig
from .corpus import build_corpus, read_review_file, subsample_top_items
from .embeddings import load_embedding_table
from .topics import topic_report
from .training import TrainConfig, convmf_split_rmse, evaluate_rmse, fit_offset, fit_pmf, train_convmf

log = logging.getLogger(__name__)

GROCERY_ENV = "CONVMF_GROCERY_PATH"
GLOVE_ENV = "CONVMF_GLOVE_PATH"
SUBSAMPLE_ITEMS = 2000


@dataclass
class RunResult:
    seed: int
    n_factors: int
    lam: float
    test_rmse: float
    best_epoch: int
    final_entropy_bits: float
    coherence: float | None


def paired_runs(corpus, table, seeds, factors, lambdas, template: TrainConfig | None = None, top_k=10,
                count_floor=5, on_result=None) -> list[RunResult]:
    """One ConvMF run per (seed, F, lambda); runs sharing a seed share initial draws."""
    template = template or TrainConfig()
    out = []
    for seed in seeds:
        for f in factors:
            for lam in lambdas:
                cfg = TrainConfig(**{**asdict(template), "seed": int(seed), "n_factors": int(f), "lam": float(lam)})
                params, hist = train_convmf(cfg, corpus, table)
                report = topic_report(params, corpus, table, k=top_k, count_floor=count_floor)
                res = RunResult(int(seed), int(f), float(lam), convmf_split_rmse(params, table.matrix, corpus, "test"),
                                hist.best_epoch, hist.final().train_entropy_bits, report.overall_coherence)
                log.info("%s", res)
                if on_result:
                    on_result(res)
                out.append(res)
    return out


def baseline_rmse(corpus, seeds, pmf_template: PmfConfig | None = None):
    """(Offset test RMSE, {seed: PMF test RMSE})."""
    pmf_template = pmf_template or PmfConfig()
    offset = evaluate_rmse("offset", fit_offset(corpus), corpus, "test")
    pmf = {}
    for seed in seeds:
        cfg = PmfConfig(**{**asdict(pmf_template), "seed": int(seed)})
        pmf[int(seed)] = evaluate_rmse("pmf", fit_pmf(corpus, cfg), corpus, "test")
    return offset, pmf


def lookup(results, seed, n_factors, lam) -> RunResult:
    return next(r for r in results if r.seed == seed and r.n_factors == n_factors and r.lam == lam)


def proxy_corpus(spec=None, directory=None):
    """Corpus and embedding table of a synthetic world written to ``directory`` (a temp dir by default)."""
    from .synthetic import WorldSpec, generate_world

    world = generate_world(spec or WorldSpec())
    directory = Path(directory or tempfile.mkdtemp(prefix="convmf-proxy-"))
    paths = world.write(directory)
    corpus = build_corpus(world.records)
    return corpus, load_embedding_table(paths["vectors"], corpus.vocab)


def real_data_paths():
    """(raw review file, GloVe file) from the environment, or None when either is absent."""
    raw, glove = os.environ.get(GROCERY_ENV), os.environ.get(GLOVE_ENV)
    if raw and glove and Path(raw).is_file() and Path(glove).is_file():
        return Path(raw), Path(glove)
    return None


def subsample_corpus(raw_path, glove_path, n_items=SUBSAMPLE_ITEMS):
    records = subsample_top_items(read_review_file(raw_path), n_items)
    corpus = build_corpus(records)
    return corpus, load_embedding_table(glove_path, corpus.vocab)
