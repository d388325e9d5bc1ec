import json
from pathlib import Path

import pytest
from hypothesis import HealthCheck, settings

from convmf.corpus import build_corpus
from convmf.embeddings import load_embedding_table
from convmf.synthetic import WorldSpec, generate_world

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

DATA = Path(__file__).parent / "data"
TINY = WorldSpec(n_users=60, n_items=30, ratings_per_user=10.0, n_generic=120, dim=8, seed=3)


@pytest.fixture(scope="session")
def fixture_path():
    return DATA / "fixture_reviews.jsonl"


@pytest.fixture(scope="session")
def fixture_stats():
    return json.loads((DATA / "fixture_stats.json").read_text())


@pytest.fixture(scope="session")
def tiny_world(tmp_path_factory):
    world = generate_world(TINY)
    paths = world.write(tmp_path_factory.mktemp("world"))
    return world, paths


@pytest.fixture(scope="session")
def tiny_corpus(tiny_world):
    world, _ = tiny_world
    return build_corpus(world.records, seed=0, min_count=2)


@pytest.fixture(scope="session")
def tiny_table(tiny_world, tiny_corpus):
    _, paths = tiny_world
    return load_embedding_table(paths["vectors"], tiny_corpus.vocab, seed=0)


# ---------------------------------------------------------------------------
# one summary line per acceptance criterion

_CRITERIA: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(id): acceptance criterion this test checks")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        detail = dict(item.user_properties).get("detail", "")
        if rep.skipped:
            detail = rep.longrepr[2] if isinstance(rep.longrepr, tuple) else str(rep.longrepr)
        elif rep.failed and not detail:
            detail = str(getattr(rep.longrepr, "reprcrash", "")) or "failed"
        _CRITERIA.setdefault(str(marker.args[0]), []).append((item.name, rep.outcome, detail))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for cid in sorted(_CRITERIA, key=lambda c: int(c)):
        parts = _CRITERIA[cid]
        outcomes = {o for _, o, _ in parts}
        if "failed" in outcomes:
            verdict = "FAIL"
        elif outcomes == {"skipped"}:
            verdict = "SKIP"
        elif "skipped" in outcomes:
            verdict = "PASS (partial: some parts skipped)"
        else:
            verdict = "PASS"
        tr.write_line(f"criterion {cid}: {verdict}")
        for name, outcome, detail in parts:
            tr.write_line(f"    {outcome.upper():7} {name}: {detail}")
