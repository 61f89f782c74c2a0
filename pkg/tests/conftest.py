import os
import shutil
from pathlib import Path

import pytest

from gateann.bench import DeskConfig, prepare_workspace
from gateann.core import read_vectors

from helpers import built_index

_ACCEPTANCE = {}


def record_criterion(number: int, name: str, ok: bool, detail: str):
    _ACCEPTANCE[number] = (name, bool(ok), detail)


@pytest.fixture(scope="session")
def acceptance():
    return record_criterion


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, 13):
        name, ok, detail = _ACCEPTANCE.get(n, ("(not run)", False, "no result recorded"))
        terminalreporter.write_line(f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {name}: {detail}")


@pytest.fixture(scope="session")
def small(tmp_path_factory):
    """N=2000, 16-dim u8 index with PQ (M=8)."""
    d = tmp_path_factory.mktemp("small")
    ds, graph, path, cb, codes = built_index(d)
    return {"ds": ds, "graph": graph, "path": path, "codebook": cb, "codes": codes, "dir": d}


@pytest.fixture(scope="session")
def desk_paths(request):
    """Desk configuration workspace, built once and kept in the pytest cache.

    GATEANN_DESK_DIR points at an existing workspace to reuse.
    """
    target = Path(request.config.cache.mkdir("gateann-desk"))
    seed_dir = os.environ.get("GATEANN_DESK_DIR")
    if seed_dir and not (target / "config.json").exists():
        for name in ("base.vec", "index.disk", "pq.bin", "config.json"):
            src = Path(seed_dir) / name
            if src.exists():
                shutil.copy2(src, target / name)
    return prepare_workspace(target, DeskConfig())


@pytest.fixture(scope="session")
def desk_data(desk_paths):
    return read_vectors(desk_paths["data"])
