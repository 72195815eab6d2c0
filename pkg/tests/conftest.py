import os

import pytest
from hypothesis import HealthCheck, settings

from protoshape import cli
from protoshape.config import dump_config, from_dict

settings.register_profile("default", deadline=None, max_examples=30,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

SMALL = {
    "data": {"per_category": 10, "views": 3},
    "pretext": {"dim": 32, "epochs": 4, "lr": 3e-3, "batch": 16},
    "completion": {"epochs": 2, "n_sparse": 64, "rho": 2, "lr": 1e-3, "val_views": 1},
    "loss": {"render_points": 128, "height": 32, "width": 32, "n_views": 2},
}


@pytest.fixture(scope="session")
def small_cfg(tmp_path_factory):
    """Config file for a 40-shape corpus with the pretext stage already run."""
    root = tmp_path_factory.mktemp("small")
    tree = dict(SMALL, data_root=str(root / "data"), out_dir=str(root / "run"))
    path = root / "small.yaml"
    path.write_text(dump_config(from_dict(tree)))
    for cmd in ("gen-data", "train-pretext", "fit-prototypes"):
        assert cli.main([cmd, "--config", str(path), "--deterministic"]) == 0
    return path


_ACCEPTANCE = {}


@pytest.fixture
def acceptance():
    """``record(n, ok, detail)`` files one acceptance line for the terminal summary."""
    def record(n: int, ok: bool, detail: str) -> None:
        _ACCEPTANCE[n] = (bool(ok), detail)
    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        ok, detail = _ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
