import json
from pathlib import Path

import numpy as np
import pytest
import yaml

from elecmap.geogrid import GridSpec, make_grid, make_grid_xy

UTM37S = "EPSG:32737"

# Small end-to-end configuration: 14 x 14 tiles, 8 counties, one epoch.
TINY = {
    "seed": 1,
    "workdir": "w",
    "synth": {"bounds": [37.50, -0.015, 37.53, 0.015], "n_counties": 8, "scene_tiles": 7},
    "model_defaults": {
        "width": 0.0625, "batch_norm": True, "head_pool": 1, "learning_rate": 0.001,
        "epochs": 1, "batch_size": 16, "override_ranges": True,
    },
    "tasks": ["access_3class", "count_elec_reg"],
}


def write_config(path: Path, base: dict = TINY, **overrides) -> Path:
    """YAML config at ``path`` with its workdir next to it; dict overrides merge one level deep."""
    d = json.loads(json.dumps(base))
    d["workdir"] = str(path.parent / "w")
    for k, v in overrides.items():
        if isinstance(v, dict) and isinstance(d.get(k), dict):
            d[k].update(v)
        else:
            d[k] = v
    path.write_text(yaml.safe_dump(d))
    return path


# Per-criterion outcome lines, printed in the terminal summary.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture
def utm_grid() -> GridSpec:
    """A 4 x 3 grid of 250 m tiles in UTM 37S with a round-number origin."""
    return make_grid_xy((250_000.0, 9_990_000.0, 251_000.0, 9_990_750.0), UTM37S)


@pytest.fixture
def geo_grid() -> GridSpec:
    """Default-projection grid over a small equatorial region (about 9 x 9 tiles)."""
    return make_grid((37.50, -0.01, 37.52, 0.01))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
