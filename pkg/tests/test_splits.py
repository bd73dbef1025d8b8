import itertools
import random
import statistics
from fractions import Fraction

import numpy as np
import pytest
import shapely
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import chi2_contingency

from elecmap.geogrid import TileIndex
from elecmap.labels import TileRecord, derive_class_labels
from elecmap.splits import (
    County,
    CountyMap,
    ProtocolError,
    SplitAssignment,
    assign_splits,
    bin_label,
    chi_square_homogeneity,
    density_bin,
    quadrant_of,
    select_out_of_sample,
    split_summary,
    stratified_split,
    verify_split,
)


def tiles_for(county, counts, start=0):
    return [
        TileRecord(TileIndex(start + i, hash(county) % 1000), county, 2015, "x.png", derive_class_labels(n))
        for i, n in enumerate(counts)
    ]


def five_county_map():
    centre = shapely.box(1.5, 1.5, 2.5, 2.5)
    quads = {
        "Q_NE": shapely.box(2, 2, 4, 4), "Q_NW": shapely.box(0, 2, 2, 4),
        "Q_SW": shapely.box(0, 0, 2, 2), "Q_SE": shapely.box(2, 0, 4, 2),
    }
    counties = [County(k, k, v.difference(centre)) for k, v in quads.items()]
    counties.append(County("Z_MID", "middle", centre))
    return CountyMap(counties)


# --- out-of-sample selection -----------------------------------------------------

def test_quadrant_of():
    c = (0.0, 0.0)
    assert [quadrant_of(p, c) for p in [(1, 1), (-1, 1), (-1, -1), (1, -1)]] == ["NE", "NW", "SW", "SE"]


def test_five_counties_force_the_choice():
    m = five_county_map()
    chosen = select_out_of_sample(m, {})
    assert chosen == {"Q_NE": "NE", "Q_NW": "NW", "Q_SW": "SW", "Q_SE": "SE", "Z_MID": "centre"}


def test_empty_quadrant_is_a_protocol_error():
    counties = [County(f"C{i}", "", shapely.box(i, 0, i + 1, 1)) for i in range(6)]
    with pytest.raises(ProtocolError):
        select_out_of_sample(CountyMap(counties), {})
    with pytest.raises(ProtocolError):
        select_out_of_sample(CountyMap(counties[:3]), {})


def grid_of_counties(n=4):
    """n x n unit-square counties, ids C00..; region centroid at (n/2, n/2)."""
    out = []
    for r in range(n):
        for c in range(n):
            out.append(County(f"C{r * n + c:02d}", "", shapely.box(c, r, c + 1, r + 1)))
    return CountyMap(out)


def test_equal_spread_ties_go_to_lowest_ids():
    m = grid_of_counties(4)
    chosen = select_out_of_sample(m, {cid: [3] for cid in m.ids()})
    quads = {role: cid for cid, role in chosen.items()}
    # all medians equal: the lowest id in each quadrant wins
    assert quads["SW"] == "C00" and quads["SE"] == "C02" and quads["NW"] == "C08" and quads["NE"] == "C10"
    # C05, C06 and C09 are all 0.5 from the centre; C10 is taken by NE
    assert quads["centre"] == "C05"


def test_selection_maximises_median_spread_against_brute_force():
    m = grid_of_counties(4)
    rng = random.Random(7)
    stats = {cid: [rng.randint(0, 12) for _ in range(rng.randint(1, 9))] for cid in m.ids()}
    chosen = select_out_of_sample(m, stats)
    by_q = {}
    for cid in m.ids():
        by_q.setdefault(quadrant_of(m.centroid(cid), (2.0, 2.0)), []).append(cid)
    med = {c: Fraction(statistics.median(v)) for c, v in stats.items()}
    best = max(
        itertools.product(*(by_q[q] for q in ("NE", "NW", "SW", "SE"))),
        key=lambda combo: statistics.pvariance([med[c] for c in combo]),
    )
    top = statistics.pvariance([med[c] for c in best])
    picked = [cid for cid, role in chosen.items() if role != "centre"]
    assert statistics.pvariance([med[c] for c in picked]) == top
    assert len(set(chosen.values())) == 5


# --- binning and stratified split -------------------------------------------------

def test_density_bins():
    assert [density_bin(n) for n in (0, 1, 2, 3, 5, 6, 10, 11, 500)] == [0, 1, 1, 2, 2, 3, 3, 4, 4]
    assert [bin_label(b) for b in range(5)] == ["0", "1-2", "3-5", "6-10", "11+"]


def test_thousand_uniform_tiles_split_exactly():
    a = stratified_split(tiles_for("C1", [4] * 1000), seed=3)
    assert a.counts() == {"train": 700, "val": 200, "test_in": 100, "test_out": 0}


def test_ten_tiles_split_seven_two_one():
    a = stratified_split(tiles_for("C1", [0] * 10))
    assert a.counts() == {"train": 7, "val": 2, "test_in": 1, "test_out": 0}


def test_tiny_county_goes_to_train_with_warning(caplog):
    tiles = tiles_for("BIG", [1] * 20) + tiles_for("TINY", [1] * 9, start=100)
    a = stratified_split(tiles)
    assert all(a.assignment[t.index] == "train" for t in tiles if t.county == "TINY")
    assert any("TINY" in w for w in a.warnings)
    assert "TINY" in caplog.text


def test_empty_input_rejected():
    with pytest.raises(ValueError):
        stratified_split([])


def test_bad_fractions_rejected():
    with pytest.raises(ValueError):
        stratified_split(tiles_for("C", [0] * 20), fractions=(0.5, 0.3, 0.3))


def test_mixed_bins_recount(rng):
    counts = rng.integers(0, 20, 1500).tolist()
    tiles = tiles_for("A", counts)
    a = stratified_split(tiles, seed=11)
    per_bin = {}
    for t in tiles:
        per_bin.setdefault(density_bin(t.labels.n_total), []).append(a.assignment[t.index])
    for b, splits in per_bin.items():
        n = len(splits)
        c = {s: splits.count(s) for s in ("train", "val", "test_in")}
        # cumulative half-up rounding: each part within one tile of its exact share
        assert abs(c["train"] - 0.7 * n) <= 1 and abs(c["val"] - 0.2 * n) <= 1 and abs(c["test_in"] - 0.1 * n) <= 1
        assert sum(c.values()) == n


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31), n=st.integers(1000, 1400))
def test_large_county_fractions_within_one_percent(seed, n):
    counts = np.random.default_rng(seed).integers(0, 15, n).tolist()
    a = stratified_split(tiles_for("A", counts), seed=seed)
    c = a.counts()
    for s, f in (("train", 0.7), ("val", 0.2), ("test_in", 0.1)):
        assert abs(c[s] / n - f) <= 0.01


def test_split_is_deterministic_and_order_independent(rng):
    tiles = tiles_for("A", rng.integers(0, 9, 200).tolist()) + tiles_for("B", rng.integers(0, 9, 150).tolist(), 500)
    a = stratified_split(tiles, seed=5)
    shuffled = list(tiles)
    random.Random(0).shuffle(shuffled)
    assert stratified_split(shuffled, seed=5).assignment == a.assignment
    assert stratified_split(tiles, seed=6).assignment != a.assignment
    assert set(a.assignment) == {t.index for t in tiles}


def test_held_out_counties_do_not_leak(rng):
    tiles = []
    for k, cid in enumerate(["A", "B", "C", "D"]):
        tiles += tiles_for(cid, rng.integers(0, 9, 60).tolist(), start=k * 1000)
    a = assign_splits(tiles, {"B": "NE", "D": "centre"}, seed=2)
    out = a.tiles_in("test_out")
    assert out == {t.index for t in tiles if t.county in ("B", "D")}
    for s in ("train", "val", "test_in"):
        assert not (a.tiles_in(s) & out)
    assert sum(a.counts().values()) == len(tiles)


# --- verification --------------------------------------------------------------

def test_chi_square_matches_scipy(rng):
    for _ in range(20):
        table = rng.integers(1, 40, (3, 5))
        stat, dof = chi_square_homogeneity(table)
        ref = chi2_contingency(table, correction=False)
        assert stat == pytest.approx(ref[0], rel=1e-12)
        assert dof == ref[2]


def test_identical_distributions_pass_with_zero_statistic():
    table = np.array([[7, 14, 21], [2, 4, 6], [1, 2, 3]])
    stat, _ = chi_square_homogeneity(table)
    assert stat == pytest.approx(0.0, abs=1e-12)


def test_divergent_distributions_fail():
    tiles = tiles_for("A", [0] * 30 + [15] * 30)
    assignment = {t.index: ("train" if t.labels.n_total == 0 else "test_in") for t in tiles}
    report = verify_split(SplitAssignment(assignment, 0), tiles)
    assert report["pass"] is False
    assert report["counties"]["A"]["chi2"] > report["counties"]["A"]["threshold"]


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_stratified_output_passes_verification(seed):
    r = np.random.default_rng(seed)
    tiles = tiles_for("A", r.integers(0, 20, 400).tolist()) + tiles_for("B", r.poisson(2, 120).tolist(), 1000)
    a = stratified_split(tiles, seed=seed)
    assert verify_split(a, tiles)["pass"]


def test_assignment_csv_roundtrip(tmp_path, rng):
    tiles = tiles_for("A", rng.integers(0, 5, 30).tolist())
    a = stratified_split(tiles, seed=1)
    a.write_csv(tmp_path / "a.csv")
    assert SplitAssignment.read_csv(tmp_path / "a.csv").assignment == a.assignment
    assert (tmp_path / "a.csv").read_text().splitlines()[0] == "tile_col,tile_row,split"
    summary = split_summary(a, tiles)
    assert summary["counts"]["train"] == 21


def test_county_map_geojson_roundtrip(tmp_path, geo_grid):
    xmin, ymin, xmax, ymax = geo_grid.bounds_xy
    xm = xmin + 3.3 * geo_grid.tile_size_m  # not on a tile centroid
    m = CountyMap([County("W", "west", shapely.box(xmin, ymin, xm, ymax)),
                   County("E", "east", shapely.box(xm, ymin, xmax, ymax))])
    m.save(tmp_path / "c.geojson", geo_grid)
    back = CountyMap.load(tmp_path / "c.geojson", geo_grid)
    idx = list(geo_grid.indices())
    assert back.assign_tiles(idx, geo_grid) == m.assign_tiles(idx, geo_grid)
    assert set(m.assign_tiles(idx, geo_grid).values()) == {"W", "E"}
