"""Geographic evaluation protocol: out-of-sample counties and stratified splits.

One county is held out per map quadrant (quadrants taken around the region
centroid) plus the county closest to the centre.  All remaining tiles are
split train/val/test_in per county and per structures-per-tile bin.
"""

from __future__ import annotations

import csv
import hashlib
import itertools
import json
import logging
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import shapely
from scipy.stats import chi2
from shapely.geometry import Point, mapping, shape
from shapely.ops import unary_union

from .geogrid import GridSpec, TileIndex
from .labels import TileRecord

logger = logging.getLogger(__name__)

SPLITS = ("train", "val", "test_in", "test_out")
IN_SAMPLE = ("train", "val", "test_in")
DEFAULT_FRACTIONS = (0.7, 0.2, 0.1)
# n_total bins: 0, 1-2, 3-5, 6-10, 11+  (lower edges)
DEFAULT_BIN_EDGES = (0, 1, 3, 6, 11)
MIN_COUNTY_TILES = 10
QUADRANTS = ("NE", "NW", "SW", "SE")


class ProtocolError(ValueError):
    pass


@dataclass
class County:
    county_id: str
    name: str
    polygon: shapely.Polygon | shapely.MultiPolygon  # projection coordinates


class CountyMap:
    """Counties keyed by id with tile-to-county assignment by tile centroid."""

    def __init__(self, counties: Iterable[County]):
        self.counties = {c.county_id: c for c in sorted(counties, key=lambda c: c.county_id)}
        if not self.counties:
            raise ProtocolError("county map is empty")

    def __len__(self):
        return len(self.counties)

    def __iter__(self):
        return iter(self.counties.values())

    def ids(self) -> list[str]:
        return list(self.counties)

    def centroid(self, county_id: str) -> tuple[float, float]:
        c = self.counties[county_id].polygon.centroid
        return (c.x, c.y)

    def region_centroid(self) -> tuple[float, float]:
        c = unary_union([c.polygon for c in self]).centroid
        return (c.x, c.y)

    def assign_points(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """County id per point; first covering county in id order, else nearest."""
        x = np.asarray(x, float)
        y = np.asarray(y, float)
        out = np.full(x.shape, None, dtype=object)
        todo = np.ones(x.shape, bool)
        for cid, county in self.counties.items():
            if not todo.any():
                break
            hit = todo.copy()
            hit[todo] = shapely.intersects_xy(county.polygon, x[todo], y[todo])
            out[hit] = cid
            todo &= ~hit
        for i in np.flatnonzero(todo):
            p = Point(x[i], y[i])
            out[i] = min(self.counties, key=lambda k: (self.counties[k].polygon.distance(p), k))
        return out

    def assign_tiles(self, indices: Sequence[TileIndex], grid: GridSpec) -> dict[TileIndex, str]:
        ts = grid.tile_size_m
        x0, y0 = grid.origin_xy
        cols = np.array([i.col for i in indices], float)
        rows = np.array([i.row for i in indices], float)
        ids = self.assign_points(x0 + (cols + 0.5) * ts, y0 + (rows + 0.5) * ts)
        return {idx: str(cid) for idx, cid in zip(indices, ids)}

    def to_geojson(self, grid: GridSpec) -> dict:
        feats = []
        for c in self:
            geom = shapely.transform(c.polygon, lambda xy: np.column_stack(grid.to_lonlat(xy[:, 0], xy[:, 1])))
            geom = shapely.set_precision(geom, 1e-9)
            feats.append({
                "type": "Feature",
                "properties": {"county_id": c.county_id, "name": c.name},
                "geometry": mapping(geom),
            })
        return {"type": "FeatureCollection", "features": feats}

    @classmethod
    def from_geojson(cls, data: dict, grid: GridSpec) -> "CountyMap":
        counties = []
        for feat in data["features"]:
            geom = shape(feat["geometry"])
            geom = shapely.transform(geom, lambda ll: np.column_stack(grid.to_xy(ll[:, 0], ll[:, 1])))
            props = feat.get("properties", {})
            cid = str(props["county_id"])
            counties.append(County(cid, str(props.get("name", cid)), geom))
        return cls(counties)

    def save(self, path: str | Path, grid: GridSpec) -> None:
        Path(path).write_text(json.dumps(self.to_geojson(grid), sort_keys=True))

    @classmethod
    def load(cls, path: str | Path, grid: GridSpec) -> "CountyMap":
        return cls.from_geojson(json.loads(Path(path).read_text()), grid)


def quadrant_of(point: tuple[float, float], centre: tuple[float, float]) -> str:
    east = point[0] >= centre[0]
    north = point[1] >= centre[1]
    return {(True, True): "NE", (False, True): "NW", (False, False): "SW", (True, False): "SE"}[(east, north)]


def _median(values) -> Fraction:
    v = sorted(int(x) for x in values)
    if not v:
        return Fraction(0)
    m = len(v) // 2
    return Fraction(v[m]) if len(v) % 2 else Fraction(v[m - 1] + v[m], 2)


def _spread(medians: Sequence[Fraction]) -> Fraction:
    mean = sum(medians, Fraction(0)) / len(medians)
    return sum(((m - mean) ** 2 for m in medians), Fraction(0)) / len(medians)


def select_out_of_sample(
    counties: CountyMap, stats: Mapping[str, Sequence[int]]
) -> dict[str, str]:
    """Choose five held-out counties: one per quadrant plus one central.

    ``stats`` maps county id to its per-tile structure counts.  Among the
    quadrant candidates the combination whose median structures-per-tile have
    the largest variance wins (exact arithmetic); ties go to the
    lexicographically lowest ids.  Returns ``{county_id: role}`` with role in
    NE/NW/SW/SE/centre.
    """
    if len(counties) < 5:
        raise ProtocolError(f"need at least 5 counties, got {len(counties)}")
    centre = counties.region_centroid()
    by_quadrant: dict[str, list[str]] = {q: [] for q in QUADRANTS}
    for cid in counties.ids():
        by_quadrant[quadrant_of(counties.centroid(cid), centre)].append(cid)
    empty = [q for q, ids in by_quadrant.items() if not ids]
    if empty:
        raise ProtocolError(f"no county centroid in quadrant(s) {', '.join(empty)}")
    medians = {cid: _median(stats.get(cid, ())) for cid in counties.ids()}
    best_key = None
    best = None
    for combo in itertools.product(*(by_quadrant[q] for q in QUADRANTS)):
        spread = _spread([medians[c] for c in combo])
        # larger spread first, then lexicographically lowest ids
        key = (-spread, combo)
        if best_key is None or key < best_key:
            best_key, best = key, combo
    chosen = dict(zip(best, QUADRANTS))
    cx, cy = centre
    rest = [c for c in counties.ids() if c not in chosen]
    if not rest:
        raise ProtocolError("no county left for the central hold-out")

    def dist2(cid):
        x, y = counties.centroid(cid)
        return ((x - cx) ** 2 + (y - cy) ** 2, cid)

    chosen[min(rest, key=dist2)] = "centre"
    return chosen


def density_bin(n_total: int, edges: Sequence[int] = DEFAULT_BIN_EDGES) -> int:
    return int(np.searchsorted(edges, n_total, side="right")) - 1


def bin_label(b: int, edges: Sequence[int] = DEFAULT_BIN_EDGES) -> str:
    lo = edges[b]
    if b + 1 < len(edges):
        hi = edges[b + 1] - 1
        return str(lo) if hi == lo else f"{lo}-{hi}"
    return f"{lo}+"


def _stream_seed(seed: int, *parts: str) -> int:
    h = hashlib.sha256("/".join([str(seed), *parts]).encode()).digest()
    return int.from_bytes(h[:8], "little")


def _split_counts(n: int, fractions: Sequence[Fraction]) -> list[int]:
    """Cumulative rounding (half up) so the parts always sum to n."""
    out = []
    prev = 0
    cum = Fraction(0)
    for f in fractions[:-1]:
        cum += f
        upto = int(cum * n + Fraction(1, 2))
        out.append(upto - prev)
        prev = upto
    out.append(n - prev)
    return out


@dataclass
class SplitAssignment:
    assignment: dict[TileIndex, str]
    seed: int
    out_counties: dict[str, str] = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)

    def tiles_in(self, split: str) -> set[TileIndex]:
        return {t for t, s in self.assignment.items() if s == split}

    def counts(self) -> dict[str, int]:
        c = Counter(self.assignment.values())
        return {s: c.get(s, 0) for s in SPLITS}

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["tile_col", "tile_row", "split"])
            for idx in sorted(self.assignment, key=lambda i: (i.row, i.col)):
                w.writerow([idx.col, idx.row, self.assignment[idx]])

    @classmethod
    def read_csv(cls, path: str | Path, seed: int = 0, out_counties=None) -> "SplitAssignment":
        with open(path, newline="") as f:
            a = {TileIndex(int(r["tile_col"]), int(r["tile_row"])): r["split"] for r in csv.DictReader(f)}
        return cls(a, seed, dict(out_counties or {}))


def stratified_split(
    tiles: Sequence[TileRecord],
    fractions: Sequence[float] = DEFAULT_FRACTIONS,
    seed: int = 0,
    bin_edges: Sequence[int] = DEFAULT_BIN_EDGES,
) -> SplitAssignment:
    """Split tiles train/val/test_in within every (county, n_total bin) stratum.

    Each stratum is shuffled with its own RNG stream derived from
    ``(seed, county, bin)``, so the result does not depend on the order in
    which counties are processed.  Counties with fewer than
    ``MIN_COUNTY_TILES`` tiles go wholly to train.
    """
    if not tiles:
        raise ValueError("no tiles to split")
    if len(fractions) != 3 or any(f < 0 for f in fractions):
        raise ValueError(f"fractions must be three non-negative numbers, got {fractions}")
    fr = [Fraction(f).limit_denominator(10**6) for f in fractions]
    if sum(fr) != 1:
        raise ValueError(f"fractions must sum to 1, got {fractions}")
    by_county: dict[str, list[TileRecord]] = defaultdict(list)
    for t in tiles:
        by_county[str(t.county)].append(t)
    assignment: dict[TileIndex, str] = {}
    warns = []
    for county in sorted(by_county):
        members = by_county[county]
        if len(members) < MIN_COUNTY_TILES:
            msg = f"county {county} has {len(members)} tiles (< {MIN_COUNTY_TILES}); all assigned to train"
            logger.warning(msg)
            warns.append(msg)
            for t in members:
                assignment[t.index] = "train"
            continue
        strata: dict[int, list[TileIndex]] = defaultdict(list)
        for t in members:
            strata[density_bin(t.labels.n_total, bin_edges)].append(t.index)
        for b in sorted(strata):
            idx = sorted(strata[b], key=lambda i: (i.row, i.col))
            rng = np.random.default_rng(_stream_seed(seed, county, str(b)))
            order = rng.permutation(len(idx))
            n_train, n_val, _ = _split_counts(len(idx), fr)
            for pos, k in enumerate(order):
                split = "train" if pos < n_train else "val" if pos < n_train + n_val else "test_in"
                assignment[idx[k]] = split
    if len(assignment) != len(tiles):
        raise ValueError("duplicate tile indices in split input")
    return SplitAssignment(assignment, seed, warnings=warns)


def assign_splits(
    tiles: Sequence[TileRecord],
    out_counties: Mapping[str, str],
    fractions: Sequence[float] = DEFAULT_FRACTIONS,
    seed: int = 0,
    bin_edges: Sequence[int] = DEFAULT_BIN_EDGES,
) -> SplitAssignment:
    """Full protocol: held-out county tiles to test_out, the rest stratified."""
    held = [t for t in tiles if t.county in out_counties]
    rest = [t for t in tiles if t.county not in out_counties]
    result = stratified_split(rest, fractions, seed, bin_edges)
    for t in held:
        result.assignment[t.index] = "test_out"
    result.out_counties = dict(out_counties)
    return result


def chi_square_homogeneity(table: np.ndarray) -> tuple[float, int]:
    """Pearson chi-square statistic and dof for a (groups x bins) count table."""
    t = np.asarray(table, float)
    t = t[t.sum(axis=1) > 0][:, t.sum(axis=0) > 0]
    if t.shape[0] < 2 or t.shape[1] < 2:
        return 0.0, 0
    expected = t.sum(axis=1, keepdims=True) * t.sum(axis=0, keepdims=True) / t.sum()
    stat = float(((t - expected) ** 2 / expected).sum())
    return stat, (t.shape[0] - 1) * (t.shape[1] - 1)


def verify_split(
    assignment: SplitAssignment,
    tiles: Sequence[TileRecord],
    max_stat: float | None = None,
    alpha: float = 0.05,
    bin_edges: Sequence[int] = DEFAULT_BIN_EDGES,
) -> dict:
    """Per-county chi-square over n_total bins between train, val and test_in.

    A county passes when its statistic is below ``max_stat``, or, when that is
    None, below the ``1 - alpha`` chi-square critical value for its dof.
    """
    tables: dict[str, np.ndarray] = {}
    for t in tiles:
        split = assignment.assignment.get(t.index)
        if split not in IN_SAMPLE:
            continue
        tab = tables.setdefault(str(t.county), np.zeros((3, len(bin_edges)), int))
        tab[IN_SAMPLE.index(split), density_bin(t.labels.n_total, bin_edges)] += 1
    counties = {}
    for county in sorted(tables):
        stat, dof = chi_square_homogeneity(tables[county])
        limit = max_stat if max_stat is not None else (float(chi2.ppf(1 - alpha, dof)) if dof else 0.0)
        counties[county] = {
            "chi2": stat,
            "dof": dof,
            "threshold": limit,
            "pass": stat <= limit,
            "counts": {s: int(tables[county][i].sum()) for i, s in enumerate(IN_SAMPLE)},
        }
    return {"counties": counties, "pass": all(c["pass"] for c in counties.values())}


def split_summary(assignment: SplitAssignment, tiles: Sequence[TileRecord], report: dict | None = None) -> dict:
    counts = assignment.counts()
    total = sum(counts.values())
    in_total = sum(counts[s] for s in IN_SAMPLE)
    per_county: dict[str, Counter] = defaultdict(Counter)
    for t in tiles:
        per_county[str(t.county)][assignment.assignment[t.index]] += 1
    return {
        "seed": assignment.seed,
        "out_counties": dict(sorted(assignment.out_counties.items())),
        "counts": counts,
        "fractions_all": {s: counts[s] / total if total else 0.0 for s in SPLITS},
        "fractions_in_sample": {s: counts[s] / in_total if in_total else 0.0 for s in IN_SAMPLE},
        "per_county": {c: {s: per_county[c].get(s, 0) for s in SPLITS} for c in sorted(per_county)},
        "verification": report,
        "warnings": list(assignment.warnings),
    }
