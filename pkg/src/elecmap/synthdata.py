"""Synthetic scenes, customer/building tables and county maps with known truth.

Structures are placed tile by tile from an urban density field, drawn into
north-up GeoTIFF scenes at the grid resolution, and written out with the same
file schemas as real inputs.  Electrified structures get a brighter roof and
a small adjacent light mark whose visibility scales with ``cue_strength``.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
import shapely
from rasterio.transform import from_origin
from scipy import ndimage

from .baseline import NLRaster
from .geogrid import GridSpec, SceneMeta, TileIndex, make_grid, write_scene_raster
from .labels import (
    COORD_DECIMALS,
    CustomerRecord,
    StructurePoint,
    TileLabels,
    derive_class_labels,
    write_buildings_csv,
    write_customers_csv,
    write_labels_jsonl,
)
from .splits import County, CountyMap

logger = logging.getLogger(__name__)

KIND_UNELEC, KIND_RES, KIND_NONRES = 0, 1, 2

UNELEC_ROOF = np.array([105.0, 85.0, 65.0])
ELEC_ROOF = np.array([215.0, 215.0, 222.0])
NONRES_TINT = np.array([-10.0, 5.0, 35.0])
MARK_COLOR = np.array([255.0, 225.0, 60.0])
SOIL = np.array([150.0, 132.0, 100.0])
MARK_M = 2.0


class GenerationError(ValueError):
    pass


@dataclass
class SceneSpec:
    bounds: tuple[float, float, float, float] = (37.50, -0.10, 37.68, 0.08)
    tile_size_m: float = 250.0
    resolution_m: float = 0.5
    scene_tiles: int = 8
    n_counties: int = 12
    n_centers: int = 4
    urban_sigma_m: float = 1500.0
    background_density: float = 0.7
    peak_density: float = 12.0
    elec_base_rate: float = 0.12
    elec_urban_boost: float = 0.6
    residential_fraction: float = 0.75
    duplicate_rate: float = 0.6
    footprint_m: tuple[float, float] = (7.0, 12.0)
    nonres_scale: float = 1.5
    cue_strength: float = 1.0
    texture_amplitude: float = 14.0
    noise_level: float = 6.0
    slots_per_side: int = 8
    missed_building_rate: float = 0.0
    years: dict[int, float] = field(
        default_factory=lambda: {2012: 0.1, 2013: 0.1, 2014: 0.2, 2015: 0.2, 2016: 0.2, 2017: 0.2}
    )
    seed: int = 0

    def __post_init__(self):
        self.bounds = tuple(float(b) for b in self.bounds)
        self.footprint_m = tuple(float(f) for f in self.footprint_m)
        self.years = {int(k): float(v) for k, v in self.years.items()}
        for name in ("elec_base_rate", "elec_urban_boost", "residential_fraction",
                     "cue_strength", "missed_building_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise GenerationError(f"{name} must lie in [0, 1], got {v}")
        if self.background_density < 0 or self.peak_density < 0:
            raise GenerationError("densities must be non-negative")
        if not self.years or any(w < 0 for w in self.years.values()) or sum(self.years.values()) <= 0:
            raise GenerationError("capture-year weights must be non-negative with positive sum")
        if self.n_counties < 1 or self.scene_tiles < 1 or self.slots_per_side < 1:
            raise GenerationError("n_counties, scene_tiles and slots_per_side must be positive")

    @property
    def capacity(self) -> int:
        return self.slots_per_side ** 2

    def to_dict(self) -> dict:
        d = asdict(self)
        d["bounds"] = list(self.bounds)
        d["footprint_m"] = list(self.footprint_m)
        d["years"] = {str(k): v for k, v in sorted(self.years.items())}
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "SceneSpec":
        return cls(**dict(d))


@dataclass
class Structures:
    """Column-oriented structure table in grid projection coordinates."""

    x: np.ndarray
    y: np.ndarray
    lon: np.ndarray
    lat: np.ndarray
    col: np.ndarray
    row: np.ndarray
    kind: np.ndarray  # KIND_* codes
    width: np.ndarray
    height: np.ndarray
    shade: np.ndarray  # per-structure roof colour jitter, (n, 3)
    in_buildings: np.ndarray  # False for structures the building survey missed

    def __len__(self):
        return len(self.x)


@dataclass
class SyntheticRegion:
    spec: SceneSpec
    grid: GridSpec
    structures: Structures
    scenes: list[SceneMeta]
    counties: CountyMap
    customers: list[CustomerRecord]
    buildings: list[StructurePoint]
    truth: dict[TileIndex, TileLabels]
    paths: dict[str, str] = field(default_factory=dict)


def stream_rng(seed: int, *parts) -> np.random.Generator:
    h = hashlib.sha256("/".join(map(str, (seed, *parts))).encode()).digest()
    return np.random.default_rng(int.from_bytes(h[:8], "little"))


def region_grid(spec: SceneSpec) -> GridSpec:
    return make_grid(spec.bounds, spec.tile_size_m, spec.resolution_m)


def _urbanness(spec: SceneSpec, grid: GridSpec, rng: np.random.Generator) -> np.ndarray:
    """(n_rows, n_cols) field in [0, 1]: max of Gaussian bumps around urban centres."""
    ts = grid.tile_size_m
    cx = (np.arange(grid.n_cols) + 0.5) * ts
    cy = (np.arange(grid.n_rows) + 0.5) * ts
    X, Y = np.meshgrid(cx, cy)
    u = np.zeros_like(X)
    w, h = grid.n_cols * ts, grid.n_rows * ts
    for _ in range(spec.n_centers):
        px, py = rng.uniform(0.1, 0.9) * w, rng.uniform(0.1, 0.9) * h
        u = np.maximum(u, np.exp(-((X - px) ** 2 + (Y - py) ** 2) / (2 * spec.urban_sigma_m ** 2)))
    return u


def place_structures(spec: SceneSpec, grid: GridSpec) -> Structures:
    """Sample structure counts per tile and positions in distinct tile slots."""
    cap = spec.capacity
    if spec.background_density + spec.peak_density > cap:
        raise GenerationError(
            f"expected density {spec.background_density + spec.peak_density} exceeds "
            f"tile capacity of {cap} structures"
        )
    slot = grid.tile_size_m / spec.slots_per_side
    max_half = spec.footprint_m[1] * spec.nonres_scale / 2 + MARK_M
    slack = slot / 2 - max_half - 1.0
    if slack < 0:
        raise GenerationError("structure footprints do not fit in a tile slot")
    rng = stream_rng(spec.seed, "structures")
    u = _urbanness(spec, grid, rng)
    lam = spec.background_density + spec.peak_density * u
    counts = np.minimum(rng.poisson(lam), cap)
    p_elec = np.clip(spec.elec_base_rate + spec.elec_urban_boost * u, 0.0, 1.0)

    cols, rows, slots = [], [], []
    for flat in np.flatnonzero(counts.ravel()):
        r, c = divmod(int(flat), grid.n_cols)
        k = int(counts[r, c])
        chosen = rng.choice(cap, size=k, replace=False)
        cols.append(np.full(k, c))
        rows.append(np.full(k, r))
        slots.append(chosen)
    if cols:
        col = np.concatenate(cols)
        row = np.concatenate(rows)
        slot_id = np.concatenate(slots)
    else:
        col = row = slot_id = np.empty(0, np.int64)
    n = len(col)
    sx, sy = slot_id % spec.slots_per_side, slot_id // spec.slots_per_side
    x0, y0 = grid.origin_xy
    x = x0 + col * grid.tile_size_m + (sx + 0.5) * slot + rng.uniform(-slack, slack, n)
    y = y0 + row * grid.tile_size_m + (sy + 0.5) * slot + rng.uniform(-slack, slack, n)

    elec = rng.random(n) < p_elec[row, col]
    res = rng.random(n) < spec.residential_fraction
    kind = np.where(elec, np.where(res, KIND_RES, KIND_NONRES), KIND_UNELEC)
    size = rng.uniform(*spec.footprint_m, n) * np.where(kind == KIND_NONRES, spec.nonres_scale, 1.0)
    aspect = rng.uniform(0.6, 1.0, n)
    shade = rng.uniform(-15, 15, (n, 3))
    missed = elec & (rng.random(n) < spec.missed_building_rate)

    lon, lat = grid.to_lonlat(x, y)
    lon = np.round(np.asarray(lon, float), COORD_DECIMALS)
    lat = np.round(np.asarray(lat, float), COORD_DECIMALS)
    return Structures(x, y, lon, lat, col, row, kind, size, size * aspect, shade, ~missed)


def truth_labels(structures: Structures, grid: GridSpec) -> dict[TileIndex, TileLabels]:
    """Per-tile labels from placement bookkeeping (each structure knows its tile)."""
    tallies: dict[tuple[int, int], list[int]] = {}
    for c, r, k, b in zip(structures.col, structures.row, structures.kind, structures.in_buildings):
        t = tallies.setdefault((int(r), int(c)), [0, 0, 0])
        t[0] += int(b)
        if k != KIND_UNELEC:
            t[1] += 1
            t[2] += int(k == KIND_RES)
    return {
        TileIndex(c, r): derive_class_labels(total, elec, res)
        for (r, c), (total, elec, res) in sorted(tallies.items())
    }


def customer_records(structures: Structures, spec: SceneSpec) -> list[CustomerRecord]:
    """One or more utility records per electrified structure, shuffled."""
    rng = stream_rng(spec.seed, "customers")
    out = []
    for i in np.flatnonzero(structures.kind != KIND_UNELEC):
        k = 1 + int(rng.poisson(spec.duplicate_rate))
        for _ in range(k):
            if structures.kind[i] == KIND_RES:
                ctype = "residential"
            else:
                ctype = "commercial" if rng.random() < 0.5 else "industrial"
            out.append(CustomerRecord(float(structures.lon[i]), float(structures.lat[i]), ctype))
    order = rng.permutation(len(out))
    return [out[j] for j in order]


def building_points(structures: Structures) -> list[StructurePoint]:
    keep = np.flatnonzero(structures.in_buildings)
    return [StructurePoint(float(structures.lon[i]), float(structures.lat[i]), "building_unclassified") for i in keep]


def make_counties(spec: SceneSpec, grid: GridSpec) -> CountyMap:
    """Voronoi counties over the grid rectangle.

    The first four seeds sit one per quadrant and the fifth near the centre,
    so the hold-out protocol always has candidates.
    """
    rng = stream_rng(spec.seed, "counties")
    xmin, ymin, xmax, ymax = grid.bounds_xy
    w, h = xmax - xmin, ymax - ymin
    pts = []
    for fx, fy in ((0.75, 0.75), (0.25, 0.75), (0.25, 0.25), (0.75, 0.25), (0.5, 0.5)):
        if len(pts) < spec.n_counties:
            pts.append((xmin + (fx + rng.uniform(-0.1, 0.1)) * w, ymin + (fy + rng.uniform(-0.1, 0.1)) * h))
    while len(pts) < spec.n_counties:
        pts.append((xmin + rng.uniform(0.02, 0.98) * w, ymin + rng.uniform(0.02, 0.98) * h))
    box = shapely.box(xmin, ymin, xmax, ymax)
    if len(pts) == 1:
        cells = [box]
    else:
        cells = list(shapely.voronoi_polygons(shapely.MultiPoint(pts), extend_to=box).geoms)
    counties = []
    width = max(2, len(str(spec.n_counties)))
    for k, p in enumerate(pts):
        cell = next(c for c in cells if c.contains(shapely.Point(p)))
        cid = f"C{k + 1:0{width}d}"
        counties.append(County(cid, f"County {k + 1}", cell.intersection(box)))
    return CountyMap(counties)


def scene_layout(spec: SceneSpec, grid: GridSpec) -> list[tuple[str, tuple[int, int, int, int], int]]:
    """(scene_id, (col0, row0, col1, row1) exclusive tile range, capture_year) per scene."""
    rng = stream_rng(spec.seed, "years")
    years = sorted(spec.years)
    p = np.array([spec.years[y] for y in years])
    p = p / p.sum()
    out = []
    st = spec.scene_tiles
    k = 0
    for r0 in range(0, grid.n_rows, st):
        for c0 in range(0, grid.n_cols, st):
            year = int(years[rng.choice(len(years), p=p)])
            out.append((f"scene_{k:04d}", (c0, r0, min(c0 + st, grid.n_cols), min(r0 + st, grid.n_rows)), year))
            k += 1
    return out


def render_scene(
    spec: SceneSpec,
    grid: GridSpec,
    structures: Structures,
    scene_id: str,
    tile_range: tuple[int, int, int, int],
) -> tuple[np.ndarray, tuple[float, float, float, float]]:
    """Draw one scene; returns (H, W, 3) uint8 pixels and projection bounds."""
    c0, r0, c1, r1 = tile_range
    ts, res = grid.tile_size_m, grid.resolution_m_per_px
    x0, y0 = grid.origin_xy
    bounds = (x0 + c0 * ts, y0 + r0 * ts, x0 + c1 * ts, y0 + r1 * ts)
    px = grid.tile_px
    H, W = (r1 - r0) * px, (c1 - c0) * px
    rng = stream_rng(spec.seed, "scene", scene_id)

    base = SOIL + rng.uniform(-12, 12, 3)
    coarse = rng.normal(0.0, 1.0, (H // 100 + 2, W // 100 + 2)).astype(np.float32)
    texture = ndimage.zoom(coarse, 100, order=1)[:H, :W] * spec.texture_amplitude
    img = np.empty((H, W, 3), np.float32)
    for ch in range(3):
        img[..., ch] = base[ch] + texture * (1.0 if ch != 2 else 0.6)
        if spec.noise_level:
            img[..., ch] += rng.standard_normal((H, W), dtype=np.float32) * np.float32(spec.noise_level)

    sel = np.flatnonzero(
        (structures.col >= c0) & (structures.col < c1) & (structures.row >= r0) & (structures.row < r1)
    )
    cue = spec.cue_strength
    xmin, ymax = bounds[0], bounds[3]
    for i in sel:
        k = structures.kind[i]
        roof = UNELEC_ROOF + structures.shade[i]
        if k != KIND_UNELEC:
            roof = (1 - cue) * roof + cue * (ELEC_ROOF + structures.shade[i])
        if k == KIND_NONRES:
            roof = roof + NONRES_TINT
        hw, hh = structures.width[i] / 2, structures.height[i] / 2
        x, y = structures.x[i], structures.y[i]
        ca, cb = int(round((x - hw - xmin) / res)), int(round((x + hw - xmin) / res))
        ra, rb = int(round((ymax - y - hh) / res)), int(round((ymax - y + hh) / res))
        img[ra:rb, ca:cb] = np.clip(roof, 0, 255)
        if k != KIND_UNELEC and cue > 0:
            m = int(round(MARK_M / res))
            mc, mr = cb + 1, max(ra - m - 1, 0)
            patch = img[mr:mr + m, mc:mc + m]
            patch[:] = (1 - cue) * patch + cue * MARK_COLOR
    return np.clip(np.rint(img), 0, 255).astype(np.uint8), bounds


def generate_region(spec: SceneSpec, outdir: str | Path | None = None, render: bool = True) -> SyntheticRegion:
    """Generate a full synthetic region; with ``outdir`` also write every file.

    Files: ``scenes/*.tif`` and ``scenes.json`` (when rendering),
    ``customers.csv``, ``buildings.csv``, ``counties.geojson``,
    ``truth.jsonl``, ``grid.json`` and ``scene_spec.json``.
    """
    grid = region_grid(spec)
    structures = place_structures(spec, grid)
    truth = truth_labels(structures, grid)
    customers = customer_records(structures, spec)
    buildings = building_points(structures)
    counties = make_counties(spec, grid)
    scenes: list[SceneMeta] = []
    paths: dict[str, str] = {}
    out = Path(outdir) if outdir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "scene_spec.json").write_text(json.dumps(spec.to_dict(), indent=2, sort_keys=True))
        grid.save(out / "grid.json")
        write_customers_csv(customers, out / "customers.csv")
        write_buildings_csv(buildings, out / "buildings.csv")
        counties.save(out / "counties.geojson", grid)
        write_labels_jsonl(truth, out / "truth.jsonl")
        for name in ("scene_spec.json", "grid.json", "customers.csv", "buildings.csv",
                     "counties.geojson", "truth.jsonl"):
            paths[name] = str(out / name)
    if render:
        if out is None:
            raise GenerationError("rendering scenes needs an output directory")
        (out / "scenes").mkdir(exist_ok=True)
        for scene_id, tile_range, year in scene_layout(spec, grid):
            pixels, bounds = render_scene(spec, grid, structures, scene_id, tile_range)
            rel = f"scenes/{scene_id}.tif"
            write_scene_raster(out / rel, pixels, bounds, grid.projection)
            scenes.append(SceneMeta(scene_id, bounds, year, rel))
            del pixels
        (out / "scenes.json").write_text(
            json.dumps([s.to_dict() for s in scenes], indent=2, sort_keys=True)
        )
        paths["scenes.json"] = str(out / "scenes.json")
    logger.info(
        "synthetic region: %d x %d tiles, %d structures, %d customer records, %d scenes",
        grid.n_cols, grid.n_rows, len(structures), len(customers), len(scenes),
    )
    return SyntheticRegion(spec, grid, structures, scenes, counties, customers, buildings, truth, paths)


def generate_nl_raster(
    truth: Mapping[TileIndex, TileLabels],
    grid: GridSpec,
    noise_level: float = 0.0,
    psf_radius: float = 0.0,
    cell_tiles: int = 10,
    seed: int = 0,
) -> NLRaster:
    """Coarse nighttime brightness: per-cell electrified count, blurred, plus noise.

    A cell spans ``cell_tiles x cell_tiles`` tiles (at least 100 tiles).
    ``psf_radius`` is the Gaussian sigma in cells (0 disables blurring) and
    ``noise_level`` the standard deviation of additive noise in units of one
    electrified structure; brightness is clipped at zero.
    """
    if cell_tiles < 10:
        raise ValueError("NL cells must cover at least 10 x 10 tiles")
    ncc = math.ceil(grid.n_cols / cell_tiles)
    ncr = math.ceil(grid.n_rows / cell_tiles)
    counts = np.zeros((ncr, ncc))
    for idx, lab in truth.items():
        counts[idx.row // cell_tiles, idx.col // cell_tiles] += lab.n_elec
    b = ndimage.gaussian_filter(counts, psf_radius, mode="constant") if psf_radius > 0 else counts
    if noise_level > 0:
        b = b + stream_rng(seed, "nl").normal(0.0, noise_level, b.shape)
    b = np.clip(b, 0.0, None)
    cell = cell_tiles * grid.tile_size_m
    x0, y0 = grid.origin_xy
    transform = from_origin(x0, y0 + ncr * cell, cell, cell)
    return NLRaster(np.flipud(b).copy(), transform, grid.projection)
