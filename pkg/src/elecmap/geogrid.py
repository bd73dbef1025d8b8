"""Metric tile grid over a region and extraction of fixed-size image tiles.

The grid lives in a metric projection (by default a transverse Mercator
centred on the region), its origin is the minimum corner of the projected
region bounding box, and tiles are half-open rectangles: ``[xmin, xmax) x
[ymin, ymax)``.  Row 0 is the southernmost row.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Iterator, NamedTuple, Sequence

import numpy as np
import rasterio
from PIL import Image
from pyproj import CRS, Transformer
from rasterio.enums import Resampling
from rasterio.transform import from_origin
from rasterio.warp import reproject
from rasterio.windows import Window

DEFAULT_TILE_SIZE_M = 250.0
DEFAULT_RESOLUTION_M = 0.5
# Snap tolerance (metres) when counting tiles along an axis: a region that is
# 10000.0000000001 m wide still needs 40 tiles of 250 m, not 41.
SNAP_M = 1e-6
# Outward pad (metres) on a projected geographic bbox: densified bounds can
# miss the true extreme of a curved edge by nanometres.
PAD_M = 1e-3
PIXEL_RANGE = (0, 255)
MIN_CAPTURE_YEAR = 1990
MAX_CAPTURE_YEAR = 2100


class GridConfigError(ValueError):
    pass


class GridInputError(ValueError):
    pass


class OutOfGridError(IndexError):
    pass


class CoverageError(ValueError):
    pass


class TileIndex(NamedTuple):
    col: int
    row: int


Bounds = tuple[float, float, float, float]  # xmin, ymin, xmax, ymax


def default_projection(lon: float, lat: float) -> str:
    """Transverse Mercator centred on (lon, lat), units metres."""
    return (
        f"+proj=tmerc +lat_0={lat:.9f} +lon_0={lon:.9f} +k=1 "
        "+x_0=0 +y_0=0 +ellps=WGS84 +units=m +no_defs"
    )


@dataclass(frozen=True)
class GridSpec:
    origin: tuple[float, float]  # lon, lat of the grid corner
    origin_xy: tuple[float, float]  # same corner in projection coordinates
    tile_size_m: float
    resolution_m_per_px: float
    projection: str
    n_cols: int
    n_rows: int

    def __post_init__(self):
        pixels_per_tile(self.tile_size_m, self.resolution_m_per_px)
        if self.n_cols < 1 or self.n_rows < 1:
            raise GridConfigError("grid needs at least one row and column")

    @property
    def tile_px(self) -> int:
        return pixels_per_tile(self.tile_size_m, self.resolution_m_per_px)

    @property
    def n_tiles(self) -> int:
        return self.n_cols * self.n_rows

    @property
    def bounds_xy(self) -> Bounds:
        x0, y0 = self.origin_xy
        return (
            x0,
            y0,
            x0 + self.n_cols * self.tile_size_m,
            y0 + self.n_rows * self.tile_size_m,
        )

    @cached_property
    def crs(self) -> CRS:
        return CRS.from_user_input(self.projection)

    @cached_property
    def _forward(self) -> Transformer:
        return Transformer.from_crs("EPSG:4326", self.crs, always_xy=True)

    @cached_property
    def _inverse(self) -> Transformer:
        return Transformer.from_crs(self.crs, "EPSG:4326", always_xy=True)

    def to_xy(self, lon, lat):
        """Project geographic degrees to grid coordinates (vectorised)."""
        return _transform(self._forward, lon, lat)

    def to_lonlat(self, x, y):
        return _transform(self._inverse, x, y)

    def contains(self, index: TileIndex) -> bool:
        return 0 <= index.col < self.n_cols and 0 <= index.row < self.n_rows

    def indices(self) -> Iterator[TileIndex]:
        """All tile indices in row-major (row, col) order."""
        for row in range(self.n_rows):
            for col in range(self.n_cols):
                yield TileIndex(col, row)

    def to_dict(self) -> dict:
        return {
            "origin": list(self.origin),
            "origin_xy": list(self.origin_xy),
            "tile_size_m": self.tile_size_m,
            "resolution_m_per_px": self.resolution_m_per_px,
            "projection": self.projection,
            "n_cols": self.n_cols,
            "n_rows": self.n_rows,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GridSpec":
        return cls(
            origin=tuple(d["origin"]),
            origin_xy=tuple(d["origin_xy"]),
            tile_size_m=float(d["tile_size_m"]),
            resolution_m_per_px=float(d["resolution_m_per_px"]),
            projection=d["projection"],
            n_cols=int(d["n_cols"]),
            n_rows=int(d["n_rows"]),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    @classmethod
    def load(cls, path: str | Path) -> "GridSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _transform(tr: Transformer, a, b):
    if np.ndim(a) == 0 and np.ndim(b) == 0:
        return tr.transform(a, b)
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size == 1:  # pyproj treats one-element arrays as scalars
        u, v = tr.transform(float(a.item()), float(b.item()))
        return np.full(a.shape, u), np.full(b.shape, v)
    return tr.transform(a, b)


def pixels_per_tile(tile_size_m: float, resolution_m_per_px: float) -> int:
    if not (tile_size_m > 0 and resolution_m_per_px > 0):
        raise GridConfigError("tile size and resolution must be positive")
    ratio = tile_size_m / resolution_m_per_px
    n = round(ratio)
    if n < 1 or abs(ratio - n) > 1e-9 * max(1.0, ratio):
        raise GridConfigError(
            f"tile size {tile_size_m} m is not an integral number of "
            f"{resolution_m_per_px} m pixels"
        )
    return int(n)


def _count_along(extent: float, tile_size: float) -> int:
    return max(1, math.ceil((extent - SNAP_M) / tile_size))


def make_grid_xy(
    bounds_xy: Bounds,
    projection: str,
    tile_size_m: float = DEFAULT_TILE_SIZE_M,
    resolution: float = DEFAULT_RESOLUTION_M,
) -> GridSpec:
    """Grid over a rectangle already expressed in projection coordinates."""
    xmin, ymin, xmax, ymax = map(float, bounds_xy)
    if not all(map(math.isfinite, (xmin, ymin, xmax, ymax))):
        raise GridInputError("region bounds must be finite")
    if not (xmax > xmin and ymax > ymin):
        raise GridInputError(f"degenerate region bounds {bounds_xy}")
    pixels_per_tile(tile_size_m, resolution)
    inverse = Transformer.from_crs(
        CRS.from_user_input(projection), "EPSG:4326", always_xy=True
    )
    lon0, lat0 = inverse.transform(xmin, ymin)
    return GridSpec(
        origin=(float(lon0), float(lat0)),
        origin_xy=(xmin, ymin),
        tile_size_m=float(tile_size_m),
        resolution_m_per_px=float(resolution),
        projection=projection,
        n_cols=_count_along(xmax - xmin, tile_size_m),
        n_rows=_count_along(ymax - ymin, tile_size_m),
    )


def make_grid(
    region_bounds: Sequence[float],
    tile_size_m: float = DEFAULT_TILE_SIZE_M,
    resolution: float = DEFAULT_RESOLUTION_M,
    projection: str | None = None,
) -> GridSpec:
    """Tile grid covering a geographic rectangle ``(lon_min, lat_min, lon_max, lat_max)``.

    With ``projection=None`` a transverse Mercator centred on the rectangle is
    used so that tiles are true metres near the region.
    """
    lon_min, lat_min, lon_max, lat_max = map(float, region_bounds)
    if not all(map(math.isfinite, (lon_min, lat_min, lon_max, lat_max))):
        raise GridInputError("region bounds must be finite")
    if not (lon_max > lon_min and lat_max > lat_min):
        raise GridInputError(f"degenerate region bounds {tuple(region_bounds)}")
    if lon_min < -180 or lon_max > 180 or lat_min < -90 or lat_max > 90:
        raise GridInputError(f"region bounds outside lon/lat range: {tuple(region_bounds)}")
    pixels_per_tile(tile_size_m, resolution)
    if projection is None:
        projection = default_projection((lon_min + lon_max) / 2, (lat_min + lat_max) / 2)
    fwd = Transformer.from_crs("EPSG:4326", CRS.from_user_input(projection), always_xy=True)
    xmin, ymin, xmax, ymax = fwd.transform_bounds(lon_min, lat_min, lon_max, lat_max, densify_pts=256)
    bxy = (xmin - PAD_M, ymin - PAD_M, xmax + PAD_M, ymax + PAD_M)
    return make_grid_xy(bxy, projection, tile_size_m, resolution)


def tile_bounds(index: TileIndex, grid: GridSpec) -> Bounds:
    """Projection-coordinate rectangle of a tile, min edges inclusive."""
    if not grid.contains(index):
        raise OutOfGridError(f"tile {tuple(index)} outside {grid.n_cols}x{grid.n_rows} grid")
    return _bounds(index.col, index.row, grid)


def _bounds(col: int, row: int, grid: GridSpec) -> Bounds:
    x0, y0 = grid.origin_xy
    ts = grid.tile_size_m
    return (x0 + col * ts, y0 + row * ts, x0 + (col + 1) * ts, y0 + (row + 1) * ts)


def _axis_index(v: np.ndarray, v0: float, ts: float) -> np.ndarray:
    v = np.where(np.isfinite(v), v, v0 - ts)  # non-finite -> outside, without cast warnings
    i = np.floor((v - v0) / ts).astype(np.int64)
    # floor of a quotient can be off by one at tile edges; settle against the
    # exact edge expressions used by tile_bounds
    lo = v0 + i * ts
    i = np.where(v < lo, i - 1, i)
    hi = v0 + (i + 1) * ts
    return np.where(v >= hi, i + 1, i)


def tile_indices_xy(x, y, grid: GridSpec) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised (cols, rows) for projection coordinates; -1 where outside."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    cols = _axis_index(x, grid.origin_xy[0], grid.tile_size_m)
    rows = _axis_index(y, grid.origin_xy[1], grid.tile_size_m)
    outside = (
        ~np.isfinite(x) | ~np.isfinite(y)
        | (cols < 0) | (cols >= grid.n_cols) | (rows < 0) | (rows >= grid.n_rows)
    )
    cols = np.where(outside, -1, cols)
    rows = np.where(outside, -1, rows)
    return cols, rows


def tile_index_of_xy(x: float, y: float, grid: GridSpec) -> TileIndex:
    cols, rows = tile_indices_xy([x], [y], grid)
    if cols[0] < 0:
        raise OutOfGridError(f"point ({x}, {y}) outside grid coverage")
    return TileIndex(int(cols[0]), int(rows[0]))


def tile_index_of(point: Sequence[float], grid: GridSpec) -> TileIndex:
    """Tile containing a geographic ``(lon, lat)`` point."""
    lon, lat = point
    x, y = grid.to_xy(lon, lat)
    try:
        return tile_index_of_xy(x, y, grid)
    except OutOfGridError:
        raise OutOfGridError(f"point (lon={lon}, lat={lat}) outside grid coverage") from None


@dataclass(frozen=True)
class SceneMeta:
    scene_id: str
    geo_bounds: Bounds  # in grid projection coordinates
    capture_year: int
    raster_path: str

    def __post_init__(self):
        if not MIN_CAPTURE_YEAR <= self.capture_year <= MAX_CAPTURE_YEAR:
            raise GridInputError(f"implausible capture year {self.capture_year}")
        xmin, ymin, xmax, ymax = self.geo_bounds
        if not (xmax > xmin and ymax > ymin):
            raise GridInputError(f"degenerate scene bounds {self.geo_bounds}")

    def to_dict(self) -> dict:
        return {
            "scene_id": self.scene_id,
            "geo_bounds": list(self.geo_bounds),
            "capture_year": self.capture_year,
            "raster_path": self.raster_path,
        }

    @classmethod
    def from_dict(cls, d: dict, base_dir: str | Path | None = None) -> "SceneMeta":
        path = d["raster_path"]
        if base_dir is not None and not Path(path).is_absolute():
            path = str(Path(base_dir) / path)
        return cls(d["scene_id"], tuple(d["geo_bounds"]), int(d["capture_year"]), path)

    @classmethod
    def from_raster(cls, scene_id: str, path: str | Path, capture_year: int) -> "SceneMeta":
        with rasterio.open(path) as src:
            b = src.bounds
        return cls(scene_id, (b.left, b.bottom, b.right, b.top), capture_year, str(path))


@dataclass
class ImageTile:
    index: TileIndex
    pixels: np.ndarray  # (H, W, 3) uint8, row 0 = north
    capture_year: int
    source_scene_id: str


def _inside(inner: Bounds, outer: Bounds) -> bool:
    return (
        inner[0] >= outer[0] and inner[1] >= outer[1]
        and inner[2] <= outer[2] and inner[3] <= outer[3]
    )


def scene_coverage(scene: SceneMeta, grid: GridSpec) -> list[TileIndex]:
    """Tiles lying entirely inside the scene footprint, row-major order."""
    sxmin, symin, sxmax, symax = scene.geo_bounds
    x0, y0 = grid.origin_xy
    ts = grid.tile_size_m
    # candidate ranges padded by one, settled exactly by _inside below
    c_lo = max(0, math.ceil((sxmin - x0) / ts) - 1)
    c_hi = min(grid.n_cols - 1, math.floor((sxmax - x0) / ts))
    r_lo = max(0, math.ceil((symin - y0) / ts) - 1)
    r_hi = min(grid.n_rows - 1, math.floor((symax - y0) / ts))
    out = []
    for row in range(r_lo, r_hi + 1):
        for col in range(c_lo, c_hi + 1):
            if _inside(_bounds(col, row, grid), scene.geo_bounds):
                out.append(TileIndex(col, row))
    return out


def assign_tiles_to_scenes(
    scenes: Iterable[SceneMeta], grid: GridSpec
) -> dict[TileIndex, SceneMeta]:
    """Pick one fully covering scene per tile: latest capture year, then lowest scene_id."""
    best: dict[TileIndex, SceneMeta] = {}
    for scene in sorted(scenes, key=lambda s: (-s.capture_year, s.scene_id)):
        for idx in scene_coverage(scene, grid):
            best.setdefault(idx, scene)
    return dict(sorted(best.items(), key=lambda kv: (kv[0].row, kv[0].col)))


_RESAMPLING = {"bilinear": Resampling.bilinear, "nearest": Resampling.nearest}


def _read_tile(src, scene: SceneMeta, index: TileIndex, grid: GridSpec, resampling: str) -> np.ndarray:
    xmin, ymin, xmax, ymax = tile_bounds(index, grid)
    if not _inside((xmin, ymin, xmax, ymax), scene.geo_bounds):
        raise CoverageError(f"tile {tuple(index)} not fully covered by scene {scene.scene_id}")
    n = grid.tile_px
    t = src.transform
    res = grid.resolution_m_per_px
    aligned = (
        t.b == 0 and t.d == 0
        and math.isclose(t.a, res, rel_tol=1e-12)
        and math.isclose(-t.e, res, rel_tol=1e-12)
    )
    if aligned:
        col_off = (xmin - t.c) / res
        row_off = (t.f - ymax) / res
        if abs(col_off - round(col_off)) < 1e-6 and abs(row_off - round(row_off)) < 1e-6:
            window = Window(round(col_off), round(row_off), n, n)
            data = src.read(indexes=[1, 2, 3], window=window)
            return np.ascontiguousarray(np.moveaxis(data, 0, -1))
    if resampling not in _RESAMPLING:
        raise GridConfigError(f"unknown resampling {resampling!r}")
    dst = np.zeros((3, n, n), dtype=np.uint8)
    reproject(
        source=rasterio.band(src, [1, 2, 3]),
        destination=dst,
        dst_transform=from_origin(xmin, ymax, res, res),
        dst_crs=grid.crs.to_wkt(),
        resampling=_RESAMPLING[resampling],
    )
    return np.ascontiguousarray(np.moveaxis(dst, 0, -1))


def extract_tile(
    scene: SceneMeta, index: TileIndex, grid: GridSpec, resampling: str = "bilinear"
) -> ImageTile:
    """Crop (or resample) one tile out of a scene raster.

    A scene on the same pixel lattice as the grid is cropped directly; any
    other georeferencing is resampled onto the tile's pixel grid.
    """
    with rasterio.open(scene.raster_path) as src:
        pixels = _read_tile(src, scene, index, grid, resampling)
    return ImageTile(index, pixels, scene.capture_year, scene.scene_id)


def extract_tiles(
    scene: SceneMeta, indices: Iterable[TileIndex], grid: GridSpec, resampling: str = "bilinear"
) -> Iterator[ImageTile]:
    """Like :func:`extract_tile` for many tiles, opening the raster once."""
    with rasterio.open(scene.raster_path) as src:
        for idx in indices:
            yield ImageTile(idx, _read_tile(src, scene, idx, grid, resampling),
                            scene.capture_year, scene.scene_id)


def write_scene_raster(path: str | Path, pixels: np.ndarray, bounds: Bounds, projection: str) -> None:
    """Write an (H, W, 3) uint8 array as a north-up GeoTIFF covering ``bounds``."""
    h, w, _ = pixels.shape
    xmin, ymin, xmax, ymax = bounds
    transform = from_origin(xmin, ymax, (xmax - xmin) / w, (ymax - ymin) / h)
    with rasterio.open(
        path, "w", driver="GTiff", height=h, width=w, count=3, dtype="uint8",
        crs=CRS.from_user_input(projection).to_wkt(), transform=transform,
        compress="deflate", zlevel=1, tiled=True,
    ) as dst:
        dst.write(np.moveaxis(pixels, -1, 0))


@dataclass
class TileManifestEntry:
    tile_col: int
    tile_row: int
    scene_id: str
    capture_year: int
    image_path: str
    extra: dict = field(default_factory=dict)

    @property
    def index(self) -> TileIndex:
        return TileIndex(self.tile_col, self.tile_row)

    def to_json(self) -> str:
        d = {
            "tile_col": self.tile_col,
            "tile_row": self.tile_row,
            "scene_id": self.scene_id,
            "capture_year": self.capture_year,
            "image_path": self.image_path,
        }
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "TileManifestEntry":
        return cls(int(d["tile_col"]), int(d["tile_row"]), d["scene_id"],
                   int(d["capture_year"]), d["image_path"])


def tile_filename(index: TileIndex) -> str:
    return f"tile_c{index.col:05d}_r{index.row:05d}.png"


def write_tile_png(tile: ImageTile, path: str | Path) -> None:
    Image.fromarray(tile.pixels, mode="RGB").save(path, format="PNG", compress_level=1)


def read_tile_png(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


def read_tile_manifest(path: str | Path) -> list[TileManifestEntry]:
    with open(path) as f:
        return [TileManifestEntry.from_dict(json.loads(line)) for line in f if line.strip()]


def write_tile_manifest(entries: Iterable[TileManifestEntry], path: str | Path) -> None:
    with open(path, "w") as f:
        for e in entries:
            f.write(e.to_json() + "\n")
