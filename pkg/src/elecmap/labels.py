"""Per-tile ground-truth counts and objective labels from point data.

Electrified structures come from utility customer records (deduplicated by
location and connection-type group); total structures come from a building
location survey.  Both are tallied per grid tile and turned into the access,
percent-electrified and percent-residential labels.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .geogrid import GridSpec, OutOfGridError, TileIndex, tile_indices_xy

logger = logging.getLogger(__name__)

COORD_DECIMALS = 6
PCT_THRESHOLD = Fraction(1, 4)
YEAR_WINDOW = (2014, 2017)

RESIDENTIAL = "residential"
CONNECTION_GROUPS = {
    "residential": "electrified_residential",
    "commercial": "electrified_nonresidential",
    "industrial": "electrified_nonresidential",
}
STRUCTURE_KINDS = (
    "electrified_residential",
    "electrified_nonresidential",
    "building_unclassified",
)
ACCESS_CLASSES = ("no_building", "unelectrified", "electrified")
PCT_CLASSES = ("low", "high")


@dataclass(frozen=True)
class CustomerRecord:
    lon: float
    lat: float
    connection_type: str


@dataclass(frozen=True)
class StructurePoint:
    lon: float
    lat: float
    kind: str


@dataclass(frozen=True)
class TileLabels:
    n_total: int
    n_elec: int
    n_elec_res: int
    n_elec_nonres: int
    n_unelec: int
    access_class: str
    pct_elec: float | None
    pct_class_B: str | None
    pct_elec_res: float | None
    pct_class_C: str | None
    flags: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in LABEL_FIELDS}
        d["flags"] = list(self.flags)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "TileLabels":
        kw = {k: d[k] for k in LABEL_FIELDS}
        return cls(**kw, flags=tuple(d.get("flags", ())))


LABEL_FIELDS = (
    "n_total", "n_elec", "n_elec_res", "n_elec_nonres", "n_unelec",
    "access_class", "pct_elec", "pct_class_B", "pct_elec_res", "pct_class_C",
)


def pct_class(numerator: int, denominator: int, threshold: Fraction = PCT_THRESHOLD) -> str:
    """'low' iff numerator/denominator <= threshold, evaluated exactly."""
    return "low" if numerator * threshold.denominator <= threshold.numerator * denominator else "high"


def derive_class_labels(
    n_total: int,
    n_elec: int = 0,
    n_elec_res: int = 0,
    n_elec_nonres: int | None = None,
    flags: Sequence[str] = (),
    threshold: Fraction = PCT_THRESHOLD,
) -> TileLabels:
    """Complete a tile's label bundle from its raw counts.

    If the utility data shows more electrified structures than the building
    survey (``n_elec > n_total``) the total is raised to ``n_elec`` and the
    tile is flagged ``reconciled``.
    """
    if n_elec_nonres is None:
        n_elec_nonres = n_elec - n_elec_res
    counts = (n_total, n_elec, n_elec_res, n_elec_nonres)
    if any(int(c) != c or c < 0 for c in counts):
        raise ValueError(f"counts must be non-negative integers, got {counts}")
    n_total, n_elec, n_elec_res, n_elec_nonres = map(int, counts)
    if n_elec_res + n_elec_nonres != n_elec:
        raise ValueError(
            f"n_elec={n_elec} != n_elec_res={n_elec_res} + n_elec_nonres={n_elec_nonres}"
        )
    flags = tuple(flags)
    if n_elec > n_total:
        n_total = n_elec
        if "reconciled" not in flags:
            flags += ("reconciled",)
    if n_total == 0:
        access = "no_building"
    elif n_elec >= 1:
        access = "electrified"
    else:
        access = "unelectrified"
    return TileLabels(
        n_total=n_total,
        n_elec=n_elec,
        n_elec_res=n_elec_res,
        n_elec_nonres=n_elec_nonres,
        n_unelec=max(n_total - n_elec, 0),
        access_class=access,
        pct_elec=n_elec / n_total if n_total else None,
        pct_class_B=pct_class(n_elec, n_total, threshold) if n_elec >= 1 else None,
        pct_elec_res=n_elec_res / n_elec if n_elec else None,
        pct_class_C=pct_class(n_elec_res, n_elec, threshold) if n_elec >= 1 else None,
        flags=flags,
    )


EMPTY_LABELS = derive_class_labels(0)


def labels_for(labels: Mapping[TileIndex, TileLabels], index: TileIndex) -> TileLabels:
    """Lookup where tiles absent from the map are all-zero."""
    return labels.get(index, EMPTY_LABELS)


def _valid_coord(lon: float, lat: float) -> bool:
    return (
        math.isfinite(lon) and math.isfinite(lat)
        and -180.0 <= lon <= 180.0 and -90.0 <= lat <= 90.0
    )


def dedupe_customers(records: Iterable[CustomerRecord]) -> tuple[list[StructurePoint], int]:
    """Group customers sharing a location and connection-type group.

    Commercial and industrial customers share the non-residential group.
    Coordinates are compared after rounding to six decimal degrees and the
    rounded location is what the resulting structure carries.  Returns the
    structures in first-seen order and the number of rejected records.
    """
    seen: dict[tuple[float, float, str], StructurePoint] = {}
    rejected = 0
    for rec in records:
        try:
            lon, lat = float(rec.lon), float(rec.lat)
        except (TypeError, ValueError):
            rejected += 1
            continue
        kind = CONNECTION_GROUPS.get(str(rec.connection_type).strip().lower())
        if kind is None or not _valid_coord(lon, lat):
            rejected += 1
            continue
        key = (round(lon, COORD_DECIMALS), round(lat, COORD_DECIMALS), kind)
        if key not in seen:
            seen[key] = StructurePoint(key[0], key[1], kind)
    if rejected:
        logger.warning("rejected %d malformed customer records", rejected)
    return list(seen.values()), rejected


def structures_to_customers(points: Iterable[StructurePoint]) -> list[CustomerRecord]:
    """Inverse view of dedup output, one customer per structure."""
    back = {"electrified_residential": "residential", "electrified_nonresidential": "commercial"}
    return [CustomerRecord(p.lon, p.lat, back[p.kind]) for p in points]


def _tile_ids(points: Sequence[StructurePoint], grid: GridSpec) -> tuple[np.ndarray, np.ndarray]:
    if not points:
        return np.empty(0, np.int64), np.empty(0, np.int64)
    lon = np.fromiter((p.lon for p in points), float, len(points))
    lat = np.fromiter((p.lat for p in points), float, len(points))
    x, y = grid.to_xy(lon, lat)
    cols, rows = tile_indices_xy(x, y, grid)
    bad = np.flatnonzero(cols < 0)
    if bad.size:
        p = points[int(bad[0])]
        raise OutOfGridError(f"{bad.size} points outside grid, first at ({p.lon}, {p.lat})")
    return cols, rows


def aggregate_tile_labels(
    electrified: Sequence[StructurePoint],
    buildings: Sequence[StructurePoint],
    grid: GridSpec,
) -> dict[TileIndex, TileLabels]:
    """Exact per-tile tallies; tiles without any point are left out."""
    electrified = list(electrified)
    buildings = list(buildings)
    n = grid.n_tiles
    ec, er = _tile_ids(electrified, grid)
    bc, br = _tile_ids(buildings, grid)
    is_res = np.fromiter(
        (p.kind == "electrified_residential" for p in electrified), bool, len(electrified)
    )
    elec_flat = er * grid.n_cols + ec
    total = np.bincount(br * grid.n_cols + bc, minlength=n)
    elec = np.bincount(elec_flat, minlength=n)
    res = np.bincount(elec_flat[is_res], minlength=n)
    out: dict[TileIndex, TileLabels] = {}
    for flat in np.flatnonzero((total > 0) | (elec > 0)):
        row, col = divmod(int(flat), grid.n_cols)
        out[TileIndex(col, row)] = derive_class_labels(
            int(total[flat]), int(elec[flat]), int(res[flat])
        )
    return out


@dataclass
class TileRecord:
    index: TileIndex
    county: str | None
    capture_year: int
    image_path: str
    labels: TileLabels = EMPTY_LABELS
    scene_id: str = ""
    flags: tuple[str, ...] = field(default=())

    def to_dict(self) -> dict:
        return {
            "tile_col": self.index.col,
            "tile_row": self.index.row,
            "county": self.county,
            "capture_year": self.capture_year,
            "image_path": self.image_path,
            "scene_id": self.scene_id,
            "labels": self.labels.to_dict(),
            "flags": list(self.flags),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "TileRecord":
        return cls(
            index=TileIndex(int(d["tile_col"]), int(d["tile_row"])),
            county=d.get("county"),
            capture_year=int(d["capture_year"]),
            image_path=d["image_path"],
            labels=TileLabels.from_dict(d["labels"]),
            scene_id=d.get("scene_id", ""),
            flags=tuple(d.get("flags", ())),
        )


def temporal_filter(
    tiles: Iterable[TileRecord], min_year: int = YEAR_WINDOW[0], max_year: int = YEAR_WINDOW[1]
) -> list[TileRecord]:
    """Keep tiles captured within ``[min_year, max_year]`` (inclusive), order kept."""
    return [t for t in tiles if min_year <= t.capture_year <= max_year]


def with_labels(record: TileRecord, labels: TileLabels) -> TileRecord:
    return replace(record, labels=labels)


# --- file formats ---------------------------------------------------------

def read_customers_csv(path: str | Path) -> list[CustomerRecord]:
    out = []
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            try:
                lon, lat = float(row["lon"]), float(row["lat"])
            except (TypeError, ValueError):
                lon = lat = float("nan")  # rejected by dedupe_customers
            out.append(CustomerRecord(lon, lat, row.get("connection_type") or ""))
    return out


def read_buildings_csv(path: str | Path) -> list[StructurePoint]:
    with open(path, newline="") as f:
        return [
            StructurePoint(float(r["lon"]), float(r["lat"]), "building_unclassified")
            for r in csv.DictReader(f)
        ]


def write_customers_csv(records: Iterable[CustomerRecord], path: str | Path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["lon", "lat", "connection_type"])
        for r in records:
            w.writerow([f"{r.lon:.{COORD_DECIMALS}f}", f"{r.lat:.{COORD_DECIMALS}f}", r.connection_type])


def write_buildings_csv(points: Iterable[StructurePoint], path: str | Path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["lon", "lat"])
        for p in points:
            w.writerow([f"{p.lon:.{COORD_DECIMALS}f}", f"{p.lat:.{COORD_DECIMALS}f}"])


def label_line(index: TileIndex, labels: TileLabels) -> str:
    """Canonical JSONL line for one tile's labels."""
    d = {"tile_col": index.col, "tile_row": index.row, **labels.to_dict()}
    return json.dumps(d, sort_keys=True)


def write_labels_jsonl(labels: Mapping[TileIndex, TileLabels], path: str | Path) -> None:
    with open(path, "w") as f:
        for idx in sorted(labels, key=lambda i: (i.row, i.col)):
            f.write(label_line(idx, labels[idx]) + "\n")


def read_labels_jsonl(path: str | Path) -> dict[TileIndex, TileLabels]:
    out = {}
    with open(path) as f:
        for line in f:
            if line.strip():
                d = json.loads(line)
                out[TileIndex(d["tile_col"], d["tile_row"])] = TileLabels.from_dict(d)
    return out


def write_tile_records(records: Iterable[TileRecord], path: str | Path) -> None:
    with open(path, "w") as f:
        for r in records:
            f.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")


def read_tile_records(path: str | Path) -> list[TileRecord]:
    with open(path) as f:
        return [TileRecord.from_dict(json.loads(line)) for line in f if line.strip()]
