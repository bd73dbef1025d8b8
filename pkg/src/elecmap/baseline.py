"""Nighttime-lights baseline for the electrified / unelectrified area comparison.

Each tile takes the brightness of the low-resolution NL cell containing its
centroid and is called electrified when that brightness exceeds a threshold
calibrated on validation tiles by balanced accuracy.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import rasterio
from affine import Affine
from pyproj import CRS

from .evaluation import BINARY_CLASSES, classification_report
from .geogrid import GridSpec, TileIndex

ELEC = "electrified_area"
UNELEC = "unelectrified_area"


@dataclass
class NLRaster:
    brightness: np.ndarray  # (rows, cols) float, row 0 = north
    transform: Affine
    projection: str

    def __post_init__(self):
        self.brightness = np.asarray(self.brightness, dtype=np.float64)
        if self.brightness.ndim != 2:
            raise ValueError("NL brightness must be a 2-D grid")
        if np.any(self.brightness < 0) or not np.all(np.isfinite(self.brightness)):
            raise ValueError("NL brightness must be finite and non-negative")

    @property
    def cell_size(self) -> float:
        return self.transform.a

    def save(self, path: str | Path) -> None:
        rows, cols = self.brightness.shape
        with rasterio.open(
            path, "w", driver="GTiff", height=rows, width=cols, count=1,
            dtype="float32", crs=CRS.from_user_input(self.projection).to_wkt(),
            transform=self.transform,
        ) as dst:
            dst.write(self.brightness.astype(np.float32), 1)

    @classmethod
    def load(cls, path: str | Path, projection: str | None = None) -> "NLRaster":
        with rasterio.open(path) as src:
            data = src.read(1).astype(np.float64)
            proj = projection or src.crs.to_wkt()
            return cls(data, src.transform, proj)


def tile_brightness(
    raster: NLRaster, tiles: Sequence[TileIndex], grid: GridSpec
) -> tuple[np.ndarray, np.ndarray]:
    """Brightness of the NL cell containing each tile centroid, plus a covered mask."""
    ts = grid.tile_size_m
    x0, y0 = grid.origin_xy
    cols = np.array([t.col for t in tiles], float)
    rows = np.array([t.row for t in tiles], float)
    cx = x0 + (cols + 0.5) * ts
    cy = y0 + (rows + 0.5) * ts
    inv = ~raster.transform
    px, py = inv @ (cx, cy)
    c = np.floor(px).astype(int)
    r = np.floor(py).astype(int)
    h, w = raster.brightness.shape
    covered = (c >= 0) & (c < w) & (r >= 0) & (r < h)
    values = np.zeros(len(tiles))
    values[covered] = raster.brightness[r[covered], c[covered]]
    return values, covered


def nl_classify(
    raster: NLRaster, grid: GridSpec, threshold: float, tiles: Sequence[TileIndex] | None = None
) -> tuple[dict[TileIndex, str], list[TileIndex]]:
    """Label tiles electrified_area iff their containing cell is brighter than ``threshold``.

    Returns the labels and the list of tiles the raster does not cover.
    """
    tiles = list(grid.indices()) if tiles is None else list(tiles)
    values, covered = tile_brightness(raster, tiles, grid)
    out = {}
    uncovered = []
    for t, v, ok in zip(tiles, values, covered):
        if not ok:
            uncovered.append(t)
            continue
        out[t] = ELEC if v > threshold else UNELEC
    return out, uncovered


def balanced_accuracy(pred_elec: np.ndarray, true_elec: np.ndarray) -> float:
    pos = true_elec.sum()
    neg = (~true_elec).sum()
    tpr = (pred_elec & true_elec).sum() / pos if pos else 0.0
    tnr = (~pred_elec & ~true_elec).sum() / neg if neg else 0.0
    parts = [x for x, n in ((tpr, pos), (tnr, neg)) if n]
    return float(np.mean(parts)) if parts else 0.0


def calibrate_threshold(brightness: Sequence[float], is_electrified: Sequence[bool]) -> float:
    """Threshold maximising balanced accuracy of ``brightness > t``; lowest wins ties.

    Candidates are every distinct brightness value plus one just below the
    minimum, which covers every distinct labelling of the tiles.
    """
    b = np.asarray(brightness, float)
    y = np.asarray(is_electrified, bool)
    if b.size == 0:
        raise ValueError("no tiles to calibrate on")
    values = np.unique(b)
    candidates = np.concatenate([[np.nextafter(values[0], -np.inf)], values])
    order = np.argsort(b, kind="stable")
    b_sorted, y_sorted = b[order], y[order]
    pos, neg = y.sum(), (~y).sum()
    # for each candidate t: tiles with b > t are predicted electrified
    n_le = np.searchsorted(b_sorted, candidates, side="right")
    cum_pos = np.concatenate([[0], np.cumsum(y_sorted)])
    tp = pos - cum_pos[n_le]
    tn = n_le - cum_pos[n_le]
    parts = []
    if pos:
        parts.append(tp / pos)
    if neg:
        parts.append(tn / neg)
    score = np.mean(parts, axis=0)
    return float(candidates[int(np.argmax(score))])


@dataclass
class BaselineComparison:
    """Two rows (baseline, model) of per-class accuracy on unelectrified/electrified areas."""

    rows: list[tuple[str, float | None, float | None]]
    n: int = 0

    def to_dict(self) -> dict:
        return {
            "columns": ["model", "unelectrified_area", "electrified_area"],
            "rows": [list(r) for r in self.rows],
            "n": self.n,
            "accuracy_definition": "per-class recall",
        }

    def format_table(self) -> str:
        name_w = max(len("Model"), *(len(r[0]) for r in self.rows))
        head = f"| {'Model':<{name_w}} | Unelec. areas | Elec. areas |"
        sep = "|" + "-" * (name_w + 2) + "|---------------|-------------|"
        lines = [head, sep]
        for name, u, e in self.rows:
            lines.append(f"| {name:<{name_w}} | {_fmt(u):>13} | {_fmt(e):>11} |")
        return "\n".join(lines) + "\n"

    @classmethod
    def parse_table(cls, text: str) -> "BaselineComparison":
        rows = []
        for line in text.strip().splitlines()[2:]:
            cells = [c.strip() for c in line.strip().strip("|").split("|")]
            rows.append((cells[0], _unfmt(cells[1]), _unfmt(cells[2])))
        return cls(rows)


def _fmt(v: float | None) -> str:
    return "n/a" if v is None else f"{v:.2f}"


def _unfmt(s: str) -> float | None:
    return None if s == "n/a" else float(s)


def compare_baseline(
    model_binary: Sequence[str],
    baseline_binary: Sequence[str],
    labels: Sequence[str],
    names: tuple[str, str] = ("Baseline (NL)", "Elec. access (ours)"),
) -> BaselineComparison:
    """Per-class recall on unelectrified/electrified areas for baseline and model."""
    if not (len(model_binary) == len(baseline_binary) == len(labels)):
        raise ValueError(
            f"length mismatch: model {len(model_binary)}, baseline {len(baseline_binary)}, labels {len(labels)}"
        )
    rows = []
    for name, preds in ((names[0], baseline_binary), (names[1], model_binary)):
        rep = classification_report(preds, labels, classes=BINARY_CLASSES)
        rows.append((name, rep.per_class.get(UNELEC), rep.per_class.get(ELEC)))
    return BaselineComparison(rows, n=len(labels))


def save_comparison(comp: BaselineComparison, json_path: str | Path, text_path: str | Path) -> None:
    Path(json_path).write_text(json.dumps(comp.to_dict(), indent=2, sort_keys=True))
    Path(text_path).write_text(comp.format_table())
