"""Metrics and reports: per-class accuracy, R², county aggregation, binary collapse.

Per-class "accuracy" throughout is per-class recall: the fraction of tiles
whose true label is that class and that were predicted as that class.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Hashable, Mapping, Sequence

ACCURACY_NOTE = "per-class accuracy = recall (correct-in-class / total-in-class)"
ACCESS_CLASSES = ("no_building", "unelectrified", "electrified")
BINARY_CLASSES = ("unelectrified_area", "electrified_area")
_COLLAPSE = {
    "no_building": "unelectrified_area",
    "unelectrified": "unelectrified_area",
    "electrified": "electrified_area",
}


@dataclass
class ClassificationReport:
    per_class: dict[str, float]
    overall: float
    n: int
    support: dict[str, int]
    flags: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "per_class_accuracy": self.per_class,
            "overall_accuracy": self.overall,
            "n": self.n,
            "support": self.support,
            "flags": self.flags,
            "note": ACCURACY_NOTE,
        }


def classification_report(
    preds: Sequence[Hashable], labels: Sequence[Hashable], classes: Sequence[Hashable] | None = None
) -> ClassificationReport:
    preds = list(preds)
    labels = list(labels)
    if len(preds) != len(labels):
        raise ValueError(f"length mismatch: {len(preds)} predictions, {len(labels)} labels")
    if not labels:
        raise ValueError("empty prediction/label vectors")
    if classes is None:
        classes = sorted(set(labels), key=str)
    per_class, support, flags = {}, {}, []
    for c in classes:
        in_class = [p for p, y in zip(preds, labels) if y == c]
        if not in_class:
            flags.append(f"class_absent:{c}")
            continue
        support[str(c)] = len(in_class)
        per_class[str(c)] = sum(p == c for p in in_class) / len(in_class)
    overall = sum(p == y for p, y in zip(preds, labels)) / len(labels)
    return ClassificationReport(per_class, overall, len(labels), support, flags)


@dataclass
class RegressionReport:
    r2: float | None
    n: int
    flags: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"r2": self.r2, "n": self.n, "flags": self.flags}


def r2_score(preds: Sequence[float], targets: Sequence[float]) -> float | None:
    """1 - SS_res / SS_tot, or None when the targets have no variance."""
    n = len(targets)
    if n == 0:
        return None
    if min(targets) == max(targets):
        return None
    mean = math.fsum(targets) / n
    ss_tot = math.fsum((t - mean) ** 2 for t in targets)
    if ss_tot == 0:
        return None
    ss_res = math.fsum((t - p) ** 2 for p, t in zip(preds, targets))
    return 1.0 - ss_res / ss_tot


def regression_report(preds: Sequence[float], targets: Sequence[float]) -> RegressionReport:
    preds = [float(p) for p in preds]
    targets = [float(t) for t in targets]
    if len(preds) != len(targets):
        raise ValueError(f"length mismatch: {len(preds)} predictions, {len(targets)} targets")
    flags = []
    if len(targets) < 2:
        flags.append("too_few_targets")
        return RegressionReport(None, len(targets), flags)
    r2 = r2_score(preds, targets)
    if r2 is None:
        flags.append("zero_target_variance")
    return RegressionReport(r2, len(targets), flags)


@dataclass
class CountyTable:
    rows: list[tuple[str, float, float, int]]  # county, predicted, actual, n_tiles
    r2: float | None
    flags: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "counties": [
                {"county_id": c, "predicted_total": p, "actual_total": a, "n_tiles": n}
                for c, p, a, n in self.rows
            ],
            "r2": self.r2,
            "flags": self.flags,
        }

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["county_id", "predicted_total", "actual_total"])
            for c, p, a, _ in self.rows:
                w.writerow([c, repr(p), repr(a)])


def county_aggregate(
    preds: Mapping[Hashable, float],
    targets: Mapping[Hashable, float],
    tile_to_county: Mapping[Hashable, str],
) -> CountyTable:
    """Sum per-tile predictions and targets to county totals and score R² across counties.

    Totals are accumulated over tiles in sorted order with ``math.fsum``,
    which is exactly rounded and so reproducible to the bit.
    """
    if set(preds) != set(targets):
        raise ValueError("predictions and targets cover different tiles")
    per_county: dict[str, list] = {}
    for tile in sorted(preds):
        per_county.setdefault(tile_to_county[tile], []).append(tile)
    rows = []
    for county in sorted(per_county):
        tiles = per_county[county]
        rows.append((
            county,
            math.fsum(float(preds[t]) for t in tiles),
            math.fsum(float(targets[t]) for t in tiles),
            len(tiles),
        ))
    flags = []
    r2 = None
    if len(rows) < 2:
        flags.append("too_few_counties")
    else:
        r2 = r2_score([r[1] for r in rows], [r[2] for r in rows])
        if r2 is None:
            flags.append("zero_target_variance")
    return CountyTable(rows, r2, flags)


def collapse_to_binary(values: Sequence[str]) -> list[str]:
    """Map access classes to areas: no_building and unelectrified both become unelectrified_area."""
    out = []
    for v in values:
        try:
            out.append(_COLLAPSE[v])
        except KeyError:
            raise ValueError(f"unknown access class {v!r}") from None
    return out


@dataclass
class EvalReport:
    task_id: str
    split: str
    n: int
    classification: ClassificationReport | None = None
    regression: RegressionReport | None = None
    county: CountyTable | None = None

    def to_dict(self) -> dict:
        d = {"task_id": self.task_id, "split": self.split, "n": self.n, "note": ACCURACY_NOTE}
        if self.classification:
            d["classification"] = self.classification.to_dict()
        if self.regression:
            d["regression"] = self.regression.to_dict()
        if self.county:
            d["county"] = self.county.to_dict()
        return d

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))


def _f(v) -> str:
    return "n/a" if v is None else f"{v:.2f}"


def access_table(in_sample: dict | None, out_sample: dict | None) -> str:
    """Table shaped like the access results: per-label accuracy and overall, two test sets."""
    names = {"no_building": "No building", "electrified": "Elec. building", "unelectrified": "Unelec. building"}
    lines = ["| Label            | In-sample | Out-of-sample |", "|------------------|-----------|---------------|"]

    def get(rep, key):
        if not rep:
            return None
        c = rep["classification"]
        return c["overall_accuracy"] if key is None else c["per_class_accuracy"].get(key)

    for key in ("no_building", "electrified", "unelectrified"):
        lines.append(f"| {names[key]:<16} | {_f(get(in_sample, key)):>9} | {_f(get(out_sample, key)):>13} |")
    lines.append(f"| {'Overall acc.':<16} | {_f(get(in_sample, None)):>9} | {_f(get(out_sample, None)):>13} |")
    return "\n".join(lines) + "\n"


def extent_table(cls_in: dict | None, cls_out: dict | None, reg_in: dict | None, reg_out: dict | None) -> str:
    """Classification accuracy (low/high/overall) and regression R², two test sets."""
    def acc(rep, key):
        if not rep:
            return None
        c = rep["classification"]
        return c["overall_accuracy"] if key is None else c["per_class_accuracy"].get(key)

    def r2(rep):
        return rep["regression"]["r2"] if rep else None

    lines = [
        "|               | Label      | In-sample | Out-of-sample |",
        "|---------------|------------|-----------|---------------|",
        f"| Classif. acc. | low perc.  | {_f(acc(cls_in, 'low')):>9} | {_f(acc(cls_out, 'low')):>13} |",
        f"|               | high perc. | {_f(acc(cls_in, 'high')):>9} | {_f(acc(cls_out, 'high')):>13} |",
        f"|               | Overall    | {_f(acc(cls_in, None)):>9} | {_f(acc(cls_out, None)):>13} |",
        f"| Reg. R2       |            | {_f(r2(reg_in)):>9} | {_f(r2(reg_out)):>13} |",
    ]
    return "\n".join(lines) + "\n"

