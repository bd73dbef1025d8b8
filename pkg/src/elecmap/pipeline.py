"""Restartable pipeline stages writing plain files plus one manifest per stage.

Workdir layout::

    synth/      synthetic inputs (scenes, CSVs, counties, truth, NL raster)
    tile/       grid.json, images/*.png, tiles.jsonl, skipped.jsonl
    label/      labels.jsonl (per-tile counts), records.jsonl (imaged tiles kept)
    split/      assignment.csv, summary.json
    train/<task>/          model.pt + model.json
    evaluate/<task>/<split>/  report.json, report.txt, predictions.csv, county.csv
    baseline/   threshold.json, nl_predictions.csv, comparison.json, table.txt
    report/     tables.txt, report.json, county_<task>_<split>.csv/.png
    cache/      decoded tile stacks (not artifacts)

Each manifest records the stage's config hash, seed, the manifests it was
built from, and a sha256 per output file.  Manifests carry no timestamps so
reruns with the same configuration are hash-identical.
"""

from __future__ import annotations

import csv
import fcntl
import hashlib
import json
import logging
import shutil
from collections import Counter, defaultdict
from contextlib import contextmanager
from pathlib import Path
from typing import Iterable

import numpy as np

from . import baseline as bl
from . import evaluation as ev
from .config import PipelineConfig, config_hash, upstream_of
from .geogrid import (
    GridSpec,
    SceneMeta,
    TileIndex,
    TileManifestEntry,
    assign_tiles_to_scenes,
    extract_tiles,
    make_grid,
    read_tile_manifest,
    tile_filename,
    write_tile_manifest,
    write_tile_png,
)
from .labels import (
    TileRecord,
    aggregate_tile_labels,
    dedupe_customers,
    labels_for,
    read_buildings_csv,
    read_customers_csv,
    read_labels_jsonl,
    read_tile_records,
    temporal_filter,
    write_labels_jsonl,
    write_tile_records,
)
from .models import TileSet, TrainedModel, build_model, load_tile_stack, make_tasks, predict, train
from .splits import CountyMap, SPLITS, SplitAssignment, assign_splits, select_out_of_sample, split_summary, verify_split
from .synthdata import generate_nl_raster, generate_region

logger = logging.getLogger(__name__)


class PreconditionError(RuntimeError):
    """A stage's inputs are missing; ``stage`` names the stage to run first."""

    def __init__(self, message: str, stage: str | None = None):
        super().__init__(message)
        self.stage = stage


class ValidationError(RuntimeError):
    pass


class LockError(PreconditionError):
    pass


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class Workspace:
    def __init__(self, cfg: PipelineConfig, workdir: str | Path | None = None):
        self.cfg = cfg
        self.root = Path(workdir or cfg.workdir)

    def stage_dir(self, stage: str) -> Path:
        return self.root.joinpath(*stage.split(":"))

    def manifest_path(self, stage: str) -> Path:
        return self.stage_dir(stage) / "manifest.json"

    def read_manifest(self, stage: str) -> dict | None:
        p = self.manifest_path(stage)
        return json.loads(p.read_text()) if p.exists() else None

    def require(self, stage: str, hint: str | None = None) -> dict:
        """Upstream manifest or a precondition error naming the missing stage."""
        m = self.read_manifest(stage)
        if m is None:
            cmd = hint or stage.replace(":", " ")
            raise PreconditionError(
                f"missing outputs of stage '{cmd}' in {self.root}; run `elecmap {cmd}` first", stage=cmd
            )
        expected = config_hash(self.cfg, stage)
        if m["config_hash"] != expected:
            logger.warning(
                "stage '%s' outputs were built with a different configuration "
                "(hash %s, expected %s); downstream results may be stale",
                stage, m["config_hash"][:12], expected[:12],
            )
        return m

    def up_to_date(self, stage: str) -> bool:
        m = self.read_manifest(stage)
        if m is None or m["config_hash"] != config_hash(self.cfg, stage):
            return False
        for up, digest in m.get("upstream", {}).items():
            if self._manifest_digest(up) != digest:
                return False
        return all((self.root / rel).exists() for rel in m["outputs"])

    def _manifest_digest(self, stage: str) -> str | None:
        p = self.manifest_path(stage)
        return sha256_file(p) if p.exists() else None

    def write_manifest(self, stage: str, outputs: Iterable[Path], upstream: Iterable[str], summary: dict) -> dict:
        outs = {}
        for p in sorted(set(outputs)):
            outs[p.relative_to(self.root).as_posix()] = sha256_file(p)
        m = {
            "stage": stage,
            "config_hash": config_hash(self.cfg, stage),
            "seed": self.cfg.seed,
            "limit_tiles": self.cfg.limit_tiles,
            "upstream": {u: self._manifest_digest(u) for u in upstream if self.manifest_path(u).exists()},
            "outputs": outs,
            "summary": summary,
        }
        self.manifest_path(stage).write_text(json.dumps(m, indent=2, sort_keys=True) + "\n")
        return m

    def fresh_dir(self, stage: str) -> Path:
        d = self.stage_dir(stage)
        if d.exists():
            for child in d.iterdir():
                # nested stage dirs (evaluate/<task>/<split>) belong to other manifests
                if child.is_dir() and (child / "manifest.json").exists():
                    continue
                shutil.rmtree(child) if child.is_dir() else child.unlink()
        d.mkdir(parents=True, exist_ok=True)
        return d

    @contextmanager
    def lock(self):
        self.root.mkdir(parents=True, exist_ok=True)
        f = open(self.root / ".lock", "w")
        try:
            try:
                fcntl.flock(f, fcntl.LOCK_EX | fcntl.LOCK_NB)
            except BlockingIOError:
                raise LockError(f"another stage is running in {self.root}") from None
            yield
        finally:
            fcntl.flock(f, fcntl.LOCK_UN)
            f.close()


# --- input resolution ---------------------------------------------------------

def _input(ws: Workspace, configured: str | None, synth_name: str, what: str) -> Path:
    if configured is not None:
        p = ws.cfg.resolve(configured)
        if not p.exists():
            raise PreconditionError(f"{what} file {p} does not exist", stage="paths")
        return p
    if ws.cfg.synth is None:
        raise PreconditionError(f"no {what} path configured and no synth section", stage="paths")
    ws.require("synth")
    p = ws.stage_dir("synth") / synth_name
    if not p.exists():
        raise PreconditionError(f"synthetic {what} {p} missing; rerun `elecmap synth`", stage="synth")
    return p


def load_grid(ws: Workspace) -> GridSpec:
    p = ws.stage_dir("tile") / "grid.json"
    if not p.exists():
        raise PreconditionError("grid.json missing; run `elecmap tile` first", stage="tile")
    return GridSpec.load(p)


def load_records(ws: Workspace) -> list[TileRecord]:
    ws.require("label")
    return read_tile_records(ws.stage_dir("label") / "records.jsonl")


def load_assignment(ws: Workspace) -> SplitAssignment:
    m = ws.require("split")
    return SplitAssignment.read_csv(
        ws.stage_dir("split") / "assignment.csv", m["seed"], m["summary"].get("out_counties")
    )


# --- stages ------------------------------------------------------------------

def stage_synth(ws: Workspace) -> dict:
    spec = ws.cfg.scene_spec()
    if spec is None:
        raise PreconditionError("config has no synth section", stage="config")
    out = ws.fresh_dir("synth")
    region = generate_region(spec, out, render=True)
    nl = generate_nl_raster(
        region.truth, region.grid, ws.cfg.nl.noise_level, ws.cfg.nl.psf_radius,
        ws.cfg.nl.cell_tiles, seed=spec.seed,
    )
    nl.save(out / "nl.tif")
    outputs = [p for p in out.rglob("*") if p.is_file() and p.name != "manifest.json"]
    summary = {
        "n_cols": region.grid.n_cols,
        "n_rows": region.grid.n_rows,
        "n_structures": len(region.structures),
        "n_customer_records": len(region.customers),
        "n_scenes": len(region.scenes),
        "scene_years": dict(sorted(Counter(str(s.capture_year) for s in region.scenes).items())),
    }
    return ws.write_manifest("synth", outputs, upstream_of("synth"), summary)


def stage_tile(ws: Workspace) -> dict:
    cfg = ws.cfg
    scenes_file = _input(ws, cfg.paths.scenes, "scenes.json", "scene list")
    scenes = [SceneMeta.from_dict(d, scenes_file.parent) for d in json.loads(scenes_file.read_text())]
    grid = make_grid(cfg.region_bounds(), cfg.region.tile_size_m, cfg.region.resolution_m, cfg.region.projection)
    out = ws.fresh_dir("tile")
    (out / "images").mkdir()
    grid.save(out / "grid.json")
    chosen = assign_tiles_to_scenes(scenes, grid)
    skipped = [i for i in grid.indices() if i not in chosen]
    indices = list(chosen)
    if cfg.limit_tiles is not None:
        indices = indices[: cfg.limit_tiles]
    by_scene: dict[str, list[TileIndex]] = defaultdict(list)
    for idx in indices:
        by_scene[chosen[idx].scene_id].append(idx)
    scene_by_id = {s.scene_id: s for s in scenes}
    entries: dict[TileIndex, TileManifestEntry] = {}
    outputs = [out / "grid.json"]
    for sid in sorted(by_scene):
        for tile in extract_tiles(scene_by_id[sid], by_scene[sid], grid, cfg.region.resampling):
            rel = f"images/{tile_filename(tile.index)}"
            write_tile_png(tile, out / rel)
            outputs.append(out / rel)
            entries[tile.index] = TileManifestEntry(tile.index.col, tile.index.row, sid, tile.capture_year, rel)
    write_tile_manifest((entries[i] for i in indices), out / "tiles.jsonl")
    with open(out / "skipped.jsonl", "w") as f:
        for i in skipped:
            f.write(json.dumps({"tile_col": i.col, "tile_row": i.row, "reason": "no_full_scene_coverage"}) + "\n")
    outputs += [out / "tiles.jsonl", out / "skipped.jsonl"]
    summary = {
        "n_cols": grid.n_cols, "n_rows": grid.n_rows, "n_tiles_written": len(entries),
        "n_skipped_uncovered": len(skipped), "n_scenes": len(scenes),
    }
    return ws.write_manifest("tile", outputs, upstream_of("tile"), summary)


def stage_label(ws: Workspace) -> dict:
    cfg = ws.cfg
    ws.require("tile")
    grid = load_grid(ws)
    customers_path = _input(ws, cfg.paths.customers, "customers.csv", "customers CSV")
    buildings_path = _input(ws, cfg.paths.buildings, "buildings.csv", "buildings CSV")
    counties_path = _input(ws, cfg.paths.counties, "counties.geojson", "county GeoJSON")
    structures, rejected = dedupe_customers(read_customers_csv(customers_path))
    buildings = read_buildings_csv(buildings_path)
    labels = aggregate_tile_labels(structures, buildings, grid)
    counties = CountyMap.load(counties_path, grid)
    tiles = read_tile_manifest(ws.stage_dir("tile") / "tiles.jsonl")
    tile_county = counties.assign_tiles([t.index for t in tiles], grid)
    records = [
        TileRecord(
            index=t.index,
            county=tile_county[t.index],
            capture_year=t.capture_year,
            image_path=f"tile/{t.image_path}",
            labels=labels_for(labels, t.index),
            scene_id=t.scene_id,
        )
        for t in tiles
    ]
    kept = temporal_filter(records, *cfg.years)
    if cfg.limit_tiles is not None:
        kept = kept[: cfg.limit_tiles]
    imaged = {t.index for t in tiles}
    out = ws.fresh_dir("label")
    write_labels_jsonl(labels, out / "labels.jsonl")
    write_tile_records(kept, out / "records.jsonl")
    for r in kept:
        lab = r.labels
        if lab.n_unelec != lab.n_total - lab.n_elec or lab.n_unelec < 0:
            raise ValidationError(f"label invariant violated at tile {tuple(r.index)}: {lab}")
    summary = {
        "n_structures_electrified": len(structures),
        "n_customer_records_rejected": rejected,
        "n_buildings": len(buildings),
        "n_tiles_with_points": len(labels),
        "n_tiles_with_points_without_image": sum(1 for i in labels if i not in imaged),
        "n_tiles_imaged": len(records),
        "n_tiles_kept": len(kept),
        "n_tiles_excluded_by_year": len(records) - len(temporal_filter(records, *cfg.years)),
        "n_tiles_reconciled": sum(1 for lab in labels.values() if "reconciled" in lab.flags),
        "access_classes": dict(sorted(Counter(r.labels.access_class for r in kept).items())),
    }
    return ws.write_manifest("label", [out / "labels.jsonl", out / "records.jsonl"], upstream_of("label"), summary)


def stage_split(ws: Workspace) -> dict:
    cfg = ws.cfg
    records = load_records(ws)
    if not records:
        raise ValidationError("no labelled tiles to split")
    grid = load_grid(ws)
    counties_path = _input(ws, cfg.paths.counties, "counties.geojson", "county GeoJSON")
    counties = CountyMap.load(counties_path, grid)
    stats: dict[str, list[int]] = defaultdict(list)
    for r in records:
        stats[r.county].append(r.labels.n_total)
    out_counties = select_out_of_sample(counties, stats)
    assignment = assign_splits(records, out_counties, cfg.split.fractions, cfg.seed, cfg.split.bin_edges)
    report = verify_split(assignment, records, cfg.split.max_chi2, cfg.split.alpha, cfg.split.bin_edges)
    out = ws.fresh_dir("split")
    assignment.write_csv(out / "assignment.csv")
    summary = split_summary(assignment, records, report)
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    m = ws.write_manifest(
        "split", [out / "assignment.csv", out / "summary.json"], upstream_of("split"),
        {"counts": summary["counts"], "out_counties": summary["out_counties"], "verification_pass": report["pass"]},
    )
    if not report["pass"]:
        failing = [c for c, v in report["counties"].items() if not v["pass"]]
        raise ValidationError(f"split distribution check failed for counties {failing}")
    return m


def task_tiles(ws: Workspace, task_id: str, split: str) -> list[TileRecord]:
    task = make_tasks(ws.cfg.regression_eligibility)[task_id]
    assignment = load_assignment(ws)
    return [
        r for r in load_records(ws)
        if assignment.assignment.get(r.index) == split and task.eligible(r.labels)
    ]


def tile_stack(ws: Workspace, records: list[TileRecord], size: int) -> np.ndarray:
    """Decoded tiles for ``records``, cached under cache/ keyed by the tile list."""
    key = hashlib.sha256("\n".join(r.image_path for r in records).encode()).hexdigest()[:16]
    cache = ws.root / "cache" / f"{key}.npy"
    cache.parent.mkdir(exist_ok=True)
    return load_tile_stack([ws.root / r.image_path for r in records], cache, size)


def stage_train(ws: Workspace, task_id: str) -> dict:
    cfg = ws.cfg
    tasks = make_tasks(cfg.regression_eligibility)
    if task_id not in tasks:
        raise ValidationError(f"unknown task {task_id!r}; choose from {sorted(tasks)}")
    task = tasks[task_id]
    model_cfg = cfg.model_config(task_id)
    ws.require("split")
    train_recs = task_tiles(ws, task_id, "train")
    val_recs = task_tiles(ws, task_id, "val")
    if cfg.limit_tiles is not None and len(train_recs) > cfg.limit_tiles:
        rng = np.random.default_rng(cfg.seed)
        keep = np.sort(rng.choice(len(train_recs), cfg.limit_tiles, replace=False))
        train_recs = [train_recs[i] for i in keep]
    if not train_recs:
        raise ValidationError(f"no eligible training tiles for {task_id}")
    size = model_cfg.input_size
    train_set = TileSet(tile_stack(ws, train_recs, size), np.array([task.target(r.labels) for r in train_recs]))
    val_set = TileSet(tile_stack(ws, val_recs, size), np.array([task.target(r.labels) for r in val_recs]))
    net = build_model(task, model_cfg)
    model = train(net, train_set, val_set, model_cfg, task, log_every=1)
    out = ws.fresh_dir(f"train:{task_id}")
    weights, sidecar = model.save(out / "model")
    best = model.history[model.best_epoch - 1]
    summary = {
        "task_id": task_id, "n_train": len(train_recs), "n_val": len(val_recs),
        "epochs_run": len(model.history), "best_epoch": model.best_epoch,
        "best_val_metric": best.get("val_metric"),
    }
    return ws.write_manifest(f"train:{task_id}", [weights, sidecar], upstream_of(f"train:{task_id}"), summary)


def stage_evaluate(ws: Workspace, task_id: str, split: str) -> dict:
    if split not in SPLITS:
        raise ValidationError(f"unknown split {split!r}; choose from {SPLITS}")
    stage = f"evaluate:{task_id}:{split}"
    ws.require(f"train:{task_id}", hint=f"train {task_id}")
    model = TrainedModel.load(ws.stage_dir(f"train:{task_id}") / "model", make_tasks(ws.cfg.regression_eligibility))
    task = model.task
    recs = task_tiles(ws, task_id, split)
    if not recs:
        raise ValidationError(f"no eligible {split} tiles for {task_id}")
    preds = predict(model, tile_stack(ws, recs, model.config.input_size))
    targets = [task.target(r.labels) for r in recs]
    out = ws.fresh_dir(stage)
    report = ev.EvalReport(task_id, split, len(recs))
    with open(out / "predictions.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        if task.is_classification:
            w.writerow(["tile_col", "tile_row", "county", "label", "prediction", *[f"p_{c}" for c in task.class_names]])
            for r, t, p, s in zip(recs, targets, preds.values, preds.scores):
                w.writerow([r.index.col, r.index.row, r.county, task.class_names[t], task.class_names[p],
                            *[f"{x:.8f}" for x in s]])
        else:
            w.writerow(["tile_col", "tile_row", "county", "target", "prediction"])
            for r, t, p in zip(recs, targets, preds.values):
                w.writerow([r.index.col, r.index.row, r.county, t, repr(float(p))])
    outputs = [out / "predictions.csv", out / "report.json", out / "report.txt"]
    if task.is_classification:
        report.classification = ev.classification_report(
            preds.labels(task.class_names), [task.class_names[t] for t in targets], task.class_names
        )
        text = "\n".join(f"{c}: {v:.4f}" for c, v in report.classification.per_class.items())
        text += f"\noverall: {report.classification.overall:.4f}\n({ev.ACCURACY_NOTE})\n"
    else:
        report.regression = ev.regression_report(preds.values, targets)
        keys = [tuple(r.index) for r in recs]
        report.county = ev.county_aggregate(
            dict(zip(keys, preds.values.tolist())),
            dict(zip(keys, map(float, targets))),
            {tuple(r.index): r.county for r in recs},
        )
        report.county.write_csv(out / "county.csv")
        outputs.append(out / "county.csv")
        r2 = report.regression.r2
        cr2 = report.county.r2
        text = f"per-tile R2: {'n/a' if r2 is None else f'{r2:.4f}'}\n"
        text += f"county R2: {'n/a' if cr2 is None else f'{cr2:.4f}'} over {len(report.county.rows)} counties\n"
    report.save(out / "report.json")
    (out / "report.txt").write_text(f"{task_id} on {split} ({len(recs)} tiles)\n" + text)
    return ws.write_manifest(stage, outputs, upstream_of(stage), report.to_dict())


def stage_baseline(ws: Workspace) -> dict:
    cfg = ws.cfg
    nl_path = _input(ws, cfg.paths.nl_raster, "nl.tif", "nighttime-lights raster")
    grid = load_grid(ws)
    nl = bl.NLRaster.load(nl_path, grid.projection)
    assignment = load_assignment(ws)
    records = {r.index: r for r in load_records(ws)}
    cal = [r for i, r in records.items() if assignment.assignment.get(i) == cfg.baseline.calibration_split]
    if not cal:
        raise ValidationError(f"no {cfg.baseline.calibration_split} tiles for threshold calibration")
    cal_b, cal_cov = bl.tile_brightness(nl, [r.index for r in cal], grid)
    is_elec = np.array([r.labels.access_class == "electrified" for r in cal])
    threshold = bl.calibrate_threshold(cal_b[cal_cov], is_elec[cal_cov])

    split = cfg.baseline.eval_split
    stage_eval = f"evaluate:access_3class:{split}"
    ws.require(stage_eval, hint=f"evaluate access_3class {split}")
    with open(ws.stage_dir(stage_eval) / "predictions.csv", newline="") as f:
        model_rows = list(csv.DictReader(f))
    tiles = [TileIndex(int(r["tile_col"]), int(r["tile_row"])) for r in model_rows]
    nl_labels, uncovered = bl.nl_classify(nl, grid, threshold, tiles)
    if uncovered:
        logger.warning("%d evaluation tiles outside the NL raster are left out", len(uncovered))
    keep = [k for k, t in enumerate(tiles) if t in nl_labels]
    model_bin = ev.collapse_to_binary([model_rows[k]["prediction"] for k in keep])
    truth_bin = ev.collapse_to_binary([model_rows[k]["label"] for k in keep])
    nl_bin = [nl_labels[tiles[k]] for k in keep]
    comparison = bl.compare_baseline(model_bin, nl_bin, truth_bin)
    out = ws.fresh_dir("baseline")
    (out / "threshold.json").write_text(json.dumps({
        "threshold": threshold, "calibration_split": cfg.baseline.calibration_split,
        "n_calibration_tiles": int(cal_cov.sum()), "criterion": "balanced accuracy",
    }, indent=2, sort_keys=True))
    with open(out / "nl_predictions.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["tile_col", "tile_row", "label", "nl_prediction", "model_prediction"])
        for k, mb, tb, nb in zip(keep, model_bin, truth_bin, nl_bin):
            w.writerow([tiles[k].col, tiles[k].row, tb, nb, mb])
    bl.save_comparison(comparison, out / "comparison.json", out / "table.txt")
    outputs = [out / n for n in ("threshold.json", "nl_predictions.csv", "comparison.json", "table.txt")]
    summary = {"threshold": threshold, "eval_split": split, "comparison": comparison.to_dict(),
               "n_uncovered": len(uncovered)}
    return ws.write_manifest("baseline", outputs, upstream_of("baseline"), summary)


def _eval_report(ws: Workspace, task: str, split: str) -> dict | None:
    p = ws.stage_dir(f"evaluate:{task}:{split}") / "report.json"
    return json.loads(p.read_text()) if p.exists() else None


def stage_report(ws: Workspace, plots: bool = True) -> dict:
    reports = {
        (t, s): _eval_report(ws, t, s) for t in make_tasks() for s in ("test_in", "test_out")
    }
    if not any(reports.values()):
        raise PreconditionError("no evaluation reports found; run `elecmap evaluate <task> <split>` first",
                                stage="evaluate")
    out = ws.fresh_dir("report")
    sections = []
    comparison = None
    if (ws.stage_dir("baseline") / "comparison.json").exists():
        cj = json.loads((ws.stage_dir("baseline") / "comparison.json").read_text())
        comparison = bl.BaselineComparison([tuple(r) for r in cj["rows"]], cj["n"])
        sections.append("Access vs nighttime-lights baseline (per-class accuracy = recall)\n" + comparison.format_table())
    sections.append("Access, 3 classes\n" + ev.access_table(reports[("access_3class", "test_in")],
                                                           reports[("access_3class", "test_out")]))
    sections.append("Extent: percent / number of electrified structures\n" + ev.extent_table(
        reports[("pct_elec_binary", "test_in")], reports[("pct_elec_binary", "test_out")],
        reports[("count_elec_reg", "test_in")], reports[("count_elec_reg", "test_out")]))
    sections.append("Customer type: percent / number of electrified residential structures\n" + ev.extent_table(
        reports[("pct_res_binary", "test_in")], reports[("pct_res_binary", "test_out")],
        reports[("count_res_reg", "test_in")], reports[("count_res_reg", "test_out")]))
    outputs = []
    county_r2 = {}
    for (task, split), rep in reports.items():
        if rep is None or "county" not in rep:
            continue
        src = ws.stage_dir(f"evaluate:{task}:{split}") / "county.csv"
        dst = out / f"county_{task}_{split}.csv"
        shutil.copyfile(src, dst)
        outputs.append(dst)
        county_r2[f"{task}/{split}"] = rep["county"]["r2"]
        if plots:
            png = out / f"county_{task}_{split}.png"
            _scatter(rep["county"]["counties"], f"{task} ({split})", png)
            outputs.append(png)
    if county_r2:
        lines = [f"{k}: {'n/a' if v is None else f'{v:.2f}'}" for k, v in sorted(county_r2.items())]
        sections.append("County-level R2 (predicted vs actual totals)\n" + "\n".join(lines) + "\n")
    (out / "tables.txt").write_text("\n".join(sections))
    (out / "report.json").write_text(json.dumps({
        "evaluations": {f"{t}/{s}": r for (t, s), r in reports.items() if r},
        "baseline": comparison.to_dict() if comparison else None,
        "county_r2": county_r2,
        "note": ev.ACCURACY_NOTE,
    }, indent=2, sort_keys=True))
    outputs += [out / "tables.txt", out / "report.json"]
    return ws.write_manifest("report", outputs, (), {"county_r2": county_r2})


def _scatter(rows: list[dict], title: str, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    pred = [r["predicted_total"] for r in rows]
    act = [r["actual_total"] for r in rows]
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.scatter(act, pred, s=18)
    hi = max(pred + act + [1.0])
    ax.plot([0, hi], [0, hi], lw=0.8, color="grey")
    ax.set_xlabel("actual county total")
    ax.set_ylabel("predicted county total")
    ax.set_title(title, fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)


def full_plan(cfg: PipelineConfig) -> list[tuple[str, callable]]:
    """Stage list for ``elecmap run``: data stages, each task's train and test evaluations, baseline, report."""
    plan: list[tuple[str, callable]] = []
    if cfg.synth is not None:
        plan.append(("synth", stage_synth))
    plan += [("tile", stage_tile), ("label", stage_label), ("split", stage_split)]
    for task in cfg.tasks:
        plan.append((f"train:{task}", lambda ws, t=task: stage_train(ws, t)))
        for split in ("test_in", "test_out"):
            plan.append((f"evaluate:{task}:{split}", lambda ws, t=task, s=split: stage_evaluate(ws, t, s)))
    if "access_3class" in cfg.tasks and (cfg.synth is not None or cfg.paths.nl_raster is not None):
        plan.append(("baseline", stage_baseline))
    plan.append(("report", stage_report))
    return plan
