"""Benchmark runner: evaluates a manifest of edited scenes against ground
truth and aggregates metrics per edit category.

Manifest schema (JSON, paths relative to the manifest's directory)::

    {
      "format": "splatsim-benchmark/1",
      "expected_counts": {"ego_speed": 10, ...},      # optional declaration
      "scenes": [
        {
          "id": "scene-001",
          "category": "ego_speed",
          "gt_scene": "scenes/base.json",
          "gt_frames": "renders/base",
          "gen_scene": "scenes/edited.json",
          "gen_frames": "renders/edited",
          "edit_script": "edits/speed.txt",           # optional provenance
          "instance": "car-2",                        # insertion/removal only
          "description": "insert a dark sedan"        # judge task text
        }
      ]
    }

Categories are the six {ego, other} x {speed, lane, direction} trajectory
edits plus {insertion, removal}.  OSR is only computed for the last two.
Per-scene failures are recorded in the report and the run continues.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import MetricError
from .metrics import (ConstantJudge, EvalBundle, MetricWarning, OsrItem,
                      ToyClipEmbedder, ToyEmbedder, bundle_from_scene,
                      fid, frame_features, osr_with_flags, vims_with_stats,
                      bas, _instance_rect)
from .scene.frames import load_frames
from .scene.io import load_scene

BENCHMARK_FORMAT = "splatsim-benchmark/1"

CATEGORIES = ("ego_speed", "ego_lane", "ego_direction",
              "other_speed", "other_lane", "other_direction",
              "insertion", "removal")

# Composition of the full 109-clip release, per category.
CANONICAL_CATEGORY_COUNTS = dict(zip(CATEGORIES, (10, 15, 14, 8, 13, 15, 14, 20)))

OPERATION_CATEGORIES = ("insertion", "removal")

METRIC_NAMES = ("vims", "bas", "fid", "fvd", "osr")


@dataclass(frozen=True)
class BenchmarkEntry:
    id: str
    category: str
    gt_scene: Path
    gt_frames: Path
    gen_scene: Path
    gen_frames: Path
    edit_script: Optional[Path] = None
    instance: Optional[str] = None
    description: Optional[str] = None


def load_manifest(path) -> tuple[list[BenchmarkEntry], Optional[dict[str, int]]]:
    path = Path(path)
    data = json.loads(path.read_text())
    if data.get("format") != BENCHMARK_FORMAT:
        raise MetricError(f"{path}: expected format {BENCHMARK_FORMAT!r}, "
                          f"got {data.get('format')!r}")
    base = path.parent

    def resolve(p):
        return (base / p).resolve()

    entries = []
    seen = set()
    for raw in data.get("scenes", []):
        entry = BenchmarkEntry(
            id=str(raw["id"]),
            category=str(raw["category"]),
            gt_scene=resolve(raw["gt_scene"]),
            gt_frames=resolve(raw["gt_frames"]),
            gen_scene=resolve(raw["gen_scene"]),
            gen_frames=resolve(raw["gen_frames"]),
            edit_script=resolve(raw["edit_script"]) if "edit_script" in raw else None,
            instance=raw.get("instance"),
            description=raw.get("description"))
        if entry.id in seen:
            raise MetricError(f"duplicate scene id {entry.id!r} in manifest")
        seen.add(entry.id)
        entries.append(entry)
    declared = data.get("expected_counts")
    if declared is not None:
        declared = {str(k): int(v) for k, v in declared.items()}
    return entries, declared


@dataclass
class MetricReport:
    """Aggregated benchmark results.

    `categories` and `overall` map metric name to (value, sample_count);
    the count is scenes for vims/bas/osr and pooled feature vectors for
    fid/fvd.  `scenes` holds the per-scene values that fed the aggregate.
    """

    categories: dict[str, dict[str, tuple[Optional[float], int]]] = field(default_factory=dict)
    overall: dict[str, tuple[Optional[float], int]] = field(default_factory=dict)
    scenes: dict[str, dict[str, float]] = field(default_factory=dict)
    scene_counts: dict[str, int] = field(default_factory=dict)
    declared_counts: Optional[dict[str, int]] = None
    failures: list[str] = field(default_factory=list)
    flags: list[str] = field(default_factory=list)
    providers: dict[str, str] = field(default_factory=dict)

    def to_dict(self) -> dict:
        def cells(d):
            return {k: [v[0], v[1]] for k, v in d.items()}
        return {
            "format": "splatsim-report/1",
            "categories": {c: cells(m) for c, m in self.categories.items()},
            "overall": cells(self.overall),
            "scenes": self.scenes,
            "scene_counts": self.scene_counts,
            "declared_counts": self.declared_counts,
            "failures": self.failures,
            "flags": self.flags,
            "providers": self.providers,
        }

    def to_json_bytes(self) -> bytes:
        """Canonical serialization: sorted keys, fixed separators."""
        return (json.dumps(self.to_dict(), sort_keys=True,
                           separators=(",", ":")) + "\n").encode()

    @classmethod
    def from_dict(cls, data: dict) -> "MetricReport":
        if data.get("format") != "splatsim-report/1":
            raise MetricError(f"not a benchmark report: format "
                              f"{data.get('format')!r}")

        def cells(d):
            return {k: (None if v[0] is None else float(v[0]), int(v[1]))
                    for k, v in d.items()}
        return cls(
            categories={c: cells(m) for c, m in data.get("categories", {}).items()},
            overall=cells(data.get("overall", {})),
            scenes={k: dict(v) for k, v in data.get("scenes", {}).items()},
            scene_counts={k: int(v) for k, v in data.get("scene_counts", {}).items()},
            declared_counts=data.get("declared_counts"),
            failures=list(data.get("failures", [])),
            flags=list(data.get("flags", [])),
            providers=dict(data.get("providers", {})))

    def render_text(self) -> str:
        """Aligned table, one row per category plus the overall row."""
        headers = ["category", "n"] + [m.upper() for m in METRIC_NAMES]
        rows = []
        for cat in sorted(self.categories):
            row = [cat, str(self.scene_counts.get(cat, 0))]
            for m in METRIC_NAMES:
                cell = self.categories[cat].get(m)
                row.append("-" if cell is None or cell[0] is None
                           else f"{cell[0]:.4f} ({cell[1]})")
            rows.append(row)
        total = sum(self.scene_counts.values())
        row = ["overall", str(total)]
        for m in METRIC_NAMES:
            cell = self.overall.get(m)
            row.append("-" if cell is None or cell[0] is None
                       else f"{cell[0]:.4f} ({cell[1]})")
        rows.append(row)
        widths = [max(len(headers[i]), *(len(r[i]) for r in rows))
                  for i in range(len(headers))]
        lines = ["  ".join(h.ljust(widths[i]) for i, h in enumerate(headers)),
                 "  ".join("-" * w for w in widths)]
        lines += ["  ".join(c.ljust(widths[i]) for i, c in enumerate(r))
                  for r in rows]
        if self.failures:
            lines += ["", "failures:"] + [f"  {f}" for f in self.failures]
        if self.flags:
            lines += ["", "flags:"] + [f"  {f}" for f in self.flags]
        return "\n".join(lines) + "\n"


def _mean_cell(values: list[float]) -> tuple[Optional[float], int]:
    if not values:
        return None, 0
    return float(np.mean(values)), len(values)


def _fid_cell(gen_feats: list, gt_feats: list,
              flags: list[str], label: str) -> tuple[Optional[float], int]:
    if not gen_feats or not gt_feats:
        return None, 0
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", MetricWarning)
        try:
            value = fid(gen_feats, gt_feats)
        except MetricError as err:
            flags.append(f"{label}: {err}")
            return None, 0
    for msg in dict.fromkeys(str(w.message) for w in caught):
        flags.append(f"{label}: {msg}")
    return value, len(gen_feats)


def run_benchmark(manifest_path, *, embedder=None, judge=None,
                  clip_embedder=None, k_frames: int = 5,
                  occ_threshold: float = 0.8) -> MetricReport:
    """Evaluate every scene in the manifest and aggregate per category.

    Providers default to the deterministic stand-ins (ToyEmbedder, a
    constant judge); their identities are recorded in the report so a run
    is self-describing.
    """
    embedder = embedder or ToyEmbedder()
    judge = judge or ConstantJudge()
    clip_embedder = clip_embedder or ToyClipEmbedder(embedder if isinstance(embedder, ToyEmbedder) else ToyEmbedder())
    entries, declared = load_manifest(manifest_path)

    report = MetricReport(declared_counts=declared)
    report.providers = {
        "embedder": getattr(embedder, "identity", repr(embedder)),
        "judge": getattr(judge, "identity", repr(judge)),
        "clip_embedder": getattr(clip_embedder, "identity", repr(clip_embedder)),
    }

    scene_cache: dict[Path, object] = {}
    frames_cache: dict[Path, object] = {}

    def cached_scene(p: Path):
        if p not in scene_cache:
            scene_cache[p] = load_scene(p)
        return scene_cache[p]

    def cached_frames(p: Path):
        if p not in frames_cache:
            frames_cache[p] = load_frames(p)
        return frames_cache[p]

    per_cat_scene_scores: dict[str, dict[str, list[float]]] = {}
    per_cat_feats: dict[str, dict[str, list]] = {}
    per_cat_osr_items: dict[str, list[tuple[str, OsrItem]]] = {}
    actual_counts: dict[str, int] = {}

    for entry in sorted(entries, key=lambda e: e.id):
        if entry.category not in CATEGORIES:
            report.failures.append(
                f"{entry.id}: unknown category {entry.category!r}")
            continue
        actual_counts[entry.category] = actual_counts.get(entry.category, 0) + 1
        cat_scores = per_cat_scene_scores.setdefault(
            entry.category, {m: [] for m in ("vims", "bas")})
        cat_feats = per_cat_feats.setdefault(
            entry.category, {"gen": [], "gt": [], "gen_clip": [], "gt_clip": []})
        scene_row = report.scenes.setdefault(entry.id, {})
        try:
            gt_bundle = bundle_from_scene(cached_scene(entry.gt_scene),
                                          cached_frames(entry.gt_frames))
            gen_bundle = bundle_from_scene(cached_scene(entry.gen_scene),
                                           cached_frames(entry.gen_frames))
        except Exception as err:
            report.failures.append(f"{entry.id}: load: {err}")
            continue

        try:
            score, skipped = vims_with_stats(gen_bundle, gt_bundle, embedder,
                                             occ_threshold=occ_threshold)
            cat_scores["vims"].append(score)
            scene_row["vims"] = score
            if skipped:
                report.flags.append(f"{entry.id}: vims skipped {skipped} frame pairs")
        except Exception as err:
            report.failures.append(f"{entry.id}: vims: {err}")

        try:
            score = bas(gen_bundle, gt_bundle, embedder)
            cat_scores["bas"].append(score)
            scene_row["bas"] = score
        except Exception as err:
            report.failures.append(f"{entry.id}: bas: {err}")

        try:
            cat_feats["gen"].extend(frame_features(gen_bundle.video, embedder))
            cat_feats["gt"].extend(frame_features(gt_bundle.video, embedder))
            cat_feats["gen_clip"].append(clip_embedder.embed_clip(gen_bundle.video))
            cat_feats["gt_clip"].append(clip_embedder.embed_clip(gt_bundle.video))
        except Exception as err:
            report.failures.append(f"{entry.id}: features: {err}")

        if entry.category in OPERATION_CATEGORIES:
            try:
                item = _osr_item(entry, gen_bundle, gt_bundle)
                per_cat_osr_items.setdefault(entry.category, []).append(
                    (entry.id, item))
            except Exception as err:
                report.failures.append(f"{entry.id}: osr: {err}")

    report.scene_counts = actual_counts
    if declared is not None:
        mismatched = sorted(set(declared) | set(actual_counts))
        bad = [c for c in mismatched
               if declared.get(c, 0) != actual_counts.get(c, 0)]
        if bad:
            detail = ", ".join(
                f"{c}: declared {declared.get(c, 0)} != actual {actual_counts.get(c, 0)}"
                for c in bad)
            warnings.warn(f"manifest count mismatch: {detail}", MetricWarning,
                          stacklevel=2)
            report.flags.append(f"count mismatch: {detail}")

    all_scores: dict[str, list[float]] = {m: [] for m in ("vims", "bas", "osr")}
    all_feats: dict[str, list] = {"gen": [], "gt": [], "gen_clip": [], "gt_clip": []}

    for cat in sorted(actual_counts):
        cells: dict[str, tuple[Optional[float], int]] = {}
        scores = per_cat_scene_scores.get(cat, {})
        for m in ("vims", "bas"):
            cells[m] = _mean_cell(scores.get(m, []))
            all_scores[m].extend(scores.get(m, []))
        feats = per_cat_feats.get(cat, {"gen": [], "gt": [], "gen_clip": [], "gt_clip": []})
        cells["fid"] = _fid_cell(feats["gen"], feats["gt"], report.flags,
                                 f"{cat}: fid")
        cells["fvd"] = _fid_cell(feats["gen_clip"], feats["gt_clip"],
                                 report.flags, f"{cat}: fvd")
        for k in all_feats:
            all_feats[k].extend(feats[k])
        if cat in OPERATION_CATEGORIES:
            items = per_cat_osr_items.get(cat, [])
            osr_scores = _judge_items(items, judge, k_frames, report)
            cells["osr"] = _mean_cell(osr_scores)
            all_scores["osr"].extend(osr_scores)
        else:
            cells["osr"] = (None, 0)
        report.categories[cat] = cells

    report.overall = {
        "vims": _mean_cell(all_scores["vims"]),
        "bas": _mean_cell(all_scores["bas"]),
        "fid": _fid_cell(all_feats["gen"], all_feats["gt"], report.flags,
                         "overall: fid"),
        "fvd": _fid_cell(all_feats["gen_clip"], all_feats["gt_clip"],
                         report.flags, "overall: fvd"),
        "osr": _mean_cell(all_scores["osr"]),
    }
    return report


def _osr_item(entry: BenchmarkEntry, gen_bundle: EvalBundle,
              gt_bundle: EvalBundle) -> OsrItem:
    """Build the judge input for one insertion/removal scene.

    Insertion boxes come from the edited scene (the object exists there);
    removal boxes come from the ground-truth scene (where the object used to
    be), both drawn on the generated video.
    """
    if entry.instance is None:
        raise MetricError("insertion/removal scene needs an 'instance' field")
    source = gen_bundle if entry.category == "insertion" else gt_bundle
    if entry.instance not in source.boxes:
        raise MetricError(f"instance {entry.instance!r} not in "
                          f"{'edited' if entry.category == 'insertion' else 'ground-truth'} scene")
    rects = []
    for idx in range(len(gen_bundle)):
        r = _instance_rect(source, min(idx, len(source) - 1), entry.instance)
        rects.append(None if r is None else (r.x0, r.y0, r.x1, r.y1))
    task = entry.description or f"{entry.category} of instance {entry.instance}"
    return OsrItem(video=gen_bundle.video, task=task,
                   kind=entry.category, rects=tuple(rects))


def _judge_items(items: list[tuple[str, OsrItem]], judge, k_frames: int,
                 report: MetricReport) -> list[float]:
    """Judge one category's scenes individually so a single protocol failure
    excludes only its own scene."""
    scores = []
    for scene_id, item in items:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", MetricWarning)
            try:
                value, _ = osr_with_flags([item], judge, k_frames)
            except MetricError:
                reasons = "; ".join(str(w.message) for w in caught) or "excluded"
                report.failures.append(f"{scene_id}: osr: {reasons}")
                continue
        for w in caught:
            report.flags.append(f"{scene_id}: {w.message}")
        scores.append(value)
        report.scenes.setdefault(scene_id, {})["osr"] = value
    return scores
