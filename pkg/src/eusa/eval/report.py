"""Per-video and aggregate metrics, and the report files rendered from them."""

from __future__ import annotations

import copy
import csv
import io
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from ..tracker.model import TrackerModel
from ..tracker.tracking import OTB, VOT, track_sequence
from . import metrics as M

SCHEMA_ID = "eusa-report/1"

_METRIC = {"type": ["number", "null"]}
_CONDITION = {
    "type": "object",
    "required": ["precision", "success_auc", "accuracy", "robustness", "eao"],
    "properties": {
        "precision": {"type": "number", "minimum": 0, "maximum": 100},
        "success_auc": {"type": "number", "minimum": 0, "maximum": 100},
        "accuracy": {"type": ["number", "null"], "minimum": 0, "maximum": 100},
        "robustness": {"type": ["number", "null"], "minimum": 0},
        "eao": {"type": ["number", "null"], "minimum": 0, "maximum": 1},
        "failures": {"type": ["integer", "null"], "minimum": 0},
        "frames": {"type": "integer", "minimum": 1},
    },
}
REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["schema", "config", "seed", "policy", "per_video", "aggregate", "curves"],
    "properties": {
        "schema": {"const": SCHEMA_ID},
        "config": {"type": "object"},
        "seed": {"type": ["integer", "null"]},
        "policy": {"enum": [OTB, VOT]},
        "per_video": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["video_id", "clean", "attacked"],
                "properties": {
                    "video_id": {"type": "integer"},
                    "clean": _CONDITION,
                    "attacked": {"oneOf": [_CONDITION, {"type": "null"}]},
                },
            },
        },
        "aggregate": {
            "type": "object",
            "required": ["clean", "attacked"],
            "properties": {
                "clean": _CONDITION,
                "attacked": {"oneOf": [_CONDITION, {"type": "null"}]},
                "relative_drop": {"type": ["object", "null"]},
            },
        },
        "curves": {"type": "object"},
    },
}

CSV_FIELDS = ("precision", "success_auc", "accuracy", "robustness", "eao")


@dataclass
class MetricsReport:
    """Metrics of one condition (clean or attacked) over a set of videos."""

    policy: str
    per_video: list  # dicts keyed by video_id + metric names
    aggregate: dict
    precision_curve: list
    success_curve: list
    config: dict = field(default_factory=dict)
    seed: Optional[int] = None

    def to_dict(self) -> dict:
        return {
            "policy": self.policy,
            "per_video": self.per_video,
            "aggregate": self.aggregate,
            "precision_curve": self.precision_curve,
            "success_curve": self.success_curve,
            "config": self.config,
            "seed": self.seed,
        }


def video_metrics(result) -> dict:
    row = {
        "video_id": int(result.video_id),
        "precision": 100.0 * M.precision(result),
        "success_auc": 100.0 * M.success_auc(result),
        "accuracy": None,
        "robustness": None,
        "eao": None,
        "failures": None,
        "frames": len(result.status),
    }
    if result.policy == VOT:
        vm = M.vot_metrics(result)
        row.update(accuracy=100.0 * vm.accuracy, robustness=vm.robustness, eao=vm.eao, failures=vm.failures)
    return row


def metrics_from_results(results, config=None, seed=None) -> MetricsReport:
    """Fold per-video results in input order into a :class:`MetricsReport`."""
    results = list(results)
    if not results:
        raise ValueError("no tracking results to summarise")
    policy = results[0].policy
    rows = [video_metrics(r) for r in results]
    agg = {
        "precision": float(np.mean([r["precision"] for r in rows])),
        "success_auc": float(np.mean([r["success_auc"] for r in rows])),
        "accuracy": None,
        "robustness": None,
        "eao": None,
        "failures": None,
        "frames": int(sum(r["frames"] for r in rows)),
    }
    if policy == VOT:
        fails = int(sum(r["failures"] for r in rows))
        runs = [run for r in results for run in M.vot_runs(r)]
        agg.update(
            accuracy=float(np.mean([r["accuracy"] for r in rows])),
            robustness=fails * M.ROBUSTNESS_UNIT / agg["frames"],
            eao=M.expected_overlap(runs),
            failures=fails,
        )
    pc = np.mean([M.precision_curve(r) for r in results], axis=0)
    sc = np.mean([M.success_curve(r) for r in results], axis=0)
    return MetricsReport(policy, rows, agg, [float(v) for v in pc], [float(v) for v in sc],
                         dict(config or {}), seed)


_eval_state: dict = {}


def _eval_init(model, delta, policy):
    _eval_state.update(
        model=model,
        delta=delta,
        policy=policy,
    )


def _eval_one(video):
    st = _eval_state
    return track_sequence(st["model"], video, st["delta"], st["policy"])


def track_all(model: TrackerModel, videos, perturbation=None, policy: str = OTB, workers: int = 1) -> list:
    videos = list(videos)
    delta = getattr(perturbation, "values", perturbation)
    if workers > 1 and len(videos) > 1:
        with ProcessPoolExecutor(
            max_workers=workers,
            initializer=_eval_init,
            initargs=(model, delta, policy),
        ) as pool:
            return list(pool.map(_eval_one, videos))
    return [track_sequence(model, v, delta, policy) for v in videos]


def evaluate(model: TrackerModel, videos, perturbation=None, policy: str = OTB, config=None,
             seed=None, workers: int = 1) -> MetricsReport:
    return metrics_from_results(track_all(model, videos, perturbation, policy, workers), config, seed)


# ------------------------------------------------------------------ rendering


def _condition(row: dict) -> dict:
    return {k: row[k] for k in ("precision", "success_auc", "accuracy", "robustness", "eao", "failures", "frames")}


def report_document(clean: MetricsReport, attacked: Optional[MetricsReport] = None) -> dict:
    if attacked is not None:
        ids_c = [r["video_id"] for r in clean.per_video]
        ids_a = [r["video_id"] for r in attacked.per_video]
        if ids_c != ids_a:
            raise ValueError("clean and attacked reports cover different videos")
    per_video = []
    for i, row in enumerate(clean.per_video):
        per_video.append(
            {
                "video_id": row["video_id"],
                "clean": _condition(row),
                "attacked": _condition(attacked.per_video[i]) if attacked else None,
            }
        )
    drop = None
    if attacked is not None:
        drop = {}
        for k in ("precision", "success_auc", "accuracy", "eao"):
            c, a = clean.aggregate[k], attacked.aggregate[k]
            drop[k] = None if c is None or a is None or c == 0 else (c - a) / c
    curves = {
        "precision_thresholds_px": [float(t) for t in M.PRECISION_THRESHOLDS],
        "success_thresholds_iou": [float(t) for t in M.SUCCESS_THRESHOLDS],
        "clean": {"precision": clean.precision_curve, "success": clean.success_curve},
        "attacked": {"precision": attacked.precision_curve, "success": attacked.success_curve}
        if attacked else None,
    }
    return {
        "schema": SCHEMA_ID,
        "config": copy.deepcopy(clean.config),
        "seed": clean.seed,
        "policy": clean.policy,
        "per_video": per_video,
        "aggregate": {
            "clean": _condition(clean.aggregate),
            "attacked": _condition(attacked.aggregate) if attacked else None,
            "relative_drop": drop,
        },
        "curves": curves,
    }


def report_csv(doc: dict) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    header = ["video_id"]
    for k in CSV_FIELDS:
        header += [f"clean_{k}", f"attacked_{k}"]
    writer.writerow(header)

    def fmt(v):
        return "" if v is None else repr(float(v))

    def line(label, clean, attacked):
        row = [label]
        for k in CSV_FIELDS:
            row += [fmt(clean[k]), fmt(attacked[k]) if attacked else ""]
        writer.writerow(row)

    for pv in doc["per_video"]:
        line(str(pv["video_id"]), pv["clean"], pv["attacked"])
    line("aggregate", doc["aggregate"]["clean"], doc["aggregate"]["attacked"])
    return buf.getvalue()


def _plot_curves(x, clean, attacked, xlabel, ylabel, title, path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    with matplotlib.rc_context({"svg.hashsalt": "eusa", "svg.fonttype": "none", "font.size": 9}):
        fig, ax = plt.subplots(figsize=(4.5, 3.4))
        ax.plot(x, clean, color="tab:blue", lw=1.6, label="clean")
        if attacked is not None:
            ax.plot(x, attacked, color="tab:red", lw=1.6, ls="--", label="attacked")
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        ax.set_title(title)
        ax.set_ylim(0, 1.02)
        ax.grid(alpha=0.3)
        ax.legend(loc="best", frameon=False)
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)


def emit_report(clean: MetricsReport, attacked: Optional[MetricsReport], path) -> dict:
    """Write report.json, report.csv, precision.svg and success.svg into directory ``path``.

    Inputs are not modified. Returns a mapping of file name to written path.
    """
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot write report to {out}: {exc}") from exc
    doc = report_document(clean, attacked)
    files = {
        "report.json": out / "report.json",
        "report.csv": out / "report.csv",
        "precision.svg": out / "precision.svg",
        "success.svg": out / "success.svg",
    }
    files["report.json"].write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    files["report.csv"].write_text(report_csv(doc))
    curves = doc["curves"]
    _plot_curves(
        curves["precision_thresholds_px"],
        curves["clean"]["precision"],
        curves["attacked"]["precision"] if curves["attacked"] else None,
        "location error threshold (px)", "precision", "Precision plot", files["precision.svg"],
    )
    _plot_curves(
        curves["success_thresholds_iou"],
        curves["clean"]["success"],
        curves["attacked"]["success"] if curves["attacked"] else None,
        "overlap threshold", "success rate", "Success plot", files["success.svg"],
    )
    return files
