"""Depth-map metrics over capped, masked pixels, plus checkpoint evaluation.

All metrics are plain float64 numpy; nothing here touches the autodiff
graph. Aggregation over a split averages per-sample metrics with equal
weight per image, in manifest order.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .nets import ModelParams, batch_to_tensor, student_forward, teacher_forward
from .stereo import ConfigError, read_manifest, read_sample

DEFAULT_CAP = (1e-3, 80.0)

METRIC_COLUMNS = ("abs_rel", "sq_rel", "rmse", "rmse_log",
                  "delta1", "delta2", "delta3", "silog", "irmse")

CSV_HEADER = "id," + ",".join(METRIC_COLUMNS)


@dataclass(frozen=True)
class MetricsReport:
    abs_rel: float
    sq_rel: float
    rmse: float
    rmse_log: float
    delta1: float
    delta2: float
    delta3: float
    silog: float
    irmse: float
    n_valid: int
    cap: tuple

    def values(self) -> tuple:
        return tuple(getattr(self, c) for c in METRIC_COLUMNS)


def compute_metrics(pred: np.ndarray, gt: np.ndarray, mask=None,
                    cap: tuple = DEFAULT_CAP) -> MetricsReport:
    """Errors and threshold accuracies over valid pixels.

    Valid pixels are those inside the mask whose ground truth lies in
    [cap[0], cap[1]]; predictions are clamped to the cap first. The cap
    minimum must be positive so the log and inverse metrics stay finite.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ConfigError(f"pred {pred.shape} and gt {gt.shape} shapes differ")
    lo, hi = float(cap[0]), float(cap[1])
    if not (0.0 < lo < hi):
        raise ConfigError(f"cap must satisfy 0 < min < max, got {cap}")
    valid = (gt >= lo) & (gt <= hi)
    if mask is not None:
        mask = np.asarray(mask)
        if mask.shape != gt.shape:
            raise ConfigError(f"mask {mask.shape} and gt {gt.shape} shapes differ")
        valid &= mask.astype(bool)
    n = int(valid.sum())
    if n == 0:
        raise ConfigError("no valid pixels after masking and capping")

    p = np.clip(pred[valid], lo, hi)
    g = gt[valid]
    diff = p - g
    log_diff = np.log(p) - np.log(g)
    ratio = np.maximum(p / g, g / p)
    var = np.mean(log_diff ** 2) - np.mean(log_diff) ** 2
    return MetricsReport(
        abs_rel=float(np.mean(np.abs(diff) / g)),
        sq_rel=float(np.mean(diff ** 2 / g)),
        rmse=float(np.sqrt(np.mean(diff ** 2))),
        rmse_log=float(np.sqrt(np.mean(log_diff ** 2))),
        delta1=float(np.mean(ratio < 1.25)),
        delta2=float(np.mean(ratio < 1.25 ** 2)),
        delta3=float(np.mean(ratio < 1.25 ** 3)),
        # variance of log_diff can round to a tiny negative for constant ratios
        silog=float(100.0 * np.sqrt(max(var, 0.0))),
        irmse=float(np.sqrt(np.mean((1.0 / p - 1.0 / g) ** 2))),
        n_valid=n,
        cap=(lo, hi))


def mean_report(reports: list, cap: tuple) -> MetricsReport:
    """Equal-weight mean over per-image reports; counts are summed."""
    if not reports:
        raise ConfigError("cannot average an empty report list")
    cols = {c: float(np.mean([getattr(r, c) for r in reports])) for c in METRIC_COLUMNS}
    return MetricsReport(n_valid=sum(r.n_valid for r in reports), cap=cap, **cols)


def predict_depth(params: ModelParams, left: np.ndarray,
                  right: np.ndarray = None) -> tuple[np.ndarray, np.ndarray]:
    """Run one sample through a loaded network; returns (depth, log_var) maps."""
    if params.role == "teacher":
        if right is None:
            raise ConfigError("teacher inference needs both views")
        out = teacher_forward(batch_to_tensor([left]), batch_to_tensor([right]), params)
    elif params.role == "student":
        out = student_forward(batch_to_tensor([left]), params)
    else:
        raise ConfigError(f"cannot run inference with role {params.role!r}")
    return out.depth.data[0, 0], out.log_var.data[0, 0]


def _csv_row(sample_id: str, report: MetricsReport) -> str:
    return sample_id + "," + ",".join(format(v, ".12g") for v in report.values())


def evaluate_checkpoint(params: ModelParams, manifest, split: str = "test",
                        cap: tuple = DEFAULT_CAP, out_csv=None) -> MetricsReport:
    """Per-sample metrics over one split, averaged equally per image.

    Writes a CSV (one row per sample plus a final MEAN row) when out_csv is
    given. Missing sample files are all listed before aborting.
    """
    manifest = Path(manifest)
    records = [r for r in read_manifest(manifest) if r["split"] == split]
    if not records:
        raise ConfigError(f"manifest {manifest} has no {split!r} samples")
    root = manifest.parent
    missing = []
    for r in records:
        for key in ("left", "right", "depth"):
            if not (root / r[key]).exists():
                missing.append(str(root / r[key]))
    if missing:
        raise ConfigError("missing sample files: " + ", ".join(missing))

    params.freeze()
    rows = []
    reports = []
    for r in records:
        sample = read_sample(root / r["id"])
        pred, _ = predict_depth(params, sample.left, sample.right)
        report = compute_metrics(pred, sample.depth_gt, None, cap)
        reports.append(report)
        rows.append(_csv_row(r["id"], report))
    summary = mean_report(reports, cap)
    rows.append(_csv_row("MEAN", summary))
    if out_csv is not None:
        out_csv = Path(out_csv)
        if out_csv.parent != Path("."):
            out_csv.parent.mkdir(parents=True, exist_ok=True)
        out_csv.write_text(CSV_HEADER + "\n" + "\n".join(rows) + "\n")
    return summary
