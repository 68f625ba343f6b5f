"""Evaluation metrics, significance testing and the tabular report object."""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.spatial.distance import directed_hausdorff
from scipy.stats import rankdata

from .errors import ContractViolation

HD_UNDEFINED = math.inf
EXACT_N_MAX = 12


def _as_binary(mask, what: str) -> np.ndarray:
    arr = np.asarray(mask)
    if arr.dtype == bool:
        return arr
    uniq = np.unique(arr)
    if not np.isin(uniq, (0, 1)).all():
        raise ContractViolation(f"{what} must be binary, found values {uniq[:5]}")
    return arr.astype(bool)


def dsc(pred, gt) -> float:
    """Dice similarity coefficient 2|A&B| / (|A|+|B|); 1.0 when both are empty."""
    a = _as_binary(pred, "pred")
    b = _as_binary(gt, "gt")
    if a.shape != b.shape:
        raise ContractViolation(f"shape mismatch {a.shape} vs {b.shape}")
    sa = int(a.sum())
    sb = int(b.sum())
    if sa + sb == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / (sa + sb)


def hausdorff(pred, gt) -> float:
    """Exact symmetric Hausdorff distance in pixels over foreground coordinates.

    Euclidean, 100th percentile. An empty mask makes the distance undefined;
    the inf sentinel is returned so aggregation can exclude and count it.
    """
    a = _as_binary(pred, "pred")
    b = _as_binary(gt, "gt")
    if a.shape != b.shape:
        raise ContractViolation(f"shape mismatch {a.shape} vs {b.shape}")
    pa = np.argwhere(a).astype(np.float64)
    pb = np.argwhere(b).astype(np.float64)
    if len(pa) == 0 or len(pb) == 0:
        return HD_UNDEFINED
    fwd = directed_hausdorff(pa, pb)[0]
    bwd = directed_hausdorff(pb, pa)[0]
    return float(max(fwd, bwd))


def _exact_deviation_p(ranks: np.ndarray, w_obs: float) -> float:
    """Exact two-sided p over all sign assignments, via a subset-sum count.

    Ranks are midranks, so doubling them gives integers and the distribution
    of 2W is a polynomial product we can tabulate instead of enumerating all
    2^n sign vectors.
    """
    n = len(ranks)
    doubled = np.rint(2.0 * ranks).astype(np.int64)
    total = int(doubled.sum())
    counts = np.zeros(total + 1, dtype=np.float64)
    counts[0] = 1.0
    for r in doubled:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[: counts.size - r]
        counts = counts + shifted
    mu2 = total / 2.0
    obs_dev = abs(2.0 * w_obs - mu2)
    sums = np.arange(total + 1, dtype=np.float64)
    hits = counts[np.abs(sums - mu2) >= obs_dev - 1e-9].sum()
    return float(hits / 2.0 ** n)


def _approx_p(ranks: np.ndarray, w_obs: float) -> float:
    """Normal approximation with tie correction and continuity correction."""
    n = len(ranks)
    mu = n * (n + 1) / 4.0
    var = n * (n + 1) * (2 * n + 1) / 24.0
    _, tie_counts = np.unique(ranks, return_counts=True)
    var -= float((tie_counts ** 3 - tie_counts).sum()) / 48.0
    if var <= 0:
        return 1.0
    dev = abs(w_obs - mu)
    z = max(dev - 0.5, 0.0) / math.sqrt(var)
    return math.erfc(z / math.sqrt(2.0))


def wilcoxon_signed_rank(a, b, method: str = "auto") -> float:
    """Two-sided Wilcoxon signed-rank p-value for paired samples.

    Zero differences are removed and ties get midranks. ``auto`` enumerates the
    exact sign distribution up to n=12 and switches to the tie-corrected normal
    approximation beyond; all-zero differences give p=1 with a warning.
    """
    x = np.asarray(a, dtype=np.float64)
    y = np.asarray(b, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ContractViolation("paired samples must be equal-length 1-d sequences")
    if method not in ("auto", "exact", "approx"):
        raise ContractViolation(f"unknown method {method!r}")
    diff = x - y
    diff = diff[diff != 0]
    n = len(diff)
    if n == 0:
        warnings.warn("wilcoxon_signed_rank: all differences are zero, p=1", RuntimeWarning,
                      stacklevel=2)
        return 1.0
    ranks = rankdata(np.abs(diff))
    w_pos = float(ranks[diff > 0].sum())
    if method == "exact" or (method == "auto" and n <= EXACT_N_MAX):
        return _exact_deviation_p(ranks, w_pos)
    return _approx_p(ranks, w_pos)


@dataclass
class MetricRow:
    method: str
    rate: str
    image_id: str
    dsc: float
    hd: float


@dataclass
class MetricsReport:
    """Per-image metric rows plus derived aggregates and pairwise p-values."""

    rows: list[MetricRow] = field(default_factory=list)
    p_values: dict[str, float] = field(default_factory=dict)

    def methods(self) -> list[str]:
        seen = []
        for row in self.rows:
            if row.method not in seen:
                seen.append(row.method)
        return seen

    def aggregates(self) -> dict[str, dict[str, float]]:
        """Mean and population std of DSC and HD per method.

        Rows with the undefined-HD sentinel are excluded from the HD aggregate
        and counted under ``hd_excluded``.
        """
        out: dict[str, dict[str, float]] = {}
        for method in self.methods():
            d = np.array([r.dsc for r in self.rows if r.method == method])
            h = np.array([r.hd for r in self.rows if r.method == method])
            finite = h[np.isfinite(h)]
            out[method] = {
                "n": int(len(d)),
                "dsc_mean": float(d.mean()),
                "dsc_std": float(d.std()),
                "hd_mean": float(finite.mean()) if len(finite) else HD_UNDEFINED,
                "hd_std": float(finite.std()) if len(finite) else HD_UNDEFINED,
                "hd_excluded": int(len(h) - len(finite)),
            }
        return out

    def save_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["method", "rate", "image_id", "dsc", "hd"])
            for r in self.rows:
                writer.writerow([r.method, r.rate, r.image_id, repr(r.dsc), repr(r.hd)])

    @classmethod
    def load_csv(cls, path) -> "MetricsReport":
        report = cls()
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if header != ["method", "rate", "image_id", "dsc", "hd"]:
                raise ContractViolation(f"unexpected CSV header {header}")
            for method, rate, image_id, d, h in reader:
                report.rows.append(MetricRow(method, rate, image_id, float(d), float(h)))
        return report

    def save_summary(self, path) -> None:
        payload = {"aggregates": self.aggregates(), "p_values": self.p_values}
        Path(path).write_text(json.dumps(payload, indent=1))


def evaluate(predictors: dict[str, Callable], test_set, rate: str = "",
             threshold: float = 0.5) -> MetricsReport:
    """Score each method's soft predictions against ground truth on a test set.

    ``predictors`` maps method name to a function from image tensor to soft
    mask; outputs are thresholded at 0.5 before DSC/HD. Pairwise Wilcoxon
    p-values over per-image DSC are computed for every method pair (the
    MT-vs-Combined comparison is the one reported in the paper-style table).
    """
    report = MetricsReport()
    per_method: dict[str, list[float]] = {m: [] for m in predictors}
    for method, predict in predictors.items():
        for sample in test_set:
            if sample.mask is None:
                raise ContractViolation(f"test sample {sample.id} lacks a ground-truth mask")
            soft = predict(sample.image)
            pred = np.asarray(soft.detach().cpu().numpy() if hasattr(soft, "detach") else soft)
            binary = pred > threshold
            gt = sample.mask.numpy() > 0.5
            d = dsc(binary, gt)
            report.rows.append(MetricRow(method, rate, sample.id, d, hausdorff(binary, gt)))
            per_method[method].append(d)
    names = list(predictors)
    for i, m1 in enumerate(names):
        for m2 in names[i + 1:]:
            if len(per_method[m1]) == len(per_method[m2]) and per_method[m1]:
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore", RuntimeWarning)
                    p = wilcoxon_signed_rank(per_method[m1], per_method[m2])
                report.p_values[f"{m1}_vs_{m2}_dsc"] = p
    return report
