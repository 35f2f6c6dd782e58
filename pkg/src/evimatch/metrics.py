"""Evaluation metrics for cross-modal detection, matching and estimation.

The keypoint metrics (repeatability, descriptor distances, matching
accuracy) are defined through homography-warped correspondences between
the two views.  The estimation metrics aggregate per-pair errors into a
threshold ratio and the area under the truncated recall curve; failed
estimations enter as +inf so a crash-free evaluation can still report
every pair.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .extractor import KeypointSet


def _positions(kp):
    if isinstance(kp, KeypointSet):
        return np.asarray(kp.positions, dtype=np.float64)
    return np.asarray(kp, dtype=np.float64).reshape(-1, 2)


def _descriptors(kp):
    if isinstance(kp, KeypointSet):
        return np.asarray(kp.descriptors, dtype=np.float64)
    return np.asarray(kp, dtype=np.float64)


def warp_points(points, h):
    """Apply a homography to (N, 2) points: returns (warped, valid).

    Points mapped to the line at infinity (|w| < 1e-12) are invalid and
    come back NaN.
    """
    p = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    h = np.asarray(h, dtype=np.float64)
    q = np.concatenate([p, np.ones((len(p), 1))], axis=1) @ h.T
    w = q[:, 2]
    valid = np.abs(w) >= 1e-12
    out = np.full((len(p), 2), np.nan)
    out[valid] = q[valid, :2] / w[valid, None]
    return out, valid


@dataclass
class ValidPairSet:
    """Mutually nearest keypoint pairs within the pixel tolerance."""

    pairs: np.ndarray  # (V, 2) int64: (index_a, index_b)
    distances: np.ndarray  # (V,) warped pixel distances

    def __post_init__(self):
        self.pairs = np.asarray(self.pairs, dtype=np.int64).reshape(-1, 2)
        self.distances = np.asarray(self.distances, dtype=np.float64).reshape(-1)

    def __len__(self):
        return len(self.pairs)


def valid_pairs(kp_a, kp_b, h_ab, eps: float = 3.0) -> ValidPairSet:
    """Ground-truth correspondences under a homography.

    Keypoints of the first set are warped by h_ab into the second view; a
    pair is valid iff the two are mutual nearest neighbors there and at
    most eps pixels apart.
    """
    if eps < 0:
        raise ValueError("eps must be non-negative")
    pa = _positions(kp_a)
    pb = _positions(kp_b)
    if len(pa) == 0 or len(pb) == 0:
        return ValidPairSet(np.zeros((0, 2), np.int64), np.zeros(0))
    wa, ok = warp_points(pa, h_ab)
    d = np.sqrt(((wa[:, None, :] - pb[None, :, :]) ** 2).sum(axis=2))
    d[~ok, :] = np.inf
    best_j = np.argmin(d, axis=1)
    best_i = np.argmin(d, axis=0)
    rows = np.arange(len(pa))
    keep = (best_i[best_j] == rows) & (d[rows, best_j] <= eps)
    pairs = np.stack([rows[keep], best_j[keep]], axis=1)
    return ValidPairSet(pairs, d[rows, best_j][keep])


def repeatability(kp_a, kp_b, h_ab, eps: float = 3.0) -> float:
    """Fraction of keypoints that have a valid partner in the other view."""
    na, nb = len(_positions(kp_a)), len(_positions(kp_b))
    if na + nb == 0:
        raise ValueError("repeatability is undefined with no keypoints at all")
    v = valid_pairs(kp_a, kp_b, h_ab, eps)
    return 2.0 * len(v) / (na + nb)


def vdd_vda(pairs: ValidPairSet, kp_a, kp_b):
    """Descriptor distance (L2) and angle (degrees) over valid pairs.

    Both are means over the pair set; with no valid pairs the statistics
    do not exist and asking for them is an error, not a zero.
    """
    if len(pairs) == 0:
        raise ValueError("descriptor distances are undefined without valid pairs")
    da = _descriptors(kp_a)[pairs.pairs[:, 0]]
    db = _descriptors(kp_b)[pairs.pairs[:, 1]]
    vdd = float(np.sqrt(((da - db) ** 2).sum(axis=1)).mean())
    dots = np.clip((da * db).sum(axis=1), -1.0, 1.0)
    vda = float(np.degrees(np.arccos(dots)).mean())
    return vdd, vda


def mma_mr(assignment, kp_a, kp_b, h_ab, eps: float = 3.0):
    """Mean matching accuracy and matching ratio of a hard assignment.

    MMA is the fraction of matches whose warped distance is at most eps;
    with zero matches it is absent (None), never a fake zero.  MR is the
    match count over min(|A|, |B|), and 0 when either set is empty.
    """
    matches = np.asarray(getattr(assignment, "matches", assignment),
                         dtype=np.int64).reshape(-1, 2)
    pa, pb = _positions(kp_a), _positions(kp_b)
    denom = min(len(pa), len(pb))
    mr = float(len(matches)) / denom if denom > 0 else 0.0
    if len(matches) == 0:
        return None, mr
    wa, ok = warp_points(pa[matches[:, 0]], h_ab)
    d = np.sqrt(((wa - pb[matches[:, 1]]) ** 2).sum(axis=1))
    correct = ok & (d <= eps)
    return float(correct.mean()), mr


# -- error aggregation ----------------------------------------------------

def rpe_ratio(errors, threshold: float) -> float:
    """Fraction of pairs whose error is within the threshold.

    Non-finite errors (failed estimations) count in the denominator only.
    """
    e = np.asarray(errors, dtype=np.float64).reshape(-1)
    if len(e) == 0:
        raise ValueError("no errors to aggregate")
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    return float((np.isfinite(e) & (e <= threshold)).sum() / len(e))


def rpe_auc(errors, threshold: float) -> float:
    """Area under the truncated recall curve, normalized to [0, 1].

    The recall curve steps through the sorted finite errors with recall
    (i+1)/N against the full pair count N; the curve is truncated at the
    threshold (holding the last recall) and integrated by the trapezoid
    rule, then divided by the threshold.  All errors non-finite is an
    error: there is no curve to integrate.
    """
    e = np.asarray(errors, dtype=np.float64).reshape(-1)
    if len(e) == 0:
        raise ValueError("no errors to aggregate")
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    finite = np.sort(e[np.isfinite(e)])
    if len(finite) == 0:
        raise ValueError("all errors are non-finite; recall curve is empty")
    recall = np.arange(1, len(finite) + 1, dtype=np.float64) / len(e)
    cut = int(np.searchsorted(finite, threshold, side="left"))
    xs = np.concatenate([[0.0], finite[:cut], [threshold]])
    ys = np.concatenate([[0.0], recall[:cut], [recall[cut - 1] if cut else 0.0]])
    return float(np.trapezoid(ys, xs) / threshold)


def he_metrics(h_estimates, h_gts, thresholds, width: int, height: int):
    """Corner-error aggregation for a list of homography estimates.

    Failed estimations are passed as None and become +inf corner errors.
    Returns (errors, entries) where entries are ("he_ratio"/"he_auc",
    threshold, value) rows ready for a report.
    """
    from .geometry import corner_error

    if len(h_estimates) != len(h_gts):
        raise ValueError("estimate and ground-truth lists must align")
    errors = []
    for h_est, h_gt in zip(h_estimates, h_gts):
        if h_est is None:
            errors.append(np.inf)
            continue
        try:
            errors.append(corner_error(h_est, h_gt, width, height))
        except ValueError:
            errors.append(np.inf)
    errors = np.asarray(errors, dtype=np.float64)
    entries = []
    for t in thresholds:
        entries.append(("he_ratio", float(t), rpe_ratio(errors, t)))
        entries.append(("he_auc", float(t), rpe_auc(errors, t)))
    return errors, entries


# -- reports ----------------------------------------------------------------

def _fmt(value):
    v = float(value)
    if np.isnan(v):
        return "nan"
    if np.isinf(v):
        return "inf" if v > 0 else "-inf"
    return f"{v:.6f}"


def report_text(entries) -> str:
    """key=value report; thresholded metrics render as name@threshold."""
    lines = []
    for metric, threshold, value in entries:
        key = metric if threshold is None else f"{metric}@{threshold:g}"
        lines.append(f"{key}={_fmt(value)}")
    return "\n".join(lines) + "\n"


def report_csv(entries) -> str:
    """CSV report with one metric,threshold,value row per entry."""
    lines = ["metric,threshold,value"]
    for metric, threshold, value in entries:
        thr = "" if threshold is None else f"{threshold:g}"
        lines.append(f"{metric},{thr},{_fmt(value)}")
    return "\n".join(lines) + "\n"
