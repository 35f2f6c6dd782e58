"""Camera geometry: pinhole projection, rigid poses, two-view estimation.

Poses are world-to-camera maps, x_cam = R @ x_world + t.  The relative pose
between views a and b is the map taking a-frame camera coordinates into the
b frame.  Essential-matrix estimation uses the normalized 8-point algorithm
inside a plain RANSAC loop with a seeded generator; homographies use the
4-point DLT with Hartley normalization.  Translation directions recovered
from an essential matrix are unit vectors, so translation error is angular.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class EstimationFailed(RuntimeError):
    """Raised when a model cannot be estimated from the given matches."""


class DegenerateGeometry(EstimationFailed):
    """Raised when the correspondences do not pin down a unique model,
    e.g. pure rotation or a coplanar scene for the essential matrix."""


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")

    @property
    def matrix(self):
        return np.array([[self.fx, 0.0, self.cx],
                         [0.0, self.fy, self.cy],
                         [0.0, 0.0, 1.0]])


@dataclass
class RigidPose:
    """World-to-camera rigid transform."""

    rotation: np.ndarray  # (3, 3)
    translation: np.ndarray  # (3,)

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        err = np.abs(self.rotation @ self.rotation.T - np.eye(3)).max()
        if err > 1e-9 or np.linalg.det(self.rotation) < 0:
            raise ValueError("rotation must be orthonormal with determinant +1")

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    def inverse(self):
        return RigidPose(self.rotation.T, -self.rotation.T @ self.translation)

    def apply(self, points):
        """Map world points (3,) or (N,3) into the camera frame."""
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation.T + self.translation

    def matrix(self):
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m


def relative_pose(pose_a: RigidPose, pose_b: RigidPose) -> RigidPose:
    """The rigid map from a-frame camera coordinates to the b frame."""
    r = pose_b.rotation @ pose_a.rotation.T
    t = pose_b.translation - r @ pose_a.translation
    return RigidPose(r, t)


def quat_to_rotmat(q):
    """Unit quaternion (qx, qy, qz, qw), scalar last, to a rotation matrix."""
    x, y, z, w = np.asarray(q, dtype=np.float64)
    n = np.sqrt(x * x + y * y + z * z + w * w)
    if n < 1e-12:
        raise ValueError("zero quaternion")
    x, y, z, w = x / n, y / n, z / n, w / n
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def rotmat_to_quat(r):
    """Rotation matrix to unit quaternion (qx, qy, qz, qw), qw >= 0."""
    r = np.asarray(r, dtype=np.float64)
    tr = np.trace(r)
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2
        w = 0.25 * s
        x = (r[2, 1] - r[1, 2]) / s
        y = (r[0, 2] - r[2, 0]) / s
        z = (r[1, 0] - r[0, 1]) / s
    else:
        i = int(np.argmax(np.diag(r)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = np.sqrt(max(r[i, i] - r[j, j] - r[k, k] + 1.0, 0.0)) * 2
        vals = np.empty(3)
        vals[i] = 0.25 * s
        vals[j] = (r[j, i] + r[i, j]) / s
        vals[k] = (r[k, i] + r[i, k]) / s
        w = (r[k, j] - r[j, k]) / s
        x, y, z = vals
    q = np.array([x, y, z, w])
    if q[3] < 0:
        q = -q
    return q / np.linalg.norm(q)


def rotation_about(axis, degrees):
    """Rotation matrix about a unit axis by an angle in degrees."""
    a = np.asarray(axis, dtype=np.float64)
    a = a / np.linalg.norm(a)
    th = np.radians(degrees)
    k = skew(a)
    return np.eye(3) + np.sin(th) * k + (1 - np.cos(th)) * (k @ k)


def skew(v):
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def essential_from_pose(pose: RigidPose) -> np.ndarray:
    """E = [t]x R for the relative pose taking view-1 frame to view-2."""
    return skew(pose.translation) @ pose.rotation


# -- projection ---------------------------------------------------------

def project(point, intr: CameraIntrinsics):
    """Project one camera-frame 3-D point to pixels; z must be positive."""
    p = np.asarray(point, dtype=np.float64).reshape(3)
    if p[2] <= 0:
        raise ValueError(f"cannot project point with depth {p[2]}")
    return np.array([intr.fx * p[0] / p[2] + intr.cx,
                     intr.fy * p[1] / p[2] + intr.cy])


def unproject(pixel, depth, intr: CameraIntrinsics):
    """Lift a pixel at a given positive depth to camera-frame 3-D."""
    if depth <= 0:
        raise ValueError(f"depth must be positive, got {depth}")
    u, v = np.asarray(pixel, dtype=np.float64).reshape(2)
    return np.array([(u - intr.cx) / intr.fx * depth,
                     (v - intr.cy) / intr.fy * depth,
                     depth])


def reproject(pixel, depth, intr_src: CameraIntrinsics, intr_dst: CameraIntrinsics,
              rel: RigidPose):
    """Carry a pixel with known depth into another view.

    Returns (pixel, valid); valid is False when the point lands behind the
    destination camera, in which case the pixel is NaN.
    """
    p = rel.apply(unproject(pixel, depth, intr_src))
    if p[2] <= 0:
        return np.full(2, np.nan), False
    return project(p, intr_dst), True


def project_many(points, intr: CameraIntrinsics):
    """Vectorized projection: (N,3) -> ((N,2) pixels, (N,) validity)."""
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    valid = p[:, 2] > 0
    z = np.where(valid, p[:, 2], 1.0)
    px = np.stack([intr.fx * p[:, 0] / z + intr.cx,
                   intr.fy * p[:, 1] / z + intr.cy], axis=1)
    px[~valid] = np.nan
    return px, valid


def unproject_many(pixels, depths, intr: CameraIntrinsics):
    px = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    d = np.asarray(depths, dtype=np.float64).reshape(-1)
    return np.stack([(px[:, 0] - intr.cx) / intr.fx * d,
                     (px[:, 1] - intr.cy) / intr.fy * d,
                     d], axis=1)


def reproject_many(pixels, depths, intr_src, intr_dst, rel: RigidPose):
    pts = rel.apply(unproject_many(pixels, depths, intr_src))
    px, valid = project_many(pts, intr_dst)
    d = np.asarray(depths, dtype=np.float64).reshape(-1)
    valid &= d > 0
    return px, valid


# -- two-view estimation ------------------------------------------------

@dataclass
class PoseEstimate:
    """Relative pose recovered from matches, plus the RANSAC support."""

    rotation: np.ndarray
    translation: np.ndarray  # unit direction
    inlier_mask: np.ndarray
    inlier_ratio: float
    iterations: int = field(default=0, compare=False)


def _normalized_coords(pts, intr):
    p = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
    return np.stack([(p[:, 0] - intr.cx) / intr.fx,
                     (p[:, 1] - intr.cy) / intr.fy,
                     np.ones(len(p))], axis=1)


def _eight_point(x1, x2):
    # x2^T E x1 = 0 solved on Hartley-conditioned coordinates; even in
    # camera-normalized units the constant column dominates the Kronecker
    # system, and the raw least-squares fit is visibly biased already at
    # sub-pixel noise
    t1 = _hartley_normalization(x1[:, :2])
    t2 = _hartley_normalization(x2[:, :2])
    t1 = np.eye(3) if t1 is None else t1
    t2 = np.eye(3) if t2 is None else t2
    n1 = x1 @ t1.T
    n2 = x2 @ t2.T
    a = np.stack([
        n2[:, 0] * n1[:, 0], n2[:, 0] * n1[:, 1], n2[:, 0],
        n2[:, 1] * n1[:, 0], n2[:, 1] * n1[:, 1], n2[:, 1],
        n1[:, 0], n1[:, 1], np.ones(len(n1)),
    ], axis=1)
    _, s, vt = np.linalg.svd(a)
    # denormalize before projecting: the equal-singular-value structure of
    # an essential matrix only holds in the calibrated frame
    e = t2.T @ vt[-1].reshape(3, 3) @ t1
    u, sv, vt2 = np.linalg.svd(e)
    m = (sv[0] + sv[1]) / 2.0
    e = u @ np.diag([m, m, 0.0]) @ vt2
    return e / np.linalg.norm(e), s


def _sampson_sq(e, x1, x2):
    ex1 = x1 @ e.T
    etx2 = x2 @ e
    num = np.einsum("ij,ij->i", x2, ex1) ** 2
    den = ex1[:, 0] ** 2 + ex1[:, 1] ** 2 + etx2[:, 0] ** 2 + etx2[:, 1] ** 2
    den = np.maximum(den, 1e-18)
    return num / den


def _triangulate(r, t, x1, x2, cap=50):
    """Linear triangulation; returns per-point depths in both views."""
    n = min(len(x1), cap)
    p2 = np.hstack([r, t.reshape(3, 1)])
    d1 = np.empty(n)
    d2 = np.empty(n)
    for i in range(n):
        a = np.stack([
            x1[i, 0] * np.array([0, 0, 1, 0.0]) - np.array([1, 0, 0, 0.0]),
            x1[i, 1] * np.array([0, 0, 1, 0.0]) - np.array([0, 1, 0, 0.0]),
            x2[i, 0] * p2[2] - p2[0],
            x2[i, 1] * p2[2] - p2[1],
        ])
        _, _, vt = np.linalg.svd(a)
        xh = vt[-1]
        if abs(xh[3]) < 1e-12:
            d1[i] = d2[i] = -1.0
            continue
        pw = xh[:3] / xh[3]
        d1[i] = pw[2]
        d2[i] = (r @ pw + t)[2]
    return d1, d2


def _ransac_iters_needed(inlier_ratio, sample_size, confidence):
    w = min(max(inlier_ratio, 1e-9), 1.0 - 1e-12)
    denom = np.log1p(-(w ** sample_size))
    if denom >= 0:
        return 1
    return int(np.ceil(np.log(1.0 - confidence) / denom))


def estimate_essential_ransac(pts1, pts2, intr1: CameraIntrinsics,
                              intr2: CameraIntrinsics, threshold_px: float = 1.0,
                              max_iters: int = 2000, seed: int = 0,
                              confidence: float = 0.999) -> PoseEstimate:
    """Recover the relative pose (view 1 to view 2) from pixel matches.

    Normalized 8-point algorithm inside a uniform-sampling RANSAC loop.
    The inlier test is the Sampson distance in focal-normalized coordinates
    against threshold_px / f_avg, f_avg the mean of the four focal lengths.
    The final model is refit on the best inlier set, checked for a unique
    null space (a near-rank-deficient system means pure rotation or a
    coplanar scene and raises DegenerateGeometry), and decomposed with the
    cheirality check.  Deterministic for a fixed seed.
    """
    pts1 = np.asarray(pts1, dtype=np.float64).reshape(-1, 2)
    pts2 = np.asarray(pts2, dtype=np.float64).reshape(-1, 2)
    n = len(pts1)
    if len(pts2) != n:
        raise ValueError("match arrays must have equal length")
    if n < 8:
        raise EstimationFailed(f"need at least 8 matches, got {n}")
    x1 = _normalized_coords(pts1, intr1)
    x2 = _normalized_coords(pts2, intr2)
    f_avg = (intr1.fx + intr1.fy + intr2.fx + intr2.fy) / 4.0
    thr_sq = (threshold_px / f_avg) ** 2

    rng = np.random.default_rng(seed)
    best_mask = None
    best_count = 0
    needed = max_iters
    it = 0
    while it < min(needed, max_iters):
        it += 1
        sel = rng.choice(n, size=8, replace=False)
        e, _ = _eight_point(x1[sel], x2[sel])
        mask = _sampson_sq(e, x1, x2) <= thr_sq
        count = int(mask.sum())
        if count > best_count:
            best_count = count
            best_mask = mask
            needed = _ransac_iters_needed(count / n, 8, confidence)
    if best_mask is None or best_count < 8:
        raise EstimationFailed(f"no model with 8 inliers after {it} iterations")

    e, sv = _eight_point(x1[best_mask], x2[best_mask])
    # a unique solution needs the 8th singular value well above noise level;
    # identity motion or a flat scene leaves a multi-dimensional null space
    if sv[7] / sv[0] < 1e-8:
        raise DegenerateGeometry(
            "the matches do not determine a unique epipolar geometry")
    final_mask = _sampson_sq(e, x1, x2) <= thr_sq
    if int(final_mask.sum()) < 8:
        final_mask = best_mask

    u, _, vt = np.linalg.svd(e)
    if np.linalg.det(u) < 0:
        u = -u
    if np.linalg.det(vt) < 0:
        vt = -vt
    w = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    t = u[:, 2]
    best_pose = None
    best_good = -1
    xi1 = x1[final_mask]
    xi2 = x2[final_mask]
    for r_cand in (u @ w @ vt, u @ w.T @ vt):
        for t_cand in (t, -t):
            d1, d2 = _triangulate(r_cand, t_cand, xi1, xi2)
            good = int(((d1 > 0) & (d2 > 0)).sum())
            if good > best_good:
                best_good = good
                best_pose = (r_cand, t_cand)
    if best_good <= 0:
        raise EstimationFailed("cheirality check rejected every decomposition")
    r, t = best_pose
    t = t / np.linalg.norm(t)
    return PoseEstimate(r, t, final_mask, float(final_mask.mean()), iterations=it)


def _hartley_normalization(pts):
    c = pts.mean(axis=0)
    d = np.sqrt(((pts - c) ** 2).sum(axis=1)).mean()
    if d < 1e-12:
        return None
    s = np.sqrt(2.0) / d
    t = np.array([[s, 0.0, -s * c[0]], [0.0, s, -s * c[1]], [0.0, 0.0, 1.0]])
    return t


def _dlt_homography(x1, x2):
    n = len(x1)
    a = np.zeros((2 * n, 9))
    a[0::2, 0:2] = x1[:, :2]
    a[0::2, 2] = 1.0
    a[0::2, 6:8] = -x2[:, 0:1] * x1[:, :2]
    a[0::2, 8] = -x2[:, 0]
    a[1::2, 3:5] = x1[:, :2]
    a[1::2, 5] = 1.0
    a[1::2, 6:8] = -x2[:, 1:2] * x1[:, :2]
    a[1::2, 8] = -x2[:, 1]
    _, s, vt = np.linalg.svd(a)
    return vt[-1].reshape(3, 3), s


def _homography_transfer(h, pts):
    q = pts @ h[:, :2].T + h[:, 2]
    w = q[:, 2]
    bad = np.abs(w) < 1e-12
    w = np.where(bad, 1.0, w)
    out = q[:, :2] / w[:, None]
    out[bad] = np.inf
    return out


def estimate_homography_ransac(pts1, pts2, threshold_px: float = 1.0,
                               max_iters: int = 2000, seed: int = 0,
                               confidence: float = 0.999):
    """Fit a homography to pixel matches; returns (H, inlier_mask).

    4-point DLT with Hartley normalization inside RANSAC; the inlier test
    is the forward transfer distance.  The final model is refit on the
    inliers and scaled so H[2,2] = 1.  Collinear samples are skipped; if no
    valid model is found EstimationFailed is raised.
    """
    pts1 = np.asarray(pts1, dtype=np.float64).reshape(-1, 2)
    pts2 = np.asarray(pts2, dtype=np.float64).reshape(-1, 2)
    n = len(pts1)
    if len(pts2) != n:
        raise ValueError("match arrays must have equal length")
    if n < 4:
        raise EstimationFailed(f"need at least 4 matches, got {n}")

    def fit(idx):
        p1, p2 = pts1[idx], pts2[idx]
        t1 = _hartley_normalization(p1)
        t2 = _hartley_normalization(p2)
        if t1 is None or t2 is None:
            return None
        x1 = np.hstack([p1, np.ones((len(p1), 1))]) @ t1.T
        x2 = np.hstack([p2, np.ones((len(p2), 1))]) @ t2.T
        h_hat, s = _dlt_homography(x1, x2)
        if s[7] / s[0] < 1e-9:
            return None  # collinear or otherwise degenerate sample
        return np.linalg.inv(t2) @ h_hat @ t1

    rng = np.random.default_rng(seed)
    best_mask = None
    best_count = 0
    needed = max_iters
    it = 0
    thr_sq = threshold_px ** 2
    while it < min(needed, max_iters):
        it += 1
        sel = rng.choice(n, size=4, replace=False)
        h = fit(sel)
        if h is None:
            continue
        err = ((_homography_transfer(h, pts1) - pts2) ** 2).sum(axis=1)
        mask = err <= thr_sq
        count = int(mask.sum())
        if count > best_count:
            best_count = count
            best_mask = mask
            needed = _ransac_iters_needed(count / n, 4, confidence)
    if best_mask is None or best_count < 4:
        raise EstimationFailed(f"no homography with 4 inliers after {it} iterations")
    h = fit(np.flatnonzero(best_mask))
    if h is None:
        raise DegenerateGeometry("inlier set does not determine a homography")
    if abs(h[2, 2]) < 1e-12:
        raise EstimationFailed("homography is not normalizable (H[2,2] ~ 0)")
    h = h / h[2, 2]
    err = ((_homography_transfer(h, pts1) - pts2) ** 2).sum(axis=1)
    return h, err <= thr_sq


def pose_angular_errors(estimate, gt: RigidPose):
    """Angular rotation and translation errors in degrees.

    ``estimate`` is a PoseEstimate or a plain (R, t) pair.  The rotation
    error is the geodesic angle between estimate and ground truth.  The
    translation error compares directions only and absorbs the sign (an
    essential matrix cannot tell t from -t), so it lies in [0, 90].  Either
    translation having (near-)zero norm is an error: the direction is
    undefined then.
    """
    if isinstance(estimate, PoseEstimate):
        rotation, translation = estimate.rotation, estimate.translation
    else:
        rotation, translation = estimate
    r = np.asarray(rotation, dtype=np.float64)
    cos_r = (np.trace(r.T @ gt.rotation) - 1.0) / 2.0
    r_err = np.degrees(np.arccos(np.clip(cos_r, -1.0, 1.0)))
    t = np.asarray(translation, dtype=np.float64).reshape(3)
    tn = np.linalg.norm(t)
    gn = np.linalg.norm(gt.translation)
    if tn < 1e-12 or gn < 1e-12:
        raise ValueError("translation direction undefined for a zero-norm baseline")
    cos_t = abs(float(t @ gt.translation) / (tn * gn))
    t_err = np.degrees(np.arccos(np.clip(cos_t, 0.0, 1.0)))
    return float(r_err), float(t_err)


def corner_error(h_est, h_gt, width, height):
    """Mean distance between the warps of the four image corners.

    Both homographies must be invertible.  A corner that lands on the line
    at infinity (vanishing w) makes the error infinite rather than raising,
    so estimation failures can be aggregated as +inf entries.
    """
    h_est = np.asarray(h_est, dtype=np.float64)
    h_gt = np.asarray(h_gt, dtype=np.float64)
    for name, h in (("estimated", h_est), ("ground-truth", h_gt)):
        hn = h / np.linalg.norm(h)
        if abs(np.linalg.det(hn)) < 1e-12:
            raise ValueError(f"{name} homography is not invertible")
    corners = np.array([[0.0, 0.0], [width - 1.0, 0.0],
                        [width - 1.0, height - 1.0], [0.0, height - 1.0]])
    pa = _homography_transfer(h_est, corners)
    pb = _homography_transfer(h_gt, corners)
    if not (np.isfinite(pa).all() and np.isfinite(pb).all()):
        return float("inf")
    return float(np.sqrt(((pa - pb) ** 2).sum(axis=1)).mean())
