"""Cross-modal keypoint matching: dual-softmax MNN and a learned matcher.

Two matchers share the Assignment interface.  mnn_match scores descriptor
pairs with a symmetric dual softmax and keeps strict mutual argmaxes; it
has no parameters.  The context-aware matcher refines both descriptor sets
jointly with a small pre-LN transformer (shared self-attention unit, shared
bidirectional cross-attention unit per layer), predicts a per-keypoint
matchability, and extracts matches from the matchability-weighted dual
softmax.  Ground-truth assignments for training come from reprojecting
keypoints across views with rendered depth.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .extractor import KeypointSet, bilinear_sample_np
from .geometry import CameraIntrinsics, RigidPose, relative_pose, reproject_many
from .optim import Adam, load_checkpoint, save_checkpoint

_CONFIG_PREFIX = "__config__."


@dataclass
class Assignment:
    """Matches between two keypoint sets: rows of (index_a, index_b).

    The match list is a partial bijection (each index appears at most
    once per side); scores are the soft assignment values in [0, 1].
    """

    matches: np.ndarray  # (M, 2) int64
    scores: np.ndarray  # (M,) float64

    def __post_init__(self):
        self.matches = np.asarray(self.matches, dtype=np.int64).reshape(-1, 2)
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        if len(self.matches) != len(self.scores):
            raise ValueError("matches and scores must align")

    def __len__(self):
        return len(self.matches)

    @classmethod
    def empty(cls):
        return cls(np.zeros((0, 2), np.int64), np.zeros(0))

    def transposed(self):
        return Assignment(self.matches[:, ::-1], self.scores)


@dataclass
class GroundTruthMatches:
    """Reprojection-verified positives plus the provably unmatched indices.

    Every keypoint index of either set appears exactly once: in a match
    row or in the corresponding unmatched list.
    """

    matches: np.ndarray  # (M, 2) int64
    unmatched_a: np.ndarray  # (A,) int64
    unmatched_b: np.ndarray  # (B,) int64

    def __post_init__(self):
        self.matches = np.asarray(self.matches, dtype=np.int64).reshape(-1, 2)
        self.unmatched_a = np.asarray(self.unmatched_a, dtype=np.int64).reshape(-1)
        self.unmatched_b = np.asarray(self.unmatched_b, dtype=np.int64).reshape(-1)


def _descriptor_matrix(kp):
    if isinstance(kp, KeypointSet):
        return np.asarray(kp.descriptors, dtype=np.float64)
    return np.asarray(kp, dtype=np.float64)


def _positions(kp):
    if isinstance(kp, KeypointSet):
        return np.asarray(kp.positions, dtype=np.float64)
    return np.asarray(kp, dtype=np.float64)


def _log_softmax(s, axis):
    z = s - s.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def _mutual_argmax(p):
    """Strict mutual argmax pairs of a score matrix, first occurrence on ties."""
    if p.shape[0] == 0 or p.shape[1] == 0:
        return np.zeros((0, 2), np.int64)
    best_j = np.argmax(p, axis=1)
    best_i = np.argmax(p, axis=0)
    rows = np.arange(p.shape[0])
    keep = best_i[best_j] == rows
    return np.stack([rows[keep], best_j[keep]], axis=1).astype(np.int64)


def mnn_match(kp_a, kp_b) -> Assignment:
    """Dual-softmax mutual-nearest-neighbor matching.

    Scores are S = D_a D_b^T; the soft assignment is
    exp(log_softmax_rows(S) + log_softmax_cols(S)), and matches are the
    strict mutual argmaxes of that matrix.  Swapping the inputs transposes
    the result exactly.
    """
    da = _descriptor_matrix(kp_a)
    db = _descriptor_matrix(kp_b)
    if len(da) == 0 or len(db) == 0:
        return Assignment.empty()
    s = da @ db.T
    log_p = _log_softmax(s, axis=1) + _log_softmax(s, axis=0)
    pairs = _mutual_argmax(log_p)
    scores = np.exp(log_p[pairs[:, 0], pairs[:, 1]]) if len(pairs) else np.zeros(0)
    return Assignment(pairs, scores)


# -- context-aware matcher ----------------------------------------------

@dataclass(frozen=True)
class CAConfig:
    """Architecture of the context-aware matcher."""

    desc_dim: int = 128
    dim: int = 128
    layers: int = 2
    heads: int = 4
    pe_freqs: int = 4
    ffn_mult: int = 2
    image_size: tuple = (64, 64)  # (width, height) for coordinate normalization

    def __post_init__(self):
        if self.dim % self.heads != 0:
            raise ValueError("dim must be divisible by heads")
        if self.pe_freqs < 1:
            raise ValueError("pe_freqs must be at least 1")
        if self.layers < 0:
            raise ValueError("layers must be non-negative")


@dataclass
class CAMatcherParams:
    """Config plus the flat name -> Tensor parameter dict."""

    config: CAConfig
    params: dict

    @classmethod
    def create(cls, config: CAConfig = CAConfig(), seed: int = 0,
               dtype=np.float32):
        rng = np.random.default_rng(seed)
        d = config.dim
        p = {}

        def linear(name, n_in, n_out):
            p[name + ".w"] = Tensor(rng.normal(0.0, 1.0 / math.sqrt(n_in),
                                               (n_in, n_out)).astype(dtype),
                                    requires_grad=True)
            p[name + ".b"] = Tensor(np.zeros(n_out, dtype), requires_grad=True)

        def ln(name):
            p[name + ".g"] = Tensor(np.ones(d, dtype), requires_grad=True)
            p[name + ".b"] = Tensor(np.zeros(d, dtype), requires_grad=True)

        linear("in_proj", config.desc_dim, d)
        linear("pe_proj", 4 * config.pe_freqs, d)
        for layer in range(config.layers):
            for unit in ("self", "cross"):
                base = f"layers.{layer}.{unit}"
                ln(base + ".ln1")
                for proj in ("wq", "wk", "wv", "wo"):
                    linear(f"{base}.{proj}", d, d)
                ln(base + ".ln2")
                linear(base + ".ffn1", d, config.ffn_mult * d)
                linear(base + ".ffn2", config.ffn_mult * d, d)
        linear("out_proj", d, d)
        linear("match_head", d, 1)
        p["logit_scale"] = Tensor(np.asarray(math.log(10.0), dtype),
                                  requires_grad=True)
        return cls(config, p)

    def tensors(self):
        return list(self.params.values())


def fourier_encoding(positions, config: CAConfig):
    """Positional features: sin/cos of dyadic frequencies of (x, y) in [0, 1].

    Coordinates are normalized by the configured image size; for each
    frequency f in 1, 2, 4, ..., 2^(F-1) the features are sin(f pi u) and
    cos(f pi u) for both axes, giving 4F values per keypoint.
    """
    pos = np.asarray(positions, dtype=np.float64).reshape(-1, 2)
    w, h = config.image_size
    u = pos / np.array([w, h], dtype=np.float64)
    freqs = 2.0 ** np.arange(config.pe_freqs)
    ang = np.pi * u[:, None, :] * freqs[None, :, None]  # (N, F, 2)
    feats = np.stack([np.sin(ang), np.cos(ang)], axis=2)  # (N, F, 2, 2)
    return feats.reshape(len(pos), 4 * config.pe_freqs)


def _scalar_like(value, t):
    # keep scalar constants in the graph dtype so float32 nets stay float32
    return Tensor(np.asarray(value, dtype=t.data.dtype))


def _linear(x, p, name):
    return ad.bias_add(ad.matmul(x, p[name + ".w"]), p[name + ".b"])


def _mha(xq, xkv, p, base, heads):
    q = _linear(xq, p, base + ".wq")
    k = _linear(xkv, p, base + ".wk")
    v = _linear(xkv, p, base + ".wv")
    d = q.data.shape[1]
    dh = d // heads
    outs = []
    for hh in range(heads):
        qh = ad.slice_axis(q, 1, hh * dh, (hh + 1) * dh)
        kh = ad.slice_axis(k, 1, hh * dh, (hh + 1) * dh)
        vh = ad.slice_axis(v, 1, hh * dh, (hh + 1) * dh)
        logits = ad.matmul(qh, ad.transpose(kh))
        att = ad.softmax(ad.mul(logits, _scalar_like(1.0 / math.sqrt(dh), logits)),
                         axis=1)
        outs.append(ad.matmul(att, vh))
    return _linear(ad.concat(outs, axis=1), p, base + ".wo")


def _attn_unit(x, ctx, p, base, heads):
    """Pre-LN residual attention unit followed by a pre-LN residual FFN.

    The same layer norm is applied to the query and context sides, so the
    unit is exactly symmetric when used bidirectionally.
    """
    xn = ad.layer_norm(x, p[base + ".ln1.g"], p[base + ".ln1.b"])
    cn = xn if ctx is x else ad.layer_norm(ctx, p[base + ".ln1.g"],
                                           p[base + ".ln1.b"])
    x = ad.add(x, _mha(xn, cn, p, base, heads))
    xn2 = ad.layer_norm(x, p[base + ".ln2.g"], p[base + ".ln2.b"])
    ffn = _linear(ad.relu(_linear(xn2, p, base + ".ffn1")), p, base + ".ffn2")
    return ad.add(x, ffn)


def ca_forward(kp_a, kp_b, matcher: CAMatcherParams):
    """Run the transformer over both keypoint sets.

    Returns (x_a, sigma_a, x_b, sigma_b) as Tensors: unit-normalized
    refined descriptors (N, dim) and matchability columns (N, 1).  Cross
    attention updates both sets from each other's pre-update state, so the
    operator commutes with swapping the two sets.
    """
    cfg, p = matcher.config, matcher.params
    da, db = _descriptor_matrix(kp_a), _descriptor_matrix(kp_b)
    pa, pb = _positions(kp_a), _positions(kp_b)
    dtype = p["in_proj.w"].data.dtype
    if da.shape[1] != cfg.desc_dim or db.shape[1] != cfg.desc_dim:
        raise ValueError(
            f"descriptors must have dim {cfg.desc_dim}, "
            f"got {da.shape[1]} and {db.shape[1]}")

    def embed(desc, pos):
        x = _linear(Tensor(desc.astype(dtype)), p, "in_proj")
        pe = _linear(Tensor(fourier_encoding(pos, cfg).astype(dtype)), p, "pe_proj")
        return ad.add(x, pe)

    xa, xb = embed(da, pa), embed(db, pb)
    for layer in range(cfg.layers):
        sb = f"layers.{layer}.self"
        xa = _attn_unit(xa, xa, p, sb, cfg.heads)
        xb = _attn_unit(xb, xb, p, sb, cfg.heads)
        cb = f"layers.{layer}.cross"
        xa2 = _attn_unit(xa, xb, p, cb, cfg.heads)
        xb2 = _attn_unit(xb, xa, p, cb, cfg.heads)
        xa, xb = xa2, xb2
    out_a = ad.l2_normalize(_linear(xa, p, "out_proj"), axis=1)
    out_b = ad.l2_normalize(_linear(xb, p, "out_proj"), axis=1)
    sig_a = ad.sigmoid(_linear(xa, p, "match_head"))
    sig_b = ad.sigmoid(_linear(xb, p, "match_head"))
    return out_a, sig_a, out_b, sig_b


def ca_scores(kp_a, kp_b, matcher: CAMatcherParams):
    """Differentiable soft assignment matrix plus matchabilities.

    P = sigma_a sigma_b^T * softmax_cols(s S) * softmax_rows(s S) with the
    learned temperature s = exp(logit_scale).  Returns (P, sigma_a,
    sigma_b) as Tensors for the matching loss.
    """
    xa, sa, xb, sb = ca_forward(kp_a, kp_b, matcher)
    s = ad.matmul(xa, ad.transpose(xb))
    scaled = ad.mul(s, ad.exp(matcher.params["logit_scale"]))
    soft = ad.mul(ad.softmax(scaled, axis=0), ad.softmax(scaled, axis=1))
    p = ad.mul(ad.matmul(sa, ad.transpose(sb)), soft)
    return p, sa, sb


def assignment_probabilities(x_a, sigma_a, x_b, sigma_b, scale: float = 1.0):
    """Numpy soft assignment matrix from forward outputs (no graph)."""
    xa = np.asarray(x_a.data if isinstance(x_a, Tensor) else x_a, np.float64)
    xb = np.asarray(x_b.data if isinstance(x_b, Tensor) else x_b, np.float64)
    sa = np.asarray(sigma_a.data if isinstance(sigma_a, Tensor) else sigma_a,
                    np.float64).reshape(-1)
    sb = np.asarray(sigma_b.data if isinstance(sigma_b, Tensor) else sigma_b,
                    np.float64).reshape(-1)
    s = scale * (xa @ xb.T)
    soft = np.exp(_log_softmax(s, axis=0) + _log_softmax(s, axis=1))
    return sa[:, None] * sb[None, :] * soft


def ca_assignment(x_a, sigma_a, x_b, sigma_b, scale: float = 1.0,
                  threshold: float = 0.1) -> Assignment:
    """Extract hard matches from the matchability-weighted dual softmax.

    Matches are mutual argmaxes of P with P >= threshold.  Every entry
    satisfies 0 <= P_ij <= sigma_i sigma_j, so low-matchability keypoints
    can never form a match.
    """
    if (np.asarray(x_a.data if isinstance(x_a, Tensor) else x_a).shape[0] == 0
            or np.asarray(x_b.data if isinstance(x_b, Tensor) else x_b).shape[0] == 0):
        return Assignment.empty()
    p = assignment_probabilities(x_a, sigma_a, x_b, sigma_b, scale)
    pairs = _mutual_argmax(p)
    if len(pairs):
        vals = p[pairs[:, 0], pairs[:, 1]]
        keep = vals >= threshold
        pairs, vals = pairs[keep], vals[keep]
    else:
        vals = np.zeros(0)
    return Assignment(pairs, vals)


def ca_match(kp_a, kp_b, matcher: CAMatcherParams,
             threshold: float = 0.1) -> Assignment:
    """Forward pass plus hard assignment with the learned temperature."""
    da, db = _descriptor_matrix(kp_a), _descriptor_matrix(kp_b)
    if len(da) == 0 or len(db) == 0:
        return Assignment.empty()
    xa, sa, xb, sb = ca_forward(kp_a, kp_b, matcher)
    scale = float(np.exp(matcher.params["logit_scale"].data))
    return ca_assignment(xa, sa, xb, sb, scale=scale, threshold=threshold)


# -- supervision ----------------------------------------------------------

def gt_assignment(kp_a, kp_b, depth_a, depth_b,
                  intr_a: CameraIntrinsics, intr_b: CameraIntrinsics,
                  pose_a: RigidPose, pose_b: RigidPose,
                  eps_px: float = 3.0) -> GroundTruthMatches:
    """Reprojection ground truth between two views with rendered depth.

    Each keypoint is lifted with its bilinearly sampled depth and carried
    into the other view; the symmetric cost is the max of the two squared
    transfer errors (+inf behind either camera or on invalid depth).  A
    pair is positive iff it is a mutual argmin with cost strictly below
    eps_px^2; all other indices are reported unmatched.  Swapping the two
    views swaps the roles exactly.
    """
    pa, pb = _positions(kp_a), _positions(kp_b)
    na, nb = len(pa), len(pb)
    if na == 0 or nb == 0:
        return GroundTruthMatches(np.zeros((0, 2), np.int64),
                                  np.arange(na), np.arange(nb))
    da = np.asarray(depth_a, dtype=np.float64)
    db = np.asarray(depth_b, dtype=np.float64)
    za = bilinear_sample_np(da[None], pa)[:, 0]
    zb = bilinear_sample_np(db[None], pb)[:, 0]
    ok_a = np.isfinite(za) & (za > 0)
    ok_b = np.isfinite(zb) & (zb > 0)

    rel_ab = relative_pose(pose_a, pose_b)
    rel_ba = relative_pose(pose_b, pose_a)
    prj_a, va = reproject_many(pa, np.where(ok_a, za, 1.0), intr_a, intr_b, rel_ab)
    prj_b, vb = reproject_many(pb, np.where(ok_b, zb, 1.0), intr_b, intr_a, rel_ba)
    va &= ok_a
    vb &= ok_b

    cost = np.full((na, nb), np.inf)
    if va.any() or vb.any():
        d_ab = ((prj_a[:, None, :] - pb[None, :, :]) ** 2).sum(axis=2)
        d_ba = ((pa[:, None, :] - prj_b[None, :, :]) ** 2).sum(axis=2)
        d_ab[~va, :] = np.inf
        d_ba[:, ~vb] = np.inf
        cost = np.maximum(d_ab, d_ba)

    pairs = []
    if np.isfinite(cost).any():
        best_j = np.argmin(cost, axis=1)
        best_i = np.argmin(cost, axis=0)
        rows = np.arange(na)
        mutual = best_i[best_j] == rows
        close = cost[rows, best_j] < eps_px ** 2
        keep = mutual & close
        pairs = np.stack([rows[keep], best_j[keep]], axis=1)
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    un_a = np.setdiff1d(np.arange(na), pairs[:, 0], assume_unique=False)
    un_b = np.setdiff1d(np.arange(nb), pairs[:, 1], assume_unique=False)
    return GroundTruthMatches(pairs, un_a, un_b)


def nll_loss(p, sigma_a, sigma_b, gt: GroundTruthMatches) -> Tensor:
    """Negative log-likelihood of the ground-truth assignment.

    Mean -log P over positives, plus half the mean -log(1 - sigma) over
    each unmatched set.  Empty sets contribute nothing.  Probabilities are
    clamped at 1e-12 before the log; if the clamp is active a
    RuntimeWarning reports the saturation instead of producing infs.
    """
    terms = []
    saturated = False
    if len(gt.matches):
        vals = ad.take_pairs(p, gt.matches)
        saturated |= bool((vals.data < 1e-12).any())
        terms.append(ad.mul(ad.sum_all(ad.log(ad.clamp_min(vals, 1e-12))),
                            _scalar_like(-1.0 / len(gt.matches), vals)))
    for sigma, idx in ((sigma_a, gt.unmatched_a), (sigma_b, gt.unmatched_b)):
        if len(idx) == 0:
            continue
        s = ad.take_rows(sigma, idx)
        one_minus = ad.sub(_scalar_like(1.0, s), s)
        saturated |= bool((one_minus.data < 1e-12).any())
        terms.append(ad.mul(ad.sum_all(ad.log(ad.clamp_min(one_minus, 1e-12))),
                            _scalar_like(-0.5 / len(idx), one_minus)))
    if saturated:
        warnings.warn("matching loss saturated: probabilities clamped at 1e-12",
                      RuntimeWarning)
    if not terms:
        return Tensor(np.float32(0.0))
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return total


@dataclass(frozen=True)
class MatchTrainConfig:
    """Training recipe for the context-aware matcher."""

    lr: float = 1e-4
    epochs: int = 50
    batch_size: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0 or self.epochs <= 0 or self.batch_size <= 0:
            raise ValueError("lr, epochs and batch_size must be positive")


def train_matcher(examples, matcher: CAMatcherParams | None = None,
                  config: MatchTrainConfig = MatchTrainConfig(),
                  ca_config: CAConfig | None = None, log=None):
    """Train the matcher on (kp_a, kp_b, GroundTruthMatches) triples.

    Adam with a cosine schedule; each step averages the per-pair losses of
    one minibatch.  A non-finite batch loss aborts with the step index.
    Returns (matcher, history) with one (epoch, mean loss) row per epoch.
    """
    examples = list(examples)
    if not examples:
        raise ValueError("no training examples provided")
    if matcher is None:
        if ca_config is None:
            desc_dim = _descriptor_matrix(examples[0][0]).shape[1]
            ca_config = CAConfig(desc_dim=desc_dim)
        matcher = CAMatcherParams.create(ca_config, seed=config.seed)

    n = len(examples)
    rng = np.random.default_rng(config.seed)
    steps_per_epoch = (n + config.batch_size - 1) // config.batch_size
    opt = Adam(matcher.params, lr=config.lr,
               total_steps=config.epochs * steps_per_epoch)
    history = []
    step = 0
    for epoch in range(config.epochs):
        perm = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = perm[start:start + config.batch_size]
            losses = []
            for i in idx:
                kp_a, kp_b, gt = examples[i]
                p, sa, sb = ca_scores(kp_a, kp_b, matcher)
                losses.append(nll_loss(p, sa, sb, gt))
            batch_loss = losses[0]
            for t in losses[1:]:
                batch_loss = ad.add(batch_loss, t)
            batch_loss = ad.mul(batch_loss, _scalar_like(1.0 / len(losses), batch_loss))
            if not np.isfinite(batch_loss.data):
                raise RuntimeError(
                    f"non-finite matching loss at step {step}; aborting")
            batch_loss.backward()
            opt.step()
            total += float(batch_loss.data)
            step += 1
        history.append((epoch, total / steps_per_epoch))
        if log is not None:
            log("epoch %d loss=%.6f" % history[-1])
    return matcher, history


def matcher_history_csv(history) -> str:
    lines = ["epoch,loss"]
    for epoch, loss in history:
        lines.append(f"{int(epoch)},{loss:.8f}")
    return "\n".join(lines) + "\n"


# -- persistence ----------------------------------------------------------

def save_matcher(path, matcher: CAMatcherParams):
    """Persist matcher params with the architecture embedded."""
    cfg = matcher.config
    blob = {
        _CONFIG_PREFIX + "desc_dim": np.array([cfg.desc_dim], np.float32),
        _CONFIG_PREFIX + "dim": np.array([cfg.dim], np.float32),
        _CONFIG_PREFIX + "layers": np.array([cfg.layers], np.float32),
        _CONFIG_PREFIX + "heads": np.array([cfg.heads], np.float32),
        _CONFIG_PREFIX + "pe_freqs": np.array([cfg.pe_freqs], np.float32),
        _CONFIG_PREFIX + "ffn_mult": np.array([cfg.ffn_mult], np.float32),
        _CONFIG_PREFIX + "image_size": np.asarray(cfg.image_size, np.float32),
    }
    for name, t in matcher.params.items():
        blob[name] = t.data
    save_checkpoint(path, blob)


def load_matcher(path, trainable=False) -> CAMatcherParams:
    """Load a matcher; missing/extra/mis-shaped params raise by name."""
    blob = load_checkpoint(path)
    cfg_items = {k[len(_CONFIG_PREFIX):]: v for k, v in blob.items()
                 if k.startswith(_CONFIG_PREFIX)}
    if "dim" not in cfg_items:
        raise ValueError(f"{path}: checkpoint lacks embedded matcher architecture")
    config = CAConfig(
        desc_dim=int(cfg_items["desc_dim"][0]),
        dim=int(cfg_items["dim"][0]),
        layers=int(cfg_items["layers"][0]),
        heads=int(cfg_items["heads"][0]),
        pe_freqs=int(cfg_items["pe_freqs"][0]),
        ffn_mult=int(cfg_items["ffn_mult"][0]),
        image_size=tuple(int(v) for v in cfg_items["image_size"]),
    )
    expected = {name: t.data.shape
                for name, t in CAMatcherParams.create(config).params.items()}
    loaded = {k: v for k, v in blob.items() if not k.startswith(_CONFIG_PREFIX)}
    for name in expected:
        if name not in loaded:
            raise ValueError(f"{path}: missing parameter {name}")
        if loaded[name].shape != expected[name]:
            raise ValueError(f"{path}: parameter {name} has shape "
                             f"{loaded[name].shape}, expected {expected[name]}")
    for name in loaded:
        if name not in expected:
            raise ValueError(f"{path}: unexpected parameter {name}")
    params = {name: Tensor(loaded[name], requires_grad=trainable)
              for name in expected}
    return CAMatcherParams(config, params)
