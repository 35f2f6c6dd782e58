"""Feature extractors and keypoint post-processing.

Two extractors produce the same kind of output: dense feature maps holding a
latent map at the backbone stride, a full-resolution detection score map,
and a full-resolution descriptor map.  The student is a small VGG-style
convolutional net over event tensors, built on the autodiff engine so it
can be distilled.  The teacher is analytic: Harris corner strength for the
score, windowed oriented-gradient descriptors, and a fixed seeded lift of
steerable gradient responses for the latent map.  It needs no training,
which keeps the whole distillation pipeline self-contained.

Keypoint extraction is shared by both modalities: border removal, strict
non-maximum suppression with deterministic tie-breaking, top-k or threshold
selection, and bilinear descriptor sampling from the unit-normalized map.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .events import EventMask
from .optim import load_checkpoint, save_checkpoint
from .representations import EventTensor

TEACHER_PROJECTION_SEED = 7
_CONFIG_PREFIX = "__config__."


@dataclass
class DenseMaps:
    """Dense extractor outputs: latent features, score map, descriptor map.

    feats is (C', H/s, W/s) for backbone stride s; score is (1, H, W);
    desc is (C_d, H, W).  Fields hold Tensors when produced by the student
    (differentiable) and plain arrays when produced by the teacher.
    """

    feats: object
    score: object
    desc: object

    def detached(self):
        return DenseMaps(_as_array(self.feats).copy(),
                         _as_array(self.score).copy(),
                         _as_array(self.desc).copy())


def _as_array(m):
    return m.data if isinstance(m, Tensor) else np.asarray(m)


@dataclass(frozen=True)
class ExtractorConfig:
    """Architecture of the convolutional extractor.

    ``channels``/``pools`` describe the backbone: each block is a 3x3 conv
    plus ReLU, followed by 2x2 max pooling where pools is 2.  The product
    of pools is the backbone stride; the score and descriptor heads climb
    back to full resolution with one stride-2 transposed conv per pooling
    stage (their widths given by score_head/desc_head), ending in a 1x1
    projection.
    """

    in_channels: int
    channels: tuple = (64, 64, 128, 128)
    pools: tuple = (1, 2, 1, 2)
    latent_dim: int = 128
    desc_dim: int = 128
    score_head: tuple = (64, 32)
    desc_head: tuple = (128, 64)

    def __post_init__(self):
        if len(self.channels) != len(self.pools):
            raise ValueError("channels and pools must have equal length")
        if any(p not in (1, 2) for p in self.pools):
            raise ValueError("pool factors must be 1 or 2")
        ups = sum(1 for p in self.pools if p == 2)
        if len(self.score_head) != ups or len(self.desc_head) != ups:
            raise ValueError("head depth must match the number of pooling stages")

    @property
    def stride(self):
        s = 1
        for p in self.pools:
            s *= p
        return s


@dataclass(frozen=True)
class TeacherConfig:
    """Shape of the analytic image teacher's outputs.

    The descriptor is ``orientations`` oriented-gradient energy channels
    sampled on a ``grid`` x ``grid`` pattern of integer offsets around each
    pixel, so orientations * grid**2 must equal desc_dim.
    """

    desc_dim: int = 128
    latent_dim: int = 128
    stride: int = 4
    orientations: int = 8
    grid: int = 4
    tap_spacing: int = 2
    harris_k: float = 0.04

    def __post_init__(self):
        if self.orientations * self.grid ** 2 != self.desc_dim:
            raise ValueError("orientations * grid^2 must equal desc_dim")
        if ((self.grid - 1) * self.tap_spacing) % 2 != 0:
            raise ValueError("tap offsets must land on integer pixels")

    def tap_offsets(self):
        c = (self.grid - 1) * self.tap_spacing // 2
        return np.arange(self.grid) * self.tap_spacing - c


@dataclass
class KeypointSet:
    """Sparse detections: (x, y) positions, unit descriptors, scores."""

    positions: np.ndarray  # (K, 2) float
    descriptors: np.ndarray  # (K, C_d) float32, unit rows (or zero)
    scores: np.ndarray  # (K,) float32

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 2)
        self.descriptors = np.asarray(self.descriptors, dtype=np.float32)
        self.scores = np.asarray(self.scores, dtype=np.float32).reshape(-1)
        if not (len(self.positions) == len(self.descriptors) == len(self.scores)):
            raise ValueError("positions, descriptors and scores must align")

    def __len__(self):
        return len(self.positions)

    @classmethod
    def empty(cls, desc_dim):
        return cls(np.zeros((0, 2)), np.zeros((0, desc_dim), np.float32),
                   np.zeros(0, np.float32))


# -- student ------------------------------------------------------------

def init_student(config: ExtractorConfig, seed: int = 0):
    """He-initialized parameter dict for the student architecture."""
    rng = np.random.default_rng(seed)

    def conv_w(c_out, c_in, k):
        scale = math.sqrt(2.0 / (c_in * k * k))
        return Tensor(rng.normal(0.0, scale, (c_out, c_in, k, k)).astype(np.float32),
                      requires_grad=True)

    def convt_w(c_in, c_out, k):
        scale = math.sqrt(2.0 / (c_in * k * k))
        return Tensor(rng.normal(0.0, scale, (c_in, c_out, k, k)).astype(np.float32),
                      requires_grad=True)

    def bias(c):
        return Tensor(np.zeros(c, np.float32), requires_grad=True)

    params = {}
    c_in = config.in_channels
    for i, c_out in enumerate(config.channels):
        params[f"backbone.{i}.w"] = conv_w(c_out, c_in, 3)
        params[f"backbone.{i}.b"] = bias(c_out)
        c_in = c_out
    params["latent.w"] = conv_w(config.latent_dim, c_in, 1)
    params["latent.b"] = bias(config.latent_dim)
    for head, widths, out_dim in (("score", config.score_head, 1),
                                  ("desc", config.desc_head, config.desc_dim)):
        c = c_in
        for i, width in enumerate(widths):
            params[f"{head}.{i}.w"] = convt_w(c, width, 4)
            params[f"{head}.{i}.b"] = bias(width)
            c = width
        params[f"{head}.out.w"] = conv_w(out_dim, c, 1)
        params[f"{head}.out.b"] = bias(out_dim)
    return params


def forward_student_batch(x, params, config: ExtractorConfig):
    """Batched forward pass: (N, C, H, W) -> (feats, score, desc) Tensors."""
    if not isinstance(x, Tensor):
        x = Tensor(np.asarray(x, dtype=np.float32))
    if x.data.ndim != 4 or x.data.shape[1] != config.in_channels:
        raise ValueError(
            f"expected (N, {config.in_channels}, H, W) input, got {x.data.shape}")
    h = x
    for i, pool in enumerate(config.pools):
        h = ad.relu(ad.conv2d(h, params[f"backbone.{i}.w"], params[f"backbone.{i}.b"],
                              stride=1, padding=1))
        if pool == 2:
            h = ad.max_pool2d(h, 2)
    feats = ad.conv2d(h, params["latent.w"], params["latent.b"])
    outs = []
    for head, widths in (("score", config.score_head), ("desc", config.desc_head)):
        t = h
        for i in range(len(widths)):
            t = ad.relu(ad.conv_transpose2d(t, params[f"{head}.{i}.w"],
                                            params[f"{head}.{i}.b"],
                                            stride=2, padding=1))
        outs.append(ad.conv2d(t, params[f"{head}.out.w"], params[f"{head}.out.b"]))
    score, desc = outs
    return feats, score, desc


def forward_student(tensor, params, config: ExtractorConfig) -> DenseMaps:
    """Run the student on one event tensor (or any (C, H, W) array).

    Returns DenseMaps of Tensors; the graph is recorded only when the
    parameters require gradients, so inference on frozen params is cheap.
    """
    data = tensor.data if isinstance(tensor, EventTensor) else np.asarray(tensor)
    if data.ndim != 3:
        raise ValueError(f"expected a (C, H, W) input, got shape {data.shape}")
    feats, score, desc = forward_student_batch(
        data[None].astype(np.float32, copy=False), params, config)
    return DenseMaps(ad.reshape(feats, feats.shape[1:]),
                     ad.reshape(score, score.shape[1:]),
                     ad.reshape(desc, desc.shape[1:]))


# -- analytic teacher ---------------------------------------------------

_BINOMIAL5 = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0


def _filter1d(img, kernel, axis):
    r = len(kernel) // 2
    pad = [(0, 0), (0, 0)]
    pad[axis] = (r, r)
    padded = np.pad(img, pad, mode="reflect")
    out = np.zeros_like(img)
    for i, w in enumerate(kernel):
        sl = [slice(None)] * 2
        sl[axis] = slice(i, i + img.shape[axis])
        out += w * padded[tuple(sl)]
    return out


def _smooth(img):
    return _filter1d(_filter1d(img, _BINOMIAL5, 0), _BINOMIAL5, 1)


def _shift_clamped(img, dy, dx):
    h, w = img.shape
    ys = np.clip(np.arange(h) + dy, 0, h - 1)
    xs = np.clip(np.arange(w) + dx, 0, w - 1)
    return img[np.ix_(ys, xs)]


def harris_score(img, k=0.04):
    """Harris corner response, clipped at 0 and scaled to peak 1."""
    iy, ix = np.gradient(img)
    sxx = _smooth(ix * ix)
    syy = _smooth(iy * iy)
    sxy = _smooth(ix * iy)
    r = sxx * syy - sxy * sxy - k * (sxx + syy) ** 2
    r = np.maximum(r, 0.0)
    peak = r.max()
    return r / peak if peak > 0 else r


def analytic_teacher(image, config: TeacherConfig = TeacherConfig()) -> DenseMaps:
    """Dense maps for a grayscale image in [0, 1], no learning involved.

    score: normalized Harris response.  desc: mean-centred oriented-gradient
    energies tapped on a grid of offsets around each pixel, unit-normalized
    per pixel.  feats: steerable gradient responses
    of the stride-downsampled image lifted to latent_dim channels by a
    fixed seeded projection, so the target latent space is reproducible
    across runs.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3 and img.shape[0] == 1:
        img = img[0]
    if img.ndim != 2:
        raise ValueError(f"expected a grayscale image, got shape {img.shape}")
    if img.min() < -1e-6 or img.max() > 1.0 + 1e-6:
        raise ValueError("image values must lie in [0, 1]")
    h, w = img.shape
    s = config.stride
    if h % s or w % s:
        raise ValueError(f"image dims ({h}, {w}) must be divisible by stride {s}")

    score = harris_score(img, config.harris_k)[None]

    iy, ix = np.gradient(img)
    angles = 2.0 * np.pi * np.arange(config.orientations) / config.orientations
    taps = config.tap_offsets()
    desc = np.empty((config.desc_dim, h, w))
    cell = config.grid ** 2
    # absolute-value responses over [0, pi) keep the targets a polarity-free
    # function of edge geometry (event data cannot resolve gradient sign);
    # centring each pixel's vector before normalization spreads pairwise
    # cosines instead of crowding the positive orthant
    desc_angles = np.pi * np.arange(config.orientations) / config.orientations
    for o, th in enumerate(desc_angles):
        resp = _smooth(np.abs(np.cos(th) * ix + np.sin(th) * iy))
        for ti, dy in enumerate(taps):
            for tj, dx in enumerate(taps):
                desc[o * cell + ti * config.grid + tj] = _shift_clamped(resp, dy, dx)
    desc = normalize_desc(desc - desc.mean(axis=0, keepdims=True))

    small = img.reshape(h // s, s, w // s, s).mean(axis=(1, 3))
    gy, gx = np.gradient(small)
    base = np.stack([np.cos(th) * gx + np.sin(th) * gy for th in angles])
    proj = np.random.default_rng(TEACHER_PROJECTION_SEED).normal(
        0.0, 1.0 / np.sqrt(config.orientations),
        (config.latent_dim, config.orientations))
    feats = np.tensordot(proj, base, axes=1)

    return DenseMaps(feats.astype(np.float32), score.astype(np.float32),
                     desc.astype(np.float32))


def normalize_desc(desc_map):
    """Scale each pixel's descriptor to unit L2 norm; zero vectors stay zero."""
    d = np.asarray(desc_map)
    n = np.sqrt((d.astype(np.float64) ** 2).sum(axis=0, keepdims=True))
    safe = np.where(n < 1e-12, 1.0, n)
    return (d / safe).astype(d.dtype)


def apply_event_mask(maps: DenseMaps, mask: EventMask) -> DenseMaps:
    """Gate the score map by event support; feats and desc pass through."""
    m = mask.mask
    score = maps.score
    sh = _as_array(score).shape
    if sh[-2:] != m.shape:
        raise ValueError(f"mask shape {m.shape} does not match score {sh}")
    m3 = m.reshape(sh).astype(np.float32)
    if isinstance(score, Tensor):
        gated = ad.mul(score, Tensor(m3))
    else:
        gated = score * m3
    return DenseMaps(maps.feats, gated, maps.desc)


# -- keypoint extraction ------------------------------------------------

def _sliding_max(a, r):
    """Per-pixel max over the (2r+1)^2 window, int64 input, -inf padded."""
    out = a
    for axis in (0, 1):
        if r == 0:
            continue
        pad = [(0, 0), (0, 0)]
        pad[axis] = (r, r)
        padded = np.pad(out, pad, constant_values=np.iinfo(np.int64).min)
        acc = out.copy()
        for d in range(-r, r + 1):
            if d == 0:
                continue
            sl = [slice(None)] * 2
            sl[axis] = slice(r + d, r + d + a.shape[axis])
            np.maximum(acc, padded[tuple(sl)], out=acc)
        out = acc
    return out


def nms_mask(score, radius):
    """Survivors of strict-maximum NMS with row-major tie-breaking.

    A pixel survives iff no window neighbor beats it and no equal-valued
    neighbor precedes it in row-major order.  Implemented exactly by
    packing (score rank, reversed index) into one integer key per pixel.
    """
    h, w = score.shape
    _, rank = np.unique(score, return_inverse=True)
    rank = rank.reshape(h, w).astype(np.int64)
    key = rank * (h * w) + (h * w - 1 - np.arange(h * w, dtype=np.int64).reshape(h, w))
    return key == _sliding_max(key, radius)


def extract_keypoints(maps: DenseMaps, border: int = 4, nms_radius: int = 4,
                      k: int | None = 1024, threshold: float | None = None) -> KeypointSet:
    """Select keypoints from a score map and sample their descriptors.

    Pipeline: scores within ``border`` of any edge are dropped; strict-max
    NMS with row-major tie-breaking; then either the top ``k`` by score or
    everything above ``threshold``.  Only strictly positive scores can
    become keypoints, so a fully masked score map yields an empty set.
    Returned keypoints are ordered by descending score (ties by row-major
    index).  Descriptors are bilinearly sampled from the unit-normalized
    descriptor map and re-normalized.
    """
    if border < 0 or nms_radius < 0:
        raise ValueError("border and nms_radius must be non-negative")
    if threshold is None and (k is None or k <= 0):
        raise ValueError(f"k must be positive, got {k}")
    score = np.asarray(_as_array(maps.score), dtype=np.float64)
    if score.ndim == 3:
        score = score[0]
    h, w = score.shape
    desc_map = normalize_desc(_as_array(maps.desc))

    s = score.copy()
    if border > 0:
        s[:border, :] = -np.inf
        s[-border:, :] = -np.inf
        s[:, :border] = -np.inf
        s[:, -border:] = -np.inf
    keep = nms_mask(s, nms_radius) & (s > 0) & np.isfinite(s)
    ys, xs = np.nonzero(keep)
    vals = s[ys, xs]
    order = np.lexsort((ys * w + xs, -vals))
    if threshold is not None:
        order = order[vals[order] > threshold]
    else:
        order = order[:k]
    if len(order) == 0:
        return KeypointSet.empty(desc_map.shape[0])
    pos = np.stack([xs[order], ys[order]], axis=1).astype(np.float64)
    descs = sample_descriptors(desc_map, pos)
    return KeypointSet(pos, descs, vals[order].astype(np.float32))


def sample_descriptors(desc_map, positions):
    """Bilinearly sample a (C, H, W) map at (x, y) positions, renormalized."""
    d = bilinear_sample_np(desc_map, positions)
    n = np.sqrt((d.astype(np.float64) ** 2).sum(axis=1, keepdims=True))
    return (d / np.where(n < 1e-12, 1.0, n)).astype(np.float32)


def bilinear_sample_np(m, pts):
    """Plain-numpy twin of the autodiff bilinear_sample: (K, C) samples."""
    c, h, w = m.shape
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
    px = np.clip(pts[:, 0], 0.0, w - 1.0)
    py = np.clip(pts[:, 1], 0.0, h - 1.0)
    x0 = np.minimum(np.floor(px), w - 2 if w > 1 else 0).astype(np.int64)
    y0 = np.minimum(np.floor(py), h - 2 if h > 1 else 0).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = px - x0
    fy = py - y0
    return (m[:, y0, x0] * (1 - fx) * (1 - fy) + m[:, y0, x1] * fx * (1 - fy)
            + m[:, y1, x0] * (1 - fx) * fy + m[:, y1, x1] * fx * fy).T


# -- persistence --------------------------------------------------------

def _config_entries(config: ExtractorConfig):
    return {
        _CONFIG_PREFIX + "in_channels": np.array([config.in_channels], np.float32),
        _CONFIG_PREFIX + "channels": np.asarray(config.channels, np.float32),
        _CONFIG_PREFIX + "pools": np.asarray(config.pools, np.float32),
        _CONFIG_PREFIX + "latent_dim": np.array([config.latent_dim], np.float32),
        _CONFIG_PREFIX + "desc_dim": np.array([config.desc_dim], np.float32),
        _CONFIG_PREFIX + "score_head": np.asarray(config.score_head, np.float32),
        _CONFIG_PREFIX + "desc_head": np.asarray(config.desc_head, np.float32),
    }


def save_extractor(path, params, config: ExtractorConfig):
    """Persist extractor params with the architecture embedded."""
    blob = dict(_config_entries(config))
    for name, p in params.items():
        blob[name] = p.data if isinstance(p, Tensor) else np.asarray(p)
    save_checkpoint(path, blob)


def load_extractor(path, trainable=False):
    """Load (params, config) from a checkpoint written by save_extractor.

    Missing or extra parameters, or shape mismatches against the embedded
    architecture, raise with the offending name.
    """
    blob = load_checkpoint(path)
    cfg_items = {k[len(_CONFIG_PREFIX):]: v for k, v in blob.items()
                 if k.startswith(_CONFIG_PREFIX)}
    if "in_channels" not in cfg_items:
        raise ValueError(f"{path}: checkpoint lacks embedded extractor architecture")
    config = ExtractorConfig(
        in_channels=int(cfg_items["in_channels"][0]),
        channels=tuple(int(v) for v in cfg_items["channels"]),
        pools=tuple(int(v) for v in cfg_items["pools"]),
        latent_dim=int(cfg_items["latent_dim"][0]),
        desc_dim=int(cfg_items["desc_dim"][0]),
        score_head=tuple(int(v) for v in cfg_items["score_head"]),
        desc_head=tuple(int(v) for v in cfg_items["desc_head"]),
    )
    expected = {name: p.data.shape for name, p in init_student(config).items()}
    loaded = {k: v for k, v in blob.items() if not k.startswith(_CONFIG_PREFIX)}
    for name in expected:
        if name not in loaded:
            raise ValueError(f"{path}: missing parameter {name}")
        if loaded[name].shape != expected[name]:
            raise ValueError(
                f"{path}: parameter {name} has shape {loaded[name].shape}, "
                f"expected {expected[name]}")
    for name in loaded:
        if name not in expected:
            raise ValueError(f"{path}: unexpected parameter {name}")
    params = {name: Tensor(loaded[name], requires_grad=trainable) for name in expected}
    return params, config


def load_teacher_checkpoint(path):
    """Load a frozen image extractor and return its forward closure.

    The checkpoint must describe a 1-channel extractor; the closure maps a
    grayscale image in [0, 1] to detached DenseMaps.
    """
    params, config = load_extractor(path, trainable=False)
    if config.in_channels != 1:
        raise ValueError(
            f"{path}: teacher must take 1 input channel, got {config.in_channels}")

    def teacher(image):
        img = np.asarray(image, dtype=np.float32)
        if img.ndim == 2:
            img = img[None]
        if img.min() < -1e-6 or img.max() > 1.0 + 1e-6:
            raise ValueError("image values must lie in [0, 1]")
        return forward_student(img, params, config).detached()

    return teacher


def parameter_shapes(config: ExtractorConfig):
    return {name: p.data.shape for name, p in init_student(config).items()}
