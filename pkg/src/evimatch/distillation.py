"""Cross-modal distillation of the event extractor from an image teacher.

The student sees only the event tensor; the teacher sees only the aligned
grayscale frame.  Three losses tie them together: a dense L2 on the latent
feature maps, an event-masked L2 on the score maps, and an event-masked L1
on the descriptor maps.  Masking matters because event tensors are silent
away from moving edges, so forcing agreement there would only teach the
student to hallucinate.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .events import EventStream, accumulate_mask
from .extractor import (ExtractorConfig, analytic_teacher,
                        forward_student_batch, init_student)
from .optim import Adam
from .representations import build_representation

_REPRESENTATIONS = ("voxel", "time_surface", "stack")


@dataclass(frozen=True)
class DistillConfig:
    """Training recipe for the event extractor."""

    delta_t: float = 0.05
    representation: str = "voxel"
    bins: int = 16
    lr: float = 1e-3
    epochs: int = 50
    batch_size: int = 8
    n_pairs: int = 512
    seed: int = 0
    use_feats: bool = True
    use_score: bool = True
    use_desc: bool = True

    def __post_init__(self):
        if self.representation not in _REPRESENTATIONS:
            raise ValueError(f"unknown representation {self.representation!r}")
        if self.epochs <= 0 or self.batch_size <= 0 or self.n_pairs <= 0:
            raise ValueError("epochs, batch_size and n_pairs must be positive")
        if self.lr <= 0 or self.delta_t <= 0:
            raise ValueError("lr and delta_t must be positive")
        if not (self.use_feats or self.use_score or self.use_desc):
            raise ValueError("at least one loss term must be enabled")

    @property
    def input_channels(self):
        return 2 if self.representation == "time_surface" else self.bins


@dataclass
class LFDBatch:
    """One minibatch of aligned tensors, teacher targets and event masks.

    All arrays are batched: inputs (N, C, H, W); teacher_feats at the
    backbone stride; teacher_score (N, 1, H, W); teacher_desc (N, C_d,
    H, W); masks (N, 1, H, W) with 1 where the events touched a pixel.
    """

    inputs: np.ndarray
    teacher_feats: np.ndarray
    teacher_score: np.ndarray
    teacher_desc: np.ndarray
    masks: np.ndarray


@dataclass
class LFDLossReport:
    """Loss values for one batch; ``total`` keeps the differentiable node."""

    l_feats: float
    l_score: float
    l_desc: float
    l_total: float
    empty_mask: bool
    total: Tensor = field(repr=False, default=None)


def lfd_loss(student_feats, student_score, student_desc, batch: LFDBatch,
             config: DistillConfig = DistillConfig()) -> LFDLossReport:
    """Masked distillation loss over one batch.

    The feature term is an unmasked mean over every latent cell; the score
    and descriptor terms average only over event-supported pixels, pooled
    across the whole batch.  A batch whose masks are all zero contributes
    nothing through the masked terms (flagged, not NaN).  Disabled terms
    are exactly zero and never enter the graph.
    """
    mask = np.asarray(batch.masks, dtype=np.float32)
    mask_count = float(mask.sum(dtype=np.float64))
    empty = mask_count == 0.0

    terms = []
    l_feats = l_score = l_desc = 0.0
    if config.use_feats:
        t = ad.mean_all(ad.square(ad.sub(student_feats, Tensor(batch.teacher_feats))))
        l_feats = float(t.data)
        terms.append(t)
    if config.use_score and not empty:
        t = ad.masked_mean(ad.square(ad.sub(student_score,
                                            Tensor(batch.teacher_score))), mask)
        l_score = float(t.data)
        terms.append(t)
    if config.use_desc and not empty:
        mc = np.broadcast_to(mask, batch.teacher_desc.shape)
        t = ad.masked_mean(ad.abs_(ad.sub(student_desc,
                                          Tensor(batch.teacher_desc))), mc)
        l_desc = float(t.data)
        terms.append(t)

    if terms:
        total = terms[0]
        for t in terms[1:]:
            total = ad.add(total, t)
    else:
        total = Tensor(np.float32(0.0))
    return LFDLossReport(l_feats, l_score, l_desc, float(total.data), empty, total)


def _sample_fields(sample):
    if hasattr(sample, "events") and hasattr(sample, "image"):
        return sample.events, sample.image
    events, image = sample[0], sample[1]
    return events, image


def prepare_batch_arrays(samples, config: DistillConfig, teacher=None):
    """Precompute inputs, teacher targets and masks for a sample list.

    samples are (EventStream, image) pairs or objects exposing .events and
    .image; the streams are assumed to already be the observation windows.
    teacher defaults to the analytic image teacher.
    """
    tf = analytic_teacher if teacher is None else teacher
    inputs, feats, scores, descs, masks = [], [], [], [], []
    for sample in samples:
        events, image = _sample_fields(sample)
        if not isinstance(events, EventStream):
            raise TypeError("samples must carry EventStream windows")
        rep = build_representation(events, config.representation, bins=config.bins)
        maps = tf(image)
        inputs.append(rep.data)
        feats.append(np.asarray(maps.feats, dtype=np.float32))
        scores.append(np.asarray(maps.score, dtype=np.float32))
        descs.append(np.asarray(maps.desc, dtype=np.float32))
        masks.append(accumulate_mask(events).mask[None].astype(np.float32))
    return (np.stack(inputs), np.stack(feats), np.stack(scores),
            np.stack(descs), np.stack(masks))


def default_student_config(config: DistillConfig,
                           teacher_cfg=None) -> ExtractorConfig:
    latent = 128 if teacher_cfg is None else teacher_cfg.latent_dim
    desc = 128 if teacher_cfg is None else teacher_cfg.desc_dim
    return ExtractorConfig(in_channels=config.input_channels,
                           latent_dim=latent, desc_dim=desc)


def train_extractor(samples, config: DistillConfig = DistillConfig(),
                    student_config: ExtractorConfig | None = None,
                    teacher=None, log=None):
    """Distill the event extractor; returns (params, student_config, history).

    Runs config.epochs epochs of Adam with a cosine schedule over at most
    config.n_pairs samples.  The teacher is evaluated once up front and
    never updated.  history is one row per epoch with the mean of each loss
    term; a non-finite total aborts immediately, naming the epoch.  The
    whole run is a pure function of the samples and the two configs.
    """
    samples = list(samples)[:config.n_pairs]
    if not samples:
        raise ValueError("no training samples provided")
    if student_config is None:
        student_config = default_student_config(config)
    if student_config.in_channels != config.input_channels:
        raise ValueError(
            f"student expects {student_config.in_channels} input channels but the "
            f"{config.representation!r} representation yields {config.input_channels}")

    xs, tf, ts, td, ms = prepare_batch_arrays(samples, config, teacher)
    n = len(samples)
    rng = np.random.default_rng(config.seed)
    params = init_student(student_config, seed=config.seed)
    steps_per_epoch = (n + config.batch_size - 1) // config.batch_size
    opt = Adam(params, lr=config.lr,
               total_steps=config.epochs * steps_per_epoch)

    history = []
    for epoch in range(config.epochs):
        perm = rng.permutation(n)
        sums = np.zeros(4)
        for start in range(0, n, config.batch_size):
            idx = perm[start:start + config.batch_size]
            feats, score, desc = forward_student_batch(xs[idx], params, student_config)
            batch = LFDBatch(xs[idx], tf[idx], ts[idx], td[idx], ms[idx])
            report = lfd_loss(feats, score, desc, batch, config)
            if not np.isfinite(report.l_total):
                raise RuntimeError(
                    f"non-finite distillation loss at epoch {epoch}; aborting")
            report.total.backward()
            opt.step()
            sums += (report.l_feats, report.l_score, report.l_desc, report.l_total)
        row = (epoch,) + tuple(sums / steps_per_epoch)
        history.append(row)
        if log is not None:
            log("epoch %d l_feats=%.6f l_score=%.6f l_desc=%.6f l_total=%.6f" % row)
    return params, student_config, history


def loss_history_csv(history) -> str:
    """Render training history as CSV with a fixed header."""
    lines = ["epoch,l_feats,l_score,l_desc,l_total"]
    for epoch, lf, lsc, ld, lt in history:
        lines.append(f"{int(epoch)},{lf:.8f},{lsc:.8f},{ld:.8f},{lt:.8f}")
    return "\n".join(lines) + "\n"
