"""Distillation loss masking and the extractor training loop."""

import numpy as np
import pytest

from evimatch.autodiff import Tensor
from evimatch.distillation import (DistillConfig, LFDBatch,
                                   default_student_config, lfd_loss,
                                   loss_history_csv, prepare_batch_arrays,
                                   train_extractor)
from evimatch.events import EventStream
from evimatch.extractor import (ExtractorConfig, TeacherConfig,
                                analytic_teacher, init_student)


def test_config_validation():
    with pytest.raises(ValueError, match="unknown representation"):
        DistillConfig(representation="sae")
    with pytest.raises(ValueError, match="positive"):
        DistillConfig(epochs=0)
    with pytest.raises(ValueError, match="loss term"):
        DistillConfig(use_feats=False, use_score=False, use_desc=False)


def test_input_channels_per_representation():
    assert DistillConfig(representation="voxel", bins=12).input_channels == 12
    assert DistillConfig(representation="time_surface").input_channels == 2
    assert DistillConfig(representation="stack", bins=6).input_channels == 6


def tiny_batch(mask_val=1.0):
    rng = np.random.default_rng(0)
    n, cd, h, w = 2, 3, 4, 4
    batch = LFDBatch(
        inputs=rng.normal(size=(n, 2, h, w)).astype(np.float32),
        teacher_feats=rng.normal(size=(n, 2, 2, 2)).astype(np.float32),
        teacher_score=rng.uniform(0, 1, (n, 1, h, w)).astype(np.float32),
        teacher_desc=rng.normal(size=(n, cd, h, w)).astype(np.float32),
        masks=np.full((n, 1, h, w), mask_val, np.float32),
    )
    student = (
        Tensor(rng.normal(size=(n, 2, 2, 2)).astype(np.float32), requires_grad=True),
        Tensor(rng.uniform(0, 1, (n, 1, h, w)).astype(np.float32), requires_grad=True),
        Tensor(rng.normal(size=(n, cd, h, w)).astype(np.float32), requires_grad=True),
    )
    return student, batch


def test_lfd_loss_matches_hand_computation():
    (sf, ss, sd), batch = tiny_batch()
    rep = lfd_loss(sf, ss, sd, batch, DistillConfig())
    l_feats = np.mean((sf.data - batch.teacher_feats) ** 2)
    l_score = np.mean((ss.data - batch.teacher_score) ** 2)
    l_desc = np.mean(np.abs(sd.data - batch.teacher_desc))
    assert rep.l_feats == pytest.approx(l_feats, rel=1e-5)
    assert rep.l_score == pytest.approx(l_score, rel=1e-5)
    assert rep.l_desc == pytest.approx(l_desc, rel=1e-5)
    assert rep.l_total == pytest.approx(l_feats + l_score + l_desc, rel=1e-5)
    assert not rep.empty_mask


def test_lfd_loss_mask_restricts_support():
    (sf, ss, sd), batch = tiny_batch()
    masks = np.zeros_like(batch.masks)
    masks[0, 0, 1, 1] = 1.0  # a single supported pixel
    batch = LFDBatch(batch.inputs, batch.teacher_feats, batch.teacher_score,
                     batch.teacher_desc, masks)
    rep = lfd_loss(sf, ss, sd, batch, DistillConfig())
    want_score = (ss.data[0, 0, 1, 1] - batch.teacher_score[0, 0, 1, 1]) ** 2
    want_desc = np.abs(sd.data[0, :, 1, 1] - batch.teacher_desc[0, :, 1, 1]).mean()
    assert rep.l_score == pytest.approx(want_score, rel=1e-4)
    assert rep.l_desc == pytest.approx(want_desc, rel=1e-4)


def test_lfd_loss_empty_mask_flagged_not_nan():
    (sf, ss, sd), batch = tiny_batch(mask_val=0.0)
    rep = lfd_loss(sf, ss, sd, batch, DistillConfig())
    assert rep.empty_mask
    assert rep.l_score == 0.0 and rep.l_desc == 0.0
    assert np.isfinite(rep.l_total)
    assert rep.l_total == pytest.approx(rep.l_feats)


def test_lfd_loss_disabled_terms_are_zero():
    (sf, ss, sd), batch = tiny_batch()
    rep = lfd_loss(sf, ss, sd, batch,
                   DistillConfig(use_feats=False, use_desc=False))
    assert rep.l_feats == 0.0 and rep.l_desc == 0.0
    assert rep.l_total == pytest.approx(rep.l_score)


def test_lfd_loss_total_differentiable():
    (sf, ss, sd), batch = tiny_batch()
    rep = lfd_loss(sf, ss, sd, batch, DistillConfig())
    rep.total.backward()
    assert sf.grad is not None and ss.grad is not None and sd.grad is not None


SMALL_TEACHER = TeacherConfig(desc_dim=8, latent_dim=8, stride=4,
                              orientations=8, grid=1, tap_spacing=2)
STUDENT = ExtractorConfig(in_channels=4, channels=(6, 6), pools=(1, 2),
                          latent_dim=8, desc_dim=8, score_head=(6,),
                          desc_head=(6,))
RECIPE = DistillConfig(representation="voxel", bins=4, lr=3e-3, epochs=4,
                       batch_size=2, n_pairs=8, seed=0)


def training_samples(n=4, size=16, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        m = 30
        xs = rng.integers(0, size, m)
        ys = rng.integers(0, size, m)
        ts = np.sort(rng.uniform(0.0, 0.05, m))
        ps = rng.choice([-1, 1], m)
        events = EventStream(xs, ys, ts, ps, size, size)
        image = np.clip(rng.uniform(0.2, 0.8, (size, size)), 0, 1)
        out.append((events, image))
    return out


def small_teacher(image):
    # stride-4 teacher shrunk to match the stride-2 student: crop feats
    maps = analytic_teacher(image, SMALL_TEACHER)
    h, w = np.asarray(image).shape
    feats = np.repeat(np.repeat(maps.feats, 2, axis=1), 2, axis=2)
    return type(maps)(feats[:, :h // 2, :w // 2], maps.score, maps.desc)


def test_prepare_batch_shapes():
    xs, tf, ts, td, ms = prepare_batch_arrays(training_samples(), RECIPE,
                                              teacher=small_teacher)
    assert xs.shape == (4, 4, 16, 16)
    assert tf.shape == (4, 8, 8, 8)
    assert ts.shape == (4, 1, 16, 16)
    assert td.shape == (4, 8, 16, 16)
    assert ms.shape == (4, 1, 16, 16)
    assert set(np.unique(ms)) <= {0.0, 1.0}


def test_prepare_batch_rejects_non_stream():
    with pytest.raises(TypeError, match="EventStream"):
        prepare_batch_arrays([(np.zeros(3), np.zeros((16, 16)))], RECIPE)


def test_default_student_config_tracks_teacher():
    cfg = default_student_config(RECIPE, SMALL_TEACHER)
    assert cfg.in_channels == 4
    assert cfg.latent_dim == 8 and cfg.desc_dim == 8


def test_train_extractor_loss_decreases():
    params, cfg, history = train_extractor(
        training_samples(), RECIPE, student_config=STUDENT,
        teacher=small_teacher)
    assert cfg is STUDENT
    assert len(history) == RECIPE.epochs
    first, last = history[0][4], history[-1][4]
    assert last < first
    assert set(params) == set(init_student(STUDENT))


def test_train_extractor_deterministic():
    kw = dict(config=RECIPE, student_config=STUDENT, teacher=small_teacher)
    p1, _, h1 = train_extractor(training_samples(), **kw)
    p2, _, h2 = train_extractor(training_samples(), **kw)
    assert h1 == h2
    assert all(np.array_equal(p1[k].data, p2[k].data) for k in p1)


def test_train_extractor_channel_mismatch():
    bad = ExtractorConfig(in_channels=3, channels=(6, 6), pools=(1, 2),
                          latent_dim=8, desc_dim=8, score_head=(6,),
                          desc_head=(6,))
    with pytest.raises(ValueError, match="input channels"):
        train_extractor(training_samples(), RECIPE, student_config=bad,
                        teacher=small_teacher)


def test_train_extractor_empty_samples():
    with pytest.raises(ValueError, match="no training samples"):
        train_extractor([], RECIPE, student_config=STUDENT,
                        teacher=small_teacher)


def test_train_extractor_aborts_on_nonfinite():
    def poisoned(image):
        maps = small_teacher(image)
        bad = maps.feats.copy()
        bad[0, 0, 0] = np.nan
        return type(maps)(bad, maps.score, maps.desc)

    with pytest.raises(RuntimeError, match="epoch 0"):
        train_extractor(training_samples(), RECIPE, student_config=STUDENT,
                        teacher=poisoned)


def test_loss_history_csv_layout():
    text = loss_history_csv([(0, 1.0, 0.5, 0.25, 1.75)])
    lines = text.splitlines()
    assert lines[0] == "epoch,l_feats,l_score,l_desc,l_total"
    assert lines[1] == "0,1.00000000,0.50000000,0.25000000,1.75000000"
    assert text.endswith("\n")

