"""Cosine schedule, Adam updates and the binary checkpoint format."""

import numpy as np
import pytest

import evimatch.autodiff as ad
from evimatch.autodiff import Tensor
from evimatch.optim import (Adam, as_parameters, cosine_lr, load_checkpoint,
                            parameter_count, save_checkpoint)


def test_cosine_endpoints_and_midpoint():
    assert cosine_lr(0.1, 0.0) == pytest.approx(0.1)
    assert cosine_lr(0.1, 1.0) == 0.0  # exactly zero at the end
    assert cosine_lr(0.1, 0.5) == pytest.approx(0.05)


def test_cosine_rejects_out_of_range_progress():
    with pytest.raises(ValueError):
        cosine_lr(0.1, 1.5)


def test_cosine_monotone_decreasing():
    vals = [cosine_lr(1.0, p) for p in np.linspace(0, 1, 50)]
    assert all(a >= b for a, b in zip(vals, vals[1:]))


def test_adam_first_step_matches_closed_form():
    # with bias correction the first Adam step is lr * g / (|g| + eps)
    p = Tensor(np.array([1.0, -2.0], dtype=np.float32), requires_grad=True)
    g = np.array([0.3, -0.7], dtype=np.float32)
    p.grad = g.copy()
    opt = Adam({"p": p}, lr=0.01)
    opt.step()
    expect = np.array([1.0, -2.0]) - 0.01 * g / (np.abs(g) + 1e-8)
    np.testing.assert_allclose(p.data, expect, rtol=1e-5)


def test_adam_skips_params_without_grad():
    p = Tensor(np.ones(2, dtype=np.float32), requires_grad=True)
    q = Tensor(np.ones(2, dtype=np.float32), requires_grad=True)
    p.grad = np.full(2, 0.5, dtype=np.float32)
    opt = Adam({"p": p, "q": q}, lr=0.1)
    opt.step()
    assert not np.array_equal(p.data, np.ones(2))
    np.testing.assert_array_equal(q.data, np.ones(2))


def test_adam_clears_grads_after_step():
    p = Tensor(np.ones(2, dtype=np.float32), requires_grad=True)
    p.grad = np.ones(2, dtype=np.float32)
    opt = Adam({"p": p}, lr=0.1)
    opt.step()
    assert p.grad is None


def test_adam_cosine_schedule_progress():
    p = Tensor(np.ones(1, dtype=np.float32), requires_grad=True)
    opt = Adam({"p": p}, lr=1.0, total_steps=4)
    assert opt.current_lr() == pytest.approx(1.0)  # first update at lr0
    for k in range(4):
        p.grad = np.ones(1, dtype=np.float32)
        opt.step()
    assert opt.current_lr() == 0.0


def test_adam_converges_on_quadratic():
    p = Tensor(np.array([3.0, -2.0], dtype=np.float32), requires_grad=True)
    opt = Adam({"p": p}, lr=0.1)
    for _ in range(300):
        loss = ad.sum_all(ad.square(p))
        loss.backward()
        opt.step()
    assert np.abs(p.data).max() < 1e-3


def test_checkpoint_roundtrip(tmp_path):
    params = {
        "w": Tensor(np.arange(12, dtype=np.float32).reshape(3, 4)),
        "b": Tensor(np.array([0.5, -0.5], dtype=np.float32)),
        "scale": Tensor(np.float32(2.5)),  # 0-d must survive
    }
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, params)
    back = load_checkpoint(path)
    assert list(back) == ["w", "b", "scale"]  # order preserved
    np.testing.assert_array_equal(back["w"], params["w"].data)
    np.testing.assert_array_equal(back["b"], params["b"].data)
    assert back["scale"].shape == ()
    assert float(back["scale"]) == 2.5


def test_checkpoint_accepts_plain_arrays(tmp_path):
    path = tmp_path / "arr.ckpt"
    save_checkpoint(path, {"x": np.ones((2, 2), dtype=np.float32)})
    np.testing.assert_array_equal(load_checkpoint(path)["x"], np.ones((2, 2)))


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "junk.ckpt"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(ValueError, match="not a checkpoint"):
        load_checkpoint(path)


def test_checkpoint_truncated(tmp_path):
    path = tmp_path / "cut.ckpt"
    save_checkpoint(path, {"w": np.ones((4, 4), dtype=np.float32)})
    raw = path.read_bytes()
    path.write_bytes(raw[:-10])
    with pytest.raises(ValueError, match="truncated"):
        load_checkpoint(path)


def test_checkpoint_trailing_bytes(tmp_path):
    path = tmp_path / "pad.ckpt"
    save_checkpoint(path, {"w": np.ones(3, dtype=np.float32)})
    path.write_bytes(path.read_bytes() + b"\x00\x00")
    with pytest.raises(ValueError, match="trailing bytes"):
        load_checkpoint(path)


def test_as_parameters_and_count():
    params = as_parameters({"a": np.zeros((2, 3)), "b": np.zeros(5)})
    assert all(p.requires_grad for p in params.values())
    assert all(p.data.dtype == np.float32 for p in params.values())
    assert parameter_count(params) == 11
