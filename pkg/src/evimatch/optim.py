"""Optimization utilities: Adam with a cosine learning-rate schedule, plus
the binary checkpoint format used to persist parameter dictionaries.
"""

from __future__ import annotations

import struct

import numpy as np

from .autodiff import Tensor

CKPT_MAGIC = b"CKPT"


def cosine_lr(lr0: float, progress: float) -> float:
    """Cosine decay from lr0 at progress 0 to exactly 0 at progress 1."""
    if not 0.0 <= progress <= 1.0:
        raise ValueError(f"progress must be in [0, 1], got {progress}")
    return lr0 * 0.5 * (1.0 + float(np.cos(np.pi * progress)))


class Adam:
    """Adam over a name -> Tensor parameter dict.

    When ``total_steps`` is given the learning rate follows the cosine
    schedule with progress = completed_steps / total_steps, so the first
    update runs at lr0 and the rate would hit zero just past the final
    update.  Gradients are read from ``.grad`` and cleared after the step.
    """

    def __init__(self, params, lr, total_steps=None, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr0 = float(lr)
        self.total_steps = total_steps
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def current_lr(self):
        if self.total_steps is None:
            return self.lr0
        return cosine_lr(self.lr0, min(self.t / self.total_steps, 1.0))

    def step(self):
        lr = self.current_lr()
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p.data -= (lr / c1) * m / (np.sqrt(v / c2) + self.eps)
            p.grad = None

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


def save_checkpoint(path, params):
    """Write a parameter dict in the binary checkpoint format.

    Layout: magic "CKPT", u32 parameter count, then per parameter a u32
    name length, the utf-8 name, u32 ndim, u32 dims, and the float32 data
    in C order.  Little-endian throughout.  Dict order is preserved.
    """
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<I", len(params)))
        for name, p in params.items():
            # asarray keeps 0-d parameter shapes; ascontiguousarray would not
            arr = np.asarray(p.data if isinstance(p, Tensor) else p,
                             dtype="<f4", order="C")
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def load_checkpoint(path):
    """Read a checkpoint back into a name -> float32 ndarray dict."""
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    off = 4

    def take(n, what):
        nonlocal off
        if off + n > len(raw):
            raise ValueError(f"{path}: truncated while reading {what}")
        piece = raw[off:off + n]
        off += n
        return piece

    (count,) = struct.unpack("<I", take(4, "parameter count"))
    params = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4, "name length"))
        name = take(name_len, "name").decode("utf-8")
        (ndim,) = struct.unpack("<I", take(4, "ndim"))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim, "dims"))
        n = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(take(4 * n, f"data of {name}"), dtype="<f4")
        params[name] = data.reshape(shape).astype(np.float32)
    if off != len(raw):
        raise ValueError(f"{path}: {len(raw) - off} trailing bytes after last parameter")
    return params


def as_parameters(arrays):
    """Wrap a name -> ndarray dict as trainable Tensors."""
    return {k: Tensor(np.asarray(v, dtype=np.float32), requires_grad=True)
            for k, v in arrays.items()}


def parameter_count(params):
    return int(sum(int(np.prod(p.data.shape if isinstance(p, Tensor) else p.shape))
                   for p in params.values()))
