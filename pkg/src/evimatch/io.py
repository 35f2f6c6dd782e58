"""File formats: images, tensors, dumps, configs and dataset directories.

Everything here is deterministic byte-for-byte given the same inputs, which
is what makes rerun-identity of the pipeline testable.  Binary formats are
little-endian with short magic headers; text formats are plain ASCII with
full-precision floats (repr round-trips exactly).
"""

from __future__ import annotations

import os
import struct

import numpy as np

from .datagen import LFDSample
from .events import EventStream, load_events, save_events
from .extractor import KeypointSet
from .geometry import CameraIntrinsics, RigidPose, quat_to_rotmat, rotmat_to_quat
from .matching import Assignment, GroundTruthMatches

TENSOR_MAGIC = b"TNS1"
DESC_MAGIC = b"DSC1"


# -- portable graymaps ----------------------------------------------------

def save_pgm(path, image):
    """8-bit binary PGM; the float image in [0, 1] is quantized to 255 levels."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"expected a 2-D image, got shape {img.shape}")
    if img.min() < -1e-6 or img.max() > 1.0 + 1e-6:
        raise ValueError("image values must lie in [0, 1]")
    q = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = q.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(q.tobytes())


def _pnm_tokens(raw, count, path):
    tokens = []
    pos = 0
    while len(tokens) < count:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"{path}: truncated header")
        tokens.append(raw[start:pos])
    return tokens, pos + 1  # one whitespace byte separates header and data


def load_pgm(path):
    """Read a binary PGM back to floats in [0, 1]."""
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:2] != b"P5":
        raise ValueError(f"{path}: not a binary PGM file")
    tokens, off = _pnm_tokens(raw, 4, path)
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 is supported, got {maxval}")
    data = raw[off:off + w * h]
    if len(data) < w * h:
        raise ValueError(f"{path}: truncated pixel data")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w) / 255.0


def save_ppm(path, rgb):
    """Binary PPM (P6) from a (H, W, 3) uint8 array."""
    img = np.asarray(rgb, dtype=np.uint8)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got shape {img.shape}")
    h, w = img.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(img.tobytes())


def load_ppm(path):
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:2] != b"P6":
        raise ValueError(f"{path}: not a binary PPM file")
    tokens, off = _pnm_tokens(raw, 4, path)
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 is supported, got {maxval}")
    data = raw[off:off + w * h * 3]
    if len(data) < w * h * 3:
        raise ValueError(f"{path}: truncated pixel data")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w, 3).copy()


# -- tensors and depth -----------------------------------------------------

def save_tensor(path, data):
    """Debug dump of a (C, H, W) float tensor: "TNS1", u32 dims, f32 data."""
    arr = np.ascontiguousarray(np.asarray(data), dtype="<f4")
    if arr.ndim != 3:
        raise ValueError(f"expected a (C, H, W) tensor, got shape {arr.shape}")
    with open(path, "wb") as f:
        f.write(TENSOR_MAGIC)
        f.write(struct.pack("<III", *arr.shape))
        f.write(arr.tobytes())


def load_tensor(path):
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != TENSOR_MAGIC:
        raise ValueError(f"{path}: not a tensor dump")
    if len(raw) < 16:
        raise ValueError(f"{path}: truncated header")
    c, h, w = struct.unpack("<III", raw[4:16])
    n = c * h * w * 4
    if len(raw) != 16 + n:
        raise ValueError(f"{path}: expected {16 + n} bytes, found {len(raw)}")
    return np.frombuffer(raw[16:], dtype="<f4").reshape(c, h, w).copy()


def save_depth(path, depth):
    """Raw little-endian float32 H x W, row-major, no header."""
    arr = np.ascontiguousarray(np.asarray(depth), dtype="<f4")
    if arr.ndim != 2:
        raise ValueError(f"expected a 2-D depth map, got shape {arr.shape}")
    with open(path, "wb") as f:
        f.write(arr.tobytes())


def load_depth(path, width: int, height: int):
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) != width * height * 4:
        raise ValueError(f"{path}: expected {width * height * 4} bytes for "
                         f"{width}x{height} float32, found {len(raw)}")
    return np.frombuffer(raw, dtype="<f4").reshape(height, width).astype(np.float64)


# -- keypoints and matches --------------------------------------------------

def descriptor_sidecar_path(path):
    return str(path) + ".desc"


def save_keypoints(path, kp: KeypointSet):
    """Text lines `x y score` plus a binary descriptor sidecar."""
    lines = []
    for (x, y), s in zip(kp.positions, kp.scores):
        lines.append(f"{float(x)!r} {float(y)!r} {float(s)!r}")
    with open(path, "w") as f:
        f.write("\n".join(lines) + ("\n" if lines else ""))
    d = np.ascontiguousarray(kp.descriptors, dtype="<f4")
    with open(descriptor_sidecar_path(path), "wb") as f:
        f.write(DESC_MAGIC)
        f.write(struct.pack("<II", d.shape[0], d.shape[1] if d.ndim == 2 else 0))
        f.write(d.tobytes())


def load_keypoints(path) -> KeypointSet:
    positions, scores = [], []
    with open(path) as f:
        for ln, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 3:
                raise ValueError(f"{path}:{ln}: expected `x y score`")
            positions.append((float(parts[0]), float(parts[1])))
            scores.append(float(parts[2]))
    side = descriptor_sidecar_path(path)
    with open(side, "rb") as f:
        raw = f.read()
    if raw[:4] != DESC_MAGIC:
        raise ValueError(f"{side}: not a descriptor sidecar")
    k, c = struct.unpack("<II", raw[4:12])
    if k != len(positions):
        raise ValueError(f"{side}: {k} descriptors for {len(positions)} keypoints")
    if len(raw) != 12 + k * c * 4:
        raise ValueError(f"{side}: truncated descriptor data")
    desc = np.frombuffer(raw[12:], dtype="<f4").reshape(k, c)
    return KeypointSet(np.asarray(positions, dtype=np.float64).reshape(-1, 2),
                       desc.copy(), np.asarray(scores, dtype=np.float32))


def save_matches(path, assignment: Assignment):
    """Text lines `i j score`."""
    lines = [f"{int(i)} {int(j)} {float(s)!r}"
             for (i, j), s in zip(assignment.matches, assignment.scores)]
    with open(path, "w") as f:
        f.write("\n".join(lines) + ("\n" if lines else ""))


def save_gt_matches(path, gt: GroundTruthMatches):
    """Match-dump format with the unmatched index sets as a trailer."""
    lines = [f"{int(i)} {int(j)} 1.0" for i, j in gt.matches]
    lines.append("#unmatched_E " + " ".join(str(int(i)) for i in gt.unmatched_a))
    lines.append("#unmatched_I " + " ".join(str(int(j)) for j in gt.unmatched_b))
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def load_matches(path) -> Assignment:
    pairs, scores = [], []
    with open(path) as f:
        for ln, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 3:
                raise ValueError(f"{path}:{ln}: expected `i j score`")
            pairs.append((int(parts[0]), int(parts[1])))
            scores.append(float(parts[2]))
    return Assignment(np.asarray(pairs, dtype=np.int64).reshape(-1, 2),
                      np.asarray(scores, dtype=np.float64))


def load_gt_matches(path) -> GroundTruthMatches:
    pairs = []
    unmatched = {"#unmatched_E": None, "#unmatched_I": None}
    with open(path) as f:
        for ln, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            parts = line.split()
            if parts[0] in unmatched:
                unmatched[parts[0]] = np.asarray([int(v) for v in parts[1:]],
                                                 dtype=np.int64)
                continue
            if line.startswith("#"):
                continue
            if len(parts) != 3:
                raise ValueError(f"{path}:{ln}: expected `i j score`")
            pairs.append((int(parts[0]), int(parts[1])))
    if unmatched["#unmatched_E"] is None or unmatched["#unmatched_I"] is None:
        raise ValueError(f"{path}: missing #unmatched_E/#unmatched_I trailer")
    return GroundTruthMatches(np.asarray(pairs, dtype=np.int64).reshape(-1, 2),
                              unmatched["#unmatched_E"], unmatched["#unmatched_I"])


# -- poses, intrinsics, configs ---------------------------------------------

def save_poses(path, times_us, poses):
    """Lines `t_us tx ty tz qx qy qz qw`, world-to-camera, scalar-last."""
    lines = []
    for t_us, pose in zip(times_us, poses):
        q = [float(v) for v in rotmat_to_quat(pose.rotation)]
        tx, ty, tz = (float(v) for v in pose.translation)
        lines.append(f"{int(t_us)} {tx!r} {ty!r} {tz!r} "
                     f"{q[0]!r} {q[1]!r} {q[2]!r} {q[3]!r}")
    with open(path, "w") as f:
        f.write("\n".join(lines) + ("\n" if lines else ""))


def load_poses(path):
    """Returns aligned lists (times_us, poses)."""
    times, poses = [], []
    with open(path) as f:
        for ln, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 8:
                raise ValueError(f"{path}:{ln}: expected `t_us tx ty tz qx qy qz qw`")
            times.append(int(parts[0]))
            vals = [float(v) for v in parts[1:]]
            poses.append(RigidPose(quat_to_rotmat(vals[3:7]), vals[0:3]))
    return times, poses


def save_intrinsics(path, intr: CameraIntrinsics, width: int, height: int):
    with open(path, "w") as f:
        f.write(f"fx={float(intr.fx)!r}\nfy={float(intr.fy)!r}\n"
                f"cx={float(intr.cx)!r}\ncy={float(intr.cy)!r}\n"
                f"width={int(width)}\nheight={int(height)}\n")


def load_intrinsics(path):
    """Returns (CameraIntrinsics, width, height)."""
    kv = parse_config(open(path).read(), path=path)
    try:
        intr = CameraIntrinsics(fx=float(kv["fx"]), fy=float(kv["fy"]),
                                cx=float(kv["cx"]), cy=float(kv["cy"]))
        return intr, int(kv["width"]), int(kv["height"])
    except KeyError as e:
        raise ValueError(f"{path}: missing intrinsics key {e.args[0]}") from None


def format_config(values: dict) -> str:
    """key=value lines, keys sorted for stable output."""
    return "".join(f"{k}={values[k]}\n" for k in sorted(values))


def parse_config(text: str, path="config") -> dict:
    values = {}
    for ln, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{ln}: expected key=value, got {line!r}")
        key, _, val = line.partition("=")
        values[key.strip()] = val.strip()
    return values


# -- dataset directories ------------------------------------------------------

def save_dataset(root, samples, intrinsics: CameraIntrinsics,
                 width: int, height: int):
    """Write the dataset directory layout for a list of aligned samples."""
    os.makedirs(os.path.join(root, "events"), exist_ok=True)
    os.makedirs(os.path.join(root, "images"), exist_ok=True)
    os.makedirs(os.path.join(root, "depth"), exist_ok=True)
    times_us = [int(round(s.t * 1e6)) for s in samples]
    for i, s in enumerate(samples):
        save_events(os.path.join(root, "events", f"{i:03d}.evt"), s.events)
        save_pgm(os.path.join(root, "images", f"{i:03d}.pgm"), s.image)
        save_depth(os.path.join(root, "depth", f"{i:03d}.f32"), s.depth)
    save_poses(os.path.join(root, "poses.txt"), times_us,
               [s.pose for s in samples])
    save_intrinsics(os.path.join(root, "intrinsics.txt"), intrinsics,
                    width, height)
    with open(os.path.join(root, "manifest.txt"), "w") as f:
        f.write("".join(f"{t}\n" for t in times_us))


def load_dataset(root):
    """Read a dataset directory back: (samples, intrinsics, width, height)."""
    intr, width, height = load_intrinsics(os.path.join(root, "intrinsics.txt"))
    with open(os.path.join(root, "manifest.txt")) as f:
        times_us = [int(line.strip()) for line in f if line.strip()]
    pose_times, poses = load_poses(os.path.join(root, "poses.txt"))
    if pose_times != times_us:
        raise ValueError(f"{root}: poses.txt and manifest.txt disagree")
    samples = []
    for i, t_us in enumerate(times_us):
        events = load_events(os.path.join(root, "events", f"{i:03d}.evt"))
        image = load_pgm(os.path.join(root, "images", f"{i:03d}.pgm"))
        depth = load_depth(os.path.join(root, "depth", f"{i:03d}.f32"),
                           width, height)
        samples.append(LFDSample(t_us / 1e6, events, image, depth, poses[i]))
    return samples, intr, width, height


def save_pairs(path, pairs):
    """Benchmark list: lines `idx_events idx_image overlap`."""
    with open(path, "w") as f:
        f.write("".join(f"{int(i)} {int(j)} {float(ov)!r}\n"
                        for i, j, ov in pairs))


def load_pairs(path):
    pairs = []
    with open(path) as f:
        for ln, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 3:
                raise ValueError(f"{path}:{ln}: expected `idx_events idx_image overlap`")
            pairs.append((int(parts[0]), int(parts[1]), float(parts[2])))
    return pairs


# -- visualization -------------------------------------------------------------

def _draw_line(img, x0, y0, x1, y1, color):
    """Bresenham segment, clipped to the image."""
    h, w = img.shape[:2]
    x0, y0, x1, y1 = int(round(x0)), int(round(y0)), int(round(x1)), int(round(y1))
    dx, dy = abs(x1 - x0), -abs(y1 - y0)
    sx = 1 if x0 < x1 else -1
    sy = 1 if y0 < y1 else -1
    err = dx + dy
    while True:
        if 0 <= x0 < w and 0 <= y0 < h:
            img[y0, x0] = color
        if x0 == x1 and y0 == y1:
            break
        e2 = 2 * err
        if e2 >= dy:
            err += dy
            x0 += sx
        if e2 <= dx:
            err += dx
            y0 += sy


def _draw_dot(img, x, y, color):
    h, w = img.shape[:2]
    xi, yi = int(round(x)), int(round(y))
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            if 0 <= yi + dy < h and 0 <= xi + dx < w:
                img[yi + dy, xi + dx] = color

GREEN = (40, 200, 40)
RED = (220, 50, 50)
YELLOW = (230, 200, 40)
DOT = (90, 140, 230)


def make_match_image(image_a, image_b, kp_a, kp_b, assignment: Assignment,
                     correct=None, gap: int = 8):
    """Side-by-side match visualization as an (H, 2W+gap, 3) uint8 array.

    Lines are green for correct matches, red for incorrect ones, and
    yellow when no ground truth is available (correct is None).
    """
    a = np.asarray(image_a, dtype=np.float64)
    b = np.asarray(image_b, dtype=np.float64)
    h = max(a.shape[0], b.shape[0])
    wa, wb = a.shape[1], b.shape[1]
    canvas = np.zeros((h, wa + gap + wb, 3), dtype=np.uint8)
    canvas[:a.shape[0], :wa] = np.round(np.clip(a, 0, 1) * 255)[..., None]
    canvas[:b.shape[0], wa + gap:] = np.round(np.clip(b, 0, 1) * 255)[..., None]
    pa = np.asarray(kp_a.positions if isinstance(kp_a, KeypointSet) else kp_a)
    pb = np.asarray(kp_b.positions if isinstance(kp_b, KeypointSet) else kp_b)
    for x, y in pa:
        _draw_dot(canvas, x, y, DOT)
    for x, y in pb:
        _draw_dot(canvas, x + wa + gap, y, DOT)
    if correct is not None and len(correct) != len(assignment):
        raise ValueError("correctness flags must align with the matches")
    for m, (i, j) in enumerate(assignment.matches):
        if correct is None:
            color = YELLOW
        else:
            color = GREEN if correct[m] else RED
        _draw_line(canvas, pa[i, 0], pa[i, 1],
                   pb[j, 0] + wa + gap, pb[j, 1], color)
    return canvas
