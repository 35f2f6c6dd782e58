"""Roundtrips and validation for the on-disk formats."""

import numpy as np
import pytest

from evimatch import io
from evimatch.datagen import LFDSample
from evimatch.events import EventStream
from evimatch.extractor import KeypointSet
from evimatch.geometry import CameraIntrinsics, RigidPose, rotation_about
from evimatch.matching import Assignment, GroundTruthMatches

RNG = np.random.default_rng(7)


def quantized_image(h, w, rng=RNG):
    return np.round(rng.uniform(size=(h, w)) * 255) / 255.0


# -- graymaps ---------------------------------------------------------------

def test_pgm_roundtrip_exact_on_quantized_values(tmp_path):
    img = quantized_image(6, 9)
    p = tmp_path / "a.pgm"
    io.save_pgm(p, img)
    np.testing.assert_array_equal(io.load_pgm(p), img)


def test_pgm_validation(tmp_path):
    with pytest.raises(ValueError, match="2-D"):
        io.save_pgm(tmp_path / "x.pgm", np.zeros((2, 2, 2)))
    with pytest.raises(ValueError, match=r"\[0, 1\]"):
        io.save_pgm(tmp_path / "x.pgm", np.full((2, 2), 1.5))


def test_pgm_reader_errors(tmp_path):
    p = tmp_path / "bad.pgm"
    p.write_bytes(b"P4\n1 1\n255\n\x00")
    with pytest.raises(ValueError, match="not a binary PGM"):
        io.load_pgm(p)
    p.write_bytes(b"P5\n1 1\n65535\n\x00\x00")
    with pytest.raises(ValueError, match="maxval 255"):
        io.load_pgm(p)
    p.write_bytes(b"P5\n2 2\n255\n\x00")
    with pytest.raises(ValueError, match="truncated pixel"):
        io.load_pgm(p)


def test_pgm_header_comments(tmp_path):
    p = tmp_path / "c.pgm"
    p.write_bytes(b"P5\n# a comment line\n2 1\n255\n\x00\xff")
    np.testing.assert_array_equal(io.load_pgm(p), [[0.0, 1.0]])


def test_ppm_roundtrip(tmp_path):
    rgb = RNG.integers(0, 256, size=(4, 5, 3), dtype=np.uint8)
    p = tmp_path / "a.ppm"
    io.save_ppm(p, rgb)
    np.testing.assert_array_equal(io.load_ppm(p), rgb)


def test_ppm_shape_validation(tmp_path):
    with pytest.raises(ValueError, match=r"\(H, W, 3\)"):
        io.save_ppm(tmp_path / "x.ppm", np.zeros((4, 5), dtype=np.uint8))


# -- tensors and depth --------------------------------------------------------

def test_tensor_roundtrip(tmp_path):
    t = RNG.standard_normal((3, 4, 5)).astype(np.float32)
    p = tmp_path / "a.tns"
    io.save_tensor(p, t)
    np.testing.assert_array_equal(io.load_tensor(p), t)


def test_tensor_errors(tmp_path):
    with pytest.raises(ValueError, match=r"\(C, H, W\)"):
        io.save_tensor(tmp_path / "x", np.zeros((2, 2)))
    p = tmp_path / "bad"
    p.write_bytes(b"XXXX" + b"\x00" * 12)
    with pytest.raises(ValueError, match="not a tensor dump"):
        io.load_tensor(p)
    p.write_bytes(io.TENSOR_MAGIC + b"\x00" * 4)
    with pytest.raises(ValueError, match="truncated header"):
        io.load_tensor(p)
    import struct
    p.write_bytes(io.TENSOR_MAGIC + struct.pack("<III", 1, 1, 2) + b"\x00" * 4)
    with pytest.raises(ValueError, match="expected 24 bytes, found 20"):
        io.load_tensor(p)


def test_depth_roundtrip(tmp_path):
    d = RNG.uniform(0.5, 9.0, size=(3, 7)).astype(np.float32)
    p = tmp_path / "d.f32"
    io.save_depth(p, d)
    np.testing.assert_array_equal(io.load_depth(p, 7, 3), d.astype(np.float64))


def test_depth_size_check(tmp_path):
    p = tmp_path / "d.f32"
    io.save_depth(p, np.zeros((3, 7)))
    with pytest.raises(ValueError, match="expected 96 bytes"):
        io.load_depth(p, 6, 4)


# -- keypoints and matches --------------------------------------------------

def random_keypoints(k=5, c=8):
    desc = RNG.standard_normal((k, c)).astype(np.float32)
    desc /= np.linalg.norm(desc, axis=1, keepdims=True)
    return KeypointSet(RNG.uniform(0, 30, size=(k, 2)),
                       desc, RNG.uniform(size=k).astype(np.float32))


def test_keypoints_roundtrip(tmp_path):
    kp = random_keypoints()
    p = tmp_path / "kp.txt"
    io.save_keypoints(p, kp)
    back = io.load_keypoints(p)
    np.testing.assert_array_equal(back.positions, kp.positions)
    np.testing.assert_array_equal(back.descriptors, kp.descriptors)
    # scores pass through a float repr; float32 -> float64 -> float32 is exact
    np.testing.assert_array_equal(back.scores, kp.scores)


def test_keypoints_empty_roundtrip(tmp_path):
    kp = KeypointSet(np.zeros((0, 2)), np.zeros((0, 4), np.float32),
                     np.zeros(0, np.float32))
    p = tmp_path / "kp.txt"
    io.save_keypoints(p, kp)
    back = io.load_keypoints(p)
    assert len(back.positions) == 0 and back.descriptors.shape == (0, 4)


def test_keypoints_errors(tmp_path):
    p = tmp_path / "kp.txt"
    io.save_keypoints(p, random_keypoints(k=3))
    p.write_text("1.0 2.0\n")
    with pytest.raises(ValueError, match="expected `x y score`"):
        io.load_keypoints(p)
    p.write_text("1.0 2.0 0.5\n")  # one keypoint, sidecar still has three
    with pytest.raises(ValueError, match="3 descriptors for 1 keypoints"):
        io.load_keypoints(p)
    side = tmp_path / "kp.txt.desc"
    side.write_bytes(b"nope")
    with pytest.raises(ValueError, match="not a descriptor sidecar"):
        io.load_keypoints(p)


def test_matches_roundtrip(tmp_path):
    a = Assignment(np.array([[0, 2], [1, 0], [3, 1]]),
                   np.array([0.9, 0.31, 0.77]))
    p = tmp_path / "m.txt"
    io.save_matches(p, a)
    back = io.load_matches(p)
    np.testing.assert_array_equal(back.matches, a.matches)
    np.testing.assert_array_equal(back.scores, a.scores)


def test_matches_empty_and_malformed(tmp_path):
    p = tmp_path / "m.txt"
    io.save_matches(p, Assignment(np.zeros((0, 2), np.int64), np.zeros(0)))
    assert io.load_matches(p).matches.shape == (0, 2)
    p.write_text("1 2 3 4\n")
    with pytest.raises(ValueError, match="expected `i j score`"):
        io.load_matches(p)


def test_gt_matches_roundtrip(tmp_path):
    gt = GroundTruthMatches(np.array([[0, 1], [2, 0]]),
                            np.array([1, 3]), np.array([2]))
    p = tmp_path / "gt.txt"
    io.save_gt_matches(p, gt)
    back = io.load_gt_matches(p)
    np.testing.assert_array_equal(back.matches, gt.matches)
    np.testing.assert_array_equal(back.unmatched_a, gt.unmatched_a)
    np.testing.assert_array_equal(back.unmatched_b, gt.unmatched_b)


def test_gt_matches_empty_sides(tmp_path):
    gt = GroundTruthMatches(np.array([[0, 0]]), np.zeros(0, np.int64),
                            np.zeros(0, np.int64))
    p = tmp_path / "gt.txt"
    io.save_gt_matches(p, gt)
    back = io.load_gt_matches(p)
    assert len(back.unmatched_a) == 0 and len(back.unmatched_b) == 0


def test_gt_matches_requires_trailer(tmp_path):
    p = tmp_path / "gt.txt"
    p.write_text("0 1 1.0\n")
    with pytest.raises(ValueError, match="missing #unmatched"):
        io.load_gt_matches(p)


def test_gt_matches_readable_as_plain_matches(tmp_path):
    # the trailer lines are comments to the plain match reader
    gt = GroundTruthMatches(np.array([[0, 1]]), np.array([1]), np.array([0]))
    p = tmp_path / "gt.txt"
    io.save_gt_matches(p, gt)
    a = io.load_matches(p)
    np.testing.assert_array_equal(a.matches, [[0, 1]])


# -- poses, intrinsics, configs -----------------------------------------------

def test_poses_roundtrip(tmp_path):
    poses = [RigidPose(rotation_about([0.0, 1.0, 0.0], np.radians(d)),
                       [0.1 * d, -0.2, 3.0]) for d in (0.0, 12.0, 170.0)]
    p = tmp_path / "poses.txt"
    io.save_poses(p, [0, 33000, 66000], poses)
    times, back = io.load_poses(p)
    assert times == [0, 33000, 66000]
    for orig, got in zip(poses, back):
        np.testing.assert_allclose(got.rotation, orig.rotation, atol=1e-12)
        np.testing.assert_allclose(got.translation, orig.translation, atol=1e-15)


def test_poses_malformed_line(tmp_path):
    p = tmp_path / "poses.txt"
    p.write_text("0 1 2 3\n")
    with pytest.raises(ValueError, match="expected `t_us tx ty tz"):
        io.load_poses(p)


def test_intrinsics_roundtrip(tmp_path):
    intr = CameraIntrinsics(fx=121.25, fy=119.5, cx=63.5, cy=47.5)
    p = tmp_path / "intr.txt"
    io.save_intrinsics(p, intr, 128, 96)
    back, w, h = io.load_intrinsics(p)
    assert back == intr and (w, h) == (128, 96)


def test_intrinsics_accepts_numpy_scalars(tmp_path):
    # field values may arrive as numpy float64; the text must stay parseable
    intr = CameraIntrinsics(fx=np.float64(25.6), fy=np.float64(25.6),
                            cx=np.float64(15.5), cy=np.float64(15.5))
    p = tmp_path / "intr.txt"
    io.save_intrinsics(p, intr, 32, 32)
    back, _, _ = io.load_intrinsics(p)
    assert back.fx == 25.6 and back.cy == 15.5


def test_poses_accept_numpy_translation(tmp_path):
    pose = RigidPose(np.eye(3), np.array([0.1, 0.2, 0.3]))
    p = tmp_path / "poses.txt"
    io.save_poses(p, [0], [pose])
    _, back = io.load_poses(p)
    np.testing.assert_allclose(back[0].translation, [0.1, 0.2, 0.3])


def test_intrinsics_missing_key(tmp_path):
    p = tmp_path / "intr.txt"
    p.write_text("fx=1.0\nfy=1.0\ncx=0.5\n")
    with pytest.raises(ValueError, match="missing intrinsics key"):
        io.load_intrinsics(p)


def test_config_roundtrip_and_sorted():
    values = {"zeta": "9", "alpha": "0.25", "mid": "hello"}
    text = io.format_config(values)
    assert text == "alpha=0.25\nmid=hello\nzeta=9\n"
    assert io.parse_config(text) == values


def test_config_parse_skips_comments_and_blanks():
    parsed = io.parse_config("# note\n\n a = 1 \n")
    assert parsed == {"a": "1"}
    with pytest.raises(ValueError, match="expected key=value"):
        io.parse_config("just words\n", path="p.cfg")


# -- dataset directories -------------------------------------------------------

def tiny_sample(t, seed):
    rng = np.random.default_rng(seed)
    n = 12
    ts = np.sort(rng.uniform(t - 0.05, t, n))
    ts = np.round(ts * 1e6) / 1e6  # storage keeps microsecond stamps
    events = EventStream(rng.integers(0, 8, n), rng.integers(0, 6, n), ts,
                         rng.choice([-1, 1], n), 8, 6,
                         t_start=t - 0.05, t_end=t)
    image = np.round(rng.uniform(size=(6, 8)) * 255) / 255.0
    depth = rng.uniform(1.0, 5.0, size=(6, 8)).astype(np.float32)
    pose = RigidPose(rotation_about([0, 0, 1.0], 0.1 * seed), [0.0, 0.1, 2.0])
    return LFDSample(t, events, image, depth, pose)


def test_dataset_roundtrip(tmp_path):
    samples = [tiny_sample(0.25, 1), tiny_sample(0.5, 2)]
    intr = CameraIntrinsics(fx=6.4, fy=6.4, cx=3.5, cy=2.5)
    root = tmp_path / "ds"
    io.save_dataset(root, samples, intr, 8, 6)
    back, intr2, w, h = io.load_dataset(root)
    assert intr2 == intr and (w, h) == (8, 6)
    assert len(back) == 2
    for orig, got in zip(samples, back):
        assert got.t == pytest.approx(orig.t, abs=1e-9)
        np.testing.assert_array_equal(got.events.xs, orig.events.xs)
        np.testing.assert_allclose(got.events.ts, orig.events.ts, atol=1e-9)
        np.testing.assert_array_equal(got.image, orig.image)
        np.testing.assert_array_equal(got.depth, orig.depth.astype(np.float64))
        np.testing.assert_allclose(got.pose.rotation, orig.pose.rotation,
                                   atol=1e-12)


def test_dataset_manifest_pose_disagreement(tmp_path):
    samples = [tiny_sample(0.25, 1)]
    root = tmp_path / "ds"
    io.save_dataset(root, samples, CameraIntrinsics(6.4, 6.4, 3.5, 2.5), 8, 6)
    (root / "manifest.txt").write_text("999999\n")
    with pytest.raises(ValueError, match="disagree"):
        io.load_dataset(root)


def test_pairs_roundtrip(tmp_path):
    pairs = [(0, 1, 0.62), (2, 3, 0.41)]
    p = tmp_path / "pairs.txt"
    io.save_pairs(p, pairs)
    assert io.load_pairs(p) == pairs
    p.write_text("0 1\n")
    with pytest.raises(ValueError, match="expected `idx_events idx_image"):
        io.load_pairs(p)


# -- visualization ---------------------------------------------------------------

def test_match_image_geometry_and_colors():
    image_a = np.zeros((10, 12))
    image_b = np.zeros((10, 12))
    kp_a = np.array([[2.0, 3.0], [8.0, 7.0]])
    kp_b = np.array([[4.0, 3.0], [9.0, 8.0]])
    assignment = Assignment(np.array([[0, 0], [1, 1]]), np.array([0.9, 0.8]))
    img = make = io.make_match_image(image_a, image_b, kp_a, kp_b, assignment,
                                     correct=[True, False], gap=8)
    assert img.shape == (10, 12 + 8 + 12, 3)
    assert img.dtype == np.uint8
    flat = img.reshape(-1, 3)
    assert (flat == io.GREEN).all(axis=1).any()
    assert (flat == io.RED).all(axis=1).any()
    assert (flat == io.DOT).all(axis=1).any()
    assert not (flat == io.YELLOW).all(axis=1).any()

    img2 = io.make_match_image(image_a, image_b, kp_a, kp_b, assignment)
    flat2 = img2.reshape(-1, 3)
    assert (flat2 == io.YELLOW).all(axis=1).any()
    assert not (flat2 == io.GREEN).all(axis=1).any()


def test_match_image_keypointset_inputs_and_validation():
    kp = random_keypoints(k=2, c=4)
    kp.positions[:] = [[1.0, 1.0], [3.0, 2.0]]
    assignment = Assignment(np.array([[0, 1]]), np.array([1.0]))
    img = io.make_match_image(np.zeros((5, 6)), np.zeros((5, 6)), kp, kp,
                              assignment)
    assert img.shape == (5, 6 + 8 + 6, 3)
    with pytest.raises(ValueError, match="correctness flags"):
        io.make_match_image(np.zeros((5, 6)), np.zeros((5, 6)), kp, kp,
                            assignment, correct=[True, False])
