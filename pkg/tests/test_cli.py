"""Command-line behavior: config resolution, hashing, determinism, cleanup."""

import os

import numpy as np
import pytest

from evimatch import io as eio
from evimatch.cli import build_parser, main, output_dir, resolve_config

TINY_SYNTH = ["--width", "16", "--height", "16", "--n", "2",
              "--duration", "1.0", "--dt-sim", "0.005", "--n-rects", "6"]


def parse(argv):
    return build_parser().parse_args(argv)


def tree_bytes(root):
    """Relative path -> file bytes for a whole directory tree."""
    out = {}
    for base, _, names in os.walk(root):
        for name in names:
            p = os.path.join(base, name)
            with open(p, "rb") as f:
                out[os.path.relpath(p, root)] = f.read()
    return out


# -- config resolution ---------------------------------------------------------

def test_defaults_resolve():
    args = parse(["synth"])
    cfg = resolve_config("synth", args)
    assert cfg["width"] == "64" and cfg["n"] == "16"
    assert cfg["threads"] == "1"


def test_flags_override_config_file(tmp_path):
    cfg_file = tmp_path / "run.cfg"
    cfg_file.write_text("width=32\nheight=24\n")
    args = parse(["synth", "--config", str(cfg_file), "--width", "48"])
    cfg = resolve_config("synth", args)
    assert cfg["width"] == "48"   # flag beats file
    assert cfg["height"] == "24"  # file beats default
    assert cfg["n"] == "16"       # untouched default


def test_unknown_config_key_rejected(tmp_path):
    cfg_file = tmp_path / "run.cfg"
    cfg_file.write_text("bogus=1\n")
    args = parse(["synth", "--config", str(cfg_file)])
    with pytest.raises(ValueError, match="unknown key 'bogus' for synth"):
        resolve_config("synth", args)


def test_missing_required_parameter():
    args = parse(["train-extractor"])
    with pytest.raises(ValueError, match="missing required parameters: --data"):
        resolve_config("train-extractor", args)


def test_threads_flag_recorded():
    args = parse(["synth", "--threads", "2"])
    assert resolve_config("synth", args)["threads"] == "2"


# -- output directory addressing -------------------------------------------------

def test_output_dir_content_addressed():
    args = parse(["synth"])
    cfg = resolve_config("synth", args)
    d1 = output_dir("synth", cfg, None)
    d2 = output_dir("synth", dict(cfg), None)
    assert d1 == d2
    assert d1.startswith("evimatch-synth-") and len(d1.split("-")[-1]) == 12
    cfg2 = dict(cfg, width="32")
    assert output_dir("synth", cfg2, None) != d1
    assert output_dir("synth", cfg, "custom") == "custom"


# -- end-to-end commands -----------------------------------------------------------

@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = str(tmp_path_factory.mktemp("data") / "ds")
    assert main(["synth", *TINY_SYNTH, "--out", out]) == 0
    return out


def test_synth_layout_and_config_echo(dataset):
    for name in ("events", "images", "depth"):
        assert os.path.isdir(os.path.join(dataset, name))
    for name in ("poses.txt", "intrinsics.txt", "manifest.txt", "config.txt"):
        assert os.path.isfile(os.path.join(dataset, name))
    lines = open(os.path.join(dataset, "config.txt")).read().splitlines()
    assert lines[0] == "command=synth"
    echoed = eio.parse_config("\n".join(lines[1:]))
    assert echoed["width"] == "16" and echoed["threads"] == "1"
    samples, _, w, h = eio.load_dataset(dataset)
    assert len(samples) == 2 and (w, h) == (16, 16)


def test_synth_reruns_byte_identical(tmp_path, dataset):
    again = str(tmp_path / "again")
    assert main(["synth", *TINY_SYNTH, "--out", again]) == 0
    assert tree_bytes(again) == tree_bytes(dataset)


def test_default_out_dir_is_hash_named(tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    assert main(["synth", *TINY_SYNTH]) == 0
    made = [n for n in os.listdir(tmp_path) if n.startswith("evimatch-synth-")]
    assert len(made) == 1
    assert "wrote 2 samples" in capsys.readouterr().out


def test_extract_and_match_pipeline(dataset, tmp_path):
    kp_out = str(tmp_path / "kp")
    rc = main(["extract", "--data", dataset, "--modality", "images",
               "--border", "2", "--nms", "2", "--k", "16", "--out", kp_out])
    assert rc == 0
    kp_dir = os.path.join(kp_out, "keypoints")
    names = sorted(os.listdir(kp_dir))
    assert names == ["000.txt", "000.txt.desc", "001.txt", "001.txt.desc"]
    kp = eio.load_keypoints(os.path.join(kp_dir, "000.txt"))
    assert 0 < len(kp.positions) <= 16

    m_out = str(tmp_path / "m")
    rc = main(["match", "--kp-a", kp_dir, "--kp-b", kp_dir, "--out", m_out])
    assert rc == 0
    match_dir = os.path.join(m_out, "matches")
    assert sorted(os.listdir(match_dir)) == ["000_000.txt", "001_001.txt"]
    # matching a keypoint set against itself must give the identity
    a = eio.load_matches(os.path.join(match_dir, "000_000.txt"))
    assert (a.matches[:, 0] == a.matches[:, 1]).all()
    assert len(a) == len(kp.positions)


def test_extract_threshold_mode(dataset, tmp_path):
    out = str(tmp_path / "kp_thr")
    rc = main(["extract", "--data", dataset, "--modality", "images",
               "--border", "2", "--nms", "2", "--threshold", "0.05",
               "--out", out])
    assert rc == 0
    kp = eio.load_keypoints(os.path.join(out, "keypoints", "000.txt"))
    assert (kp.scores > 0.05).all()


# -- failure semantics ---------------------------------------------------------

def test_failure_removes_created_dir(tmp_path, capsys):
    out = str(tmp_path / "should_vanish")
    rc = main(["synth", *TINY_SYNTH, "--n", "0", "--out", out])
    assert rc == 1
    err = capsys.readouterr().err
    assert err.startswith("evimatch synth: error:")
    assert err.count("\n") == 1
    assert not os.path.exists(out)


def test_failure_preserves_preexisting_dir(tmp_path):
    out = tmp_path / "mine"
    out.mkdir()
    sentinel = out / "keep.txt"
    sentinel.write_text("precious\n")
    rc = main(["synth", *TINY_SYNTH, "--n", "0", "--out", str(out)])
    assert rc == 1
    assert sentinel.read_text() == "precious\n"
    # partial outputs of the failed run are gone
    assert not (out / "config.txt").exists()


def test_bad_flag_value_fails_before_output(tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    rc = main(["synth", "--threads", "abc"])
    assert rc == 1
    assert "error" in capsys.readouterr().err
    assert os.listdir(tmp_path) == []


def test_bad_modality_message(dataset, tmp_path, capsys):
    rc = main(["extract", "--data", dataset, "--modality", "sounds",
               "--out", str(tmp_path / "x")])
    assert rc == 1
    assert "modality must be events or images" in capsys.readouterr().err


def test_unknown_matcher_and_missing_ckpt(dataset, tmp_path, capsys):
    kp_out = str(tmp_path / "kp")
    main(["extract", "--data", dataset, "--modality", "images",
          "--border", "2", "--nms", "2", "--k", "8", "--out", kp_out])
    kp_dir = os.path.join(kp_out, "keypoints")
    rc = main(["match", "--kp-a", kp_dir, "--kp-b", kp_dir,
               "--matcher", "bogus", "--out", str(tmp_path / "m1")])
    assert rc == 1
    assert "unknown matcher 'bogus'" in capsys.readouterr().err
    rc = main(["match", "--kp-a", kp_dir, "--kp-b", kp_dir,
               "--matcher", "ca", "--out", str(tmp_path / "m2")])
    assert rc == 1
    assert "requires --matcher-ckpt" in capsys.readouterr().err
