import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lipread3d.dataio import (AugmentDraw, AugmentSpec, ClipSet, CropSpec, Manifest, NormStats, SyntheticTaskSpec,
                              VideoSample, apply_augment, augment, class_scripts, crop, crop_and_normalize,
                              decode_pnm, default_crop, gen_synthetic, load_clip, load_split, motion_task, read_pgm,
                              static_shape_task, synth_split, write_pgm)
from lipread3d.errors import ContractError, IngestionError, ShapeError
from lipread3d.tensor import Rng


def test_pgm_round_trip(tmp_path):
    img = np.arange(12, dtype=np.float32).reshape(3, 4) / 11
    write_pgm(tmp_path / "a.pgm", img)
    back = read_pgm(tmp_path / "a.pgm")
    assert back.shape == (3, 4)
    assert np.abs(back - img).max() <= 0.5 / 255 + 1e-7


def test_pnm_variants():
    p5_16 = b"P5\n# comment\n2 1\n65535\n" + np.array([0, 65535], ">u2").tobytes()
    assert decode_pnm(p5_16).tolist() == [[0.0, 1.0]]
    p6 = b"P6 1 1 255\n" + bytes([255, 0, 0])
    assert decode_pnm(p6)[0, 0] == pytest.approx(0.299, abs=1e-6)


@pytest.mark.parametrize("buf", [b"P2 1 1 255\n\x00", b"P5 2 2 255\n\x00", b"P5 0 1 255\n", b"garbage"])
def test_pnm_rejects_bad_files(buf):
    with pytest.raises(IngestionError):
        decode_pnm(buf)


def test_missing_frame_is_an_ingestion_error(tmp_path):
    with pytest.raises(IngestionError):
        read_pgm(tmp_path / "nope.pgm")


def _tiny_spec(**kw):
    base = dict(classes=3, samples_per_class=2, frame_size=(16, 16), clip_length=6, window=4, margin=2)
    base.update(kw)
    return SyntheticTaskSpec(**base)


def test_generated_split_loads_back(tmp_path):
    spec = _tiny_spec()
    path = gen_synthetic(spec, "train", tmp_path)
    m = Manifest.load(path)
    assert len(m) == 6 and m.classes == 3 and m.crop_size == (16, 16) and m.frame_size == (20, 20)
    sample = load_clip(m.entries[0], m.root, m.clip_length)
    assert sample.frames.shape == (6, 20, 20) and sample.label == 0
    clips, _ = synth_split(spec, "train")[:2]
    assert np.abs(sample.frames - clips[0]).max() <= 0.5 / 255 + 1e-6
    data, _ = load_split(path, default_crop(m))
    assert data.gray.shape == (6, 6, 16, 16) and data.vocab == spec.words()


def test_manifest_errors(tmp_path):
    (tmp_path / "bad.json").write_text("{")
    with pytest.raises(IngestionError):
        Manifest.load(tmp_path / "bad.json")
    (tmp_path / "m.json").write_text(json.dumps({"entries": [{"label": 0}]}))
    with pytest.raises(IngestionError):
        Manifest.load(tmp_path / "m.json")
    with pytest.raises(IngestionError):
        Manifest.load(tmp_path / "absent.json")


def test_clip_length_and_size_mismatch(tmp_path):
    write_pgm(tmp_path / "a.pgm", np.zeros((4, 4)))
    write_pgm(tmp_path / "b.pgm", np.zeros((4, 5)))
    with pytest.raises(IngestionError):
        load_clip({"label": 0, "frames": ["a.pgm"]}, tmp_path, clip_length=2)
    with pytest.raises(IngestionError):
        load_clip({"label": 0, "frames": ["a.pgm", "b.pgm"]}, tmp_path)


def test_crop_box_follows_mouth_center():
    frames = np.arange(2 * 10 * 10, dtype=np.float32).reshape(2, 10, 10)
    s = VideoSample(frames, 0, mouth_center=(6.0, 4.0))
    out = crop(s, CropSpec(4, 4))
    assert np.array_equal(out.frames, frames[:, 2:6, 4:8])
    with pytest.raises(ContractError):
        crop(s, CropSpec(10, 10))
    with pytest.raises(ShapeError):
        VideoSample(np.zeros((4, 4)), 0)


def test_norm_stats(tmp_path):
    clips = [np.full((2, 3, 3), 1.0), np.full((1, 3, 3), 4.0)]
    st_ = NormStats.compute(clips)
    assert st_.mean == pytest.approx(2.0) and st_.std == pytest.approx(np.sqrt(2.0)) and st_.pixel_count == 27
    st_.save(tmp_path / "s.json")
    assert NormStats.load(tmp_path / "s.json") == st_
    s = crop_and_normalize(VideoSample(np.full((1, 4, 4), 2.0), 0), CropSpec(2, 2), st_)
    assert np.allclose(s.frames, 0.0)
    with pytest.raises(ContractError):
        NormStats(0.0, 0.0)
    with pytest.raises(IngestionError):
        NormStats.load(tmp_path / "missing.json")


def test_flip_negates_horizontal_flow():
    gray = np.arange(2 * 3 * 4, dtype=np.float32).reshape(2, 3, 4)
    flow = np.stack([np.ones((2, 3, 4)), np.full((2, 3, 4), 2.0)]).astype(np.float32)
    g, f = apply_augment(gray, flow, AugmentDraw(True, 0, 0))
    assert np.array_equal(g, gray[..., ::-1])
    assert np.all(f[0] == -1) and np.all(f[1] == 2)


@settings(max_examples=40, deadline=None)
@given(st.integers(-3, 3), st.integers(-3, 3))
def test_shift_moves_content_and_replicates_borders(dx, dy):
    img = np.random.default_rng(0).random((1, 9, 9)).astype(np.float32)
    g, _ = apply_augment(img, None, AugmentDraw(False, dx, dy))
    assert g.shape == img.shape
    inner = g[0, max(dy, 0):9 + min(dy, 0), max(dx, 0):9 + min(dx, 0)]
    assert np.array_equal(inner, img[0, max(-dy, 0):9 - max(dy, 0), max(-dx, 0):9 - max(dx, 0)])


def test_augment_is_seeded():
    x = np.random.default_rng(0).random((2, 8, 8)).astype(np.float32)
    spec = AugmentSpec(max_shift=2, seed=4)
    a, _ = augment(x, None, spec, Rng(1))
    b, _ = augment(x, None, spec, Rng(1))
    assert np.array_equal(a, b)


def test_synthetic_task_is_deterministic_and_separable():
    spec = _tiny_spec(classes=5)
    a = synth_split(spec, "train")
    b = synth_split(spec, "train")
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    assert not np.array_equal(a[0], synth_split(spec, "val")[0])
    scripts = class_scripts(spec)
    gaps = [np.abs(scripts[i] - scripts[j]).max() for i in range(5) for j in range(i)]
    assert min(gaps) > 0.12
    assert a[0].min() >= 0 and a[0].max() <= 1
    with pytest.raises(ContractError):
        synth_split(spec, "holdout")
    with pytest.raises(ContractError):
        SyntheticTaskSpec(window=40)


def test_pretraining_tasks():
    x, y = static_shape_task(4, 3, (16, 16))
    assert x.shape == (12, 1, 16, 16) and y.tolist() == sorted(y.tolist())
    x, y = motion_task(3, 2, (16, 16), 8)
    assert x.shape == (6, 8, 16, 16)


def test_clipset_contract():
    with pytest.raises(ShapeError):
        ClipSet(np.zeros((2, 3, 4, 4)), np.zeros(3))
    with pytest.raises(ShapeError):
        ClipSet(np.zeros((2, 3, 4, 4)), np.zeros(2), np.zeros((2, 2, 4, 4, 4)))
    cs = ClipSet(np.zeros((3, 2, 4, 4)), np.array([0, 2, 1]))
    assert cs.classes == 3 and len(cs.subset([0, 2])) == 2
