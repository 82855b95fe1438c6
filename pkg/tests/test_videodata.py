import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vidbackdoor.videodata import (BadMagicError, DatasetManifest, ShapeClassSpec, Split, TruncatedPayloadError,
                                   VersionMismatchError, VideoDataset, VideoSample, _bilinear_resize, augment,
                                   batches, default_class_specs, flip_frames, generate_dataset, load_dataset,
                                   payload_sha256, render_sprite, save_dataset, split_batches, validate_specs)

SMALL = (4, 16, 16, 3)


@pytest.fixture(scope="module")
def small_ds():
    specs = [ShapeClassSpec(s.kind, s.motion, s.intensity, 4) for s in default_class_specs()]
    return generate_dataset(specs, per_class_train=3, per_class_test=2, dims=SMALL, seed=11)


def test_noiseless_frames_translate_exactly():
    spec = ShapeClassSpec("square", (1, 2), size=4)
    ds = generate_dataset([spec, ShapeClassSpec("bar", (0, 1), size=4)], 1, 0, (2, 12, 12, 3), noise_std=0.0, seed=5)
    f = ds.train.frames[0]
    np.testing.assert_array_equal(np.roll(f[0], (1, 2), axis=(0, 1)), f[1])


def test_same_seed_gives_identical_bytes(tmp_path, small_ds):
    specs = small_ds.class_specs
    again = generate_dataset(specs, 3, 2, SMALL, seed=11)
    save_dataset(small_ds, tmp_path / "a.vbl")
    save_dataset(again, tmp_path / "b.vbl")
    assert (tmp_path / "a.vbl").read_bytes() == (tmp_path / "b.vbl").read_bytes()


def test_different_seed_differs(small_ds):
    other = generate_dataset(small_ds.class_specs, 3, 2, SMALL, seed=12)
    assert other.digest() != small_ds.digest()


def test_class_balance_and_range(small_ds):
    for split, per in ((small_ds.train, 3), (small_ds.test, 2)):
        assert np.bincount(split.labels, minlength=5).tolist() == [per] * 5
        assert split.frames.min() >= 0.0 and split.frames.max() <= 1.0
        assert split.frames.dtype == np.float32
    assert not set(small_ds.train.ids) & set(small_ds.test.ids)


def test_round_trip_is_bit_exact(tmp_path, small_ds):
    p = tmp_path / "d.vbl"
    save_dataset(small_ds, p)
    back = load_dataset(p)
    assert back.manifest == small_ds.manifest
    assert back.digest() == small_ds.digest()
    for a, b in ((back.train, small_ds.train), (back.test, small_ds.test)):
        assert a.frames.tobytes() == b.frames.tobytes()
        np.testing.assert_array_equal(a.ids, b.ids)
        np.testing.assert_array_equal(a.labels, b.labels)
    save_dataset(back, tmp_path / "e.vbl")
    assert payload_sha256(p) == payload_sha256(tmp_path / "e.vbl")


def test_manifest_json_fields(tmp_path, small_ds):
    p = tmp_path / "d.vbl"
    save_dataset(small_ds, p)
    buf = p.read_bytes()
    assert buf[:4] == b"VBL1"
    version, mlen = struct.unpack_from("<II", buf, 4)
    man = json.loads(buf[12:12 + mlen])
    assert version == 1
    assert sorted(man) == ["classes", "dims", "seed", "splits", "version"]
    assert man["dims"] == list(SMALL)
    assert DatasetManifest.from_json(man) == small_ds.manifest


def test_empty_dataset_round_trips(tmp_path):
    man = DatasetManifest(["a", "b"], SMALL, {"train": [], "test": []}, 0)
    ds = VideoDataset(man, Split.empty(SMALL), Split.empty(SMALL))
    save_dataset(ds, tmp_path / "e.vbl")
    back = load_dataset(tmp_path / "e.vbl")
    assert back.manifest == man
    assert len(back.train) == 0 and len(back.test) == 0


def test_bad_magic(tmp_path, small_ds):
    p = tmp_path / "d.vbl"
    save_dataset(small_ds, p)
    buf = bytearray(p.read_bytes())
    buf[0:4] = b"XXXX"
    p.write_bytes(bytes(buf))
    with pytest.raises(BadMagicError) as ei:
        load_dataset(p)
    assert ei.value.code == "bad_magic"


def test_version_mismatch(tmp_path, small_ds):
    p = tmp_path / "d.vbl"
    save_dataset(small_ds, p)
    buf = bytearray(p.read_bytes())
    struct.pack_into("<I", buf, 4, 2)
    p.write_bytes(bytes(buf))
    with pytest.raises(VersionMismatchError) as ei:
        load_dataset(p)
    assert ei.value.code == "version_mismatch"


def test_truncated_payload(tmp_path, small_ds):
    p = tmp_path / "d.vbl"
    save_dataset(small_ds, p)
    p.write_bytes(p.read_bytes()[:-7])
    with pytest.raises(TruncatedPayloadError) as ei:
        load_dataset(p)
    assert ei.value.code == "truncated"


def test_error_codes_are_distinct():
    assert len({BadMagicError.code, VersionMismatchError.code, TruncatedPayloadError.code}) == 3


def test_spec_leaving_frame_is_rejected():
    with pytest.raises(ValueError):
        validate_specs([ShapeClassSpec("square", (0, 3), size=4), ShapeClassSpec("bar", (0, 1), size=4)],
                       (16, 32, 32, 3))


def test_unknown_kind_is_rejected():
    with pytest.raises(ValueError):
        render_sprite("hexagon", 5)


def test_augment_identity_hook(small_ds):
    s = small_ds.train.sample(0)
    out = augment(s, seed=3, flip_p=0.0, crop_ratio=1.0, drop_p=0.0)
    assert out.frames.tobytes() == s.frames.tobytes()
    assert (out.label, out.sample_id) == (s.label, s.sample_id)


def test_flip_is_an_involution(small_ds):
    f = small_ds.train.frames[1]
    assert flip_frames(flip_frames(f)).tobytes() == f.tobytes()


def test_crop_resize_keeps_constant_video():
    v = VideoSample(np.full(SMALL, 0.37, np.float32), 0, 0)
    out = augment(v, seed=4, flip_p=0.5, crop_ratio=0.875, drop_p=0.25)
    np.testing.assert_allclose(out.frames, 0.37, atol=1e-7)


def test_bilinear_resize_interpolates_ramp():
    ramp = np.linspace(0, 1, 5, dtype=np.float32)[None, None, :, None] * np.ones((1, 3, 1, 1), np.float32)
    out = _bilinear_resize(ramp, 3, 9)
    np.testing.assert_allclose(out[0, 0, :, 0], np.linspace(0, 1, 9), atol=1e-6)


def test_frame_drop_repeats_earlier_frames():
    v = VideoSample(np.arange(8, dtype=np.float32)[:, None, None, None] * np.ones((8, 4, 4, 1), np.float32) / 8, 0, 0)
    out = augment(v, seed=1, flip_p=0.0, crop_ratio=1.0, drop_p=0.5).frames[:, 0, 0, 0] * 8
    assert out[0] == 0
    assert np.all(np.diff(out) >= 0)
    assert set(out.tolist()) <= set(range(8))


def test_batch_sizes():
    assert [len(b) for b in batches(7, 3, seed=0)] == [3, 3, 1]


def test_single_full_batch_is_permutation(small_ds):
    out = list(split_batches(small_ds.train, len(small_ds.train), seed=2))
    assert len(out) == 1
    assert sorted(out[0].tolist()) == sorted(small_ds.train.ids.tolist())


def test_batches_are_seeded():
    a = [b.tolist() for b in batches(20, 6, seed=9)]
    b = [b.tolist() for b in batches(20, 6, seed=9)]
    assert a == b


def test_empty_split_gives_empty_stream():
    assert list(batches(0, 4, seed=0)) == []


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0, 1), st.floats(0, 1))
def test_augment_stays_in_range(seed, flip_p, drop_p):
    rng = np.random.default_rng(seed % 1000)
    v = VideoSample(rng.random((3, 8, 8, 2), dtype=np.float32), 1, 7)
    out = augment(v, seed, flip_p=flip_p, drop_p=drop_p)
    assert out.frames.shape == v.frames.shape
    assert out.frames.min() >= 0.0 and out.frames.max() <= 1.0
    assert out.label == 1 and out.sample_id == 7


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 200), st.integers(1, 50), st.integers(0, 10**6))
def test_batches_partition_indices(n, bs, seed):
    got = np.concatenate(list(batches(n, bs, seed))) if n else np.zeros(0, int)
    assert sorted(got.tolist()) == list(range(n))
    sizes = [len(b) for b in batches(n, bs, seed)]
    assert all(s == bs for s in sizes[:-1])


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10**6), st.floats(0, 0.3))
def test_generation_is_pure(seed, noise):
    specs = [ShapeClassSpec("circle", (1, 0), size=3), ShapeClassSpec("bar", (0, -1), size=3)]
    a = generate_dataset(specs, 2, 1, (3, 8, 8, 3), noise, seed)
    b = generate_dataset(specs, 2, 1, (3, 8, 8, 3), noise, seed)
    assert a.digest() == b.digest()
    assert a.train.frames.min() >= 0 and a.train.frames.max() <= 1
