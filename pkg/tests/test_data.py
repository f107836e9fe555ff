import filecmp

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from constrictae.data import (
    DatasetError,
    SynthConfig,
    clip_starts,
    denormalize,
    generate_synthetic,
    load_clips,
    normalize,
    read_manifest,
    read_pgm,
    split_batches,
    write_pgm,
)

SMALL = dict(height=16, width=16, train_videos=2, test_videos=2, frames_per_video=40, sprite_size=4, anomaly_length=8)


@pytest.fixture(scope="module")
def small_ds(tmp_path_factory):
    return generate_synthetic(SynthConfig(**SMALL, seed=3), tmp_path_factory.mktemp("ds"))


def write_video(root, vid, frames, split="train", labels=None):
    vdir = root / split / vid
    vdir.mkdir(parents=True)
    for t, f in enumerate(frames):
        write_pgm(vdir / f"{t:06d}.pgm", f)
    labels = labels if labels is not None else "0" * len(frames)
    return f"video {split} {vid} {len(frames)} {labels}"


def write_manifest(root, lines, size=(4, 4)):
    (root / "manifest.txt").write_text("\n".join(["cae-manifest 1", f"frame_size {size[0]} {size[1]}", *lines]) + "\n")


def same_tree(a, b):
    cmp = filecmp.dircmp(a, b)
    if cmp.left_only or cmp.right_only or cmp.diff_files or cmp.funny_files:
        return False
    _, mismatch, errors = filecmp.cmpfiles(a, b, cmp.common_files, shallow=False)
    if mismatch or errors:
        return False
    return all(same_tree(a / d, b / d) for d in cmp.common_dirs)


def test_generation_is_byte_identical(tmp_path):
    cfg = SynthConfig(**SMALL, seed=5)
    generate_synthetic(cfg, tmp_path / "a")
    generate_synthetic(cfg, tmp_path / "b")
    assert same_tree(tmp_path / "a", tmp_path / "b")
    generate_synthetic(SynthConfig(**SMALL, seed=6), tmp_path / "c")
    assert not same_tree(tmp_path / "a", tmp_path / "c")


def test_train_split_is_normal_and_test_has_anomalies(small_ds):
    m = read_manifest(small_ds)
    assert sum(int(v.labels.sum()) for v in m.split("train")) == 0
    tests = m.split("test")
    assert len(tests) == 2
    for v in tests:
        assert v.labels.sum() >= 1
        # one contiguous segment
        edges = np.flatnonzero(np.diff(np.r_[0, v.labels, 0]))
        assert len(edges) == 2 and edges[1] - edges[0] == SMALL["anomaly_length"]


def test_layout_and_frame_size(small_ds):
    m = read_manifest(small_ds)
    assert m.frame_size == (16, 16)
    v = m.split("test")[0]
    assert v.frame_path(0) == small_ds / "test" / v.video_id / "000000.pgm"
    assert read_pgm(v.frame_path(0)).shape == (16, 16)


def test_fast_motion_segment_moves_faster(tmp_path):
    cfg = SynthConfig(**{**SMALL, "height": 32, "width": 32, "frames_per_video": 64, "anomaly_length": 16}, anomaly_kinds=("fast_motion",), seed=1)
    ds = load_clips(generate_synthetic(cfg, tmp_path), 1, split="test")
    for vid, v in ds.videos.items():
        raw = ds.raw_frames(vid).astype(int)
        step = np.abs(np.diff(raw, axis=0)).sum(axis=(1, 2))
        inside = step[v.labels[1:] == 1]
        outside = step[(v.labels[1:] == 0) & (v.labels[:-1] == 0)]
        assert inside.mean() > outside.mean()


def test_alien_shape_segment_changes_sprite(tmp_path):
    cfg = SynthConfig(**SMALL, anomaly_kinds=("alien_shape",), seed=2)
    ds = load_clips(generate_synthetic(cfg, tmp_path), 1, split="test")
    for vid, v in ds.videos.items():
        raw = ds.raw_frames(vid)
        area = (raw != cfg.background).sum(axis=(1, 2))
        assert set(area[v.labels == 0]) == {16}
        assert (area[v.labels == 1] < 16).all()


def test_unwritable_root(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(DatasetError):
        generate_synthetic(SynthConfig(**SMALL), blocker / "sub")


def test_synth_config_validation():
    with pytest.raises(ValueError):
        SynthConfig(fast_factor=2.0)
    with pytest.raises(ValueError):
        SynthConfig(anomaly_kinds=("teleport",))


def test_twenty_frames_give_thirteen_clips(tmp_path):
    frames = np.zeros((20, 4, 4), dtype=np.uint8)
    write_manifest(tmp_path, [write_video(tmp_path, "v", frames)])
    ds = load_clips(tmp_path, 8, 1)
    assert len(ds) == 13
    assert ds.index.entries[0] == ("v", 0) and ds.index.entries[-1] == ("v", 12)
    assert ds[0].shape == (8, 1, 4, 4)


def test_short_video_warns_and_yields_nothing(tmp_path):
    write_manifest(tmp_path, [write_video(tmp_path, "short", np.zeros((5, 4, 4), dtype=np.uint8))])
    with pytest.warns(UserWarning, match="shorter than clip length"):
        ds = load_clips(tmp_path, 8, 1)
    assert len(ds) == 0


def test_pixel_normalization_endpoints(tmp_path):
    f = np.zeros((8, 4, 4), dtype=np.uint8)
    f[:, 0, 0] = 255
    write_manifest(tmp_path, [write_video(tmp_path, "v", f)])
    clip = load_clips(tmp_path, 8)[0]
    assert clip[0, 0, 0, 0] == 1.0
    assert clip[0, 0, 1, 1] == -1.0


def test_roundtrip_denormalized_equals_bytes(small_ds):
    ds = load_clips(small_ds, 8, 1, "test")
    for vid, start in ds.index.entries[::7]:
        clip = ds.clip(vid, start)
        raw = ds.raw_frames(vid)[start : start + 8]
        assert np.array_equal(denormalize(clip[:, 0]), raw)


def test_corrupt_frame_named(tmp_path):
    line = write_video(tmp_path, "v", np.zeros((8, 4, 4), dtype=np.uint8))
    write_manifest(tmp_path, [line])
    bad = tmp_path / "train" / "v" / "000003.pgm"
    bad.write_bytes(b"P5 garbage")
    ds = load_clips(tmp_path, 8)
    with pytest.raises(DatasetError, match="000003.pgm"):
        ds[0]


def test_missing_frame_named(tmp_path):
    write_manifest(tmp_path, [write_video(tmp_path, "v", np.zeros((8, 4, 4), dtype=np.uint8))])
    (tmp_path / "train" / "v" / "000007.pgm").unlink()
    with pytest.raises(DatasetError, match="000007.pgm"):
        load_clips(tmp_path, 8)[0]


@pytest.mark.parametrize(
    "lines, message",
    [
        (["frame_size 4 4"], "header"),
        (["cae-manifest 1", "video train a 2 00"], "frame_size"),
        (["cae-manifest 1", "frame_size 4 4", "video train a 2 01"], "anomalous"),
        (["cae-manifest 1", "frame_size 4 4", "video val a 2 00"], "split"),
        (["cae-manifest 1", "frame_size 4 4", "video test a 2 0x"], "labels"),
        (["cae-manifest 1", "frame_size 4 4", "video test a 3 00"], "labels"),
        (["cae-manifest 1", "frame_size 4 4", "bogus"], "unknown"),
    ],
)
def test_manifest_rejections(tmp_path, lines, message):
    (tmp_path / "manifest.txt").write_text("\n".join(lines) + "\n")
    with pytest.raises(DatasetError, match=message):
        read_manifest(tmp_path)


def test_missing_manifest(tmp_path):
    with pytest.raises(DatasetError):
        read_manifest(tmp_path)


def test_batches_keep_partial_tail():
    entries = [("v", i) for i in range(13)]
    assert [len(b) for b in split_batches(entries, 4)] == [4, 4, 4, 1]
    assert [len(b) for b in split_batches(entries, 4, shuffle_seed=1)] == [4, 4, 4, 1]


def test_shuffle_seeded_and_permutation():
    entries = [("v", i) for i in range(13)]
    a = split_batches(entries, 4, 9)
    assert a == split_batches(entries, 4, 9)
    flat = [e for b in a for e in b]
    assert sorted(flat) == entries and flat != entries


def test_batch_stacks_clips(small_ds):
    ds = load_clips(small_ds, 8)
    assert ds.batch(ds.index.entries[:3]).shape == (3, 8, 1, 16, 16)


def test_iteration_order_is_deterministic(small_ds):
    a, b = load_clips(small_ds, 8, 2), load_clips(small_ds, 8, 2)
    assert a.index.entries == b.index.entries
    assert [s for v, s in a.index.entries if v == "train_000"] == list(range(0, 33, 2))


@given(st.integers(1, 60), st.integers(1, 20), st.integers(1, 7))
def test_clip_count_formula(n, t, stride):
    expected = (n - t) // stride + 1 if n >= t else 0
    assert len(clip_starts(n, t, stride)) == expected


def test_normalize_inverse():
    x = np.arange(256, dtype=np.uint8)
    assert np.array_equal(denormalize(normalize(x)), x)
