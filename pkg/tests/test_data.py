"""Dataset round trips, synthetic generation and episode sampling."""

from __future__ import annotations

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fsar.data import (
    FeatureSet,
    SynthSpec,
    VideoFeatures,
    load_feature_set,
    philox,
    sample_episode,
    save_feature_set,
    split_classes,
    synth_dataset,
)
from fsar.errors import ManifestError, SamplingError
from fsar.tensor import save_tensor


def make_set(classes=2, per_class=3, frames=8, bpf=3, dim=64, seed=5) -> FeatureSet:
    rng = philox(seed)
    fs = FeatureSet(dim=dim, frames=frames, boxes_per_frame=bpf)
    for c in range(classes):
        label = f"cls{c}"
        for v in range(per_class):
            fs.add(VideoFeatures(
                vid=f"{label}_v{v}",
                label=label,
                global_feats=rng.standard_normal((frames, dim)).astype(np.float32),
                object_feats=rng.standard_normal((frames, bpf, dim)).astype(np.float32),
                boxes=rng.uniform(0, 1, (frames, bpf, 4)).astype(np.float32),
            ))
    return fs


# ---------------------------------------------------------------------------
# manifest + containers
# ---------------------------------------------------------------------------


def test_load_minimal_manifest(tmp_path):
    fs = make_set(classes=1, per_class=1)
    manifest = save_feature_set(fs, tmp_path)
    back = load_feature_set(manifest)
    assert back.classes == ["cls0"]
    assert len(back.by_class["cls0"]) == 1
    assert back.by_class["cls0"][0].global_feats.shape == (8, 64)


def test_round_trip_is_bit_identical(tmp_path):
    fs = make_set(classes=3, per_class=2, dim=32)
    back = load_feature_set(save_feature_set(fs, tmp_path))
    for orig, loaded in zip(fs.videos(), back.videos()):
        assert orig.vid == loaded.vid and orig.label == loaded.label
        assert np.array_equal(orig.global_feats, loaded.global_feats)
        assert np.array_equal(orig.object_feats, loaded.object_feats)
        assert np.array_equal(orig.boxes, loaded.boxes)


def test_dim_mismatch_names_offending_video(tmp_path):
    fs = make_set(classes=1, per_class=1)
    manifest_path = save_feature_set(fs, tmp_path)
    # overwrite one blob with the wrong width
    bad = np.zeros((8, 32), dtype=np.float32)
    entry = json.loads(manifest_path.read_text())["videos"][0]
    save_tensor(tmp_path / entry["global"], bad)
    with pytest.raises(ManifestError, match="cls0_v0"):
        load_feature_set(manifest_path)


def test_missing_blob_is_io_error(tmp_path):
    fs = make_set(classes=1, per_class=1)
    manifest_path = save_feature_set(fs, tmp_path)
    entry = json.loads(manifest_path.read_text())["videos"][0]
    (tmp_path / entry["objects"]).unlink()
    with pytest.raises(Exception):
        load_feature_set(manifest_path)


def test_out_of_range_boxes_rejected(tmp_path):
    fs = make_set(classes=1, per_class=1)
    manifest_path = save_feature_set(fs, tmp_path)
    entry = json.loads(manifest_path.read_text())["videos"][0]
    bad = np.full((8, 3, 4), 1.5, dtype=np.float32)
    save_tensor(tmp_path / entry["boxes"], bad)
    with pytest.raises(ManifestError, match="box"):
        load_feature_set(manifest_path)


# ---------------------------------------------------------------------------
# synthetic generation
# ---------------------------------------------------------------------------


def test_synth_same_seed_is_bit_identical():
    spec = SynthSpec(classes=3, videos_per_class=4, frames=6, boxes_per_frame=2,
                     dim=16, separation=3.0, seed=9)
    a, b = synth_dataset(spec), synth_dataset(spec)
    for va, vb in zip(a.videos(), b.videos()):
        assert va.vid == vb.vid
        assert np.array_equal(va.global_feats, vb.global_feats)
        assert np.array_equal(va.object_feats, vb.object_feats)
        assert np.array_equal(va.boxes, vb.boxes)


def test_synth_infinite_separation_no_jitter_gives_identical_videos():
    spec = SynthSpec(classes=2, videos_per_class=3, frames=8, boxes_per_frame=2,
                     dim=16, separation=float("inf"), temporal_jitter=0.0,
                     speed_jitter=0.0, seed=3)
    fs = synth_dataset(spec)
    for label in fs.classes:
        videos = fs.by_class[label]
        for v in videos[1:]:
            assert np.array_equal(videos[0].global_feats, v.global_feats)
            assert np.array_equal(videos[0].object_feats, v.object_feats)
            assert np.array_equal(videos[0].boxes, v.boxes)


def test_synth_boxes_stay_normalized():
    fs = synth_dataset(SynthSpec(classes=3, videos_per_class=3, separation=0.5, seed=2))
    for v in fs.videos():
        assert v.boxes.min() >= 0.0 and v.boxes.max() <= 1.0


def nearest_centroid_accuracy(fs: FeatureSet) -> float:
    """Mean-pool global features per video, classify by closest class centroid."""
    labels = fs.classes
    pooled = {label: np.stack([v.global_feats.mean(axis=0) for v in fs.by_class[label]])
              for label in labels}
    centroids = np.stack([pooled[label].mean(axis=0) for label in labels])
    correct = total = 0
    for i, label in enumerate(labels):
        for feat in pooled[label]:
            dists = np.linalg.norm(centroids - feat, axis=1)
            correct += int(np.argmin(dists) == i)
            total += 1
    return correct / total


def test_high_separation_is_nearest_centroid_separable():
    fs = synth_dataset(SynthSpec(classes=5, videos_per_class=20, separation=50.0,
                                 temporal_jitter=0.25, speed_jitter=0.2, seed=13))
    assert nearest_centroid_accuracy(fs) >= 0.99


def test_split_classes_partitions_disjointly():
    fs = synth_dataset(SynthSpec(classes=7, videos_per_class=2, dim=8, seed=1))
    train, val, test = split_classes(fs, (3, 2, 2))
    assert len(train.classes) == 3 and len(val.classes) == 2 and len(test.classes) == 2
    assert not (set(train.classes) & set(val.classes))
    assert not (set(train.classes) & set(test.classes))


# ---------------------------------------------------------------------------
# episode sampling
# ---------------------------------------------------------------------------


def test_sample_episode_basic_shape():
    fs = make_set(classes=6, per_class=4)
    ep = sample_episode(fs, c_way=5, k_shot=1, n_query=5, rng=philox(1))
    assert len(ep.support) == 5 and all(len(s) == 1 for s in ep.support)
    assert len(ep.query) == 5
    support_ids = {v.vid for shots in ep.support for v in shots}
    query_ids = {v.vid for v in ep.query}
    assert not (support_ids & query_ids)


def test_sample_episode_insufficient_videos():
    fs = make_set(classes=2, per_class=3)
    # K=3 uses every video of a class, so any query from it must fail
    with pytest.raises(SamplingError):
        sample_episode(fs, c_way=2, k_shot=3, n_query=1, rng=philox(1))


def test_sample_episode_insufficient_classes():
    fs = make_set(classes=2, per_class=3)
    with pytest.raises(SamplingError):
        sample_episode(fs, c_way=3, k_shot=1, n_query=3, rng=philox(1))


def test_episode_stream_reproducible():
    fs = make_set(classes=6, per_class=5)

    def stream(seed):
        rng = philox(seed)
        return [
            [v.vid for shots in sample_episode(fs, 3, 2, 3, rng).support for v in shots]
            for _ in range(10)
        ]

    assert stream(7) == stream(7)
    assert stream(7) != stream(8)


@settings(max_examples=30, deadline=None)
@given(c_way=st.integers(2, 5), k_shot=st.integers(1, 3), n_query=st.integers(1, 7),
       seed=st.integers(0, 1000))
def test_episode_invariants(c_way, k_shot, n_query, seed):
    fs = make_set(classes=5, per_class=12, frames=2, bpf=1, dim=4)
    ep = sample_episode(fs, c_way, k_shot, n_query, philox(seed))
    assert sum(len(s) for s in ep.support) == c_way * k_shot
    assert all(len(s) == k_shot for s in ep.support)
    support_ids = {v.vid for shots in ep.support for v in shots}
    query_ids = [v.vid for v in ep.query]
    assert not (support_ids & set(query_ids))
    assert len(set(query_ids)) == len(query_ids)
    # every query's label matches its episode-class index
    for video, idx in zip(ep.query, ep.query_labels):
        assert video.label == ep.class_names[idx]
