"""Feature datasets: container-backed loading, synthetic generation, episodes.

A dataset is a directory with a ``manifest.json`` plus one tensor container
per feature blob. Synthetic datasets stand in for an upstream video feature
extractor: each class owns a latent signature curve, and every video samples
that curve with optional temporal shift and speed jitter plus Gaussian noise
scaled inversely to the class-separation knob.

All randomness flows through Philox (a named 64-bit counter-based
generator), so datasets and episode streams are reproducible bit-for-bit
across runs and platforms.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from fsar.errors import ConfigError, ManifestError, SamplingError
from fsar.tensor import load_tensor, save_tensor

BOX_CENTER_LOW, BOX_CENTER_HIGH = 0.1, 0.9
BOX_EXTENT_LOW, BOX_EXTENT_HIGH = 0.05, 0.3
CLASS_BOX_BIAS = 0.08


def philox(*key: int) -> np.random.Generator:
    """Deterministic generator seeded from a tuple of integers."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(key)))


@dataclass(frozen=True)
class VideoFeatures:
    """Precomputed features for one video.

    ``global_feats`` is [T, d] (one row per frame), ``object_feats`` is
    [T, B, d] and ``boxes`` is [T, B, 4] with normalized (cx, cy, w, h).
    """

    vid: str
    label: str
    global_feats: np.ndarray
    object_feats: np.ndarray
    boxes: np.ndarray


@dataclass
class FeatureSet:
    dim: int
    frames: int
    boxes_per_frame: int
    by_class: dict[str, list[VideoFeatures]] = field(default_factory=dict)

    @property
    def classes(self) -> list[str]:
        return sorted(self.by_class)

    def videos(self) -> Iterator[VideoFeatures]:
        for label in self.classes:
            yield from self.by_class[label]

    def video_by_id(self, vid: str) -> VideoFeatures:
        for v in self.videos():
            if v.vid == vid:
                return v
        raise ManifestError(f"unknown video id {vid!r}")

    def add(self, video: VideoFeatures) -> None:
        self.by_class.setdefault(video.label, []).append(video)


@dataclass
class Episode:
    """One C-way K-shot task: labeled support videos plus queries.

    ``support[c]`` holds the K shots of episode-class c; queries carry their
    ground-truth episode-class index in ``query_labels``.
    """

    support: list[list[VideoFeatures]]
    query: list[VideoFeatures]
    query_labels: list[int]
    class_names: list[str]

    @property
    def c_way(self) -> int:
        return len(self.support)


# ---------------------------------------------------------------------------
# manifest + container persistence
# ---------------------------------------------------------------------------


def save_feature_set(fs: FeatureSet, out_dir, manifest_name: str = "manifest.json") -> Path:
    """Write one tensor container per blob plus a manifest; returns its path."""
    out_dir = Path(out_dir)
    blob_dir = out_dir / "blobs"
    blob_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for v in fs.videos():
        paths = {
            "global": f"blobs/{v.vid}_global.fsar",
            "objects": f"blobs/{v.vid}_objects.fsar",
            "boxes": f"blobs/{v.vid}_boxes.fsar",
        }
        save_tensor(out_dir / paths["global"], v.global_feats)
        save_tensor(out_dir / paths["objects"], v.object_feats)
        save_tensor(out_dir / paths["boxes"], v.boxes)
        entries.append({"id": v.vid, "label": v.label, **paths})
    manifest = {
        "dim": fs.dim,
        "frames": fs.frames,
        "boxes_per_frame": fs.boxes_per_frame,
        "videos": entries,
    }
    manifest_path = out_dir / manifest_name
    with open(manifest_path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest_path


def load_feature_set(manifest_path) -> FeatureSet:
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise ManifestError(f"manifest not found: {manifest_path}")
    with open(manifest_path) as fh:
        try:
            manifest = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"manifest is not valid JSON: {exc}") from exc
    for key in ("dim", "frames", "boxes_per_frame", "videos"):
        if key not in manifest:
            raise ManifestError(f"manifest missing key {key!r}")
    dim, frames, bpf = manifest["dim"], manifest["frames"], manifest["boxes_per_frame"]
    fs = FeatureSet(dim=dim, frames=frames, boxes_per_frame=bpf)
    base = manifest_path.parent
    for entry in manifest["videos"]:
        vid = entry.get("id", "<missing id>")
        g = load_tensor(base / entry["global"])
        o = load_tensor(base / entry["objects"])
        b = load_tensor(base / entry["boxes"])
        if g.shape != (frames, dim):
            raise ManifestError(
                f"video {vid!r}: global features are {g.shape}, manifest says {(frames, dim)}"
            )
        if o.shape != (frames, bpf, dim):
            raise ManifestError(
                f"video {vid!r}: object features are {o.shape}, manifest says {(frames, bpf, dim)}"
            )
        if b.shape != (frames, bpf, 4):
            raise ManifestError(
                f"video {vid!r}: boxes are {b.shape}, manifest says {(frames, bpf, 4)}"
            )
        if b.size and (b.min() < 0.0 or b.max() > 1.0):
            raise ManifestError(f"video {vid!r}: box coordinates outside [0, 1]")
        fs.add(VideoFeatures(vid=vid, label=entry["label"], global_feats=g, object_feats=o, boxes=b))
    return fs


# ---------------------------------------------------------------------------
# synthetic generation
# ---------------------------------------------------------------------------


@dataclass
class SynthSpec:
    classes: int = 5
    videos_per_class: int = 20
    frames: int = 8
    boxes_per_frame: int = 3
    dim: int = 64
    separation: float = 4.0
    temporal_jitter: float = 0.25
    speed_jitter: float = 0.2
    seed: int = 0
    # which feature stream carries class identity; the other stream is
    # drawn from one shared class-independent signature
    signal_carrier: str = "both"

    def validate(self) -> None:
        for name in ("classes", "videos_per_class", "frames", "boxes_per_frame", "dim"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"synth spec: {name} must be positive")
        if self.separation <= 0:
            raise ConfigError("synth spec: separation must be positive (inf allowed)")
        if self.signal_carrier not in ("both", "global", "objects"):
            raise ConfigError(f"synth spec: unknown signal_carrier {self.signal_carrier!r}")


def _smooth_loop(rng: np.random.Generator, length: int, dim: int) -> np.ndarray:
    """A smooth closed curve in R^dim sampled on `length` grid points."""
    pts = rng.standard_normal((length, dim))
    for _ in range(2):
        pts = (np.roll(pts, 1, axis=0) + pts + np.roll(pts, -1, axis=0)) / 3.0
    rms = math.sqrt(float((pts**2).mean()))
    return pts / rms


def _interp_loop(curve: np.ndarray, positions: np.ndarray) -> np.ndarray:
    """Linear interpolation on a circular grid at fractional positions."""
    length = curve.shape[0]
    p = np.mod(positions, length)
    i0 = np.floor(p).astype(int) % length
    i1 = (i0 + 1) % length
    frac = (p - np.floor(p))[:, None]
    flat0 = curve.reshape(length, -1)[i0]
    flat1 = curve.reshape(length, -1)[i1]
    out = flat0 * (1 - frac) + flat1 * frac
    return out.reshape((len(positions),) + curve.shape[1:])


def synth_dataset(spec: SynthSpec) -> FeatureSet:
    """Generate a synthetic feature set; identical specs give identical bits."""
    spec.validate()
    rng = philox(spec.seed)
    T, B, d = spec.frames, spec.boxes_per_frame, spec.dim
    grid = 4 * T
    noise = 0.0 if math.isinf(spec.separation) else 1.0 / spec.separation
    box_jitter = 0.05 * min(1.0, noise)

    # shared, class-independent signatures used by whichever stream does
    # not carry the class signal
    shared_global = _smooth_loop(rng, grid, d)
    shared_objects = np.stack([_smooth_loop(rng, grid, d) for _ in range(B)], axis=1)

    fs = FeatureSet(dim=d, frames=T, boxes_per_frame=B)
    for c in range(spec.classes):
        label = f"class_{c:03d}"
        sig_global = _smooth_loop(rng, grid, d)
        sig_objects = np.stack([_smooth_loop(rng, grid, d) for _ in range(B)], axis=1)
        anchor = rng.uniform(-CLASS_BOX_BIAS, CLASS_BOX_BIAS, size=2)
        centers = rng.uniform(BOX_CENTER_LOW, BOX_CENTER_HIGH, size=(grid, B, 2))
        extents = rng.uniform(BOX_EXTENT_LOW, BOX_EXTENT_HIGH, size=(grid, B, 2))
        if spec.signal_carrier in ("both", "objects"):
            centers = np.clip(centers + anchor[None, None, :], 0.0, 1.0)
        if spec.signal_carrier == "objects":
            sig_global = shared_global
        elif spec.signal_carrier == "global":
            sig_objects = shared_objects
        box_template = np.concatenate([centers, extents], axis=2)

        for v in range(spec.videos_per_class):
            offset = rng.uniform(-spec.temporal_jitter, spec.temporal_jitter) * T
            speed = 1.0 + rng.uniform(-spec.speed_jitter, spec.speed_jitter)
            positions = (offset + speed * np.arange(T)) * (grid / T)
            g = _interp_loop(sig_global, positions)
            o = _interp_loop(sig_objects, positions)
            bx = _interp_loop(box_template, positions)
            if noise > 0:
                g = g + noise * rng.standard_normal(g.shape)
                o = o + noise * rng.standard_normal(o.shape)
                bx = bx + box_jitter * rng.standard_normal(bx.shape)
            bx = np.clip(bx, 0.0, 1.0)
            fs.add(
                VideoFeatures(
                    vid=f"{label}_v{v:03d}",
                    label=label,
                    global_feats=g.astype(np.float32),
                    object_feats=o.astype(np.float32),
                    boxes=bx.astype(np.float32),
                )
            )
    return fs


def split_classes(fs: FeatureSet, sizes: tuple[int, int, int]) -> tuple[FeatureSet, ...]:
    """Partition a feature set class-wise into train/val/test subsets."""
    labels = fs.classes
    if sum(sizes) > len(labels):
        raise ConfigError(f"cannot split {len(labels)} classes into {sizes}")
    out = []
    start = 0
    for n in sizes:
        part = FeatureSet(dim=fs.dim, frames=fs.frames, boxes_per_frame=fs.boxes_per_frame)
        for label in labels[start : start + n]:
            for v in fs.by_class[label]:
                part.add(v)
        out.append(part)
        start += n
    return tuple(out)


# ---------------------------------------------------------------------------
# episode sampling
# ---------------------------------------------------------------------------


def sample_episode(
    fs: FeatureSet, c_way: int, k_shot: int, n_query: int, rng: np.random.Generator
) -> Episode:
    """Draw a C-way K-shot episode; queries are spread round-robin over classes."""
    labels = fs.classes
    if c_way > len(labels):
        raise SamplingError(f"need {c_way} classes, feature set has {len(labels)}")
    if c_way < 2:
        raise SamplingError("episodes need at least 2 classes")
    chosen = [labels[i] for i in rng.permutation(len(labels))[:c_way]]
    query_counts = [sum(1 for j in range(n_query) if j % c_way == i) for i in range(c_way)]

    support: list[list[VideoFeatures]] = []
    query_pool: list[list[VideoFeatures]] = []
    for label, extra in zip(chosen, query_counts):
        videos = fs.by_class[label]
        need = k_shot + extra
        if len(videos) < need:
            raise SamplingError(
                f"class {label!r} has {len(videos)} videos, episode needs {need}"
            )
        order = rng.permutation(len(videos))[:need]
        picked = [videos[i] for i in order]
        support.append(picked[:k_shot])
        query_pool.append(picked[k_shot:])

    query: list[VideoFeatures] = []
    query_labels: list[int] = []
    for j in range(n_query):
        c = j % c_way
        query.append(query_pool[c].pop(0))
        query_labels.append(c)
    return Episode(support=support, query=query, query_labels=query_labels, class_names=chosen)
