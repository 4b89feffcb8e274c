"""Feature-file ingestion, dataset manifests, and a synthetic data generator.

Feature file layout (little-endian throughout):
    bytes 0-3   magic "FACF"
    bytes 4-7   u32 format version (1)
    bytes 8-11  u32 T  (snippet count)
    bytes 12-15 u32 D  (feature dimension)
    bytes 16-   T*D float32 values, row-major

The manifest is a single JSON document; see ``parse_manifest`` for the
field-by-field validation rules.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError, InputError, ManifestError

FEATURE_MAGIC = b"FACF"
FEATURE_VERSION = 1
MANIFEST_VERSION = 1


def save_features(path, array: np.ndarray) -> None:
    array = np.asarray(array)
    if array.ndim != 2:
        raise InputError(f"feature array must be 2-d, got shape {array.shape}")
    if not np.isfinite(array).all():
        raise InputError("feature array contains non-finite values")
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<III", FEATURE_VERSION, array.shape[0], array.shape[1]))
        fh.write(np.ascontiguousarray(array, dtype="<f4").tobytes())


def read_feature_header(path) -> tuple[int, int]:
    """(T, D) from the 16-byte header, without touching the payload."""
    with open(path, "rb") as fh:
        head = fh.read(16)
    if len(head) < 16:
        raise FormatError(f"truncated feature header ({len(head)} bytes) in {path}")
    if head[:4] != FEATURE_MAGIC:
        raise FormatError(f"bad feature magic at offset 0 in {path}")
    version, t, d = struct.unpack("<III", head[4:16])
    if version != FEATURE_VERSION:
        raise FormatError(f"unsupported feature version {version} at offset 4 in {path}")
    return t, d


def load_features(path) -> np.ndarray:
    t, d = read_feature_header(path)
    with open(path, "rb") as fh:
        payload = fh.read()[16:]
    expected = 4 * t * d
    if len(payload) != expected:
        raise FormatError(
            f"feature payload is {len(payload)} bytes at offset 16, expected {expected} in {path}")
    data = np.frombuffer(payload, dtype="<f4").reshape(t, d).copy()
    if not np.isfinite(data).all():
        raise InputError(f"feature payload contains non-finite values in {path}")
    return data


def convert_raw_features(in_path, t: int, d: int, out_path) -> None:
    """Wrap a headerless float32 T x D blob into the feature file format."""
    raw = Path(in_path).read_bytes()
    expected = 4 * t * d
    if len(raw) != expected:
        raise FormatError(f"raw blob is {len(raw)} bytes, expected {expected} for {t}x{d}")
    save_features(out_path, np.frombuffer(raw, dtype="<f4").reshape(t, d))


@dataclass
class GroundTruthSpan:
    label: str
    start: float
    end: float


@dataclass
class VideoEntry:
    video_id: str
    split: str
    fps: float
    snippet_stride: int
    features: dict[str, Path]  # stream name -> feature file path
    labels: list[str]
    ground_truth: list[GroundTruthSpan] = field(default_factory=list)
    num_snippets: int = 0

    @property
    def duration(self) -> float:
        return self.num_snippets * self.snippet_stride / self.fps


@dataclass
class Manifest:
    classes: list[str]
    videos: list[VideoEntry]
    root: Path

    @property
    def streams(self) -> tuple[str, ...]:
        return tuple(sorted(self.videos[0].features)) if self.videos else ()

    def class_index(self, label: str) -> int:
        return self.classes.index(label)

    def label_vector(self, entry: VideoEntry) -> np.ndarray:
        y = np.zeros(len(self.classes), dtype=np.float64)
        for label in entry.labels:
            y[self.class_index(label)] = 1.0
        return y

    def split(self, tag: str) -> list[VideoEntry]:
        return [v for v in self.videos if v.split == tag]


def parse_manifest(path) -> Manifest:
    """Parse and fully validate a manifest JSON document.

    Checks, in order: schema version; class list non-empty and unique; for
    each video a unique id, a known split, positive fps/stride, existing
    feature files sharing one stream set, labels drawn from the class list,
    and ground-truth spans with known labels lying inside the video duration
    (duration = T * stride / fps, T from the feature header).
    """
    path = Path(path)
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("schema_version") != MANIFEST_VERSION:
        raise ManifestError(f"manifest schema_version must be {MANIFEST_VERSION}")
    classes = doc.get("classes")
    if not classes or len(set(classes)) != len(classes):
        raise ManifestError("manifest classes must be a non-empty unique list")
    root = path.parent
    videos: list[VideoEntry] = []
    seen_ids: set[str] = set()
    stream_set: tuple[str, ...] | None = None
    for record in doc.get("videos", []):
        vid = record.get("id")
        if not vid or vid in seen_ids:
            raise ManifestError(f"missing or duplicate video id {vid!r}")
        seen_ids.add(vid)
        split = record.get("split")
        if split not in ("train", "test"):
            raise ManifestError(f"video {vid}: split must be 'train' or 'test'")
        fps = float(record.get("fps", 0))
        stride = int(record.get("snippet_stride", 0))
        if fps <= 0 or stride < 1:
            raise ManifestError(f"video {vid}: fps and snippet_stride must be positive")
        features = {name: root / rel for name, rel in record.get("features", {}).items()}
        if not features:
            raise ManifestError(f"video {vid}: no feature streams listed")
        streams = tuple(sorted(features))
        if stream_set is None:
            stream_set = streams
        elif streams != stream_set:
            raise ManifestError(
                f"video {vid}: stream set {streams} differs from {stream_set}")
        num_snippets = None
        for stream, fpath in features.items():
            if not fpath.exists():
                raise ManifestError(f"video {vid}: missing feature file {fpath}")
            t, _ = read_feature_header(fpath)
            if num_snippets is None:
                num_snippets = t
            elif t != num_snippets:
                raise ManifestError(
                    f"video {vid}: stream {stream} has {t} snippets, expected {num_snippets}")
        labels = record.get("labels", [])
        for label in labels:
            if label not in classes:
                raise ManifestError(f"video {vid}: unknown class {label!r}")
        entry = VideoEntry(video_id=vid, split=split, fps=fps, snippet_stride=stride,
                           features=features, labels=list(labels),
                           num_snippets=int(num_snippets))
        for gt in record.get("ground_truth", []):
            if gt["label"] not in classes:
                raise ManifestError(f"video {vid}: unknown ground-truth class {gt['label']!r}")
            start, end = float(gt["start"]), float(gt["end"])
            if not 0 <= start < end or end > entry.duration + 1e-9:
                raise ManifestError(
                    f"video {vid}: ground truth [{start}, {end}) outside duration "
                    f"{entry.duration:.3f}")
            entry.ground_truth.append(GroundTruthSpan(gt["label"], start, end))
        videos.append(entry)
    if not videos:
        raise ManifestError("manifest lists no videos")
    return Manifest(classes=list(classes), videos=videos, root=root)


@dataclass
class VideoSample:
    """One video ready for training: features in memory plus its label vector."""
    video_id: str
    features: np.ndarray
    labels: np.ndarray
    fps: float
    snippet_stride: int


def load_dataset(manifest: Manifest, split: str, stream: str) -> list[VideoSample]:
    samples = []
    for entry in manifest.split(split):
        if stream == "concat":
            feats = np.concatenate(
                [load_features(entry.features[s]) for s in manifest.streams], axis=1)
        else:
            feats = load_features(entry.features[stream])
        samples.append(VideoSample(
            video_id=entry.video_id, features=feats,
            labels=manifest.label_vector(entry), fps=entry.fps,
            snippet_stride=entry.snippet_stride))
    return samples


def ground_truth_instances(manifest: Manifest, split: str):
    """(video_id, class_id, start, end) tuples for one split."""
    out = []
    for entry in manifest.split(split):
        for gt in entry.ground_truth:
            out.append((entry.video_id, manifest.class_index(gt.label), gt.start, gt.end))
    return out


@dataclass
class SynthConfig:
    num_classes: int = 5
    num_train: int = 40
    num_test: int = 20
    feature_dim: int = 64
    snippet_range: tuple[int, int] = (60, 200)
    instances_range: tuple[int, int] = (1, 4)
    instance_len_range: tuple[int, int] = (8, 40)
    separation_margin: float = 0.3
    noise: float = 0.1
    snippet_stride: int = 16
    fps: float = 25.0
    seed: int = 0
    streams: tuple[str, ...] = ("rgb",)

    def __post_init__(self):
        self.streams = tuple(self.streams)
        if self.num_classes < 1 or self.num_train < 1 or self.num_test < 0:
            raise ConfigError("synthetic dataset sizes must be positive")
        if self.separation_margin <= 0:
            raise ConfigError("separation margin must be positive")
        if self.noise < 0:
            raise ConfigError("noise level must be non-negative")
        if self.snippet_range[0] < 1 or self.snippet_range[0] > self.snippet_range[1]:
            raise ConfigError("bad snippet count range")
        lo, hi = self.instance_len_range
        if lo < 1 or lo > hi or lo > self.snippet_range[0]:
            raise ConfigError("instance length range must fit the shortest video")
        if not self.streams:
            raise ConfigError("at least one stream required")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")


def _separated_prototypes(rng, count: int, dim: int, margin: float) -> np.ndarray:
    """Unit vectors with pairwise cosine similarity <= 1 - margin."""
    protos: list[np.ndarray] = []
    for _ in range(1000 * count):
        v = rng.normal(size=dim)
        v /= np.linalg.norm(v)
        if all(float(v @ p) <= 1.0 - margin for p in protos):
            protos.append(v)
            if len(protos) == count:
                return np.stack(protos)
    raise ConfigError(
        f"separation margin {margin} infeasible for {count} prototypes in {dim} dims")


def _place_instances(rng, num_snippets: int, config: SynthConfig) -> list[tuple[int, int, int]]:
    """Non-overlapping (class, start, end) snippet spans, 2-snippet gaps.

    Each video draws one or two distinct action classes and scatters its
    instances among them, mirroring the label sparsity of real untrimmed
    video collections.
    """
    target = int(rng.integers(config.instances_range[0], config.instances_range[1] + 1))
    distinct = min(int(rng.integers(1, 3)), target, config.num_classes)
    video_classes = rng.permutation(config.num_classes)[:distinct]
    placed: list[tuple[int, int, int]] = []
    for _ in range(50 * target):
        if len(placed) == target:
            break
        lo, hi = config.instance_len_range
        length = int(rng.integers(lo, min(hi, num_snippets) + 1))
        start = int(rng.integers(0, num_snippets - length + 1))
        end = start + length
        if all(end + 2 <= s or e + 2 <= start for _, s, e in placed):
            placed.append((int(rng.choice(video_classes)), start, end))
    return sorted(placed, key=lambda p: p[1])


def generate_synthetic(config: SynthConfig, out_dir) -> Path:
    """Write feature files plus a manifest; returns the manifest path.

    Each class (and the background) gets a separated unit prototype per
    stream; snippets are prototype plus isotropic Gaussian noise. Ground
    truth times follow directly from snippet indices, stride, and fps.
    """
    out_dir = Path(out_dir)
    (out_dir / "features").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(config.seed)
    protos = {stream: _separated_prototypes(rng, config.num_classes + 1,
                                            config.feature_dim, config.separation_margin)
              for stream in config.streams}
    class_names = [f"action_{i:02d}" for i in range(config.num_classes)]
    videos = []
    counts = [("train", config.num_train), ("test", config.num_test)]
    index = 0
    for split, count in counts:
        for _ in range(count):
            vid = f"video_{index:04d}"
            index += 1
            num_snippets = int(rng.integers(config.snippet_range[0],
                                            config.snippet_range[1] + 1))
            spans = _place_instances(rng, num_snippets, config)
            class_of = np.full(num_snippets, config.num_classes)  # background id C
            for cls, start, end in spans:
                class_of[start:end] = cls
            features_rec = {}
            for stream in config.streams:
                feats = protos[stream][class_of]
                feats = feats + config.noise * rng.normal(size=feats.shape)
                rel = f"features/{vid}_{stream}.facf"
                save_features(out_dir / rel, feats.astype(np.float32))
                features_rec[stream] = rel
            seconds = config.snippet_stride / config.fps
            videos.append({
                "id": vid,
                "split": split,
                "fps": config.fps,
                "snippet_stride": config.snippet_stride,
                "features": features_rec,
                "labels": sorted({class_names[cls] for cls, _, _ in spans}),
                "ground_truth": [
                    {"label": class_names[cls], "start": start * seconds,
                     "end": end * seconds}
                    for cls, start, end in spans
                ],
            })
    manifest_path = out_dir / "manifest.json"
    with open(manifest_path, "w") as fh:
        json.dump({"schema_version": MANIFEST_VERSION, "classes": class_names,
                   "videos": videos}, fh, indent=2)
    return manifest_path
