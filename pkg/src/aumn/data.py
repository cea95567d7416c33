"""Synthetic action-unit videos, the binary feature format, and manifests.

Feature file (``.auf``), little-endian::

    b"AUF1" | u32 l | u32 D | l*D float64, row-major

Manifest (JSON)::

    {
      "version": 1,
      "unit": "segments" | "seconds",
      "num_classes": C,
      "segment_seconds": 0.5333,          # optional
      "records": [
        {
          "video_id": "train_0000",
          "split": "train",               # optional, default "train"
          "features": {"rgb": "features/train_0000.rgb.auf", ...},
          "label": [0.0, 1.0, 0.0, 0.0],  # l1-normalized
          "ground_truth": [{"class_id": 1, "start": 12, "end": 17}],
          "segment_labels": [0, 0, ...]   # optional, synthetic only
        }
      ]
    }

Feature paths are relative to the manifest's directory.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import (
    BadMagicError,
    DimensionOverflowError,
    FeatureFormatError,
    ManifestError,
    TruncatedFileError,
    ValidationError,
)
from .evaluation import GroundTruthInstance

FEATURE_MAGIC = b"AUF1"
_FEATURE_HEADER = struct.Struct("<4sII")
MAX_FEATURE_VALUES = 1 << 31
MANIFEST_VERSION = 1
STREAMS = ("rgb", "flow")

DEFAULT_UNITS_PER_CLASS = ((0, 1), (0, 2, 3), (1, 4), (4, 2))


# --------------------------------------------------------------------------
# feature files


def write_features(path: str | Path, matrix: np.ndarray) -> None:
    arr = np.asarray(matrix, dtype=np.float64)
    if arr.ndim != 2:
        raise ValidationError(f"features must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"refusing to write non-finite features to {path}")
    header = _FEATURE_HEADER.pack(FEATURE_MAGIC, arr.shape[0], arr.shape[1])
    Path(path).write_bytes(header + np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_features(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != FEATURE_MAGIC:
        raise BadMagicError(f"{path}: not a feature file (magic {raw[:4]!r})")
    if len(raw) < _FEATURE_HEADER.size:
        raise TruncatedFileError(f"{path}: header truncated")
    _, length, dim = _FEATURE_HEADER.unpack_from(raw)
    count = length * dim
    if count > MAX_FEATURE_VALUES:
        raise DimensionOverflowError(f"{path}: header declares {length} x {dim} values")
    expected = _FEATURE_HEADER.size + 8 * count
    if len(raw) < expected:
        raise TruncatedFileError(f"{path}: expected {expected} bytes, found {len(raw)}")
    if len(raw) > expected:
        raise FeatureFormatError(f"{path}: {len(raw) - expected} trailing bytes")
    data = np.frombuffer(raw, dtype="<f8", count=count, offset=_FEATURE_HEADER.size)
    return data.reshape(length, dim).astype(np.float64)


# --------------------------------------------------------------------------
# manifest


@dataclass
class VideoRecord:
    video_id: str
    features: dict[str, str]
    label: list[float]
    ground_truth: list[GroundTruthInstance] = field(default_factory=list)
    segment_labels: list[int] | None = None
    split: str = "train"

    def feature_path(self, stream: str, root: str | Path) -> Path:
        try:
            return Path(root) / self.features[stream]
        except KeyError:
            raise ManifestError(f"video {self.video_id} has no {stream!r} stream") from None


@dataclass
class DatasetManifest:
    records: list[VideoRecord]
    num_classes: int
    unit: str = "segments"
    segment_seconds: float = 1.0
    version: int = MANIFEST_VERSION
    root: Path = field(default=Path("."), compare=False)

    def __post_init__(self):
        validate_manifest(self)

    def split(self, name: str) -> list[VideoRecord]:
        return [r for r in self.records if r.split == name]

    def load_stream(self, records: Sequence[VideoRecord], stream: str) -> list[np.ndarray]:
        return [read_features(r.feature_path(stream, self.root)) for r in records]

    def ground_truth(self, records: Sequence[VideoRecord] | None = None) -> list[GroundTruthInstance]:
        return [g for r in (self.records if records is None else records) for g in r.ground_truth]

    def to_json(self) -> str:
        payload = {
            "version": self.version,
            "unit": self.unit,
            "num_classes": self.num_classes,
            "segment_seconds": self.segment_seconds,
            "records": [_record_to_dict(r) for r in self.records],
        }
        return json.dumps(payload, indent=1) + "\n"


def _record_to_dict(r: VideoRecord) -> dict:
    out = {
        "video_id": r.video_id,
        "split": r.split,
        "features": dict(r.features),
        "label": list(r.label),
        "ground_truth": [{"class_id": g.class_id, "start": g.start, "end": g.end} for g in r.ground_truth],
    }
    if r.segment_labels is not None:
        out["segment_labels"] = list(r.segment_labels)
    return out


def validate_manifest(manifest: DatasetManifest) -> None:
    if manifest.version != MANIFEST_VERSION:
        raise ManifestError(f"unsupported manifest version {manifest.version}")
    if manifest.unit not in ("segments", "seconds"):
        raise ManifestError(f"unknown unit {manifest.unit!r}; expected 'segments' or 'seconds'")
    if manifest.num_classes < 1:
        raise ManifestError("num_classes must be >= 1")
    seen = set()
    for r in manifest.records:
        if r.video_id in seen:
            raise ManifestError(f"duplicate video_id {r.video_id!r}")
        seen.add(r.video_id)
        label = np.asarray(r.label, dtype=np.float64)
        if label.shape != (manifest.num_classes,):
            raise ManifestError(f"video {r.video_id}: label has {label.size} entries, expected {manifest.num_classes}")
        if np.any(label < 0) or abs(label.sum() - 1.0) > 1e-9:
            raise ManifestError(f"video {r.video_id}: label must be nonnegative and sum to 1")
        for g in r.ground_truth:
            if not 0 <= g.class_id < manifest.num_classes or g.end < g.start:
                raise ManifestError(f"video {r.video_id}: invalid ground-truth instance {g}")
        if r.ground_truth:
            gt_classes = {g.class_id for g in r.ground_truth}
            support = {int(c) for c in np.flatnonzero(label > 0)}
            if gt_classes != support:
                raise ManifestError(
                    f"video {r.video_id}: label classes {sorted(support)} != ground-truth classes {sorted(gt_classes)}"
                )


def load_manifest(path: str | Path) -> DatasetManifest:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    try:
        payload = json.loads(path.read_text())
        records = [
            VideoRecord(
                video_id=str(rec["video_id"]),
                features={str(k): str(v) for k, v in rec["features"].items()},
                label=[float(v) for v in rec["label"]],
                ground_truth=[
                    GroundTruthInstance(str(rec["video_id"]), int(g["class_id"]), g["start"], g["end"])
                    for g in rec.get("ground_truth", [])
                ],
                segment_labels=rec.get("segment_labels"),
                split=rec.get("split", "train"),
            )
            for rec in payload["records"]
        ]
        return DatasetManifest(
            records=records,
            num_classes=int(payload["num_classes"]),
            unit=payload.get("unit", "segments"),
            segment_seconds=float(payload.get("segment_seconds", 1.0)),
            version=int(payload.get("version", MANIFEST_VERSION)),
            root=path.parent,
        )
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise ManifestError(f"{path}: malformed manifest ({exc})") from exc


# --------------------------------------------------------------------------
# synthetic generator


@dataclass(frozen=True)
class SyntheticSpec:
    U: int = 5
    C: int = 4
    units_per_class: tuple[tuple[int, ...], ...] = DEFAULT_UNITS_PER_CLASS
    D: int = 32
    videos: int = 200
    test_videos: int = 50
    segments_per_video: int = 60
    instances_per_video: int = 2
    classes_per_video: int = 1
    action_fraction: float = 0.2
    length_jitter: int = 1
    noise_std: float = 0.1
    scene_strength: float = 0.0
    max_prototype_cosine: float = 0.3
    segment_seconds: float = 16 / 30
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "units_per_class", tuple(tuple(int(u) for u in us) for us in self.units_per_class))
        if len(self.units_per_class) != self.C:
            raise ValidationError(f"units_per_class lists {len(self.units_per_class)} classes, C={self.C}")
        for c, units in enumerate(self.units_per_class):
            if not units or any(not 0 <= u < self.U for u in units):
                raise ValidationError(f"class {c}: unit ids must lie in [0, {self.U})")
        counts = np.bincount([u for us in self.units_per_class for u in set(us)], minlength=self.U)
        if self.C > 1 and counts.max() < 2:
            raise ValidationError("at least one unit must be shared by two or more classes")
        if not 0 < self.action_fraction < 1:
            raise ValidationError("action_fraction must lie in (0, 1)")
        if self.noise_std < 0 or self.length_jitter < 0 or self.scene_strength < 0:
            raise ValidationError("noise_std, scene_strength and length_jitter must be >= 0")
        if not 1 <= self.classes_per_video <= min(self.C, self.instances_per_video):
            raise ValidationError("classes_per_video must be in [1, min(C, instances_per_video)]")
        if self.videos < 1 or self.test_videos < 0:
            raise ValidationError("need at least one training video")
        self._check_feasible()

    def _check_feasible(self):
        n = self.instances_per_video
        if n < 1:
            raise ValidationError("instances_per_video must be >= 1")
        action = round(self.action_fraction * self.segments_per_video)
        longest = max(len(u) for u in self.units_per_class)
        bases = _split_evenly(action, n)
        if min(bases) < 2 * longest:
            raise ValidationError(
                f"infeasible spec: {action} action segments over {n} instances leaves "
                f"fewer than {2 * longest} segments for a {longest}-unit class"
            )
        worst = sum(b + self.length_jitter for b in bases) + (n - 1)
        if worst > self.segments_per_video:
            raise ValidationError(
                f"infeasible spec: {n} instances of up to {max(bases) + self.length_jitter} segments "
                f"do not fit in {self.segments_per_video} segments with gaps"
            )


@dataclass
class SyntheticDataset:
    manifest: DatasetManifest
    features: dict[str, dict[str, np.ndarray]]  # video_id -> stream -> (l, D)
    prototypes: np.ndarray  # (U + 1 + C, D): units, background, per-class scenes
    unit_sequences: dict[str, np.ndarray]  # video_id -> per-segment unit id, -1 for background

    def examples(self, split: str, stream: str = "rgb") -> list[tuple[np.ndarray, np.ndarray]]:
        return [
            (self.features[r.video_id][stream], np.asarray(r.label, dtype=np.float64))
            for r in self.manifest.split(split)
        ]


def sample_prototypes(count: int, dim: int, max_cosine: float, rng: np.random.Generator) -> np.ndarray:
    """Unit-norm Gaussian directions with pairwise ``|cos| < max_cosine``."""
    chosen: list[np.ndarray] = []
    for _ in range(10_000):
        if len(chosen) == count:
            break
        v = rng.normal(size=dim)
        v /= np.linalg.norm(v)
        if all(abs(float(v @ u)) < max_cosine for u in chosen):
            chosen.append(v)
    else:
        raise ValidationError(f"could not draw {count} directions in {dim} dims with |cos| < {max_cosine}")
    if len(chosen) < count:
        raise ValidationError(f"could not draw {count} directions in {dim} dims with |cos| < {max_cosine}")
    return np.stack(chosen)


def _split_evenly(total: int, parts: int) -> list[int]:
    base, extra = divmod(total, parts)
    return [base + (1 if i < extra else 0) for i in range(parts)]


def _video_script(spec: SyntheticSpec, rng: np.random.Generator):
    """Instance placement for one video: per-segment unit ids and GT intervals."""
    n, l = spec.instances_per_video, spec.segments_per_video
    classes = rng.choice(spec.C, size=spec.classes_per_video, replace=False)
    inst_classes = list(classes) + list(rng.choice(classes, size=n - len(classes)))
    inst_classes = [int(c) for c in rng.permutation(inst_classes)]

    lengths = []
    for c, base in zip(inst_classes, _split_evenly(round(spec.action_fraction * l), n)):
        jitter = int(rng.integers(-spec.length_jitter, spec.length_jitter + 1)) if spec.length_jitter else 0
        lengths.append(max(2 * len(spec.units_per_class[c]), base + jitter))

    # background gaps: inner gaps need at least one segment
    free = l - sum(lengths) - (n - 1)
    cuts = np.sort(rng.choice(free + n, size=n, replace=False))
    gaps = np.diff(np.concatenate([[-1], cuts, [free + n]])) - 1
    gaps[1:-1] += 1

    units = np.full(l, -1, dtype=np.int64)
    instances = []
    t = int(gaps[0])
    for i, (c, length) in enumerate(zip(inst_classes, lengths)):
        unit_ids = spec.units_per_class[c]
        pos = t
        for u, span in zip(unit_ids, _split_evenly(length, len(unit_ids))):
            units[pos:pos + span] = u
            pos += span
        instances.append((c, t, t + length - 1))
        t += length + int(gaps[i + 1])
    return units, instances


def render_synthetic(spec: SyntheticSpec, streams: Sequence[str] = STREAMS) -> SyntheticDataset:
    """Generate the whole dataset in memory. Deterministic given ``spec.seed``."""
    rng = np.random.default_rng(spec.seed)
    prototypes = sample_prototypes(spec.U + 1 + spec.C, spec.D, spec.max_prototype_cosine, rng)
    scenes = prototypes[spec.U + 1:]
    records, features, scripts = [], {}, {}
    plan = [("train", i) for i in range(spec.videos)] + [("test", i) for i in range(spec.test_videos)]
    for split, i in plan:
        vid = f"{split}_{i:04d}"
        units, instances = _video_script(spec, rng)
        clean = prototypes[np.where(units >= 0, units, spec.U)]
        if spec.scene_strength:
            # class-correlated context present in every segment, background included
            clean = clean + spec.scene_strength * scenes[[c for c, _, _ in instances]].mean(axis=0)
        features[vid] = {
            s: clean + spec.noise_std * rng.normal(size=clean.shape) for s in streams
        }
        label = np.zeros(spec.C)
        for c, _, _ in instances:
            label[c] = 1.0
        label /= label.sum()
        records.append(VideoRecord(
            video_id=vid,
            split=split,
            features={s: f"features/{vid}.{s}.auf" for s in streams},
            label=[float(v) for v in label],
            ground_truth=[GroundTruthInstance(vid, c, s, e) for c, s, e in instances],
            segment_labels=[int(u >= 0) for u in units],
        ))
        scripts[vid] = units
    manifest = DatasetManifest(records, num_classes=spec.C, unit="segments", segment_seconds=spec.segment_seconds)
    return SyntheticDataset(manifest, features, prototypes, scripts)


def write_dataset(dataset: SyntheticDataset, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    for r in dataset.manifest.records:
        for stream, rel in r.features.items():
            write_features(out / rel, dataset.features[r.video_id][stream])
    manifest_path = out / "manifest.json"
    manifest_path.write_text(dataset.manifest.to_json())
    dataset.manifest.root = out
    return manifest_path


def generate_synthetic(spec: SyntheticSpec, out_dir: str | Path) -> DatasetManifest:
    dataset = render_synthetic(spec)
    write_dataset(dataset, out_dir)
    return dataset.manifest


def spec_dict(spec: SyntheticSpec) -> dict:
    d = asdict(spec)
    d["units_per_class"] = [list(u) for u in spec.units_per_class]
    return d
