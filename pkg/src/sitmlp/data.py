"""Skeleton sequences: file formats, preprocessing, modality derivation,
a synthetic stand-in dataset and deterministic batching."""

from __future__ import annotations

import enum
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from .engine.tensor import Tensor
from .exceptions import ConfigError, DataError, FormatError

SAMPLE_MAGIC = b"SITS"
SAMPLE_VERSION = 1
_SAMPLE_HEADER = struct.Struct("<4s7I")

# 0-indexed parent of each NTU RGB+D joint; joint 20 (spine shoulder) is the root.
NTU_PARENTS = (1, 20, 20, 2, 20, 4, 5, 6, 20, 8, 9, 10, 0, 12, 13, 14, 0, 16, 17, 18, 20, 22, 7, 24, 11)


class ModalityKind(str, enum.Enum):
    JOINT = "joint"
    BONE = "bone"
    JOINT_MOTION = "joint_motion"
    BONE_MOTION = "bone_motion"


@dataclass(frozen=True)
class SkeletonGraph:
    """Parent map of a joint tree. ``parent[root] == root``."""

    parent: tuple

    def __post_init__(self):
        parent = tuple(int(p) for p in self.parent)
        object.__setattr__(self, "parent", parent)
        v = len(parent)
        if v == 0:
            raise ConfigError("graph has no joints")
        if any(p < 0 or p >= v for p in parent):
            raise ConfigError("parent index out of range")
        roots = [i for i, p in enumerate(parent) if p == i]
        if len(roots) != 1:
            raise ConfigError(f"graph needs exactly one root, found {len(roots)}")
        for start in range(v):
            node, steps = start, 0
            while parent[node] != node:
                node = parent[node]
                steps += 1
                if steps > v:
                    raise ConfigError(f"cycle through joint {start}")

    @property
    def num_joints(self) -> int:
        return len(self.parent)

    @property
    def root(self) -> int:
        return next(i for i, p in enumerate(self.parent) if p == i)

    def outward_adjacency(self) -> np.ndarray:
        """0/1 matrix with ``A[child, parent] = 1`` for every non-root joint."""
        v = self.num_joints
        adj = np.zeros((v, v))
        for child, par in enumerate(self.parent):
            if child != par:
                adj[child, par] = 1.0
        return adj

    def save(self, path) -> None:
        Path(path).write_text("".join(f"{v}\t{p}\n" for v, p in enumerate(self.parent)))

    @classmethod
    def load(cls, path) -> "SkeletonGraph":
        pairs = {}
        for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
            if not line.strip():
                continue
            try:
                v, p = (int(x) for x in line.split("\t"))
            except ValueError:
                raise FormatError(f"{path}:{lineno}: expected 'joint<TAB>parent'") from None
            pairs[v] = p
        if sorted(pairs) != list(range(len(pairs))):
            raise FormatError(f"{path}: joints must be numbered 0..V-1")
        return cls(tuple(pairs[v] for v in range(len(pairs))))


def default_graph(joints: int) -> SkeletonGraph:
    """The NTU tree for 25 joints, otherwise a heap-ordered binary tree."""
    if joints == 25:
        return SkeletonGraph(NTU_PARENTS)
    return SkeletonGraph(tuple((v - 1) // 2 if v else 0 for v in range(joints)))


@dataclass
class SkeletonSequence:
    data: np.ndarray  # [M, T_raw, V, D]
    label: int
    sample_id: str = ""
    valid_frames: Optional[int] = None

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 4:
            raise DataError(f"sequence data must be [M, T, V, D], got {self.data.shape}")
        if self.valid_frames is None:
            self.valid_frames = self.data.shape[1]
        if not 1 <= self.valid_frames <= self.data.shape[1]:
            raise DataError(f"valid_frames={self.valid_frames} outside [1, {self.data.shape[1]}]")
        if not np.all(np.isfinite(self.data)):
            raise DataError(f"sequence {self.sample_id!r} has non-finite coordinates")


def write_sample(path, seq: SkeletonSequence) -> None:
    m, t, v, d = seq.data.shape
    header = _SAMPLE_HEADER.pack(SAMPLE_MAGIC, SAMPLE_VERSION, m, t, v, d, seq.label, seq.valid_frames)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(seq.data, dtype="<f4").tobytes())


def read_sample(path) -> SkeletonSequence:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _SAMPLE_HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, m, t, v, d, label, valid = _SAMPLE_HEADER.unpack_from(raw)
    if magic != SAMPLE_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != SAMPLE_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    count = m * t * v * d
    body = raw[_SAMPLE_HEADER.size:]
    if len(body) != 4 * count:
        raise FormatError(f"{path}: expected {count} floats, found {len(body) // 4}")
    data = np.frombuffer(body, dtype="<f4").astype(np.float32).reshape(m, t, v, d)
    return SkeletonSequence(data, int(label), path.stem, int(valid))


@dataclass
class DatasetManifest:
    entries: list  # (path, label) pairs
    split: str = "train"
    seed: Optional[int] = None
    num_classes: Optional[int] = None

    def __post_init__(self):
        self.entries = [(Path(p), int(y)) for p, y in self.entries]
        if self.num_classes is not None:
            bad = [y for _, y in self.entries if not 0 <= y < self.num_classes]
            if bad:
                raise DataError(f"labels {sorted(set(bad))} outside [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def labels(self) -> np.ndarray:
        return np.array([y for _, y in self.entries], dtype=np.int64)

    def save(self, path) -> None:
        base = Path(path).parent
        lines = []
        for p, y in self.entries:
            try:
                p = p.relative_to(base)
            except ValueError:
                pass
            lines.append(f"{p.as_posix()}\t{y}\n")
        Path(path).write_text("".join(lines))

    @classmethod
    def load(cls, path, split: Optional[str] = None, num_classes: Optional[int] = None) -> "DatasetManifest":
        path = Path(path)
        entries = []
        for lineno, line in enumerate(path.read_text().splitlines(), 1):
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise FormatError(f"{path}:{lineno}: expected 'path<TAB>label'")
            p = Path(parts[0])
            entries.append((p if p.is_absolute() else path.parent / p, int(parts[1])))
        return cls(entries, split or path.stem, None, num_classes)


def find_manifest(data_dir, split: str) -> Path:
    path = Path(data_dir) / f"{split}.tsv"
    if not path.exists():
        raise DataError(f"no {split} manifest at {path}")
    return path


# -- preprocessing -----------------------------------------------------------


def preprocess(seq: SkeletonSequence, target_frames: int, center_joint: int = 0,
               persons: Optional[int] = None) -> np.ndarray:
    """Center and resample one sequence to ``[M, target_frames, V, D]``.

    The ``center_joint`` of person 0 in the first frame is moved to the
    origin; persons that are all-zero (absent) stay zero. Valid frames are
    linearly interpolated onto ``target_frames`` evenly spaced instants.
    """
    if seq.valid_frames < 1:
        raise DataError("sequence has no valid frames")
    if target_frames < 1:
        raise ConfigError("target_frames must be positive")
    x = seq.data[:, : seq.valid_frames].astype(np.float64)
    present = np.any(x != 0, axis=(1, 2, 3))
    origin = x[0, 0, center_joint].copy()
    x[present] -= origin

    n = seq.valid_frames
    pos = np.linspace(0.0, n - 1, target_frames)
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, n - 1)
    w = (pos - lo)[None, :, None, None]
    out = x[:, lo] * (1.0 - w) + x[:, hi] * w

    if persons is not None and persons != out.shape[0]:
        padded = np.zeros((persons,) + out.shape[1:])
        keep = min(persons, out.shape[0])
        padded[:keep] = out[:keep]
        out = padded
    return out.astype(np.float32)


def derive_modality(x: np.ndarray, kind, graph: Optional[SkeletonGraph] = None) -> np.ndarray:
    """Joint, bone, joint-motion or bone-motion view of ``[..., T, V, D]`` data."""
    kind = ModalityKind(kind)
    x = np.asarray(x)
    if kind in (ModalityKind.BONE, ModalityKind.BONE_MOTION):
        if graph is None:
            raise ConfigError(f"{kind.value} modality needs a skeleton graph")
        if graph.num_joints != x.shape[-2]:
            raise ConfigError(f"graph has {graph.num_joints} joints, data has {x.shape[-2]}")
        x = x - x[..., list(graph.parent), :]
    if kind in (ModalityKind.JOINT_MOTION, ModalityKind.BONE_MOTION):
        motion = np.zeros_like(x)
        motion[..., :-1, :, :] = x[..., 1:, :, :] - x[..., :-1, :, :]
        x = motion
    return x


# -- synthetic data ------------------------------------------------------------


def _rest_pose(graph: SkeletonGraph, coord_dim: int) -> np.ndarray:
    rng = np.random.default_rng(20240501)
    pose = np.zeros((graph.num_joints, coord_dim))
    order = sorted(range(graph.num_joints), key=lambda v: _depth(graph, v))
    for v in order:
        p = graph.parent[v]
        if p != v:
            step = rng.normal(0.0, 0.12, coord_dim)
            step[min(1, coord_dim - 1)] += 0.1 * np.sign(v - p)
            pose[v] = pose[p] + step
    return pose


def _depth(graph: SkeletonGraph, v: int) -> int:
    d = 0
    while graph.parent[v] != v:
        v = graph.parent[v]
        d += 1
    return d


@dataclass
class _MotionFamily:
    joints: np.ndarray
    directions: np.ndarray
    amplitudes: np.ndarray
    frequencies: np.ndarray
    phases: np.ndarray


def _make_families(num_classes: int, joints: int, coord_dim: int, rng) -> list:
    families = []
    n_active = max(1, joints // 3)
    for c in range(num_classes):
        active = rng.choice(joints, size=n_active, replace=False)
        dirs = rng.normal(size=(n_active, coord_dim))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        base_freq = 0.5 + 2.5 * c / max(num_classes - 1, 1)
        families.append(_MotionFamily(
            joints=active,
            directions=dirs,
            amplitudes=rng.uniform(0.08, 0.2, n_active),
            frequencies=base_freq * rng.uniform(0.9, 1.1, n_active),
            phases=rng.uniform(0, 2 * np.pi, n_active),
        ))
    return families


def _render(family: _MotionFamily, rest: np.ndarray, frames: int, valid: int,
            persons: int, noise: float, rng) -> np.ndarray:
    v, d = rest.shape
    tau = np.linspace(0.0, 1.0, valid)
    jitter = rng.uniform(-0.3, 0.3)
    scale = rng.uniform(0.8, 1.2)
    speed = rng.uniform(0.9, 1.1)
    pose = np.broadcast_to(rest, (valid, v, d)).copy()
    arg = 2 * np.pi * family.frequencies[None, :] * speed * tau[:, None] + family.phases[None, :] + jitter
    disp = (scale * family.amplitudes)[None, :, None] * np.sin(arg)[:, :, None] * family.directions[None]
    pose[:, family.joints] += disp
    pose += rng.uniform(-1.0, 1.0, d)  # global placement, removed by centering
    pose += rng.normal(0.0, noise, pose.shape)
    out = np.zeros((persons, frames, v, d), dtype=np.float32)
    out[0, :valid] = pose
    return out


def nearest_centroid_accuracy(x_train, y_train, x_test, y_test) -> float:
    """Held-out accuracy of a nearest-class-mean classifier on flattened inputs."""
    x_train = np.asarray(x_train, dtype=np.float64).reshape(len(x_train), -1)
    x_test = np.asarray(x_test, dtype=np.float64).reshape(len(x_test), -1)
    classes = np.unique(y_train)
    centroids = np.stack([x_train[y_train == c].mean(axis=0) for c in classes])
    dist = ((x_test[:, None, :] - centroids[None]) ** 2).sum(axis=-1)
    pred = classes[np.argmin(dist, axis=1)]
    return float(np.mean(pred == y_test))


@dataclass
class SynthResult:
    train: DatasetManifest
    test: DatasetManifest
    graph: SkeletonGraph
    centroid_accuracy: float
    meta: dict = field(default_factory=dict)


def synth_generate(num_classes: int, samples_per_class: int, joints: int = 25, frames: int = 64,
                   seed: int = 0, out_dir=None, persons: int = 1, coord_dim: int = 3,
                   test_fraction: float = 0.25, noise: float = 0.01,
                   min_centroid_accuracy: float = 0.8) -> SynthResult:
    """Write a separable synthetic action dataset to ``out_dir``.

    Each class is a family of joint oscillations (which joints move, along
    which direction, at what frequency and phase) on a fixed skeleton. Samples
    vary in phase, amplitude, speed, global placement and number of valid
    frames, and carry Gaussian coordinate noise. A nearest-centroid classifier
    is run on the result; generation fails if it scores below
    ``min_centroid_accuracy`` on the held-out split.
    """
    if num_classes < 2:
        raise ConfigError("need at least two classes")
    if samples_per_class < 2:
        raise ConfigError("need at least two samples per class")
    if out_dir is None:
        raise ConfigError("out_dir is required")
    out_dir = Path(out_dir)
    sample_dir = out_dir / "samples"
    sample_dir.mkdir(parents=True, exist_ok=True)

    graph = default_graph(joints)
    rest = _rest_pose(graph, coord_dim)
    families = _make_families(num_classes, joints, coord_dim, np.random.default_rng([seed, 0]))
    rng = np.random.default_rng([seed, 1])
    n_test = int(round(samples_per_class * test_fraction))
    if test_fraction > 0:
        n_test = min(max(1, n_test), samples_per_class - 1)

    splits = {"train": [], "test": []}
    arrays = {"train": [], "test": []}
    for i in range(samples_per_class):
        for c in range(num_classes):
            valid = int(rng.integers(max(2, (3 * frames) // 4), frames + 1))
            data = _render(families[c], rest, frames, valid, persons, noise, rng)
            sample_id = f"c{c:03d}_s{i:04d}"
            seq = SkeletonSequence(data, c, sample_id, valid)
            path = sample_dir / f"{sample_id}.sits"
            write_sample(path, seq)
            split = "test" if i < n_test else "train"
            splits[split].append((path, c))
            arrays[split].append(preprocess(seq, frames, graph.root))

    y_train = np.array([y for _, y in splits["train"]])
    x_train = np.stack(arrays["train"])
    if splits["test"]:
        y_test = np.array([y for _, y in splits["test"]])
        acc = nearest_centroid_accuracy(x_train, y_train, np.stack(arrays["test"]), y_test)
    else:
        # no held-out split requested: check separability across two halves of the samples
        half = len(y_train) // 2 // num_classes * num_classes
        acc = nearest_centroid_accuracy(x_train[:half], y_train[:half], x_train[half:], y_train[half:])
    if acc < min_centroid_accuracy:
        raise DataError(f"synthetic classes not separable enough: centroid accuracy {acc:.3f}")

    train = DatasetManifest(splits["train"], "train", seed, num_classes)
    test = DatasetManifest(splits["test"], "test", seed, num_classes)
    train.save(out_dir / "train.tsv")
    test.save(out_dir / "test.tsv")
    graph.save(out_dir / "graph.txt")
    meta = {
        "num_classes": num_classes, "samples_per_class": samples_per_class, "joints": joints,
        "frames": frames, "persons": persons, "coord_dim": coord_dim, "seed": seed,
        "noise": noise, "centroid_accuracy": acc,
    }
    (out_dir / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return SynthResult(train, test, graph, acc, meta)


def load_graph(data_dir, joints: int) -> SkeletonGraph:
    path = Path(data_dir) / "graph.txt"
    return SkeletonGraph.load(path) if path.exists() else default_graph(joints)


# -- batching ------------------------------------------------------------------


def load_arrays(manifest: DatasetManifest, target_frames: int, modality="joint",
                graph: Optional[SkeletonGraph] = None, persons: Optional[int] = None):
    """Read, preprocess and derive the modality for every sample.

    Returns ``(x [N, M, T, V, D] float32, labels [N], sample_ids)``.
    """
    if len(manifest) == 0:
        raise DataError("empty manifest")
    xs, ids = [], []
    for path, label in manifest.entries:
        seq = read_sample(path)
        if seq.label != label:
            raise DataError(f"{path}: file label {seq.label} != manifest label {label}")
        if graph is None:
            graph = default_graph(seq.data.shape[2])
        x = preprocess(seq, target_frames, graph.root, persons)
        xs.append(derive_modality(x, modality, graph))
        ids.append(seq.sample_id)
    x = np.stack(xs).astype(np.float32)
    return x, manifest.labels, ids


def epoch_order(n: int, shuffle_seed: Optional[int]) -> np.ndarray:
    if shuffle_seed is None:
        return np.arange(n)
    return np.random.default_rng(shuffle_seed).permutation(n)


def iterate_batches(x: np.ndarray, labels: np.ndarray, batch_size: int,
                    shuffle_seed: Optional[int] = None, dtype=np.float32) -> Iterator[tuple]:
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    if len(x) == 0:
        raise DataError("no samples to batch")
    order = epoch_order(len(x), shuffle_seed)
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        yield Tensor(x[idx].astype(dtype)), labels[idx]


def batch_iter(manifest: DatasetManifest, batch_size: int, shuffle_seed: Optional[int],
               target_frames: int, modality="joint", graph: Optional[SkeletonGraph] = None,
               persons: Optional[int] = None, dtype=np.float32) -> Iterator[tuple]:
    """One epoch of ``(Tensor[B, M, T, V, D], labels)`` in seeded order."""
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    x, labels, _ = load_arrays(manifest, target_frames, modality, graph, persons)
    yield from iterate_batches(x, labels, batch_size, shuffle_seed, dtype)
