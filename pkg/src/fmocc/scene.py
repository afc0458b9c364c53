"""Synthetic voxel worlds with ray-cast occlusion and a binary scene format."""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    ContractError,
    HeaderError,
    MagicError,
    TruncationError,
    VersionError,
)
from .raycast import raycast_visibility

CLASS_NAMES = ("free", "road", "car", "building", "sidewalk", "vegetation")
FREE, ROAD, CAR, BUILDING, SIDEWALK, VEGETATION = range(6)

MAGIC = b"FMOC"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sH3IHHd")

_MAX_PLACEMENT_TRIES = 64


@dataclass(frozen=True)
class SceneSpec:
    dims: tuple[int, int, int] = (32, 32, 4)
    voxel_size_m: float = 0.4
    num_classes: int = 6
    num_boxes: int = 8
    wall_probability: float = 0.5
    noise_sigma: float = 0.2
    ego: tuple[int, int, int] = (16, 16, 2)
    channels: int = 8
    prototype_seed: int = 1234

    def validate(self) -> None:
        if len(self.dims) != 3 or min(self.dims) < 2:
            raise ContractError(f"scene dims must be three extents >= 2, got {self.dims}")
        if any(not (0 <= e < d) for e, d in zip(self.ego, self.dims)):
            raise ContractError(f"ego {self.ego} outside grid {self.dims}")
        if self.num_classes < 2:
            raise ContractError("num_classes must be >= 2")
        if self.voxel_size_m <= 0:
            raise ContractError("voxel_size_m must be positive")
        if not 0.0 <= self.wall_probability <= 1.0:
            raise ContractError("wall_probability must lie in [0, 1]")
        if self.noise_sigma < 0 or self.num_boxes < 0 or self.channels < 1:
            raise ContractError("noise_sigma, num_boxes must be >= 0 and channels >= 1")


@dataclass
class Scene:
    labels: np.ndarray  # (X, Y, Z) int64
    features: np.ndarray  # (X, Y, Z, C) float64
    visible: np.ndarray  # (X, Y, Z) bool
    num_classes: int
    voxel_size_m: float
    warnings: list[str] = field(default_factory=list)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.labels.shape)

    @property
    def channels(self) -> int:
        return self.features.shape[-1]

    def equals(self, other: "Scene") -> bool:
        """Bit-level equality of every stored field."""
        return (
            self.num_classes == other.num_classes
            and struct.pack("<d", self.voxel_size_m) == struct.pack("<d", other.voxel_size_m)
            and self.labels.dtype == other.labels.dtype
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.visible, other.visible)
            and self.features.tobytes() == other.features.tobytes()
            and self.features.shape == other.features.shape
        )


def make_prototypes(num_classes: int, channels: int, seed: int) -> np.ndarray:
    """Unit-norm class prototypes; orthonormal rows whenever channels >= num_classes."""
    rng = np.random.default_rng(seed)
    if channels >= num_classes:
        q, _ = np.linalg.qr(rng.standard_normal((channels, channels)))
        return np.ascontiguousarray(q[:num_classes])
    protos = rng.standard_normal((num_classes, channels))
    return protos / np.linalg.norm(protos, axis=1, keepdims=True)


# per-class box extents: (min_xy, max_xy, z_lo, max_height); z_lo = 0 marks ground classes
_BOX_SHAPES = {
    CAR: (2, 4, 1, 2),
    BUILDING: (3, 6, 1, None),
    SIDEWALK: (2, 8, 0, 1),
    VEGETATION: (1, 3, 1, 3),
}


def _box_candidates(num_classes: int) -> list[int]:
    return [c for c in _BOX_SHAPES if c < num_classes] or [c for c in range(1, num_classes)]


def _layout(spec: SceneSpec, rng: np.random.Generator) -> tuple[np.ndarray, list[str]]:
    X, Y, Z = spec.dims
    labels = np.zeros(spec.dims, dtype=np.int64)
    road = ROAD if spec.num_classes > ROAD else FREE
    labels[:, :, 0] = road
    taken = np.zeros((X, Y), dtype=bool)
    ex, ey, _ = spec.ego
    taken[max(ex - 1, 0): ex + 2, max(ey - 1, 0): ey + 2] = True
    notes: list[str] = []

    def place(cls: int, sx: int, sy: int, z0: int, z1: int) -> bool:
        sx, sy = min(sx, X), min(sy, Y)
        for _ in range(_MAX_PLACEMENT_TRIES):
            x0 = int(rng.integers(0, X - sx + 1))
            y0 = int(rng.integers(0, Y - sy + 1))
            if taken[x0: x0 + sx, y0: y0 + sy].any():
                continue
            taken[x0: x0 + sx, y0: y0 + sy] = True
            labels[x0: x0 + sx, y0: y0 + sy, z0:z1] = cls
            return True
        return False

    classes = _box_candidates(spec.num_classes)
    placed = 0
    for _ in range(spec.num_boxes):
        cls = classes[int(rng.integers(len(classes)))]
        lo, hi, z_lo, max_h = _BOX_SHAPES.get(cls, (1, 3, 1, 2))
        sx, sy = (int(v) for v in rng.integers(lo, hi + 1, size=2))
        z_lo = min(z_lo, Z - 1)
        height = Z - z_lo if max_h is None else int(rng.integers(1, max_h + 1))
        z_hi = min(z_lo + height, Z)
        placed += place(cls, sx, sy, z_lo, z_hi)
    if placed < spec.num_boxes:
        notes.append(f"placed {placed} of {spec.num_boxes} boxes")

    if spec.num_classes > BUILDING:
        for _ in range(2):
            if rng.random() >= spec.wall_probability:
                continue
            length = int(rng.integers(6, 17))
            along_x = bool(rng.integers(2))
            sx, sy = (length, 1) if along_x else (1, length)
            if not place(BUILDING, sx, sy, min(1, Z - 1), Z):
                notes.append("wall placement failed")
    return labels, notes


def observe_features(labels, visibility, prototypes, noise_sigma: float, drop_ratio: float,
                     seed) -> np.ndarray:
    """Prototype-plus-noise features on visible, non-dropped voxels; exact zeros elsewhere."""
    if not 0.0 <= drop_ratio <= 1.0:
        raise ContractError(f"drop_ratio must lie in [0, 1], got {drop_ratio}")
    labels = np.asarray(labels)
    prototypes = np.asarray(prototypes, dtype=np.float64)
    if labels.size and labels.max() >= prototypes.shape[0]:
        raise ContractError("observe_features: a label has no prototype")
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal(labels.shape + (prototypes.shape[1],)) * noise_sigma
    kept = rng.random(labels.shape) >= drop_ratio
    support = np.asarray(visibility, dtype=bool) & kept
    feats = (prototypes[labels] + noise) * support[..., None]
    feats[~support] = 0.0
    return feats


def generate_scene(spec: SceneSpec, seed: int, drop_ratio: float = 0.0) -> Scene:
    """Deterministic scene for ``(spec, seed)``: labels, visibility and observed features."""
    spec.validate()
    labels, notes = _layout(spec, np.random.default_rng([seed, 0]))
    visible = raycast_visibility(labels, spec.ego)
    protos = make_prototypes(spec.num_classes, spec.channels, spec.prototype_seed)
    feats = observe_features(labels, visible, protos, spec.noise_sigma, drop_ratio, [seed, 1])
    for note in notes:
        warnings.warn(f"scene {seed}: {note}", stacklevel=2)
    return Scene(labels, feats, visible, spec.num_classes, spec.voxel_size_m, notes)


# --- persistence ---------------------------------------------------------------


def scene_to_bytes(scene: Scene) -> bytes:
    X, Y, Z = scene.dims
    if scene.labels.size and (scene.labels.min() < 0 or scene.labels.max() > 0xFFFF):
        raise ContractError("labels do not fit in u16")
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, X, Y, Z, scene.num_classes, scene.channels,
                          scene.voxel_size_m)
    labels = scene.labels.astype("<u2").tobytes()
    bits = np.packbits(scene.visible.reshape(-1).astype(np.uint8), bitorder="little").tobytes()
    feats = np.ascontiguousarray(scene.features, dtype="<f8").tobytes()
    return header + labels + bits + feats


def scene_from_bytes(buf: bytes) -> Scene:
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise MagicError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}")
    if len(buf) < _HEADER.size:
        raise TruncationError(_HEADER.size, len(buf), "header")
    magic, version, X, Y, Z, num_classes, channels, voxel = _HEADER.unpack_from(buf)
    if version != FORMAT_VERSION:
        raise VersionError(f"unsupported scene format version {version}")
    if min(X, Y, Z) < 1 or channels < 1 or num_classes < 1 or not voxel > 0:
        raise HeaderError(f"invalid header fields dims={(X, Y, Z)} C={channels} K={num_classes}")
    n = X * Y * Z
    sizes = (2 * n, (n + 7) // 8, 8 * n * channels)
    expected = _HEADER.size + sum(sizes)
    if len(buf) != expected:
        if len(buf) < expected:
            raise TruncationError(expected, len(buf))
        raise HeaderError(f"{len(buf) - expected} trailing bytes after payload")
    off = _HEADER.size
    labels = np.frombuffer(buf, "<u2", n, off).astype(np.int64).reshape(X, Y, Z)
    off += sizes[0]
    bits = np.frombuffer(buf, np.uint8, sizes[1], off)
    visible = np.unpackbits(bits, count=n, bitorder="little").astype(bool).reshape(X, Y, Z)
    off += sizes[1]
    feats = np.frombuffer(buf, "<f8", n * channels, off).astype(np.float64)
    feats = feats.reshape(X, Y, Z, channels)
    if labels.max() >= num_classes:
        raise HeaderError(f"label {labels.max()} >= num_classes {num_classes}")
    return Scene(labels, feats, visible, num_classes, voxel)


def save_scene(path, scene: Scene) -> None:
    Path(path).write_bytes(scene_to_bytes(scene))


def load_scene(path) -> Scene:
    return scene_from_bytes(Path(path).read_bytes())
