"""Voxel mIoU, ray-based IoU at depth tolerances, and the metrics text document."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DimensionError
from .raycast import first_hits

THRESHOLDS_M = (1.0, 2.0, 4.0)


def _check_pair(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise DimensionError(f"pred {pred.shape} and gt {gt.shape} differ")
    return pred, gt


@dataclass
class IouCounts:
    """Running per-class intersection/union counts; free class is kept but excluded from means."""

    num_classes: int
    inter: np.ndarray = None
    union: np.ndarray = None
    free_class: int = 0

    def __post_init__(self):
        if self.inter is None:
            self.inter = np.zeros(self.num_classes, dtype=np.int64)
            self.union = np.zeros(self.num_classes, dtype=np.int64)

    def update(self, pred, gt) -> "IouCounts":
        pred, gt = _check_pair(pred, gt)
        for c in range(self.num_classes):
            p, g = pred == c, gt == c
            self.inter[c] += int(np.count_nonzero(p & g))
            self.union[c] += int(np.count_nonzero(p | g))
        return self

    def per_class(self) -> list[float | None]:
        return [
            None if c == self.free_class or self.union[c] == 0 else self.inter[c] / self.union[c]
            for c in range(self.num_classes)
        ]

    def miou(self) -> float:
        vals = [v for v in self.per_class() if v is not None]
        return float(np.mean(vals)) if vals else 0.0


def miou(pred, gt, num_classes: int) -> tuple[float, list[float | None]]:
    """Mean IoU over non-free classes present in ``pred`` or ``gt``; absent classes are None."""
    counts = IouCounts(num_classes).update(pred, gt)
    return counts.miou(), counts.per_class()


def make_ray_set(n_azimuth: int, n_elevation: int, elevation_deg: tuple[float, float] = (-30.0, 0.0)
                 ) -> np.ndarray:
    """Unit directions: ``n_azimuth`` evenly spaced headings per elevation.

    Elevations are evenly spaced over ``elevation_deg`` inclusive; a single
    elevation sits at the range midpoint. Ordering is elevation-major.
    """
    if n_azimuth < 4 or n_elevation < 1:
        raise ContractError("make_ray_set needs n_azimuth >= 4 and n_elevation >= 1")
    lo, hi = elevation_deg
    if n_elevation == 1:
        elevs = np.array([0.5 * (lo + hi)])
    else:
        elevs = np.linspace(lo, hi, n_elevation)
    az = 2.0 * np.pi * np.arange(n_azimuth) / n_azimuth
    el = np.radians(elevs)[:, None]
    dirs = np.stack(
        [np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el) * np.ones_like(az)], axis=-1
    ).reshape(-1, 3)
    return dirs / np.linalg.norm(dirs, axis=1, keepdims=True)


@dataclass
class RayCounts:
    num_classes: int
    thresholds: tuple[float, ...] = THRESHOLDS_M
    tp: np.ndarray = None  # (n_thresholds, num_classes)
    pred_hits: np.ndarray = None
    gt_hits: np.ndarray = None
    rays_cast: int = 0
    rays_hit: int = 0

    def __post_init__(self):
        if self.tp is None:
            self.tp = np.zeros((len(self.thresholds), self.num_classes), dtype=np.int64)
            self.pred_hits = np.zeros(self.num_classes, dtype=np.int64)
            self.gt_hits = np.zeros(self.num_classes, dtype=np.int64)

    def update(self, pred, gt, origin, dirs, voxel_size_m: float, free_class: int = 0
               ) -> "RayCounts":
        pred, gt = _check_pair(pred, gt)
        dirs = np.asarray(dirs, dtype=np.float64)
        if dirs.size == 0:
            raise ContractError("rayiou needs a non-empty ray set")
        gh, gc, gd, _ = first_hits(gt, origin, dirs, voxel_size_m, free_class)
        ph, pc, pd, _ = first_hits(pred, origin, dirs, voxel_size_m, free_class)
        self.rays_cast += len(dirs)
        self.rays_hit += int(gh.sum())
        self.gt_hits += np.bincount(gc[gh], minlength=self.num_classes)
        self.pred_hits += np.bincount(pc[ph], minlength=self.num_classes)
        both = gh & ph & (gc == pc)
        err = np.zeros(len(dirs))
        err[both] = np.abs(pd[both] - gd[both])
        for i, tau in enumerate(self.thresholds):
            ok = both & (err <= tau)
            self.tp[i] += np.bincount(gc[ok], minlength=self.num_classes)
        return self

    def per_class(self) -> np.ndarray:
        """(n_thresholds, num_classes) IoU; NaN where a class is never hit in pred or gt."""
        denom = self.pred_hits + self.gt_hits - self.tp
        out = np.full(self.tp.shape, np.nan)
        present = (self.pred_hits + self.gt_hits) > 0
        out[:, present] = self.tp[:, present] / denom[:, present]
        return out

    def rayiou(self) -> list[float]:
        pc = self.per_class()
        vals = []
        for row in pc:
            finite = row[~np.isnan(row)]
            vals.append(float(finite.mean()) if finite.size else 0.0)
        return vals


def rayiou(pred, gt, origin, ray_set, voxel_size_m: float,
           thresholds_m=THRESHOLDS_M, num_classes: int | None = None) -> dict[str, float]:
    """RayIoU per threshold plus their mean, for one scene pair."""
    pred, gt = _check_pair(pred, gt)
    if num_classes is None:
        num_classes = int(max(pred.max(), gt.max())) + 1
    counts = RayCounts(num_classes, tuple(thresholds_m)).update(
        pred, gt, origin, ray_set, voxel_size_m
    )
    vals = counts.rayiou()
    out = {f"{_fmt_tau(t)}": v for t, v in zip(thresholds_m, vals)}
    out["mean"] = float(np.mean(vals))
    return out


def _fmt_tau(t: float) -> str:
    return f"{t:g}m"


@dataclass
class MetricsReport:
    class_names: list[str]
    per_class_iou: list[float | None]
    miou: float
    rayiou_1m: float
    rayiou_2m: float
    rayiou_4m: float
    rayiou_mean: float
    rays_cast: int
    rays_hit: int
    extra: dict[str, float] = field(default_factory=dict)

    @classmethod
    def from_counts(cls, iou: IouCounts, rays: RayCounts, class_names) -> "MetricsReport":
        r = rays.rayiou()
        return cls(
            class_names=list(class_names),
            per_class_iou=iou.per_class(),
            miou=iou.miou(),
            rayiou_1m=r[0],
            rayiou_2m=r[1],
            rayiou_4m=r[2],
            rayiou_mean=float(np.mean(r)),
            rays_cast=rays.rays_cast,
            rays_hit=rays.rays_hit,
        )

    def to_document(self) -> str:
        lines = [f"miou = {_num(self.miou)}"]
        for name, v in zip(self.class_names, self.per_class_iou):
            if name == self.class_names[0]:
                continue
            lines.append(f"iou.{name} = {_num(v)}")
        lines += [
            f"rayiou.1m = {_num(self.rayiou_1m)}",
            f"rayiou.2m = {_num(self.rayiou_2m)}",
            f"rayiou.4m = {_num(self.rayiou_4m)}",
            f"rayiou.mean = {_num(self.rayiou_mean)}",
            f"counts.rays_cast = {self.rays_cast}",
            f"counts.rays_hit = {self.rays_hit}",
        ]
        for key in sorted(self.extra):
            lines.append(f"{key} = {_num(self.extra[key])}")
        return "\n".join(lines) + "\n"


def _num(v) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return "nan"
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_num(x) for x in v) + "]"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


REQUIRED_KEYS = ("miou", "rayiou.1m", "rayiou.2m", "rayiou.4m", "rayiou.mean")


class MetricsParseError(ValueError):
    def __init__(self, key: str, msg: str):
        super().__init__(f"metrics key {key!r}: {msg}")
        self.key = key


def parse_document(text: str) -> dict[str, object]:
    """Inverse of :meth:`MetricsReport.to_document` (also accepts list values)."""
    out: dict[str, object] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise MetricsParseError(f"<line {lineno}>", f"expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        try:
            out[key] = json.loads(value.replace("nan", "NaN"))
        except json.JSONDecodeError:
            raise MetricsParseError(key, f"unparseable value {value!r}") from None
    for key in REQUIRED_KEYS:
        if key not in out:
            raise MetricsParseError(key, "missing")
        if not isinstance(out[key], (int, float)):
            raise MetricsParseError(key, f"expected a number, got {out[key]!r}")
    return out
