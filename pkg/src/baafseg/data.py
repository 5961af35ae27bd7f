"""Point-cloud files, synthetic rooms and fixed-size crops."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import spatial

BINARY_MAGIC = b"PCSB"
BINARY_VERSION = 1
_HAS_COLORS = 1
_HAS_LABELS = 2


class CloudParseError(ValueError):
    pass


class CloudValidationError(ValueError):
    pass


@dataclass
class PointCloud:
    positions: np.ndarray
    colors: np.ndarray | None = None
    labels: np.ndarray | None = None
    num_classes: int = 0

    def __post_init__(self):
        self.positions = np.ascontiguousarray(self.positions, dtype=np.float32).reshape(-1, 3)
        n = len(self.positions)
        if n < 1:
            raise CloudValidationError("a cloud needs at least one point")
        if self.colors is not None:
            self.colors = np.ascontiguousarray(self.colors, dtype=np.float32).reshape(-1, 3)
            if len(self.colors) != n:
                raise CloudValidationError("colors and positions differ in length")
            if self.colors.min() < 0 or self.colors.max() > 1:
                raise CloudValidationError("colors must lie in [0, 1]")
        if self.labels is not None:
            self.labels = np.ascontiguousarray(self.labels, dtype=np.int64).reshape(-1)
            if len(self.labels) != n:
                raise CloudValidationError("labels and positions differ in length")
            if not self.num_classes:
                self.num_classes = int(self.labels.max()) + 1
            if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
                raise CloudValidationError(
                    f"labels must lie in [0, {self.num_classes}), got max {self.labels.max()}")

    def __len__(self) -> int:
        return len(self.positions)

    def subset(self, idx: np.ndarray) -> "PointCloud":
        return PointCloud(self.positions[idx],
                          None if self.colors is None else self.colors[idx],
                          None if self.labels is None else self.labels[idx],
                          self.num_classes)


# ------------------------------------------------------------------ text / binary I/O


def _detect_format(path: Path, fmt: str | None) -> str:
    if fmt:
        if fmt not in ("text", "binary"):
            raise ValueError(f"format must be 'text' or 'binary', got {fmt!r}")
        return fmt
    return "binary" if path.suffix in (".pcsb", ".bin") else "text"


def save_cloud(cloud: PointCloud, path, fmt: str | None = None) -> None:
    path = Path(path)
    if _detect_format(path, fmt) == "binary":
        path.write_bytes(_encode_binary(cloud))
        return
    cols = [cloud.positions]
    if cloud.colors is not None:
        cols.append(cloud.colors)
    lines = [f"# num_classes = {cloud.num_classes}"] if cloud.labels is not None else []
    table = np.concatenate(cols, axis=1)
    for i, row in enumerate(table):
        text = " ".join(f"{v:.9g}" for v in row.tolist())
        if cloud.labels is not None:
            text += f" {cloud.labels[i]}"
        lines.append(text)
    path.write_text("\n".join(lines) + "\n")


def _encode_binary(cloud: PointCloud) -> bytes:
    flags = (_HAS_COLORS if cloud.colors is not None else 0) | (_HAS_LABELS if cloud.labels is not None else 0)
    parts = [BINARY_MAGIC, struct.pack("<IIII", BINARY_VERSION, len(cloud), flags, cloud.num_classes),
             cloud.positions.astype("<f4").tobytes()]
    if cloud.colors is not None:
        parts.append(cloud.colors.astype("<f4").tobytes())
    if cloud.labels is not None:
        parts.append(cloud.labels.astype("<i4").tobytes())
    return b"".join(parts)


def load_cloud(path, fmt: str | None = None, num_classes: int | None = None) -> PointCloud:
    """Read a cloud. Text rows are ``x y z``, ``x y z label``, ``x y z r g b`` or ``x y z r g b label``."""
    path = Path(path)
    if _detect_format(path, fmt) == "binary":
        return _decode_binary(path.read_bytes(), num_classes)

    rows, header_classes, width = [], None, None
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.strip()
            if line.startswith("#"):
                key, _, value = line[1:].partition("=")
                if key.strip() == "num_classes":
                    header_classes = int(value)
                continue
            if not line:
                continue
            fields_ = line.split()
            if len(fields_) not in (3, 4, 6, 7):
                raise CloudParseError(f"{path}:{lineno}: expected 3, 4, 6 or 7 values, got {len(fields_)}")
            if width is not None and len(fields_) != width:
                raise CloudParseError(f"{path}:{lineno}: row has {len(fields_)} values, earlier rows {width}")
            width = len(fields_)
            try:
                rows.append([float(v) for v in fields_])
            except ValueError:
                raise CloudParseError(f"{path}:{lineno}: non-numeric value in {line!r}") from None
    if not rows:
        raise CloudParseError(f"{path}: no points")
    table = np.array(rows, dtype=np.float64)
    labels = None
    if width in (4, 7):
        labels = table[:, -1]
        if np.any(labels != np.round(labels)):
            raise CloudParseError(f"{path}: labels must be integers")
        labels = labels.astype(np.int64)
    colors = table[:, 3:6] if width in (6, 7) else None
    if colors is not None and colors.max() > 1:
        colors = colors / 255.0
    nc = num_classes or header_classes or 0
    return PointCloud(table[:, :3], colors, labels, nc)


def _decode_binary(blob: bytes, num_classes: int | None) -> PointCloud:
    if blob[:4] != BINARY_MAGIC:
        raise CloudParseError("not a binary cloud file (bad magic)")
    version, n, flags, nc = struct.unpack_from("<IIII", blob, 4)
    if version != BINARY_VERSION:
        raise CloudParseError(f"unsupported binary cloud version {version}")
    offset = 20
    expected = offset + 12 * n + (12 * n if flags & _HAS_COLORS else 0) + (4 * n if flags & _HAS_LABELS else 0)
    if len(blob) != expected:
        raise CloudParseError(f"binary cloud is {len(blob)} bytes, expected {expected}")

    def take(count, dtype):
        nonlocal offset
        arr = np.frombuffer(blob, dtype=dtype, count=count, offset=offset)
        offset += arr.nbytes
        return arr

    positions = take(3 * n, "<f4").reshape(n, 3)
    colors = take(3 * n, "<f4").reshape(n, 3) if flags & _HAS_COLORS else None
    labels = take(n, "<i4") if flags & _HAS_LABELS else None
    return PointCloud(positions, colors, labels, num_classes or nc)


# ------------------------------------------------------------------ synthetic rooms


CLASS_NAMES = ("floor", "wall", "box", "pillar", "ceiling", "table")
_PALETTE = np.array([
    [0.55, 0.45, 0.35], [0.85, 0.85, 0.80], [0.80, 0.20, 0.20], [0.30, 0.30, 0.75],
    [0.95, 0.95, 0.95], [0.30, 0.65, 0.30], [0.85, 0.65, 0.15], [0.60, 0.25, 0.60],
    [0.15, 0.60, 0.65], [0.45, 0.45, 0.45],
])


@dataclass(frozen=True)
class SceneSpec:
    num_points: int = 4096
    num_classes: int = 6
    room: tuple = (6.0, 5.0, 3.0)
    objects_per_class: int = 2
    noise: float = 0.01
    color_noise: float = 0.03
    seed: int = 0


class SceneConfigError(ValueError):
    pass


def _sample_box_surface(rng, lo, hi, n, skip_bottom=True):
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    size = hi - lo
    faces = []  # (axis, side) pairs; bottom face optional
    for axis in range(3):
        for side in (0, 1):
            if skip_bottom and axis == 2 and side == 0:
                continue
            other = [a for a in range(3) if a != axis]
            faces.append((axis, side, size[other[0]] * size[other[1]]))
    area = np.array([f[2] for f in faces])
    choice = rng.choice(len(faces), size=n, p=area / area.sum())
    pts = lo + rng.random((n, 3)) * size
    for f, (axis, side, _) in enumerate(faces):
        sel = choice == f
        pts[sel, axis] = hi[axis] if side else lo[axis]
    return pts


def gen_synthetic(spec: SceneSpec = SceneSpec()) -> PointCloud:
    """A labeled box-shaped room: floor, walls, then boxes / pillars / ceiling / tables / extra box kinds."""
    q = spec.num_classes
    if q < 2:
        raise SceneConfigError("need at least 2 classes")
    if q > len(_PALETTE):
        raise SceneConfigError(f"at most {len(_PALETTE)} classes supported")
    w, d, h = spec.room
    if min(w, d, h) <= 0.5 or spec.num_points < q:
        raise SceneConfigError("room dimensions must exceed 0.5 m and points must cover every class")
    rng = np.random.default_rng(spec.seed)
    weights = np.array([2.0, 2.0] + [1.0] * (q - 2))
    counts = np.floor(weights / weights.sum() * spec.num_points).astype(int)
    counts[0] += spec.num_points - counts.sum()

    chunks, labels = [], []
    for c in range(q):
        n = counts[c]
        if c == 0:
            pts = np.column_stack([rng.random(n) * w, rng.random(n) * d, np.zeros(n)])
        elif c == 1:
            wall = rng.integers(0, 4, n)
            u, z = rng.random(n), rng.random(n) * h
            x = np.where(wall == 0, 0.0, np.where(wall == 1, w, u * w))
            y = np.where(wall == 2, 0.0, np.where(wall == 3, d, u * d))
            pts = np.column_stack([x, y, z])
        elif c == 4:
            pts = np.column_stack([rng.random(n) * w, rng.random(n) * d, np.full(n, h)])
        else:
            per = np.diff(np.linspace(0, n, spec.objects_per_class + 1).astype(int))
            parts = []
            for m in per:
                if c == 3:  # pillar: thin, floor to ceiling
                    s = rng.uniform(0.2, 0.35)
                    x0, y0 = rng.uniform(0.3, w - 0.3 - s), rng.uniform(0.3, d - 0.3 - s)
                    lo, hi = (x0, y0, 0.0), (x0 + s, y0 + s, h)
                elif c == 5:  # table: thin slab raised off the floor
                    sx, sy = rng.uniform(0.8, 1.4), rng.uniform(0.6, 1.0)
                    x0, y0 = rng.uniform(0.3, w - 0.3 - sx), rng.uniform(0.3, d - 0.3 - sy)
                    z0 = rng.uniform(0.65, 0.8)
                    lo, hi = (x0, y0, z0), (x0 + sx, y0 + sy, z0 + 0.05)
                else:  # boxes of class-dependent size
                    scale = 0.4 + 0.15 * (c % 4)
                    sx, sy, sz = rng.uniform(0.7, 1.3, 3) * scale
                    x0, y0 = rng.uniform(0.3, w - 0.3 - sx), rng.uniform(0.3, d - 0.3 - sy)
                    lo, hi = (x0, y0, 0.0), (x0 + sx, y0 + sy, sz)
                parts.append(_sample_box_surface(rng, lo, hi, m, skip_bottom=c != 5))
            pts = np.concatenate(parts) if parts else np.zeros((0, 3))
        chunks.append(pts)
        labels.append(np.full(len(pts), c))
    positions = np.concatenate(chunks) + rng.normal(0, spec.noise, (spec.num_points, 3))
    label_arr = np.concatenate(labels)
    colors = _PALETTE[label_arr] + rng.normal(0, spec.color_noise, (spec.num_points, 3))
    order = rng.permutation(spec.num_points)
    return PointCloud(positions[order], np.clip(colors[order], 0, 1), label_arr[order], q)


# ------------------------------------------------------------------ crops


@dataclass(frozen=True)
class CropSpec:
    crop_size: int
    seed: int = 0


def sample_crop(cloud: PointCloud, spec: CropSpec | int, rng: np.random.Generator | None = None) -> PointCloud:
    """The ``crop_size`` points nearest a random center, shuffled; small clouds are padded by resampling."""
    if isinstance(spec, int):
        spec = CropSpec(spec)
    rng = rng if rng is not None else np.random.default_rng(spec.seed)
    n = len(cloud)
    center = int(rng.integers(n))
    if n <= spec.crop_size:
        idx = rng.permutation(n)
        if n < spec.crop_size:
            idx = np.concatenate([idx, rng.choice(n, spec.crop_size - n, replace=True)])
        return cloud.subset(idx)
    idx = spatial.knn(cloud.positions[center:center + 1], cloud.positions, spec.crop_size)[0]
    return cloud.subset(rng.permutation(idx))


def make_crops(cloud: PointCloud, count: int, crop_size: int, seed: int = 0) -> list[PointCloud]:
    rng = np.random.default_rng(seed)
    return [sample_crop(cloud, CropSpec(crop_size, seed), rng) for _ in range(count)]
