"""Dataset ingestion: OFF meshes, XYZ files, surface sampling, synthetic shapes, binary cache."""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence

import numpy as np

from .geometry import PointCloud

SHAPES = ("sphere", "cube", "cylinder", "torus", "plane")
CACHE_MAGIC = b"MAE3Dv1"
_NO_LABEL = 0xFFFFFFFF


class DataFormatError(ValueError):
    pass


@dataclass
class MeshSpec:
    vertices: np.ndarray  # (V, 3) float64
    faces: np.ndarray  # (F, 3) int64

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise DataFormatError("face index out of range")

    def face_areas(self) -> np.ndarray:
        a, b, c = (self.vertices[self.faces[:, i]] for i in range(3))
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


@dataclass
class ManifestEntry:
    path: str
    label: int
    split: str
    n_points: int = 0


# ---------------------------------------------------------------------------- OFF

def parse_off(text) -> MeshSpec:
    """Parse an OFF mesh. Polygons are fan-triangulated.

    Accepts the ModelNet40 variant where the counts are glued onto the header
    (``OFF490 582 0``). Raises :class:`DataFormatError` naming the line number.
    """
    if isinstance(text, bytes):
        text = text.decode("ascii", errors="strict")
    lines = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        body = raw.split("#", 1)[0].strip()
        if body:
            lines.append((lineno, body))
    if not lines or not lines[0][1].startswith("OFF"):
        raise DataFormatError("line 1: missing OFF header")

    lineno, first = lines[0]
    rest = first[3:].strip()
    cursor = 1
    if rest:
        count_line = (lineno, rest)
    else:
        if len(lines) < 2:
            raise DataFormatError(f"line {lineno}: missing vertex/face counts")
        count_line = lines[1]
        cursor = 2
    try:
        counts = [int(t) for t in count_line[1].split()]
    except ValueError:
        raise DataFormatError(f"line {count_line[0]}: malformed counts {count_line[1]!r}") from None
    if len(counts) != 3 or min(counts) < 0:
        raise DataFormatError(f"line {count_line[0]}: expected 'V F E' counts, got {count_line[1]!r}")
    nv, nf, _ = counts

    if len(lines) < cursor + nv + nf:
        last = lines[-1][0]
        raise DataFormatError(f"line {last}: file ends before {nv} vertices and {nf} faces were read")

    verts = np.empty((nv, 3))
    for i in range(nv):
        ln, body = lines[cursor + i]
        toks = body.split()
        if len(toks) < 3:
            raise DataFormatError(f"line {ln}: vertex needs 3 coordinates")
        try:
            verts[i] = [float(t) for t in toks[:3]]
        except ValueError:
            raise DataFormatError(f"line {ln}: non-numeric vertex coordinate") from None
    cursor += nv

    tris = []
    for i in range(nf):
        ln, body = lines[cursor + i]
        try:
            toks = [int(t) for t in body.split()]
        except ValueError:
            raise DataFormatError(f"line {ln}: non-integer face entry") from None
        if not toks or toks[0] < 3 or len(toks) < 1 + toks[0]:
            raise DataFormatError(f"line {ln}: malformed face {body!r}")
        idx = toks[1:1 + toks[0]]
        if min(idx) < 0 or max(idx) >= nv:
            raise DataFormatError(f"line {ln}: face index out of range (have {nv} vertices)")
        for j in range(1, len(idx) - 1):
            tris.append((idx[0], idx[j], idx[j + 1]))
    cursor += nf
    if cursor != len(lines):
        raise DataFormatError(f"line {lines[cursor][0]}: trailing content after faces")
    return MeshSpec(verts, np.array(tris, dtype=np.int64).reshape(-1, 3))


def read_off(path) -> MeshSpec:
    return parse_off(Path(path).read_bytes())


def sample_surface(mesh: MeshSpec, n: int, rng=None) -> PointCloud:
    """Area-weighted face choice, then a uniform barycentric point inside each face."""
    rng = np.random.default_rng(rng)
    areas = mesh.face_areas()
    total = areas.sum()
    if not total > 0:
        raise DataFormatError("mesh has zero surface area")
    face = rng.choice(len(areas), size=n, p=areas / total)
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    w = np.stack([1 - r1, r1 * (1 - r2), r1 * r2], axis=1)
    tri = mesh.vertices[mesh.faces[face]]  # (n, 3, 3)
    return PointCloud(np.einsum("nk,nkd->nd", w, tri))


# ---------------------------------------------------------------------------- synthetic shapes

def _sample_shape(name, n, rng):
    if name == "sphere":
        p = rng.normal(size=(n, 3))
        return p / np.linalg.norm(p, axis=1, keepdims=True)
    if name == "cube":
        face = rng.integers(6, size=n)
        uv = rng.uniform(-1, 1, size=(n, 2))
        p = np.empty((n, 3))
        axis = face % 3
        sign = np.where(face < 3, 1.0, -1.0)
        for a in range(3):
            sel = axis == a
            others = [b for b in range(3) if b != a]
            p[sel, a] = sign[sel]
            p[sel, others[0]] = uv[sel, 0]
            p[sel, others[1]] = uv[sel, 1]
        return p
    if name == "cylinder":
        # radius 1, height 2: side area 4*pi, each cap pi
        part = rng.choice(3, size=n, p=[4 / 6, 1 / 6, 1 / 6])
        theta = rng.uniform(0, 2 * np.pi, size=n)
        r = np.where(part == 0, 1.0, np.sqrt(rng.random(n)))
        z = np.where(part == 0, rng.uniform(-1, 1, size=n), np.where(part == 1, 1.0, -1.0))
        return np.stack([r * np.cos(theta), r * np.sin(theta), z], axis=1)
    if name == "torus":
        big, small = 1.0, 0.35
        out = np.empty((0, 3))
        while len(out) < n:
            u = rng.uniform(0, 2 * np.pi, size=2 * n)
            v = rng.uniform(0, 2 * np.pi, size=2 * n)
            # area element is proportional to (R + r cos v)
            keep = rng.random(2 * n) < (big + small * np.cos(v)) / (big + small)
            u, v = u[keep], v[keep]
            ring = big + small * np.cos(v)
            out = np.concatenate([out, np.stack([ring * np.cos(u), ring * np.sin(u), small * np.sin(v)], 1)])
        return out[:n]
    if name == "plane":
        return np.concatenate([rng.uniform(-1, 1, size=(n, 2)), np.zeros((n, 1))], axis=1)
    raise DataFormatError(f"unknown synthetic shape {name!r}; choose from {', '.join(SHAPES)}")


def random_rotation(rng) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def synth_dataset(classes: Sequence[str], n_per_class: int, n_points: int, rng=None,
                  anisotropy: float = 0.3, jitter: float = 0.01, rotate: bool = True,
                  split: str = "train"):
    """Sample ``n_per_class`` clouds for each named primitive.

    Every sample gets a random rotation, a per-axis scale drawn from
    ``[1 - anisotropy, 1 + anisotropy]`` and Gaussian jitter. Labels follow
    the order of ``classes``. Returns ``(clouds, manifest)``.
    """
    for name in classes:
        if name not in SHAPES:
            raise DataFormatError(f"unknown synthetic shape {name!r}; choose from {', '.join(SHAPES)}")
    rng = np.random.default_rng(rng)
    clouds, manifest = [], []
    for label, name in enumerate(classes):
        for i in range(n_per_class):
            p = _sample_shape(name, n_points, rng)
            p = p * rng.uniform(1 - anisotropy, 1 + anisotropy, size=3)
            if rotate:
                p = p @ random_rotation(rng).T
            p = p + rng.normal(scale=jitter, size=p.shape)
            clouds.append(PointCloud(p, label))
            manifest.append(ManifestEntry(f"synth/{name}/{i:04d}", label, split, n_points))
    return clouds, manifest


def split_dataset(clouds, test_fraction=0.25, rng=None):
    """Stratified train/test split. Returns ``(train, test)`` lists."""
    rng = np.random.default_rng(rng)
    labels = np.array([c.label for c in clouds])
    train, test = [], []
    for lab in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == lab))
        n_test = int(round(test_fraction * len(idx)))
        test.extend(idx[:n_test].tolist())
        train.extend(idx[n_test:].tolist())
    return [clouds[i] for i in sorted(train)], [clouds[i] for i in sorted(test)]


# ---------------------------------------------------------------------------- cache

def cache_write(clouds: Sequence[PointCloud], path) -> None:
    with open(path, "wb") as f:
        f.write(CACHE_MAGIC)
        f.write(struct.pack("<I", len(clouds)))
        for c in clouds:
            label = _NO_LABEL if c.label is None else int(c.label)
            f.write(struct.pack("<II", label, len(c)))
            f.write(np.ascontiguousarray(c.points, dtype="<f4").tobytes())


def cache_read(path) -> List[PointCloud]:
    buf = Path(path).read_bytes()
    if buf[:len(CACHE_MAGIC)] != CACHE_MAGIC:
        raise DataFormatError("offset 0: bad magic, not a MAE3Dv1 cache")
    off = len(CACHE_MAGIC)

    def take(nbytes):
        nonlocal off
        if off + nbytes > len(buf):
            raise DataFormatError(f"offset {off}: truncated cache (need {nbytes} bytes, {len(buf) - off} left)")
        chunk = buf[off:off + nbytes]
        off += nbytes
        return chunk

    (count,) = struct.unpack("<I", take(4))
    out = []
    for _ in range(count):
        label, n = struct.unpack("<II", take(8))
        pts = np.frombuffer(take(12 * n), dtype="<f4").reshape(n, 3).astype(np.float64)
        out.append(PointCloud(pts, None if label == _NO_LABEL else label))
    if off != len(buf):
        raise DataFormatError(f"offset {off}: trailing bytes after {count} samples")
    return out


# ---------------------------------------------------------------------------- manifests / xyz

def write_manifest(entries: Sequence[ManifestEntry], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["path", "label", "split"])
        for e in entries:
            w.writerow([e.path, e.label, e.split])


def read_manifest(path) -> List[ManifestEntry]:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    entries = [ManifestEntry(r["path"], int(r["label"]), r["split"]) for r in rows]
    labels = sorted({e.label for e in entries})
    if labels != list(range(len(labels))):
        raise DataFormatError(f"manifest labels must be contiguous from 0, got {labels}")
    return entries


def write_xyz(points, path) -> None:
    pts = points.points if isinstance(points, PointCloud) else np.asarray(points)
    with open(path, "w") as f:
        for x, y, z in pts:
            f.write(f"{x:.6f} {y:.6f} {z:.6f}\n")


def read_xyz(path) -> PointCloud:
    rows = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            body = line.strip()
            if not body:
                continue
            toks = body.split()
            if len(toks) < 3:
                raise DataFormatError(f"line {lineno}: expected 'x y z'")
            try:
                rows.append([float(t) for t in toks[:3]])
            except ValueError:
                raise DataFormatError(f"line {lineno}: non-numeric coordinate") from None
    if not rows:
        raise DataFormatError(f"{path}: no points")
    return PointCloud(np.array(rows))
