"""Point-cloud data: OFF meshes, surface sampling, synthetic shapes,
augmentation and the PCB batch container."""

from __future__ import annotations

import io
import os
from dataclasses import dataclass, field, replace
from typing import BinaryIO, Optional, Sequence

import numpy as np

# ---------------------------------------------------------------------------
# Types
# ---------------------------------------------------------------------------


@dataclass
class PointCloud:
    coords: np.ndarray  # [N, 3]
    extra: Optional[np.ndarray] = None  # [N, input_dim - 3]
    class_label: Optional[int] = None
    part_labels: Optional[np.ndarray] = None  # [N]
    category: Optional[int] = None

    def __post_init__(self):
        self.coords = np.asarray(self.coords)
        if self.coords.ndim != 2 or self.coords.shape[1] != 3:
            raise ValueError(f"coords must be [N, 3], got {self.coords.shape}")
        if self.part_labels is not None:
            self.part_labels = np.asarray(self.part_labels)
            if self.part_labels.shape != (len(self.coords),):
                raise ValueError("part_labels must have one entry per point")
        if self.extra is not None:
            self.extra = np.asarray(self.extra)
            if self.extra.shape[0] != len(self.coords):
                raise ValueError("extra channels must have one row per point")

    @property
    def num_points(self) -> int:
        return len(self.coords)

    @property
    def features(self) -> np.ndarray:
        """Per-point input channels: coordinates followed by any extras."""
        if self.extra is None:
            return self.coords
        return np.concatenate([self.coords, self.extra], axis=1)

    def equals(self, other: "PointCloud") -> bool:
        """Bit-exact comparison of coordinates, channels and labels."""

        def same(a, b):
            if a is None or b is None:
                return a is None and b is None
            a, b = np.asarray(a), np.asarray(b)
            return a.shape == b.shape and a.dtype == b.dtype and a.tobytes() == b.tobytes()

        return (same(self.coords, other.coords) and same(self.extra, other.extra)
                and self.class_label == other.class_label
                and same(self.part_labels, other.part_labels))


@dataclass
class Mesh:
    vertices: np.ndarray  # [V, 3]
    faces: np.ndarray  # [F, 3] int

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise ValueError("face index out of range")

    def areas(self) -> np.ndarray:
        a, b, c = (self.vertices[self.faces[:, i]] for i in range(3))
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    def clean(self) -> "Mesh":
        """Drop zero-area triangles."""
        return Mesh(self.vertices, self.faces[self.areas() > 0])


def normalize(coords: np.ndarray) -> np.ndarray:
    """Centre on the centroid and scale into the unit sphere."""
    c = coords - coords.mean(axis=0)
    r = np.max(np.linalg.norm(c, axis=1)) if len(c) else 0.0
    return c / r if r > 0 else c


# ---------------------------------------------------------------------------
# OFF
# ---------------------------------------------------------------------------


class OffParseError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class OffCountsError(OffParseError):
    """Missing or malformed header counts."""


class OffIndexError(OffParseError):
    """A face refers to a vertex that does not exist."""


class OffTruncatedError(OffParseError):
    """Fewer vertex or face records than the header announces."""


def parse_off(text: str) -> Mesh:
    """Parse an OFF mesh; polygons are fan-triangulated.

    Accepts the common ``OFF<V> <F> <E>`` header where counts are fused onto
    the magic line.
    """
    lines = [(i + 1, ln.split("#", 1)[0].strip()) for i, ln in enumerate(text.splitlines())]
    lines = [(n, ln) for n, ln in lines if ln]
    if not lines or not lines[0][1].startswith("OFF"):
        raise OffParseError("missing OFF magic", lines[0][0] if lines else 1)
    pos = 0
    lineno, first = lines[0]
    rest = first[3:].strip()
    if rest:
        counts_line, counts_text = lineno, rest
        pos = 1
    else:
        if len(lines) < 2:
            raise OffCountsError("missing counts line", lineno + 1)
        counts_line, counts_text = lines[1]
        pos = 2
    try:
        counts = [int(t) for t in counts_text.split()]
        if len(counts) < 2:
            raise ValueError
        nv, nf = counts[0], counts[1]
        if nv < 0 or nf < 0:
            raise ValueError
    except ValueError:
        raise OffCountsError(f"malformed counts {counts_text!r}", counts_line) from None

    verts = np.empty((nv, 3))
    for v in range(nv):
        if pos >= len(lines):
            raise OffTruncatedError(f"expected {nv} vertices, found {v}", lines[-1][0] + 1)
        n, ln = lines[pos]
        pos += 1
        try:
            vals = [float(t) for t in ln.split()[:3]]
            if len(vals) != 3:
                raise ValueError
        except ValueError:
            raise OffParseError(f"malformed vertex {ln!r}", n) from None
        verts[v] = vals

    tris = []
    for f in range(nf):
        if pos >= len(lines):
            raise OffTruncatedError(f"expected {nf} faces, found {f}", lines[-1][0] + 1)
        n, ln = lines[pos]
        pos += 1
        try:
            toks = [int(t) for t in ln.split()]
            arity = toks[0]
            idx = toks[1:1 + arity]
            if arity < 3 or len(idx) != arity:
                raise ValueError
        except (ValueError, IndexError):
            raise OffParseError(f"malformed face {ln!r}", n) from None
        for j in idx:
            if j < 0 or j >= nv:
                raise OffIndexError(f"vertex index {j} >= {nv}" if j >= nv else f"negative vertex index {j}", n)
        for t in range(1, arity - 1):
            tris.append((idx[0], idx[t], idx[t + 1]))
    return Mesh(verts, np.array(tris, dtype=np.int64).reshape(-1, 3))


def serialize_off(mesh: Mesh) -> str:
    out = io.StringIO()
    out.write(f"OFF\n{len(mesh.vertices)} {len(mesh.faces)} 0\n")
    for v in mesh.vertices:
        out.write(" ".join(repr(float(c)) for c in v) + "\n")
    for f in mesh.faces:
        out.write(f"3 {f[0]} {f[1]} {f[2]}\n")
    return out.getvalue()


def read_off(path: str | os.PathLike) -> Mesh:
    with open(path, "r", encoding="ascii", errors="replace") as fh:
        return parse_off(fh.read())


# ---------------------------------------------------------------------------
# Surface sampling
# ---------------------------------------------------------------------------


def sample_surface_points(mesh: Mesh, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Area-weighted uniform samples; returns ``(points [n, 3], face index [n])``."""
    areas = mesh.areas()
    total = areas.sum()
    if not np.isfinite(total) or total <= 0:
        raise ValueError("mesh has no non-degenerate triangle")
    face = rng.choice(len(areas), size=n, p=areas / total)
    r1 = rng.random(n)
    r2 = rng.random(n)
    s = np.sqrt(r1)
    u = 1.0 - s
    v = r2 * s
    w = 1.0 - u - v
    a, b, c = (mesh.vertices[mesh.faces[face, i]] for i in range(3))
    return u[:, None] * a + v[:, None] * b + w[:, None] * c, face


def sample_surface_uniform(mesh: Mesh, n: int, rng: np.random.Generator,
                           class_label: int | None = None) -> PointCloud:
    pts, _ = sample_surface_points(mesh, n, rng)
    return PointCloud(normalize(pts), class_label=class_label)


# ---------------------------------------------------------------------------
# Synthetic shapes
# ---------------------------------------------------------------------------

SHAPES = ("sphere", "cube", "torus", "plane", "lollipop")
HEAD, STICK = 0, 1


@dataclass
class SyntheticSpec:
    classes: tuple[str, ...] = ("sphere", "cube", "torus", "plane")
    per_class: int = 16
    points: int = 256
    noise: float = 0.01
    rotate: bool = True
    seed: int = 0

    def __post_init__(self):
        self.classes = tuple(self.classes)
        bad = [c for c in self.classes if c not in SHAPES]
        if bad:
            raise ValueError(f"unknown shape class {bad[0]!r}; expected one of {SHAPES}")

    @classmethod
    def from_text(cls, text: str) -> "SyntheticSpec":
        """Parse flat ``key=value`` lines (``#`` comments allowed)."""
        kw: dict = {}
        for n, raw in enumerate(text.splitlines(), 1):
            ln = raw.split("#", 1)[0].strip()
            if not ln:
                continue
            if "=" not in ln:
                raise ValueError(f"line {n}: expected key=value, got {raw!r}")
            key, val = (s.strip() for s in ln.split("=", 1))
            if key == "classes":
                kw[key] = tuple(c.strip() for c in val.split(",") if c.strip())
            elif key in ("per_class", "points", "seed"):
                kw[key] = int(val)
            elif key == "noise":
                kw[key] = float(val)
            elif key == "rotate":
                kw[key] = val.lower() in ("1", "true", "yes", "on")
            else:
                raise ValueError(f"line {n}: unknown key {key!r}")
        return cls(**kw)

    def to_text(self) -> str:
        return (f"classes={','.join(self.classes)}\nper_class={self.per_class}\npoints={self.points}\n"
                f"noise={self.noise!r}\nrotate={str(self.rotate).lower()}\nseed={self.seed}\n")


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def _sphere(n, rng, radius=1.0):
    d = _unit(rng.normal(size=(n, 3)))
    return radius * d, d


def _cube(n, rng, half=1.0):
    axis = rng.integers(0, 3, n)
    sign = rng.choice([-1.0, 1.0], n)
    pts = rng.uniform(-half, half, (n, 3))
    pts[np.arange(n), axis] = sign * half
    normals = np.zeros((n, 3))
    normals[np.arange(n), axis] = sign
    return pts, normals


def _torus(n, rng, major=1.0, minor=0.35):
    theta = np.empty(0)
    phi = np.empty(0)
    # rejection on the area element (major + minor cos phi)
    while len(theta) < n:
        t = rng.uniform(0, 2 * np.pi, 2 * n)
        p = rng.uniform(0, 2 * np.pi, 2 * n)
        keep = rng.random(2 * n) < (major + minor * np.cos(p)) / (major + minor)
        theta, phi = np.concatenate([theta, t[keep]]), np.concatenate([phi, p[keep]])
    theta, phi = theta[:n], phi[:n]
    normals = np.stack([np.cos(phi) * np.cos(theta), np.cos(phi) * np.sin(theta), np.sin(phi)], 1)
    centre = np.stack([major * np.cos(theta), major * np.sin(theta), np.zeros(n)], 1)
    return centre + minor * normals, normals


def _plane(n, rng, half=1.0):
    pts = np.zeros((n, 3))
    pts[:, :2] = rng.uniform(-half, half, (n, 2))
    normals = np.zeros((n, 3))
    normals[:, 2] = 1.0
    return pts, normals


def _lollipop(n, rng, head=0.5, stick_r=0.1, stick_len=1.2):
    """Sphere head on a capless cylinder along +z; returns points, normals, labels."""
    a_head = 4 * np.pi * head ** 2
    a_stick = 2 * np.pi * stick_r * stick_len
    labels = (rng.random(n) < a_stick / (a_head + a_stick)).astype(np.int64)
    pts = np.empty((n, 3))
    normals = np.empty((n, 3))
    hm = labels == HEAD
    h_pts, h_nrm = _sphere(int(hm.sum()), rng, head)
    pts[hm] = h_pts + np.array([0.0, 0.0, stick_len + head])
    normals[hm] = h_nrm
    m = int((~hm).sum())
    ang = rng.uniform(0, 2 * np.pi, m)
    ring = np.stack([np.cos(ang), np.sin(ang), np.zeros(m)], 1)
    pts[~hm] = stick_r * ring + np.stack([np.zeros(m), np.zeros(m), rng.uniform(0, stick_len, m)], 1)
    normals[~hm] = ring
    return pts, normals, labels


def _rotation_z(rng) -> np.ndarray:
    a = rng.uniform(0, 2 * np.pi)
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def synthetic_shape(name: str, n: int, rng: np.random.Generator, noise: float = 0.0,
                    rotate: bool = False, do_normalize: bool = True):
    """One analytic surface sample: returns ``(points, part_labels or None)``.

    Noise is applied along the surface normal and clipped to three standard
    deviations, so e.g. sphere radii stay within ``3 * noise`` of constant.
    """
    labels = None
    if name == "sphere":
        pts, nrm = _sphere(n, rng)
    elif name == "cube":
        pts, nrm = _cube(n, rng)
    elif name == "torus":
        pts, nrm = _torus(n, rng)
    elif name == "plane":
        pts, nrm = _plane(n, rng)
    elif name == "lollipop":
        pts, nrm, labels = _lollipop(n, rng)
    else:
        raise ValueError(f"unknown shape class {name!r}; expected one of {SHAPES}")
    if noise > 0:
        pts = pts + nrm * np.clip(rng.normal(0.0, noise, (n, 1)), -3 * noise, 3 * noise)
    if rotate:
        pts = pts @ _rotation_z(rng).T
    if do_normalize:
        pts = normalize(pts)
    return pts, labels


def generate_synthetic_set(spec: SyntheticSpec, rng: np.random.Generator | None = None,
                           dtype=np.float32) -> list[PointCloud]:
    """``per_class`` clouds per listed shape, labelled by position in ``spec.classes``.

    Lollipops additionally carry head/stick part labels and category 0.
    """
    rng = rng if rng is not None else np.random.default_rng(spec.seed)
    out = []
    for label, name in enumerate(spec.classes):
        for _ in range(spec.per_class):
            pts, parts = synthetic_shape(name, spec.points, rng, spec.noise, spec.rotate)
            parts = parts.astype(np.int32) if parts is not None else None
            out.append(PointCloud(pts.astype(dtype), class_label=label, part_labels=parts,
                                  category=0 if parts is not None else None))
    return out


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------


@dataclass
class AugmentPolicy:
    """Ranges for the per-cloud scale/shift and per-point jitter.

    ``scale`` and ``shift`` are (low, high) pairs; each bound may be a
    scalar or a per-axis triple.
    """

    scale: tuple = (2.0 / 3.0, 1.5)
    shift: tuple = (-0.2, 0.2)
    jitter_sigma: float = 0.01
    jitter_clip: float = 0.05

    @classmethod
    def identity(cls) -> "AugmentPolicy":
        return cls(scale=(1.0, 1.0), shift=(0.0, 0.0), jitter_sigma=0.0, jitter_clip=0.0)


def _is_const(bounds, value) -> bool:
    lo, hi = (np.broadcast_to(np.asarray(b, float), (3,)) for b in bounds)
    return bool(np.all(lo == value) and np.all(hi == value))


def augment(cloud: PointCloud, rng: np.random.Generator, policy: AugmentPolicy | None = None) -> PointCloud:
    """Anisotropic scale, then global shift, then clipped per-point jitter."""
    policy = policy or AugmentPolicy()
    x = cloud.coords
    dt = x.dtype
    if not _is_const(policy.scale, 1.0):
        lo, hi = policy.scale
        x = x * rng.uniform(lo, hi, 3).astype(dt)
    if not _is_const(policy.shift, 0.0):
        lo, hi = policy.shift
        x = x + rng.uniform(lo, hi, 3).astype(dt)
    if policy.jitter_sigma > 0:
        noise = np.clip(rng.normal(0.0, policy.jitter_sigma, x.shape), -policy.jitter_clip, policy.jitter_clip)
        x = x + noise.astype(dt)
    return replace(cloud, coords=x)


# ---------------------------------------------------------------------------
# PCB container
# ---------------------------------------------------------------------------

PCB_MAGIC = "PCB1"


class PcbFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        self.offset = offset
        super().__init__(f"byte {offset}: {message}")


def _label_kind(clouds: Sequence[PointCloud]) -> str:
    kinds = set()
    for c in clouds:
        if c.part_labels is not None:
            kinds.add("point")
        elif c.class_label is not None:
            kinds.add("class")
        else:
            kinds.add("none")
    if len(kinds) > 1:
        raise ValueError(f"batch mixes label kinds {sorted(kinds)}")
    return kinds.pop() if kinds else "none"


def write_pcb(dest: str | os.PathLike | BinaryIO, clouds: Sequence[PointCloud]) -> None:
    """Write a homogeneous batch (same N, same channels, same label kind)."""
    clouds = list(clouds)
    n = clouds[0].num_points if clouds else 0
    d = clouds[0].features.shape[1] if clouds else 3
    for i, c in enumerate(clouds):
        if c.num_points != n or c.features.shape[1] != d:
            raise ValueError(f"cloud {i} has shape {c.features.shape}, batch expects ({n}, {d})")
    kind = _label_kind(clouds)
    parts = [f"{PCB_MAGIC} count={len(clouds)} points={n} dims={d} labels={kind}\n".encode("ascii")]
    for c in clouds:
        parts.append(np.ascontiguousarray(c.features, dtype="<f4").tobytes())
    if kind == "class":
        parts.append(np.array([c.class_label for c in clouds], dtype="<i4").tobytes())
    elif kind == "point":
        for c in clouds:
            parts.append(np.ascontiguousarray(c.part_labels, dtype="<i4").tobytes())
    data = b"".join(parts)
    if hasattr(dest, "write"):
        dest.write(data)
    else:
        with open(dest, "wb") as fh:
            fh.write(data)


def read_pcb(src: str | os.PathLike | BinaryIO | bytes) -> list[PointCloud]:
    if isinstance(src, (bytes, bytearray)):
        data = bytes(src)
    elif hasattr(src, "read"):
        data = src.read()
    else:
        with open(src, "rb") as fh:
            data = fh.read()
    end = data.find(b"\n")
    if end < 0:
        raise PcbFormatError("missing header line", 0)
    try:
        header = data[:end].decode("ascii").split(" ")
    except UnicodeDecodeError:
        raise PcbFormatError("header is not ASCII", 0) from None
    if not header[0].startswith("PCB"):
        raise PcbFormatError(f"bad magic {header[0]!r}", 0)
    if header[0] != PCB_MAGIC:
        raise PcbFormatError(f"unsupported version {header[0]!r}", 0)
    fields_ = dict(kv.split("=", 1) for kv in header[1:] if "=" in kv)
    try:
        c, n, d = int(fields_["count"]), int(fields_["points"]), int(fields_["dims"])
        kind = fields_["labels"]
    except (KeyError, ValueError):
        raise PcbFormatError(f"malformed header {data[:end]!r}", 0) from None
    if kind not in ("none", "class", "point") or min(c, n, d) < 0 or d < 3:
        raise PcbFormatError(f"malformed header {data[:end]!r}", 0)
    off = end + 1
    n_coord = c * n * d * 4
    n_label = {"none": 0, "class": c * 4, "point": c * n * 4}[kind]
    if len(data) < off + n_coord + n_label:
        raise PcbFormatError(f"truncated payload: need {off + n_coord + n_label} bytes, have {len(data)}",
                             len(data))
    if len(data) > off + n_coord + n_label:
        raise PcbFormatError("trailing bytes after payload (count mismatch)", off + n_coord + n_label)
    feats = np.frombuffer(data, dtype="<f4", count=c * n * d, offset=off).reshape(c, n, d)
    feats = feats.astype(np.float32)
    labels = np.frombuffer(data, dtype="<i4", count=n_label // 4, offset=off + n_coord).astype(np.int32)
    out = []
    for i in range(c):
        extra = feats[i, :, 3:].copy() if d > 3 else None
        cl = int(labels[i]) if kind == "class" else None
        pl = labels[i * n:(i + 1) * n].copy() if kind == "point" else None
        out.append(PointCloud(feats[i, :, :3].copy(), extra=extra, class_label=cl, part_labels=pl))
    return out
