"""Point-cloud container and file formats.

A PointCloud is an ordered (n, 3) float64 array of positions in meters with
an optional per-point integer instance label. File I/O supports ASCII PLY
(float x/y/z vertex properties, optional uint label) and plain
whitespace-separated XYZ text. Writers emit 9 significant digits.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ParseError

ROTATION_TOL = 1e-9


def check_rotation(rotation: np.ndarray) -> np.ndarray:
    """Validate a proper rotation matrix (orthonormal, det +1) within 1e-9."""
    R = np.asarray(rotation, dtype=float)
    if R.shape != (3, 3):
        raise ValueError(f"rotation must be 3x3, got {R.shape}")
    err = np.abs(R.T @ R - np.eye(3)).max()
    if err > ROTATION_TOL:
        raise ValueError(f"rotation not orthonormal (|R^T R - I| = {err:.3e})")
    det = np.linalg.det(R)
    if abs(det - 1.0) > ROTATION_TOL:
        raise ValueError(f"rotation has det {det:.12f}, expected +1")
    return R


@dataclass
class PointCloud:
    points: np.ndarray  # (n, 3) float64, meters
    labels: np.ndarray | None = None  # (n,) int instance ids

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"points must be (n, 3), got {pts.shape}")
        if pts.size and not np.all(np.isfinite(pts)):
            raise ValueError("points contain non-finite coordinates")
        self.points = pts
        if self.labels is not None:
            lab = np.asarray(self.labels, dtype=np.int64)
            if lab.shape != (pts.shape[0],):
                raise ValueError("labels length must equal number of points")
            self.labels = lab

    def __len__(self) -> int:
        return self.points.shape[0]

    def select(self, mask_or_indices) -> "PointCloud":
        lab = None if self.labels is None else self.labels[mask_or_indices]
        return PointCloud(self.points[mask_or_indices], lab)

    def transform(self, rotation: np.ndarray, translation: np.ndarray) -> "PointCloud":
        pts = self.points @ np.asarray(rotation).T + np.asarray(translation)
        lab = None if self.labels is None else self.labels.copy()
        return PointCloud(pts, lab)


@dataclass
class RigidTransform:
    """Rotation + translation mapping one cloud frame onto another."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        self.rotation = check_rotation(self.rotation)
        t = np.asarray(self.translation, dtype=float).reshape(3)
        self.translation = t

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points) @ self.rotation.T + self.translation

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform(np.eye(3), np.zeros(3))


def _fmt(x: float) -> str:
    return f"{x:.9g}"


def write_ply(cloud: PointCloud, path) -> None:
    n = len(cloud)
    has_labels = cloud.labels is not None
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {n}",
        "property float x",
        "property float y",
        "property float z",
    ]
    if has_labels:
        lines.append("property uint label")
    lines.append("end_header")
    for i in range(n):
        x, y, z = cloud.points[i]
        row = f"{_fmt(x)} {_fmt(y)} {_fmt(z)}"
        if has_labels:
            row += f" {int(cloud.labels[i])}"
        lines.append(row)
    from .storage import atomic_write_text

    atomic_write_text(path, "\n".join(lines) + "\n")


def read_ply(path) -> PointCloud:
    with open(path, "r", encoding="utf-8") as fh:
        raw = fh.read().splitlines()

    if not raw or raw[0].strip() != "ply":
        raise ParseError(path, 1, "missing 'ply' magic line")

    n_vertex = None
    props = []
    in_vertex_element = False
    data_start = None
    for ln, line in enumerate(raw[1:], start=2):
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "format":
            if tok[1:3] != ["ascii", "1.0"]:
                raise ParseError(path, ln, f"unsupported format {' '.join(tok[1:])}")
        elif tok[0] == "element":
            if len(tok) != 3:
                raise ParseError(path, ln, "malformed element line")
            in_vertex_element = tok[1] == "vertex"
            if in_vertex_element:
                try:
                    n_vertex = int(tok[2])
                except ValueError:
                    raise ParseError(path, ln, f"bad vertex count {tok[2]!r}") from None
        elif tok[0] == "property" and in_vertex_element:
            if len(tok) != 3:
                raise ParseError(path, ln, "malformed property line")
            props.append((tok[1], tok[2]))
        elif tok[0] == "end_header":
            data_start = ln
            break
    if data_start is None:
        raise ParseError(path, len(raw), "missing end_header")
    if n_vertex is None:
        raise ParseError(path, data_start, "missing 'element vertex' declaration")

    names = [name for _, name in props]
    try:
        ix, iy, iz = names.index("x"), names.index("y"), names.index("z")
    except ValueError:
        raise ParseError(path, data_start, "vertex element lacks x/y/z properties") from None
    il = names.index("label") if "label" in names else None

    pts = np.empty((n_vertex, 3), dtype=float)
    labels = np.empty(n_vertex, dtype=np.int64) if il is not None else None
    row = 0
    for ln, line in enumerate(raw[data_start:], start=data_start + 1):
        tok = line.split()
        if not tok:
            continue
        if row >= n_vertex:
            raise ParseError(path, ln, "more data rows than declared vertices")
        if len(tok) < len(props):
            raise ParseError(path, ln, f"expected {len(props)} columns, got {len(tok)}")
        try:
            pts[row] = (float(tok[ix]), float(tok[iy]), float(tok[iz]))
            if labels is not None:
                labels[row] = int(tok[il])
        except ValueError as err:
            raise ParseError(path, ln, f"bad numeric value ({err})") from None
        row += 1
    if row != n_vertex:
        raise ParseError(path, len(raw), f"declared {n_vertex} vertices, found {row}")
    return PointCloud(pts, labels)


def write_xyz(cloud: PointCloud, path) -> None:
    lines = [f"{_fmt(x)} {_fmt(y)} {_fmt(z)}" for x, y, z in cloud.points]
    from .storage import atomic_write_text

    atomic_write_text(path, "\n".join(lines) + "\n")


def read_xyz(path) -> PointCloud:
    pts = []
    with open(path, "r", encoding="utf-8") as fh:
        for ln, line in enumerate(fh, start=1):
            tok = line.split()
            if not tok:
                continue
            if len(tok) < 3:
                raise ParseError(path, ln, f"expected at least 3 columns, got {len(tok)}")
            try:
                pts.append((float(tok[0]), float(tok[1]), float(tok[2])))
            except ValueError as err:
                raise ParseError(path, ln, f"bad numeric value ({err})") from None
    return PointCloud(np.asarray(pts, dtype=float).reshape(-1, 3))


def read_cloud(path) -> PointCloud:
    """Dispatch on file suffix: .ply or .xyz/.txt."""
    p = str(path).lower()
    if p.endswith(".ply"):
        return read_ply(path)
    return read_xyz(path)
