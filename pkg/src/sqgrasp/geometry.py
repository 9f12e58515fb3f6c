"""Superquadric shape primitives.

A superquadric is a convex solid described by two curvature exponents
(eps1, eps2), three semi-axis lengths (ax, ay, az), and a rigid pose —
11 parameters total. In the local frame the inside-outside field is

    f(p) = (|x/ax|^(2/eps2) + |y/ay|^(2/eps2))^(eps2/eps1) + |z/az|^(2/eps1)

and the implicit value F = f - 1 is negative inside, zero on the surface,
positive outside. The matching explicit surface map is

    r(eta, omega) = [ ax * c(eta)^eps1 * c(omega)^eps2,
                      ay * c(eta)^eps1 * s(omega)^eps2,
                      az * s(eta)^eps1 ]

with eta in [-pi/2, pi/2], omega in [-pi, pi], where c^e / s^e denote
signed exponentiation sgn(.)*|.|^e so all eight octants are covered.
Exponents are kept in [0.1, 1.9]: the family stays convex and clear of
the numerically singular endpoints.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import permutations, product

import numpy as np
from scipy.spatial.transform import Rotation as _Rotation

from .errors import PoleSingularity
from .pointcloud import PointCloud, check_rotation

EPS_MIN = 0.1
EPS_MAX = 1.9

# |cos|, |sin| below this are snapped to exact zero so that poles and axis
# crossings of the explicit map land exactly on the coordinate planes.
_TRIG_SNAP = 1e-12
# |cos eta| below this switches surface normals to the axial limit formula.
_POLE_COS = 1e-6

_AREA_GRID = (64, 128)  # (eta, omega) cells for area weights / integration


# ---------------------------------------------------------------------------
# Parameter containers
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ShapeParams:
    eps1: float
    eps2: float

    def __post_init__(self):
        if not (self.eps1 > 0 and self.eps2 > 0):
            raise ValueError(f"shape exponents must be positive, got {self}")

    def clamped(self) -> "ShapeParams":
        return ShapeParams(
            float(np.clip(self.eps1, EPS_MIN, EPS_MAX)),
            float(np.clip(self.eps2, EPS_MIN, EPS_MAX)),
        )


@dataclass(frozen=True)
class ScaleParams:
    ax: float
    ay: float
    az: float

    def __post_init__(self):
        if not (self.ax > 0 and self.ay > 0 and self.az > 0):
            raise ValueError(f"semi-axes must be positive, got {self}")

    def as_array(self) -> np.ndarray:
        return np.array([self.ax, self.ay, self.az])

    @property
    def mean(self) -> float:
        return (self.ax + self.ay + self.az) / 3.0


@dataclass(frozen=True)
class Pose:
    """Rigid placement: world_point = rotation @ local_point + translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = check_rotation(self.rotation)
        t = np.asarray(self.translation, dtype=float).reshape(3)
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points) @ self.rotation.T + self.translation

    def invert_apply(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points) - self.translation) @ self.rotation

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(3), np.zeros(3))


@dataclass(frozen=True)
class Superquadric:
    shape: ShapeParams
    scale: ScaleParams
    pose: Pose

    @property
    def center(self) -> np.ndarray:
        # Convex superquadrics are centrally symmetric: the center of mass
        # coincides with the frame origin.
        return self.pose.translation

    def to_dict(self) -> dict:
        q = rotation_to_quat(self.pose.rotation)
        return {
            "eps1": float(self.shape.eps1),
            "eps2": float(self.shape.eps2),
            "ax": float(self.scale.ax),
            "ay": float(self.scale.ay),
            "az": float(self.scale.az),
            "quat": [float(v) for v in q],
            "t": [float(v) for v in self.pose.translation],
        }

    @staticmethod
    def from_dict(d: dict) -> "Superquadric":
        return Superquadric(
            ShapeParams(d["eps1"], d["eps2"]),
            ScaleParams(d["ax"], d["ay"], d["az"]),
            Pose(quat_to_rotation(np.asarray(d["quat"], dtype=float)), d["t"]),
        )


# ---------------------------------------------------------------------------
# Rotation helpers
# ---------------------------------------------------------------------------

def rotation_to_quat(R: np.ndarray) -> np.ndarray:
    """Unit quaternion [w, x, y, z] with w >= 0 (canonical sign)."""
    xyzw = _Rotation.from_matrix(R).as_quat()
    q = np.array([xyzw[3], xyzw[0], xyzw[1], xyzw[2]])
    if q[0] < 0:
        q = -q
    return q / np.linalg.norm(q)


def quat_to_rotation(q: np.ndarray) -> np.ndarray:
    w, x, y, z = np.asarray(q, dtype=float)
    return _Rotation.from_quat([x, y, z, w]).as_matrix()


def rotvec_to_rotation(w: np.ndarray) -> np.ndarray:
    return _Rotation.from_rotvec(np.asarray(w, dtype=float)).as_matrix()


def rotation_angle(R: np.ndarray) -> float:
    """Geodesic angle of a rotation, radians in [0, pi]."""
    c = (np.trace(R) - 1.0) / 2.0
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


def axis_rotation(axis: int, angle: float) -> np.ndarray:
    w = np.zeros(3)
    w[axis] = angle
    return rotvec_to_rotation(w)


# ---------------------------------------------------------------------------
# Implicit / explicit surface forms
# ---------------------------------------------------------------------------

def _signed_pow(c, e: float):
    c = np.asarray(c, dtype=float)
    c = np.where(np.abs(c) < _TRIG_SNAP, 0.0, c)
    return np.sign(c) * np.abs(c) ** e


def _inside_outside(sq: Superquadric, local: np.ndarray) -> np.ndarray:
    """f(p) on (n, 3) local points; surface at f = 1."""
    e1, e2 = sq.shape.eps1, sq.shape.eps2
    a = sq.scale
    xa = np.abs(local[:, 0] / a.ax)
    ya = np.abs(local[:, 1] / a.ay)
    za = np.abs(local[:, 2] / a.az)
    u = xa ** (2.0 / e2) + ya ** (2.0 / e2)
    return u ** (e2 / e1) + za ** (2.0 / e1)


def implicit_value(sq: Superquadric, p_world):
    """Implicit field F at world point(s): negative inside, zero on surface.

    Accepts a single 3-vector or an (n, 3) array; returns a scalar or (n,).
    """
    p = np.asarray(p_world, dtype=float)
    single = p.ndim == 1
    local = sq.pose.invert_apply(np.atleast_2d(p))
    F = _inside_outside(sq, local) - 1.0
    return float(F[0]) if single else F


def _surface_point_local(sq: Superquadric, eta, omega) -> np.ndarray:
    e1, e2 = sq.shape.eps1, sq.shape.eps2
    a = sq.scale
    ce = _signed_pow(np.cos(eta), e1)
    se = _signed_pow(np.sin(eta), e1)
    co = _signed_pow(np.cos(omega), e2)
    so = _signed_pow(np.sin(omega), e2)
    x = a.ax * ce * co
    y = a.ay * ce * so
    z = a.az * se
    return np.stack(np.broadcast_arrays(x, y, z), axis=-1)


def surface_point(sq: Superquadric, eta, omega):
    """Explicit surface map at (eta, omega), world frame.

    Scalar angles give a (3,) point; array angles broadcast to (n, 3).
    """
    local = _surface_point_local(sq, eta, omega)
    single = local.ndim == 1
    world = sq.pose.apply(np.atleast_2d(local))
    return world[0] if single else world


def _gradient_local(sq: Superquadric, local: np.ndarray) -> np.ndarray:
    """Gradient of the implicit field at (n, 3) local points."""
    e1, e2 = sq.shape.eps1, sq.shape.eps2
    a = sq.scale
    xa = np.abs(local[:, 0] / a.ax)
    ya = np.abs(local[:, 1] / a.ay)
    za = np.abs(local[:, 2] / a.az)
    u = xa ** (2.0 / e2) + ya ** (2.0 / e2)
    with np.errstate(divide="ignore", invalid="ignore"):
        gu = np.where(u > 0, u ** (e2 / e1 - 1.0), 0.0)
    gx = (2.0 / e1) * gu * xa ** (2.0 / e2 - 1.0) * np.sign(local[:, 0]) / a.ax
    gy = (2.0 / e1) * gu * ya ** (2.0 / e2 - 1.0) * np.sign(local[:, 1]) / a.ay
    gz = (2.0 / e1) * za ** (2.0 / e1 - 1.0) * np.sign(local[:, 2]) / a.az
    return np.stack([gx, gy, gz], axis=-1)


def surface_normal(sq: Superquadric, eta, omega):
    """Outward unit normal at (eta, omega), world frame.

    Within |cos eta| <= 1e-6 of a pole the gradient degenerates and the
    axial limit (0, 0, +/-1) is used instead.

    Raises PoleSingularity if the gradient norm underflows below 1e-12.
    """
    eta_a = np.atleast_1d(np.asarray(eta, dtype=float))
    omega_a = np.atleast_1d(np.asarray(omega, dtype=float))
    eta_b, omega_b = np.broadcast_arrays(eta_a, omega_a)
    single = np.ndim(eta) == 0 and np.ndim(omega) == 0

    local = _surface_point_local(sq, eta_b, omega_b).reshape(-1, 3)
    n_local = np.zeros_like(local)

    at_pole = np.abs(np.cos(eta_b.ravel())) <= _POLE_COS
    if np.any(at_pole):
        n_local[at_pole, 2] = np.sign(np.sin(eta_b.ravel()[at_pole]))
    if np.any(~at_pole):
        g = _gradient_local(sq, local[~at_pole])
        norms = np.linalg.norm(g, axis=1)
        if np.any(norms < 1e-12):
            raise PoleSingularity("implicit gradient underflow away from pole")
        n_local[~at_pole] = g / norms[:, None]

    world = n_local @ sq.pose.rotation.T
    return world[0] if single else world.reshape(eta_b.shape + (3,))


# ---------------------------------------------------------------------------
# Surface sampling and area
# ---------------------------------------------------------------------------

def _area_weights(sq: Superquadric):
    """Per-cell surface-area weights on the (eta, omega) grid.

    The area element |r_eta x r_omega| is approximated at cell centers by
    central-difference partials of the explicit map.
    """
    n_eta, n_omega = _AREA_GRID
    d_eta = np.pi / n_eta
    d_omega = 2.0 * np.pi / n_omega
    etas = -np.pi / 2 + (np.arange(n_eta) + 0.5) * d_eta
    omegas = -np.pi + (np.arange(n_omega) + 0.5) * d_omega
    E, O = np.meshgrid(etas, omegas, indexing="ij")

    h = 1e-5
    r_eta = (_surface_point_local(sq, E + h, O) - _surface_point_local(sq, E - h, O)) / (2 * h)
    r_omega = (_surface_point_local(sq, E, O + h) - _surface_point_local(sq, E, O - h)) / (2 * h)
    w = np.linalg.norm(np.cross(r_eta, r_omega), axis=-1) * d_eta * d_omega
    return etas, omegas, d_eta, d_omega, w


def surface_area(sq: Superquadric) -> float:
    """Total surface area in m^2, by numerical integration."""
    return float(_area_weights(sq)[4].sum())


def sample_surface(sq: Superquadric, n: int, seed: int) -> PointCloud:
    """n surface points, equal-area distributed over the surface.

    Cells of a 64x128 (eta, omega) grid are drawn proportionally to their
    surface-area weight by systematic (low-variance) resampling, then each
    draw is jittered uniformly within its cell. Deterministic given seed.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    etas, omegas, d_eta, d_omega, w = _area_weights(sq)
    p = (w / w.sum()).ravel()
    cum = np.cumsum(p)
    positions = (rng.random() + np.arange(n)) / n
    cells = np.searchsorted(cum, positions * cum[-1], side="left")
    cells = np.minimum(cells, p.size - 1)
    i_eta, i_omega = np.unravel_index(cells, w.shape)

    eta = etas[i_eta] + (rng.random(n) - 0.5) * d_eta
    omega = omegas[i_omega] + (rng.random(n) - 0.5) * d_omega
    return PointCloud(surface_point(sq, eta, omega))


# ---------------------------------------------------------------------------
# Self-symmetry
# ---------------------------------------------------------------------------

def _octahedral_rotations():
    mats = []
    for perm in permutations(range(3)):
        for signs in product((1.0, -1.0), repeat=3):
            M = np.zeros((3, 3))
            for i in range(3):
                M[i, perm[i]] = signs[i]
            if np.linalg.det(M) > 0:
                mats.append(M)
    mats.sort(key=lambda m: tuple(m.ravel()), reverse=True)
    return tuple(mats)


_OCTAHEDRAL = _octahedral_rotations()


@dataclass(frozen=True)
class SymmetryGroup:
    """Discrete self-rotations plus axes of continuous (revolution) symmetry.

    `rotations` hold the proper rotations that leave the implicit field
    invariant. `continuous_axes` flags local axes (0=x, 1=y, 2=z) about
    which the shape is a solid of revolution up to the detection
    tolerances; consumers treat rotation about those axes as unconstrained.
    """

    rotations: tuple
    continuous_axes: tuple


def _snap_scales(scale: ScaleParams, rtol: float) -> ScaleParams:
    a = scale.as_array()
    groups = [{0}, {1}, {2}]
    for i in range(3):
        for j in range(i + 1, 3):
            if abs(a[i] - a[j]) <= rtol * max(a[i], a[j]):
                gi = next(g for g in groups if i in g)
                gj = next(g for g in groups if j in g)
                if gi is not gj:
                    groups.remove(gj)
                    gi |= gj
    snapped = a.copy()
    for g in groups:
        idx = sorted(g)
        snapped[idx] = a[idx].mean()
    return ScaleParams(*snapped)


def _continuous_axes(sq: Superquadric, scale_rtol=0.01, eps_tol=0.05):
    e1, e2 = sq.shape.eps1, sq.shape.eps2
    ax, ay, az = sq.scale.ax, sq.scale.ay, sq.scale.az
    near = lambda a, b: abs(a - b) <= scale_rtol * max(a, b)
    round1 = lambda e: abs(e - 1.0) <= eps_tol
    axes = []
    if near(ay, az) and round1(e1) and round1(e2):
        axes.append(0)
    if near(ax, az) and round1(e1) and round1(e2):
        axes.append(1)
    if near(ax, ay) and round1(e2):
        axes.append(2)
    return tuple(axes)


def symmetry_rotations(sq: Superquadric, scale_rtol: float = 0.0) -> SymmetryGroup:
    """Rotations that map the superquadric onto itself.

    Every superquadric carries the pi-flip group {I, Rx(pi), Ry(pi),
    Rz(pi)}; equal semi-axes and matching exponents add axis-swap
    elements (detected by checking implicit-field invariance over the 24
    octahedral rotations). With scale_rtol > 0 semi-axes within that
    relative tolerance are treated as equal before detection, which is
    useful when comparing against noisily estimated shapes. Continuous
    revolution symmetry is reported as flags, not rotation matrices.
    """
    probe_sq = sq
    if scale_rtol > 0:
        probe_sq = Superquadric(sq.shape, _snap_scales(sq.scale, scale_rtol), sq.pose)

    rng = np.random.default_rng(714025)
    probes = (rng.random((100, 3)) * 2.0 - 1.0) * (1.2 * probe_sq.scale.as_array())
    f0 = _inside_outside(probe_sq, probes)
    tol = 1e-11 * np.maximum(1.0, np.abs(f0))

    rotations = []
    for R in _OCTAHEDRAL:
        fr = _inside_outside(probe_sq, probes @ R.T)
        if np.all(np.abs(fr - f0) <= tol):
            rotations.append(R)
    return SymmetryGroup(tuple(rotations), _continuous_axes(sq))
