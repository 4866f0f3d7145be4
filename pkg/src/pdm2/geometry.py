"""3D primitives: unit directions, Plücker edges and axis-angle rotations.

Points and directions are plain length-3 float arrays in the stage frame;
the small wrapper types validate invariants where it matters.
"""
from dataclasses import dataclass

import numpy as np

from .errors import DegeneratePoints, InvalidParameter

UNIT_TOL = 1e-12
PLUCKER_TOL = 1e-9


def as_point(p):
    p = np.asarray(p, dtype=float).reshape(3)
    if not np.all(np.isfinite(p)):
        raise InvalidParameter("point coordinates must be finite")
    return p


def unit(v):
    """Normalize ``v`` to length one."""
    v = np.asarray(v, dtype=float).reshape(3)
    n = np.linalg.norm(v)
    if not n > 0:
        raise InvalidParameter("cannot normalize a zero vector")
    return v / n


def is_unit(v, tol=UNIT_TOL):
    return abs(np.linalg.norm(v) - 1.0) <= tol


def sign_canonical(u):
    """Flip ``u`` so its largest-magnitude component is positive."""
    return -u if u[np.argmax(np.abs(u))] < 0 else u


def skew(v):
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def tangent_basis(u):
    """Two orthonormal vectors spanning the plane perpendicular to unit ``u``."""
    a = np.eye(3)[np.argmin(np.abs(u))]
    b1 = np.cross(u, a)
    b1 /= np.linalg.norm(b1)
    b2 = np.cross(u, b1)
    return np.column_stack([b1, b2])


def angle_between(a, b, oriented=True):
    """Angle in radians between two directions (``oriented=False`` ignores sign)."""
    a, b = unit(a), unit(b)
    # atan2 form stays accurate near 0 and pi, unlike arccos
    c = np.dot(a, b)
    if not oriented:
        c = abs(c)
    return float(np.arctan2(np.linalg.norm(np.cross(a, b)), c))


def wrap_angle(theta):
    """Map ``theta`` into ``(-pi, pi]``."""
    t = np.remainder(theta + np.pi, 2 * np.pi) - np.pi
    return float(np.pi if t == -np.pi else t)


@dataclass(frozen=True, eq=False)
class Edge:
    """Line with unit direction ``q`` and moment ``m = p x q``."""

    q: np.ndarray
    m: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.q, dtype=float).reshape(3)
        m = np.asarray(self.m, dtype=float).reshape(3)
        if not is_unit(q, 1e-9):
            raise InvalidParameter("edge direction must be a unit vector")
        if abs(np.dot(q, m)) > PLUCKER_TOL * max(1.0, np.linalg.norm(m)):
            raise InvalidParameter("edge violates the Plücker constraint q.m = 0")
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "m", m)

    @classmethod
    def through(cls, p, q):
        q = unit(q)
        return cls(q, np.cross(as_point(p), q))

    @property
    def point(self):
        """Point of the line closest to the origin."""
        return np.cross(self.q, self.m)

    def flipped(self):
        return Edge(-self.q, -self.m)

    def transformed(self, rot, center):
        """Image of the line under :func:`rotate_about`."""
        r = rotation_matrix(rot.axis, rot.angle)
        return Edge.through(rotate_about(rot, center, self.point), r @ self.q)


@dataclass(frozen=True, eq=False)
class Rotation:
    axis: np.ndarray
    angle: float

    def __post_init__(self):
        object.__setattr__(self, "axis", unit(self.axis))
        object.__setattr__(self, "angle", wrap_angle(self.angle))


def rotation_matrix(axis, theta):
    """Rodrigues: ``I + sin(t) [n]x + (1 - cos(t)) [n]x^2``."""
    k = skew(axis)
    return np.eye(3) + np.sin(theta) * k + (1.0 - np.cos(theta)) * (k @ k)


def recover_point(s, d, v):
    """Beam hit point ``S + d v``."""
    if not d > 0:
        raise InvalidParameter(f"depth must be positive, got {d}")
    return as_point(s) + d * np.asarray(v, dtype=float)


def fit_direction(points):
    """Least-squares line direction through ``points``.

    Dominant right singular vector of the centred point matrix, which
    minimizes ``sum |(p_i - mean) x u|^2``; sign fixed by
    :func:`sign_canonical`.
    """
    p = np.asarray(points, dtype=float).reshape(-1, 3)
    if p.shape[0] < 2:
        raise DegeneratePoints("need at least two points")
    c = p - p.mean(axis=0)
    scale = max(1.0, float(np.abs(p).max()))
    if np.abs(c).max() <= 1e-9 * scale:
        raise DegeneratePoints("all points coincide")
    _, _, vt = np.linalg.svd(c, full_matrices=False)
    return sign_canonical(vt[0])


def make_edge(points):
    """Edge through ``points``: fitted direction, moment from the mean point."""
    p = np.asarray(points, dtype=float).reshape(-1, 3)
    q = fit_direction(p)
    pbar = p.mean(axis=0)
    m = np.cross(pbar, q)
    return Edge(q, m)


def rotate_about(rot, center, p):
    """Rotate ``p`` by ``rot`` about an axis through ``center``."""
    c = as_point(center)
    r = rotation_matrix(rot.axis, rot.angle)
    return r @ (np.asarray(p, dtype=float) - c) + c


def point_on_edge_residual(e, p):
    """Plücker incidence residual ``p x q - m``; zero iff ``p`` is on the line."""
    return np.cross(np.asarray(p, dtype=float), e.q) - e.m


def point_edge_distance(e, p):
    """Euclidean distance(s) from point(s) ``p`` to the line ``e``."""
    p = np.asarray(p, dtype=float)
    r = np.cross(p, e.q) - e.m
    return np.linalg.norm(r, axis=-1) / np.linalg.norm(e.q)
