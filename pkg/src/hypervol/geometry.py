"""Rotation utilities: unit quaternions, coverings, geodesic distances.

Convention, fixed project-wide: a unit quaternion q = (w, x, y, z) acts on
column vectors through its rotation matrix R(q).  The slice operator samples
the 3-D spectrum at R^{-1} omega, i.e. with the transpose of R(q).
``quat_mul(a, b)`` composes so that b is applied first, then a.
"""

from __future__ import annotations

import numpy as np

from .errors import DomainError


def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(n == 0.0):
        raise DomainError("zero quaternion cannot be normalized")
    return q / n


def check_unit_quat(q: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    if q.shape[-1] != 4:
        raise DomainError(f"quaternion must have 4 components, got shape {q.shape}")
    err = np.abs(np.linalg.norm(q, axis=-1) - 1.0)
    if np.any(err > tol):
        raise DomainError(f"quaternion not unit length (|norm-1| up to {float(np.max(err)):.3e})")
    return q


def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product a*b, broadcasting over leading axes."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    aw, ax, ay, az = (a[..., i] for i in range(4))
    bw, bx, by, bz = (b[..., i] for i in range(4))
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_conj(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrices, shape (..., 3, 3), for unit quaternions."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = (q[..., i] for i in range(4))
    xx, yy, zz = x * x, y * y, z * z
    xy, xz, yz = x * y, x * z, y * z
    wx, wy, wz = w * x, w * y, w * z
    m = np.empty(q.shape[:-1] + (3, 3), dtype=np.float64)
    m[..., 0, 0] = 1.0 - 2.0 * (yy + zz)
    m[..., 0, 1] = 2.0 * (xy - wz)
    m[..., 0, 2] = 2.0 * (xz + wy)
    m[..., 1, 0] = 2.0 * (xy + wz)
    m[..., 1, 1] = 1.0 - 2.0 * (xx + zz)
    m[..., 1, 2] = 2.0 * (yz - wx)
    m[..., 2, 0] = 2.0 * (xz - wy)
    m[..., 2, 1] = 2.0 * (yz + wx)
    m[..., 2, 2] = 1.0 - 2.0 * (xx + yy)
    return m


def axis_angle_quat(axis: np.ndarray, angle_rad: float | np.ndarray) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis, axis=-1, keepdims=True)
    angle = np.asarray(angle_rad, dtype=np.float64)
    half = 0.5 * angle
    return np.concatenate(
        [np.cos(half)[..., None], np.sin(half)[..., None] * axis], axis=-1
    )


def random_quats(rng: np.random.Generator, n: int) -> np.ndarray:
    """Uniform rotations: normalized 4-D Gaussians."""
    q = rng.standard_normal((n, 4))
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def small_rotation_quats(rng: np.random.Generator, n: int, sigma_rad: float) -> np.ndarray:
    """Random-walk perturbations: axis uniform on the sphere, angle ~ N(0, sigma^2)."""
    axis = rng.standard_normal((n, 3))
    norms = np.linalg.norm(axis, axis=-1, keepdims=True)
    norms[norms == 0.0] = 1.0
    axis = axis / norms
    angle = rng.standard_normal(n) * sigma_rad
    return axis_angle_quat(axis, angle)


def geodesic_distance_rad(qa: np.ndarray, qb: np.ndarray) -> np.ndarray:
    """Geodesic distance on SO(3) (radians), antipodal quaternions identified."""
    qa = np.asarray(qa, dtype=np.float64)
    qb = np.asarray(qb, dtype=np.float64)
    dot = np.abs(np.sum(qa * qb, axis=-1))
    return 2.0 * np.arccos(np.clip(dot, -1.0, 1.0))


# Irrational bases of the super-Fibonacci spiral; these two constants give
# near-optimal covering uniformity on the quaternion 3-sphere.
_SF_PHI = np.sqrt(2.0)
_SF_PSI = 1.533751168755204288118041


def rotation_covering(n: int) -> np.ndarray:
    """Deterministic low-discrepancy covering of SO(3) by n unit quaternions."""
    if n < 1:
        raise DomainError("covering size must be >= 1")
    i = np.arange(n, dtype=np.float64)
    s = i + 0.5
    t = s / n
    d = 2.0 * np.pi * s
    r = np.sqrt(t)
    big_r = np.sqrt(1.0 - t)
    alpha = d / _SF_PHI
    beta = d / _SF_PSI
    return np.stack(
        [r * np.sin(alpha), r * np.cos(alpha), big_r * np.sin(beta), big_r * np.cos(beta)],
        axis=-1,
    )


def neighborhood_quats(step_rad: float) -> np.ndarray:
    """The 26 single/combined axis perturbations at a given step, plus identity."""
    offsets = []
    for dx in (-1, 0, 1):
        for dy in (-1, 0, 1):
            for dz in (-1, 0, 1):
                v = np.array([dx, dy, dz], dtype=np.float64)
                norm = np.linalg.norm(v)
                if norm == 0.0:
                    offsets.append(np.array([1.0, 0.0, 0.0, 0.0]))
                else:
                    offsets.append(axis_angle_quat(v / norm, step_rad))
    return np.stack(offsets)
