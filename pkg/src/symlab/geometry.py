"""Rigid viewpoint algebra, spherical viewpoint sampling and the 6-D rotation action encoding.

Frame conventions (pinned for reproducibility):

* World frame is right-handed with +z up. Azimuth is measured in the x-y plane
  from +x towards +y, elevation from the x-y plane towards +z.
* A :class:`Pose` maps camera coordinates to world coordinates. Camera axes follow
  the pinhole convention x right, y down, z forward (optical axis).
* Look-at poses use world +z as the up vector, falling back to +x when the optical
  axis is (anti)parallel to z.
* Actions are relative transforms expressed in the frame of the source viewpoint.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.typing import ArrayLike, NDArray

ROTATION_INPUT_TOL = 1e-4
POSE_TOL = 1e-6
SIXD_EPS = 1e-8

IDENTITY_6D = np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0])


class InvalidRotationError(ValueError):
    """Matrix is not a proper rotation within tolerance."""


class Degenerate6DError(ValueError):
    """6-D rotation vector cannot be orthonormalized (zero or parallel columns)."""


def _check_rotation(R: NDArray[np.float64], tol: float) -> None:
    if R.shape != (3, 3):
        raise InvalidRotationError(f"rotation must be 3x3, got {R.shape}")
    if not np.all(np.isfinite(R)):
        raise InvalidRotationError("rotation has non-finite entries")
    if not np.allclose(R.T @ R, np.eye(3), atol=tol, rtol=0.0):
        raise InvalidRotationError("rotation is not orthonormal")
    det = np.linalg.det(R)
    if abs(det - 1.0) > tol:
        raise InvalidRotationError(f"rotation must have det=+1, got {det:.6f}")


@dataclass(frozen=True, eq=False)
class Pose:
    """Camera-to-world rigid transform.

    Attributes:
        rotation: (3, 3) orthonormal matrix with det +1.
        translation: (3,) camera position in world units.
    """

    rotation: NDArray[np.float64]
    translation: NDArray[np.float64]

    def __post_init__(self) -> None:
        R = np.array(self.rotation, dtype=np.float64)
        t = np.array(self.translation, dtype=np.float64).reshape(-1)
        if t.shape != (3,):
            raise ValueError(f"translation must be a 3-vector, got shape {t.shape}")
        _check_rotation(R, POSE_TOL)
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> Pose:
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, matrix: ArrayLike) -> Pose:
        """Build from a 4x4 homogeneous matrix."""
        M = np.asarray(matrix, dtype=np.float64)
        if M.shape != (4, 4):
            raise ValueError(f"matrix must be 4x4, got {M.shape}")
        if not np.allclose(M[3], [0.0, 0.0, 0.0, 1.0], atol=1e-9):
            raise ValueError("bottom row must be [0, 0, 0, 1]")
        return cls(M[:3, :3], M[:3, 3])

    def matrix(self) -> NDArray[np.float64]:
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M

    @property
    def position(self) -> NDArray[np.float64]:
        return self.translation

    def transform_points(self, points: ArrayLike) -> NDArray[np.float64]:
        """Map (..., 3) camera-frame points into the world frame."""
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation.T + self.translation

    def allclose(self, other: Pose, atol: float = POSE_TOL) -> bool:
        return bool(
            np.allclose(self.rotation, other.rotation, atol=atol, rtol=0.0)
            and np.allclose(self.translation, other.translation, atol=atol, rtol=0.0)
        )

    def __repr__(self) -> str:
        return f"Pose(rotation={self.rotation.tolist()}, translation={self.translation.tolist()})"


@dataclass(frozen=True, eq=False)
class Action:
    """Relative viewpoint change in the source camera frame.

    ``rotation6d`` holds the first two columns of the relative rotation, possibly
    unnormalized; decoding always goes through Gram-Schmidt.
    """

    translation: NDArray[np.float64]
    rotation6d: NDArray[np.float64]

    def __post_init__(self) -> None:
        t = np.array(self.translation, dtype=np.float64).reshape(-1)
        r = np.array(self.rotation6d, dtype=np.float64).reshape(-1)
        if t.shape != (3,) or r.shape != (6,):
            raise ValueError("action needs a 3-vector translation and a 6-vector rotation")
        t.setflags(write=False)
        r.setflags(write=False)
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "rotation6d", r)

    @classmethod
    def zero(cls) -> Action:
        return cls(np.zeros(3), IDENTITY_6D)

    @classmethod
    def from_vector(cls, v: ArrayLike) -> Action:
        v = np.asarray(v, dtype=np.float64).reshape(-1)
        if v.shape != (9,):
            raise ValueError(f"action vector must have 9 entries, got {v.shape}")
        return cls(v[:3], v[3:])

    def vector(self) -> NDArray[np.float64]:
        """Flat 9-vector (translation, rotation6d) as fed to the transition network."""
        return np.concatenate([self.translation, self.rotation6d])

    def as_pose(self) -> Pose:
        return Pose(sixd_to_rotation(self.rotation6d), self.translation)


@dataclass(frozen=True)
class SphericalCoord:
    azimuth: float
    elevation: float
    radius: float

    def __post_init__(self) -> None:
        if not self.radius > 0:
            raise ValueError(f"radius must be positive, got {self.radius}")
        if not -math.pi / 2 <= self.elevation <= math.pi / 2:
            raise ValueError(f"elevation {self.elevation} outside [-pi/2, pi/2]")
        object.__setattr__(self, "azimuth", float(self.azimuth) % (2 * math.pi))

    def direction(self) -> NDArray[np.float64]:
        ce = math.cos(self.elevation)
        return np.array(
            [ce * math.cos(self.azimuth), ce * math.sin(self.azimuth), math.sin(self.elevation)]
        )


def compose(a: Pose, b: Pose) -> Pose:
    """Apply ``b`` first, then ``a``."""
    return Pose(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def inverse(p: Pose) -> Pose:
    Rt = p.rotation.T
    return Pose(Rt, -Rt @ p.translation)


def rotation_to_6d(R: ArrayLike) -> NDArray[np.float64]:
    R = np.asarray(R, dtype=np.float64)
    _check_rotation(R, ROTATION_INPUT_TOL)
    return np.concatenate([R[:, 0], R[:, 1]])


def sixd_to_rotation(v: ArrayLike) -> NDArray[np.float64]:
    """Gram-Schmidt reconstruction of a rotation from two (unnormalized) columns."""
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if v.shape != (6,):
        raise ValueError(f"expected a 6-vector, got shape {v.shape}")
    a1, a2 = v[:3], v[3:]
    n1 = np.linalg.norm(a1)
    if not n1 > SIXD_EPS:
        raise Degenerate6DError(f"first column has norm {n1:.3g}")
    b1 = a1 / n1
    r = a2 - (b1 @ a2) * b1
    nr = np.linalg.norm(r)
    if not nr > SIXD_EPS:
        raise Degenerate6DError(f"second column is parallel to the first (residual {nr:.3g})")
    b2 = r / nr
    return np.stack([b1, b2, np.cross(b1, b2)], axis=1)


def relative_action(v_from: Pose, v_to: Pose) -> Action:
    """Action that moves the camera from ``v_from`` to ``v_to`` (source-frame)."""
    rel = compose(inverse(v_from), v_to)
    return Action(rel.translation, rel.rotation[:, :2].T.reshape(6))


def apply_action(v: Pose, a: Action) -> Pose:
    return compose(v, a.as_pose())


def compose_actions(a1: Action, a2: Action) -> Action:
    """Single action equivalent to taking ``a1`` and then ``a2``."""
    return relative_action(Pose.identity(), compose(a1.as_pose(), a2.as_pose()))


def look_at(position: ArrayLike, target: ArrayLike) -> Pose:
    position = np.asarray(position, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    forward = target - position
    dist = np.linalg.norm(forward)
    if not dist > 0:
        raise ValueError("camera position coincides with the target")
    forward = forward / dist
    up = np.array([0.0, 0.0, 1.0])
    right = np.cross(forward, up)
    if np.linalg.norm(right) < 1e-9:
        # optical axis along z: fall back to +x as the up reference
        right = np.cross(forward, np.array([1.0, 0.0, 0.0]))
    right = right / np.linalg.norm(right)
    down = np.cross(forward, right)
    return Pose(np.stack([right, down, forward], axis=1), position)


def viewpoint_from_spherical(c: SphericalCoord, target: ArrayLike = (0.0, 0.0, 0.0)) -> Pose:
    target = np.asarray(target, dtype=np.float64)
    return look_at(target + c.radius * c.direction(), target)


def spherical_from_position(position: ArrayLike, target: ArrayLike = (0.0, 0.0, 0.0)) -> SphericalCoord:
    d = np.asarray(position, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    r = float(np.linalg.norm(d))
    el = math.asin(max(-1.0, min(1.0, d[2] / r)))
    return SphericalCoord(math.atan2(d[1], d[0]), el, r)


def rotation_about_axis(axis: ArrayLike, angle: float) -> NDArray[np.float64]:
    """Rodrigues rotation about a unit axis."""
    k = np.asarray(axis, dtype=np.float64)
    k = k / np.linalg.norm(k)
    K = np.array([[0.0, -k[2], k[1]], [k[2], 0.0, -k[0]], [-k[1], k[0], 0.0]])
    return np.eye(3) + math.sin(angle) * K + (1.0 - math.cos(angle)) * (K @ K)


def geodesic_distance(R1: ArrayLike, R2: ArrayLike) -> float:
    """Rotation angle of R1^T R2, in radians."""
    c = (np.trace(np.asarray(R1).T @ np.asarray(R2)) - 1.0) / 2.0
    return float(math.acos(max(-1.0, min(1.0, c))))


def random_rotation(rng: np.random.Generator) -> NDArray[np.float64]:
    """Haar-uniform rotation via QR of a Gaussian matrix."""
    Q, Rr = np.linalg.qr(rng.normal(size=(3, 3)))
    Q = Q * np.sign(np.diag(Rr))
    if np.linalg.det(Q) < 0:
        Q[:, 0] = -Q[:, 0]
    return Q


def random_pose(rng: np.random.Generator, scale: float = 3.0) -> Pose:
    return Pose(random_rotation(rng), rng.uniform(-scale, scale, size=3))


def relative_action_vectors(from_mats: NDArray, to_mats: NDArray) -> NDArray[np.float64]:
    """Batched :func:`relative_action` on (N, 4, 4) pose matrices, returning (N, 9) vectors."""
    R_from = from_mats[:, :3, :3]
    R_rel = np.einsum("nji,njk->nik", R_from, to_mats[:, :3, :3])
    t_rel = np.einsum("nji,nj->ni", R_from, to_mats[:, :3, 3] - from_mats[:, :3, 3])
    sixd = np.concatenate([R_rel[:, :, 0], R_rel[:, :, 1]], axis=1)
    return np.concatenate([t_rel, sixd], axis=1)
