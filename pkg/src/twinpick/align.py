"""Frame alignment between a modeled arm and reference silhouettes.

Coarse registration: iterative nearest-neighbor correspondences with a
closed-form Umeyama similarity fit (rotation, translation, uniform
scale). Refinement: minimize the mean pixel-wise squared discrepancy
between reference silhouettes and re-rendered ones over the 4-parameter
transform. The hard raster is piecewise constant in the parameters, so
the optimizer descends a Gaussian-blurred surrogate with central
finite-difference gradients while reporting (and returning) the best
hard-raster loss seen.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter
from scipy.spatial import cKDTree

from .geom import wrap_angle


class InsufficientPointsError(ValueError):
    """Point-set registration needs at least 3 points per set."""


class NumericAlignError(RuntimeError):
    """Alignment loss or gradient became non-finite."""


@dataclass(frozen=True)
class RigidTransform:
    """Similarity transform of the plane: p -> scale * R(rotation) @ p + t."""

    rotation: float = 0.0
    tx: float = 0.0
    ty: float = 0.0
    scale: float = 1.0

    def __post_init__(self) -> None:
        if self.scale <= 0.0:
            raise ValueError("scale must be > 0")
        object.__setattr__(self, "rotation", wrap_angle(self.rotation))

    def apply(self, pts: np.ndarray) -> np.ndarray:
        c, s = math.cos(self.rotation), math.sin(self.rotation)
        r = np.array([[c, -s], [s, c]])
        return self.scale * pts @ r.T + np.array([self.tx, self.ty])

    def as_vector(self) -> np.ndarray:
        return np.array([self.rotation, self.tx, self.ty, self.scale])

    @staticmethod
    def from_vector(v: np.ndarray) -> "RigidTransform":
        return RigidTransform(float(v[0]), float(v[1]), float(v[2]), float(v[3]))


def umeyama_similarity(src: np.ndarray, dst: np.ndarray) -> RigidTransform:
    """Least-squares similarity aligning paired 2-D points src -> dst."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    xs = src - mu_s
    xd = dst - mu_d
    cov = xd.T @ xs / len(src)
    u, d, vt = np.linalg.svd(cov)
    sgn = np.ones(2)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        sgn[-1] = -1.0
    rot_mat = u @ np.diag(sgn) @ vt
    var_s = (xs * xs).sum() / len(src)
    scale = float((d * sgn).sum() / var_s)
    rot = math.atan2(rot_mat[1, 0], rot_mat[0, 0])
    t = mu_d - scale * rot_mat @ mu_s
    return RigidTransform(rot, float(t[0]), float(t[1]), scale)


def icp_coarse(
    src: np.ndarray,
    dst: np.ndarray,
    max_iters: int = 50,
    tol: float = 1e-9,
) -> RigidTransform:
    """Nearest-neighbor ICP with a similarity inner fit.

    Iterates correspondence + Umeyama fit from the identity, stopping
    when the mean correspondence distance stops improving by tol;
    returns the transform with the best mean distance seen. Reliable
    within roughly a 30-degree rotation basin on clean data.
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if len(src) < 3 or len(dst) < 3:
        raise InsufficientPointsError("need at least 3 points in each set")
    tree = cKDTree(dst)
    xf = RigidTransform()
    best_xf, best_err = xf, math.inf
    prev_err = math.inf
    for _ in range(max_iters):
        moved = xf.apply(src)
        dists, idx = tree.query(moved)
        err = float(dists.mean())
        if err < best_err:
            best_err, best_xf = err, xf
        if prev_err - err < tol:
            break
        prev_err = err
        xf = umeyama_similarity(src, dst[idx])
    return best_xf


@dataclass(frozen=True)
class ViewSpec:
    """One silhouette view: an arm joint configuration plus raster geometry.

    Views differ by arm pose rather than camera pose; the raster maps the
    square [origin, origin + extent]^2 onto width x height pixels sampled
    at pixel centers.
    """

    joints: tuple[float, float]
    width: int = 64
    height: int = 64
    origin: tuple[float, float] = (-0.5, -0.5)
    extent: float = 1.0

    @property
    def pitch(self) -> float:
        return self.extent / self.width


@dataclass(frozen=True)
class Silhouette:
    pixels: np.ndarray  # (height, width) uint8 in {0, 1}
    view_id: int = 0


@dataclass(frozen=True)
class ArmModel:
    """Two-link planar arm rendered as capsules around the link segments."""

    link_lengths: tuple[float, float] = (0.22, 0.18)
    link_widths: tuple[float, float] = (0.07, 0.05)

    def __post_init__(self) -> None:
        if min(self.link_lengths) <= 0 or min(self.link_widths) < 0:
            raise ValueError("link lengths must be > 0 and widths >= 0")

    def segments(self, joints: tuple[float, float]) -> np.ndarray:
        """Link segment endpoints (2 segments x 2 endpoints x 2 coords)."""
        q1, q2 = joints
        base = np.zeros(2)
        elbow = base + self.link_lengths[0] * np.array([math.cos(q1), math.sin(q1)])
        tip = elbow + self.link_lengths[1] * np.array(
            [math.cos(q1 + q2), math.sin(q1 + q2)]
        )
        return np.array([[base, elbow], [elbow, tip]])


def _point_segment_dist(pts: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ab = b - a
    denom = float(ab @ ab)
    if denom == 0.0:
        return np.linalg.norm(pts - a, axis=-1)
    t = np.clip(((pts - a) @ ab) / denom, 0.0, 1.0)
    proj = a + t[..., None] * ab
    return np.linalg.norm(pts - proj, axis=-1)


def render_silhouette(arm: ArmModel, xf: RigidTransform, view: ViewSpec) -> Silhouette:
    """Binary raster of the transformed arm's capsule footprint."""
    segs = arm.segments(view.joints)
    moved = xf.apply(segs.reshape(-1, 2)).reshape(segs.shape)
    xs = view.origin[0] + (np.arange(view.width) + 0.5) * view.pitch
    ys = view.origin[1] + (np.arange(view.height) + 0.5) * view.pitch
    gx, gy = np.meshgrid(xs, ys)
    pts = np.stack([gx, gy], axis=-1)
    mask = np.zeros((view.height, view.width), dtype=bool)
    for (a, b), halfwidth in zip(moved, np.array(arm.link_widths) / 2.0):
        r = halfwidth * xf.scale
        if r <= 0.0:
            continue
        mask |= _point_segment_dist(pts, a, b) <= r
    return Silhouette(mask.astype(np.uint8))


def align_loss(ref: list[Silhouette], est: list[Silhouette]) -> float:
    """Mean over views of the mean pixel-wise squared mask discrepancy."""
    if len(ref) != len(est):
        raise ValueError(f"view count mismatch: {len(ref)} vs {len(est)}")
    total = 0.0
    for a, b in zip(ref, est):
        if a.pixels.shape != b.pixels.shape:
            raise ValueError(f"raster shape mismatch: {a.pixels.shape} vs {b.pixels.shape}")
        diff = a.pixels.astype(np.float64) - b.pixels.astype(np.float64)
        total += float((diff * diff).mean())
    return total / len(ref)


def _soft_loss(
    ref_soft: list[np.ndarray], arm: ArmModel, xf: RigidTransform, views: list[ViewSpec],
    blur_sigma: float,
) -> float:
    total = 0.0
    for rs, view in zip(ref_soft, views):
        est = render_silhouette(arm, xf, view).pixels.astype(np.float64)
        diff = rs - gaussian_filter(est, blur_sigma)
        total += float((diff * diff).mean())
    return total / len(views)


def refine_transform(
    init: RigidTransform,
    arm: ArmModel,
    ref_views: list[tuple[ViewSpec, Silhouette]],
    steps: int = 500,
    step_size: float = 1.0,
    blur_sigma: float = 1.0,
) -> tuple[RigidTransform, float]:
    """Descend the blurred silhouette discrepancy from init.

    Central finite differences of the blurred loss drive a preconditioned
    gradient step with halving on non-improvement; the returned transform
    is the one with the lowest hard-raster loss encountered, so the
    reported loss never exceeds the loss at init. Returns (transform,
    hard loss).
    """
    views = [v for v, _ in ref_views]
    refs = [s for _, s in ref_views]
    pitch = views[0].pitch
    ref_soft = [gaussian_filter(s.pixels.astype(np.float64), blur_sigma) for s in refs]

    def hard(xf: RigidTransform) -> float:
        return align_loss(refs, [render_silhouette(arm, xf, v) for v in views])

    def soft(vec: np.ndarray) -> float:
        return _soft_loss(ref_soft, arm, RigidTransform.from_vector(vec), views, blur_sigma)

    # Parameter-space preconditioner and FD step: a quarter pixel of
    # motion per coordinate keeps the blurred loss responsive.
    arm_extent = sum(arm.link_lengths)
    h = np.array([0.25 * pitch / arm_extent, 0.25 * pitch, 0.25 * pitch, 0.25 * pitch / arm_extent])
    precond = h / pitch

    vec = init.as_vector().astype(np.float64)
    best_vec = vec.copy()
    best_hard = hard(init)
    if not math.isfinite(best_hard):
        raise NumericAlignError("non-finite alignment loss at init")
    cur_soft = soft(vec)
    lr = step_size
    for _ in range(steps):
        grad = np.zeros(4)
        for i in range(4):
            up, dn = vec.copy(), vec.copy()
            up[i] += h[i]
            dn[i] -= h[i]
            grad[i] = (soft(up) - soft(dn)) / (2.0 * h[i])
        if not np.all(np.isfinite(grad)):
            raise NumericAlignError("non-finite gradient during refinement")
        gnorm = float(np.linalg.norm(grad / precond))
        if gnorm == 0.0:
            break
        cand = vec - lr * (precond ** 2) * grad / gnorm * pitch
        cand[3] = max(cand[3], 1e-3)
        cand_soft = soft(cand)
        if cand_soft < cur_soft:
            vec, cur_soft = cand, cand_soft
            cand_hard = hard(RigidTransform.from_vector(vec))
            if cand_hard < best_hard:
                best_hard, best_vec = cand_hard, vec.copy()
            lr = min(lr * 1.25, 4.0 * step_size)
        else:
            lr *= 0.5
            if lr < 1e-4 * step_size:
                break
    return RigidTransform.from_vector(best_vec), best_hard


def write_pgm(path: str | Path, sil: Silhouette) -> None:
    """Dump a silhouette as a binary portable graymap for visual debugging."""
    h, w = sil.pixels.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write((sil.pixels * 255).astype(np.uint8).tobytes())
