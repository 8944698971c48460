"""Point-to-point ICP baseline.

Nearest neighbours from a KD-tree, closed-form rigid alignment per
iteration (SVD with a determinant guard so the result is a proper
rotation), stopping on transform delta or the iteration cap.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .geometry import RigidTransform, compose
from .validation import check_points

# The mean squared correspondence residual of classic ICP is non-increasing;
# a rise beyond float slack means the update step is broken.
_MONOTONE_SLACK = 1e-9
_RANK_EPS = 1e-9


@dataclass
class IcpConfig:
    max_iterations: int = 50
    convergence_tol: float = 1e-6
    max_correspondence_distance: float = math.inf

    def __post_init__(self) -> None:
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.convergence_tol <= 0:
            raise ValueError("convergence_tol must be positive")
        if not self.max_correspondence_distance > 0:
            raise ValueError("max_correspondence_distance must be positive")


@dataclass
class IcpResult:
    transform: RigidTransform
    iterations: int
    residual: float
    converged: bool
    degenerate: bool
    residual_history: list[float] = field(default_factory=list)


def kabsch(source: np.ndarray, target: np.ndarray) -> tuple[RigidTransform, bool]:
    """Least-squares rigid transform mapping ``source`` onto ``target``
    (paired rows). Second return is True when the cross-covariance is rank
    deficient and the rotation is not uniquely determined.
    """
    p = check_points(source, "source")
    q = check_points(target, "target")
    if p.shape != q.shape:
        raise ValueError("paired point sets must have identical shapes")
    pc = p.mean(axis=0)
    qc = q.mean(axis=0)
    h = (p - pc).T @ (q - qc)
    u, s, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    if d == 0.0:
        d = 1.0
    corr = np.diag([1.0, 1.0, d])
    r = vt.T @ corr @ u.T
    t = qc - r @ pc
    degenerate = bool(s[2] <= _RANK_EPS * max(s[0], 1.0))
    return RigidTransform.from_matrix4(_embed(r, t)), degenerate


def _embed(r: np.ndarray, t: np.ndarray) -> np.ndarray:
    m = np.eye(4)
    m[:3, :3] = r
    m[:3, 3] = t
    return m


def icp(
    source: np.ndarray,
    reference: np.ndarray,
    init: RigidTransform | None = None,
    config: IcpConfig | None = None,
) -> IcpResult:
    """Align ``source`` onto ``reference`` starting from ``init``
    (identity by default)."""
    x = check_points(source, "source")
    y = check_points(reference, "reference")
    cfg = config if config is not None else IcpConfig()
    transform = init if init is not None else RigidTransform.identity()
    tree = cKDTree(y)
    history: list[float] = []
    prev_mse = math.inf
    converged = False
    iterations = 0
    for it in range(1, cfg.max_iterations + 1):
        moved = transform.apply(x)
        dist, idx = tree.query(moved)
        if math.isfinite(cfg.max_correspondence_distance):
            keep = dist <= cfg.max_correspondence_distance
        else:
            keep = np.ones(len(dist), dtype=bool)
        if int(keep.sum()) < 3:
            return IcpResult(transform, it, prev_mse if history else math.inf, False, True, history)
        mse = float(np.mean(dist[keep] ** 2))
        # Guaranteed only when every point keeps a correspondence; a distance
        # cutoff changes the summand set between iterations.
        if not math.isfinite(cfg.max_correspondence_distance) and mse > prev_mse + _MONOTONE_SLACK:
            raise RuntimeError(
                f"ICP residual increased at iteration {it}: {prev_mse:.3e} -> {mse:.3e}"
            )
        history.append(mse)
        prev_mse = mse
        iterations = it
        step, degenerate = kabsch(moved[keep], y[idx[keep]])
        if degenerate:
            return IcpResult(transform, it, mse, False, True, history)
        transform = compose(step, transform)
        delta = float(np.linalg.norm(step.as_matrix4() - np.eye(4)))
        if delta < cfg.convergence_tol:
            converged = True
            break
    final = transform.apply(x)
    dist, _ = tree.query(final)
    if math.isfinite(cfg.max_correspondence_distance):
        kept = dist[dist <= cfg.max_correspondence_distance]
        residual = float(np.mean(kept**2)) if kept.size else math.inf
    else:
        residual = float(np.mean(dist**2))
    return IcpResult(transform, iterations, residual, converged, False, history)
