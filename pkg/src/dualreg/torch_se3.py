"""Differentiable batched rigid-transform ops used inside the network.

Same conventions as :mod:`dualreg.geometry` (scalar-first quaternions,
w >= 0 canonical hemisphere, compose(a, b) applies b first), but on torch
tensors with a leading batch dimension.
"""

from __future__ import annotations

import torch


def quat_canonical(q: torch.Tensor) -> torch.Tensor:
    """Flip each quaternion onto the w >= 0 hemisphere."""
    return torch.where(q[..., :1] < 0, -q, q)


def quat_normalize(q: torch.Tensor) -> torch.Tensor:
    return quat_canonical(q / q.norm(dim=-1, keepdim=True))


def quat_conjugate(q: torch.Tensor) -> torch.Tensor:
    return torch.cat([q[..., :1], -q[..., 1:]], dim=-1)


def quat_multiply(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    w1, x1, y1, z1 = a.unbind(-1)
    w2, x2, y2, z2 = b.unbind(-1)
    return torch.stack(
        [
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        ],
        dim=-1,
    )


def quat_to_matrix(q: torch.Tensor) -> torch.Tensor:
    w, x, y, z = q.unbind(-1)
    two = 2.0
    row0 = torch.stack([1 - two * (y * y + z * z), two * (x * y - w * z), two * (x * z + w * y)], dim=-1)
    row1 = torch.stack([two * (x * y + w * z), 1 - two * (x * x + z * z), two * (y * z - w * x)], dim=-1)
    row2 = torch.stack([two * (x * z - w * y), two * (y * z + w * x), 1 - two * (x * x + y * y)], dim=-1)
    return torch.stack([row0, row1, row2], dim=-2)


def rotate_points(q: torch.Tensor, points: torch.Tensor) -> torch.Tensor:
    """Rotate [B, N, 3] points by [B, 4] unit quaternions."""
    return points @ quat_to_matrix(q).transpose(-1, -2)


def transform_points(q: torch.Tensor, t: torch.Tensor, points: torch.Tensor) -> torch.Tensor:
    return rotate_points(q, points) + t.unsqueeze(-2)


def identity_qt(batch: int, dtype=torch.float32, device=None):
    q = torch.zeros(batch, 4, dtype=dtype, device=device)
    q[:, 0] = 1.0
    t = torch.zeros(batch, 3, dtype=dtype, device=device)
    return q, t


def compose_qt(qa, ta, qb, tb):
    """(qa, ta) o (qb, tb): apply b first, then a."""
    q = quat_normalize(quat_multiply(qa, qb))
    t = rotate_points(qa, tb.unsqueeze(1)).squeeze(1) + ta
    return q, t


def inverse_qt(q, t):
    q_inv = quat_canonical(quat_conjugate(q))
    t_inv = -rotate_points(q_inv, t.unsqueeze(1)).squeeze(1)
    return q_inv, t_inv


def residual_qt(gt_q, gt_t, acc_q, acc_t):
    """Residual r with compose(r, acc) == gt."""
    inv_q, inv_t = inverse_qt(acc_q, acc_t)
    return compose_qt(gt_q, gt_t, inv_q, inv_t)
