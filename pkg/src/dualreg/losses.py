"""Training losses.

Three terms per refinement iteration, averaged over iterations:

* parameter loss: l1 on the quaternion plus weighted l2 on the translation,
  against the residual target left after the accumulated estimate;
* transformation sensitivity: each branch's global feature must move more
  under the perturbation it should be sensitive to (rotation for the r
  branch, translation for the t branch) than under the other one;
* feature dropout: global features recomputed with random point rows zeroed
  before every max-pool must stay close to the clean ones.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .torch_se3 import rotate_points, transform_points


@dataclass
class LossConfig:
    lambda_t: float = 4.0
    delta: float = 0.01
    beta: float = 1e-3
    gamma: float = 1e-3
    dropout_ratio: float = 0.3
    enable_tsl: bool = True
    enable_pfdl: bool = True
    tsl_hinge_at_zero: bool = False
    dropout_per_element: bool = False

    def __post_init__(self) -> None:
        if self.lambda_t < 0 or self.delta < 0 or self.beta < 0 or self.gamma < 0:
            raise ValueError("loss weights and margin must be non-negative")
        if not 0.0 <= self.dropout_ratio < 1.0:
            raise ValueError("dropout_ratio must be in [0, 1)")


def align_target_hemisphere(pred_q: torch.Tensor, target_q: torch.Tensor) -> torch.Tensor:
    """Flip each target quaternion to whichever sign is l1-closer to the
    prediction, so q and -q are never penalized as different rotations."""
    d_plus = (pred_q - target_q).abs().sum(dim=-1, keepdim=True)
    d_minus = (pred_q + target_q).abs().sum(dim=-1, keepdim=True)
    return torch.where(d_minus < d_plus, -target_q, target_q)


def parameter_loss(
    pred_q: torch.Tensor,
    pred_t: torch.Tensor,
    target_q: torch.Tensor,
    target_t: torch.Tensor,
    lambda_t: float = 4.0,
) -> torch.Tensor:
    target_q = align_target_hemisphere(pred_q, target_q.detach())
    l_rot = (pred_q - target_q).abs().sum(dim=-1)
    l_trans = (pred_t - target_t.detach()).norm(dim=-1)
    return (l_rot + lambda_t * l_trans).mean()


def build_perturbed_clouds(x: torch.Tensor, q: torch.Tensor, t: torch.Tensor):
    """Rotated-only and translated-only copies of ``x`` from the current
    prediction. Detached: the perturbations are fixed probes, not a path
    for gradients into the regressed parameters."""
    q = q.detach()
    t = t.detach()
    return rotate_points(q, x), x + t.unsqueeze(-2)


def transformation_sensitivity_loss(
    anchor_r: torch.Tensor,
    rotated_r: torch.Tensor,
    translated_r: torch.Tensor,
    anchor_t: torch.Tensor,
    rotated_t: torch.Tensor,
    translated_t: torch.Tensor,
    delta: float = 0.01,
    hinge_at_zero: bool = False,
) -> torch.Tensor:
    """Triplet-style loss on global features of the perturbed source.

    The r branch treats the translated clone as positive (small distance)
    and the rotated clone as negative; the t branch swaps them. The default
    lower bound of each term is the positive distance itself; the
    ``hinge_at_zero`` switch clamps at zero instead.
    """
    d_pos_r = (anchor_r - translated_r).norm(dim=-1)
    d_neg_r = (anchor_r - rotated_r).norm(dim=-1)
    d_pos_t = (anchor_t - rotated_t).norm(dim=-1)
    d_neg_t = (anchor_t - translated_t).norm(dim=-1)
    if hinge_at_zero:
        floor_r = torch.zeros_like(d_pos_r)
        floor_t = torch.zeros_like(d_pos_t)
    else:
        floor_r, floor_t = d_pos_r, d_pos_t
    term_r = torch.maximum(d_pos_r - d_neg_r + delta, floor_r)
    term_t = torch.maximum(d_pos_t - d_neg_t + delta, floor_t)
    return (term_r + term_t).mean()


def sample_dropout_mask(
    n_batch: int,
    n_points: int,
    ratio: float,
    generator: torch.Generator,
    dtype: torch.dtype = torch.float32,
) -> torch.Tensor:
    """[B, N] keep mask with drop probability ``ratio`` per point.

    Rows that come out fully dropped are resampled; a mask that erases a
    whole cloud would make the pooled feature meaningless.
    """
    if not 0.0 <= ratio < 1.0:
        raise ValueError("ratio must be in [0, 1)")
    keep = (torch.rand(n_batch, n_points, generator=generator) >= ratio)
    for _ in range(100):
        dead = ~keep.any(dim=1)
        if not bool(dead.any()):
            break
        redraw = torch.rand(int(dead.sum()), n_points, generator=generator) >= ratio
        keep[dead] = redraw
    else:
        raise RuntimeError("could not sample a dropout mask keeping at least one point per row")
    return keep.to(dtype)


class ElementwiseDropout:
    """Per-element variant: an independent keep mask is drawn at every
    pooling site instead of one shared per-point mask.

    Draws are memoized in call order so a rewound sampler replays the
    exact masks, which keeps a replayed loss a pure function of the
    parameters.
    """

    def __init__(self, ratio: float, generator: torch.Generator, dtype: torch.dtype = torch.float32) -> None:
        if not 0.0 <= ratio < 1.0:
            raise ValueError("ratio must be in [0, 1)")
        self.ratio = ratio
        self.dtype = dtype
        self._generator = generator
        self._draws: list[torch.Tensor] = []
        self._cursor = 0

    def __call__(self, shape) -> torch.Tensor:
        if self._cursor < len(self._draws):
            mask = self._draws[self._cursor]
            if tuple(mask.shape) != tuple(shape):
                raise RuntimeError("replayed dropout mask shape mismatch")
        else:
            mask = (torch.rand(*shape, generator=self._generator) >= self.ratio).to(self.dtype)
            self._draws.append(mask)
        self._cursor += 1
        return mask

    def rewind(self) -> None:
        self._cursor = 0


def feature_dropout_loss(
    clean_r: torch.Tensor,
    dropped_r: torch.Tensor,
    clean_t: torch.Tensor,
    dropped_t: torch.Tensor,
) -> torch.Tensor:
    """l2 gap between clean and dropout global features for one cloud,
    summed over the two branches."""
    gap_r = (clean_r - dropped_r).norm(dim=-1)
    gap_t = (clean_t - dropped_t).norm(dim=-1)
    return (gap_r + gap_t).mean()


def total_loss(
    per_iteration: list[tuple[torch.Tensor, torch.Tensor, torch.Tensor]],
    beta: float = 1e-3,
    gamma: float = 1e-3,
) -> torch.Tensor:
    """Average of L_p + beta * L_s + gamma * L_d over refinement iterations."""
    if not per_iteration:
        raise ValueError("need at least one iteration's losses")
    terms = [lp + beta * ls + gamma * ld for lp, ls, ld in per_iteration]
    return torch.stack(terms).mean()


@dataclass
class AuxiliaryInputs:
    """Frozen side inputs for one iteration's auxiliary losses.

    The training step records these so a finite-difference harness can
    replay the loss as a pure function of the parameters: the perturbed
    clouds and dropout masks are constants there, exactly as the detached
    graph treats them.
    """

    rotated: torch.Tensor | None = None
    translated: torch.Tensor | None = None
    mask_x: object = None
    mask_y: object = None


def auxiliary_losses(
    model,
    x_cur: torch.Tensor,
    y: torch.Tensor,
    out,
    cfg: LossConfig,
    generator: torch.Generator | None = None,
    frozen: AuxiliaryInputs | None = None,
    record: AuxiliaryInputs | None = None,
):
    """Sensitivity and dropout losses for one refinement iteration.

    ``out`` is the iteration's forward output (anchor features and the
    prediction the perturbations are built from). Pass ``frozen`` to reuse
    recorded perturbed clouds / masks; pass ``record`` to capture them.
    """
    device = x_cur.device
    zero = torch.zeros((), dtype=x_cur.dtype, device=device)
    l_s = zero
    l_d = zero
    enc = out.encoded
    if cfg.enable_tsl:
        if not model.config.dual_branch:
            raise ValueError("sensitivity loss needs two branches with separate features")
        if frozen is not None and frozen.rotated is not None:
            rotated, translated = frozen.rotated, frozen.translated
        else:
            rotated, translated = build_perturbed_clouds(x_cur, out.q, out.t)
        if record is not None:
            record.rotated = rotated.detach()
            record.translated = translated.detach()
        enc_rot = model.encode(rotated, y)
        enc_trans = model.encode(translated, y)
        l_s = transformation_sensitivity_loss(
            anchor_r=enc.fr_x, rotated_r=enc_rot.fr_x, translated_r=enc_trans.fr_x,
            anchor_t=enc.ft_x, rotated_t=enc_rot.ft_x, translated_t=enc_trans.ft_x,
            delta=cfg.delta, hinge_at_zero=cfg.tsl_hinge_at_zero,
        )
    if cfg.enable_pfdl and cfg.dropout_ratio > 0.0:
        if frozen is not None and frozen.mask_x is not None:
            mask_x, mask_y = frozen.mask_x, frozen.mask_y
            for m in (mask_x, mask_y):
                if isinstance(m, ElementwiseDropout):
                    m.rewind()
        elif cfg.dropout_per_element:
            if generator is None:
                raise ValueError("dropout needs a torch.Generator")
            mask_x = ElementwiseDropout(cfg.dropout_ratio, generator, x_cur.dtype)
            mask_y = ElementwiseDropout(cfg.dropout_ratio, generator, x_cur.dtype)
        else:
            if generator is None:
                raise ValueError("dropout needs a torch.Generator")
            mask_x = sample_dropout_mask(x_cur.shape[0], x_cur.shape[1], cfg.dropout_ratio, generator, x_cur.dtype)
            mask_y = sample_dropout_mask(y.shape[0], y.shape[1], cfg.dropout_ratio, generator, x_cur.dtype)
        if record is not None:
            record.mask_x, record.mask_y = mask_x, mask_y
        enc_drop = model.encode(x_cur, y, mask_x=mask_x, mask_y=mask_y)
        l_d = feature_dropout_loss(enc.fr_x, enc_drop.fr_x, enc.ft_x, enc_drop.ft_x) + \
            feature_dropout_loss(enc.fr_y, enc_drop.fr_y, enc.ft_y, enc_drop.ft_y)
    return l_s, l_d
