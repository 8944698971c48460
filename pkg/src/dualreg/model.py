"""Dual-branch registration network.

Two encoders with disjoint parameters produce rotation-attentive and
translation-attentive features. Each encoder is siamese across the two
point clouds, exchanges point-wise summaries at configured block positions,
and mixes global descriptors across clouds before regression. Rotation is
regressed as a unit quaternion; translation as the offset between two
per-cloud saliency points. The estimate is refined over a fixed number of
iterations by re-transforming the source with the accumulated prediction.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .geometry import Quaternion, RigidTransform
from .torch_se3 import compose_qt, identity_qt, transform_points

logger = logging.getLogger(__name__)

_ZERO_QUAT_EPS = 1e-8


@dataclass
class ModelConfig:
    """Architecture switches. Defaults match the full network."""

    block_channels: tuple[int, ...] = (64, 64, 128, 256)
    pfi_positions: tuple[int, ...] = (3, 4)
    head_hidden: tuple[int, ...] = (512, 256)
    gfi_hidden: int | None = None
    iterations: int = 4
    use_pfi: bool = True
    use_gfi: bool = True
    use_saliency: bool = True
    dual_branch: bool = True
    detach_iterations: bool = True

    def __post_init__(self) -> None:
        self.block_channels = tuple(int(c) for c in self.block_channels)
        self.pfi_positions = tuple(sorted(int(p) for p in self.pfi_positions))
        self.head_hidden = tuple(int(h) for h in self.head_hidden)
        if len(self.block_channels) < 1 or any(c < 1 for c in self.block_channels):
            raise ValueError("block_channels must be positive ints")
        for p in self.pfi_positions:
            if not 2 <= p <= len(self.block_channels):
                raise ValueError(
                    f"pfi position {p} outside [2, {len(self.block_channels)}]; "
                    "the first block has no previous level to exchange"
                )
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.gfi_hidden is not None and self.gfi_hidden < 1:
            raise ValueError("gfi_hidden must be positive")

    @property
    def encoder_channels(self) -> tuple[int, ...]:
        """Per-block output widths actually used by the encoder(s).

        Single-branch mode doubles every block so the shared feature keeps
        the combined capacity of the two dedicated branches.
        """
        if self.dual_branch:
            return self.block_channels
        return tuple(2 * c for c in self.block_channels)

    @property
    def feature_dim(self) -> int:
        return sum(self.encoder_channels)

    @property
    def hybrid_dim(self) -> int:
        return self.feature_dim


def _masked_max(feats: torch.Tensor, mask) -> torch.Tensor:
    """Channel-wise max over the point axis, zeroing dropped rows first.

    ``mask`` is None, a [B, N] keep mask, or a callable that samples an
    elementwise keep mask for the given shape.
    """
    if mask is not None:
        if callable(mask):
            feats = feats * mask(feats.shape)
        else:
            feats = feats * mask.unsqueeze(-1).to(feats.dtype)
    return feats.max(dim=1).values


class PointBlock(nn.Module):
    """Shared per-point MLP block: Linear -> LayerNorm -> GELU.

    LayerNorm normalizes each point's channel vector independently, so no
    information crosses the point axis inside a block.
    """

    def __init__(self, in_channels: int, out_channels: int) -> None:
        super().__init__()
        self.linear = nn.Linear(in_channels, out_channels)
        self.norm = nn.LayerNorm(out_channels)
        self.act = nn.GELU()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.act(self.norm(self.linear(x)))


class BranchEncoder(nn.Module):
    """Siamese point encoder for one branch.

    The same blocks process both clouds. At each configured position the
    block input is the previous level's point-wise features concatenated
    with the other cloud's max-pooled summary of the same level, repeated
    per point. The global descriptor is the channel-wise max over points
    of all block outputs concatenated.
    """

    def __init__(self, channels: tuple[int, ...], pfi_positions: tuple[int, ...], use_pfi: bool) -> None:
        super().__init__()
        self.channels = tuple(channels)
        self.pfi_positions = tuple(pfi_positions) if use_pfi else ()
        blocks = []
        in_c = 3
        for k, out_c in enumerate(self.channels, start=1):
            width = in_c * 2 if k in self.pfi_positions else in_c
            blocks.append(PointBlock(width, out_c))
            in_c = out_c
        self.blocks = nn.ModuleList(blocks)

    @property
    def out_dim(self) -> int:
        return sum(self.channels)

    @staticmethod
    def _with_summary(feats: torch.Tensor, summary: torch.Tensor) -> torch.Tensor:
        rep = summary.unsqueeze(1).expand(-1, feats.shape[1], -1)
        return torch.cat([feats, rep], dim=-1)

    def forward(self, points: torch.Tensor, other_summaries=None, mask=None):
        """Encode one cloud given the other cloud's per-level summaries.

        ``other_summaries`` maps block position k to the [B, C_{k-1}]
        summary consumed at that position; required exactly at the active
        exchange positions.
        """
        other_summaries = other_summaries or {}
        missing = [k for k in self.pfi_positions if k not in other_summaries]
        if missing:
            raise ValueError(f"missing other-cloud summaries for block positions {missing}")
        feats = points
        per_block = []
        for k, block in enumerate(self.blocks, start=1):
            if k in self.pfi_positions:
                feats = self._with_summary(feats, other_summaries[k])
            feats = block(feats)
            per_block.append(feats)
        global_feat = _masked_max(torch.cat(per_block, dim=-1), mask)
        return per_block, global_feat

    def forward_pair(self, px: torch.Tensor, py: torch.Tensor, mask_x=None, mask_y=None):
        """Encode both clouds in lockstep so each level's exchanged summary
        comes from the other cloud's previous level."""
        fx, fy = px, py
        feats_x, feats_y = [], []
        for k, block in enumerate(self.blocks, start=1):
            if k in self.pfi_positions:
                sx = _masked_max(fx, mask_x)
                sy = _masked_max(fy, mask_y)
                in_x = self._with_summary(fx, sy)
                in_y = self._with_summary(fy, sx)
            else:
                in_x, in_y = fx, fy
            fx = block(in_x)
            fy = block(in_y)
            feats_x.append(fx)
            feats_y.append(fy)
        gx = _masked_max(torch.cat(feats_x, dim=-1), mask_x)
        gy = _masked_max(torch.cat(feats_y, dim=-1), mask_y)
        return feats_x, feats_y, gx, gy


class GlobalMixer(nn.Module):
    """Two-layer MLP over the concatenation of own and other global features."""

    def __init__(self, feature_dim: int, hidden: int, out_dim: int) -> None:
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(2 * feature_dim, hidden),
            nn.LayerNorm(hidden),
            nn.GELU(),
            nn.Linear(hidden, out_dim),
        )

    def forward(self, f_self: torch.Tensor, f_other: torch.Tensor) -> torch.Tensor:
        return self.net(torch.cat([f_self, f_other], dim=-1))


def _mlp_head(in_dim: int, hidden: tuple[int, ...], out_dim: int) -> nn.Sequential:
    layers: list[nn.Module] = []
    prev = in_dim
    for h in hidden:
        layers += [nn.Linear(prev, h), nn.LayerNorm(h), nn.GELU()]
        prev = h
    layers.append(nn.Linear(prev, out_dim))
    return nn.Sequential(*layers)


class RotationHead(nn.Module):
    """Regresses a unit quaternion (scalar first, w >= 0)."""

    def __init__(self, in_dim: int, hidden: tuple[int, ...]) -> None:
        super().__init__()
        self.net = _mlp_head(in_dim, hidden, 4)

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        raw = self.net(h)
        norm = raw.norm(dim=-1, keepdim=True)
        tiny = norm < _ZERO_QUAT_EPS
        if bool(tiny.any()):
            logger.warning(
                "rotation head produced %d near-zero raw quaternion(s); substituting identity",
                int(tiny.sum()),
            )
            ident = torch.zeros_like(raw)
            ident[..., 0] = 1.0
            raw = torch.where(tiny, ident, raw)
            norm = raw.norm(dim=-1, keepdim=True)
        q = raw / norm
        return torch.where(q[..., :1] < 0, -q, q)


@dataclass
class EncodedPair:
    """Per-branch features for one (source, reference) encoding pass."""

    fr_x: torch.Tensor
    ft_x: torch.Tensor
    fr_y: torch.Tensor
    ft_y: torch.Tensor
    pointwise_r_x: list[torch.Tensor] = field(default_factory=list)
    pointwise_t_x: list[torch.Tensor] = field(default_factory=list)
    pointwise_r_y: list[torch.Tensor] = field(default_factory=list)
    pointwise_t_y: list[torch.Tensor] = field(default_factory=list)


@dataclass
class IterationOutput:
    """One refinement step: prediction plus everything the losses consume."""

    q: torch.Tensor
    t: torch.Tensor
    saliency_x: torch.Tensor | None
    saliency_y: torch.Tensor | None
    encoded: EncodedPair
    hybrid_r_x: torch.Tensor
    hybrid_t_x: torch.Tensor
    hybrid_r_y: torch.Tensor
    hybrid_t_y: torch.Tensor
    x_input: torch.Tensor


@dataclass
class FeatureBundle:
    """Numpy view of one cloud's features from a single pass."""

    pointwise_r: list[np.ndarray]
    pointwise_t: list[np.ndarray]
    global_r: np.ndarray
    global_t: np.ndarray
    hybrid_r: np.ndarray
    hybrid_t: np.ndarray


@dataclass
class RegistrationResult:
    """Single-pair registration output in numpy/geometry types."""

    per_iteration: list[RigidTransform]
    final: RigidTransform
    saliency_source: list[np.ndarray | None]
    saliency_reference: list[np.ndarray | None]
    bundles_source: list[FeatureBundle] | None = None
    bundles_reference: list[FeatureBundle] | None = None


class RegistrationNet(nn.Module):
    """Full registration model; see module docstring for the layout."""

    def __init__(self, config: ModelConfig | None = None, dtype: torch.dtype = torch.float32) -> None:
        super().__init__()
        self.config = config if config is not None else ModelConfig()
        cfg = self.config
        channels = cfg.encoder_channels
        if cfg.dual_branch:
            self.encoder_r = BranchEncoder(channels, cfg.pfi_positions, cfg.use_pfi)
            self.encoder_t = BranchEncoder(channels, cfg.pfi_positions, cfg.use_pfi)
        else:
            shared = BranchEncoder(channels, cfg.pfi_positions, cfg.use_pfi)
            self.encoder_r = shared
            self.encoder_t = shared
        dim = cfg.feature_dim
        hidden = cfg.gfi_hidden if cfg.gfi_hidden is not None else dim
        if cfg.use_gfi:
            self.mixer_r = GlobalMixer(dim, hidden, cfg.hybrid_dim)
            self.mixer_t = GlobalMixer(dim, hidden, cfg.hybrid_dim)
        else:
            self.mixer_r = None
            self.mixer_t = None
        self.rotation_head = RotationHead(4 * cfg.hybrid_dim, cfg.head_hidden)
        if cfg.use_saliency:
            # One head shared by both clouds; each call sees (own r, own t, other t).
            self.saliency_head = _mlp_head(3 * cfg.hybrid_dim, cfg.head_hidden, 3)
            self.translation_head = None
        else:
            self.saliency_head = None
            self.translation_head = _mlp_head(4 * cfg.hybrid_dim, cfg.head_hidden, 3)
        self.to(dtype)

    def encode(self, px: torch.Tensor, py: torch.Tensor, mask_x=None, mask_y=None) -> EncodedPair:
        """Run both branches on a cloud pair (masks zero rows before pooling)."""
        pw_r_x, pw_r_y, fr_x, fr_y = self.encoder_r.forward_pair(px, py, mask_x, mask_y)
        pw_t_x, pw_t_y, ft_x, ft_y = self.encoder_t.forward_pair(px, py, mask_x, mask_y)
        return EncodedPair(
            fr_x=fr_x, ft_x=ft_x, fr_y=fr_y, ft_y=ft_y,
            pointwise_r_x=pw_r_x, pointwise_t_x=pw_t_x,
            pointwise_r_y=pw_r_y, pointwise_t_y=pw_t_y,
        )

    def _hybrids(self, enc: EncodedPair):
        if self.config.use_gfi:
            hr_x = self.mixer_r(enc.fr_x, enc.fr_y)
            hr_y = self.mixer_r(enc.fr_y, enc.fr_x)
            ht_x = self.mixer_t(enc.ft_x, enc.ft_y)
            ht_y = self.mixer_t(enc.ft_y, enc.ft_x)
        else:
            hr_x, hr_y, ht_x, ht_y = enc.fr_x, enc.fr_y, enc.ft_x, enc.ft_y
        return hr_x, ht_x, hr_y, ht_y

    def forward_once(self, px: torch.Tensor, py: torch.Tensor) -> IterationOutput:
        """One regression pass on the current clouds (no refinement)."""
        enc = self.encode(px, py)
        hr_x, ht_x, hr_y, ht_y = self._hybrids(enc)
        q = self.rotation_head(torch.cat([hr_x, ht_x, hr_y, ht_y], dim=-1))
        if self.config.use_saliency:
            c_x = self.saliency_head(torch.cat([hr_x, ht_x, ht_y], dim=-1))
            c_y = self.saliency_head(torch.cat([hr_y, ht_y, ht_x], dim=-1))
            t = c_y - c_x
        else:
            c_x = c_y = None
            t = self.translation_head(torch.cat([hr_x, ht_x, hr_y, ht_y], dim=-1))
        return IterationOutput(
            q=q, t=t, saliency_x=c_x, saliency_y=c_y, encoded=enc,
            hybrid_r_x=hr_x, hybrid_t_x=ht_x, hybrid_r_y=hr_y, hybrid_t_y=ht_y,
            x_input=px,
        )

    def register(self, px: torch.Tensor, py: torch.Tensor, iterations: int | None = None):
        """Iteratively refine the estimate aligning ``px`` onto ``py``.

        Returns (acc_q [B,4], acc_t [B,3], list[IterationOutput]). The source
        fed to each iteration is the original cloud moved by the accumulated
        estimate so far; with ``detach_iterations`` the accumulation carries
        no gradient across iterations.
        """
        if px.dim() != 3 or px.shape[-1] != 3 or py.dim() != 3 or py.shape[-1] != 3:
            raise ValueError("expected [B, N, 3] point tensors")
        if px.shape[0] != py.shape[0]:
            raise ValueError("batch sizes differ between source and reference")
        n_iter = self.config.iterations if iterations is None else int(iterations)
        acc_q, acc_t = identity_qt(px.shape[0], dtype=px.dtype, device=px.device)
        outputs: list[IterationOutput] = []
        for i in range(n_iter):
            x_cur = px if i == 0 else transform_points(acc_q, acc_t, px)
            out = self.forward_once(x_cur, py)
            if not bool(torch.isfinite(out.q).all() and torch.isfinite(out.t).all()):
                raise RuntimeError(f"non-finite prediction at refinement iteration {i + 1}")
            outputs.append(out)
            step_q = out.q.detach() if self.config.detach_iterations else out.q
            step_t = out.t.detach() if self.config.detach_iterations else out.t
            acc_q, acc_t = compose_qt(step_q, step_t, acc_q, acc_t)
        return acc_q, acc_t, outputs

    @torch.no_grad()
    def register_arrays(
        self,
        source: np.ndarray,
        reference: np.ndarray,
        iterations: int | None = None,
        collect_features: bool = False,
    ) -> RegistrationResult:
        """Register one numpy pair and return geometry-typed results."""
        dtype = next(self.parameters()).dtype
        px = torch.as_tensor(np.asarray(source, dtype=np.float64), dtype=dtype).unsqueeze(0)
        py = torch.as_tensor(np.asarray(reference, dtype=np.float64), dtype=dtype).unsqueeze(0)
        acc_q, acc_t, outputs = self.register(px, py, iterations)
        per_iter = [_qt_to_transform(out.q[0], out.t[0]) for out in outputs]
        final = _qt_to_transform(acc_q[0], acc_t[0])
        sal_x = [None if o.saliency_x is None else o.saliency_x[0].numpy().astype(np.float64) for o in outputs]
        sal_y = [None if o.saliency_y is None else o.saliency_y[0].numpy().astype(np.float64) for o in outputs]
        bundles_x = bundles_y = None
        if collect_features:
            bundles_x, bundles_y = [], []
            for o in outputs:
                hx, htx, hy, hty = o.hybrid_r_x, o.hybrid_t_x, o.hybrid_r_y, o.hybrid_t_y
                bundles_x.append(_bundle(o.encoded, hx, htx, source_side=True))
                bundles_y.append(_bundle(o.encoded, hy, hty, source_side=False))
        return RegistrationResult(
            per_iteration=per_iter,
            final=final,
            saliency_source=sal_x,
            saliency_reference=sal_y,
            bundles_source=bundles_x,
            bundles_reference=bundles_y,
        )


def _qt_to_transform(q: torch.Tensor, t: torch.Tensor) -> RigidTransform:
    arr = q.detach().cpu().numpy().astype(np.float64)
    quat = Quaternion.from_array(arr).normalized()
    return RigidTransform(quat, t.detach().cpu().numpy().astype(np.float64))


def _bundle(enc: EncodedPair, hybrid_r: torch.Tensor, hybrid_t: torch.Tensor, source_side: bool) -> FeatureBundle:
    if source_side:
        pw_r, pw_t, g_r, g_t = enc.pointwise_r_x, enc.pointwise_t_x, enc.fr_x, enc.ft_x
    else:
        pw_r, pw_t, g_r, g_t = enc.pointwise_r_y, enc.pointwise_t_y, enc.fr_y, enc.ft_y
    def to_np(tt: torch.Tensor) -> np.ndarray:
        return tt[0].detach().cpu().numpy().astype(np.float64)

    return FeatureBundle(
        pointwise_r=[to_np(f) for f in pw_r],
        pointwise_t=[to_np(f) for f in pw_t],
        global_r=to_np(g_r),
        global_t=to_np(g_t),
        hybrid_r=to_np(hybrid_r),
        hybrid_t=to_np(hybrid_t),
    )


def contribution_map(bundle: FeatureBundle) -> dict[str, np.ndarray]:
    """Per-point counts of global-feature channels each point supplies.

    For each branch, every channel of the global descriptor is attributed
    to the lowest-index point attaining the max. Counts sum to the branch's
    global feature dimension.
    """
    out = {}
    for name, feats in (("r", bundle.pointwise_r), ("t", bundle.pointwise_t)):
        stacked = np.concatenate(feats, axis=-1)
        winners = np.argmax(stacked, axis=0)
        out[name] = np.bincount(winners, minlength=stacked.shape[0])
    return out
