"""Training loop, batch loss assembly, checkpointing.

The per-batch loss runs the refinement loop iteration by iteration: each
iteration regresses against the residual transform still separating the
re-transformed source from the reference, with the accumulated estimate
held constant (detached) when building that target. A recorded trace of
all detached side inputs (accumulated transforms, perturbation clones,
dropout masks) lets the loss be replayed as a pure function of the
parameters, which the gradient checks rely on.
"""

from __future__ import annotations

import base64
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .losses import AuxiliaryInputs, LossConfig, auxiliary_losses, parameter_loss, total_loss
from .metrics import MetricsReport, evaluate_pairs
from .model import RegistrationNet
from .torch_se3 import compose_qt, identity_qt, residual_qt, transform_points

CHECKPOINT_FORMAT = "dualreg-checkpoint"
CHECKPOINT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 64
    steps: int = 260_000
    seed: int = 0
    log_every: int = 50
    checkpoint_every: int = 1000
    eval_every: int = 0
    aux_every: int = 1
    single_thread: bool = True

    def __post_init__(self) -> None:
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1 or self.steps < 1:
            raise ValueError("batch_size and steps must be >= 1")
        if self.aux_every < 1:
            raise ValueError("aux_every must be >= 1")
        for name in ("log_every", "checkpoint_every", "eval_every"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


def set_determinism(seed: int, single_thread: bool = True) -> None:
    """Seed torch's global RNG (parameter init) and optionally pin to one
    thread so reductions have a fixed order."""
    torch.manual_seed(int(seed))
    if single_thread:
        torch.set_num_threads(1)


@dataclass
class BatchTrace:
    """Detached side inputs recorded from one loss evaluation."""

    acc: list[tuple[torch.Tensor, torch.Tensor]] = field(default_factory=list)
    targets: list[tuple[torch.Tensor, torch.Tensor]] = field(default_factory=list)
    aux: list[AuxiliaryInputs] = field(default_factory=list)


def batch_losses(
    model: RegistrationNet,
    x: torch.Tensor,
    y: torch.Tensor,
    gt_q: torch.Tensor,
    gt_t: torch.Tensor,
    loss_cfg: LossConfig,
    generator: torch.Generator | None = None,
    frozen: BatchTrace | None = None,
    record: bool = False,
    include_aux: bool = True,
):
    """Total loss for one batch; returns (loss, breakdown, trace).

    With ``frozen`` the accumulated transforms, residual targets, perturbed
    clouds and dropout masks are taken from the trace instead of being
    recomputed, so repeated calls differ only through the parameters.
    ``include_aux=False`` skips the sensitivity/dropout passes for this call
    (the every-k-steps cadence knob).
    """
    if frozen is not None and not model.config.detach_iterations:
        raise ValueError("frozen replay assumes detached iteration accumulation")
    n_iter = model.config.iterations
    acc_q, acc_t = identity_qt(x.shape[0], dtype=x.dtype, device=x.device)
    trace = BatchTrace() if record else None
    terms = []
    lp_vals, ls_vals, ld_vals = [], [], []
    for i in range(n_iter):
        if frozen is not None:
            acc_q, acc_t = frozen.acc[i]
        x_cur = x if i == 0 else transform_points(acc_q, acc_t, x)
        out = model.forward_once(x_cur, y)
        if not bool(torch.isfinite(out.q).all() and torch.isfinite(out.t).all()):
            raise RuntimeError(f"non-finite prediction at refinement iteration {i + 1}")
        if frozen is not None:
            tq, tt = frozen.targets[i]
        else:
            tq, tt = residual_qt(gt_q, gt_t, acc_q.detach(), acc_t.detach())
        l_p = parameter_loss(out.q, out.t, tq, tt, loss_cfg.lambda_t)
        rec = AuxiliaryInputs() if record else None
        if include_aux:
            l_s, l_d = auxiliary_losses(
                model, x_cur, y, out, loss_cfg,
                generator=generator,
                frozen=frozen.aux[i] if frozen is not None else None,
                record=rec,
            )
        else:
            zero = torch.zeros((), dtype=x.dtype, device=x.device)
            l_s, l_d = zero, zero
        if record:
            trace.acc.append((acc_q.detach().clone(), acc_t.detach().clone()))
            trace.targets.append((tq.detach().clone(), tt.detach().clone()))
            trace.aux.append(rec)
        terms.append((l_p, l_s, l_d))
        lp_vals.append(float(l_p.detach()))
        ls_vals.append(float(l_s.detach()))
        ld_vals.append(float(l_d.detach()))
        if frozen is None:
            step_q = out.q.detach() if model.config.detach_iterations else out.q
            step_t = out.t.detach() if model.config.detach_iterations else out.t
            acc_q, acc_t = compose_qt(step_q, step_t, acc_q, acc_t)
    loss = total_loss(terms, beta=loss_cfg.beta, gamma=loss_cfg.gamma)
    breakdown = {
        "l_p": float(np.mean(lp_vals)),
        "l_s": float(np.mean(ls_vals)),
        "l_d": float(np.mean(ld_vals)),
        "l_p_per_iter": lp_vals,
        "l_s_per_iter": ls_vals,
        "l_d_per_iter": ld_vals,
    }
    return loss, breakdown, trace


def pairs_to_tensors(pairs, dtype: torch.dtype = torch.float32):
    """Stack registration pairs into batch tensors (uniform sizes required)."""
    if not pairs:
        raise ValueError("no pairs given")
    n_src = {p.source.shape[0] for p in pairs}
    n_ref = {p.reference.shape[0] for p in pairs}
    if len(n_src) != 1 or len(n_ref) != 1:
        raise ValueError(f"pairs have mixed point counts: sources {sorted(n_src)}, references {sorted(n_ref)}")
    x = torch.as_tensor(np.stack([p.source for p in pairs]), dtype=dtype)
    y = torch.as_tensor(np.stack([p.reference for p in pairs]), dtype=dtype)
    gt_q = torch.as_tensor(np.stack([p.gt.rotation.as_array() for p in pairs]), dtype=dtype)
    gt_t = torch.as_tensor(np.stack([p.gt.translation for p in pairs]), dtype=dtype)
    return x, y, gt_q, gt_t


def save_checkpoint(path, model, optimizer, generator, step: int, config_hash: str) -> None:
    path = Path(path)
    torch.save({"model": model.state_dict(), "optimizer": optimizer.state_dict()}, path)
    state = generator.get_state().numpy().tobytes()
    sidecar = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config_hash": config_hash,
        "step": int(step),
        "torch_generator_b64": base64.b64encode(state).decode("ascii"),
    }
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2) + "\n", encoding="utf-8")


def load_checkpoint(path, model, optimizer=None, generator=None, expected_hash: str | None = None) -> int:
    """Restore weights (and optionally optimizer + RNG); returns the step.

    Refuses to load when the sidecar's config hash differs from
    ``expected_hash``: silently fine-tuning under a different configuration
    is how irreproducible results happen.
    """
    path = Path(path)
    sidecar_path = path.with_suffix(".json")
    if not sidecar_path.exists():
        raise CheckpointError(f"missing checkpoint sidecar {sidecar_path}")
    sidecar = json.loads(sidecar_path.read_text(encoding="utf-8"))
    if sidecar.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{sidecar_path} is not a checkpoint sidecar")
    if sidecar.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {sidecar.get('version')}")
    if expected_hash is not None and sidecar["config_hash"] != expected_hash:
        raise CheckpointError(
            "config hash mismatch: checkpoint was written under "
            f"{sidecar['config_hash'][:12]}..., current run is {expected_hash[:12]}..."
        )
    payload = torch.load(path, weights_only=True)
    model.load_state_dict(payload["model"])
    if optimizer is not None:
        optimizer.load_state_dict(payload["optimizer"])
    if generator is not None:
        raw = base64.b64decode(sidecar["torch_generator_b64"])
        generator.set_state(torch.from_numpy(np.frombuffer(raw, dtype=np.uint8).copy()))
    return int(sidecar["step"])


@dataclass
class TrainResult:
    history: list[dict]
    last_step: int
    stopped_early: bool = False
    checkpoint_path: Path | None = None


def train(
    model: RegistrationNet,
    pairs,
    train_cfg: TrainConfig,
    loss_cfg: LossConfig,
    out_dir=None,
    config_hash: str = "",
    resume=None,
    eval_hook=None,
) -> TrainResult:
    """Optimize ``model`` on ``pairs`` with Adam.

    ``eval_hook(model, step) -> bool`` runs every ``eval_every`` steps;
    returning True stops training early. Checkpoints and a JSONL log are
    written under ``out_dir`` when given.
    """
    if train_cfg.single_thread:
        torch.set_num_threads(1)
    x, y, gt_q, gt_t = pairs_to_tensors(pairs, dtype=next(model.parameters()).dtype)
    n_pairs = x.shape[0]
    optimizer = torch.optim.Adam(model.parameters(), lr=train_cfg.learning_rate)
    generator = torch.Generator().manual_seed(train_cfg.seed)
    start = 0
    if resume is not None:
        start = load_checkpoint(resume, model, optimizer, generator, expected_hash=config_hash or None)
    out_dir = Path(out_dir) if out_dir is not None else None
    log_fh = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_fh = open(out_dir / "train_log.jsonl", "a", encoding="utf-8")
    history: list[dict] = []
    stopped = False
    last_step = start
    ckpt_path = None
    try:
        for step in range(start + 1, train_cfg.steps + 1):
            if train_cfg.batch_size >= n_pairs:
                idx = torch.arange(n_pairs)
            else:
                idx = torch.randint(0, n_pairs, (train_cfg.batch_size,), generator=generator)
            loss, breakdown, _ = batch_losses(
                model, x[idx], y[idx], gt_q[idx], gt_t[idx], loss_cfg,
                generator=generator,
                include_aux=(step % train_cfg.aux_every == 0),
            )
            if not math.isfinite(float(loss.detach())):
                raise RuntimeError(f"non-finite loss at step {step}: {breakdown}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            record = {"step": step, "loss": float(loss.detach()), **breakdown, "time": time.time()}
            history.append(record)
            last_step = step
            if log_fh is not None and (step % max(train_cfg.log_every, 1) == 0 or step == train_cfg.steps):
                log_fh.write(json.dumps(record) + "\n")
                log_fh.flush()
            if out_dir is not None and train_cfg.checkpoint_every and step % train_cfg.checkpoint_every == 0:
                ckpt_path = out_dir / f"ckpt_{step:07d}.pt"
                save_checkpoint(ckpt_path, model, optimizer, generator, step, config_hash)
            if eval_hook is not None and train_cfg.eval_every and step % train_cfg.eval_every == 0:
                if eval_hook(model, step):
                    stopped = True
                    break
    finally:
        if log_fh is not None:
            log_fh.close()
    if out_dir is not None:
        ckpt_path = out_dir / "ckpt_final.pt"
        save_checkpoint(ckpt_path, model, optimizer, generator, last_step, config_hash)
    return TrainResult(history=history, last_step=last_step, stopped_early=stopped, checkpoint_path=ckpt_path)


def evaluate_model(model: RegistrationNet, pairs, iterations: int | None = None) -> MetricsReport:
    """Register every pair and score the final estimates."""
    preds = []
    gts = []
    for pair in pairs:
        result = model.register_arrays(pair.source, pair.reference, iterations=iterations)
        preds.append(result.final)
        gts.append(pair.gt)
    return evaluate_pairs(preds, gts)
