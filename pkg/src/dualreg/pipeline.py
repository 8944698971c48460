"""End-to-end runs assembled from the lower modules.

Everything here is deterministic given the run config: dataset generation,
training, evaluation with either the learned model or ICP, single-pair
registration, and the small-scale overfit harness used to sanity-check the
whole training path on a handful of pairs.
"""

from __future__ import annotations

import dataclasses
import statistics
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import plyio
from .config import RunConfig, config_hash, dump_config, load_config, replace_section
from .data import build_dataset, pairs_from_manifest, read_manifest, write_manifest
from .icp import IcpConfig, icp
from .losses import build_perturbed_clouds
from .metrics import MetricsReport, evaluate_pairs, write_report
from .model import RegistrationNet, RegistrationResult, contribution_map
from .train import TrainResult, evaluate_model, load_checkpoint, set_determinism, train


def build_model(cfg: RunConfig) -> RegistrationNet:
    """Seed torch, then construct the network (init draws from the seed)."""
    set_determinism(cfg.train.seed, single_thread=cfg.train.single_thread)
    return RegistrationNet(cfg.model)


def generate_dataset(cfg: RunConfig, out_dir, splits=("train", "val", "test"), write_ply: bool = True):
    """Write manifest + pair PLYs per split; returns manifest paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out_dir / "config.yaml")
    paths = {}
    for split in splits:
        pairs, manifest = build_dataset(cfg.data, split)
        split_dir = out_dir / split
        split_dir.mkdir(exist_ok=True)
        manifest_path = split_dir / "manifest.json"
        write_manifest(manifest, manifest_path)
        if write_ply:
            for i, pair in enumerate(pairs):
                plyio.write_ply(split_dir / f"pair_{i:04d}_source.ply", pair.source)
                plyio.write_ply(split_dir / f"pair_{i:04d}_reference.ply", pair.reference)
        paths[split] = manifest_path
    return paths


def load_split(cfg: RunConfig, split: str):
    pairs, _ = build_dataset(cfg.data, split)
    return pairs


def run_training(cfg: RunConfig, out_dir, resume=None) -> tuple[RegistrationNet, TrainResult]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out_dir / "config.yaml")
    model = build_model(cfg)
    pairs = load_split(cfg, "train")
    result = train(
        model,
        pairs,
        cfg.train,
        cfg.loss,
        out_dir=out_dir,
        config_hash=config_hash(cfg),
        resume=resume,
    )
    return model, result


def load_model(cfg: RunConfig, checkpoint) -> RegistrationNet:
    model = RegistrationNet(cfg.model)
    load_checkpoint(checkpoint, model, expected_hash=config_hash(cfg))
    model.eval()
    return model


def _icp_predictions(pairs, icp_cfg: IcpConfig | None = None):
    cfg = icp_cfg if icp_cfg is not None else IcpConfig()
    return [icp(p.source, p.reference, config=cfg).transform for p in pairs]


def run_evaluation(
    cfg: RunConfig,
    out_dir=None,
    checkpoint=None,
    model: RegistrationNet | None = None,
) -> MetricsReport:
    """Evaluate the configured method on the configured split."""
    pairs = load_split(cfg, cfg.eval.split)
    if cfg.eval.method == "icp":
        preds = _icp_predictions(pairs)
        report = evaluate_pairs(preds, [p.gt for p in pairs])
    else:
        if model is None:
            if checkpoint is None:
                raise ValueError("learned evaluation needs a checkpoint or an in-memory model")
            model = load_model(cfg, checkpoint)
        with torch.no_grad():
            report = evaluate_model(model, pairs, iterations=cfg.eval.iterations)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        dump_config(cfg, out_dir / "config.yaml")
        write_report(report, out_dir / "metrics.txt", out_dir / "metrics.json")
    return report


def register_pair(model: RegistrationNet, source: np.ndarray, reference: np.ndarray) -> RegistrationResult:
    with torch.no_grad():
        return model.register_arrays(source, reference, collect_features=True)


@dataclass
class InspectionRecord:
    """Per-iteration diagnostics for one pair."""

    iteration: int
    contribution_source: dict
    contribution_reference: dict
    tsl_distances: dict


def inspect_pair(model: RegistrationNet, source, reference) -> list[InspectionRecord]:
    """Contribution maps and branch sensitivity distances per iteration.

    The sensitivity distances compare each branch's global feature of the
    current source against rotated-only / translated-only clones built from
    that iteration's own prediction.
    """
    dtype = next(model.parameters()).dtype
    px = torch.as_tensor(np.asarray(source, dtype=np.float64), dtype=dtype).unsqueeze(0)
    py = torch.as_tensor(np.asarray(reference, dtype=np.float64), dtype=dtype).unsqueeze(0)
    records = []
    with torch.no_grad():
        _, _, outputs = model.register(px, py)
        result = model.register_arrays(source, reference, collect_features=True)
        for i, out in enumerate(outputs):
            rotated, translated = build_perturbed_clouds(out.x_input, out.q, out.t)
            enc_rot = model.encode(rotated, py)
            enc_trans = model.encode(translated, py)
            enc = out.encoded
            dists = {
                "r_to_translated": float((enc.fr_x - enc_trans.fr_x).norm()),
                "r_to_rotated": float((enc.fr_x - enc_rot.fr_x).norm()),
                "t_to_translated": float((enc.ft_x - enc_trans.ft_x).norm()),
                "t_to_rotated": float((enc.ft_x - enc_rot.ft_x).norm()),
            }
            records.append(
                InspectionRecord(
                    iteration=i + 1,
                    contribution_source=contribution_map(result.bundles_source[i]),
                    contribution_reference=contribution_map(result.bundles_reference[i]),
                    tsl_distances=dists,
                )
            )
    return records


def branch_sensitivity_medians(
    model: RegistrationNet, pairs, iteration: int | None = None
) -> dict[str, float]:
    """Median probe distances per branch, pooled over pairs and, unless a
    single ``iteration`` is selected, over refinement iterations.

    On pairs the model has fit, late iterations predict near-zero residuals,
    so their probe clouds coincide with the anchor and the distances are
    numerical noise; ``iteration=1`` keeps only the probes with meaningful
    magnitude."""
    acc: dict[str, list[float]] = {
        "r_to_translated": [], "r_to_rotated": [], "t_to_rotated": [], "t_to_translated": []
    }
    for pair in pairs:
        for rec in inspect_pair(model, pair.source, pair.reference):
            if iteration is not None and rec.iteration != iteration:
                continue
            for key in acc:
                acc[key].append(rec.tsl_distances[key])
    return {key: statistics.median(vals) for key, vals in acc.items()}


def sensitivity_directions_hold(medians: dict[str, float]) -> bool:
    """Each branch's feature should move less under its own positive probe:
    the rotation branch under translation, the translation branch under
    rotation."""
    return (
        medians["r_to_translated"] < medians["r_to_rotated"]
        and medians["t_to_rotated"] < medians["t_to_translated"]
    )


@dataclass
class OverfitOutcome:
    passed: bool
    steps_run: int
    elapsed_s: float
    report: MetricsReport
    history: list[dict]
    thresholds: tuple[float, float]


def overfit_config(seed: int = 0, steps: int = 5000) -> RunConfig:
    """Small single-core run config used by the overfit harness."""
    cfg = load_config(profile="desk")
    cfg = replace_section(
        cfg, "data",
        mode="ts", crop_manner="rpmnet", keep_fraction=0.7, noise_sigma=0.0,
        train_pairs=8, seed=seed,
    )
    cfg = replace_section(cfg, "train", steps=steps, seed=seed, eval_every=250, checkpoint_every=0)
    return cfg


def overfit_harness(
    cfg: RunConfig | None = None,
    out_dir=None,
    rot_threshold_deg: float = 5.0,
    trans_threshold: float = 0.05,
    require_sensitivity: bool = False,
) -> tuple[RegistrationNet, OverfitOutcome]:
    """Train on a handful of fixed pairs until the model reproduces their
    ground truths; the cheapest end-to-end check that optimization,
    refinement, and supervision all point the same way.

    With ``require_sensitivity`` the run also keeps going until the branch
    sensitivity directions hold (median probe distances per
    ``sensitivity_directions_hold``), so the returned model exhibits every
    property the losses are supposed to train in, budget permitting."""
    cfg = cfg if cfg is not None else overfit_config()
    model = build_model(cfg)
    pairs = load_split(cfg, "train")
    start = time.perf_counter()

    def good_enough(m: RegistrationNet, step: int) -> bool:
        with torch.no_grad():
            rep = evaluate_model(m, pairs, iterations=cfg.eval.iterations)
        if not (rep.error_rot < rot_threshold_deg and rep.error_trans < trans_threshold):
            return False
        if not require_sensitivity:
            return True
        return sensitivity_directions_hold(branch_sensitivity_medians(m, pairs))

    result = train(
        model,
        pairs,
        cfg.train,
        cfg.loss,
        out_dir=out_dir,
        config_hash=config_hash(cfg),
        eval_hook=good_enough,
    )
    with torch.no_grad():
        report = evaluate_model(model, pairs, iterations=cfg.eval.iterations)
    elapsed = time.perf_counter() - start
    outcome = OverfitOutcome(
        passed=report.error_rot < rot_threshold_deg and report.error_trans < trans_threshold,
        steps_run=result.last_step,
        elapsed_s=elapsed,
        report=report,
        history=result.history,
        thresholds=(rot_threshold_deg, trans_threshold),
    )
    return model, outcome


def ablation_pair_run(cfg_on: RunConfig, cfg_off: RunConfig):
    """Train two configs that differ in one switch, same seeds/data.

    Returns the two training histories for comparing the supervised loss
    trajectory with the switch on vs off.
    """
    if config_hash(dataclasses.replace(cfg_on)) == config_hash(cfg_off):
        raise ValueError("the two configs are identical; nothing to compare")
    histories = []
    for cfg in (cfg_on, cfg_off):
        model = build_model(cfg)
        pairs = load_split(cfg, "train")
        result = train(model, pairs, cfg.train, cfg.loss, config_hash=config_hash(cfg))
        histories.append(result.history)
    return histories
