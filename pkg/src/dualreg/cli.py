"""Command-line entry points.

Subcommands: generate, train, eval, register, inspect, plot. Every command
resolves its config from (profile, config file, --set overrides), writes
the materialized config next to its outputs, and exits nonzero on error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import pipeline, plyio, plotting
from .config import ConfigError, dump_config, load_config, replace_section
from .data import pairs_from_manifest, read_manifest
from .icp import icp
from .metrics import report_text


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, default=None, help="YAML run config")
    p.add_argument("--profile", choices=("paper", "desk", "test"), default=None, help="named preset applied before the config file")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE", help="override a single config value (repeatable)")
    p.add_argument("--seed", type=int, default=None, help="override data and train seeds together")


def _resolve_config(args):
    cfg = load_config(args.config, profile=args.profile, overrides=args.set)
    if args.seed is not None:
        cfg = replace_section(cfg, "data", seed=args.seed)
        cfg = replace_section(cfg, "train", seed=args.seed)
    return cfg


def _transform_payload(transform) -> dict:
    return {
        "quaternion_wxyz": list(transform.rotation.as_array()),
        "translation": list(transform.translation),
        "matrix4": transform.as_matrix4().tolist(),
    }


def cmd_generate(args) -> int:
    cfg = _resolve_config(args)
    paths = pipeline.generate_dataset(cfg, args.out, write_ply=not args.no_ply)
    for split, path in paths.items():
        print(f"{split}: {path}")
    return 0


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    model, result = pipeline.run_training(cfg, args.out, resume=args.resume)
    last = result.history[-1] if result.history else {}
    print(f"trained {result.last_step} steps; final loss {last.get('loss', float('nan')):.6f}")
    print(f"checkpoint: {result.checkpoint_path}")
    return 0


def cmd_eval(args) -> int:
    cfg = _resolve_config(args)
    if args.method is not None:
        cfg = replace_section(cfg, "eval", method=args.method)
    if cfg.eval.method == "learned" and args.checkpoint is None:
        raise ConfigError("--checkpoint is required for the learned method")
    report = pipeline.run_evaluation(cfg, out_dir=args.out, checkpoint=args.checkpoint)
    print(report_text(report))
    row = "  ".join(f"{v:.4f}" for v in report.table_row())
    print(f"RMSE(R) MAE(R) RMSE(t) MAE(t) Error(R) Error(t): {row}")
    return 0


def cmd_register(args) -> int:
    cfg = _resolve_config(args)
    if args.method is not None:
        cfg = replace_section(cfg, "eval", method=args.method)
    source = plyio.read_ply(args.source)
    reference = plyio.read_ply(args.reference)
    if cfg.eval.method == "icp":
        result = icp(source, reference)
        final = result.transform
        print(f"icp: {result.iterations} iterations, residual {result.residual:.3e}, converged={result.converged}")
    else:
        if args.checkpoint is None:
            raise ConfigError("--checkpoint is required for the learned method")
        model = pipeline.load_model(cfg, args.checkpoint)
        reg = pipeline.register_pair(model, source, reference)
        final = reg.final
        for i, step in enumerate(reg.per_iteration, start=1):
            q = ", ".join(f"{v:+.5f}" for v in step.rotation.as_array())
            t = ", ".join(f"{v:+.5f}" for v in step.translation)
            print(f"iteration {i}: q=[{q}] t=[{t}]")
    q = ", ".join(f"{v:+.6f}" for v in final.rotation.as_array())
    t = ", ".join(f"{v:+.6f}" for v in final.translation)
    print(f"final: q=[{q}] t=[{t}]")
    if args.out is not None:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        dump_config(cfg, out / "config.yaml")
        plyio.write_ply(out / "aligned_source.ply", final.apply(source))
        (out / "transform.json").write_text(json.dumps(_transform_payload(final), indent=2) + "\n", encoding="utf-8")
        print(f"wrote {out / 'aligned_source.ply'}")
    return 0


def cmd_inspect(args) -> int:
    cfg = _resolve_config(args)
    manifest = read_manifest(args.manifest)
    pairs = pairs_from_manifest(manifest)
    if not 0 <= args.index < len(pairs):
        raise ValueError(f"pair index {args.index} out of range [0, {len(pairs)})")
    pair = pairs[args.index]
    model = pipeline.load_model(cfg, args.checkpoint)
    records = pipeline.inspect_pair(model, pair.source, pair.reference)
    payload = []
    for rec in records:
        d = rec.tsl_distances
        ratio_r = d["r_to_translated"] / max(d["r_to_rotated"], 1e-12)
        ratio_t = d["t_to_rotated"] / max(d["t_to_translated"], 1e-12)
        print(f"iteration {rec.iteration}:")
        print(f"  rotation branch : |F - F_translated| = {d['r_to_translated']:.5f}, |F - F_rotated| = {d['r_to_rotated']:.5f} (ratio {ratio_r:.3f}, sensitive when < 1)")
        print(f"  translation br. : |F - F_rotated| = {d['t_to_rotated']:.5f}, |F - F_translated| = {d['t_to_translated']:.5f} (ratio {ratio_t:.3f}, sensitive when < 1)")
        for side, cmap in (("source", rec.contribution_source), ("reference", rec.contribution_reference)):
            top_r = cmap["r"].argsort()[::-1][:5]
            top_t = cmap["t"].argsort()[::-1][:5]
            print(f"  {side}: top r-branch contributors {top_r.tolist()}, top t-branch contributors {top_t.tolist()}")
        payload.append(
            {
                "iteration": rec.iteration,
                "tsl_distances": d,
                "contribution_source": {k: v.tolist() for k, v in rec.contribution_source.items()},
                "contribution_reference": {k: v.tolist() for k, v in rec.contribution_reference.items()},
            }
        )
    if args.out is not None:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "inspection.json").write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
        for rec in records:
            plotting.plot_contribution_hist(
                rec.contribution_source["r"], out / f"contrib_src_r_iter{rec.iteration}.png",
                title=f"source r-branch, iteration {rec.iteration}",
            )
        print(f"wrote {out / 'inspection.json'}")
    return 0


def cmd_plot(args) -> int:
    if args.kind == "training":
        path = plotting.plot_training_curves(args.log, args.out)
    elif args.kind == "curve":
        reports = []
        for p in args.report:
            reports.append(json.loads(Path(p).read_text(encoding="utf-8")))
        if args.x is None or len(args.x) != len(reports):
            raise ValueError("--x must supply one value per report")
        path = plotting.plot_error_vs_condition(args.x, reports, args.out, metric=args.metric, x_label=args.x_label)
    else:  # saliency
        cfg = _resolve_config(args)
        manifest = read_manifest(args.manifest)
        pairs = pairs_from_manifest(manifest)
        pair = pairs[args.index]
        model = pipeline.load_model(cfg, args.checkpoint)
        result = pipeline.register_pair(model, pair.source, pair.reference)
        path = plotting.plot_saliency_overlay(pair.source, pair.reference, result, args.out)
    print(f"wrote {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dualreg", description="dual-branch point cloud registration")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="generate a dataset (manifests + PLY pairs)")
    _add_config_flags(p)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--no-ply", action="store_true", help="write manifests only")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train the registration network")
    _add_config_flags(p)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--resume", type=Path, default=None, help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a method on the configured split")
    _add_config_flags(p)
    p.add_argument("--method", choices=("learned", "icp"), default=None)
    p.add_argument("--checkpoint", type=Path, default=None)
    p.add_argument("--out", type=Path, default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("register", help="align one source PLY onto a reference PLY")
    _add_config_flags(p)
    p.add_argument("--method", choices=("learned", "icp"), default=None)
    p.add_argument("--checkpoint", type=Path, default=None)
    p.add_argument("--source", type=Path, required=True)
    p.add_argument("--reference", type=Path, required=True)
    p.add_argument("--out", type=Path, default=None)
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("inspect", help="per-iteration feature diagnostics for one pair")
    _add_config_flags(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--out", type=Path, default=None)
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("plot", help="emit figures from logs, reports, or a checkpoint")
    plot_sub = p.add_subparsers(dest="kind", required=True)

    pt = plot_sub.add_parser("training", help="loss curves from a JSONL log")
    pt.add_argument("--log", type=Path, required=True)
    pt.add_argument("--out", type=Path, required=True)
    pt.set_defaults(func=cmd_plot)

    pc = plot_sub.add_parser("curve", help="aggregate metric vs a swept condition")
    pc.add_argument("--report", type=Path, nargs="+", required=True)
    pc.add_argument("--x", type=float, nargs="+", default=None)
    pc.add_argument("--x-label", default="condition")
    pc.add_argument("--metric", default="error_rot_deg")
    pc.add_argument("--out", type=Path, required=True)
    pc.set_defaults(func=cmd_plot)

    ps = plot_sub.add_parser("saliency", help="cloud overlay with per-iteration saliency points")
    _add_config_flags(ps)
    ps.add_argument("--checkpoint", type=Path, required=True)
    ps.add_argument("--manifest", type=Path, required=True)
    ps.add_argument("--index", type=int, default=0)
    ps.add_argument("--out", type=Path, required=True)
    ps.set_defaults(func=cmd_plot)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except KeyboardInterrupt:
        return 130
    except Exception as exc:  # CLI boundary: report, don't traceback
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
