"""Command-line front end: one subcommand per pipeline stage plus a
config-driven end-to-end `run`.

Exit statuses: 0 success, 1 numeric failure (divergence), 2 input/config error.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import blendshape, latent, metrics, synth
from .config import RunConfig, default_config, derive_seed, parse_config
from .diversify import interpolate, optimize_completions
from .dpp import build_kernel, median_masked_distance
from .errors import ConfigError, DivergenceError
from .fitter import FitResult, Observation, fit_partial, load_landmark_file
from .mesh import VertexMask, load_obj, save_obj


def _write_run_lock(out_dir: Path, config: RunConfig) -> None:
    (out_dir / "run.lock").write_text(config.canonical_text(), newline="\n")


def _config_from_args(args) -> RunConfig:
    if getattr(args, "config", None):
        return parse_config(args.config)
    return default_config()


def _require_file(path: str, what: str) -> Path:
    if not path:
        raise ConfigError(f"no {what} path given")
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"missing {what}: {p}")
    return p


def _build_training_data(cfg: RunConfig):
    template = synth.make_template(cfg.get("data", "subdivisions"))
    gen = synth.make_generator(template, cfg.get("data", "shape_fields"),
                               cfg.get("data", "expr_fields"),
                               derive_seed(cfg.get("run", "seed"), 0))
    data = synth.sample_subject_dataset(
        gen, cfg.get("data", "subjects"), cfg.get("data", "expressions_per_subject"),
        cfg.get("data", "shape_sigma"), cfg.get("data", "expr_sigma"),
        derive_seed(cfg.get("run", "seed"), 1), cfg.get("data", "sigma_decay"))
    return template, gen, data


def cmd_synth(args) -> int:
    cfg = _config_from_args(args)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    template = synth.make_template(args.subdivisions)
    gen = synth.make_generator(template, args.shape_fields, args.expr_fields,
                               derive_seed(args.seed, 0))
    samples = synth.sample_dataset(gen, args.count, args.sigma, derive_seed(args.seed, 1))
    with open(out_dir / "manifest.csv", "w", newline="\n") as fh:
        for i, s in enumerate(samples):
            save_obj(s.mesh, out_dir / f"sample_{i:04d}.obj")
            coeffs = ",".join(f"{c:.12g}" for c in np.concatenate([s.shape_coeffs, s.expr_coeffs]))
            fh.write(f"{i},{coeffs}\n")
    save_obj(template, out_dir / "template.obj")
    _write_run_lock(out_dir, cfg)
    print(f"wrote {args.count} samples to {out_dir}")
    return 0


def cmd_train_blendshape(args) -> int:
    cfg = _config_from_args(args)
    template, _, data = _build_training_data(cfg)
    atlas = synth.make_region_atlas(template)
    g = blendshape.train_global(data.samples, data.subject_ids, data.neutrals,
                                cfg.get("data", "shape_fields"),
                                cfg.get("data", "expr_fields"))
    coarse = (cfg.get("model", "coarse_shape"), cfg.get("model", "coarse_expr"))
    local = blendshape.train_local(g, data.samples, atlas, coarse,
                                   (cfg.get("model", "local_shape"),
                                    cfg.get("model", "local_expr")))
    model = blendshape.BlendshapeModel(g, local, coarse)
    blendshape.save_model(model, args.out)
    print(f"wrote blendshape model to {args.out}")
    return 0


def cmd_train_latent(args) -> int:
    cfg = _config_from_args(args)
    _, _, data = _build_training_data(cfg)
    variant = args.variant or cfg.get("model", "latent_variant")
    if variant == "linear":
        model = latent.train_linear(data.samples, cfg.get("model", "latent_dim"))
    elif variant == "mlp":
        model = latent.train_vae(data.samples, cfg.vae_config())
    else:
        raise ConfigError(f"unknown latent variant {variant!r}")
    latent.save_latent_model(model, args.out)
    print(f"wrote {variant} latent model to {args.out}")
    return 0


def _observation_from_args(args, model) -> Observation:
    landmark_vertices = synth.template_landmarks(model.template)
    occlusion = None
    if args.occlusion_mask:
        occlusion = VertexMask.load(_require_file(args.occlusion_mask, "occlusion mask"))
    if args.mode == "dense":
        target = load_obj(_require_file(args.target, "target mesh"))
        if occlusion is None:
            visibility = VertexMask.full(target.n_vertices)
        else:
            visibility = occlusion.complement()
        return Observation.dense(target, visibility, landmark_vertices, occlusion=occlusion)
    points, confs = load_landmark_file(_require_file(args.landmarks, "landmark file"))
    return Observation.sparse(points, confs, landmark_vertices, occlusion=occlusion)


def cmd_fit(args) -> int:
    cfg = _config_from_args(args)
    model = blendshape.load_model(_require_file(args.model, "model file"))
    obs = _observation_from_args(args, model)
    overrides = {}
    if args.iters is not None:
        overrides["n_iter"] = args.iters
    if args.tau is not None:
        overrides["tau"] = args.tau
    if args.eta is not None:
        overrides["eta"] = args.eta
    result = fit_partial(model, obs, replace(cfg.fit_hyper(), **overrides))
    save_obj(result.mesh, args.out)
    print(f"fit loss {result.trace[0]:.6g} -> {result.trace[-1]:.6g}, wrote {args.out}")
    return 0


def cmd_complete(args) -> int:
    cfg = _config_from_args(args)
    lat = latent.load_latent_model(_require_file(args.latent_model, "latent model"))
    fitted = load_obj(_require_file(args.fit, "partial fit mesh"))
    occl = VertexMask.load(_require_file(args.occlusion_mask, "occlusion mask"))
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    # the partial fit arrives as a plain OBJ, so wrap it in a bare FitResult
    fit_result = FitResult(fitted, None, np.zeros(1), np.zeros(68, dtype=bool))
    overrides = {"seed": args.seed}
    if args.num_samples is not None:
        overrides["num_samples"] = args.num_samples
    if args.iters is not None:
        overrides["n_iter"] = args.iters
    if args.lambda_s is not None:
        overrides["lambda_s"] = args.lambda_s
    if args.lambda_dpp is not None:
        overrides["lambda_dpp"] = args.lambda_dpp
    if args.eta is not None:
        overrides["eta"] = args.eta
    result = optimize_completions(lat, fit_result, occl,
                                  replace(cfg.diversify_hyper(), **overrides))
    for i, mesh in enumerate(result.completions):
        save_obj(mesh, out_dir / f"completion_{i:02d}.obj")
    np.savetxt(out_dir / "latents.txt", result.latents, fmt="%.17g")
    with open(out_dir / "trace.csv", "w", newline="\n") as fh:
        fh.write("iteration,total,fidelity,dpp\n")
        for i, (total, fid, dpp_val) in enumerate(result.trace):
            fh.write(f"{i},{total:.12g},{fid:.12g},{dpp_val:.12g}\n")
    if args.dump_kernel:
        k = hyper.k if hyper.k is not None else 1.0 / max(
            median_masked_distance(result.completions, occl), 1e-30)
        kernel = build_kernel(result.completions, result.latents, occl, k)
        np.savetxt(out_dir / "kernel.txt", kernel.L, fmt="%.12g")
    _write_run_lock(out_dir, cfg)
    print(f"wrote {len(result.completions)} completions to {out_dir}")
    return 0


def cmd_interpolate(args) -> int:
    lat = latent.load_latent_model(_require_file(args.latent_model, "latent model"))
    latents = np.loadtxt(_require_file(args.latents, "latents file"), ndmin=2)
    for which in (args.z1_from, args.z2_from):
        if not 0 <= which < len(latents):
            raise ConfigError(f"completion index {which} out of range [0, {len(latents)})")
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    meshes = interpolate(lat, latents[args.z1_from], latents[args.z2_from], args.steps)
    for i, mesh in enumerate(meshes):
        save_obj(mesh, out_dir / f"interp_{i:02d}.obj")
    print(f"wrote {args.steps} interpolated meshes to {out_dir}")
    return 0


def cmd_metrics(args) -> int:
    gt = load_obj(_require_file(args.gt, "ground truth mesh"))
    occl = VertexMask.load(_require_file(args.occlusion_mask, "occlusion mask"))
    comp_dir = Path(args.completions_dir)
    paths = sorted(comp_dir.glob("completion_*.obj"))
    if not paths:
        raise ConfigError(f"no completion_*.obj files under {comp_dir}")
    completions = [load_obj(p) for p in paths]
    print(f"CSE {metrics.cse(completions, gt):.9g}")
    if len(completions) >= 2:
        print(f"ASD_V {metrics.asd(completions, occl.complement()):.9g}")
        print(f"ASD_O {metrics.asd(completions, occl):.9g}")
    return 0


def cmd_benchmark(args) -> int:
    cfg = _config_from_args(args)
    bench = cfg.benchmark_config()
    if args.instances:
        bench = replace(bench, instances=args.instances)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    assets = metrics.prepare_benchmark(bench)
    report = metrics.run_benchmark(bench, assets=assets)
    (out_dir / "report.csv").write_text(report.to_csv(), newline="\n")
    write_meshes = args.write_meshes or cfg.get("benchmark", "write_meshes")
    if write_meshes:
        for idx, gt in enumerate(assets.test_meshes):
            for fraction in bench.fractions:
                inst_seed = metrics._stage_seed(
                    bench.seed, 1000 + idx * 101 + int(round(fraction * 100)))
                arts = metrics.run_instance(assets, gt, fraction, inst_seed, bench)
                inst_dir = out_dir / f"instance_{idx:03d}_f{int(round(fraction * 100)):02d}"
                inst_dir.mkdir(parents=True, exist_ok=True)
                save_obj(gt, inst_dir / "ground_truth.obj")
                save_obj(arts["fit_global"].mesh, inst_dir / "fit_global.obj")
                save_obj(arts["fit_global_local"].mesh, inst_dir / "fit_global_local.obj")
                arts["occlusion"].save(inst_dir / "occlusion.mask")
                for name in ("sampled", "diversified"):
                    for i, mesh in enumerate(arts[name].completions):
                        save_obj(mesh, inst_dir / f"{name}_{i:02d}.obj")
    _write_run_lock(out_dir, cfg)
    print(f"wrote benchmark report to {out_dir / 'report.csv'}")
    return 0


def run_pipeline(cfg: RunConfig) -> int:
    """Fit the visible region, encode it, and optimize diverse completions."""
    model = blendshape.load_model(_require_file(cfg.get("paths", "model"), "model file"))
    lat = latent.load_latent_model(_require_file(cfg.get("paths", "latent_model"),
                                                 "latent model"))
    out_dir = Path(cfg.get("run", "out_dir"))
    out_dir.mkdir(parents=True, exist_ok=True)
    landmark_vertices = synth.template_landmarks(model.template)
    occl = VertexMask.load(_require_file(cfg.get("paths", "occlusion_mask"), "occlusion mask"))
    if cfg.get("fit", "mode") == "dense":
        target = load_obj(_require_file(cfg.get("paths", "target"), "target mesh"))
        obs = Observation.dense(target, occl.complement(), landmark_vertices, occlusion=occl)
    else:
        points, confs = load_landmark_file(_require_file(cfg.get("paths", "landmarks"),
                                                         "landmark file"))
        obs = Observation.sparse(points, confs, landmark_vertices, occlusion=occl)
    fit_result = fit_partial(model, obs, cfg.fit_hyper())
    save_obj(fit_result.mesh, out_dir / "partial_fit.obj")
    hyper = cfg.diversify_hyper(seed=derive_seed(cfg.get("run", "seed"), 3))
    result = optimize_completions(lat, fit_result, occl, hyper)
    for i, mesh in enumerate(result.completions):
        save_obj(mesh, out_dir / f"completion_{i:02d}.obj")
    np.savetxt(out_dir / "latents.txt", result.latents, fmt="%.17g")
    with open(out_dir / "trace.csv", "w", newline="\n") as fh:
        fh.write("iteration,total,fidelity,dpp\n")
        for i, (total, fid, dpp_val) in enumerate(result.trace):
            fh.write(f"{i},{total:.12g},{fid:.12g},{dpp_val:.12g}\n")
    _write_run_lock(out_dir, cfg)
    print(f"pipeline wrote {len(result.completions)} completions to {out_dir}")
    return 0


def cmd_run(args) -> int:
    return run_pipeline(parse_config(args.config))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="diverseshape",
                                     description="Diverse mesh completions from partial shapes")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="emit a synthetic OBJ dataset with a coefficient manifest")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--count", type=int, default=20)
    p.add_argument("--subdivisions", type=int, default=3)
    p.add_argument("--shape-fields", type=int, default=8)
    p.add_argument("--expr-fields", type=int, default=8)
    p.add_argument("--sigma", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train-blendshape", help="train the global+local model on synthetic data")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.set_defaults(func=cmd_train_blendshape)

    p = sub.add_parser("train-latent", help="train the latent completion model")
    p.add_argument("--out", required=True)
    p.add_argument("--variant", choices=("linear", "mlp"))
    p.add_argument("--config")
    p.set_defaults(func=cmd_train_latent)

    p = sub.add_parser("fit", help="fit the model to the visible part of an observation")
    p.add_argument("--model", required=True)
    p.add_argument("--target")
    p.add_argument("--occlusion-mask")
    p.add_argument("--landmarks")
    p.add_argument("--mode", choices=("dense", "sparse"), default="dense")
    p.add_argument("--out", required=True)
    p.add_argument("--iters", type=int)
    p.add_argument("--tau", type=float)
    p.add_argument("--eta", type=float)
    p.add_argument("--config")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("complete", help="optimize diverse completions of a partial fit")
    p.add_argument("--model")
    p.add_argument("--latent-model", required=True)
    p.add_argument("--fit", required=True)
    p.add_argument("--occlusion-mask", required=True)
    p.add_argument("--num-samples", type=int)
    p.add_argument("--iters", type=int)
    p.add_argument("--lambda-s", type=float)
    p.add_argument("--lambda-dpp", type=float)
    p.add_argument("--eta", type=float)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--dump-kernel", action="store_true")
    p.add_argument("--config")
    p.set_defaults(func=cmd_complete)

    p = sub.add_parser("interpolate", help="decode between two completion latents")
    p.add_argument("--latent-model", required=True)
    p.add_argument("--latents", required=True, help="latents.txt from a complete run")
    p.add_argument("--z1-from", type=int, required=True)
    p.add_argument("--z2-from", type=int, required=True)
    p.add_argument("--steps", type=int, default=5)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_interpolate)

    p = sub.add_parser("metrics", help="score a completion set against ground truth")
    p.add_argument("--gt", required=True)
    p.add_argument("--completions-dir", required=True)
    p.add_argument("--occlusion-mask", required=True)
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("benchmark", help="run the full synthetic comparison grid")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--instances", type=int)
    p.add_argument("--write-meshes", action="store_true")
    p.add_argument("--config")
    p.set_defaults(func=cmd_benchmark)

    p = sub.add_parser("run", help="config-driven end-to-end pipeline (fit + complete)")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_run)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except DivergenceError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 1
    except (ConfigError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
