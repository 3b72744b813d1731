"""Command-line entry points.

Exit codes: 0 success, 2 bad configuration or arguments, 3 I/O failure,
4 non-finite training loss, 5 solver failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, echo_config, load_config
from .dataio import PfmParseError, read_image, rng_stream, save_pfm
from .diffusion import ancestral_sample, make_schedule
from .metrics import MetricReport, mse, psnr, sample_variance, seam_gap, ssim
from .optim import Adam
from .priors import (
    CheckpointError,
    CnnDenoiser,
    GaussianAnalyticModel,
    NonFiniteLoss,
    TrainTrace,
    load_checkpoint,
    save_checkpoint,
    train_prior,
)
from .render import MaterialMaps, render
from .scenes import BUNDLED, bundled_path, load_scene
from .sky import gen_corpus, load_corpus
from .solver import SolverError, baseline_solve, dps_sample, init_stage, write_trace
from .tonemap import Tonemap
from .experiments import report_for

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_TRAIN_NAN, EXIT_SOLVER = 0, 2, 3, 4, 5


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _out_dir(path) -> Path:
    p = Path(path)
    try:
        p.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(f"cannot create output directory {p}: {exc}", EXIT_IO) from None
    return p


# -- gen-data -----------------------------------------------------------------

def cmd_gen_data(args, cfg: RunConfig) -> int:
    out = _out_dir(args.out)
    d = cfg.data
    manifest = gen_corpus(cfg.seed, d.count, d.height, d.width, cfg.tonemap.build(), out)
    echo_config(cfg, out)
    print(f"wrote {len(manifest['maps'])} maps to {out} (median {manifest['corpus_median']:.4g})")
    return EXIT_OK


# -- train-prior --------------------------------------------------------------

def _state_path(model_path: Path) -> Path:
    return model_path.with_suffix(model_path.suffix + ".state.npz")


def _loss_csv(model_path: Path) -> Path:
    return model_path.with_name(model_path.stem + "_loss.csv")


def _save_state(path: Path, opt: Adam, step: int, epochs: int) -> None:
    arrays = {"__t": np.array(opt.t), "__step": np.array(step), "__epochs": np.array(epochs)}
    for k in opt.m:
        arrays[f"m/{k}"] = opt.m[k]
        arrays[f"v/{k}"] = opt.v[k]
    np.savez(path, **arrays)


def _load_state(path: Path, opt: Adam) -> tuple[int, int]:
    with np.load(path) as z:
        opt.t = int(z["__t"])
        for key in z.files:
            if key.startswith("m/"):
                opt.m[key[2:]] = np.array(z[key])
            elif key.startswith("v/"):
                opt.v[key[2:]] = np.array(z[key])
        return int(z["__step"]), int(z["__epochs"])


def cmd_train_prior(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    _out_dir(out.parent if str(out.parent) else ".")
    maps, manifest = load_corpus(args.data)
    tm = Tonemap(manifest["tonemap"]["scale"], manifest["tonemap"]["exponent"])
    data = [tm.forward(m) for m in maps]
    sc = cfg.schedule
    s = make_schedule(sc.T, sc.beta_start, sc.beta_end)
    t = cfg.train
    opt = Adam(t.learning_rate)
    start_step, done_epochs = 0, 0
    trace = TrainTrace()
    if args.resume:
        model = load_checkpoint(args.resume)
        state = _state_path(Path(args.resume))
        if state.exists():
            start_step, done_epochs = _load_state(state, opt)
        trace.epoch_loss = [float("nan")] * done_epochs
    else:
        model = CnnDenoiser(data[0].shape, sc.T, channels=t.channels, blocks=t.blocks,
                            horizontal=t.horizontal, seed=cfg.seed, head=t.head,
                            beta_start=sc.beta_start, beta_end=sc.beta_end)
    try:
        train_prior(model, data, s, cfg.train_config(), optimizer=opt, start_step=start_step, trace=trace)
    except NonFiniteLoss as exc:
        print(f"error: non-finite training loss at step {exc.step}", file=sys.stderr)
        return EXIT_TRAIN_NAN
    save_checkpoint(out, model)
    last_step = trace.steps[-1][1] + 1 if trace.steps else start_step
    _save_state(_state_path(out), opt, last_step, len(trace.epoch_loss))
    csv_path = _loss_csv(out)
    rows = []
    if args.resume and _loss_csv(Path(args.resume)).exists():
        with open(_loss_csv(Path(args.resume))) as fh:
            rows = list(csv.reader(fh))[1:]
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "step", "loss"])
        w.writerows(rows)
        for epoch, step, loss in trace.steps:
            w.writerow([epoch, step, repr(loss)])
    echo_config(cfg, out.parent)
    print(f"trained {len(trace.steps)} steps; final epoch loss {trace.epoch_loss[-1]:.4g}; wrote {out}")
    return EXIT_OK


# -- invert -------------------------------------------------------------------

def _apply_masks(bundle, specs: list[str]) -> None:
    for spec in specs or []:
        try:
            idx, path = spec.split("=", 1)
            idx = int(idx)
        except ValueError:
            raise CliError(f"--mask expects VIEW=PATH, got {spec!r}", EXIT_CONFIG) from None
        view = bundle.scene.view(idx)
        m = read_image(path)[..., 0]
        if m.shape != (view.height, view.width):
            raise CliError(f"mask {path} does not match view {idx} size", EXIT_CONFIG)
        view.mask = m > 0.5


def _scene(path):
    # a bare bundled-scene name works as well as a directory
    if not Path(path).exists() and path in BUNDLED:
        path = bundled_path(path)
    return load_scene(path)


def cmd_invert(args, cfg: RunConfig) -> int:
    out = _out_dir(args.out)
    scene_path = args.scene or cfg.scene
    if scene_path is None:
        raise CliError("invert needs --scene (or 'scene' in the config)", EXIT_CONFIG)
    bundle = _scene(scene_path)
    _apply_masks(bundle, args.mask)
    scfg = cfg.solver_config(render=bundle.render, env_shape=bundle.env_shape,
                             material_res=bundle.material_res)
    views = bundle.train_views
    echo_config(cfg, out)
    results = []
    if scfg.prior == "diffusion":
        if not args.model:
            raise CliError("diffusion prior needs --model", EXIT_CONFIG)
        model = load_checkpoint(args.model)
        try:
            init = init_stage(bundle.scene, scfg, views)
        except SolverError as exc:
            print(f"error: init stage failed: {exc}", file=sys.stderr)
            return EXIT_SOLVER
        write_trace(out / "init_trace.csv", init.trace)
        for k in range(args.samples):
            try:
                res = dps_sample(bundle.scene, model, replace(scfg, seed=scfg.seed + k), init.mat, views)
            except SolverError as exc:
                print(f"error: sample {k} failed at step {exc.step}: {exc}", file=sys.stderr)
                return EXIT_SOLVER
            res.save(out / f"sample_{k:02d}")
            results.append(res)
    else:
        for k in range(args.samples):
            try:
                res = baseline_solve(bundle.scene, scfg, views)
            except SolverError as exc:
                print(f"error: sample {k} failed at step {exc.step}: {exc}", file=sys.stderr)
                return EXIT_SOLVER
            res.save(out / f"sample_{k:02d}")
            results.append(res)
    rep = report_for(bundle, results)
    rep.to_json(out / "report.json")
    rep.to_csv(out / "report.csv")
    print(json.dumps(rep.values, sort_keys=True))
    return EXIT_OK


# -- sample-prior -------------------------------------------------------------

def cmd_sample_prior(args, cfg: RunConfig) -> int:
    out = _out_dir(args.out)
    scfg = cfg.solver_config()
    s = scfg.schedule()
    tm = scfg.tonemap
    if args.gaussian:
        shape = (cfg.data.height, cfg.data.width, 3)
        if args.mu is not None and Path(args.mu).exists():
            mu = read_image(args.mu)
        else:
            mu = np.full(shape, float(args.mu) if args.mu is not None else 0.5)
        model = GaussianAnalyticModel(mu, args.var, s)
    else:
        if not args.model:
            raise CliError("sample-prior needs --model or --gaussian", EXIT_CONFIG)
        model = load_checkpoint(args.model)
        if model.T != scfg.T:
            raise CliError(f"model has T={model.T}, config schedule has T={scfg.T}", EXIT_CONFIG)
    envs = []
    for k in range(args.samples):
        rng = rng_stream(scfg.seed + k, "dps")
        latent = ancestral_sample(model, s, tuple(model.shape), rng,
                                  sigma_mode=scfg.sigma_mode, rotate=scfg.rotate)
        envs.append(tm.inverse(latent))
        save_pfm(out / f"latent_{k:02d}.pfm", latent)
        save_pfm(out / f"env_{k:02d}.pfm", envs[-1])
    rep = MetricReport()
    rep["seam"] = float(np.median([seam_gap(e) for e in envs]))
    if len(envs) >= 2:
        rep["sigma2_sample"] = sample_variance(envs)
    rep.to_json(out / "report.json")
    rep.to_csv(out / "report.csv")
    echo_config(cfg, out)
    print(json.dumps(rep.values, sort_keys=True))
    return EXIT_OK


# -- render -------------------------------------------------------------------

def cmd_render(args, cfg: RunConfig) -> int:
    out = _out_dir(args.out)
    scene_path = args.scene or cfg.scene
    if scene_path is None:
        raise CliError("render needs --scene", EXIT_CONFIG)
    bundle = _scene(scene_path)
    opts = cfg.render_options(bundle.render)
    env = read_image(args.env) if args.env else bundle.gt_env
    if env is None:
        raise CliError("no env given and the scene has no ground truth", EXIT_CONFIG)
    if args.albedo:
        mat = MaterialMaps(read_image(args.albedo), read_image(args.roughness)[..., 0],
                           read_image(args.metallic)[..., 0])
    elif bundle.gt_mat is not None:
        mat = bundle.gt_mat
    else:
        raise CliError("no materials given and the scene has no ground truth", EXIT_CONFIG)
    views = [args.view] if args.view is not None else range(len(bundle.scene.views))
    for i in views:
        try:
            img = render(bundle.scene, env, mat, i, opts)
        except IndexError as exc:
            raise CliError(str(exc), EXIT_CONFIG) from None
        save_pfm(out / f"view_{i:02d}.pfm", img)
    print(f"rendered {len(list(views))} view(s) to {out}")
    return EXIT_OK


# -- eval ---------------------------------------------------------------------

def cmd_eval(args, cfg: RunConfig) -> int:
    ref = read_image(args.reference)
    imgs = [read_image(p) for p in args.images]
    peak = args.peak if args.peak is not None else float(max(ref.max(), 1e-12))
    rep = MetricReport()
    try:
        rep["mse"] = float(np.mean([mse(i, ref) for i in imgs]))
        rep["psnr"] = float(np.mean([psnr(i, ref, peak) for i in imgs]))
        if min(ref.shape[:2]) >= 11:
            rep["ssim"] = float(np.mean([ssim(i, ref, peak) for i in imgs]))
    except ValueError as exc:
        raise CliError(str(exc), EXIT_CONFIG) from None
    rep["seam"] = float(np.median([seam_gap(i) for i in imgs]))
    if len(imgs) >= 2:
        rep["sigma2_sample"] = sample_variance(imgs)
    if args.out:
        out = _out_dir(args.out)
        rep.to_json(out / "report.json")
        rep.to_csv(out / "report.csv")
    print(json.dumps({k: ("identical" if v == float("inf") else v) for k, v in rep.values.items()},
                     sort_keys=True))
    return EXIT_OK


# -- entry --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dpillum", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="run configuration JSON")
        sp.set_defaults(func=fn)
        return sp

    sp = add("gen-data", cmd_gen_data, "generate the procedural sky corpus")
    sp.add_argument("--out", required=True)

    sp = add("train-prior", cmd_train_prior, "train the denoiser prior")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--resume", help="checkpoint to continue from")

    sp = add("invert", cmd_invert, "reconstruct illumination and materials")
    sp.add_argument("--scene")
    sp.add_argument("--model")
    sp.add_argument("--samples", type=int, default=1)
    sp.add_argument("--out", required=True)
    sp.add_argument("--mask", action="append", metavar="VIEW=PATH",
                    help="pixel mask PFM for a view; zero pixels are excluded")

    sp = add("sample-prior", cmd_sample_prior, "unconditional samples")
    sp.add_argument("--model")
    sp.add_argument("--gaussian", action="store_true", help="use the analytic Gaussian model")
    sp.add_argument("--mu", help="Gaussian mean: PFM path or constant")
    sp.add_argument("--var", type=float, default=0.01)
    sp.add_argument("--samples", type=int, default=4)
    sp.add_argument("--out", required=True)

    sp = add("render", cmd_render, "render scene views")
    sp.add_argument("--scene")
    sp.add_argument("--env")
    sp.add_argument("--albedo")
    sp.add_argument("--roughness")
    sp.add_argument("--metallic")
    sp.add_argument("--view", type=int)
    sp.add_argument("--out", required=True)

    sp = add("eval", cmd_eval, "compare images against a reference")
    sp.add_argument("--reference", required=True)
    sp.add_argument("--images", nargs="+", required=True)
    sp.add_argument("--peak", type=float)
    sp.add_argument("--out")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args, cfg)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, PfmParseError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except SolverError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
