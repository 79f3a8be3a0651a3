"""Command-line front end.

Every subcommand reads one run-config file (``--config``) plus optional
``--set section.key=value`` overrides, takes an exclusive lock on the output
directory, writes a manifest and its artifacts there, and prints a one-line
summary.  Exit codes: 0 success, 2 config validation failure, 1 runtime
failure (with a traceback file under the output directory when possible).
"""

from __future__ import annotations

import argparse
import sys
import traceback
from importlib import resources
from pathlib import Path

import numpy as np

from . import baselines, estimators, persist, satgadget
from .flows import ComposedSampler, make_flow
from .measurement import (Downsample2xOp, GaussianOp, GrayscaleOp, MaskOp,
                          Observation, load_mask_file, make_observation)
from .objective import SmoothingSpec
from .persist import ConfigError, RunConfig
from .training import (TrainConfig, observation_context, stream_rng,
                       train_amortized, train_base_mle, train_svi)

SIGMA_SWEEP_DEFAULT = "1,0.1,0.01,1e-3,1e-4"


# ---------------------------------------------------------------------------
# config -> objects
# ---------------------------------------------------------------------------

def _dataset(cfg: RunConfig) -> persist.Dataset:
    kind = cfg.get("data", "kind", "gaussian-mixture")
    n = cfg.getint("data", "n", 4000)
    seed = cfg.getint("data", "seed", cfg.seed)
    if kind in ("two-moons", "gaussian-mixture", "checkerboard"):
        return persist.synth_dataset(kind, n, seed)
    if kind == "blobs":
        return persist.make_blob_images(n, cfg.getint("data", "height", 8),
                                        cfg.getint("data", "width", 8), seed)
    if kind == "image-grid":
        return persist.load_image_dataset(cfg.get("data", "path"))
    raise ConfigError("data.kind", f"unknown dataset kind {kind!r}")


def _arch(cfg: RunConfig) -> dict:
    return {
        "num_layers": cfg.getint("model", "num_layers", 6),
        "hidden_width": cfg.getint("model", "hidden_width", 64),
        "hidden_layers": cfg.getint("model", "hidden_layers", 2),
        "kind": cfg.get("model", "kind", "affine"),
    }


def _train_config(cfg: RunConfig, **overrides) -> TrainConfig:
    clip = cfg.get("train", "gradient_clip_norm", "100")
    fields = {
        "learning_rate": cfg.getfloat("train", "learning_rate", 1e-3),
        "num_steps": cfg.getint("train", "num_steps", 1000),
        "batch_size": cfg.getint("train", "batch_size", 64),
        "sigma": cfg.getfloat("train", "sigma", 0.1),
        "seed": cfg.seed,
        "gradient_clip_norm": None if clip.lower() in ("", "none")
        else float(clip),
        "checkpoint_every": cfg.getint("train", "checkpoint_every", 0),
    }
    fields.update(overrides)
    return TrainConfig(**fields)


def _measurement(cfg: RunConfig, dim: int, image_shape=None):
    kind = cfg.get("measure", "kind")
    if kind == "mask":
        if cfg.has("measure", "mask_path"):
            idx = load_mask_file(cfg.get("measure", "mask_path"))
        else:
            idx = np.asarray(cfg.getints("measure", "indices"), dtype=np.intp)
        return MaskOp(idx, dim)
    if kind == "gaussian":
        return GaussianOp(cfg.getint("measure", "gauss_seed", 1),
                          cfg.getint("measure", "m"), dim)
    if kind in ("downsample2x", "grayscale"):
        if image_shape is None:
            raise ConfigError("measure.kind", f"{kind} needs image data")
        h, w, c = image_shape
        if kind == "downsample2x":
            return Downsample2xOp(h, w, c)
        return GrayscaleOp(h, w, c)
    raise ConfigError("measure.kind", f"unknown measurement kind {kind!r}")


def _ground_truth(cfg: RunConfig, dataset: persist.Dataset | None) -> np.ndarray:
    index = cfg.getint("observe", "index", 0)
    kind = cfg.get("data", "kind", "gaussian-mixture")
    obs_seed = cfg.getint("observe", "seed", cfg.seed + 1000)
    if kind in ("two-moons", "gaussian-mixture", "checkerboard"):
        return persist.synth_dataset(kind, index + 1, obs_seed).samples[index]
    if kind == "blobs":
        ds = persist.make_blob_images(index + 1, cfg.getint("data", "height", 8),
                                      cfg.getint("data", "width", 8), obs_seed)
        return ds.samples[index]
    if dataset is None:
        raise ConfigError("observe.index", "no dataset to draw ground truth from")
    if not 0 <= index < len(dataset.samples):
        raise ConfigError("observe.index", "out of dataset range")
    return dataset.samples[index]


def _observation(cfg: RunConfig, op, dataset=None) -> Observation:
    source = cfg.get("observe", "source", "synthetic")
    if source == "file":
        y = persist.load_array(cfg.get("observe", "y_path"))[0]
        gt = None
        if cfg.has("observe", "gt_path"):
            gt = persist.load_array(cfg.get("observe", "gt_path"))[0]
        return Observation(y_star=y, op=op, ground_truth=gt,
                           noise_sigma=cfg.getfloat("observe", "noise_sigma", 0.0))
    if source != "synthetic":
        raise ConfigError("observe.source", f"unknown source {source!r}")
    gt = _ground_truth(cfg, dataset)
    noise = cfg.getfloat("observe", "noise_sigma", 0.0)
    return make_observation(op, gt, noise,
                            stream_rng(cfg.seed, "obs-noise"))


def _load_base(cfg: RunConfig):
    return persist.load_checkpoint(cfg.get("model", "base_checkpoint"), "base")


def _save_observation(out: Path, obs: Observation) -> None:
    persist.save_array(out / "y_star.flwa", obs.y_star[None, :])
    if obs.ground_truth is not None:
        persist.save_array(out / "ground_truth.flwa", obs.ground_truth[None, :])


def _mean_residual(samples: np.ndarray, obs: Observation) -> float:
    r = obs.op.apply(samples) - obs.y_star[None, :]
    return float(np.mean(np.sum(r * r, axis=1)))


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_train_base(cfg: RunConfig, out: Path) -> str:
    ds = _dataset(cfg)
    flow = make_flow(ds.dim, rng=stream_rng(cfg.seed, "base-init"), **_arch(cfg))
    flow, trace = train_base_mle(flow, ds, _train_config(cfg))
    persist.save_checkpoint(flow, out / "base.ckpt", "base")
    (out / "trace.csv").write_text(trace.to_csv(), encoding="ascii")
    final = trace.rows[-1][3] if trace.rows else float("nan")
    return (f"train-base: {len(trace)} steps on {ds.kind} (d={ds.dim}), "
            f"final nll/dim={final:.4f} -> {out / 'base.ckpt'}")


def cmd_infer(cfg: RunConfig, out: Path) -> str:
    base = _load_base(cfg)
    ds = _dataset(cfg) if cfg.get("data", "kind", "") == "image-grid" else None
    image_shape = ds.image_shape if ds else (
        (cfg.getint("data", "height", 8), cfg.getint("data", "width", 8), 1)
        if cfg.get("data", "kind", "") == "blobs" else None)
    op = _measurement(cfg, base.dim, image_shape)
    obs = _observation(cfg, op, ds)
    pre, trace = train_svi(base, obs, _train_config(cfg))
    persist.save_checkpoint(pre, out / "pregen.ckpt", "pregen")
    (out / "trace.csv").write_text(trace.to_csv(), encoding="ascii")
    n = cfg.getint("sample", "n", 1000)
    samples = ComposedSampler(pre, base).sample(n, stream_rng(cfg.seed, "sample"))
    persist.save_array(out / "samples.flwa", samples)
    _save_observation(out, obs)
    final = trace.rows[-1] if trace.rows else (0, 0.0, 0.0, float("nan"), 0.0)
    return (f"infer: {len(trace)} steps, final total={final[3]:.4f} "
            f"(kl={final[1]:.4f}, penalty={final[2]:.4f}), "
            f"{n} samples -> {out / 'samples.flwa'}")


def cmd_lmc(cfg: RunConfig, out: Path) -> str:
    base = _load_base(cfg)
    op = _measurement(cfg, base.dim)
    obs = _observation(cfg, op)
    sigma = cfg.getfloat("train", "sigma", 0.1)
    n_chains = cfg.getint("lmc", "n_chains", 1)
    burn = cfg.get("lmc", "burn_in", "")
    xs = []
    for c in range(n_chains):
        config = baselines.LmcConfig(
            step_size=cfg.getfloat("lmc", "step_size", 5e-4),
            chain_length=cfg.getint("lmc", "chain_length", 4000),
            burn_in=int(burn) if burn else None,
            thinning=cfg.getint("lmc", "thinning", 1),
            seed=cfg.seed + c,
            sigma=sigma)
        chain = baselines.lmc_sample(base, obs, SmoothingSpec(sigma), config)
        baselines.save_chain(chain, out / f"chain_{c}.csv")
        xs.append(base.forward(chain.states)[0])
    samples = np.concatenate(xs, axis=0)
    persist.save_array(out / "samples.flwa", samples)
    _save_observation(out, obs)
    return (f"lmc: {n_chains} chain(s), {samples.shape[0]} retained states, "
            f"mean residual={_mean_residual(samples, obs):.4f} "
            f"-> {out / 'samples.flwa'}")


def _point_command(cfg: RunConfig, out: Path, name: str) -> str:
    base = _load_base(cfg)
    op = _measurement(cfg, base.dim)
    obs = _observation(cfg, op)
    if name == "ivom":
        est = baselines.ivom_estimate(
            base, obs, lr=cfg.getfloat("point", "lr", 5e-4),
            steps=cfg.getint("point", "steps", 4000), seed=cfg.seed)
    else:
        est = baselines.csgm_estimate(
            base, obs, lr=cfg.getfloat("point", "lr", 0.02),
            steps=cfg.getint("point", "steps", 4000),
            lam=cfg.getfloat("point", "lambda", 0.1),
            restarts=cfg.getint("point", "restarts", 3), seed=cfg.seed)
    persist.save_array(out / "xhat.flwa", est.x_hat[None, :])
    _save_observation(out, obs)
    extra = ""
    if obs.ground_truth is not None:
        extra = f", mse to truth={estimators.mse(est.x_hat, obs.ground_truth):.5f}"
    return f"{name}: objective={est.objective:.6f}{extra} -> {out / 'xhat.flwa'}"


def cmd_ivom(cfg, out):
    return _point_command(cfg, out, "ivom")


def cmd_csgm(cfg, out):
    return _point_command(cfg, out, "csgm")


def cmd_amortize(cfg: RunConfig, out: Path) -> str:
    base = _load_base(cfg)
    ds = _dataset(cfg)
    op = _measurement(cfg, base.dim)
    if not isinstance(op, MaskOp):
        raise ConfigError("measure.kind", "amortize needs a mask operator")
    noise = cfg.getfloat("observe", "noise_sigma", 0.0)

    def obs_sampler(rng: np.random.Generator) -> Observation:
        gt = ds.samples[rng.integers(0, len(ds.samples))]
        return make_observation(op, gt, noise, rng)

    cond = make_flow(base.dim, context_width=2 * base.dim,
                     rng=stream_rng(cfg.seed, "cond-init"), **_arch(cfg))
    cond = train_amortized(base, cond, obs_sampler, _train_config(cfg))
    persist.save_checkpoint(cond, out / "conditional.ckpt", "conditional")
    return (f"amortize: trained conditional pre-generator on {ds.kind} "
            f"-> {out / 'conditional.ckpt'}")


def cmd_amortized_infer(cfg: RunConfig, out: Path) -> str:
    base = _load_base(cfg)
    cond = persist.load_checkpoint(
        cfg.get("model", "conditional_checkpoint"), "conditional")
    op = _measurement(cfg, base.dim)
    obs = _observation(cfg, op)
    cs = ComposedSampler(cond, base, context=observation_context(obs))
    n = cfg.getint("sample", "n", 1000)
    samples = cs.sample(n, stream_rng(cfg.seed, "sample"))
    persist.save_array(out / "samples.flwa", samples)
    _save_observation(out, obs)
    return (f"amortized-infer: {n} zero-shot samples, mean residual="
            f"{_mean_residual(samples, obs):.4f} -> {out / 'samples.flwa'}")


def cmd_eval(cfg: RunConfig, out: Path) -> str:
    samples = persist.load_array(cfg.get("eval", "samples_path"))
    sset = estimators.SampleSet(samples, cfg.get("eval", "provenance", "svi"),
                                cfg.seed)
    rows = [("n_samples", float(sset.n)), ("dim", float(sset.dim))]
    center = estimators.mmse_estimate(sset)
    if cfg.has("eval", "gt_path"):
        gt = persist.load_array(cfg.get("eval", "gt_path"))[0]
        per_sample, center_mse, spread = estimators.mse_decomposition(sset, gt)
        rows += [("mse_mmse", center_mse), ("mean_mse_single", per_sample),
                 ("mean_sample_variance", spread),
                 ("psnr_mmse", estimators.psnr(center, gt))]
    if sset.n >= 2:
        rows.append(("diversity", estimators.diversity(sset)))
    if cfg.has("eval", "y_path"):
        base_dim = sset.dim
        op = _measurement(cfg, base_dim)
        y = persist.load_array(cfg.get("eval", "y_path"))[0]
        obs = Observation(y_star=y, op=op)
        rows.append(("mean_residual", _mean_residual(sset.samples, obs)))
    lines = ["metric,value"] + [f"{k},{v!r}" for k, v in rows]
    (out / "metrics.csv").write_text("\n".join(lines) + "\n", encoding="ascii")
    if cfg.has("eval", "marginals"):
        for coord in cfg.getints("eval", "marginals"):
            pm = estimators.pixel_marginal(sset, coord)
            estimators.export_pixel_marginal(pm, out / f"marginal_{coord}.txt")
    shown = ", ".join(f"{k}={v:.5g}" for k, v in rows[2:6])
    return f"eval: {shown} -> {out / 'metrics.csv'}"


def cmd_sigma_sweep(cfg: RunConfig, out: Path) -> str:
    base = _load_base(cfg)
    op = _measurement(cfg, base.dim)
    obs = _observation(cfg, op)
    sigmas = cfg.getfloats("sweep", "sigmas", SIGMA_SWEEP_DEFAULT)
    n_eval = cfg.getint("sweep", "eval_samples", 2000)
    residuals = []
    for sigma in sigmas:
        pre, _ = train_svi(base, obs, _train_config(cfg, sigma=sigma))
        samples = ComposedSampler(pre, base).sample(
            n_eval, stream_rng(cfg.seed, "sweep-eval"))
        residuals.append(_mean_residual(samples, obs))
    lines = ["sigma,mean_residual"]
    for s, r in zip(sigmas, residuals):
        lines.append(f"{s!r},{r!r}")
    (out / "sweep.csv").write_text("\n".join(lines) + "\n", encoding="ascii")
    plateau = ""
    if len(sigmas) >= 5:
        big_gain = residuals[0] - residuals[1]
        small_gain = residuals[-2] - residuals[-1]
        flat = small_gain < 0.1 * big_gain
        plateau = f", plateau_at_small_sigma={str(flat).lower()}"
    pairs = ", ".join(f"{s:g}:{r:.4g}" for s, r in zip(sigmas, residuals))
    return f"sigma-sweep: residuals {{{pairs}}}{plateau} -> {out / 'sweep.csv'}"


def cmd_sat_demo(cfg: RunConfig, out: Path) -> str:
    if cfg.has("sat", "cnf_path"):
        formula = satgadget.load_dimacs(cfg.get("sat", "cnf_path"))
    else:
        text = resources.files("flowcond").joinpath("data/example5.cnf").read_text()
        formula = satgadget.parse_dimacs(text)
    eps = cfg.getfloat("sat", "eps", 0.25)
    tau = cfg.getfloat("sat", "tau", 0.5)
    budget = cfg.getint("sat", "budget", 100_000)
    big_m = cfg.getfloat("sat", "m_scale") if cfg.has("sat", "m_scale") else None
    report = satgadget.conditional_sat_demo(
        formula, eps=eps, big_m=big_m, tau=tau, sampler_budget=budget,
        rng=stream_rng(cfg.seed, "sat-demo"))
    gadget = satgadget.compile_gadget(formula, eps, report.big_m)
    corners = satgadget.all_corners(formula.num_vars)
    values = gadget.eval(corners)
    truth = formula.satisfies(corners)
    exact = bool(np.all(np.abs(values - np.where(truth, report.big_m, 0.0)) < 1e-9))
    (out / "report.txt").write_text(
        report.to_text() + f"corner_check_exact={str(exact).lower()}\n",
        encoding="ascii")
    return (f"sat-demo: d={formula.num_vars} m={formula.num_clauses} "
            f"status={report.status} success_fraction={report.success_fraction:.4f} "
            f"corner_check_exact={str(exact).lower()} -> {out / 'report.txt'}")


COMMANDS = {
    "train-base": cmd_train_base,
    "infer": cmd_infer,
    "lmc": cmd_lmc,
    "ivom": cmd_ivom,
    "csgm": cmd_csgm,
    "amortize": cmd_amortize,
    "amortized-infer": cmd_amortized_infer,
    "eval": cmd_eval,
    "sigma-sweep": cmd_sigma_sweep,
    "sat-demo": cmd_sat_demo,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="flowcond",
        description="conditional inference experiments on flow priors")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="run config file")
        p.add_argument("--set", action="append", default=[], metavar="S.K=V",
                       help="override a config value (repeatable)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = persist.load_run_config(args.config, tuple(args.set))
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    try:
        with persist.output_lock(cfg.output_dir) as out:
            persist.write_manifest(out, cfg, args.command)
            summary = COMMANDS[args.command](cfg, out)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except Exception:
        trace_path = Path(cfg.output_dir) / "error-trace.txt"
        try:
            trace_path.write_text(traceback.format_exc(), encoding="utf-8")
            where = str(trace_path)
        except OSError:
            where = "stderr"
            traceback.print_exc()
        print(f"{args.command}: failed, trace at {where}", file=sys.stderr)
        return 1
    print(summary)
    return 0


if __name__ == "__main__":
    sys.exit(main())
