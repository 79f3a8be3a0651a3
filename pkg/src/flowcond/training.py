"""Optimization drivers: Adam, the per-observation variational loop,
amortized training over an observation family, and maximum-likelihood
training of base flows on toy data.

All randomness comes from :func:`stream_rng`: counter-based (Philox)
generators keyed by (seed, purpose, step), so every driver is bit-
reproducible regardless of call interleaving.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

from . import diffengine as de
from .flows import (ComposedSampler, FlowModel, ParamBinder,
                    gaussian_logpdf_node, make_flow)
from .measurement import MaskOp, Observation
from .objective import SmoothingSpec, ambient_vi_loss_nodes, svi_loss_nodes


class TrainingError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; carries the failing step and the finite trace."""

    def __init__(self, step: int, trace: "TrainTrace"):
        super().__init__(f"non-finite loss at step {step}")
        self.step = step
        self.trace = trace


def stream_rng(seed: int, purpose: str, step: int = 0) -> np.random.Generator:
    """Independent, reproducible stream keyed by (seed, purpose, step)."""
    tag = zlib.crc32(purpose.encode("utf-8"))
    ss = np.random.SeedSequence(entropy=int(seed) & 0xFFFFFFFFFFFFFFFF,
                                spawn_key=(tag, int(step)))
    return np.random.Generator(np.random.Philox(ss))


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    num_steps: int = 1000
    batch_size: int = 64
    sigma: float = 0.1
    seed: int = 0
    gradient_clip_norm: float | None = 100.0
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.num_steps < 0:
            raise TrainingError("num_steps must be >= 0")
        if self.batch_size < 1:
            raise TrainingError("batch_size must be >= 1")
        if not (self.sigma > 0.0):
            raise TrainingError("sigma must be positive")


@dataclass
class TrainTrace:
    """Per-step records (step, kl, penalty, total, grad_norm)."""

    rows: list[tuple[int, float, float, float, float]] = field(default_factory=list)

    def append(self, step, kl, penalty, total, grad_norm):
        self.rows.append((int(step), float(kl), float(penalty), float(total),
                          float(grad_norm)))

    def __len__(self):
        return len(self.rows)

    def column(self, name: str) -> np.ndarray:
        names = ("step", "kl", "penalty", "total", "grad_norm")
        return np.asarray([r[names.index(name)] for r in self.rows])

    def to_csv(self) -> str:
        lines = ["step,kl,penalty,total,grad_norm"]
        for step, kl, pen, total, gn in self.rows:
            lines.append(f"{step},{kl!r},{pen!r},{total!r},{gn!r}")
        return "\n".join(lines) + "\n"


class AdamState:
    """Adam moments; defaults beta1=0.9, beta2=0.999, eps=1e-8."""

    def __init__(self, params, learning_rate: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = float(learning_rate)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def update(self, params, grads) -> None:
        """One in-place Adam step.  Zero gradients leave parameters unchanged."""
        self.step += 1
        t = self.step
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def global_grad_norm(grads) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))


def clip_gradients(grads, max_norm: float | None) -> float:
    """Scale gradients in place to the given global norm; returns the
    pre-clip norm (what traces record)."""
    norm = global_grad_norm(grads)
    if max_norm is not None and norm > max_norm:
        scale = max_norm / norm
        for g in grads:
            g *= scale
    return norm


def default_pre_generator(dim: int, seed: int, context_width: int = 0) -> FlowModel:
    """Identity-start pre-generator: 6 affine couplings, width-64 two-hidden
    conditioners."""
    return make_flow(dim, num_layers=6, kind="affine", hidden_width=64,
                     hidden_layers=2, context_width=context_width,
                     rng=stream_rng(seed, "pregen-init"))


def _finite(*vals) -> bool:
    return all(np.isfinite(v) for v in vals)


def train_svi(base: FlowModel, obs: Observation, config: TrainConfig,
              pre_generator: FlowModel | None = None,
              step_callback=None):
    """Fit a pre-generator to one observation (reparametrized batches, Adam).

    The base flow is frozen: only pre-generator parameters are updated.
    The trace row for step i is the loss *before* that step's update, so
    row 0 of a fresh run always shows a zero KL term.
    """
    d = base.dim
    pre = pre_generator if pre_generator is not None else \
        default_pre_generator(d, config.seed)
    cs = ComposedSampler(pre, base)
    smoothing = SmoothingSpec(config.sigma)
    params = pre.parameters()
    adam = AdamState(params, config.learning_rate)
    trace = TrainTrace()
    for step in range(config.num_steps):
        eps = stream_rng(config.seed, "svi-eps", step).standard_normal(
            (config.batch_size, d))
        g = de.Graph()
        bind = ParamBinder(g)
        kl, pen, total = svi_loss_nodes(bind, cs, obs, smoothing, eps)
        if not _finite(kl.value, pen.value):
            raise TrainingDiverged(step, trace)
        grads = bind.gradients(de.backward(g, total), params)
        norm = clip_gradients(grads, config.gradient_clip_norm)
        trace.append(step, kl.value, pen.value, total.value, norm)
        adam.update(params, grads)
        if step_callback and config.checkpoint_every \
                and (step + 1) % config.checkpoint_every == 0:
            step_callback(step, pre)
    return pre, trace


def observation_context(obs: Observation) -> np.ndarray:
    """Embed a masked observation for a conditional pre-generator: the
    observed values scattered into a length-d vector, concatenated with the
    0/1 mask indicator (total width 2d)."""
    if not isinstance(obs.op, MaskOp):
        raise TrainingError("amortization context is defined for mask operators")
    d = obs.op.input_dim
    values = np.zeros(d)
    values[obs.op.indices] = obs.y_star
    indicator = np.zeros(d)
    indicator[obs.op.indices] = 1.0
    return np.concatenate([values, indicator])


def train_amortized(base: FlowModel, conditional_pre_generator: FlowModel,
                    obs_sampler, config: TrainConfig,
                    step_callback=None) -> FlowModel:
    """Minimize the expected per-observation loss over a family of
    observations; ``obs_sampler(rng)`` yields a fresh Observation per step.

    The resulting conditional pre-generator does zero-shot inference:
    bind a new observation's context and sample, no optimization.
    """
    d = base.dim
    pre = conditional_pre_generator
    if pre.context_width != 2 * d:
        raise TrainingError(
            f"conditional flow context width {pre.context_width} != 2*d = {2 * d}")
    cs = ComposedSampler(pre, base)
    smoothing = SmoothingSpec(config.sigma)
    params = pre.parameters()
    adam = AdamState(params, config.learning_rate)
    trace = TrainTrace()
    for step in range(config.num_steps):
        obs = obs_sampler(stream_rng(config.seed, "avi-obs", step))
        ctx = observation_context(obs)
        eps = stream_rng(config.seed, "avi-eps", step).standard_normal(
            (config.batch_size, d))
        g = de.Graph()
        bind = ParamBinder(g)
        ctx_node = pre.context_node(g, ctx, eps.shape[0])
        kl, pen, total = svi_loss_nodes(bind, cs, obs, smoothing, eps, ctx_node)
        if not _finite(kl.value, pen.value):
            raise TrainingDiverged(step, trace)
        grads = bind.gradients(de.backward(g, total), params)
        norm = clip_gradients(grads, config.gradient_clip_norm)
        trace.append(step, kl.value, pen.value, total.value, norm)
        adam.update(params, grads)
        if step_callback and config.checkpoint_every \
                and (step + 1) % config.checkpoint_every == 0:
            step_callback(step, pre)
    return pre


def train_ambient_vi(base: FlowModel, obs: Observation, config: TrainConfig,
                     q: FlowModel | None = None):
    """Baseline: variational fit directly in signal space (same budget and
    loss decomposition, no latent composition)."""
    d = base.dim
    if q is None:
        q = default_pre_generator(d, config.seed)
    smoothing = SmoothingSpec(config.sigma)
    params = q.parameters()
    adam = AdamState(params, config.learning_rate)
    trace = TrainTrace()
    for step in range(config.num_steps):
        eps = stream_rng(config.seed, "avi-ambient-eps", step).standard_normal(
            (config.batch_size, d))
        g = de.Graph()
        bind = ParamBinder(g)
        kl, pen, total = ambient_vi_loss_nodes(bind, q, base, obs, smoothing, eps)
        if not _finite(kl.value, pen.value):
            raise TrainingDiverged(step, trace)
        grads = bind.gradients(de.backward(g, total), params)
        norm = clip_gradients(grads, config.gradient_clip_norm)
        trace.append(step, kl.value, pen.value, total.value, norm)
        adam.update(params, grads)
    return q, trace


def train_base_mle(flow: FlowModel, dataset, config: TrainConfig,
                   step_callback=None):
    """Maximum-likelihood training on a (n, d) sample matrix.

    Trace rows carry the negative log-likelihood in nats per dimension in
    the ``total`` column (kl/penalty columns are zero for this driver).
    """
    data = np.asarray(getattr(dataset, "samples", dataset), dtype=np.float64)
    if data.ndim != 2 or data.shape[1] != flow.dim:
        raise TrainingError(f"dataset must be (n, {flow.dim})")
    params = flow.parameters()
    adam = AdamState(params, config.learning_rate)
    trace = TrainTrace()
    for step in range(config.num_steps):
        idx = stream_rng(config.seed, "mle-batch", step).integers(
            0, data.shape[0], size=config.batch_size)
        g = de.Graph()
        bind = ParamBinder(g)
        x = g.constant(data[idx])
        z, ld_inv = flow.inverse_node(bind, x)
        loss = -1.0 * (gaussian_logpdf_node(z) + ld_inv).mean()
        if not np.isfinite(loss.value):
            raise TrainingDiverged(step, trace)
        grads = bind.gradients(de.backward(g, loss), params)
        norm = clip_gradients(grads, config.gradient_clip_norm)
        trace.append(step, 0.0, 0.0, float(loss.value) / flow.dim, norm)
        adam.update(params, grads)
        if step_callback and config.checkpoint_every \
                and (step + 1) % config.checkpoint_every == 0:
            step_callback(step, flow)
    return flow, trace
