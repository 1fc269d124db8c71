"""Adversarial objective, memory-conditional sampling and one training iteration.

The discriminator is the inference network followed by the memory head
(``p(y=1|x)`` marginalised over the top-k slots of ``q = mu(x)``). The generator
reads ``[K_c, z]`` with ``c`` drawn from the real slots in proportion to their
histogram mass. Both losses carry ``lam * I_hat`` where
``I_hat = -kappa * mean_b K_{c_b} . mu(G(z_b, K_{c_b}))``.

Ablations:

* ``no_em``: memory writes use the normalised-sum key update instead of EM.
* ``no_mcgn``: the generator reads pure Gaussian noise of the same width.
* ``no_memory``: the inference network ends in a single logit and a sigmoid;
  no memory exists, and the info term is zero.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import memory as mem
from .memory import MemoryParams, MemoryState
from .nets import AdamState, Mlp, adam_step


class Mode(str, enum.Enum):
    FULL = "full"
    NO_EM = "no_em"
    NO_MCGN = "no_mcgn"
    NO_MEMORY = "no_memory"

    @property
    def uses_memory(self) -> bool:
        return self is not Mode.NO_MEMORY

    @property
    def conditions_generator(self) -> bool:
        return self in (Mode.FULL, Mode.NO_EM)


@dataclass
class GanHyper:
    data_dim: int
    n_slots: int = 4096
    key_dim: int = 256
    noise_dim: int = 2
    hidden: int = 64
    lam: float = 2e-6
    learning_rate: float = 2e-4
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    non_saturating: bool = False
    memory: MemoryParams = field(default_factory=MemoryParams)


@dataclass
class LatentBatch:
    """Generator inputs for one minibatch.

    ``slots`` and ``keys`` are ``None`` when the generator is not memory-conditioned.
    """

    noise: np.ndarray  # (B, D_z) or (B, M + D_z) when unconditioned
    slots: Optional[np.ndarray] = None  # (B,)
    keys: Optional[np.ndarray] = None  # (B, M)

    @property
    def generator_input(self) -> np.ndarray:
        if self.keys is None:
            return self.noise
        return np.concatenate([self.keys, self.noise], axis=1)


@dataclass
class GanLosses:
    d_loss: float
    g_loss: float
    info_term: float
    prob_min: float = float("nan")
    prob_max: float = float("nan")


@dataclass
class GanModel:
    hyper: GanHyper
    mode: Mode
    inference: Mlp
    generator: Mlp
    memory: Optional[MemoryState]
    d_opt: AdamState
    g_opt: AdamState

    @property
    def kappa(self) -> float:
        return self.hyper.memory.kappa

    @property
    def epsilon(self) -> float:
        return self.hyper.memory.epsilon


def build_model(hyper: GanHyper, mode: Mode | str, rng: np.random.Generator) -> GanModel:
    """Desk-scale nets: data -> H tanh -> H tanh -> M l2norm, and (M + D_z) -> H tanh -> H tanh -> data."""
    mode = Mode(mode)
    h = hyper.hidden
    gen_in = hyper.key_dim + hyper.noise_dim
    if mode.uses_memory:
        inference = Mlp.build([hyper.data_dim, h, h, hyper.key_dim], ["tanh", "tanh", "l2norm"], rng)
        memory = mem.init_memory(hyper.n_slots, hyper.key_dim, hyper.memory, rng)
    else:
        inference = Mlp.build([hyper.data_dim, h, h, 1], ["tanh", "tanh", "linear"], rng)
        memory = None
    generator = Mlp.build([gen_in, h, h, hyper.data_dim], ["tanh", "tanh", "linear"], rng)

    def adam():
        return AdamState(rate=hyper.learning_rate, beta1=hyper.adam_beta1, beta2=hyper.adam_beta2)

    return GanModel(hyper, mode, inference, generator, memory, adam(), adam())


def sample_latent(model: GanModel, rng: np.random.Generator, batch_size: int) -> LatentBatch:
    hyper = model.hyper
    if not model.mode.conditions_generator:
        return LatentBatch(rng.standard_normal((batch_size, hyper.key_dim + hyper.noise_dim)))
    z = rng.standard_normal((batch_size, hyper.noise_dim))
    slots = mem.sample_slot(model.memory, rng, size=batch_size)
    return LatentBatch(z, slots, model.memory.keys[slots].copy())


def mcgn_sample(gen: Mlp, state: MemoryState, rng: np.random.Generator, batch_size: int,
                noise_dim: int):
    """Draw ``z ~ N(0, I)``, ``c ~ P(c | v=1)`` and return ``(gen([K_c, z]), latents)``."""
    z = rng.standard_normal((batch_size, noise_dim))
    slots = mem.sample_slot(state, rng, size=batch_size)
    latents = LatentBatch(z, slots, state.keys[slots].copy())
    return gen(latents.generator_input), latents


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def discriminate(model: GanModel, x: np.ndarray):
    """Forward the discriminator on ``x``.

    Returns ``(probs, dprobs_dout, out, cache)`` where ``out`` is the inference
    network output (the query in memory modes, a logit otherwise) and
    ``dprobs_dout`` is zero wherever the probability clip is active.
    """
    out, cache = model.inference.forward(x)
    if model.memory is not None:
        res = mem.discriminate_batch(model.memory, out)
        return res.probs, res.grad_q, out, cache
    eps = model.epsilon
    raw = _sigmoid(out[:, 0])
    probs = np.clip(raw, eps, 1.0 - eps)
    active = (raw > eps) & (raw < 1.0 - eps)
    grad = (raw * (1.0 - raw) * active)[:, None]
    return probs, grad, out, cache


def info_term(kappa: float, keys: np.ndarray, queries: np.ndarray):
    """``I_hat = -(kappa / B) sum_b K_b . q_b`` and its gradient w.r.t. the queries."""
    b = queries.shape[0]
    value = -kappa * float(np.sum(keys * queries)) / b
    return value, -kappa * keys / b


def d_loss(model: GanModel, real: np.ndarray, fake: np.ndarray, latents: LatentBatch):
    """Discriminator loss ``-E log D(x) - E log(1 - D(G)) + lam * I_hat``.

    Returns ``(loss, info, grads, probs)``; grads are w.r.t. the inference
    network parameters and ``probs`` concatenates the real and fake D outputs.
    """
    n_real = real.shape[0]
    probs, dprobs, out, cache = discriminate(model, np.concatenate([real, fake]))
    p_real, p_fake = probs[:n_real], probs[n_real:]
    loss = -np.mean(np.log(p_real)) - np.mean(np.log1p(-p_fake))

    scale = np.concatenate([-1.0 / (n_real * p_real), 1.0 / (fake.shape[0] * (1.0 - p_fake))])
    dout = scale[:, None] * dprobs
    info = 0.0
    if latents.keys is not None:
        info, dinfo = info_term(model.kappa, latents.keys, out[n_real:])
        loss += model.hyper.lam * info
        dout[n_real:] += model.hyper.lam * dinfo
    _, grads = model.inference.backward(dout, cache)
    return float(loss), info, grads, probs


def g_loss(model: GanModel, latents: LatentBatch):
    """Generator loss ``E log(1 - D(G(z, K))) + lam * I_hat`` (or ``-E log D`` when non-saturating).

    The inference network and the memory are frozen; gradients are w.r.t. the
    generator parameters only. Returns ``(loss, info, grads, probs)``.
    """
    fake, gcache = model.generator.forward(latents.generator_input)
    probs, dprobs, q, icache = discriminate(model, fake)
    b = fake.shape[0]
    if model.hyper.non_saturating:
        loss = -np.mean(np.log(probs))
        dloss = (-1.0 / (b * probs))[:, None] * dprobs
    else:
        loss = np.mean(np.log1p(-probs))
        dloss = (-1.0 / (b * (1.0 - probs)))[:, None] * dprobs
    info = 0.0
    if latents.keys is not None:
        info, dinfo = info_term(model.kappa, latents.keys, q)
        loss += model.hyper.lam * info
        dloss = dloss + model.hyper.lam * dinfo
    dx, _ = model.inference.backward(dloss, icache)
    _, grads = model.generator.backward(dx, gcache)
    return float(loss), info, grads, probs


def running_average_write(state: MemoryState, q, y: int) -> MemoryState:
    """Memory write with the normalised-sum key rule in place of EM.

    Allocation is identical to :func:`memgan.memory.write`; on the update path
    only the best-matching written slot with label ``y`` moves, to
    ``(K + q) / |K + q|``, and its histogram is left alone.
    """
    mem.write(state, q, y, use_em=False)
    return state


def update_memory(model: GanModel, real: np.ndarray, fake: np.ndarray) -> int:
    """Write every real (y=1) then every fake (y=0) query of the batch.

    Returns the number of slots allocated.
    """
    if model.memory is None:
        return 0
    queries = model.inference(np.concatenate([real, fake]))
    labels = np.concatenate([np.ones(len(real), np.int8), np.zeros(len(fake), np.int8)])
    if model.mode is Mode.NO_EM:
        return mem.write_batch(model.memory, queries, labels, use_em=False)
    return mem.write_minibatch(model.memory, queries, labels)


def train_step(model: GanModel, real: np.ndarray, rng: np.random.Generator,
               learning_rate: float | None = None) -> GanLosses:
    """One iteration: D step, memory writes, fresh latents, G step."""
    b = real.shape[0]
    latents = sample_latent(model, rng, b)
    fake = model.generator(latents.generator_input)
    loss_d, _, grads_d, probs_d = d_loss(model, real, fake, latents)
    adam_step(model.d_opt, model.inference.params, grads_d, learning_rate)

    update_memory(model, real, fake)

    latents = sample_latent(model, rng, b)
    loss_g, info, grads_g, probs_g = g_loss(model, latents)
    adam_step(model.g_opt, model.generator.params, grads_g, learning_rate)
    return GanLosses(loss_d, loss_g, info,
                     float(min(probs_d.min(), probs_g.min())),
                     float(max(probs_d.max(), probs_g.max())))


def evaluate_losses(model: GanModel, real: np.ndarray, rng: np.random.Generator) -> GanLosses:
    """Both losses at the current parameters without touching parameters or memory."""
    latents = sample_latent(model, rng, real.shape[0])
    fake = model.generator(latents.generator_input)
    loss_d, _, _, probs_d = d_loss(model, real, fake, latents)
    loss_g, info, _, probs_g = g_loss(model, latents)
    return GanLosses(loss_d, loss_g, info,
                     float(min(probs_d.min(), probs_g.min())),
                     float(max(probs_d.max(), probs_g.max())))


def generate(model: GanModel, rng: np.random.Generator, n: int) -> np.ndarray:
    return model.generator(sample_latent(model, rng, n).generator_input)
