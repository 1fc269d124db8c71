"""Seeded training, evaluation, interpolation and ablation runs with file artifacts.

Every run writes into its own directory:

* ``metrics.jsonl``: a fingerprint header line, then one MetricsRecord per eval point;
* ``checkpoint.npz``: config text, both networks and the memory snapshot.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from . import datasets as ds
from . import evaluation as ev
from . import gan
from . import memory as mem
from .config import TrainConfig, config_from_text
from .errors import IncompatibleCheckpointError, InsufficientRealSlotsError, InvalidConfigError
from .gan import GanLosses, GanModel, Mode
from .nets import AdamState, net_from_arrays, net_to_arrays

log = logging.getLogger(__name__)

METRICS_FILE = "metrics.jsonl"
CHECKPOINT_FILE = "checkpoint.npz"


@dataclass
class DataSplit:
    train: ds.Dataset
    held_out: np.ndarray


def load_data(cfg: TrainConfig) -> DataSplit:
    """Build the configured dataset and split off a held-out slice of reals."""
    if cfg.dataset == "ring":
        data = ds.gaussian_ring(cfg.ring_modes, cfg.ring_radius, cfg.ring_std, cfg.ring_n, cfg.seed)
    elif cfg.dataset == "shapes":
        data = ds.synthetic_shapes(cfg.shapes_side, cfg.shapes_per_class, cfg.seed)
    else:
        paths = cfg.dataset[len("idx:"):].split(",")
        data = ds.load_idx(paths[0], paths[1] if len(paths) > 1 else None)
    n_hold = int(round(cfg.holdout * len(data)))
    if n_hold == 0 or n_hold >= len(data):
        return DataSplit(data, data.samples)
    train = ds.Dataset(data.samples[n_hold:],
                       None if data.labels is None else data.labels[n_hold:],
                       data.mode_centers, data.std, data.side)
    return DataSplit(train, data.samples[:n_hold])


def learning_rate_at(cfg: TrainConfig, iteration: int) -> float:
    """Constant rate, or a linear decay to zero over the run when ``lr_decay`` is set."""
    if not cfg.lr_decay or cfg.iterations == 0:
        return cfg.learning_rate
    return cfg.learning_rate * (1.0 - (iteration - 1) / cfg.iterations)


def evaluate(model: GanModel, cfg: TrainConfig, split: DataSplit, iteration: int,
             losses: Optional[GanLosses] = None) -> ev.MetricsRecord:
    """One metrics row. Uses its own random stream so evaluation never perturbs training."""
    rng = np.random.default_rng([cfg.seed, iteration, 1])
    batch = split.held_out[rng.integers(0, len(split.held_out), cfg.batch_size)]
    if losses is None:
        losses = gan.evaluate_losses(model, batch, rng)
    rec = ev.MetricsRecord(iteration, losses.d_loss, losses.g_loss, losses.info_term,
                           prob_min=losses.prob_min, prob_max=losses.prob_max)
    if model.memory is not None:
        if np.any(model.memory.values == 1):
            rec.avg_biased_loglik = ev.avg_biased_loglik(model.memory, model.inference,
                                                         split.held_out)
        rec.prior_entropy = ev.prior_entropy(model.memory)
        rec.real_slot_fraction = ev.real_slot_fraction(model.memory)
    if split.train.mode_centers is not None:
        samples = gan.generate(model, rng, cfg.eval_samples)
        rec.mode_coverage = ev.mode_coverage(samples, split.train.mode_centers, split.train.std,
                                             cfg.coverage_sigmas).fraction
    return rec


@dataclass
class TrainResult:
    model: GanModel
    records: list
    run_dir: Optional[Path]


def train(cfg: TrainConfig, split: Optional[DataSplit] = None, run_dir=None,
          record_every_step: bool = False, record_at: Iterable[int] = ()) -> TrainResult:
    """Run ``cfg.iterations`` training steps, recording metrics every ``eval_every``.

    Records are taken at iteration 0, at every multiple of ``eval_every``, at any
    iteration listed in ``record_at`` and at the end. Losses in a record are
    those of the training step just taken (the initial record evaluates them on
    held-out data). With ``run_dir`` set, the metrics file and checkpoint are
    rewritten at every record.
    """
    split = split or load_data(cfg)
    run_dir = None if run_dir is None else Path(run_dir)
    extra = set(record_at)
    rng = np.random.default_rng(cfg.seed)
    model = gan.build_model(cfg.hyper(split.train.dim), cfg.mode, rng)
    records = [evaluate(model, cfg, split, 0)]
    if run_dir is not None:
        _persist(run_dir, cfg, model, records)
    samples = split.train.samples
    for it in range(1, cfg.iterations + 1):
        batch = samples[rng.integers(0, len(samples), cfg.batch_size)]
        losses = gan.train_step(model, batch, rng, learning_rate_at(cfg, it))
        if (record_every_step or it % cfg.eval_every == 0 or it in extra
                or it == cfg.iterations):
            records.append(evaluate(model, cfg, split, it, losses))
            log.info("iter %d d=%.4f g=%.4f coverage=%s", it, losses.d_loss, losses.g_loss,
                     records[-1].mode_coverage)
            if run_dir is not None:
                _persist(run_dir, cfg, model, records)
    return TrainResult(model, records, run_dir)


def _persist(run_dir: Path, cfg: TrainConfig, model: GanModel, records) -> None:
    run_dir.mkdir(parents=True, exist_ok=True)
    ev.write_jsonl(run_dir / METRICS_FILE, records, cfg.fingerprint(), mode=cfg.mode)
    save_checkpoint(run_dir / CHECKPOINT_FILE, cfg, model)


def save_checkpoint(path, cfg: TrainConfig, model: GanModel) -> None:
    arrays = {
        "config_fingerprint": np.array(cfg.fingerprint()),
        "config": np.array(cfg.to_text()),
        "data_dim": np.int64(model.generator.out_dim),
    }
    arrays.update(net_to_arrays(model.inference, "inference/"))
    arrays.update(net_to_arrays(model.generator, "generator/"))
    if model.memory is not None:
        arrays.update(mem.memory_to_arrays(model.memory, "memory/"))
    np.savez(path, **arrays)


def load_checkpoint(path):
    """Returns ``(config, model)``; optimiser moments are not stored and start fresh."""
    with np.load(path, allow_pickle=False) as data:
        cfg = config_from_text(str(data["config"]))
        if str(data["config_fingerprint"]) != cfg.fingerprint():
            raise IncompatibleCheckpointError(f"{path}: config does not match its fingerprint")
        inference = net_from_arrays(data, "inference/")
        generator = net_from_arrays(data, "generator/")
        memory = mem.memory_from_arrays(data, "memory/") if "memory/keys" in data else None
        data_dim = int(data["data_dim"])
    hyper = cfg.hyper(data_dim)
    mode = Mode(cfg.mode)
    if mode.uses_memory:
        if memory is None:
            raise IncompatibleCheckpointError(f"{path}: mode {mode.value} needs a memory snapshot")
        if memory.keys.shape != (cfg.n_slots, cfg.key_dim) or inference.out_dim != cfg.key_dim:
            raise IncompatibleCheckpointError(f"{path}: memory or query width disagrees with config")
    if generator.in_dim != cfg.key_dim + cfg.noise_dim:
        raise IncompatibleCheckpointError(f"{path}: generator input width disagrees with config")

    def adam():
        return AdamState(rate=cfg.learning_rate, beta1=cfg.adam_beta1, beta2=cfg.adam_beta2)

    return cfg, GanModel(hyper, mode, inference, generator, memory, adam(), adam())


def run_train(cfg: TrainConfig) -> TrainResult:
    run_dir = cfg.run_dir()
    return train(cfg, run_dir=run_dir)


PROBES = ("mode_coverage", "avg_biased_loglik", "prior_entropy", "cluster_purity")


def run_eval(checkpoint, probes: Sequence[str], out_path, dataset: Optional[str] = None) -> dict:
    """Evaluate a frozen checkpoint; writes a JSON lines file (header, then one result per probe)."""
    cfg, model = load_checkpoint(checkpoint)
    unknown = set(probes) - set(PROBES)
    if unknown:
        raise InvalidConfigError("probes", f"unknown probes {sorted(unknown)}; choose from {PROBES}")
    if dataset is not None:
        cfg = cfg.replace(dataset=dataset)
    results: dict = {}
    if probes:
        split = load_data(cfg)
        if split.train.dim != model.generator.out_dim:
            raise IncompatibleCheckpointError(
                f"dataset has dimension {split.train.dim}, checkpoint generates {model.generator.out_dim}")
        rng = np.random.default_rng([cfg.seed, 2])
        for probe in probes:
            results[probe] = _probe(probe, model, cfg, split, rng)
    with open(out_path, "w") as fh:
        fh.write(ev.jsonl_header(cfg.fingerprint(), checkpoint=str(checkpoint)) + "\n")
        for name in probes:
            fh.write(json.dumps({"probe": name, "value": results[name]}) + "\n")
    return results


def _probe(name, model: GanModel, cfg: TrainConfig, split: DataSplit, rng):
    needs_memory = name != "mode_coverage"
    if needs_memory and model.memory is None:
        return None
    if name == "mode_coverage":
        if split.train.mode_centers is None:
            return None
        samples = gan.generate(model, rng, cfg.eval_samples)
        cov = ev.mode_coverage(samples, split.train.mode_centers, split.train.std, cfg.coverage_sigmas)
        return {"fraction": cov.fraction, "shares": cov.shares.tolist()}
    if name == "avg_biased_loglik":
        return ev.avg_biased_loglik(model.memory, model.inference, split.held_out)
    if name == "prior_entropy":
        return ev.prior_entropy(model.memory)
    if split.train.labels is None:
        return None
    return ev.cluster_purity(model.memory, model.inference(split.train.samples), split.train.labels)


def run_interpolate(checkpoint, grid: int, out_dir, slots: Optional[Sequence[int]] = None,
                    seed: Optional[int] = None, z_policy: str = "frozen") -> ev.InterpolationGrid:
    """Interpolate between four real slots and write the grid plus the snapped-slot map.

    Image data produces ``grid.pgm``; other data produces ``grid.csv`` with one
    point per cell. ``snapped.csv`` always holds the slot map.
    """
    cfg, model = load_checkpoint(checkpoint)
    if model.memory is None:
        raise InsufficientRealSlotsError("checkpoint has no memory")
    state = model.memory
    n_real = int(np.sum((state.values == 1) & state.written()))
    if n_real < 4:
        raise InsufficientRealSlotsError(f"checkpoint memory has {n_real} real slots, need 4")
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    if slots is None:
        slots = ev.choose_corner_slots(state, rng)
    else:
        slots = np.asarray(slots, dtype=np.int64)
        if len(set(slots.tolist())) != len(slots):
            raise InvalidConfigError("slots", f"corner slots must be distinct, got {slots.tolist()}")
    result = ev.interpolate_keys(state, model.generator, slots, grid, rng, cfg.noise_dim, z_policy)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    fp = cfg.fingerprint()
    side = int(round(np.sqrt(model.generator.out_dim)))
    if cfg.dataset != "ring" and side * side == model.generator.out_dim:
        ev.write_pgm(out_dir / "grid.pgm", ev.tile_images(result.samples, grid, side), fp)
    else:
        cols = [f"x{i}" for i in range(result.samples.shape[1])]
        rows = [dict(row=r // grid, col=r % grid, **dict(zip(cols, map(float, s))))
                for r, s in enumerate(result.samples)]
        ev.write_csv(out_dir / "grid.csv", rows, fp, ["row", "col"] + cols)
    snapped_rows = [dict(row=r, col=c, slot=int(result.snapped[r, c]))
                    for r in range(grid) for c in range(grid)]
    ev.write_csv(out_dir / "snapped.csv", snapped_rows, fp, ["row", "col", "slot"])
    return result


def run_ablation(cfg: TrainConfig, modes: Sequence[str], seeds: Sequence[int]) -> dict:
    """Train every (mode, seed) pair into ``<output>/<mode>/seed<k>``; returns final records."""
    out = {}
    base = cfg.run_dir()
    for mode in modes:
        for seed in seeds:
            run_cfg = cfg.replace(mode=mode, seed=seed, output_dir=str(base / mode / f"seed{seed}"))
            result = train(run_cfg, run_dir=Path(run_cfg.output_dir))
            out[(mode, seed)] = result.records[-1]
    summary = []
    for mode in modes:
        cov = [out[(mode, s)].mode_coverage for s in seeds]
        cov = [c for c in cov if c is not None]
        summary.append(dict(mode=mode, seeds=len(seeds),
                            median_coverage=float(np.median(cov)) if cov else None))
    base.mkdir(parents=True, exist_ok=True)
    ev.write_csv(base / "ablation.csv", summary, cfg.fingerprint(),
                 ["mode", "seeds", "median_coverage"])
    return out
