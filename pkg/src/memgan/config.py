"""Experiment configuration: presets, flat ``key=value`` files, overrides and fingerprints."""

from __future__ import annotations

import dataclasses
import hashlib
import os
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Iterable, Mapping

from .errors import InvalidConfigError
from .gan import GanHyper, Mode
from .memory import MemoryParams, _RULES

OUTPUT_ROOT_ENV = "MEMGAN_OUTPUT_ROOT"


@dataclass(frozen=True)
class TrainConfig:
    # data: "ring", "shapes", or "idx:<images>[,<labels>]"
    dataset: str = "ring"
    ring_modes: int = 8
    ring_radius: float = 2.0
    ring_std: float = 0.05
    ring_n: int = 8000
    shapes_side: int = 12
    shapes_per_class: int = 500
    holdout: float = 0.1
    # memory
    n_slots: int = 4096
    key_dim: int = 256
    top_k: int = 128
    kappa: float = 1.0
    beta: float = 1e-8
    epsilon: float = 1e-3
    alpha: float = 0.5
    em_iters: int = 3
    allocation: str = "neighbourhood"
    # networks and objective
    noise_dim: int = 2
    hidden: int = 64
    lam: float = 2e-6
    non_saturating: bool = False
    # optimisation
    batch_size: int = 64
    learning_rate: float = 2e-4
    lr_decay: bool = False
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    iterations: int = 10000
    seed: int = 0
    mode: str = "full"
    # evaluation and output
    eval_every: int = 1000
    eval_samples: int = 2000
    coverage_sigmas: float = 3.0
    output_dir: str = "runs"

    def __post_init__(self):
        _validate(self)

    def memory_params(self) -> MemoryParams:
        return MemoryParams(kappa=self.kappa, beta=self.beta, epsilon=self.epsilon,
                            alpha=self.alpha, top_k=self.top_k, em_iters=self.em_iters,
                            allocation=self.allocation)

    def hyper(self, data_dim: int) -> GanHyper:
        return GanHyper(data_dim=data_dim, n_slots=self.n_slots, key_dim=self.key_dim,
                        noise_dim=self.noise_dim, hidden=self.hidden, lam=self.lam,
                        learning_rate=self.learning_rate, adam_beta1=self.adam_beta1,
                        adam_beta2=self.adam_beta2, non_saturating=self.non_saturating,
                        memory=self.memory_params())

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        """Canonical form: one ``key=value`` per line, keys sorted."""
        items = dataclasses.asdict(self)
        return "".join(f"{k}={_format(items[k])}\n" for k in sorted(items))

    def fingerprint(self) -> str:
        """Short hash of every field that affects results (the output location does not)."""
        text = self.replace(output_dir="").to_text()
        return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]

    def run_dir(self) -> Path:
        """Output directory, resolved against the output-root environment variable when relative."""
        out = Path(self.output_dir)
        root = os.environ.get(OUTPUT_ROOT_ENV)
        if root and not out.is_absolute():
            out = Path(root) / out
        return out


PRESETS: dict[str, dict] = {
    # 2D ring / small images on one CPU core
    "desk": dict(n_slots=128, key_dim=16, top_k=16, kappa=3.0, noise_dim=2, hidden=64,
                 alpha=1.0, learning_rate=1e-3, lr_decay=True, iterations=16000, eval_every=1000),
    # Fashion-MNIST scale
    "fashion": dict(n_slots=4096, key_dim=256, top_k=128, lam=0.01, noise_dim=2),
    # CIFAR / CelebA scale
    "large": dict(n_slots=16384, key_dim=512, top_k=256, noise_dim=16),
}

_FIELDS = {f.name: f for f in fields(TrainConfig)}


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


def _parse(name: str, raw: str):
    kind = _FIELDS[name].type
    raw = raw.strip()
    try:
        if kind == "bool":
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise InvalidConfigError(name, f"cannot parse {raw!r} as {kind}") from None
    return raw


def _validate(cfg: TrainConfig) -> None:
    def need(ok, name, msg):
        if not ok:
            raise InvalidConfigError(name, msg)

    need(cfg.dataset in ("ring", "shapes") or cfg.dataset.startswith("idx:"), "dataset",
         f"expected ring, shapes or idx:<images>[,<labels>], got {cfg.dataset!r}")
    need(cfg.ring_modes >= 1, "ring_modes", "must be >= 1")
    need(cfg.ring_std > 0, "ring_std", "must be positive")
    need(cfg.ring_n >= 1, "ring_n", "must be >= 1")
    need(cfg.shapes_side >= 8, "shapes_side", "must be >= 8")
    need(cfg.shapes_per_class >= 1, "shapes_per_class", "must be >= 1")
    need(0 <= cfg.holdout < 1, "holdout", "must lie in [0, 1)")
    need(cfg.n_slots >= 1, "n_slots", "must be >= 1")
    need(cfg.key_dim >= 1, "key_dim", "must be >= 1")
    need(1 <= cfg.top_k <= cfg.n_slots, "top_k", "must lie in [1, n_slots]")
    need(cfg.kappa > 0, "kappa", "must be positive")
    need(cfg.beta > 0, "beta", "must be positive")
    need(0 < cfg.epsilon < 0.5, "epsilon", "must lie in (0, 0.5)")
    need(0 < cfg.alpha <= 1, "alpha", "must lie in (0, 1]")
    need(cfg.em_iters >= 1, "em_iters", "must be >= 1")
    need(cfg.allocation in _RULES, "allocation", f"must be one of {sorted(_RULES)}")
    need(cfg.noise_dim >= 1, "noise_dim", "must be >= 1")
    need(cfg.hidden >= 1, "hidden", "must be >= 1")
    need(cfg.lam >= 0, "lam", "must be >= 0")
    need(cfg.batch_size >= 1, "batch_size", "must be >= 1")
    need(cfg.learning_rate > 0, "learning_rate", "must be positive")
    need(0 <= cfg.adam_beta1 < 1, "adam_beta1", "must lie in [0, 1)")
    need(0 <= cfg.adam_beta2 < 1, "adam_beta2", "must lie in [0, 1)")
    need(cfg.iterations >= 0, "iterations", "must be >= 0")
    need(cfg.seed >= 0, "seed", "must be >= 0")
    need(cfg.mode in {m.value for m in Mode}, "mode", f"must be one of {[m.value for m in Mode]}")
    need(cfg.eval_every >= 1, "eval_every", "must be >= 1")
    need(cfg.eval_samples >= 1, "eval_samples", "must be >= 1")
    need(cfg.coverage_sigmas > 0, "coverage_sigmas", "must be positive")


def parse_pairs(pairs: Iterable[str]) -> dict:
    """Parse ``key=value`` strings into typed field values."""
    out = {}
    for pair in pairs:
        if "=" not in pair:
            raise InvalidConfigError(pair, "expected key=value")
        key, raw = pair.split("=", 1)
        key = key.strip().replace("-", "_")
        if key not in _FIELDS:
            raise InvalidConfigError(key, "unknown config key")
        out[key] = _parse(key, raw)
    return out


def read_config_text(text: str) -> dict:
    lines = []
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            lines.append(line)
    return parse_pairs(lines)


def load_config(path=None, preset: str | None = None, overrides: Iterable[str] = (),
                extra: Mapping | None = None) -> TrainConfig:
    """Build a config from, in increasing precedence: a preset, a file, ``extra`` and overrides."""
    values: dict = {}
    if preset is not None:
        if preset not in PRESETS:
            raise InvalidConfigError("preset", f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        values.update(PRESETS[preset])
    if path is not None:
        values.update(read_config_text(Path(path).read_text()))
    if extra:
        values.update({k: v for k, v in extra.items() if v is not None})
    values.update(parse_pairs(overrides))
    try:
        return TrainConfig(**values)
    except TypeError as exc:
        raise InvalidConfigError("config", str(exc)) from None


def config_from_text(text: str) -> TrainConfig:
    return TrainConfig(**read_config_text(text))
