"""Probes over a trained model: mode coverage, likelihood tracking, prior usage,
key-space interpolation, nearest neighbours and cluster purity, plus the
metric and grid writers."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, fields
from typing import Iterable, NamedTuple, Optional, Sequence

import numpy as np

from . import memory as mem
from .errors import InsufficientRealSlotsError, ShapeMismatchError
from .memory import MemoryState
from .nets import Mlp

PRIOR_REPORT_THRESHOLD = 4e-4


class Coverage(NamedTuple):
    fraction: float
    shares: np.ndarray  # (n_modes,) share of samples nearest to each center
    mean_distance: np.ndarray  # (n_modes,) NaN for modes that received nothing


def mode_coverage(samples: np.ndarray, centers: np.ndarray, std: float,
                  threshold_sigmas: float = 3.0, min_share: Optional[float] = None) -> Coverage:
    """Fraction of modes that receive a concentrated share of the samples.

    Each sample goes to its nearest center. A mode is covered when its share is
    at least ``min_share`` (default: a quarter of the uniform share) and the mean
    distance of its members to the center is at most ``threshold_sigmas * std``.
    """
    centers = np.asarray(centers, dtype=np.float64)
    if centers.ndim != 2 or len(centers) == 0:
        raise ValueError("need a nonempty (n_modes, D) array of centers")
    n_modes = len(centers)
    if min_share is None:
        min_share = 0.25 / n_modes
    samples = np.asarray(samples, dtype=np.float64).reshape(-1, centers.shape[1])
    if len(samples) == 0:
        return Coverage(0.0, np.zeros(n_modes), np.full(n_modes, np.nan))
    dist = np.linalg.norm(samples[:, None, :] - centers[None, :, :], axis=2)
    nearest = np.argmin(dist, axis=1)
    counts = np.bincount(nearest, minlength=n_modes)
    shares = counts / len(samples)
    mean_dist = np.full(n_modes, np.nan)
    covered = 0
    for k in range(n_modes):
        if counts[k]:
            mean_dist[k] = dist[nearest == k, k].mean()
            if shares[k] >= min_share and mean_dist[k] <= threshold_sigmas * std:
                covered += 1
    return Coverage(covered / n_modes, shares, mean_dist)


def avg_biased_loglik(state: MemoryState, inf_net: Mlp, reals: np.ndarray) -> float:
    """Mean biased real-slot log-likelihood of held-out samples."""
    if len(reals) == 0:
        raise ValueError("held-out set is empty")
    return float(np.mean(mem.biased_loglik_real_batch(state, inf_net(reals))))


def prior_entropy(state: MemoryState) -> float:
    """Shannon entropy (nats) of the slot prior."""
    p = mem.slot_prior(state)
    return float(-np.sum(p * np.log(p)))


class PriorReport(NamedTuple):
    indices: np.ndarray  # slots at or above the threshold, most probable first
    probs: np.ndarray
    hidden: int  # slots below the threshold


def prior_report(state: MemoryState, threshold: float = PRIOR_REPORT_THRESHOLD) -> PriorReport:
    """Slot prior with negligible slots filtered out for display."""
    p = mem.slot_prior(state)
    keep = np.flatnonzero(p >= threshold)
    order = keep[np.argsort(-p[keep], kind="stable")]
    return PriorReport(order, p[order], int(state.n_slots - len(keep)))


def snap_to_real_slot(state: MemoryState, direction: np.ndarray) -> int:
    """argmax_c p(c | K_hat) over the real slots; ties go to the lowest index."""
    real = state.values == 1
    if not real.any():
        raise InsufficientRealSlotsError("memory holds no real slot")
    logits = mem._log_joint(state, direction)
    logits = np.where(real, logits, -np.inf)
    return int(np.argmax(logits))


def self_maximal_slot(state: MemoryState, start: int, max_steps: int = 64) -> int:
    """Follow c -> snap(K_c) from ``start`` until a slot snaps to itself.

    Returns -1 if no fixed point is reached within ``max_steps``.
    """
    c = start
    for _ in range(max_steps):
        nxt = snap_to_real_slot(state, state.keys[c])
        if nxt == c:
            return c
        c = nxt
    return -1


def choose_corner_slots(state: MemoryState, rng: np.random.Generator, count: int = 4,
                        max_draws: int = 1000) -> np.ndarray:
    """Pick distinct real slots that each win their own snap.

    Candidates are drawn from P(c | v=1) and moved to the self-maximal slot
    they lead to, so every chosen corner reproduces itself when snapped.
    """
    chosen: list[int] = []
    for _ in range(max_draws):
        if len(chosen) == count:
            break
        c = self_maximal_slot(state, int(mem.sample_slot(state, rng)))
        if c >= 0 and c not in chosen:
            chosen.append(c)
    if len(chosen) < count:
        raise InsufficientRealSlotsError(
            f"found only {len(chosen)} distinct self-maximal real slots, need {count}")
    return np.array(chosen, dtype=np.int64)


@dataclass
class InterpolationGrid:
    samples: np.ndarray  # (grid * grid, data_dim), row-major over the lattice
    snapped: np.ndarray  # (grid, grid) slot indices
    corners: np.ndarray  # the 4 corner slots: top-left, top-right, bottom-left, bottom-right

    @property
    def grid(self) -> int:
        return self.snapped.shape[0]

    def corner_cells(self) -> np.ndarray:
        g = self.grid - 1
        return np.array([self.snapped[0, 0], self.snapped[0, g],
                         self.snapped[g, 0], self.snapped[g, g]])


def interpolate_keys(state: MemoryState, gen: Mlp, slots: Sequence[int], grid: int,
                     rng: np.random.Generator, noise_dim: int,
                     z_policy: str = "frozen") -> InterpolationGrid:
    """Bilinear walk between four real slot keys, snapped back onto the memory.

    Cell (r, c) blends the corners with weights (1-u)(1-w), (1-u)w, u(1-w), uw,
    where u = r / (grid-1) and w = c / (grid-1). The blend is renormalised,
    snapped to the most probable real slot and rendered as gen([K_snap, z]).
    ``z_policy="frozen"`` uses one z for the whole grid; ``"corners"`` draws one
    z per corner and blends them with the same weights.
    """
    slots = np.asarray(slots, dtype=np.int64)
    if slots.shape != (4,):
        raise ValueError("need exactly 4 corner slots")
    if len(set(slots.tolist())) != 4:
        raise ValueError(f"corner slots must be distinct, got {slots.tolist()}")
    if np.any(slots < 0) or np.any(slots >= state.n_slots):
        raise ValueError("corner slot index out of range")
    if np.any(state.values[slots] != 1):
        raise InsufficientRealSlotsError("every corner slot must be real (v = 1)")
    if grid < 2:
        raise ValueError("grid must be >= 2")
    if z_policy == "frozen":
        z_corners = np.repeat(rng.standard_normal((1, noise_dim)), 4, axis=0)
    elif z_policy == "corners":
        z_corners = rng.standard_normal((4, noise_dim))
    else:
        raise ValueError(f"unknown z_policy {z_policy!r}")

    steps = np.linspace(0.0, 1.0, grid)
    u, w = np.meshgrid(steps, steps, indexing="ij")
    blend = np.stack([(1 - u) * (1 - w), (1 - u) * w, u * (1 - w), u * w], axis=-1)
    blend = blend.reshape(-1, 4)
    # exact corner weights, so corners reproduce their keys bit for bit
    blend = np.where(np.isclose(blend, 1.0, rtol=0.0, atol=1e-15), 1.0, blend)
    blend = np.where(np.isclose(blend, 0.0, rtol=0.0, atol=1e-15), 0.0, blend)

    keys = blend @ state.keys[slots]
    norms = np.linalg.norm(keys, axis=1, keepdims=True)
    keys = np.divide(keys, norms, out=np.zeros_like(keys), where=norms > 1e-12)
    snapped = np.array([snap_to_real_slot(state, k) for k in keys], dtype=np.int64)
    z = blend @ z_corners
    samples = gen(np.concatenate([state.keys[snapped], z], axis=1))
    return InterpolationGrid(samples, snapped.reshape(grid, grid), slots)


def nearest_training_neighbors(inf_net: Mlp, generated: np.ndarray, training: np.ndarray,
                               top_n: int = 7):
    """Training items ranked by cosine similarity of their queries to the generated sample's.

    Returns ``(indices, scores)``, descending, lowest index first on ties.
    """
    if len(training) == 0:
        raise ValueError("training set is empty")
    q = inf_net(np.asarray(generated, dtype=np.float64).reshape(1, -1))[0]
    scores = inf_net(training) @ q
    order = np.argsort(-scores, kind="stable")[:top_n]
    return order, scores[order]


def cluster_purity(state: MemoryState, queries: np.ndarray, labels: np.ndarray) -> float:
    """Sum over slots of the majority label count, over the number of queries.

    Each query belongs to its argmax-posterior slot.
    """
    queries = np.asarray(queries, dtype=np.float64).reshape(-1, state.key_dim)
    labels = np.asarray(labels).reshape(-1)
    if len(queries) != len(labels):
        raise ShapeMismatchError(f"{len(queries)} queries but {len(labels)} labels")
    if len(queries) == 0:
        raise ValueError("purity of an empty query set is undefined")
    assigned = np.argmax(mem._log_joint(state, queries), axis=1)
    majority = 0
    for slot in np.unique(assigned):
        _, counts = np.unique(labels[assigned == slot], return_counts=True)
        majority += counts.max()
    return majority / len(queries)


@dataclass
class MetricsRecord:
    """One row of training metrics.

    Memory-derived fields are ``None`` for the memoryless ablation, and
    ``mode_coverage`` is ``None`` for data without known modes.
    """

    iteration: int
    d_loss: float
    g_loss: float
    info_term: float
    avg_biased_loglik: Optional[float] = None
    prior_entropy: Optional[float] = None
    mode_coverage: Optional[float] = None
    real_slot_fraction: Optional[float] = None
    prob_min: Optional[float] = None
    prob_max: Optional[float] = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=False)

    @classmethod
    def from_dict(cls, row: dict) -> "MetricsRecord":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in row.items() if k in names})


def real_slot_fraction(state: MemoryState) -> float:
    """Share of written slots that hold a real value."""
    written = state.written()
    if not written.any():
        return 0.0
    return float(np.mean(state.values[written] == 1))


def jsonl_header(fingerprint: str, **extra) -> str:
    return json.dumps({"config_fingerprint": fingerprint, **extra}, sort_keys=True)


def write_jsonl(path, records: Iterable[MetricsRecord], fingerprint: str, **extra) -> None:
    """Header line with the config fingerprint, then one record per line."""
    with open(path, "w") as fh:
        fh.write(jsonl_header(fingerprint, **extra) + "\n")
        for rec in records:
            fh.write(rec.to_json() + "\n")


def read_jsonl(path):
    """Returns ``(header, records)``."""
    with open(path) as fh:
        lines = [json.loads(line) for line in fh if line.strip()]
    if not lines or "config_fingerprint" not in lines[0]:
        raise ValueError(f"{path}: missing config fingerprint header")
    return lines[0], [MetricsRecord.from_dict(row) for row in lines[1:]]


def write_csv(path, rows: Sequence[dict], fingerprint: str, columns: Sequence[str] | None = None) -> None:
    """CSV with a ``# config_fingerprint=...`` comment line before the header row."""
    if columns is None:
        columns = list(rows[0].keys()) if rows else []
    with open(path, "w", newline="") as fh:
        fh.write(f"# config_fingerprint={fingerprint}\n")
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in rows:
            writer.writerow(["" if row.get(c) is None else row.get(c) for c in columns])


def tile_images(images: np.ndarray, grid: int, side: int) -> np.ndarray:
    """Arrange ``grid * grid`` flattened side x side images into one mosaic."""
    imgs = np.asarray(images).reshape(grid, grid, side, side)
    return imgs.transpose(0, 2, 1, 3).reshape(grid * side, grid * side)


def write_pgm(path, image: np.ndarray, fingerprint: str) -> None:
    """Binary (P5) 8-bit PGM; values in [0, 1] are scaled to 0..255.

    The fingerprint rides in a comment right after the magic number, the
    earliest place the format allows one.
    """
    pixels = np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    h, w = pixels.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n# config_fingerprint={fingerprint}\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())


def read_pgm(path):
    """Returns ``(image in [0, 1], fingerprint or None)`` for files from :func:`write_pgm`."""
    with open(path, "rb") as fh:
        raw = fh.read()
    tokens, comments, pos = [], [], 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            end = raw.index(b"\n", pos)
            comments.append(raw[pos + 1:end].decode("ascii").strip())
            pos = end + 1
            continue
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        tokens.append(raw[pos:end].decode("ascii"))
        pos = end
    if tokens[0] != "P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    pixels = np.frombuffer(raw, dtype=np.uint8, count=w * h, offset=pos + 1).reshape(h, w)
    fp = None
    for c in comments:
        if c.startswith("config_fingerprint="):
            fp = c.split("=", 1)[1]
    return pixels / float(maxval), fp
