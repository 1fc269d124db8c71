"""von Mises-Fisher mixture memory shared by the discriminator and generator.

The memory holds ``N`` slots. Each slot carries a unit-norm key (a vMF mean
direction in query space), a binary value (1 = real, 0 = fake), an age used for
least-recently-used allocation, and a histogram entry counting the effective
number of queries assigned to it.

All log-likelihoods drop the vMF normalizer C(kappa); it is shared by every
slot and cancels in every posterior computed here.

State is single-writer: :func:`write`, :func:`em_update`,
:func:`allocate_oldest` and :func:`tick_ages` mutate the arrays in place.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from typing import NamedTuple, Optional

import numpy as np

from . import _kernels
from .errors import (
    DegenerateHistogramError,
    DimensionMismatchError,
    EmptyCandidateSetError,
    InvalidDimensionError,
    NoRealSlotsError,
)

INITIAL_HISTOGRAM = 1e-5
_RULES = {
    "neighbourhood": _kernels.RULE_NEIGHBOURHOOD,
    "conditional": _kernels.RULE_CONDITIONAL,
    "nearest": _kernels.RULE_NEAREST,
}


@dataclass(frozen=True)
class MemoryParams:
    kappa: float = 1.0
    beta: float = 1e-8
    epsilon: float = 1e-3
    alpha: float = 0.5
    top_k: int = 128
    em_iters: int = 3
    allocation: str = "neighbourhood"

    def __post_init__(self):
        if not self.kappa > 0:
            raise ValueError(f"kappa must be positive, got {self.kappa}")
        if not self.beta > 0:
            raise ValueError(f"beta must be positive, got {self.beta}")
        if not 0 < self.epsilon < 0.5:
            raise ValueError(f"epsilon must lie in (0, 0.5), got {self.epsilon}")
        if not 0 < self.alpha <= 1:
            raise ValueError(f"alpha must lie in (0, 1], got {self.alpha}")
        if self.top_k < 1:
            raise ValueError(f"top_k must be >= 1, got {self.top_k}")
        if self.em_iters < 1:
            raise ValueError(f"em_iters must be >= 1, got {self.em_iters}")
        if self.allocation not in _RULES:
            raise ValueError(f"unknown allocation rule {self.allocation!r}")


@dataclass
class MemoryState:
    """The memory tuple (K, v, a, h) plus its hyperparameters."""

    keys: np.ndarray  # (N, M) float64
    values: np.ndarray  # (N,) int8 in {0, 1}
    ages: np.ndarray  # (N,) int64
    histogram: np.ndarray  # (N,) float64
    params: MemoryParams = field(default_factory=MemoryParams)

    @property
    def n_slots(self) -> int:
        return self.keys.shape[0]

    @property
    def key_dim(self) -> int:
        return self.keys.shape[1]

    @property
    def k(self) -> int:
        """Effective neighbour count, min(top_k, N)."""
        return min(self.params.top_k, self.n_slots)

    def written(self) -> np.ndarray:
        """Boolean mask of slots whose key has been set (non-zero row)."""
        return np.any(self.keys != 0.0, axis=1)

    def copy(self) -> "MemoryState":
        return MemoryState(
            self.keys.copy(),
            self.values.copy(),
            self.ages.copy(),
            self.histogram.copy(),
            self.params,
        )


class SlotSelection(NamedTuple):
    indices: np.ndarray
    scores: np.ndarray
    weights: np.ndarray


def init_memory(n_slots: int, key_dim: int, params: MemoryParams | None = None,
                seed: int | np.random.Generator | None = 0) -> MemoryState:
    """Fresh memory: zero keys and ages, h = 1e-5, v ~ Bernoulli(0.5) per slot."""
    if n_slots < 1 or key_dim < 1:
        raise InvalidDimensionError(
            f"n_slots and key_dim must be >= 1, got {n_slots} and {key_dim}")
    params = params or MemoryParams()
    rng = np.random.default_rng(seed)
    return MemoryState(
        keys=np.zeros((n_slots, key_dim)),
        values=rng.integers(0, 2, size=n_slots).astype(np.int8),
        ages=np.zeros(n_slots, dtype=np.int64),
        histogram=np.full(n_slots, INITIAL_HISTOGRAM),
        params=params,
    )


def _check_query(state: MemoryState, q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    if q.shape[-1] != state.key_dim:
        raise DimensionMismatchError(
            f"query has dimension {q.shape[-1]}, memory keys have {state.key_dim}")
    return q


def slot_prior(state: MemoryState) -> np.ndarray:
    """Categorical prior p(c=i) = (h_i + beta) / sum_j (h_j + beta)."""
    smoothed = state.histogram + state.params.beta
    return smoothed / smoothed.sum()


def _log_joint(state: MemoryState, q: np.ndarray) -> np.ndarray:
    # log[exp(kappa K_i.q) (h_i + beta)]; works for a single query or a (B, M) batch
    return state.params.kappa * (q @ state.keys.T) + np.log(state.histogram + state.params.beta)


def _softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = np.exp(logits - logits.max(axis=axis, keepdims=True))
    return shifted / shifted.sum(axis=axis, keepdims=True)


def posterior_exact(state: MemoryState, q) -> np.ndarray:
    """Posterior p(c | x) over all N slots for query ``q``."""
    q = _check_query(state, q)
    return _softmax(_log_joint(state, q))


def _descending(logits: np.ndarray, k: int) -> np.ndarray:
    # Stable sort keeps the lowest index first among equal scores.
    return np.argsort(-logits, kind="stable")[:k]


def top_k_slots(state: MemoryState, q, conditional_label: Optional[int] = None,
                written_only: bool = False) -> SlotSelection:
    """Select the k slots with the largest joint score exp(kappa K_c.q)(h_c + beta).

    Args:
        state: the memory.
        q: unit-norm query of length M.
        conditional_label: restrict candidates to slots with ``v == label``.
        written_only: additionally drop never-written (all-zero key) slots.

    Raises:
        EmptyCandidateSetError: when the candidate filter leaves nothing.
    """
    q = _check_query(state, q)
    logits = _log_joint(state, q)
    mask = None
    if conditional_label is not None:
        mask = state.values == conditional_label
    if written_only:
        mask = state.written() if mask is None else mask & state.written()
    if mask is not None:
        candidates = np.flatnonzero(mask)
        if candidates.size == 0:
            raise EmptyCandidateSetError(
                f"no slot with label {conditional_label} to select from")
        order = _descending(logits[candidates], state.k)
        idx = candidates[order]
    else:
        idx = _descending(logits, state.k)
    chosen = logits[idx]
    return SlotSelection(idx, np.exp(chosen), _softmax(chosen))


def discriminative_prob(state: MemoryState, q) -> float:
    """p(y=1 | x) marginalised over the top-k slots, clipped to [eps, 1 - eps]."""
    sel = top_k_slots(state, q)
    p = float(np.dot(sel.weights, state.values[sel.indices]))
    eps = state.params.epsilon
    return min(max(p, eps), 1.0 - eps)


class BatchDiscrimination(NamedTuple):
    probs: np.ndarray  # (B,) clipped
    raw: np.ndarray  # (B,) before clipping
    grad_q: np.ndarray  # (B, M) d probs / d q, zero where clipping is active


def discriminate_batch(state: MemoryState, queries: np.ndarray,
                       with_grad: bool = True) -> BatchDiscrimination:
    """Vectorised :func:`discriminative_prob` with the gradient w.r.t. each query.

    The top-k set is held fixed for differentiation (the selection is piecewise
    constant in q). With weights w_i over S and D = sum_i w_i v_i,
    dD/dq = kappa * sum_i w_i (v_i - D) K_i.
    """
    queries = np.ascontiguousarray(_check_query(state, queries))
    p = state.params
    raw, grad = _kernels.discriminate(state.keys, state.values, state.histogram, queries,
                                      p.kappa, p.beta, state.k, with_grad)
    probs = np.clip(raw, p.epsilon, 1.0 - p.epsilon)
    if with_grad:
        grad[(raw <= p.epsilon) | (raw >= 1.0 - p.epsilon)] = 0.0
    return BatchDiscrimination(probs, raw, grad)


def sample_slot(state: MemoryState, rng: np.random.Generator, size: int | None = None):
    """Draw slot indices with P(c=i | v_c=1) = h_i v_i / sum_j h_j v_j."""
    mass = state.histogram * state.values
    total = mass.sum()
    if not total > 0:
        raise NoRealSlotsError("no real slot with positive histogram mass")
    return rng.choice(state.n_slots, size=size, p=mass / total)


def tick_ages(state: MemoryState, touched) -> np.ndarray:
    """Age every slot by one, then reset the touched slots to zero."""
    _kernels.tick_ages(state.ages, np.asarray(touched, dtype=np.int64).reshape(-1))
    return state.ages


def allocate_oldest(state: MemoryState, q, y: int) -> int:
    """Overwrite the oldest slot with the query. Returns the slot index.

    The slot gets K = q, v = y, a = 0 and h = mean(h); ties in age go to the
    lowest index.
    """
    q = _check_query(state, q)
    return int(_kernels.allocate_oldest(state.keys, state.values, state.ages, state.histogram,
                                        q, np.int8(y)))


def em_update(state: MemoryState, selection: SlotSelection | np.ndarray, q,
              iters: int | None = None) -> None:
    """Incremental EM write of query ``q`` into the selected slots.

    Statistics start from (K, alpha * h). Each iteration computes
    responsibilities over the selection from the current estimates, shifts each
    histogram by the change in responsibility, moves each key toward q by that
    change over the new histogram, and projects the key back onto the unit
    sphere. The final estimates are committed.
    """
    q = _check_query(state, q)
    idx = selection.indices if isinstance(selection, SlotSelection) else selection
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size == 0:
        raise EmptyCandidateSetError("EM needs at least one selected slot")
    p = state.params
    iters = p.em_iters if iters is None else iters
    if not _kernels.em_update(state.keys, state.histogram, idx, q, p.kappa, p.beta, p.alpha, iters):
        raise DegenerateHistogramError("non-positive histogram during EM")


def write(state: MemoryState, q, y: int, use_em: bool = True) -> bool:
    """Write a labelled query into the memory in place. Returns True if a slot was allocated.

    When the k nearest slots hold no written slot labelled ``y``, the oldest
    slot is overwritten with the query. Otherwise incremental EM runs on S_y,
    the top-k written slots carrying label ``y`` (``use_em=False`` swaps EM for
    the normalised-sum update of the single best slot). Ages tick afterwards,
    with the written slots reset to zero.
    """
    q = _check_query(state, q)
    return bool(write_batch(state, q[None, :], np.array([y]), use_em))


def write_batch(state: MemoryState, queries: np.ndarray, labels, use_em: bool = True) -> int:
    """Sequential :func:`write` over rows of ``queries``. Returns the allocation count."""
    queries = np.ascontiguousarray(_check_query(state, queries))
    labels = np.asarray(labels, dtype=np.int8)
    p = state.params
    n_alloc = _kernels.write_batch(state.keys, state.values, state.ages, state.histogram,
                                   queries, labels, p.kappa, p.beta, p.alpha, state.k,
                                   p.em_iters, _RULES[p.allocation], use_em)
    if n_alloc < 0:
        raise DegenerateHistogramError("non-positive histogram during EM")
    return int(n_alloc)


def write_minibatch(state: MemoryState, queries: np.ndarray, labels) -> int:
    """EM writes of a whole minibatch with a single decay of each touched slot.

    Slot selection and allocation proceed query by query; the EM phase then
    decays every touched slot once and accumulates the responsibilities of all
    queries that selected it. For a single query this equals :func:`write`.
    Returns the allocation count.
    """
    queries = np.ascontiguousarray(_check_query(state, queries))
    labels = np.asarray(labels, dtype=np.int8)
    p = state.params
    n_alloc = _kernels.write_minibatch(state.keys, state.values, state.ages, state.histogram,
                                       queries, labels, p.kappa, p.beta, p.alpha, state.k,
                                       p.em_iters, _RULES[p.allocation])
    if n_alloc < 0:
        raise DegenerateHistogramError("non-positive histogram during EM")
    return int(n_alloc)


def biased_loglik_real(state: MemoryState, q) -> float:
    """log p~(x | y=1): real-slot likelihood over the top-k set, C(kappa) dropped."""
    return float(biased_loglik_real_batch(state, np.asarray(q, dtype=np.float64)[None, :])[0])


def biased_loglik_real_batch(state: MemoryState, queries: np.ndarray) -> np.ndarray:
    queries = _check_query(state, queries)
    real = state.values == 1
    if not real.any():
        raise NoRealSlotsError("biased log-likelihood needs at least one real slot")
    prior = slot_prior(state)
    logits = _log_joint(state, queries)
    order = np.argsort(-logits, axis=1, kind="stable")[:, :state.k]
    cos = np.take_along_axis(queries @ state.keys.T, order, axis=1)
    contrib = np.exp(state.params.kappa * cos) * prior[order] * real[order]
    with np.errstate(divide="ignore"):
        return np.log(contrib.sum(axis=1) / prior[real].sum())


def save_memory(state: MemoryState, path_or_file) -> None:
    """Serialise to a numpy .npz archive carrying N, M, params and the four arrays."""
    np.savez(path_or_file, **memory_to_arrays(state))


def memory_from_arrays(arrays, prefix: str = "") -> MemoryState:
    params = MemoryParams(**json.loads(str(arrays[prefix + "params"])))
    state = MemoryState(
        keys=np.array(arrays[prefix + "keys"], dtype=np.float64),
        values=np.array(arrays[prefix + "values"], dtype=np.int8),
        ages=np.array(arrays[prefix + "ages"], dtype=np.int64),
        histogram=np.array(arrays[prefix + "histogram"], dtype=np.float64),
        params=params,
    )
    n, m = int(arrays[prefix + "n_slots"]), int(arrays[prefix + "key_dim"])
    if state.keys.shape != (n, m):
        raise DimensionMismatchError(f"snapshot declares {n}x{m} but keys are {state.keys.shape}")
    return state


def memory_to_arrays(state: MemoryState, prefix: str = "") -> dict:
    return {
        prefix + "n_slots": np.int64(state.n_slots),
        prefix + "key_dim": np.int64(state.key_dim),
        prefix + "params": np.array(json.dumps(asdict(state.params), sort_keys=True)),
        prefix + "keys": state.keys,
        prefix + "values": state.values,
        prefix + "ages": state.ages,
        prefix + "histogram": state.histogram,
    }


def load_memory(path_or_file) -> MemoryState:
    with np.load(path_or_file, allow_pickle=False) as data:
        return memory_from_arrays(data)
