import io
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from memgan import memory as mem
from memgan.errors import (
    DimensionMismatchError,
    EmptyCandidateSetError,
    InvalidDimensionError,
    NoRealSlotsError,
)
from memgan.memory import MemoryParams

from helpers import exhaustive_marginal, make_state, random_state, unit

E = math.e


# --- initialisation -------------------------------------------------------

def test_init_histogram_is_small_constant():
    state = mem.init_memory(4096, 256, seed=3)
    assert np.all(state.histogram == 1e-5)


def test_init_zero_keys_and_ages():
    state = mem.init_memory(2, 3, seed=0)
    assert np.array_equal(state.keys, np.zeros((2, 3)))
    assert np.array_equal(state.ages, [0, 0])


def test_init_values_deterministic_under_seed():
    a = mem.init_memory(8, 4, seed=11)
    b = mem.init_memory(8, 4, seed=11)
    assert np.array_equal(a.values, b.values)
    assert set(np.unique(mem.init_memory(256, 2, seed=1).values)) == {0, 1}


@pytest.mark.parametrize("n, m", [(0, 4), (4, 0)])
def test_init_rejects_empty_dimensions(n, m):
    with pytest.raises(InvalidDimensionError):
        mem.init_memory(n, m)


@pytest.mark.parametrize("field, value", [
    ("kappa", 0.0), ("beta", 0.0), ("epsilon", 0.5), ("alpha", 0.0), ("alpha", 1.5),
    ("top_k", 0), ("em_iters", 0),
])
def test_params_validation(field, value):
    with pytest.raises(ValueError):
        MemoryParams(**{field: value})


# --- prior and posterior --------------------------------------------------

def test_slot_prior_uniform():
    state = mem.init_memory(4, 2)
    assert np.allclose(mem.slot_prior(state), 0.25)


def test_slot_prior_normalises_histogram():
    state = make_state([[1, 0], [0, 1]], [1, 0], [1.0, 3.0])
    assert np.allclose(mem.slot_prior(state), [0.25, 0.75], atol=1e-8)


def test_slot_prior_smoothing_only():
    state = make_state([[1, 0], [0, 1]], [1, 0], [0.0, 0.0])
    assert np.allclose(mem.slot_prior(state), [0.5, 0.5])


def test_posterior_two_slots():
    state = make_state([[1, 0], [0, 1]], [1, 0], [1.0, 1.0])
    post = mem.posterior_exact(state, [1.0, 0.0])
    assert np.allclose(post, [E / (E + 1), 1 / (E + 1)], atol=1e-12)
    assert np.allclose(post, [0.7311, 0.2689], atol=1e-4)


def test_posterior_equidistant_query():
    state = make_state([[1, 0], [0, 1]], [1, 0], [2.0, 2.0])
    assert np.allclose(mem.posterior_exact(state, unit([1, 1])), [0.5, 0.5])


def test_posterior_prior_weighted():
    state = make_state(np.eye(3), [1, 0, 0], [1.0, 1.0, 8.0])
    post = mem.posterior_exact(state, [1.0, 0.0, 0.0])
    z = E + 1 + 8
    assert np.allclose(post, [E / z, 1 / z, 8 / z], atol=1e-9)
    assert np.allclose(post, [0.2320, 0.0853, 0.6826], atol=1e-4)


def test_posterior_dimension_mismatch():
    state = make_state(np.eye(3), [1, 0, 0], [1.0, 1.0, 1.0])
    with pytest.raises(DimensionMismatchError):
        mem.posterior_exact(state, [1.0, 0.0])


# --- top-k ----------------------------------------------------------------

def test_top_k_prior_dominates():
    state = make_state(np.eye(3), [1, 0, 0], [1.0, 1.0, 8.0], top_k=2)
    sel = mem.top_k_slots(state, [1.0, 0.0, 0.0])
    assert sel.indices.tolist() == [2, 0]  # slots 3 and 1, zero-based
    assert np.allclose(sel.scores, [8.0, E])


def test_top_k_full_matches_posterior():
    rng = np.random.default_rng(0)
    state = random_state(rng, 9, 4, top_k=9)
    q = unit(rng.standard_normal(4))
    sel = mem.top_k_slots(state, q)
    assert sorted(sel.indices.tolist()) == list(range(9))
    assert np.allclose(sel.weights, mem.posterior_exact(state, q)[sel.indices], atol=1e-12)


def test_top_k_conditional_filters_labels():
    state = make_state(np.eye(3), [1, 0, 0], [1.0, 1.0, 8.0], top_k=2)
    sel = mem.top_k_slots(state, [1.0, 0.0, 0.0], conditional_label=1)
    assert sel.indices.tolist() == [0]


def test_top_k_conditional_empty_candidates():
    state = make_state(np.eye(2), [0, 0], [1.0, 1.0])
    with pytest.raises(EmptyCandidateSetError):
        mem.top_k_slots(state, [1.0, 0.0], conditional_label=1)


def test_top_k_ties_prefer_lower_index():
    state = mem.init_memory(6, 3, MemoryParams(top_k=3))
    sel = mem.top_k_slots(state, unit([1, 2, 3]))
    assert sel.indices.tolist() == [0, 1, 2]


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(1, 40), m=st.integers(1, 8),
       k=st.integers(1, 40))
def test_selection_invariants(seed, n, m, k):
    rng = np.random.default_rng(seed)
    state = random_state(rng, n, m, written_frac=0.8, top_k=k)
    sel = mem.top_k_slots(state, unit(rng.standard_normal(m)))
    assert len(sel.indices) == min(k, n)
    assert len(set(sel.indices.tolist())) == len(sel.indices)
    assert np.all(np.diff(sel.scores) <= 0)
    assert abs(sel.weights.sum() - 1.0) < 1e-9


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10_000), scale=st.floats(1e-3, 1e3))
def test_selection_scale_invariance(seed, scale):
    rng = np.random.default_rng(seed)
    state = random_state(rng, 12, 3, top_k=5, beta=1e-16)
    state.histogram += 0.1  # keep beta negligible
    scaled = state.copy()
    scaled.histogram *= scale
    q = unit(rng.standard_normal(3))
    assert np.array_equal(mem.top_k_slots(state, q).indices, mem.top_k_slots(scaled, q).indices)
    assert np.allclose(mem.posterior_exact(state, q), mem.posterior_exact(scaled, q), atol=1e-9)


# --- discrimination -------------------------------------------------------

def test_discriminative_prob_two_slots():
    state = make_state([[1, 0], [0, 1]], [1, 0], [1.0, 1.0], top_k=2)
    assert mem.discriminative_prob(state, [1.0, 0.0]) == pytest.approx(E / (E + 1), abs=1e-12)


def test_discriminative_prob_all_real_is_clipped():
    state = make_state([[1, 0], [0, 1]], [1, 1], [1.0, 1.0])
    assert mem.discriminative_prob(state, [1.0, 0.0]) == 0.999


def test_discriminative_prob_top_k_approximation():
    state = make_state(np.eye(3), [1, 0, 0], [1.0, 1.0, 8.0], top_k=2)
    p = mem.discriminative_prob(state, [1.0, 0.0, 0.0])
    assert p == pytest.approx(E / (8 + E), abs=1e-8)  # beta = 1e-8 shifts the ninth digit
    assert p == pytest.approx(0.2536, abs=1e-4)


@settings(max_examples=80, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(1, 30), m=st.integers(1, 6),
       kappa=st.floats(0.1, 10.0))
def test_full_top_k_equals_marginal(seed, n, m, kappa):
    rng = np.random.default_rng(seed)
    state = random_state(rng, n, m, top_k=n, kappa=kappa)
    q = unit(rng.standard_normal(m))
    raw = mem.discriminate_batch(state, q[None, :], with_grad=False).raw[0]
    ref = exhaustive_marginal(state.keys, state.values, state.histogram, q, kappa, state.params.beta)
    assert abs(raw - ref) < 1e-9


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10_000), kappa=st.floats(0.1, 50.0))
def test_discriminative_prob_within_clip(seed, kappa):
    rng = np.random.default_rng(seed)
    state = random_state(rng, 16, 4, top_k=4, kappa=kappa)
    probs = mem.discriminate_batch(state, rng.standard_normal((8, 4)) / 2.0).probs
    assert np.all((probs >= 1e-3) & (probs <= 1 - 1e-3))


def test_batch_matches_scalar():
    rng = np.random.default_rng(5)
    state = random_state(rng, 20, 5, top_k=6)
    qs = rng.standard_normal((7, 5))
    qs /= np.linalg.norm(qs, axis=1, keepdims=True)
    batch = mem.discriminate_batch(state, qs).probs
    assert np.allclose(batch, [mem.discriminative_prob(state, q) for q in qs], atol=1e-15)


def test_discrimination_gradient_matches_differences():
    rng = np.random.default_rng(2)
    state = random_state(rng, 10, 4, top_k=10, kappa=2.0)
    q = rng.standard_normal(4)  # unnormalised on purpose: D is a function of any vector
    grad = mem.discriminate_batch(state, q[None, :]).grad_q[0]
    h = 1e-6
    num = np.array([
        (mem.discriminate_batch(state, (q + h * e)[None, :]).raw[0]
         - mem.discriminate_batch(state, (q - h * e)[None, :]).raw[0]) / (2 * h)
        for e in np.eye(4)])
    assert np.allclose(grad, num, atol=1e-8)


# --- sampling -------------------------------------------------------------

def test_sample_slot_distribution():
    state = make_state(np.eye(3), [1, 1, 0], [2.0, 2.0, 4.0])
    draws = mem.sample_slot(state, np.random.default_rng(0), size=40_000)
    freq = np.bincount(draws, minlength=3) / len(draws)
    assert np.allclose(freq, [0.5, 0.5, 0.0], atol=0.01)
    assert freq[2] == 0.0


def test_sample_slot_single_admissible():
    state = make_state(np.eye(3), [0, 1, 0], [3.0, 0.2, 9.0])
    assert np.all(mem.sample_slot(state, np.random.default_rng(1), size=200) == 1)


def test_sample_slot_no_real():
    state = make_state(np.eye(2), [0, 0], [1.0, 1.0])
    with pytest.raises(NoRealSlotsError):
        mem.sample_slot(state, np.random.default_rng(0))


def test_sample_slot_deterministic():
    state = make_state(np.eye(4), [1, 1, 0, 1], [1.0, 2.0, 3.0, 4.0])
    a = mem.sample_slot(state, np.random.default_rng(9), size=50)
    b = mem.sample_slot(state, np.random.default_rng(9), size=50)
    assert np.array_equal(a, b)


# --- EM, allocation, ages ---------------------------------------------------

def test_em_single_slot_hand_check():
    state = make_state([[1.0, 0.0]], [1], [2.0], alpha=0.5)
    mem.em_update(state, np.array([0]), [0.0, 1.0], iters=1)
    s = 1 / math.sqrt(2)
    assert np.allclose(state.keys[0], [s, s], atol=1e-12)
    assert state.histogram[0] == 2.0


def test_em_second_iteration_is_stationary():
    one = make_state([[1.0, 0.0]], [1], [2.0])
    two = make_state([[1.0, 0.0]], [1], [2.0])
    mem.em_update(one, np.array([0]), [0.0, 1.0], iters=1)
    mem.em_update(two, np.array([0]), [0.0, 1.0], iters=2)
    # only renormalisation round-off may differ
    assert np.allclose(one.keys, two.keys, rtol=0, atol=1e-15)
    assert one.histogram[0] == two.histogram[0] == 2.0


def test_em_fixed_point():
    state = make_state([[0.6, 0.8]], [0], [3.0])
    mem.em_update(state, np.array([0]), [0.6, 0.8])
    assert np.allclose(state.keys[0], [0.6, 0.8], atol=1e-15)
    assert state.histogram[0] == pytest.approx(0.5 * 3.0 + 1.0)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10_000), h=st.floats(1e-3, 100.0), alpha=st.floats(0.01, 1.0))
def test_em_single_slot_contraction(seed, h, alpha):
    rng = np.random.default_rng(seed)
    key, q = unit(rng.standard_normal(3)), unit(rng.standard_normal(3))
    state = make_state([key], [1], [h], alpha=alpha)
    mem.em_update(state, np.array([0]), q, iters=1)
    assert np.dot(state.keys[0], q) > np.dot(key, q)


def test_allocate_oldest_hand_check():
    state = make_state(np.eye(3), [0, 0, 0], [1.0, 2.0, 6.0], ages=[5, 1, 9])
    q = unit([1, 1, 1])
    slot = mem.allocate_oldest(state, q, 1)
    assert slot == 2
    assert np.array_equal(state.keys[2], q)
    assert state.values[2] == 1 and state.ages[2] == 0 and state.histogram[2] == 3.0


def test_allocate_tie_prefers_lower_index():
    state = make_state(np.eye(2), [0, 0], [1.0, 3.0], ages=[2, 2])
    assert mem.allocate_oldest(state, [0.0, 1.0], 1) == 0
    assert state.histogram[0] == 2.0


def test_tick_ages_examples():
    state = mem.init_memory(2, 2)
    assert mem.tick_ages(state, [0]).tolist() == [0, 1]
    assert mem.tick_ages(state, [0, 1]).tolist() == [0, 0]
    assert mem.tick_ages(state, []).tolist() == [1, 1]


def test_write_fresh_memory_allocates():
    state = mem.init_memory(8, 3, seed=4)
    q = unit([1, -2, 0.5])
    assert mem.write(state, q, 1)
    slot = int(np.flatnonzero(state.written())[0])
    assert np.array_equal(state.keys[slot], q)
    assert state.values[slot] == 1 and state.ages[slot] == 0
    assert state.histogram[slot] == pytest.approx(1e-5)


def test_write_update_path_leaves_values():
    state = make_state([[1.0, 0.0], [0.0, 1.0]], [1, 0], [1.0, 1.0], top_k=2)
    before = state.values.copy()
    assert not mem.write(state, unit([1, 0.2]), 1)
    assert np.array_equal(state.values, before)
    assert np.array_equal(state.keys[1], [0.0, 1.0])
    assert state.keys[0, 1] > 0


def test_write_update_moves_key_toward_query():
    state = make_state([[1.0, 0.0], [0.0, 1.0]], [1, 0], [2.0, 1.0], top_k=1)
    q = unit([1, 1])
    before = float(state.keys[0] @ q)
    mem.write(state, q, 1)
    assert float(state.keys[0] @ q) > before


def check_invariants(state):
    norms = np.linalg.norm(state.keys, axis=1)
    assert np.all((norms == 0.0) | (np.abs(norms - 1.0) < 1e-9))
    assert np.all(state.histogram >= 0)
    assert set(np.unique(state.values)) <= {0, 1}
    assert np.all(state.ages >= 0)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), rule=st.sampled_from(sorted(mem._RULES)),
       use_em=st.booleans())
def test_write_preserves_invariants(seed, rule, use_em):
    rng = np.random.default_rng(seed)
    state = mem.init_memory(10, 3, MemoryParams(top_k=3, allocation=rule), seed)
    for _ in range(60):
        mem.write(state, unit(rng.standard_normal(3)), int(rng.integers(0, 2)), use_em=use_em)
        check_invariants(state)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), rule=st.sampled_from(sorted(mem._RULES)), use_em=st.booleans())
def test_write_batch_equals_sequential_writes(seed, rule, use_em):
    rng = np.random.default_rng(seed)
    a = mem.init_memory(12, 3, MemoryParams(top_k=3, allocation=rule), seed)
    b = a.copy()
    qs = np.stack([unit(rng.standard_normal(3)) for _ in range(20)])
    ys = rng.integers(0, 2, 20)
    n_alloc = mem.write_batch(a, qs, ys, use_em=use_em)
    assert n_alloc == sum(mem.write(b, q, int(y), use_em=use_em) for q, y in zip(qs, ys))
    for x, y in zip((a.keys, a.values, a.ages, a.histogram), (b.keys, b.values, b.ages, b.histogram)):
        assert np.array_equal(x, y)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), rule=st.sampled_from(sorted(mem._RULES)))
def test_minibatch_write_of_one_equals_write(seed, rule):
    rng = np.random.default_rng(seed)
    a = mem.init_memory(12, 4, MemoryParams(top_k=4, allocation=rule), seed)
    for _ in range(30):
        q, y = unit(rng.standard_normal(4)), int(rng.integers(0, 2))
        b = a.copy()
        mem.write(a, q, y)
        mem.write_minibatch(b, q[None, :], [y])
        assert np.allclose(a.keys, b.keys, atol=1e-14)
        assert np.allclose(a.histogram, b.histogram, atol=1e-14)
        assert np.array_equal(a.ages, b.ages) and np.array_equal(a.values, b.values)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_minibatch_write_preserves_invariants(seed):
    rng = np.random.default_rng(seed)
    state = mem.init_memory(16, 3, MemoryParams(top_k=4), seed)
    for _ in range(10):
        qs = rng.standard_normal((12, 3))
        qs /= np.linalg.norm(qs, axis=1, keepdims=True)
        mem.write_minibatch(state, qs, rng.integers(0, 2, 12))
        check_invariants(state)


def test_minibatch_decays_each_slot_once():
    state = make_state([[1.0, 0.0]], [1], [4.0], top_k=1)
    q = unit([1, 0.1])
    mem.write_minibatch(state, np.stack([q, q, q]), [1, 1, 1])
    # one decay, then three unit responsibilities
    assert state.histogram[0] == pytest.approx(0.5 * 4.0 + 3.0)


# --- biased log-likelihood ---------------------------------------------------

def test_biased_loglik_self_match():
    q = unit([3, 4])
    state = make_state([q], [1], [1.0])
    assert mem.biased_loglik_real(state, q) == pytest.approx(1.0, abs=1e-12)


def test_biased_loglik_orthogonal():
    state = make_state([[1.0, 0.0]], [1], [1.0])
    assert mem.biased_loglik_real(state, [0.0, 1.0]) == pytest.approx(0.0, abs=1e-12)


def test_biased_loglik_ignores_fake_outside_top_k():
    q = unit([1, 0, 0])
    base = make_state([q], [1], [2.0], top_k=1)
    more = make_state([q, [0, 1, 0], [0, 0, 1]], [1, 0, 0], [2.0, 0.5, 0.5], top_k=1)
    assert mem.biased_loglik_real(more, q) == pytest.approx(mem.biased_loglik_real(base, q),
                                                             abs=1e-12)


def test_biased_loglik_no_real():
    state = make_state(np.eye(2), [0, 0], [1.0, 1.0])
    with pytest.raises(NoRealSlotsError):
        mem.biased_loglik_real(state, [1.0, 0.0])


# --- serialisation ----------------------------------------------------------

def test_snapshot_round_trip(tmp_path):
    rng = np.random.default_rng(8)
    state = random_state(rng, 33, 7, written_frac=0.7, kappa=2.5, top_k=5, allocation="conditional")
    path = tmp_path / "mem.npz"
    mem.save_memory(state, path)
    back = mem.load_memory(path)
    assert back.params == state.params
    for name in ("keys", "values", "ages", "histogram"):
        assert np.array_equal(getattr(back, name), getattr(state, name))
        assert getattr(back, name).dtype == getattr(state, name).dtype


def test_snapshot_round_trip_file_object():
    state = mem.init_memory(5, 2, seed=1)
    buf = io.BytesIO()
    mem.save_memory(state, buf)
    buf.seek(0)
    back = mem.load_memory(buf)
    assert np.array_equal(back.values, state.values)
