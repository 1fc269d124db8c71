"""Compiled inner loops for memory writes.

A training iteration writes every real and fake query of the minibatch one at
a time; in plain numpy the per-call overhead on arrays this small dominates.
"""

import numpy as np
from numba import njit

RULE_NEIGHBOURHOOD = 0
RULE_CONDITIONAL = 1
RULE_NEAREST = 2


@njit(cache=True)
def log_joint(keys, log_h, q, kappa):
    return kappa * (keys @ q) + log_h


@njit(cache=True)
def written_mask(keys):
    n, m = keys.shape
    out = np.zeros(n, dtype=np.bool_)
    for i in range(n):
        for j in range(m):
            if keys[i, j] != 0.0:
                out[i] = True
                break
    return out


@njit(cache=True)
def em_update(keys, hist, idx, q, kappa, beta, alpha, iters):
    s = idx.shape[0]
    m = keys.shape[1]
    kh = np.empty((s, m))
    hh = np.empty(s)
    for a in range(s):
        kh[a] = keys[idx[a]]
        hh[a] = alpha * hist[idx[a]]
    gamma_prev = np.zeros(s)
    gamma = np.empty(s)
    for _ in range(iters):
        logit = kappa * (kh @ q) + np.log(hh + beta)
        top = logit.max()
        total = 0.0
        for a in range(s):
            gamma[a] = np.exp(logit[a] - top)
            total += gamma[a]
        for a in range(s):
            gamma[a] /= total
            delta = gamma[a] - gamma_prev[a]
            hh[a] += delta
            if hh[a] <= 0.0:
                return False
            rate = delta / hh[a]
            norm = 0.0
            for j in range(m):
                kh[a, j] += rate * (q[j] - kh[a, j])
                norm += kh[a, j] * kh[a, j]
            norm = np.sqrt(norm)
            if norm < 1e-12:
                # exact antipodal cancellation
                kh[a] = q
            else:
                for j in range(m):
                    kh[a, j] /= norm
            gamma_prev[a] = gamma[a]
    for a in range(s):
        keys[idx[a]] = kh[a]
        hist[idx[a]] = hh[a]
    return True


@njit(cache=True)
def allocate_oldest(keys, values, ages, hist, q, y):
    n = np.argmax(ages)
    mean_h = hist.mean()
    keys[n] = q
    values[n] = y
    ages[n] = 0
    hist[n] = mean_h
    return n


@njit(cache=True)
def tick_ages(ages, touched):
    ages += 1
    for i in touched:
        ages[i] = 0


@njit(cache=True)
def running_average(keys, best, q):
    m = keys.shape[1]
    norm = 0.0
    for j in range(m):
        keys[best, j] += q[j]
        norm += keys[best, j] * keys[best, j]
    norm = np.sqrt(norm)
    if norm < 1e-12:
        keys[best] = q
    else:
        for j in range(m):
            keys[best, j] /= norm


@njit(cache=True)
def write_cached(keys, values, ages, hist, log_h, written, q, y, kappa, beta, alpha, k, iters,
                 rule, use_em):
    """:func:`write` that keeps ``log(h + beta)`` and the written mask current for the next call."""
    sel = select_for_write(keys, values, log_h, written, q, y, kappa, k, rule)
    if sel.shape[0] == 0:
        slot = allocate_oldest(keys, values, ages, hist, q, y)
        log_h[slot] = np.log(hist[slot] + beta)
        written[slot] = True
        tick_ages(ages, np.array([slot]))
        return 1
    if use_em:
        if not em_update(keys, hist, sel, q, kappa, beta, alpha, iters):
            return -1
        for i in sel:
            log_h[i] = np.log(hist[i] + beta)
            written[i] = np.any(keys[i] != 0.0)
        tick_ages(ages, sel)
    else:
        running_average(keys, sel[0], q)
        written[sel[0]] = np.any(keys[sel[0]] != 0.0)
        tick_ages(ages, sel[:1])
    return 0


@njit(cache=True)
def write(keys, values, ages, hist, q, y, kappa, beta, alpha, k, iters, rule, use_em):
    """One labelled write. Returns 1 when a slot was allocated, 0 on the update path,
    -1 if EM hit a non-positive histogram."""
    return write_cached(keys, values, ages, hist, np.log(hist + beta), written_mask(keys), q, y,
                        kappa, beta, alpha, k, iters, rule, use_em)


@njit(cache=True)
def write_batch(keys, values, ages, hist, queries, labels, kappa, beta, alpha, k, iters, rule,
                use_em):
    log_h = np.log(hist + beta)
    written = written_mask(keys)
    allocated = 0
    for b in range(queries.shape[0]):
        r = write_cached(keys, values, ages, hist, log_h, written, queries[b], labels[b], kappa,
                         beta, alpha, k, iters, rule, use_em)
        if r < 0:
            return -1
        allocated += r
    return allocated


@njit(cache=True)
def top_masked(scores, mask, k):
    """Indices of the ``k`` best masked scores, best first; ties keep the lower index.

    Matches a stable descending sort restricted to ``mask`` without sorting
    the whole array.
    """
    out = np.empty(k, dtype=np.int64)
    count = 0
    for i in range(scores.shape[0]):
        if not mask[i]:
            continue
        s = scores[i]
        if count < k:
            pos = count
            count += 1
        elif s > scores[out[k - 1]]:
            pos = k - 1
        else:
            continue
        while pos > 0 and scores[out[pos - 1]] < s:
            out[pos] = out[pos - 1]
            pos -= 1
        out[pos] = i
    return out[:count]


@njit(cache=True)
def stable_rank(scores, i):
    """Position of slot ``i`` in the stable descending order of ``scores``."""
    s = scores[i]
    rank = 0
    for j in range(scores.shape[0]):
        if scores[j] > s or (scores[j] == s and j < i):
            rank += 1
    return rank


@njit(cache=True)
def select_for_write(keys, values, log_h, written, q, y, kappa, k, rule):
    """Slots an EM write would update, or an empty array when the query must allocate.

    Neighbourhood rule: the first k written slots labelled ``y`` in descending
    log-joint order, provided the best of them ranks within the top k overall
    (top 1 for the nearest rule). Conditional rule: the top k slots labelled
    ``y``, provided at least one of them is written.
    """
    scores = log_joint(keys, log_h, q, kappa)
    if rule == RULE_CONDITIONAL:
        sel = top_masked(scores, values == y, k)
        for i in sel:
            if written[i]:
                return sel
        return sel[:0]
    sel = top_masked(scores, written & (values == y), k)
    kk = 1 if rule == RULE_NEAREST else k
    if sel.shape[0] == 0 or stable_rank(scores, sel[0]) >= kk:
        return sel[:0]
    return sel


@njit(cache=True)
def write_minibatch(keys, values, ages, hist, queries, labels, kappa, beta, alpha, k, iters, rule):
    """Minibatch form of the EM write: one decay per touched slot, then joint EM.

    Selection and allocation run query by query on the evolving memory (ages
    tick exactly as for sequential writes). The EM phase then starts every
    touched slot from ``alpha * h`` and accumulates responsibility deltas of all
    queries that selected it. With one query this is exactly :func:`write`.
    Returns the allocation count, or -1 on a degenerate histogram.
    """
    b_count, m = queries.shape
    n = keys.shape[0]
    sel = -np.ones((b_count, k), dtype=np.int64)
    overwritten_at = -np.ones(n, dtype=np.int64)
    allocated = 0
    written = written_mask(keys)
    log_h = np.log(hist + beta)
    for b in range(b_count):
        s = select_for_write(keys, values, log_h, written, queries[b], labels[b], kappa, k, rule)
        if s.shape[0] == 0:
            slot = allocate_oldest(keys, values, ages, hist, queries[b], labels[b])
            log_h[slot] = np.log(hist[slot] + beta)
            written[slot] = True
            overwritten_at[slot] = b
            tick_ages(ages, np.array([slot]))
            allocated += 1
        else:
            sel[b, :s.shape[0]] = s
            tick_ages(ages, s)
    # an allocation later in the batch invalidates earlier selections of that slot
    for b in range(b_count):
        for j in range(k):
            i = sel[b, j]
            if i >= 0 and overwritten_at[i] > b:
                sel[b, j] = -1
    local = -np.ones(n, dtype=np.int64)
    touched = 0
    for b in range(b_count):
        for j in range(k):
            i = sel[b, j]
            if i >= 0 and local[i] < 0:
                local[i] = touched
                touched += 1
    if touched == 0:
        return allocated
    slots = np.empty(touched, dtype=np.int64)
    for i in range(n):
        if local[i] >= 0:
            slots[local[i]] = i
    kh = np.empty((touched, m))
    hh = np.empty(touched)
    for a in range(touched):
        kh[a] = keys[slots[a]]
        hh[a] = alpha * hist[slots[a]]
    gamma_prev = np.zeros((b_count, k))
    gamma = np.zeros((b_count, k))
    dh = np.empty(touched)
    dq = np.empty((touched, m))
    logit = np.empty(k)
    log_h = np.empty(touched)
    for _ in range(iters):
        for a in range(touched):
            log_h[a] = np.log(hh[a] + beta)
        # E-step for every query against the previous iterate
        for b in range(b_count):
            top = -np.inf
            for j in range(k):
                i = sel[b, j]
                if i >= 0:
                    a = local[i]
                    dot = 0.0
                    for d in range(m):
                        dot += kh[a, d] * queries[b, d]
                    logit[j] = kappa * dot + log_h[a]
                    if logit[j] > top:
                        top = logit[j]
            total = 0.0
            for j in range(k):
                if sel[b, j] >= 0:
                    gamma[b, j] = np.exp(logit[j] - top)
                    total += gamma[b, j]
            for j in range(k):
                if sel[b, j] >= 0:
                    gamma[b, j] /= total
        # M-step with the accumulated deltas
        dh[:] = 0.0
        dq[:] = 0.0
        for b in range(b_count):
            for j in range(k):
                i = sel[b, j]
                if i >= 0:
                    a = local[i]
                    delta = gamma[b, j] - gamma_prev[b, j]
                    dh[a] += delta
                    for d in range(m):
                        dq[a, d] += delta * queries[b, d]
                    gamma_prev[b, j] = gamma[b, j]
        for a in range(touched):
            hh[a] += dh[a]
            if hh[a] <= 0.0:
                return -1
            norm = 0.0
            for d in range(m):
                kh[a, d] += (dq[a, d] - dh[a] * kh[a, d]) / hh[a]
                norm += kh[a, d] * kh[a, d]
            norm = np.sqrt(norm)
            if norm < 1e-12:
                # exact cancellation; fall back to the last contributing query
                for b in range(b_count - 1, -1, -1):
                    hit = False
                    for j in range(k):
                        if sel[b, j] == slots[a]:
                            hit = True
                    if hit:
                        kh[a] = queries[b]
                        break
            else:
                for d in range(m):
                    kh[a, d] /= norm
    for a in range(touched):
        keys[slots[a]] = kh[a]
        hist[slots[a]] = hh[a]
    return allocated


@njit(cache=True)
def discriminate(keys, values, hist, queries, kappa, beta, k, with_grad):
    """Unclipped top-k probability of the real label per query, and its gradient.

    The gradient holds the top-k set fixed: kappa * sum_i w_i (v_i - D) K_i.
    """
    b_count, m = queries.shape
    n = keys.shape[0]
    log_h = np.log(hist + beta)
    dots = queries @ keys.T
    raw = np.empty(b_count)
    grad = np.zeros((b_count, m))
    best_s = np.empty(k)
    best_i = np.empty(k, dtype=np.int64)
    for b in range(b_count):
        # insertion into a sorted buffer; ties keep the lower index
        count = 0
        for i in range(n):
            s = kappa * dots[b, i] + log_h[i]
            if count < k:
                pos = count
                count += 1
            elif s > best_s[k - 1]:
                pos = k - 1
            else:
                continue
            while pos > 0 and best_s[pos - 1] < s:
                best_s[pos] = best_s[pos - 1]
                best_i[pos] = best_i[pos - 1]
                pos -= 1
            best_s[pos] = s
            best_i[pos] = i
        top = best_s[0]
        total = 0.0
        prob = 0.0
        for j in range(count):
            best_s[j] = np.exp(best_s[j] - top)
            total += best_s[j]
            prob += best_s[j] * values[best_i[j]]
        prob /= total
        raw[b] = prob
        if with_grad:
            for j in range(count):
                c = kappa * best_s[j] / total * (values[best_i[j]] - prob)
                row = keys[best_i[j]]
                for d in range(m):
                    grad[b, d] += c * row[d]
    return raw, grad
