"""Slow, obviously-correct reference implementations used as test oracles."""

import math


def cosine(col_a, col_b):
    dot = sum(a * b for a, b in zip(col_a, col_b))
    na = math.sqrt(sum(a * a for a in col_a))
    nb = math.sqrt(sum(b * b for b in col_b))
    if na == 0 or nb == 0:
        return 0.0
    return dot / (na * nb)


def click_prob(rows, user_row, m, k_neighbors=None):
    """p[k, m] by direct summation over items b, optionally over the k most similar."""
    M = len(rows[0]) if rows else 0
    cols = [[r[j] for r in rows] for j in range(M)]
    sims = [cosine(cols[m], cols[b]) for b in range(M)]
    neighbors = list(range(M))
    if k_neighbors is not None and k_neighbors < M:
        neighbors = sorted(range(M), key=lambda b: (-sims[b], b))[:k_neighbors]
    num = sum(sims[b] * rows[user_row][b] for b in neighbors)
    den = sum(abs(sims[b]) for b in neighbors)
    return num / den if den > 0 else 0.0


def candidates(rows, item_ids, user_row, q=None, p_candidate=None, k_neighbors=None):
    """Candidate item ids by exhaustive scoring; ties by ascending id."""
    scored = [(click_prob(rows, user_row, m, k_neighbors), item_ids[m]) for m in range(len(item_ids))]
    scored.sort(key=lambda s: (-round(s[0], 12), s[1]))
    if p_candidate is not None:
        return [i for p, i in scored if p > p_candidate]
    return [i for _, i in scored[: math.ceil(q * len(item_ids) - 1e-9)]]


def agp(s_i, s_f, t0, delta_t, n, t):
    frac = 1.0 - (t - t0) / (n * delta_t)
    return s_f + (s_i - s_f) * frac**3


def prune_mask(values, target):
    """Keep-mask after zeroing the ceil(target * n) smallest magnitudes, ties by index."""
    n = len(values)
    want = math.ceil(target * n - 1e-9)
    order = sorted(range(n), key=lambda i: (abs(values[i]), i))
    mask = [True] * n
    for i in order[:want]:
        mask[i] = False
    return mask
