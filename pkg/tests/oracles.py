"""Independent reference implementations used as test oracles.

These deliberately avoid the package's vectorised code paths: plain loops,
``math`` scalars, and exhaustive enumeration.
"""

from __future__ import annotations

import math
from itertools import product


def dot(u, v) -> float:
    return math.fsum(a * b for a, b in zip(u, v))


def norm(u) -> float:
    return math.sqrt(dot(u, u))


def cosine(u, v) -> float:
    return dot(u, v) / (norm(u) * norm(v))


def cosine_scan_ranking(term_vectors, term_codes, query, k):
    """Exhaustive scan over stored unit rows: best score per code, ties by code ascending.

    Rows are taken as stored (already unit length), so a row's cosine with
    the query is its dot product with the normalised query.
    """
    qn = norm(query)
    q = [x / qn for x in query] if qn > 0 else [0.0] * len(query)
    best: dict[str, float] = {}
    for vec, code in zip(term_vectors, term_codes):
        s = dot(vec, q)
        if code not in best or s > best[code]:
            best[code] = s
    return [c for c, _ in sorted(best.items(), key=lambda cs: (-cs[1], cs[0]))][:k]


def fast_scan_ranking(rows, codes, queries, k):
    """Vectorised variant of ``cosine_scan_ranking`` for large acceptance runs.

    Identical rows are scored once so exact ties stay exact.
    """
    import numpy as np

    rows = np.asarray(rows, dtype=np.float64)
    uniq, inverse = np.unique(rows, axis=0, return_inverse=True)
    inverse = inverse.ravel()
    out = []
    for q in np.asarray(queries, dtype=np.float64):
        qn = np.sqrt(math.fsum(q * q))
        q = q / qn if qn > 0 else q * 0.0
        scores = (uniq @ q)[inverse]
        best: dict[str, float] = {}
        for s, c in zip(scores.tolist(), codes):
            if c not in best or s > best[c]:
                best[c] = s
        out.append([c for c, _ in sorted(best.items(), key=lambda cs: (-cs[1], cs[0]))][:k])
    return out


def enumerate_hard_triplets(S, groups, margin):
    """All (a, p, n) with same(a,p), a != p, diff(a,n), S[a][n] > S[a][p] - margin."""
    n = len(groups)
    out = set()
    for a, p, q in product(range(n), repeat=3):
        if a == p or groups[a] != groups[p] or groups[a] == groups[q]:
            continue
        if S[a][q] > S[a][p] - margin:
            out.add((a, p, q))
    return out


def ms_loss_scalar(S, groups, alpha, beta, base, margin):
    """Multi-similarity loss written straight from its per-anchor definition.

    Pairs enter the sums only if they take part in at least one hard
    triplet; the loss is averaged over anchors that keep any pair.
    """
    triplets = enumerate_hard_triplets(S, groups, margin)
    n = len(groups)
    total, active = 0.0, 0
    for i in range(n):
        P = sorted({p for a, p, _ in triplets if a == i})
        N = sorted({q for a, _, q in triplets if a == i})
        if not P and not N:
            continue
        active += 1
        pos = math.log(1.0 + math.fsum(math.exp(-alpha * (S[i][p] - base)) for p in P)) / alpha
        neg = math.log(1.0 + math.fsum(math.exp(beta * (S[i][q] - base)) for q in N)) / beta
        total += pos + neg
    return total / active if active else 0.0


def triplet_margin_scalar(a_rows, p_rows, n_rows, margin):
    total = 0.0
    for a, p, q in zip(a_rows, p_rows, n_rows):
        na, np_, nq = norm(a), norm(p), norm(q)
        a = [x / na for x in a]
        p = [x / np_ for x in p]
        q = [x / nq for x in q]
        d_ap = math.sqrt(math.fsum((x - y) ** 2 for x, y in zip(a, p)))
        d_an = math.sqrt(math.fsum((x - y) ** 2 for x, y in zip(a, q)))
        total += max(0.0, d_ap - d_an + margin)
    return total / len(a_rows)


def topk_by_rank_count(ranked_codes, golds, ks):
    """Count, per k, the mentions whose gold appears at 1-based position <= k."""
    out = {}
    for k in ks:
        hits = 0
        for codes, gold in zip(ranked_codes, golds):
            for pos in range(len(codes)):
                if codes[pos] == gold:
                    if pos + 1 <= k:
                        hits += 1
                    break
        out[k] = hits / len(golds) if golds else 0.0
    return out


def stable_sort_desc(items, scores):
    """Insertion sort on descending score; never moves past an equal score."""
    out = []
    for item, s in zip(items, scores):
        pos = len(out)
        while pos > 0 and out[pos - 1][1] < s:
            pos -= 1
        out.insert(pos, (item, s))
    return [item for item, _ in out]


def unseen_filter(train_records, test_records):
    train_codes = []
    for r in train_records:
        if r.code not in train_codes:
            train_codes.append(r.code)
    return [r for r in test_records if r.code not in train_codes]


def ms_loss_grad_mp(S, groups, alpha, beta, base, margin, dps=40):
    """dLoss/dS at high precision, with mining frozen at S (mpmath numeric derivative)."""
    import mpmath as mp

    triplets = enumerate_hard_triplets(S, groups, margin)
    n = len(groups)
    P = [sorted({p for a, p, _ in triplets if a == i}) for i in range(n)]
    N = [sorted({q for a, _, q in triplets if a == i}) for i in range(n)]
    active = [i for i in range(n) if P[i] or N[i]]
    with mp.workdps(dps):
        a, b, lam = mp.mpf(alpha), mp.mpf(beta), mp.mpf(base)
        M = [[mp.mpf(float(x)) for x in row] for row in S]

        def loss(i, j, d):
            total = mp.mpf(0)
            for r in active:
                get = lambda c: M[r][c] + (d if (r, c) == (i, j) else 0)
                total += mp.log(1 + mp.fsum(mp.exp(-a * (get(p) - lam)) for p in P[r])) / a
                total += mp.log(1 + mp.fsum(mp.exp(b * (get(q) - lam)) for q in N[r])) / b
            return total / len(active)

        grad = [[0.0] * n for _ in range(n)]
        for i in active:
            for j in set(P[i]) | set(N[i]):
                grad[i][j] = float(mp.diff(lambda d: loss(i, j, d), 0))
    return grad
