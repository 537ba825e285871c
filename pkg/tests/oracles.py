"""Slow, direct reference implementations used as independent test oracles.

Nothing here shares code with the package; every function is a plain
scalar loop transcribing the defining formula.
"""
import math


def cox_de_boor(i, k, x, t):
    """B_{i,k}(x) on knot vector t by the textbook recursion."""
    if k == 0:
        return 1 if t[i] <= x < t[i + 1] else 0
    left = (x - t[i]) / (t[i + k] - t[i]) * cox_de_boor(i, k - 1, x, t)
    right = (t[i + k + 1] - x) / (t[i + k + 1] - t[i + 1]) * cox_de_boor(i + 1, k - 1, x, t)
    return left + right


def basis_vector(x, t, k):
    return [cox_de_boor(i, k, x, t) for i in range(len(t) - k - 1)]


def silu(x):
    return x / (1.0 + math.exp(-x))


def edge_phi(x, wb, ws, t, k, base=silu):
    """One KAN edge: wb * base(x) + sum_m ws[m] * B_m(x)."""
    basis = basis_vector(x, t, k)
    return wb * base(x) + sum(w * b for w, b in zip(ws, basis))


def layer_output(batch, wb, ws, t, k, base=silu):
    """Scalar-loop KAN layer: out[b][o] = sum_j phi_{o,j}(x[b][j])."""
    out = []
    for row in batch:
        out_row = []
        for o in range(len(wb)):
            acc = 0.0
            for j, xj in enumerate(row):
                acc += edge_phi(xj, wb[o][j], ws[o][j], t, k, base)
            out_row.append(acc)
        out.append(out_row)
    return out


def frobenius_columns(w, cols):
    acc = 0.0
    for row in w:
        for c in cols:
            acc += row[c] * row[c]
    return math.sqrt(acc)


def pairwise_auroc(scores, labels):
    """Exhaustive P(s+ > s-) + 0.5 P(s+ = s-)."""
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    wins = 0.0
    for a in pos:
        for b in neg:
            if a > b:
                wins += 1.0
            elif a == b:
                wins += 0.5
    return wins / (len(pos) * len(neg))


def lorenz96_loop(x, F):
    """Paper-convention Lorenz-96 derivative with explicit modular indexing."""
    p = len(x)
    return [-x[(i - 1) % p] * (x[(i - 2) % p] - x[(i + 1) % p]) - x[i] + F for i in range(p)]


def two_pass_stats(values):
    n = len(values)
    mean = sum(values) / n
    if n == 1:
        return mean, 0.0
    ss = sum((v - mean) ** 2 for v in values)
    return mean, math.sqrt(ss / (n - 1))
