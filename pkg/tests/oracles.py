"""Independent reference implementations used as test oracles.

Everything here is deliberately naive: explicit loops over index triples and
scalar math, with no code shared with the package under test.
"""
import math

import numpy as np


def brute_ordered(keys, values):
    """{(dir, a, p): negatives} with dir 0 forward, 1 backward."""
    B = len(keys)
    out = {}
    for a in range(B):
        for p in range(B):
            if p == a or keys[a] != keys[p]:
                continue
            fwd = tuple(n for n in range(B) if n not in (a, p) and keys[n] == keys[a]
                        and values[a] <= values[p] < values[n])
            bwd = tuple(n for n in range(B) if n not in (a, p) and keys[n] == keys[a]
                        and values[a] >= values[p] > values[n])
            if fwd:
                out[(0, a, p)] = fwd
            if bwd:
                out[(1, a, p)] = bwd
    return out


def brute_distance(keys, values, code):
    B = len(keys)
    out = {}
    for a in range(B):
        for p in range(B):
            if p == a or keys[a] != keys[p]:
                continue
            neg = tuple(n for n in range(B) if n not in (a, p) and keys[n] == keys[a]
                        and abs(values[a] - values[n]) >= abs(values[a] - values[p]))
            if neg:
                out[(code, a, p)] = neg
    return out


def brute_instance(obs, code):
    B = len(obs)
    out = {}
    for a in range(B):
        for p in range(B):
            if p != a and obs[p] == obs[a]:
                neg = tuple(n for n in range(B) if n not in (a, p))
                if neg:
                    out[(code, a, p)] = neg
    return out


def plan_as_dict(plan):
    return {(int(t.direction), t.anchor, t.positive): t.negatives for t in plan.terms}


def neg_l2(u, v, tau=1.0, squared=False):
    d2 = sum((float(x) - float(y)) ** 2 for x, y in zip(u, v))
    return -(d2 if squared else math.sqrt(d2)) / tau


def cosine(u, v, tau):
    dot = sum(float(x) * float(y) for x, y in zip(u, v))
    nu = math.sqrt(sum(float(x) ** 2 for x in u))
    nv = math.sqrt(sum(float(y) ** 2 for y in v))
    return dot / (nu * nv * tau)


def term_loss(V, a, p, negs, sim=neg_l2):
    """-log( e^{s_ap} / (e^{s_ap} + sum_n e^{s_an}) ) with a scalar stable log-sum-exp."""
    logits = [sim(V[a], V[p])] + [sim(V[a], V[n]) for n in negs]
    m = max(logits)
    return m + math.log(math.fsum(math.exp(z - m) for z in logits)) - logits[0]


def plan_loss(plan_dict, V, sim=neg_l2):
    """Per-direction mean of term losses, summed over directions."""
    by_dir = {}
    for (d, a, p), negs in plan_dict.items():
        by_dir.setdefault(d, []).append(term_loss(V, a, p, negs, sim))
    return math.fsum(math.fsum(v) / len(v) for v in by_dir.values())


def central_diff(f, x, eps=1e-6):
    x = np.array(x, dtype=float)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        fp = f(x)
        x[i] = old - eps
        fm = f(x)
        x[i] = old
        g[i] = (fp - fm) / (2 * eps)
    return g


def rel_err(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12))


def icc_anova(Y):
    """Shrout-Fleiss ICC(3,1) and ICC(2,1) by explicit sums of squares; Y is (n, k)."""
    n, k = len(Y), len(Y[0])
    grand = sum(sum(r) for r in Y) / (n * k)
    row_means = [sum(r) / k for r in Y]
    col_means = [sum(Y[i][j] for i in range(n)) / n for j in range(k)]
    ss_rows = k * sum((m - grand) ** 2 for m in row_means)
    ss_cols = n * sum((m - grand) ** 2 for m in col_means)
    ss_tot = sum((Y[i][j] - grand) ** 2 for i in range(n) for j in range(k))
    ss_err = ss_tot - ss_rows - ss_cols
    msr, msc = ss_rows / (n - 1), ss_cols / (k - 1)
    mse = ss_err / ((n - 1) * (k - 1))
    icc3 = (msr - mse) / (msr + (k - 1) * mse)
    icc2 = (msr - mse) / (msr + (k - 1) * mse + k * (msc - mse) / n)
    return icc3, icc2
