"""Independent high-precision reference computations used to freeze test values.

Everything here uses mpmath at 50 significant digits or exact rationals and
shares no code with the package.
"""

from fractions import Fraction
from math import comb

import mpmath as mp

mp.mp.dps = 50


def softmax(row):
    e = [mp.e ** mp.mpf(x) for x in row]
    s = mp.fsum(e)
    return [v / s for v in e]


def entropy(row):
    return -mp.fsum(mp.mpf(p) * mp.log(p) for p in row if p > 0)


def kl(p, q):
    return mp.fsum(mp.mpf(a) * mp.log(mp.mpf(a) / mp.mpf(b)) for a, b in zip(p, q) if a > 0)


def mean_rows(rows):
    n = len(rows)
    return [mp.fsum(mp.mpf(r[j]) for r in rows) / n for j in range(len(rows[0]))]


def twist_symmetric(p1, p2, alpha=1, beta=1):
    b = len(p1)
    cons = mp.fsum(kl(a, c) + kl(c, a) for a, c in zip(p1, p2)) / (2 * b)
    sharp = (mp.fsum(entropy(r) for r in p1) / b + mp.fsum(entropy(r) for r in p2) / b) / 2
    div = (entropy(mean_rows(p1)) + entropy(mean_rows(p2))) / 2
    return cons, sharp, div, cons + alpha * sharp - beta * div


def mutual_information(p):
    return entropy(mean_rows(p)) - mp.fsum(entropy(r) for r in p) / len(p)


def cross_entropy(teacher, student):
    return -mp.fsum(mp.mpf(t) * mp.log(mp.mpf(s)) for t, s in zip(teacher, student))


def _table(pred, true):
    rows = sorted(set(pred))
    cols = sorted(set(true))
    return [[sum(1 for a, b in zip(pred, true) if a == r and b == c) for c in cols] for r in rows]


def clustering_scores(pred, true):
    """NMI (arithmetic mean), AMI (exact hypergeometric expectation), ARI (exact).

    AMI and ARI are None when undefined.
    """
    n = len(pred)
    t = _table(pred, true)
    a = [sum(r) for r in t]
    b = [sum(c) for c in zip(*t)]
    N = mp.mpf(n)
    h_a = -mp.fsum(x / N * mp.log(x / N) for x in a)
    h_b = -mp.fsum(x / N * mp.log(x / N) for x in b)
    mi = mp.fsum(t[i][j] / N * mp.log(N * t[i][j] / (a[i] * b[j]))
                 for i in range(len(a)) for j in range(len(b)) if t[i][j])
    emi = mp.mpf(0)
    for ai in a:
        for bj in b:
            for nij in range(max(1, ai + bj - n), min(ai, bj) + 1):
                prob = mp.mpf(comb(bj, nij) * comb(n - bj, ai - nij)) / comb(n, ai)
                emi += nij / N * mp.log(N * nij / (ai * bj)) * prob
    mean_h = (h_a + h_b) / 2
    nmi = mi / mean_h
    # 0/0 when both partitions are all singletons
    ami = None if mean_h - emi == 0 else (mi - emi) / (mean_h - emi)
    index = sum(comb(x, 2) for r in t for x in r)
    sa = sum(comb(x, 2) for x in a)
    sb = sum(comb(x, 2) for x in b)
    expected = Fraction(sa * sb, comb(n, 2))
    denom = Fraction(sa + sb, 2) - expected
    if denom == 0:
        return nmi, ami, None
    ari = (index - expected) / denom
    return nmi, ami, mp.mpf(ari.numerator) / ari.denominator


if __name__ == "__main__":
    print("softmax[1,2,3]", [mp.nstr(v, 20) for v in softmax([1, 2, 3])])
    print("H[0.9,0.1]", mp.nstr(entropy([mp.mpf("0.9"), mp.mpf("0.1")]), 20))
    print("KL[.9,.1||.8,.2]", mp.nstr(kl([mp.mpf("0.9"), mp.mpf("0.1")], [mp.mpf("0.8"), mp.mpf("0.2")]), 20))
    f = mp.mpf
    p1 = [[f("0.9"), f("0.1")], [f("0.2"), f("0.8")]]
    p2 = [[f("0.8"), f("0.2")], [f("0.3"), f("0.7")]]
    print("twist", [mp.nstr(v, 20) for v in twist_symmetric(p1, p2)])
    print("MI", mp.nstr(mutual_information(p1), 20))
    print("DINO", mp.nstr(cross_entropy([f("0.7"), f("0.3")], [f("0.6"), f("0.4")]), 20))
    print("scores", [mp.nstr(v, 20) for v in clustering_scores([0, 0, 1, 1, 2, 2], [0, 0, 0, 1, 1, 1])])
