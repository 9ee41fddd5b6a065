"""Brute-force reference implementations for the ROC metrics."""

from fractions import Fraction


def auc_pairs(scores, labels):
    fakes = [s for s, y in zip(scores, labels) if y == 1]
    reals = [s for s, y in zip(scores, labels) if y == 0]
    wins = Fraction(0)
    for f in fakes:
        for r in reals:
            if f > r:
                wins += 1
            elif f == r:
                wins += Fraction(1, 2)
    return float(wins / (len(fakes) * len(reals)))


def rates(scores, labels, t):
    n1 = sum(labels)
    n0 = len(labels) - n1
    tp = sum(1 for s, y in zip(scores, labels) if y == 1 and s >= t)
    fp = sum(1 for s, y in zip(scores, labels) if y == 0 and s >= t)
    return Fraction(fp, n0), Fraction(tp, n1)


def pauc_sweep(scores, labels, ceiling):
    points = {(Fraction(0), Fraction(0))}
    for t in set(scores):
        points.add(rates(scores, labels, t))
    pts = sorted(points)
    c = Fraction(ceiling).limit_denominator(10**9)
    area = Fraction(0)
    for (x0, y0), (x1, y1) in zip(pts, pts[1:]):
        if x0 >= c:
            break
        if x1 > c:
            y1 = y0 + (y1 - y0) * (c - x0) / (x1 - x0)
            x1 = c
        area += (x1 - x0) * (y0 + y1) / 2
    return float(area / c)


def eer_sweep(scores, labels):
    best = None
    for t in sorted(set(scores)):
        fpr, tpr = rates(scores, labels, t)
        fnr = 1 - tpr
        gap = abs(fpr - fnr)
        if best is None or gap < best[0]:
            best = (gap, float((fpr + fnr) / 2), t)
    return best[1], best[2]
