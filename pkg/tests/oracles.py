"""Naive scalar-loop reference implementations used as test oracles.

Everything here trades speed for obviousness: explicit Python loops over
float64 values, no tensor vectorization, no code shared with the package.
"""

import math

import numpy as np


def log_softmax_row(row):
    m = max(row)
    log_denom = m + math.log(sum(math.exp(v - m) for v in row))
    return [v - log_denom for v in row]


def ce_row(logits, label, weight=1.0):
    return -log_softmax_row(list(logits))[int(label)] * weight


def mixed_ce_oracle(o1, o2, om, ot1, ot2, y, yt, area, weights=None, strict=True):
    """Term-by-term scalar form of the mixed cross entropy, one source at a time."""
    n = len(y)
    total = 0.0
    for i in range(n):
        w_y = 1.0 if weights is None else float(weights[int(y[i])])
        w_t = 1.0 if weights is None else float(weights[int(yt[i])])
        s1 = ce_row(o1[i], y[i], w_y)
        s2 = ce_row(o2[i], y[i], w_y)
        sm = ce_row(om[i], y[i], w_y)
        t1 = ce_row(ot1[i], yt[i], w_t)
        t2 = ce_row(ot2[i], yt[i], w_t)
        tm = ce_row(om[i], yt[i], w_t)
        a = float(area[i])
        if strict:
            val = (1.0 - a) * (s1 + s2 + sm) / 3.0 + a * (t1 + t2 + tm) / 3.0
        else:
            val = (s1 + s2 + t1 + t2 + (1.0 - a) * sm + a * tm) / 5.0
        total += val
    return total / n


def _anchor_value(features, labels, tau, a_idx):
    """Per-anchor term via double loop; None when the anchor has no positive."""
    m = len(labels)
    positives = [p for p in range(m) if p != a_idx and labels[p] == labels[a_idx]]
    if not positives:
        return None
    sims = {}
    for k in range(m):
        if k != a_idx:
            sims[k] = float(np.dot(features[a_idx], features[k])) / tau
    mx = max(sims.values())
    log_denom = mx + math.log(sum(math.exp(s - mx) for s in sims.values()))
    acc = 0.0
    for p in positives:
        acc += sims[p] - log_denom
    return -acc / len(positives)


def supcon_oracle(features, labels, tau, anchors=None):
    """Mean per-anchor loss; anchors without positives are skipped entirely."""
    m = len(labels)
    anchors = range(m) if anchors is None else anchors
    vals = [v for v in (_anchor_value(features, labels, tau, a) for a in anchors) if v is not None]
    if not vals:
        return 0.0
    return sum(vals) / len(vals)


def mixed_supcon_oracle(f1, f2, fm, ft1, ft2, y, yt, area, tau):
    """Term-by-term scalar form of the mixed contrastive loss over the 5N pool."""
    n = len(y)
    pool = [np.asarray(v) for block in (f1, f2, ft1, ft2, fm) for v in block]
    lab_src = list(y) + list(y) + list(yt) + list(yt) + list(y)
    lab_tgt = list(y) + list(y) + list(yt) + list(yt) + list(yt)
    total = 0.0
    for i in range(n):
        term1_anchors = [i, n + i, 4 * n + i]
        term2_anchors = [2 * n + i, 3 * n + i, 4 * n + i]
        vals1 = [v for v in (_anchor_value(pool, lab_src, tau, a) for a in term1_anchors)
                 if v is not None]
        vals2 = [v for v in (_anchor_value(pool, lab_tgt, tau, a) for a in term2_anchors)
                 if v is not None]
        term1 = sum(vals1) / len(vals1) if vals1 else 0.0
        term2 = sum(vals2) / len(vals2) if vals2 else 0.0
        a = float(area[i])
        total += (1.0 - a) * term1 + a * term2
    return total / n


def drw_oracle(counts, beta):
    if beta == 0:
        w = [1.0 for _ in counts]
    else:
        w = [(1.0 - beta) / (1.0 - beta ** float(n)) for n in counts]
    mean = sum(w) / len(w)
    return [v / mean for v in w]


def effective_numbers_oracle(counts):
    """Arbitrary-precision evaluation of the effective-number distribution."""
    import mpmath

    with mpmath.workdps(60):
        total = sum(int(n) for n in counts)
        if total < 2:
            eff = [mpmath.mpf(1) for _ in counts]
        else:
            beta = mpmath.mpf(total - 1) / total
            eff = [(1 - beta ** int(n)) / (1 - beta) for n in counts]
        inv = [1 / e for e in eff]
        s = sum(inv)
        probs = [v / s for v in inv]
        return [float(e) for e in eff], [float(p) for p in probs]
