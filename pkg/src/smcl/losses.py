"""Mixed cross-entropy, supervised contrastive objectives, and DRW weights.

The mixed losses interpolate a source-label term and a target-label term
with the per-sample masked-area fraction A: the masked view belongs to both
terms, labeled y in the first and the target label in the second. All
softmax / log-sum-exp reductions subtract the row maximum for stability.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

NORM_TOLERANCE = 1e-3  # unit-length slack before a feature row is rejected


class DegenerateBatchError(ValueError):
    """Contrastive pool smaller than two rows."""


class NonFiniteLossError(FloatingPointError):
    """A loss came out NaN or infinite; training must abort."""


_no_positive_anchors = 0


def no_positive_anchor_count():
    """Number of anchors seen so far that had no positive in their pool."""
    return _no_positive_anchors


def reset_no_positive_anchor_count():
    global _no_positive_anchors
    _no_positive_anchors = 0


def _count_no_positive(n):
    global _no_positive_anchors
    _no_positive_anchors += int(n)


def _check_area(area):
    area = torch.as_tensor(area)
    if bool((area < 0).any()) or bool((area > 0.9 + 1e-9).any()):
        raise ValueError("masked-area fraction must lie in [0, 0.9]")
    return area


def _check_normalized(features):
    if not bool(torch.isfinite(features).all()):
        raise NonFiniteLossError("non-finite feature rows in contrastive pool")
    worst = float((features.norm(dim=1) - 1.0).abs().max().detach())
    if worst > NORM_TOLERANCE:
        raise ValueError(f"features are not unit-normalized (max deviation {worst:.3g})")


def cross_entropy_rows(logits, labels, class_weights=None):
    """Per-row cross entropy; optional per-class weight of the true label.

    Weighted rows are scaled without renormalizing by the weight sum, so the
    batch mean keeps the DRW weights' unit-mean calibration.
    """
    logp = torch.log_softmax(logits, dim=1)
    nll = -logp.gather(1, labels.view(-1, 1)).squeeze(1)
    if class_weights is not None:
        nll = nll * class_weights[labels]
    return nll


@dataclass
class DrwWeights:
    """Per-class loss weights for deferred re-weighting of the CE term."""

    weights: torch.Tensor
    active: bool = True

    @classmethod
    def inactive(cls, num_classes):
        return cls(weights=torch.ones(num_classes, dtype=torch.float64), active=False)


def drw_weights(hist, beta_w):
    """Class-balanced weights w_k proportional to (1-b)/(1-b^n_k), mean 1.

    beta_w = 0 collapses to uniform weights. beta_w must lie in [0, 1).
    """
    counts = np.asarray(getattr(hist, "counts", hist), dtype=np.float64)
    if not 0 <= beta_w < 1:
        raise ValueError(f"beta_w must lie in [0, 1), got {beta_w}")
    if beta_w == 0:
        w = np.ones_like(counts)
    else:
        w = (1.0 - beta_w) / (1.0 - beta_w**counts)
    w = w * (len(w) / w.sum())
    return DrwWeights(weights=torch.as_tensor(w, dtype=torch.float64), active=True)


def mixed_cross_entropy(o1, o2, om, ot1, ot2, y, yt, area, drw=None, strict=True):
    """Area-interpolated cross entropy over source and target view groups.

    Per source i, with row CE written ce(.,.):
      strict:  (1-A_i) * mean[ce(o1,y), ce(o2,y), ce(om,y)]
             +    A_i  * mean[ce(ot1,yt), ce(ot2,yt), ce(om,yt)]
      loose:   [ce(o1,y) + ce(o2,y) + ce(ot1,yt) + ce(ot2,yt)
             + (1-A_i)*ce(om,y) + A_i*ce(om,yt)] / 5
    averaged over the batch. The masked row om feeds both terms. When drw is
    active, each row's CE is scaled by the weight of its own label.
    """
    area = _check_area(area).to(o1.dtype)
    w = drw.weights.to(o1.dtype) if drw is not None and drw.active else None
    ce = lambda logits, labels: cross_entropy_rows(logits, labels, w)
    src = [ce(o1, y), ce(o2, y)]
    tgt = [ce(ot1, yt), ce(ot2, yt)]
    m_src = ce(om, y)
    m_tgt = ce(om, yt)
    if strict:
        term_src = (src[0] + src[1] + m_src) / 3.0
        term_tgt = (tgt[0] + tgt[1] + m_tgt) / 3.0
        per_sample = (1.0 - area) * term_src + area * term_tgt
    else:
        per_sample = (
            src[0] + src[1] + tgt[0] + tgt[1] + (1.0 - area) * m_src + area * m_tgt
        ) / 5.0
    return per_sample.mean()


def _per_anchor_supcon(features, labels, tau):
    """Per-anchor contrastive terms with every row anchoring the full pool.

    Returns (per_anchor, valid): per_anchor[a] is the anchor's mean negative
    log-probability over its positives, 0 where the anchor has none; valid
    marks anchors with at least one positive.
    """
    m = features.shape[0]
    if m < 2:
        raise DegenerateBatchError(f"contrastive pool needs >= 2 rows, got {m}")
    _check_normalized(features)
    sim = features @ features.T / tau
    eye = torch.eye(m, dtype=torch.bool)
    sim = sim.masked_fill(eye, float("-inf"))
    pos = labels.view(-1, 1).eq(labels.view(1, -1)) & ~eye
    log_denom = torch.logsumexp(sim, dim=1, keepdim=True)
    log_prob = sim - log_denom
    pos_counts = pos.sum(dim=1)
    picked = torch.where(pos, log_prob, torch.zeros((), dtype=log_prob.dtype))
    per_anchor = -picked.sum(dim=1) / pos_counts.clamp(min=1)
    valid = pos_counts > 0
    return per_anchor, valid


def supcon(features, labels, tau, anchors=None):
    """Supervised contrastive loss over a pool of unit-norm features.

    Every pool row is a candidate contrast; anchors (default: all rows)
    average their positives' log-probabilities. Anchors without a positive
    contribute 0 and are excluded from the average; if no anchor has one,
    the loss is 0 and the warning counter is bumped.
    """
    if features.ndim != 2:
        raise ValueError("features must be (M, d)")
    if tau <= 0:
        raise ValueError(f"temperature must be > 0, got {tau}")
    per_anchor, valid = _per_anchor_supcon(features, labels, tau)
    if anchors is not None:
        anchors = torch.as_tensor(anchors, dtype=torch.long)
        per_anchor = per_anchor[anchors]
        valid = valid[anchors]
    n_invalid = int((~valid).sum())
    if n_invalid:
        _count_no_positive(n_invalid)
    if bool(valid.any()):
        return per_anchor[valid].mean()
    return features.sum() * 0.0


def mixed_supcon(f1, f2, fm, ft1, ft2, y, yt, area, tau):
    """Area-interpolated supervised contrastive loss over the five-view pool.

    The pool is all 5N rows [f1; f2; ft1; ft2; fm]. Term 1 anchors a source's
    {f1, f2, fm} with fm labeled y; term 2 anchors {ft1, ft2, fm} with fm
    labeled yt (these labelings apply to every masked row in the pool). Each
    term is the mean over that source's anchors with positives; per source,
    loss_i = (1-A_i) * term1_i + A_i * term2_i, averaged over the batch.
    """
    if tau <= 0:
        raise ValueError(f"temperature must be > 0, got {tau}")
    n = f1.shape[0]
    for t in (f2, fm, ft1, ft2):
        if t.shape != f1.shape:
            raise ValueError("all view feature blocks must share one shape")
    area = _check_area(area).to(f1.dtype)
    pool = torch.cat([f1, f2, ft1, ft2, fm], dim=0)
    labels_src_m = torch.cat([y, y, yt, yt, y])  # masked rows carry y
    labels_tgt_m = torch.cat([y, y, yt, yt, yt])  # masked rows carry yt

    per1, valid1 = _per_anchor_supcon(pool, labels_src_m, tau)
    per2, valid2 = _per_anchor_supcon(pool, labels_tgt_m, tau)

    idx = torch.arange(n)
    anchors1 = torch.stack([idx, idx + n, idx + 4 * n])  # f1, f2, fm rows
    anchors2 = torch.stack([idx + 2 * n, idx + 3 * n, idx + 4 * n])  # ft1, ft2, fm

    def per_source_mean(per_anchor, valid, anchor_rows):
        vals = per_anchor[anchor_rows]
        ok = valid[anchor_rows]
        counts = ok.sum(dim=0)
        _count_no_positive(int((counts == 0).sum()))
        total = (vals * ok).sum(dim=0)
        return total / counts.clamp(min=1)  # sources with no valid anchor give 0

    term1 = per_source_mean(per1, valid1, anchors1)
    term2 = per_source_mean(per2, valid2, anchors2)
    return ((1.0 - area) * term1 + area * term2).mean()


@dataclass
class LossBreakdown:
    """Component losses and the combined total for one step."""

    mce: torch.Tensor
    msc: torch.Tensor
    total: torch.Tensor
    lam: float
    mu: float
    tau: float

    def as_floats(self):
        def scalar(t):
            return float(t.detach()) if torch.is_tensor(t) else float(t)

        return {"mce": scalar(self.mce), "msc": scalar(self.msc), "total": scalar(self.total)}


def combined(mce, msc, lam, mu, tau=0.1):
    """Weighted sum total = lam * mce + mu * msc, with an abort on non-finite."""
    if lam < 0 or mu < 0:
        raise ValueError("loss weights must be >= 0")
    mce = torch.as_tensor(mce)
    msc = torch.as_tensor(msc)
    total = lam * mce + mu * msc
    if not bool(torch.isfinite(total)):
        raise NonFiniteLossError(f"non-finite loss: mce={float(mce)}, msc={float(msc)}")
    return LossBreakdown(mce=mce, msc=msc, total=total, lam=float(lam), mu=float(mu), tau=float(tau))
