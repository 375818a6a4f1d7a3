"""Supervised and contrastive losses.

The smoothed cross-entropy keeps the printed form: full weight on the true
class plus ``epsilon`` on every other class, without renormalization. A
``normalized_smoothing`` switch provides the conventional convex variant for
comparison. Temperatures down to 0.01 occur in threshold sweeps, so every
exponential goes through a max-subtracted log-sum-exp.
"""

from __future__ import annotations

import warnings

import numpy as np
import torch

from .errors import DegenerateVectorWarning, NumericError
from .volume import IGNORE_LABEL


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    """Numerically stable softmax over ``axis`` (max-subtraction)."""
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def supervised_loss(
    logits: torch.Tensor,
    target: torch.Tensor,
    epsilon: float = 0.1,
    normalized_smoothing: bool = False,
) -> torch.Tensor:
    """Smoothed pixel cross-entropy averaged over non-IGNORE pixels.

    ``logits`` is (classes, H, W) or (B, classes, H, W); ``target`` holds
    class ids with IGNORE_LABEL excluded from both numerator and denominator.
    Returns 0 (with a warning) when every pixel is IGNORE.
    """
    logits = torch.as_tensor(logits)
    target = torch.as_tensor(np.asarray(target), dtype=torch.long)
    if logits.dim() == 3:
        logits = logits.unsqueeze(0)
        target = target.unsqueeze(0)
    if logits.dim() != 4 or target.shape != logits.shape[:1] + logits.shape[2:]:
        raise NumericError(
            f"logits {tuple(logits.shape)} / target {tuple(target.shape)} "
            f"layout mismatch"
        )
    logp = torch.log_softmax(logits, dim=1)
    valid = target != IGNORE_LABEL
    if not bool(valid.any()):
        warnings.warn("supervised_loss: all pixels IGNORE, returning 0")
        return (logits * 0.0).sum()
    safe_target = target.clamp(min=0)
    logp_true = logp.gather(1, safe_target.unsqueeze(1)).squeeze(1)
    logp_sum = logp.sum(dim=1)
    if normalized_smoothing:
        n_classes = logits.shape[1]
        per_pixel = -((1.0 - epsilon) * logp_true + (epsilon / n_classes) * logp_sum)
    else:
        # weight 1 on the true class, epsilon on each other class, as printed
        per_pixel = -((1.0 - epsilon) * logp_true + epsilon * logp_sum)
    return per_pixel[valid].mean()


def cosine_similarity(a, b):
    """Cosine similarity of two vectors; 0 (with a warning) on zero norm.

    Returns a python float for numpy inputs and a scalar tensor (keeping the
    autograd graph) when either argument is a torch tensor.
    """
    if isinstance(a, torch.Tensor) or isinstance(b, torch.Tensor):
        a = torch.as_tensor(a)
        b = torch.as_tensor(b)
        na = torch.linalg.vector_norm(a)
        nb = torch.linalg.vector_norm(b)
        if float(na.detach()) == 0.0 or float(nb.detach()) == 0.0:
            warnings.warn("zero-norm vector in cosine similarity", DegenerateVectorWarning)
            return (a * b).sum() * 0.0
        return (a * b).sum() / (na * nb)
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        warnings.warn("zero-norm vector in cosine similarity", DegenerateVectorWarning)
        return 0.0
    return float(np.dot(a, b) / (na * nb))


def _rows_unit(x: torch.Tensor) -> torch.Tensor:
    # zero rows stay zero so their similarity is exactly 0
    norms = torch.linalg.vector_norm(x, dim=-1, keepdim=True)
    return x / torch.where(norms > 0, norms, torch.ones_like(norms))


def contrastive_loss(samples, tau: float) -> torch.Tensor:
    """Temperature-scaled instance-discrimination loss over mined samples.

    Per contributing class and query: -log of the positive's share of the
    exponentiated similarities against the negatives. Classes missing a
    query, positive or negative are skipped; the average runs over the
    contributing (class, query) pairs. Returns a 0 scalar when nothing
    contributes.
    """
    if tau <= 0:
        raise NumericError(f"temperature must be > 0, got {tau}")
    total = None
    pairs = 0
    for cs in samples.per_class:
        if not cs.contributes():
            continue
        queries = torch.as_tensor(cs.queries)
        positive = torch.as_tensor(cs.positive).to(queries.dtype)
        negatives = torch.as_tensor(cs.negatives).to(queries.dtype)
        qn = _rows_unit(queries)
        keys = _rows_unit(torch.cat([positive.unsqueeze(0), negatives], dim=0))
        sims = qn @ keys.T / tau                    # (q, 1 + n)
        per_query = torch.logsumexp(sims, dim=1) - sims[:, 0]
        contrib = per_query.sum()
        total = contrib if total is None else total + contrib
        pairs += queries.shape[0]
    if pairs == 0:
        return torch.zeros(())
    return total / pairs


def total_loss(sup, con):
    """Unweighted sum of the supervised and contrastive terms."""
    sup_t = sup if isinstance(sup, torch.Tensor) else torch.as_tensor(sup, dtype=torch.float64)
    con_t = con if isinstance(con, torch.Tensor) else torch.as_tensor(con, dtype=torch.float64)
    if not bool(torch.isfinite(sup_t).all()) or not bool(torch.isfinite(con_t).all()):
        raise NumericError(
            f"non-finite loss component: sup={float(sup_t)}, con={float(con_t)}"
        )
    return sup_t + con_t
