"""Training objectives: cross-entropy, supervised contrastive, cross-domain contrastive."""

from __future__ import annotations

import logging

import numpy as np

from ..errors import ConfigError, UndefinedAnchorError
from .autodiff import Tensor, as_tensor, log_softmax, logsumexp

logger = logging.getLogger(__name__)

N_CLASSES = 6


def ce_loss(logits, labels) -> Tensor:
    """Mean negative log-likelihood of the true class."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=int)
    n_classes = logits.shape[-1]
    if labels.shape != (logits.shape[0],):
        raise ConfigError("one label per logit row required")
    if np.any(labels < 0) or np.any(labels >= n_classes):
        raise ConfigError(f"labels must lie in [0, {n_classes})")
    lp = log_softmax(logits, axis=1)
    picked = lp[np.arange(len(labels)), labels]
    return -picked.mean()


def _masked_contrastive(sim: Tensor, pos: np.ndarray, valid: np.ndarray):
    """Mean over anchors of -(1/|P|) * sum_p log softmax(sim)[p].

    ``valid`` masks the denominator set; ``pos`` the positives (subset of valid).
    """
    n_pos = pos.sum(axis=1)
    keep = n_pos > 0
    if not keep.any():
        return None
    # large negative instead of -inf keeps the gradient finite
    masked = sim + np.where(valid, 0.0, -1e30)
    log_prob = sim - logsumexp(masked, axis=1, keepdims=True)
    w = np.where(keep[:, None], pos / np.maximum(n_pos, 1)[:, None], 0.0)
    return -(log_prob * w).sum() * (1.0 / keep.sum())


def supcon_loss(Z, labels, tau: float = 0.07, strict: bool = True) -> Tensor:
    """Supervised contrastive loss over one batch of unit-norm embeddings.

    Anchors without a positive are dropped. When no anchor remains the loss
    is undefined: raise if ``strict``, otherwise log and return zero.
    """
    Z = as_tensor(Z)
    labels = np.asarray(labels)
    n = Z.shape[0]
    if n < 2:
        raise UndefinedAnchorError("supervised contrastive loss needs at least two samples")
    if tau <= 0:
        raise ConfigError("temperature must be positive")
    sim = (Z @ Z.T) * (1.0 / tau)
    not_self = ~np.eye(n, dtype=bool)
    pos = (labels[:, None] == labels[None, :]) & not_self
    loss = _masked_contrastive(sim, pos, not_self)
    if loss is None:
        if strict:
            raise UndefinedAnchorError("no anchor in the batch has a positive")
        logger.warning("supcon batch has no positive pairs; contributing 0")
        return Tensor(0.0)
    return loss


def domain_con_loss(Z_t, pseudo_labels, Z_s, labels_s, tau: float = 0.07,
                    strict: bool = True) -> Tensor:
    """Cross-domain contrastive loss: target anchors against source samples.

    The denominator runs over every source sample; positives are the source
    samples whose label equals the anchor's pseudo label.
    """
    Z_t, Z_s = as_tensor(Z_t), as_tensor(Z_s)
    pseudo_labels = np.asarray(pseudo_labels)
    labels_s = np.asarray(labels_s)
    if tau <= 0:
        raise ConfigError("temperature must be positive")
    sim = (Z_t @ Z_s.T) * (1.0 / tau)
    pos = pseudo_labels[:, None] == labels_s[None, :]
    valid = np.ones_like(pos)
    loss = _masked_contrastive(sim, pos, valid)
    if loss is None:
        if strict:
            raise UndefinedAnchorError("no target anchor has a source positive")
        logger.warning("no target anchor has a source positive; contributing 0")
        return Tensor(0.0)
    return loss


def combined_loss(l_ce, l_con, lam: float):
    """``lam * l_ce + (1 - lam) * l_con`` with ``lam`` held constant."""
    if not 0.0 <= lam <= 1.0:
        raise ConfigError("lambda must lie in [0, 1]")
    return l_ce * float(lam) + l_con * (1.0 - float(lam))
