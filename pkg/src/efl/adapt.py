"""Source pre-training and centroid/pseudo-label domain adaptation.

Each epoch re-embeds both domains with the current encoder, assigns every
target sample the label of its nearest source-class centroid, drops target
samples whose distance to that centroid is an outlier by the MAD rule, and
then trains on mixed batches with ``lam * CE(source) + (1 - lam) * L_con``,
``lam`` following the loss-ratio schedule.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, List, Optional

import numpy as np

from .errors import ConfigError, InsufficientDataError
from .nnet.autodiff import concat
from .nnet.losses import ce_loss, combined_loss, domain_con_loss, supcon_loss
from .nnet.model import EncoderConfig, encoder_forward, head_logits, init_encoder
from .nnet.optim import LossHistory, ParamStore, lambda_schedule, sgd_momentum_step

logger = logging.getLogger(__name__)

N_CLASSES = 6
MAD_EPS = 1e-12
OBJECTIVES = ("combined", "ce", "supcon")


@dataclass
class AdaptConfig:
    epochs: int = 10
    iterations_per_epoch: int = 20
    batch_source: int = 64
    batch_target: int = 64
    tau: float = 0.07
    mad_threshold: float = 3.5
    lr: float = 0.1
    momentum: float = 0.9
    objective: str = "combined"
    pretrain_max_epochs: int = 30
    pretrain_batch: int = 64
    plateau_tol: float = 1e-3
    plateau_window: int = 5
    seed: int = 42

    def __post_init__(self):
        for name in ("epochs", "iterations_per_epoch", "batch_source", "batch_target", "pretrain_batch"):
            if getattr(self, name) < 1 and not (name == "epochs" and self.epochs == 0):
                raise ConfigError(f"{name} must be >= 1")
        if self.tau <= 0 or self.lr < 0 or not 0 <= self.momentum < 1:
            raise ConfigError("tau must be > 0, lr >= 0, momentum in [0, 1)")
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"objective must be one of {OBJECTIVES}")
        if self.pretrain_max_epochs < 0:
            raise ConfigError("pretrain_max_epochs must be >= 0")


@dataclass
class CentroidSet:
    centroids: np.ndarray
    counts: np.ndarray


@dataclass
class PseudoLabelSet:
    labels: np.ndarray
    scores: np.ndarray
    kept: np.ndarray
    threshold: float = 3.5


class ExpressionModel:
    """Encoder parameters plus the config that shapes them."""

    def __init__(self, cfg: EncoderConfig = None, seed: int = 0, store: ParamStore = None):
        self.cfg = cfg or EncoderConfig()
        self.store = store if store is not None else init_encoder(self.cfg, seed)

    def copy(self) -> "ExpressionModel":
        return ExpressionModel(self.cfg, store=self.store.copy())

    def forward(self, X):
        return encoder_forward(X, self.store, self.cfg)

    def embed(self, X, batch_size: int = 256) -> np.ndarray:
        """``g(x)`` for every row of ``X``, in order."""
        X = np.asarray(X, dtype=float)
        out = [self.forward(X[i:i + batch_size])[0].data for i in range(0, len(X), batch_size)]
        if not out:
            return np.zeros((0, self.cfg.embed_dim))
        return np.concatenate(out, axis=0)

    def project(self, X, batch_size: int = 256) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        return np.concatenate([self.forward(X[i:i + batch_size])[1].data
                               for i in range(0, len(X), batch_size)], axis=0)

    def logits(self, X, batch_size: int = 256) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        return np.concatenate([head_logits(self.forward(X[i:i + batch_size])[0], self.store).data
                               for i in range(0, len(X), batch_size)], axis=0)


# --------------------------------------------------------------------------
# Centroids, pseudo labels, drift filtering
# --------------------------------------------------------------------------

def compute_centroids(Z_s, labels, n_classes: int = N_CLASSES) -> CentroidSet:
    Z_s = np.asarray(Z_s, dtype=float)
    labels = np.asarray(labels, dtype=int)
    cents, counts = [], []
    for k in range(n_classes):
        members = Z_s[labels == k]
        if len(members) == 0:
            raise InsufficientDataError(f"class {k} has no source samples")
        cents.append(members.mean(axis=0))
        counts.append(len(members))
    return CentroidSet(np.stack(cents), np.asarray(counts))


def assign_pseudo_labels(Z_t, centroids) -> np.ndarray:
    """Nearest centroid in Euclidean distance; ties go to the lowest index."""
    C = getattr(centroids, "centroids", centroids)
    Z_t = np.asarray(Z_t, dtype=float)
    d = np.linalg.norm(Z_t[:, None, :] - np.asarray(C)[None, :, :], axis=-1)
    return np.argmin(d, axis=1)


def mad_statistics(Z_train, labels, n_classes: int = N_CLASSES):
    """Per-class mean embedding, median distance and MAD of the training set."""
    Z_train = np.asarray(Z_train, dtype=float)
    labels = np.asarray(labels, dtype=int)
    means, med, mad = [], [], []
    for k in range(n_classes):
        members = Z_train[labels == k]
        if len(members) == 0:
            raise InsufficientDataError(f"class {k} has no training samples")
        mu = members.mean(axis=0)
        d = np.linalg.norm(members - mu, axis=1)
        dk = np.median(d)
        means.append(mu)
        med.append(dk)
        mad.append(np.median(np.abs(d - dk)))
    return np.stack(means), np.asarray(med), np.asarray(mad)


def drift_scores(distances, assigned, med, mad) -> np.ndarray:
    """``(d_j - median_k) / MAD_k``; a zero MAD is replaced by 1e-12."""
    assigned = np.asarray(assigned, dtype=int)
    m = np.asarray(mad, dtype=float)[assigned]
    return (np.asarray(distances, dtype=float) - np.asarray(med)[assigned]) / np.where(m > 0, m, MAD_EPS)


def mad_filter(Z_train, train_labels, Z_test, test_labels, threshold: float = 3.5,
               n_classes: int = N_CLASSES) -> PseudoLabelSet:
    """Score each test sample's drift from its assigned class; keep those <= threshold."""
    means, med, mad = mad_statistics(Z_train, train_labels, n_classes)
    test_labels = np.asarray(test_labels, dtype=int)
    Z_test = np.asarray(Z_test, dtype=float)
    d = np.linalg.norm(Z_test - means[test_labels], axis=1)
    scores = drift_scores(d, test_labels, med, mad)
    return PseudoLabelSet(test_labels, scores, scores <= threshold, threshold)


# --------------------------------------------------------------------------
# Training
# --------------------------------------------------------------------------

def _batches(n, batch, rng):
    order = rng.permutation(n)
    return [order[i:i + batch] for i in range(0, n, batch)]


def pretrain_source(model: ExpressionModel, X_s, y_s, cfg: AdaptConfig = None,
                    log: Optional[List[dict]] = None) -> ExpressionModel:
    """Fit encoder and CE head on labelled source data until the loss plateaus.

    Stops when the epoch loss improved by less than ``plateau_tol`` (relative)
    over the last ``plateau_window`` epochs, or after ``pretrain_max_epochs``.
    With the ``supcon`` objective the encoder is trained contrastively instead.
    """
    cfg = cfg or AdaptConfig()
    X_s = np.asarray(X_s, dtype=float)
    y_s = np.asarray(y_s, dtype=int)
    if len(X_s) == 0:
        raise InsufficientDataError("empty source set")
    rng = np.random.default_rng([cfg.seed, 1])
    store = model.store
    epoch_losses = []
    for epoch in range(cfg.pretrain_max_epochs):
        total, count = 0.0, 0
        for idx in _batches(len(X_s), cfg.pretrain_batch, rng):
            g, z = model.forward(X_s[idx])
            if cfg.objective == "supcon":
                loss = supcon_loss(z, y_s[idx], cfg.tau, strict=False)
            else:
                loss = ce_loss(head_logits(g, store), y_s[idx])
            store.zero_grad()
            loss.backward()
            sgd_momentum_step(store, lr=cfg.lr, momentum=cfg.momentum)
            total += loss.item() * len(idx)
            count += len(idx)
        epoch_losses.append(total / count)
        if log is not None:
            log.append({"phase": "pretrain", "epoch": epoch + 1, "loss": epoch_losses[-1]})
        if _plateaued(epoch_losses, cfg.plateau_window, cfg.plateau_tol):
                logger.info("pretraining plateaued after %d epochs", epoch + 1)
                break
    if cfg.objective == "supcon" and cfg.pretrain_max_epochs > 0:
        _fit_head(model, X_s, y_s, cfg)
    return model


def _plateaued(losses, window, tol) -> bool:
    """Best loss of the last ``window`` epochs improved on the earlier best by < ``tol`` (relative)."""
    if len(losses) <= window:
        return False
    before = min(losses[:-window])
    recent = min(losses[-window:])
    return before <= 0 or (before - recent) / before < tol


def _fit_head(model, X, y, cfg, steps=100):
    """Train only the CE head on frozen embeddings."""
    G = model.embed(X)
    store = model.store
    for _ in range(steps):
        from .nnet.autodiff import Tensor
        loss = ce_loss(head_logits(Tensor(G), store), y)
        store.zero_grad()
        loss.backward()
        sgd_momentum_step(store, lr=cfg.lr, momentum=cfg.momentum, names=["head.w", "head.b"])


@dataclass
class AdaptationResult:
    model: ExpressionModel
    log: List[dict] = field(default_factory=list)
    audit: List[dict] = field(default_factory=list)
    pseudo_accuracy: List[float] = field(default_factory=list)


def update_pseudo_labels(model: ExpressionModel, X_s, y_s, X_t, cfg: AdaptConfig):
    """Centroids from the current source embeddings, then labels and MAD filtering."""
    G_s = model.embed(X_s)
    G_t = model.embed(X_t)
    cents = compute_centroids(G_s, y_s)
    pseudo = assign_pseudo_labels(G_t, cents)
    return mad_filter(G_s, y_s, G_t, pseudo, cfg.mad_threshold)


def adaptation_loop(model: ExpressionModel, X_s, y_s, X_t, cfg: AdaptConfig = None,
                    y_t_true=None, sample_ids=None,
                    on_epoch: Optional[Callable] = None) -> AdaptationResult:
    """Alternate pseudo-label refresh (per epoch) and mixed-batch updates.

    ``y_t_true`` is only used for the audit trail and pseudo-label accuracy;
    it never enters training.
    """
    cfg = cfg or AdaptConfig()
    X_s, X_t = np.asarray(X_s, dtype=float), np.asarray(X_t, dtype=float)
    y_s = np.asarray(y_s, dtype=int)
    if len(X_s) == 0 or len(X_t) == 0:
        raise InsufficientDataError("adaptation needs nonempty source and target sets")
    result = AdaptationResult(model)
    store = model.store
    rng = np.random.default_rng([cfg.seed, 2])
    history = LossHistory()
    it = 0
    for epoch in range(1, cfg.epochs + 1):
        pl = update_pseudo_labels(model, X_s, y_s, X_t, cfg)
        if on_epoch is not None:
            on_epoch(epoch, pl)
        if y_t_true is not None:
            result.pseudo_accuracy.append(float(np.mean(pl.labels == np.asarray(y_t_true))))
            ids = sample_ids if sample_ids is not None else range(len(X_t))
            for sid, lab, sc, kp, tl in zip(ids, pl.labels, pl.scores, pl.kept, y_t_true):
                result.audit.append({"sample_id": sid, "epoch": epoch, "pseudo_label": int(lab),
                                     "drift_score": float(sc), "kept": bool(kp), "true_label": int(tl)})
        kept = np.flatnonzero(pl.kept)
        if len(kept) == 0:
            logger.warning("epoch %d: every target sample filtered; training on source only", epoch)
        for _ in range(cfg.iterations_per_epoch):
            it += 1
            si = rng.choice(len(X_s), size=min(cfg.batch_source, len(X_s)), replace=False)
            ti = rng.choice(kept, size=min(cfg.batch_target, len(kept)), replace=False) if len(kept) else kept
            l_ce, l_con, lam, loss = _adapt_step_loss(model, X_s[si], y_s[si], X_t[ti], pl.labels[ti],
                                                      cfg, history, it)
            store.zero_grad()
            loss.backward()
            sgd_momentum_step(store, lr=cfg.lr, momentum=cfg.momentum)
            history.record(l_ce, l_con)
            result.log.append({"iter": it, "L_ce": l_ce, "L_con_t": l_con, "lambda": lam, "lr": cfg.lr})
    return result


def _adapt_step_loss(model, Xs, ys, Xt, yt, cfg, history, it):
    store = model.store
    if len(Xt):
        g, z = model.forward(np.concatenate([Xs, Xt]))
        ns = len(Xs)
        g_s, z_s, z_t = g[:ns], z[:ns], z[ns:]
    else:
        g_s, z_s = model.forward(Xs)
        z_t = None
    l_ce = ce_loss(head_logits(g_s, store), ys)
    if cfg.objective == "ce":
        return l_ce.item(), 0.0, 1.0, l_ce
    if cfg.objective == "supcon":
        zz = z_s if z_t is None else concat([z_s, z_t], axis=0)
        labels = ys if z_t is None else np.concatenate([ys, yt])
        l_sc = supcon_loss(zz, labels, cfg.tau, strict=False)
        return l_ce.item(), l_sc.item(), 0.0, l_sc
    if z_t is None:
        return l_ce.item(), 0.0, 1.0, l_ce
    l_con = domain_con_loss(z_t, yt, z_s, ys, cfg.tau, strict=False)
    lam = lambda_schedule(history, it)
    return l_ce.item(), l_con.item(), lam, combined_loss(l_ce, l_con, lam)


def extract_representations(model: ExpressionModel, X_s, X_t):
    """``(Z_s, Z_t)``: encoder embeddings for both domains, order preserved."""
    return model.embed(X_s), model.embed(X_t)


# --------------------------------------------------------------------------
# K-means for embedding inspection
# --------------------------------------------------------------------------

def _kmeans_pp(Z, k, rng):
    n = len(Z)
    centers = [Z[rng.integers(n)]]
    d2 = np.sum((Z - centers[0]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        idx = rng.integers(n) if total <= 0 else rng.choice(n, p=d2 / total)
        centers.append(Z[idx])
        d2 = np.minimum(d2, np.sum((Z - Z[idx]) ** 2, axis=1))
    return np.array(centers, dtype=float)


def kmeans(Z, k: int, seed: int = 0, max_iter: int = 300):
    """Lloyd iterations from k-means++ seeding.

    Returns ``(assignments, centroids, inertia_history)``. A cluster that
    empties is re-seeded with the point farthest from its current centroid;
    when every point coincides the re-seeded cluster stays empty and all
    points remain in one cluster.
    """
    Z = np.asarray(Z, dtype=float)
    if k < 1 or len(Z) < k:
        raise InsufficientDataError(f"need at least k={k} points, got {len(Z)}")
    rng = np.random.default_rng(seed)
    C = _kmeans_pp(Z, k, rng)
    assign = None
    inertia = []
    for _ in range(max_iter):
        d2 = ((Z[:, None, :] - C[None]) ** 2).sum(-1)
        new = np.argmin(d2, axis=1)
        inertia.append(float(d2[np.arange(len(Z)), new].sum()))
        if assign is not None and np.array_equal(new, assign):
            break
        assign = new
        for j in range(k):
            members = Z[assign == j]
            if len(members):
                C[j] = members.mean(axis=0)
            else:
                far = int(np.argmax(d2[np.arange(len(Z)), assign]))
                if d2[far, assign[far]] > 0:
                    C[j] = Z[far]
                    assign[far] = j
    return assign, C, inertia
