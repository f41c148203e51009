"""Train/test case splits over sample manifests, and classification metrics."""

from __future__ import annotations

import json
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .echosim import CLASS_NAMES, N_CLASSES
from .errors import ConfigError, InsufficientDataError

CASES = ("mix", "leave_one_user_out", "leave_one_place_out", "cross_group",
         "small_train_cross_group", "plain_to_clutter", "clutter_to_plain")
CASE_ALIASES = {"louo": "leave_one_user_out", "lopo": "leave_one_place_out",
                "cross-group": "cross_group", "plain-to-clutter": "plain_to_clutter",
                "clutter-to-plain": "clutter_to_plain", "small-train-cross-group": "small_train_cross_group"}


@dataclass
class CaseSpec:
    """``held_out``: person or domain ids for the test side (leave-one-out cases);
    ``train_group``: person ids trained on in the cross-group cases (default:
    first half of the sorted persons); ``small_train_persons``: how many of
    them the small-train variant keeps."""

    name: str = "mix"
    test_fraction: float = 0.2
    held_out: Optional[List[str]] = None
    train_group: Optional[List[str]] = None
    small_train_persons: int = 1

    def __post_init__(self):
        self.name = CASE_ALIASES.get(self.name, self.name)
        if self.name not in CASES:
            raise ConfigError(f"unknown case {self.name!r}; choose from {CASES}")
        if not 0.0 < self.test_fraction < 1.0:
            raise ConfigError("test_fraction must lie in (0, 1)")
        if self.small_train_persons < 1:
            raise ConfigError("small_train_persons must be >= 1")


def _label(row) -> int:
    c = row["class"]
    return CLASS_NAMES.index(c) if isinstance(c, str) else int(c)


def _split_by(manifest, key, test_values):
    test_values = set(test_values)
    train = [r for r in manifest if r[key] not in test_values]
    test = [r for r in manifest if r[key] in test_values]
    return train, test


def build_case_split(manifest: Sequence[dict], case: CaseSpec, seed: int = 0):
    """Return ``(train_rows, test_rows)`` for ``case``; rows keep manifest order."""
    manifest = list(manifest)
    if not manifest:
        raise InsufficientDataError("empty manifest")
    persons = sorted({r["person_id"] for r in manifest})
    domains = sorted({r["domain_id"] for r in manifest})
    name = case.name
    if name == "mix":
        rng = np.random.default_rng(seed)
        by_class = defaultdict(list)
        for i, r in enumerate(manifest):
            by_class[_label(r)].append(i)
        keys = sorted(by_class)
        share = np.array([case.test_fraction * len(by_class[k]) for k in keys])
        counts = np.floor(share).astype(int)
        # largest remainder: the total matches the overall fraction, each class within one
        extra = int(round(case.test_fraction * len(manifest))) - counts.sum()
        counts[np.argsort(-(share - counts), kind="stable")[:max(extra, 0)]] += 1
        test_idx = set()
        for k, n_test in zip(keys, counts):
            idx = np.array(by_class[k])
            test_idx.update(rng.permutation(idx)[:n_test].tolist())
        train = [r for i, r in enumerate(manifest) if i not in test_idx]
        test = [r for i, r in enumerate(manifest) if i in test_idx]
    elif name == "leave_one_user_out":
        if len(persons) < 2:
            raise InsufficientDataError("leave-one-user-out needs at least two persons")
        held = case.held_out or [persons[0]]
        _require_known(held, persons, "person")
        train, test = _split_by(manifest, "person_id", held)
    elif name == "leave_one_place_out":
        if len(domains) < 2:
            raise InsufficientDataError("leave-one-place-out needs at least two domains")
        held = case.held_out or [domains[0]]
        _require_known(held, domains, "domain")
        train, test = _split_by(manifest, "domain_id", held)
    elif name in ("cross_group", "small_train_cross_group"):
        if len(persons) < 2:
            raise InsufficientDataError("cross-group splits need at least two persons")
        group = case.train_group or persons[: len(persons) // 2]
        _require_known(group, persons, "person")
        if name == "small_train_cross_group":
            group = sorted(group)[: case.small_train_persons]
        test_persons = [p for p in persons if p not in set(case.train_group or persons[: len(persons) // 2])]
        train = [r for r in manifest if r["person_id"] in set(group)]
        test = [r for r in manifest if r["person_id"] in set(test_persons)]
    else:
        want_test = name == "plain_to_clutter"
        train = [r for r in manifest if bool(r["clutter"]) != want_test]
        test = [r for r in manifest if bool(r["clutter"]) == want_test]
    if not train or not test:
        raise InsufficientDataError(f"case {name!r} leaves an empty train or test side")
    return train, test


def _require_known(ids, known, what):
    missing = [i for i in ids if i not in known]
    if missing:
        raise InsufficientDataError(f"unknown {what} id(s): {missing}")


# metrics ------------------------------------------------------------------

def average_precision(scores, positives) -> float:
    """``sum_n (R_n - R_{n-1}) * P_n`` over descending distinct score thresholds."""
    scores = np.asarray(scores, dtype=float)
    positives = np.asarray(positives, dtype=bool)
    n_pos = positives.sum()
    if n_pos == 0:
        return float("nan")
    order = np.argsort(-scores, kind="stable")
    s, p = scores[order], positives[order]
    tp = np.cumsum(p)
    fp = np.cumsum(~p)
    last = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1]
    recall = tp[last] / n_pos
    precision = tp[last] / (tp[last] + fp[last])
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def roc_auc(scores, positives) -> float:
    """Trapezoidal area under the ROC curve from a full threshold sweep."""
    scores = np.asarray(scores, dtype=float)
    positives = np.asarray(positives, dtype=bool)
    n_pos, n_neg = positives.sum(), (~positives).sum()
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    order = np.argsort(-scores, kind="stable")
    s, p = scores[order], positives[order]
    last = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1]
    tpr = np.r_[0.0, np.cumsum(p)[last] / n_pos]
    fpr = np.r_[0.0, np.cumsum(~p)[last] / n_neg]
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))


@dataclass
class MetricsReport:
    accuracy: float
    precision: List[float]
    recall: List[float]
    f1: List[float]
    macro_f1: float
    confusion: List[List[int]]
    average_precision: List[Optional[float]]
    roc_auc: List[Optional[float]]
    n_samples: int
    recording_accuracy: Optional[float] = None
    recording_confusion: Optional[List[List[int]]] = None
    class_names: List[str] = field(default_factory=lambda: list(CLASS_NAMES))

    def confusion_normalized(self) -> np.ndarray:
        cm = np.asarray(self.confusion, dtype=float)
        rows = cm.sum(axis=1, keepdims=True)
        return np.divide(cm, rows, out=np.zeros_like(cm), where=rows > 0)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(_json_safe(self.to_dict()), indent=2, sort_keys=True)

    def to_text(self) -> str:
        lines = [f"accuracy   {self.accuracy:.4f}", f"macro-F1   {self.macro_f1:.4f}"]
        if self.recording_accuracy is not None:
            lines.append(f"recording  {self.recording_accuracy:.4f}")
        lines.append(f"{'class':<10} {'prec':>6} {'rec':>6} {'f1':>6} {'AP':>6} {'AUC':>6}")
        for i, name in enumerate(self.class_names):
            vals = [self.precision[i], self.recall[i], self.f1[i], self.average_precision[i], self.roc_auc[i]]
            lines.append(f"{name:<10} " + " ".join("   n/a" if v is None or v != v else f"{v:6.3f}" for v in vals))
        return "\n".join(lines) + "\n"


def _json_safe(obj):
    if isinstance(obj, float) and obj != obj:
        return None
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    return obj


def confusion_matrix(truths, predictions, n_classes: int = N_CLASSES) -> np.ndarray:
    cm = np.zeros((n_classes, n_classes), dtype=int)
    np.add.at(cm, (np.asarray(truths, dtype=int), np.asarray(predictions, dtype=int)), 1)
    return cm


def majority_vote(recording_ids, predictions) -> Dict[str, int]:
    """Most frequent prediction per recording; ties go to the lowest class."""
    votes = defaultdict(Counter)
    for rid, p in zip(recording_ids, predictions):
        votes[rid][int(p)] += 1
    return {rid: min(c, key=lambda k: (-c[k], k)) for rid, c in votes.items()}


def compute_metrics(predictions, scores, truths, n_classes: int = N_CLASSES,
                    recording_ids=None) -> MetricsReport:
    predictions = np.asarray(predictions, dtype=int)
    truths = np.asarray(truths, dtype=int)
    scores = np.asarray(scores, dtype=float)
    n = len(truths)
    if n == 0:
        raise InsufficientDataError("no predictions to score")
    if len(predictions) != n or scores.shape != (n, n_classes):
        raise ConfigError("predictions, scores (n x classes) and truths must align")
    cm = confusion_matrix(truths, predictions, n_classes)
    tp = np.diag(cm).astype(float)
    pred_tot, true_tot = cm.sum(axis=0), cm.sum(axis=1)
    precision = np.divide(tp, pred_tot, out=np.zeros(n_classes), where=pred_tot > 0)
    recall = np.divide(tp, true_tot, out=np.zeros(n_classes), where=true_tot > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros(n_classes), where=denom > 0)
    ap = [average_precision(scores[:, k], truths == k) for k in range(n_classes)]
    auc = [roc_auc(scores[:, k], truths == k) for k in range(n_classes)]
    report = MetricsReport(
        accuracy=float(tp.sum() / n), precision=precision.tolist(), recall=recall.tolist(),
        f1=f1.tolist(), macro_f1=float(f1.mean()), confusion=cm.tolist(),
        average_precision=ap, roc_auc=auc, n_samples=n)
    if recording_ids is not None:
        voted = majority_vote(recording_ids, predictions)
        truth_of = {rid: int(t) for rid, t in zip(recording_ids, truths)}
        keys = sorted(voted)
        rt = [truth_of[k] for k in keys]
        rp = [voted[k] for k in keys]
        report.recording_accuracy = float(np.mean(np.asarray(rt) == np.asarray(rp)))
        report.recording_confusion = confusion_matrix(rt, rp, n_classes).tolist()
    return report
