"""End-to-end experiment runner and the objective x augmentation ablation grid."""

from __future__ import annotations

import contextlib
import json
import logging
import os
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Mapping, Optional

import numpy as np
from threadpoolctl import threadpool_limits

from . import io
from .adapt import AdaptConfig, ExpressionModel, adaptation_loop, pretrain_source
from .config import deep_merge, dump_config, load_config
from .echosim import CLASS_NAMES, DomainProfile, LabeledSample, generate_dataset
from .errors import InsufficientDataError, StageError
from .estimators import AcousticAugmenter, HiddenLayerClassifier, SpectrogramFeaturizer
from .evaluation import CaseSpec, MetricsReport, build_case_split, compute_metrics
from .features import n_rows_below
from .nnet.model import ConvLayer, EncoderConfig
from .sigproc import ChirpSpec, Spectrogram

logger = logging.getLogger(__name__)

OBJECTIVE_LABELS = {"ce": "CE-only", "supcon": "SupCon-only", "combined": "combined"}


def effective_threads(requested: Optional[int] = None) -> int:
    """``EFL_THREADS`` overrides ``requested``; capped at the CPUs this process may use."""
    env = os.environ.get("EFL_THREADS")
    want = int(env) if env else int(requested or 1)
    return max(1, min(want, len(os.sched_getaffinity(0))))


@contextlib.contextmanager
def stage(name: str):
    """Re-raise any failure inside the block tagged with the stage name."""
    try:
        yield
    except StageError:
        raise
    except Exception as exc:  # noqa: BLE001 - every failure gets its stage tag
        raise StageError(name, exc) from exc


def chirp_from(cfg) -> ChirpSpec:
    return ChirpSpec(**cfg["chirp"])


def profiles_from(cfg) -> List[DomainProfile]:
    return [DomainProfile(**d) for d in cfg["data"]["domains"]]


def simulate(cfg) -> List[LabeledSample]:
    d = cfg["data"]
    return generate_dataset(profiles_from(cfg), d["persons_per_domain"], d["reps"], chirp_from(cfg),
                            seed=cfg["seed"], duration=d["duration"], frame_len=d["frame_len"],
                            shared_persons=d["shared_persons"])


def manifest_rows(samples: List[LabeledSample], store_name: str = "spectrograms.npz") -> List[dict]:
    rows = []
    for s in samples:
        row = s.manifest_row(f"{store_name}#{s.sample_id}")
        row["recording_id"] = s.recording_id
        row["augmented"] = False
        rows.append(row)
    return rows


def encoder_config(cfg, input_shape) -> EncoderConfig:
    m = dict(cfg["model"])
    convs = m.pop("convs", None)
    kw = {"input_shape": tuple(input_shape), **m}
    if convs:
        kw["convs"] = [ConvLayer(**c) for c in convs]
    return EncoderConfig(**kw)


def adapt_config(cfg) -> AdaptConfig:
    t, a = cfg["train"], cfg["adapt"]
    return AdaptConfig(
        epochs=a["epochs"] if a["enabled"] else 0, iterations_per_epoch=a["iterations_per_epoch"],
        batch_source=a["batch_source"], batch_target=a["batch_target"], tau=t["tau"],
        mad_threshold=a["mad_threshold"], lr=t["lr"], momentum=t["momentum"], objective=t["objective"],
        pretrain_max_epochs=t["pretrain_max_epochs"], pretrain_batch=t["pretrain_batch"],
        plateau_tol=t["plateau_tol"], plateau_window=t["plateau_window"], seed=cfg["seed"])


def save_samples(path, samples: List[LabeledSample], augmented=()) -> Path:
    """Spectrogram magnitudes keyed by sample id, plus the shared axes."""
    arrays = {s.sample_id: s.spectrogram.magnitudes for s in samples}
    arrays.update({r["sample_id"]: m for r, m in augmented})
    if samples:
        sp = samples[0].spectrogram
        arrays["__freq_axis__"] = sp.freq_axis
        arrays["__time_axis__"] = sp.time_axis
        arrays["__stft__"] = np.array([sp.window_len, sp.hop])
    path = Path(path)
    np.savez(path, **arrays)
    return path


def load_samples(manifest: List[dict], store) -> tuple:
    """Rebuild ``(samples, augmented)`` from manifest rows and a spectrogram store."""
    with np.load(store) as z:
        freqs, times = z["__freq_axis__"], z["__time_axis__"]
        window_len, hop = (int(v) for v in z["__stft__"])
        samples, augmented = [], []
        for r in manifest:
            if r["sample_id"] not in z.files:
                raise InsufficientDataError(f"{store} has no spectrogram for {r['sample_id']}")
            m = z[r["sample_id"]]
            if r.get("augmented"):
                augmented.append((r, m))
                continue
            samples.append(LabeledSample(
                Spectrogram(m, freqs, times, window_len, hop), CLASS_NAMES.index(r["class"]),
                r["person_id"], r["domain_id"], bool(r["clutter"]), r["sample_id"],
                r.get("recording_id", r["sample_id"]), int(r["frame_index"])))
    if not samples:
        raise InsufficientDataError("manifest lists no original samples")
    return samples, augmented


@dataclass
class PreparedData:
    train_rows: List[dict]
    test_rows: List[dict]
    X_train: np.ndarray
    y_train: np.ndarray
    X_test: np.ndarray
    y_test: np.ndarray
    test_recordings: List[str]


def prepare(cfg, samples: List[LabeledSample], out: Optional[Path] = None,
            augmented: Optional[List[tuple]] = None) -> PreparedData:
    """Split, optionally augment the training side, and build model inputs.

    ``augmented`` holds precomputed ``(manifest_row, cropped_magnitudes)``
    pairs; those whose source sample lands on the training side are used
    instead of augmenting on the fly.
    """
    rows = manifest_rows(samples)
    e = cfg["eval"]
    case = CaseSpec(e["case"], e["test_fraction"], e["held_out"], e["train_group"], e["small_train_persons"])
    train_rows, test_rows = build_case_split(rows, case, cfg["seed"])
    index = {s.sample_id: i for i, s in enumerate(samples)}
    f = cfg["features"]
    freq_axis = samples[0].spectrogram.freq_axis
    n_rows = n_rows_below(freq_axis, f["max_freq"])
    mags = np.stack([s.spectrogram.magnitudes[:n_rows] for s in samples])
    tr = [index[r["sample_id"]] for r in train_rows]
    te = [index[r["sample_id"]] for r in test_rows]
    X_tr, y_tr = mags[tr], np.array([samples[i].label for i in tr])
    a = cfg["augment"]
    if augmented:
        train_ids = {r["sample_id"] for r in train_rows}
        extra = [(r, m) for r, m in augmented if r.get("source_sample_id") in train_ids]
        if extra:
            X_tr = np.concatenate([X_tr, np.stack([m for _, m in extra])])
            y_tr = np.concatenate([y_tr, [CLASS_NAMES.index(r["class"]) for r, _ in extra]])
            train_rows.extend(dict(r) for r, _ in extra)
    elif a["enabled"]:
        aug = AcousticAugmenter(a["mode"], a["Dis"], a["K"], a["w"], a["exponent"], cfg["seed"])
        groups = [samples[i].person_id for i in tr]
        X_tr, y_tr, _ = aug.fit_resample(X_tr, y_tr, groups)
        for prov in aug.provenance_[len(tr):]:
            src = train_rows[int(prov["source_sample_id"])]
            row = dict(src, sample_id=src["sample_id"] + "-" + prov["mode"], augmented=True,
                       mode=prov["mode"], source_sample_id=src["sample_id"],
                       neighbor_ids=[train_rows[int(k)]["sample_id"] for k in prov["neighbor_ids"]],
                       spectrogram_path="")
            train_rows.append(row)
    feat = SpectrogramFeaturizer(np.inf, f["log"], f["standardize"]).fit(X_tr)
    if out is not None:
        io.write_jsonl(out / "manifests" / "dataset.jsonl", rows)
        io.write_jsonl(out / "manifests" / "train.jsonl", train_rows)
        io.write_jsonl(out / "manifests" / "test.jsonl", test_rows)
    return PreparedData(train_rows, test_rows, feat.transform(X_tr), y_tr, feat.transform(mags[te]),
                        np.array([samples[i].label for i in te]),
                        [samples[i].recording_id for i in te])


def classify(cfg, model: ExpressionModel, data: PreparedData) -> MetricsReport:
    c = cfg["classifier"]
    clf = HiddenLayerClassifier(hidden=c["hidden"], lr=c["lr"], epochs=c["epochs"],
                                batch_size=c["batch_size"], random_state=cfg["seed"])
    clf.fit(model.embed(data.X_train), data.y_train)
    Z_t = model.embed(data.X_test)
    proba = clf.predict_proba(Z_t)
    full = np.zeros((len(Z_t), 6))
    full[:, clf.classes_] = proba
    return compute_metrics(clf.classes_[np.argmax(proba, axis=1)], full, data.y_test,
                           recording_ids=data.test_recordings)


def _prepare_dirs(out: Path):
    for sub in ("manifests", "checkpoints", "logs", "reports"):
        (out / sub).mkdir(parents=True, exist_ok=True)


def run_experiment(config, out_dir, samples: Optional[List[LabeledSample]] = None,
                   init_checkpoint=None, pretrain_only: bool = False,
                   cache: Optional[Dict] = None, augmented: Optional[List[tuple]] = None) -> Path:
    """Run one experiment and write its artifacts under ``out_dir``.

    Layout: ``config.copy``, ``manifests/``, ``checkpoints/``, ``logs/``,
    ``reports/``. ``samples`` skips simulation; ``init_checkpoint`` skips
    pre-training; ``cache`` shares pre-trained encoders between ablation cells.
    """
    cfg = load_config(config)
    out = Path(out_dir)
    _prepare_dirs(out)
    (out / "config.copy").write_text(dump_config(cfg))
    with threadpool_limits(effective_threads(cfg["threads"])):
        return _run(cfg, out, samples, init_checkpoint, pretrain_only, cache, augmented)


def _run(cfg, out, samples, init_checkpoint, pretrain_only, cache, augmented=None):
    t0 = time.perf_counter()
    if samples is None:
        with stage("simulate"):
            samples = simulate(cfg)
    with stage("prepare"):
        data = prepare(cfg, samples, out, augmented)
    acfg = adapt_config(cfg)
    enc = encoder_config(cfg, data.X_train.shape[1:])
    with stage("pretrain"):
        key = _pretrain_key(cfg)
        if init_checkpoint is not None:
            model = ExpressionModel(enc, seed=cfg["seed"])
            model.store.load_state(io.read_checkpoint(init_checkpoint))
        elif cache is not None and key in cache:
            model = cache[key].copy()
        else:
            model = ExpressionModel(enc, seed=cfg["seed"])
            log: List[dict] = []
            pretrain_source(model, data.X_train, data.y_train, acfg, log)
            io.write_csv(out / "logs" / "pretrain_log.csv", log, ["phase", "epoch", "loss"])
            if cache is not None:
                cache[key] = model.copy()
        io.write_checkpoint(out / "checkpoints" / "pretrained.efck", model.store.state())
    report = {"case": cfg["eval"]["case"], "objective": cfg["train"]["objective"],
              "augment": cfg["augment"]["enabled"], "n_train": int(len(data.y_train)),
              "n_test": int(len(data.y_test))}
    with stage("classify"):
        source_only = classify(cfg, model, data)
    report["source_only"] = source_only.to_dict()
    final = source_only
    if not pretrain_only and acfg.epochs > 0:
        with stage("adapt"):
            res = adaptation_loop(model, data.X_train, data.y_train, data.X_test, acfg,
                                  y_t_true=data.y_test,
                                  sample_ids=[r["sample_id"] for r in data.test_rows])
            io.write_checkpoint(out / "checkpoints" / "adapted.efck", model.store.state())
            io.write_csv(out / "logs" / "train_log.csv", res.log, ["iter", "L_ce", "L_con_t", "lambda", "lr"])
            io.write_csv(out / "logs" / "pseudo_labels.csv", res.audit,
                         ["sample_id", "epoch", "pseudo_label", "drift_score", "kept", "true_label"])
        with stage("classify"):
            final = classify(cfg, model, data)
        report["adapted"] = final.to_dict()
        report["pseudo_label_accuracy"] = res.pseudo_accuracy
    report["accuracy"] = final.accuracy
    report["macro_f1"] = final.macro_f1
    with stage("report"):
        _write_reports(out, report, final, source_only)
    logger.info("experiment finished in %.1f s", time.perf_counter() - t0)
    return out


def _pretrain_key(cfg):
    return (cfg["augment"]["enabled"], cfg["train"]["objective"] == "supcon")


def _write_reports(out: Path, report: dict, final: MetricsReport, source_only: MetricsReport):

    from .evaluation import _json_safe

    (out / "reports" / "metrics.json").write_text(json.dumps(_json_safe(report), indent=2, sort_keys=True))
    names = final.class_names
    rows = [dict(true=n, **{p: final.confusion[i][j] for j, p in enumerate(names)}) for i, n in enumerate(names)]
    io.write_csv(out / "reports" / "confusion.csv", rows, ["true"] + names)
    text = ["source-only", source_only.to_text()]
    if "adapted" in report:
        text += ["adapted", final.to_text()]
    (out / "reports" / "summary.txt").write_text("\n".join(text))


# ablation ---------------------------------------------------------------

ABLATION_OBJECTIVES = ("ce", "supcon", "combined")


def ablation_suite(config, out_dir, objectives=ABLATION_OBJECTIVES) -> dict:
    """Run {augment off, on} x objectives and tabulate accuracy / macro-F1."""

    base = load_config(config)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with threadpool_limits(effective_threads(base["threads"])):
        with stage("simulate"):
            samples = simulate(base)
        cache: Dict = {}
        cells = []
        for aug in (False, True):
            for obj in objectives:
                cfg = deep_merge(base, {"augment": {"enabled": aug}, "train": {"objective": obj}})
                cell_dir = out / f"{'aug' if aug else 'noaug'}-{obj}"
                run_experiment(cfg, cell_dir, samples=samples, cache=cache)
                rep = json.loads((cell_dir / "reports" / "metrics.json").read_text())
                cells.append({"augment": aug, "objective": obj,
                              "accuracy": rep["accuracy"], "macro_f1": rep["macro_f1"],
                              "source_only_accuracy": rep["source_only"]["accuracy"]})
    table = {"cells": cells}
    (out / "ablation.json").write_text(json.dumps(table, indent=2, sort_keys=True))
    (out / "ablation.txt").write_text(format_ablation(cells))
    return table


def format_ablation(cells) -> str:
    lines = [f"{'augment':<8} {'objective':<12} {'accuracy':>9} {'macro-F1':>9} {'src-only':>9}"]
    for c in cells:
        lines.append(f"{'on' if c['augment'] else 'off':<8} {OBJECTIVE_LABELS[c['objective']]:<12} "
                     f"{c['accuracy']:9.4f} {c['macro_f1']:9.4f} {c['source_only_accuracy']:9.4f}")
    return "\n".join(lines) + "\n"
