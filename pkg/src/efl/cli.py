"""``efl`` command line.

Every subcommand works on a run directory. ``simulate`` fills it with raw
recordings, ``preprocess`` turns those into spectrograms and a manifest,
``augment`` appends augmented samples, and ``train`` / ``adapt`` / ``eval``
/ ``ablate`` run the learning stages on whatever the directory holds (or on a
fresh simulation when it holds nothing).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import io
from .config import deep_merge, dump_config, load_config
from .echosim import CLASS_NAMES, direct_path_template, iter_scenes, simulate_recording
from .errors import EflError, InsufficientDataError, NumericError
from .estimators import AcousticAugmenter
from .evaluation import CASE_ALIASES, CASES
from .experiment import (ablation_suite, chirp_from, effective_threads, load_samples, profiles_from,
                         run_experiment, save_samples)
from .features import n_rows_below
from .sigproc import preprocess as preprocess_recording

logger = logging.getLogger("efl")

STORE = "spectrograms.npz"
DATASET = Path("manifests") / "dataset.jsonl"
RECORDINGS = "recordings.jsonl"


def _config(args, run_dir: Optional[Path] = None) -> dict:
    """Config from ``--config``, else the run directory's copy, else quickstart."""
    source = args.config
    if source is None and run_dir is not None and (run_dir / "config.copy").exists():
        source = run_dir / "config.copy"
    cfg = load_config(source if source is not None else "quickstart")
    over = {}
    if args.seed is not None:
        over["seed"] = args.seed
    if args.threads is not None:
        over["threads"] = args.threads
    return load_config(deep_merge(cfg, over)) if over else cfg


def _write_config(run_dir: Path, cfg: dict):
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.copy").write_text(dump_config(cfg))


# subcommands ----------------------------------------------------------------

def cmd_simulate(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    _write_config(out, cfg)
    d = cfg["data"]
    chirp = chirp_from(cfg)
    rows = []
    for rid, scene in iter_scenes(profiles_from(cfg), d["persons_per_domain"], d["reps"], cfg["seed"],
                                  shared_persons=d["shared_persons"]):
        rec = simulate_recording(scene, chirp, d["duration"])
        tmpl = direct_path_template(scene, chirp, d["duration"])
        path = Path("recordings") / f"{rid}.eflb"
        tpath = Path("recordings") / f"{rid}.direct.eflb"
        io.write_waveform(out / path, rec)
        io.write_waveform(out / tpath, tmpl)
        rows.append({"recording_id": rid, "class": CLASS_NAMES[int(scene.expression)],
                     "person_id": scene.person_id, "domain_id": scene.domain_id,
                     "clutter": scene.clutter, "path": str(path), "template_path": str(tpath)})
    io.write_jsonl(out / RECORDINGS, rows)
    print(f"wrote {len(rows)} recordings to {out}")
    return 0


def cmd_preprocess(args) -> int:
    run = Path(args.in_dir)
    cfg = _config(args, run)
    if not (run / RECORDINGS).exists():
        raise InsufficientDataError(f"{run / RECORDINGS} not found; run `efl simulate` first")
    chirp = chirp_from(cfg)
    from .echosim import LabeledSample

    samples = []
    rows = []
    for r in io.read_jsonl(run / RECORDINGS):
        rec = io.load_recording(run / r["path"])
        tmpl = io.load_recording(run / r["template_path"]) if r.get("template_path") else None
        frames = preprocess_recording(rec, chirp, cfg["data"]["frame_len"], template=tmpl)
        for k, spec in enumerate(frames):
            s = LabeledSample(spec, CLASS_NAMES.index(r["class"]), r["person_id"], r["domain_id"],
                              bool(r["clutter"]), f"{r['recording_id']}-f{k}", r["recording_id"], k)
            samples.append(s)
            row = s.manifest_row(f"{STORE}#{s.sample_id}")
            row.update(recording_id=s.recording_id, augmented=False)
            rows.append(row)
            if args.export_csv:
                io.write_spectrogram_csv(run / "spectrograms" / f"{s.sample_id}.csv", spec)
    save_samples(run / STORE, samples)
    io.write_jsonl(run / DATASET, rows)
    print(f"wrote {len(rows)} spectrogram frames to {run / STORE}")
    return 0


def _load_run(run: Path):
    if not (run / DATASET).exists():
        return None, None
    return load_samples(io.read_jsonl(run / DATASET), run / STORE)


def cmd_augment(args) -> int:
    run = Path(args.in_dir)
    cfg = _config(args, run)
    samples, old = _load_run(run)
    if samples is None:
        raise InsufficientDataError(f"{run / DATASET} not found; run `efl preprocess` first")
    if old:
        logger.info("replacing %d previously augmented samples", len(old))
    n_rows = n_rows_below(samples[0].spectrogram.freq_axis, cfg["features"]["max_freq"])
    X = np.stack([s.spectrogram.magnitudes[:n_rows] for s in samples])
    aug = AcousticAugmenter(args.mode, args.dis, args.k, args.w, cfg["augment"]["exponent"], cfg["seed"])
    Xa, _, _ = aug.fit_resample(X, [s.label for s in samples], [s.person_id for s in samples])
    new = []
    for prov, m in zip(aug.provenance_[len(samples):], Xa[len(samples):]):
        src = samples[int(prov["source_sample_id"])]
        row = src.manifest_row(f"{STORE}#{src.sample_id}-{prov['mode']}")
        row.update(sample_id=f"{src.sample_id}-{prov['mode']}", recording_id=src.recording_id,
                   augmented=True, mode=prov["mode"], source_sample_id=src.sample_id,
                   neighbor_ids=[samples[int(k)].sample_id for k in prov["neighbor_ids"]])
        new.append((row, m))
    rows = [r for r in io.read_jsonl(run / DATASET) if not r.get("augmented")]
    io.write_jsonl(run / DATASET, rows + [r for r, _ in new])
    save_samples(run / STORE, samples, new)
    print(f"appended {len(new)} {args.mode} samples to {run / DATASET}")
    return 0


def _run_learning(args, cfg, **kw) -> Path:
    run = Path(args.in_dir) if args.in_dir else None
    samples, augmented = _load_run(run) if run is not None else (None, None)
    if run is not None and samples is None:
        raise InsufficientDataError(f"{run / DATASET} not found; run `efl preprocess` first")
    return run_experiment(cfg, args.out, samples=samples, augmented=augmented, **kw)


def _print_report(out: Path):
    print((out / "reports" / "summary.txt").read_text(), end="")


def cmd_train(args) -> int:
    cfg = _config(args, Path(args.in_dir) if args.in_dir else None)
    out = _run_learning(args, cfg, pretrain_only=True)
    print(f"pre-trained checkpoint: {out / 'checkpoints' / 'pretrained.efck'}")
    _print_report(out)
    return 0


def cmd_adapt(args) -> int:
    cfg = _config(args, Path(args.in_dir) if args.in_dir else None)
    if not cfg["adapt"]["enabled"]:
        cfg = deep_merge(cfg, {"adapt": {"enabled": True}})
    out = _run_learning(args, cfg, init_checkpoint=args.checkpoint)
    print(f"adapted checkpoint: {out / 'checkpoints' / 'adapted.efck'}")
    _print_report(out)
    return 0


def cmd_eval(args) -> int:
    cfg = _config(args, Path(args.in_dir) if args.in_dir else None)
    case = CASE_ALIASES.get(args.case, args.case)
    ev = {"case": case}
    if args.held_out:
        ev["held_out"] = args.held_out
    elif case != cfg["eval"]["case"]:
        ev["held_out"] = None
    over = {"eval": ev}
    if args.no_adapt:
        over["adapt"] = {"enabled": False}
    cfg = load_config(deep_merge(cfg, over))
    out = _run_learning(args, cfg, init_checkpoint=args.checkpoint)
    metrics = json.loads((out / "reports" / "metrics.json").read_text())
    if args.report:
        Path(args.report).parent.mkdir(parents=True, exist_ok=True)
        Path(args.report).write_text(json.dumps(metrics, indent=2, sort_keys=True))
    _print_report(out)
    return 0


def cmd_ablate(args) -> int:
    cfg = _config(args)
    table = ablation_suite(cfg, args.out)
    print((Path(args.out) / "ablation.txt").read_text(), end="")
    return 0 if len(table["cells"]) == 6 else 1


# parser -----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="override the config seed")
    common.add_argument("--threads", type=int, default=None,
                        help="worker threads (EFL_THREADS takes precedence)")
    common.add_argument("--verbose", "-v", action="count", default=0)
    common.add_argument("--config", default=None,
                        help="YAML config file or bundled name (quickstart, benchmark)")

    p = argparse.ArgumentParser(prog="efl", parents=[common],
                                description="Acoustic facial-expression sensing experiments")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="simulate raw recordings")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("preprocess", parents=[common], help="recordings to spectrogram frames")
    s.add_argument("--in", dest="in_dir", required=True)
    s.add_argument("--export-csv", action="store_true", help="also write one CSV per spectrogram")
    s.set_defaults(func=cmd_preprocess)

    s = sub.add_parser("augment", parents=[common], help="append augmented samples to the manifest")
    s.add_argument("--in", dest="in_dir", default=".")
    s.add_argument("--mode", choices=["intra", "inter"], default="intra")
    s.add_argument("--k", type=int, default=4)
    s.add_argument("--w", type=float, default=0.5)
    s.add_argument("--dis", type=int, default=4)
    s.set_defaults(func=cmd_augment)

    def learning(name, func, help_):
        s = sub.add_parser(name, parents=[common], help=help_)
        s.add_argument("--in", dest="in_dir", default=None, help="run directory from `efl preprocess`")
        s.add_argument("--out", default=f"efl-{name}", help="artifacts directory")
        s.set_defaults(func=func)
        return s

    learning("train", cmd_train, "pre-train on the source side")
    s = learning("adapt", cmd_adapt, "adapt a checkpoint to the target side")
    s.add_argument("--checkpoint", default=None)
    s = learning("eval", cmd_eval, "train, adapt and score one evaluation case")
    s.add_argument("--case", default="mix", choices=sorted(set(CASES) | set(CASE_ALIASES)))
    s.add_argument("--held-out", nargs="+", default=None, help="person or domain ids to hold out")
    s.add_argument("--report", default=None, help="write the metrics JSON here")
    s.add_argument("--checkpoint", default=None)
    s.add_argument("--no-adapt", action="store_true")

    s = sub.add_parser("ablate", parents=[common], help="augmentation x objective grid")
    s.add_argument("--out", default="efl-ablation")
    s.set_defaults(func=cmd_ablate)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads is not None and not os.environ.get("EFL_THREADS"):
        logger.info("using %d thread(s)", effective_threads(args.threads))
    try:
        return args.func(args)
    except EflError as exc:
        print(f"efl {args.command}: {exc}", file=sys.stderr)
        return exc.exit_code
    except ArithmeticError as exc:
        print(f"efl {args.command}: numeric failure: {exc}", file=sys.stderr)
        return NumericError.exit_code
    except OSError as exc:
        print(f"efl {args.command}: {exc}", file=sys.stderr)
        return InsufficientDataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
