"""Command-line entry point: synth, inject-noise, train, eval, cv, gradcheck, export-latent.

Exit codes: 0 success, 2 invalid input or arguments, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from dataclasses import replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import data, evaluate, gradcheck
from .diffcore import NumericalError
from .trainer import (ModelParams, TrainConfig, TrainLog, Trainer, forward, load_checkpoint,
                      predict_proba, save_checkpoint, subject_split)

logger = logging.getLogger("macs")

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def _content_hash(*paths: Path) -> str:
    """sha256 over the bytes of every file under the given paths, in sorted relative order."""
    h = hashlib.sha256()
    for root in paths:
        root = Path(root)
        files = sorted(p for p in root.rglob("*") if p.is_file()) if root.is_dir() else [root]
        for f in files:
            h.update(str(f.relative_to(root) if root.is_dir() else f.name).encode())
            h.update(f.read_bytes())
    return h.hexdigest()


def _write_manifest(out: Path, command: str, config: dict, seed: int, inputs: list[Path], started: str) -> None:
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "input_hash": _content_hash(*inputs) if inputs else None,
        "started": started,
        "finished": datetime.now(timezone.utc).isoformat(),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


def _write_csv(path: Path, rows: list[dict]) -> None:
    if not rows:
        path.write_text("")
        return
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def _flatten(prefix: str, report: dict) -> dict:
    return {f"{prefix}_{k}": v for k, v in report.items() if k != "flags"}


def _metrics_row(fold, epoch, result: dict, diag: dict | None = None) -> dict:
    row = {"fold": fold, "epoch": epoch, **_flatten("fragment", result["fragment"]),
           **_flatten("subject", result["subject"]), "threshold": result["threshold"]}
    if diag:
        row.update({k: diag[k] for k in ("trusted_0", "trusted_1", "precision", "recall")})
    return row


def _write_metrics(out: Path, rows: list[dict], extra: dict | None = None) -> None:
    _write_csv(out / "metrics.csv", rows)
    doc = {"note": "subject threshold (Youden J) is fit on the scored set itself; subject metrics are optimistic",
           "rows": rows, **(extra or {})}
    (out / "metrics.json").write_text(json.dumps(doc, indent=1, default=float))


# -- config handling ---------------------------------------------------------------------


def _load_config(args) -> TrainConfig:
    obj = json.loads(Path(args.config).read_text()) if getattr(args, "config", None) else {}
    cfg = TrainConfig.from_json(obj)
    top = {}
    for flag, key in (("epochs", "epochs"), ("batch", "batch_size"), ("lr", "lr"),
                      ("seed", "seed"), ("clip_seconds", "clip_seconds")):
        if getattr(args, flag, None) is not None:
            top[key] = getattr(args, flag)
    cfg = replace(cfg, **top)
    if args.tau is not None or args.memory is not None:
        cfg = replace(cfg, contrastive=replace(
            cfg.contrastive,
            **({"tau": args.tau} if args.tau is not None else {}),
            **({"memory": args.memory} if args.memory is not None else {})))
    if args.k is not None or args.warmup is not None:
        cfg = replace(cfg, stratifier=replace(
            cfg.stratifier,
            **({"k": args.k} if args.k is not None else {}),
            **({"warmup_epochs": args.warmup} if args.warmup is not None else {})))
    if args.sigma_hi is not None:
        cfg = replace(cfg, augment=replace(cfg.augment, sigma_hi=args.sigma_hi))
    return cfg


def _train_one(fs: data.FragmentSet, cfg: TrainConfig, out: Path, eval_fs=None, fold=None):
    trainer = Trainer(fs, cfg)
    rows = []
    best, best_acc = None, -1.0
    for epoch in range(trainer.cfg.epochs):
        rec = trainer.run_epoch(epoch)
        if eval_fs is not None:
            res = evaluate.evaluate(predict_proba(trainer.params, eval_fs, trainer.cfg),
                                    eval_fs.subject_ids, eval_fs.true_labels)
            rows.append(_metrics_row(fold, epoch, res, rec))
            if res["fragment"]["accuracy"] > best_acc:
                best, best_acc = trainer.params.copy(), res["fragment"]["accuracy"]
    out.mkdir(parents=True, exist_ok=True)
    if best is not None:
        # optimal-epoch weights by eval-set fragment accuracy; the final weights stay the default
        save_checkpoint(out / "checkpoint_best.bin", best, trainer.cfg)
    _write_csv(out / "losses.csv", trainer.log.steps)
    _write_csv(out / "stratification.csv", trainer.log.epochs)
    save_checkpoint(out / "checkpoint.bin", trainer.params, trainer.cfg)
    (out / "config.json").write_text(json.dumps(trainer.cfg.to_json(), indent=1, sort_keys=True))
    return trainer, rows


# -- subcommands -------------------------------------------------------------------------


def cmd_synth(args) -> int:
    spec = data.SynthSpec.from_json(json.loads(Path(args.spec).read_text())) if args.spec else data.SynthSpec()
    spec.validate()
    fs = data.make_fragment_set(data.synthesize(spec, args.seed), spec.fragment_len)
    data.write_archive(fs, args.out)
    logger.info("wrote %d fragments to %s", len(fs), args.out)
    return EXIT_OK


def cmd_inject_noise(args) -> int:
    fs = data.read_archive(args.input)
    noisy = data.inject_noise(fs, args.alpha, args.seed, per_subject=not args.per_fragment)
    data.write_archive(noisy, args.out)
    flipped = int((noisy.train_labels != noisy.true_labels).sum())
    logger.info("flipped %d of %d fragments", flipped, len(noisy))
    return EXIT_OK


def cmd_train(args) -> int:
    started = datetime.now(timezone.utc).isoformat()
    fs = data.read_archive(args.data)
    cfg = _load_config(args)
    eval_fs = data.read_archive(args.eval_data) if args.eval_data else None
    out = Path(args.out)
    trainer, rows = _train_one(fs, cfg, out, eval_fs)
    if rows:
        _write_metrics(out, rows)
    config = {"train": trainer.cfg.to_json(), "alpha_expected": args.alpha_expected}
    inputs = [Path(args.data)] + ([Path(args.eval_data)] if args.eval_data else [])
    _write_manifest(out, "train", config, trainer.cfg.seed, inputs, started)
    return EXIT_OK


def cmd_eval(args) -> int:
    started = datetime.now(timezone.utc).isoformat()
    fs = data.read_archive(args.data)
    params, cfg = load_checkpoint(args.checkpoint)
    res = evaluate.evaluate(predict_proba(params, fs, cfg), fs.subject_ids, fs.true_labels)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_metrics(out, [_metrics_row(None, cfg.epochs - 1, res)], {"flags": res["flags"]})
    _write_manifest(out, "eval", cfg.to_json(), cfg.seed, [Path(args.data), Path(args.checkpoint)], started)
    print(json.dumps({"fragment_accuracy": res["fragment"]["accuracy"],
                      "subject_accuracy": res["subject"]["accuracy"]}))
    return EXIT_OK


def cmd_cv(args) -> int:
    started = datetime.now(timezone.utc).isoformat()
    fs = data.read_archive(args.data)
    cfg = _load_config(args)
    folds = subject_split(fs, args.folds, cfg.seed)
    out = Path(args.out)
    summary = []
    all_rows = []
    for k in range(args.folds):
        test_subjects = sorted(s for s, f in folds.items() if f == k)
        train_fs = fs.by_subjects(sorted(s for s, f in folds.items() if f != k))
        test_fs = fs.by_subjects(test_subjects)
        trainer, rows = _train_one(train_fs, cfg, out / f"fold{k}", test_fs, fold=k)
        all_rows.extend(rows)
        final = rows[-1]
        summary.append({"fold": k, "fragment_accuracy": final["fragment_accuracy"],
                        "subject_accuracy": final["subject_accuracy"],
                        "fragment_f1": final["fragment_f1"]})
        logger.info("fold %d fragment accuracy %.4f", k, final["fragment_accuracy"])
    keys = ("fragment_accuracy", "subject_accuracy", "fragment_f1")
    stats = {key: (float(np.mean([r[key] for r in summary])), float(np.std([r[key] for r in summary])))
             for key in keys}
    summary.append({"fold": "mean(std)",
                    **{key: f"{100 * m:.2f}({100 * s:.2f})" for key, (m, s) in stats.items()}})
    _write_csv(out / "cv_summary.csv", summary)
    _write_metrics(out, all_rows, {"summary": summary})
    _write_manifest(out, "cv", {"train": cfg.to_json(), "folds": args.folds,
                                "assignment": {str(s): f for s, f in sorted(folds.items())}},
                    cfg.seed, [Path(args.data)], started)
    for row in summary:
        print(",".join(str(v) for v in row.values()))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = gradcheck.run_suite(args.size, range(args.seeds))
    failed = [r for r in results if not r.passed]
    worst = max(results, key=lambda r: r.error if np.isfinite(r.error) else np.inf)
    print(f"{len(results) - len(failed)}/{len(results)} checks passed; worst {worst.name} "
          f"seed {worst.seed} error {worst.error:.3g}")
    for r in failed:
        print(f"FAIL {r.name} seed {r.seed} error {r.error:.3g}")
    return EXIT_OK if not failed else EXIT_NUMERIC


def cmd_export_latent(args) -> int:
    fs = data.read_archive(args.data)
    params, cfg = load_checkpoint(args.checkpoint)
    z, probs = forward(params, fs.values(), cfg)
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject_id", "fragment_id", "true_label", "train_label", "p1"]
                   + [f"z{i}" for i in range(z.shape[1])])
        for f, zi, pi in zip(fs.fragments, z, probs):
            w.writerow([f.subject_id, f.fragment_id, f.true_label, f.train_label, repr(float(pi[1]))]
                       + [repr(float(v)) for v in zi])
    return EXIT_OK


def _add_train_flags(p):
    p.add_argument("--config")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--tau", type=float)
    p.add_argument("--memory", type=int, metavar="M")
    p.add_argument("--k", type=int, metavar="K")
    p.add_argument("--clip-seconds", type=float)
    p.add_argument("--sigma-hi", type=float)
    p.add_argument("--alpha-expected", type=float,
                   help="expected noise fraction; recorded in the manifest only")
    p.add_argument("--seed", type=int)
    p.add_argument("--warmup", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="macs", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="write a synthetic fragment archive")
    p.add_argument("--spec")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("inject-noise", help="flip training labels of a fraction of subjects")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--alpha", type=float, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--per-fragment", action="store_true", help="flip fragments instead of subjects")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_inject_noise)

    p = sub.add_parser("train", help="train on an archive")
    p.add_argument("--data", required=True)
    p.add_argument("--eval-data", help="archive scored after every epoch into metrics.csv")
    p.add_argument("--out", required=True)
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on an archive")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("cv", help="subject-independent cross-validation")
    p.add_argument("--data", required=True)
    p.add_argument("--folds", type=int, default=4)
    p.add_argument("--out", required=True)
    _add_train_flags(p)
    p.set_defaults(func=cmd_cv)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--size", choices=("small", "full"), default="small")
    p.add_argument("--seeds", type=int, default=10)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("export-latent", help="write latents and class-1 probabilities as CSV")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_latent)
    return parser


def main(argv=None) -> int:
    level = os.environ.get("MACS_LOG", "info").upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO), format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except NumericalError as exc:
        logger.error("numerical failure: %s", exc)
        return EXIT_NUMERIC
    except (ValueError, OSError, KeyError) as exc:
        logger.error("%s", exc)
        return EXIT_INVALID
