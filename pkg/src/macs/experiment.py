"""Held-out-subject experiments on synthetic data: one split, one training run, one score."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import evaluate
from .data import FragmentSet, SynthSpec, inject_noise, make_fragment_set, synthesize
from .trainer import ModelParams, TrainConfig, Trainer, predict_proba, subject_split


@dataclass
class HoldoutResult:
    fragment_accuracy: float
    subject_accuracy: float
    # per-epoch stratification records, including trusted-set precision against the true labels
    epochs: list[dict] = field(default_factory=list)
    # held-out fragment accuracy after every epoch
    curve: list[float] = field(default_factory=list)
    seconds: float = 0.0
    params: ModelParams | None = None

    @property
    def precision(self) -> np.ndarray:
        return np.array([rec["precision"] for rec in self.epochs])


def holdout_sets(spec: SynthSpec, seed: int, alpha: float = 0.0, n_folds: int = 4,
                 per_subject: bool = True) -> tuple[FragmentSet, FragmentSet]:
    """Synthesize, hold out fold 0 of a subject-level split, and corrupt only the training part."""
    fs = make_fragment_set(synthesize(spec, seed), spec.fragment_len)
    folds = subject_split(fs, n_folds, seed)
    test = sorted(s for s, f in folds.items() if f == 0)
    train = sorted(s for s, f in folds.items() if f != 0)
    train_fs = inject_noise(fs.by_subjects(train), alpha, seed, per_subject=per_subject)
    return train_fs, fs.by_subjects(test)


def run_holdout(spec: SynthSpec, cfg: TrainConfig, alpha: float = 0.0, seed: int | None = None,
                track: bool = False) -> HoldoutResult:
    """Train on the noisy training subjects and score the clean held-out subjects.

    ``seed`` drives data, split and noise; it defaults to ``cfg.seed``.  With ``track``
    the held-out accuracy is recorded after every epoch (costs one extra forward pass each).
    """
    seed = cfg.seed if seed is None else seed
    train_fs, test_fs = holdout_sets(spec, seed, alpha)
    trainer = Trainer(train_fs, cfg)
    start = time.perf_counter()
    curve = []
    for epoch in range(trainer.cfg.epochs):
        trainer.run_epoch(epoch)
        if track:
            p = predict_proba(trainer.params, test_fs, trainer.cfg)
            curve.append(float(np.mean(p.argmax(axis=1) == test_fs.true_labels)))
    seconds = time.perf_counter() - start
    res = evaluate.evaluate(predict_proba(trainer.params, test_fs, trainer.cfg),
                            test_fs.subject_ids, test_fs.true_labels)
    return HoldoutResult(res["fragment"]["accuracy"], res["subject"]["accuracy"], list(trainer.log.epochs),
                         curve, seconds, trainer.params)
