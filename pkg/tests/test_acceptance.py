"""Acceptance suite: one test per criterion, each printing a single PASS/FAIL line.

Criteria 8-11 share cached training runs on the default synthetic task (module-scope
fixtures), so the expensive part runs once per session.
"""

import json
import math
import time

import numpy as np
import pytest

from macs import encoder as enc
from macs import losses as ls
from macs import projector as proj
from macs.cli import main
from macs.diffcore import Tensor
from macs.experiment import run_holdout
from macs.gradcheck import run_suite
from macs.stratifier import StratifierConfig, stratify
from macs.switcher import draw_lambda, route
from macs.trainer import ModelParams, TrainConfig, train_step
from macs.data import SynthSpec
from oracles import bf_dl, bf_st, bf_twin, random_batch, reference_stratify

SEEDS = (0, 1, 2)
NOISE = 0.3


def report(capsys, number: int, ok: bool, detail: str) -> None:
    with capsys.disabled():
        print(f"\ncriterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


# -- 1. gradients -----------------------------------------------------------------------


def test_c01_gradient_suite(capsys):
    start = time.perf_counter()
    results = run_suite("small", range(10))
    elapsed = time.perf_counter() - start
    worst = max(results, key=lambda r: r.error if np.isfinite(r.error) else np.inf)
    failed = [f"{r.name}/{r.seed}" for r in results if not r.passed]
    ok = not failed and elapsed <= 60.0
    report(capsys, 1, ok, f"{len(results)} checks, worst {worst.name} {worst.error:.2e}, "
                          f"{elapsed:.1f} s, failed {failed}")


# -- 2. SPD boundaries ------------------------------------------------------------------


def test_c02_spd_invariants(capsys):
    violations, seen = [], 0

    def monitor(stage, mats):
        nonlocal seen
        eps = enc.EPS_SPD if stage == "to_spd" else enc.EPS_REIG
        for m in mats.reshape((-1,) + mats.shape[-2:]):
            seen += 1
            asym = np.abs(m - m.T).max()
            low = np.linalg.eigvalsh(m).min()
            if asym > 1e-10 or low < eps / 2:
                violations.append((stage, asym, low))

    rng = np.random.default_rng(0)
    for i in range(1000):
        d = int(rng.choice([2, 4, 6]))
        cfg = enc.EncoderConfig(d=d, d1=max(1, d // 2), n_clips=int(rng.integers(2, 4)), kernel=5,
                                attention=("mixing", "literal")[i % 2])
        p = {k: Tensor(v) for k, v in enc.init_params(cfg, rng).items()}
        x = rng.normal(size=(2, d, 16 * cfg.n_clips)) * rng.uniform(0.01, 10.0)
        if i % 10 == 0:
            # rank-deficient input: duplicated channel and a flat one
            x[:, 0] = x[:, -1]
            x[:, d // 2] = 0.0
        enc.encode(Tensor(x), p, cfg, monitor=monitor)
    report(capsys, 2, not violations, f"{seen} matrices checked, {len(violations)} violations")


# -- 3. log-Euclidean metric -------------------------------------------------------------


def _rand_spd(rng, d):
    a = rng.normal(size=(d, d))
    return a @ a.T + 0.1 * np.eye(d)


def test_c03_log_euclidean_properties(capsys):
    def dist(a, b):
        return float(enc.le_dist(Tensor(a), Tensor(b)).data)

    worst = 0.0
    rng = np.random.default_rng(3)
    for d in (2, 4, 8):
        worst = max(worst, abs(dist(np.eye(d), math.e * np.eye(d)) - d))
        for _ in range(100):
            x, y = _rand_spd(rng, d), _rand_spd(rng, d)
            c = float(rng.uniform(0.1, 10.0))
            base = dist(x, y)
            worst = max(worst, abs(dist(x, x)), abs(dist(y, x) - base), abs(dist(c * x, c * y) - base),
                        abs(dist(np.linalg.inv(x), np.linalg.inv(y)) - base))
    report(capsys, 3, worst <= 1e-8, f"max deviation {worst:.2e} over d in (2, 4, 8)")


# -- 4. loss oracles ---------------------------------------------------------------------


def test_c04_loss_oracles(capsys):
    worst = 0.0
    for seed in range(50):
        z, trusted, labels, partner, lam, memory, tau = random_batch(seed)
        zt = Tensor(z)
        pairs = [
            (ls.loss_ag(zt, ~trusted, memory, tau), bf_twin(z, ~trusted, memory, tau)),
            (ls.loss_sw(zt, trusted, memory, tau), bf_twin(z, trusted, memory, tau)),
            (ls.loss_st(zt, trusted, labels, partner, lam, memory, tau),
             bf_st(z, trusted, labels, partner, lam, memory, tau)),
        ]
        rng = np.random.default_rng(seed)
        probs = rng.dirichlet([1, 1], size=len(trusted))
        aux = rng.dirichlet([1, 1], size=len(trusted))
        pairs.append((ls.loss_dl(Tensor(probs), ls.dl_targets(trusted, labels, partner, lam, aux)),
                      bf_dl(probs, trusted, labels, partner, lam, aux)))
        worst = max(worst, max(abs(float(got.data) - want) for got, want in pairs))
    report(capsys, 4, worst <= 1e-10, f"50 batches, max |vectorized - loops| {worst:.2e}")


# -- 5. stratifier oracle ----------------------------------------------------------------


def test_c05_stratifier_oracle(capsys):
    mismatches = 0
    rng = np.random.default_rng(5)
    for i in range(50):
        n = int(rng.integers(4, 65))
        z = rng.normal(size=(n, int(rng.integers(1, 6))))
        if i % 3 == 0:
            z = np.round(z)
        y = rng.integers(0, 2, n)
        k = int(rng.integers(1, n))
        got = stratify(z, y, StratifierConfig(k=k), 0).trusted.tolist()
        mismatches += got != reference_stratify(z.tolist(), y.tolist(), k)
    report(capsys, 5, mismatches == 0, f"50 instances, {mismatches} id-set mismatches")


# -- 6. switcher -------------------------------------------------------------------------


def test_c06_switcher_contracts(capsys):
    rng = np.random.default_rng(6)
    lam = np.array([draw_lambda(rng) for _ in range(100_000)])
    in_range = bool(lam.min() >= 0.5 and lam.max() <= 1.0)
    changed = 0
    for _ in range(100):
        b = int(rng.integers(2, 17))
        views = rng.normal(size=(3, b, 4, 8))
        trusted = rng.random(b) < 0.5
        out = route(views, trusted, rng).views
        changed += not np.array_equal(out[:, ~trusted], views[:, ~trusted])
    ok = in_range and 0.745 <= lam.mean() <= 0.755 and changed == 0
    report(capsys, 6, ok, f"lambda in [{lam.min():.4f}, {lam.max():.4f}], mean {lam.mean():.4f}; "
                          f"{changed} of 100 batches altered a distrusted sample")


# -- 7. constraint enforcement -----------------------------------------------------------


def test_c07_distrusted_labels_are_inert(capsys):
    differing = 0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        b = int(rng.choice([4, 6, 8]))
        cfg = TrainConfig(seed=seed, batch_size=b, encoder=enc.EncoderConfig(d=4, d1=2, kernel=5, n_clips=2),
                          projector=proj.ProjectorConfig(hidden=8, z_dim=4),
                          contrastive=ls.ContrastiveConfig(memory=int(rng.integers(0, 9))))
        x = rng.normal(size=(b, 4, 32))
        labels = rng.integers(0, 2, b)
        trusted = rng.random(b) < 0.5
        trusted[0], trusted[-1] = True, False
        aux = rng.dirichlet([1, 1], size=b)
        mem_z = rng.normal(size=(3, 4))
        outcomes = []
        for flip in (False, True):
            lab = labels.copy()
            if flip:
                lab[~trusted] = 1 - lab[~trusted]
            params = ModelParams.init(cfg)
            memory = ls.MemoryBank(cfg.contrastive.memory)
            memory.push(mem_z / np.linalg.norm(mem_z, axis=1, keepdims=True), [0, 1, 0], [True, False, True])
            train_step(params, {}, x, lab, trusted, aux, memory, cfg, 0.1, np.random.default_rng(seed))
            outcomes.append(params)
        differing += not outcomes[0].equal(outcomes[1])
    report(capsys, 7, differing == 0, f"20 configurations, {differing} with a different update")


# -- 8-11. training on the default synthetic task -----------------------------------------


SPEC = SynthSpec()


@pytest.fixture(scope="module")
def clean_run():
    return run_holdout(SPEC, TrainConfig(seed=0), alpha=0.0)


@pytest.fixture(scope="module")
def noisy_runs():
    return [run_holdout(SPEC, TrainConfig(seed=s), alpha=NOISE) for s in SEEDS]


@pytest.fixture(scope="module")
def ce_runs():
    return [run_holdout(SPEC, TrainConfig(seed=s, mode="ce"), alpha=NOISE) for s in SEEDS]


@pytest.fixture(scope="module")
def no_memory_runs():
    return [run_holdout(SPEC, TrainConfig(seed=s, contrastive=ls.ContrastiveConfig(memory=0)), alpha=NOISE)
            for s in SEEDS]


def _median(runs, attr):
    return float(np.median([getattr(r, attr) for r in runs]))


def test_c08_clean_separability(capsys, clean_run):
    ok = clean_run.fragment_accuracy >= 0.95 and clean_run.seconds <= 600
    report(capsys, 8, ok, f"alpha=0 held-out fragment accuracy {clean_run.fragment_accuracy:.3f}, "
                          f"{clean_run.seconds:.0f} s")


def test_c09_noisy_recovery(capsys, clean_run, noisy_runs):
    frag = _median(noisy_runs, "fragment_accuracy")
    subj = _median(noisy_runs, "subject_accuracy")
    ok = frag >= clean_run.fragment_accuracy - 0.10 and subj >= 0.85
    report(capsys, 9, ok, f"alpha={NOISE} median fragment {frag:.3f} (clean {clean_run.fragment_accuracy:.3f}), "
                          f"median subject {subj:.3f}; per seed "
                          f"{[round(r.fragment_accuracy, 3) for r in noisy_runs]}")


def test_c10_trusted_precision_trajectory(capsys, noisy_runs):
    # element-wise median over seeds of the per-epoch trusted-set precision
    traj = np.median(np.stack([r.precision for r in noisy_runs]), axis=0)
    tail = traj[-10:]
    drops = np.diff(tail)
    ok = traj[-1] >= 0.90 and drops.min() >= -0.02
    report(capsys, 10, ok, f"final median precision {traj[-1]:.3f}, largest drop over last 10 epochs "
                           f"{-min(drops.min(), 0.0):.3f}")


def test_c11_ablation_directions(capsys, noisy_runs, ce_runs, no_memory_runs):
    full = _median(noisy_runs, "fragment_accuracy")
    ce = _median(ce_runs, "fragment_accuracy")
    m0 = _median(no_memory_runs, "fragment_accuracy")
    ok = ce < full and m0 <= full + 0.02
    report(capsys, 11, ok, f"median accuracy: full {full:.3f}, w/o stratification (CE) {ce:.3f}, M=0 {m0:.3f}")


# -- 12. determinism ---------------------------------------------------------------------


TINY = {"n_subjects_per_class": 3, "d": 4, "seconds": 4, "sample_rate": 64.0, "fragment_seconds": 1.0,
        "template0": np.eye(4).tolist(), "template1": (np.full((4, 4), 0.5) + 0.5 * np.eye(4)).tolist()}


def test_c12_cli_determinism(capsys, tmp_path):
    (tmp_path / "spec.json").write_text(json.dumps(TINY))
    (tmp_path / "cfg.json").write_text(json.dumps({"encoder": {"kernel": 5, "d1": 2},
                                                   "projector": {"hidden": 8, "z_dim": 4}}))
    assert main(["synth", "--spec", str(tmp_path / "spec.json"), "--seed", "4", "--out", str(tmp_path / "clean")]) == 0
    assert main(["inject-noise", "--in", str(tmp_path / "clean"), "--alpha", "0.34", "--seed", "4",
                 "--out", str(tmp_path / "noisy")]) == 0
    for run in ("a", "b"):
        assert main(["train", "--data", str(tmp_path / "noisy"), "--config", str(tmp_path / "cfg.json"),
                     "--epochs", "2", "--batch", "8", "--k", "3", "--memory", "16", "--clip-seconds", "0.5",
                     "--seed", "9", "--out", str(tmp_path / run)]) == 0
    names = ("checkpoint.bin", "checkpoint.json", "losses.csv", "stratification.csv", "config.json")
    same = [n for n in names if (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes()]
    report(capsys, 12, len(same) == len(names), f"identical files: {same}")
