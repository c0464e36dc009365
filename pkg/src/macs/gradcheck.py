"""Central-difference gradient checks for every diffcore op and for the full training loss."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from . import diffcore as dc
from . import encoder as enc
from . import losses as ls
from . import projector as proj
from .diffcore import Tensor, grad_check

TOLERANCE = 1e-4
MIN_EIG_GAP = 1e-4


@dataclass
class CheckResult:
    name: str
    seed: int
    error: float
    tol: float = TOLERANCE

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.error) and self.error <= self.tol)


def min_eig_gap(s: np.ndarray) -> float:
    lam = np.linalg.eigvalsh(0.5 * (s + np.swapaxes(s, -1, -2)))
    return float(np.diff(lam, axis=-1).min()) if lam.shape[-1] > 1 else np.inf


def _spd(rng, n, lo=0.5):
    a = rng.normal(size=(n, n))
    return a @ a.T / n + lo * np.eye(n)


def _weighted(out: Tensor, rng) -> Tensor:
    """Scalarize with fixed random weights so every output coordinate matters."""
    return dc.sum_(out * rng.normal(size=out.shape))


def _op_cases() -> dict[str, Callable[[np.random.Generator], tuple[Callable, np.ndarray]]]:
    cases = {}

    def case(name):
        def deco(fn):
            cases[name] = fn
            return fn
        return deco

    @case("add")
    def _(rng):
        c = rng.normal(size=(3, 4)); w = rng.normal(size=(3, 4))
        return (lambda x: dc.sum_(dc.add(x, c) * w)), rng.normal(size=(3, 4))

    @case("add_broadcast")
    def _(rng):
        c = rng.normal(size=(2, 3, 4)); w = rng.normal(size=(2, 3, 4))
        return (lambda x: dc.sum_(dc.add(c, x) * w)), rng.normal(size=(4,))

    @case("sub")
    def _(rng):
        c = rng.normal(size=(3, 4)); w = rng.normal(size=(3, 4))
        return (lambda x: dc.sum_(dc.sub(c, x) * x * w)), rng.normal(size=(3, 4))

    @case("mul")
    def _(rng):
        c = rng.normal(size=(3, 1)); w = rng.normal(size=(3, 4))
        return (lambda x: dc.sum_(dc.mul(x, x) * c * w)), rng.normal(size=(3, 4))

    @case("scalar_mul")
    def _(rng):
        w = rng.normal(size=5)
        return (lambda x: dc.sum_(dc.scalar_mul(x, -2.5) * w)), rng.normal(size=5)

    @case("matmul")
    def _(rng):
        b = rng.normal(size=(4, 2)); w = rng.normal(size=(3, 2))
        return (lambda x: dc.sum_(dc.matmul(x, b) * w)), rng.normal(size=(3, 4))

    @case("matmul_batched_right")
    def _(rng):
        a = rng.normal(size=(2, 3, 4)); w = rng.normal(size=(2, 3, 2))
        return (lambda x: dc.sum_(dc.matmul(a, x) * w)), rng.normal(size=(4, 2))

    @case("transpose")
    def _(rng):
        w = rng.normal(size=(4, 3))
        return (lambda x: dc.sum_(dc.transpose(x) * w)), rng.normal(size=(3, 4))

    @case("permute_reshape")
    def _(rng):
        w = rng.normal(size=(4, 6))
        return (lambda x: dc.sum_(dc.reshape(dc.permute(x, (2, 0, 1)), (4, 6)) * w)), rng.normal(size=(2, 3, 4))

    @case("exp")
    def _(rng):
        w = rng.normal(size=6)
        return (lambda x: dc.sum_(dc.exp(x) * w)), rng.normal(size=6)

    @case("log")
    def _(rng):
        w = rng.normal(size=6)
        return (lambda x: dc.sum_(dc.log(x) * w)), rng.uniform(0.5, 2.0, size=6)

    @case("tanh")
    def _(rng):
        w = rng.normal(size=6)
        return (lambda x: dc.sum_(dc.tanh(x) * w)), rng.normal(size=6)

    @case("maximum")
    def _(rng):
        w = rng.normal(size=8)
        x = rng.normal(size=8)
        x[np.abs(x) < 0.05] += 0.2  # keep clear of the kink
        return (lambda x: dc.sum_(dc.maximum(x, 0.0) * w)), x

    @case("softmax")
    def _(rng):
        w = rng.normal(size=(3, 5))
        return (lambda x: dc.sum_(dc.softmax(x) * w)), rng.normal(size=(3, 5))

    @case("log_softmax")
    def _(rng):
        w = rng.normal(size=(3, 5))
        return (lambda x: dc.sum_(dc.log_softmax(x) * w)), rng.normal(size=(3, 5))

    @case("conv_time_input")
    def _(rng):
        k = rng.normal(size=(3, 5)); b = rng.normal(size=3); w = rng.normal(size=(2, 3, 12))
        return (lambda x: dc.sum_(dc.conv_time(x, Tensor(k), Tensor(b)) * w)), rng.normal(size=(2, 3, 12))

    @case("conv_time_kernel")
    def _(rng):
        xs = rng.normal(size=(2, 3, 30)); w = rng.normal(size=(2, 3, 30))
        return (lambda k: dc.sum_(dc.conv_time(Tensor(xs), k) * w)), rng.normal(size=(3, 25))

    @case("conv_channels")
    def _(rng):
        xs = rng.normal(size=(2, 3, 7)); w = rng.normal(size=(2, 3, 7))
        return (lambda k: dc.sum_(dc.conv_channels(Tensor(xs), k) * w)), rng.normal(size=(3, 3))

    @case("layer_norm_input")
    def _(rng):
        g = rng.normal(size=3); b = rng.normal(size=3); w = rng.normal(size=(2, 3, 9))
        return (lambda x: dc.sum_(dc.layer_norm(x, Tensor(g), Tensor(b)) * w)), rng.normal(size=(2, 3, 9))

    @case("layer_norm_scale")
    def _(rng):
        xs = rng.normal(size=(2, 3, 9)); b = rng.normal(size=3); w = rng.normal(size=(2, 3, 9))
        return (lambda g: dc.sum_(dc.layer_norm(Tensor(xs), g, Tensor(b)) * w)), rng.normal(size=3)

    @case("sum_mean")
    def _(rng):
        w = rng.normal(size=4)
        return (lambda x: dc.sum_(dc.mean(x * x, axis=0) * w) + dc.sum_(x, axis=None)), rng.normal(size=(3, 4))

    @case("concat_slice")
    def _(rng):
        c = rng.normal(size=(2, 3)); w = rng.normal(size=(3, 3)); v = rng.normal(size=(2, 2))
        return (lambda x: dc.sum_(dc.slice_(dc.concat([x, c], axis=0), 1, 4, axis=0) * w)
                + dc.sum_(x[:, :2] * x[:, 1:] * v)), rng.normal(size=(2, 3))

    @case("l2_normalize")
    def _(rng):
        w = rng.normal(size=(3, 4))
        return (lambda x: dc.sum_(dc.l2_normalize(x) * w)), rng.normal(size=(3, 4))

    @case("eigh_values")
    def _(rng):
        w = rng.normal(size=4)
        return (lambda s: dc.sum_(dc.eigh(s)[0] * w)), _spd(rng, 4)

    @case("eigh_vectors")
    def _(rng):
        w = rng.normal(size=(4, 4))
        # squared entries are invariant to the eigenvector sign convention
        return (lambda s: dc.sum_(dc.eigh(s)[1] * dc.eigh(s)[1] * w)), _spd(rng, 4)

    @case("matrix_log")
    def _(rng):
        w = rng.normal(size=(4, 4))
        return (lambda s: dc.sum_(enc.spd_log(s) * (w + w.T))), _spd(rng, 4)

    return cases


OP_CASES = _op_cases()


def check_op(name: str, seed: int, h: float = 1e-5) -> CheckResult:
    rng = np.random.default_rng(seed)
    f, x = OP_CASES[name](rng)
    if name.startswith(("eigh", "matrix_log")) and min_eig_gap(x) < MIN_EIG_GAP:
        return CheckResult(name, seed, float("nan"))
    return CheckResult(name, seed, grad_check(f, x, h))


def model_loss_case(seed: int, size: str = "small"):
    """Scalar function of the flattened parameters: full encode -> project -> total loss.

    Small size: d=4, d1=2, I=2, T_s=64, batch 4, mixed trusted/distrusted, memory of 3.
    """
    from .trainer import ModelParams, TrainConfig, step_losses

    d, t = (4, 64) if size == "small" else (6, 128)
    cfg = TrainConfig(seed=seed, batch_size=4, encoder=enc.EncoderConfig(d=d, d1=2, n_clips=2),
                      projector=proj.ProjectorConfig(hidden=8, z_dim=4))
    params = ModelParams.init(cfg)
    rng = np.random.default_rng(seed + 1000)
    x = rng.normal(size=(4, d, t))
    labels = np.array([0, 1, 0, 1])
    trusted = np.array([True, True, True, False])
    aux = np.tile([0.3, 0.7], (4, 1))
    memory = ls.MemoryBank(3)
    m = rng.normal(size=(3, 4))
    memory.push(m / np.linalg.norm(m, axis=1, keepdims=True), [0, 1, 0], [True, True, False])
    mem_view = memory.view(4)

    def f(vec: Tensor) -> Tensor:
        p = params.split_flat(vec)
        parts, _ = step_losses(p, x, labels, trusted, aux, mem_view, cfg,
                               np.random.default_rng(seed + 2000))
        return ls.total_loss(parts)

    return f, params.flat()


def check_model(seed: int, size: str = "small", h: float = 1e-5) -> CheckResult:
    f, x = model_loss_case(seed, size)
    return CheckResult(f"model_{size}", seed, grad_check(f, x, h))


def run_suite(size: str = "small", seeds=range(10)) -> list[CheckResult]:
    results = []
    for seed in seeds:
        for name in OP_CASES:
            results.append(check_op(name, seed))
        results.append(check_model(seed, size))
    return results
