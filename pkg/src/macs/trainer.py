"""Training loop: stratify at epoch start, then augment / route / encode / project / loss / SGD per batch."""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import diffcore as dc
from . import encoder as enc
from . import losses as ls
from . import projector as proj
from .augmentor import AugmentConfig, dual_views
from .data import FragmentSet
from .diffcore import NumericalError, Tape, Tensor
from .stratifier import ConfidencePartition, StratifierConfig, diagnostics, stratify
from .switcher import route

logger = logging.getLogger(__name__)

ATTENTION_PARAMS = ("w_q", "w_k", "w_v")
CKPT_MAGIC = b"MACSCKP1"
CKPT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 0.1
    lr_decay: float = 0.1
    lr_step: int = 10
    momentum: float = 0.9
    weight_decay: float = 1e-4
    # global L2 bound on the raw gradient before momentum; 0 disables
    grad_clip: float = 0.25
    seed: int = 0
    # length of one clip for the dynamic network, in seconds
    clip_seconds: float = 1.0
    # "macs" (full method) or "ce" (plain cross-entropy on all labels, no stratification)
    mode: str = "macs"
    encoder: enc.EncoderConfig = field(default_factory=enc.EncoderConfig)
    projector: proj.ProjectorConfig = field(default_factory=proj.ProjectorConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    stratifier: StratifierConfig = field(default_factory=StratifierConfig)
    contrastive: ls.ContrastiveConfig = field(default_factory=ls.ContrastiveConfig)

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 4 or self.lr < 0 or self.lr_step < 1 or self.grad_clip < 0:
            raise ValueError("invalid training configuration")
        if self.mode not in ("macs", "ce"):
            raise ValueError(f"unknown mode {self.mode!r}")

    def resolve(self, fs: FragmentSet) -> "TrainConfig":
        """Fill the encoder's channel count and clip count from the data."""
        n_clips = int(round(fs.fragment_len / (self.clip_seconds * fs.sample_rate)))
        if n_clips < 2:
            raise ValueError(f"{fs.fragment_len}-sample fragments hold {n_clips} clip(s) of "
                             f"{self.clip_seconds} s; attention needs at least two")
        return replace(self, encoder=replace(self.encoder, d=fs.d, n_clips=n_clips))

    def lr_at(self, epoch: int) -> float:
        return self.lr * self.lr_decay ** (epoch // self.lr_step)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "TrainConfig":
        sub = {"encoder": enc.EncoderConfig, "projector": proj.ProjectorConfig, "augment": AugmentConfig,
               "stratifier": StratifierConfig, "contrastive": ls.ContrastiveConfig}
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        kwargs = {}
        for key, value in obj.items():
            if key in sub:
                inner = {f.name for f in fields(sub[key])}
                bad = set(value) - inner
                if bad:
                    raise ValueError(f"unknown {key} keys: {sorted(bad)}")
                kwargs[key] = sub[key](**value)
            else:
                kwargs[key] = value
        return cls(**kwargs)


class ModelParams:
    """Ordered name -> float64 array mapping for every learnable tensor."""

    def __init__(self, arrays: dict[str, np.ndarray]):
        self.arrays = {k: np.asarray(v, dtype=np.float64) for k, v in arrays.items()}

    @classmethod
    def init(cls, cfg: TrainConfig) -> "ModelParams":
        rng = np.random.default_rng([cfg.seed, 0xC0FFEE])
        arrays = enc.init_params(cfg.encoder, rng)
        arrays.update(proj.init_params(cfg.encoder.embedding_dim, cfg.projector, rng))
        return cls(arrays)

    def tensors(self, requires_grad: bool = False) -> dict[str, Tensor]:
        return {k: Tensor(v, requires_grad=requires_grad) for k, v in self.arrays.items()}

    def copy(self) -> "ModelParams":
        return ModelParams({k: v.copy() for k, v in self.arrays.items()})

    def flat(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self.arrays.values()])

    def split_flat(self, vector):
        """Inverse of :meth:`flat`; works on arrays and on diffcore tensors."""
        out, pos = {}, 0
        for k, v in self.arrays.items():
            piece = vector[pos:pos + v.size]
            out[k] = dc.reshape(piece, v.shape) if isinstance(piece, Tensor) else piece.reshape(v.shape)
            pos += v.size
        return out

    def equal(self, other: "ModelParams") -> bool:
        return self.arrays.keys() == other.arrays.keys() and all(
            np.array_equal(v, other.arrays[k]) for k, v in self.arrays.items())

    def orthonormality_error(self) -> float:
        errs = [np.abs(w.T @ w - np.eye(w.shape[1])).max() for k, w in self.arrays.items() if k in ATTENTION_PARAMS]
        return float(max(errs)) if errs else 0.0


# -- checkpoints ---------------------------------------------------------------


def save_checkpoint(path, params: ModelParams, cfg: TrainConfig) -> None:
    """Binary tensors (little-endian float64, shape-tagged) plus a ``.json`` config sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", CKPT_VERSION, len(params.arrays)))
        for name, arr in params.arrays.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    path.with_suffix(".json").write_text(json.dumps(cfg.to_json(), indent=1, sort_keys=True))


def load_checkpoint(path) -> tuple[ModelParams, TrainConfig]:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:8] != CKPT_MAGIC:
        raise ValueError(f"{path} is not a checkpoint (bad magic)")
    version, count = struct.unpack_from("<II", raw, 8)
    if version != CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    pos = 16
    arrays = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", raw, pos)
        pos += 2
        name = raw[pos:pos + n].decode("utf-8")
        pos += n
        (ndim,) = struct.unpack_from("<B", raw, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", raw, pos)
        pos += 4 * ndim
        size = int(np.prod(shape)) * 8
        arrays[name] = np.frombuffer(raw[pos:pos + size], dtype="<f8").reshape(shape).astype(np.float64)
        pos += size
    cfg = TrainConfig.from_json(json.loads(path.with_suffix(".json").read_text()))
    return ModelParams(arrays), cfg


# -- forward passes ------------------------------------------------------------


def forward(params, x: np.ndarray, cfg: TrainConfig, monitor=None, chunk: int = 64):
    """Gradient-free latents and class probabilities for fragments ``x`` (n, d, T)."""
    p = params.tensors() if isinstance(params, ModelParams) else params
    zs, ps = [], []
    for lo in range(0, len(x), chunk):
        emb = enc.encode(Tensor(x[lo:lo + chunk]), p, cfg.encoder, monitor=monitor)
        zs.append(proj.latent(emb, p).data)
        ps.append(proj.classify(emb, p)[1].data)
    if not zs:
        return np.zeros((0, cfg.projector.z_dim)), np.zeros((0, 2))
    return np.concatenate(zs), np.concatenate(ps)


def predict_proba(params: ModelParams, fs: FragmentSet, cfg: TrainConfig) -> np.ndarray:
    return forward(params, fs.values(), cfg)[1]


@dataclass
class StepResult:
    parts: dict[str, float]
    z_views: np.ndarray
    grads: dict[str, np.ndarray]


def step_losses(p: dict[str, Tensor], x: np.ndarray, labels: np.ndarray, trusted: np.ndarray,
                aux: np.ndarray, memory, cfg: TrainConfig, rng: np.random.Generator,
                lam_override: float | None = None):
    """Loss components of one batch under the confidence constraints.

    Distrusted samples: jittered twin views (L^Ag) and cross-entropy against their
    auxiliary label on the raw input.  Trusted samples: twin views and raw input
    blended with a trusted partner (L^Sw, L^St) and lambda-mixed cross-entropy.
    Returns (parts, z_views tensor).
    """
    b = len(x)
    if cfg.mode == "ce":
        emb = enc.encode(Tensor(x), p, cfg.encoder)
        _, probs = proj.classify(emb, p)
        targets = np.eye(2)[labels]
        return {"dl": ls.loss_dl(probs, targets)}, None

    views = np.empty((3,) + x.shape)
    for i in range(b):
        views[0, i], views[1, i] = dual_views(x[i], cfg.augment, rng)
    views[2] = x
    routed = route(views, trusted, rng, lam_override=lam_override)
    emb = enc.encode(Tensor(routed.views.reshape((3 * b,) + x.shape[1:])), p, cfg.encoder)
    z = proj.latent(dc.slice_(emb, 0, 2 * b, axis=0), p)
    _, probs = proj.classify(dc.slice_(emb, 2 * b, 3 * b, axis=0), p)
    tau = cfg.contrastive.tau
    parts = {
        "ag": ls.loss_ag(z, ~trusted, memory, tau),
        "sw": ls.loss_sw(z, trusted, memory, tau),
        "st": ls.loss_st(z, trusted, labels, routed.partner, routed.lam, memory, tau,
                         cfg.contrastive.memory_positives),
        "dl": ls.loss_dl(probs, ls.dl_targets(trusted, labels, routed.partner, routed.lam, aux)),
    }
    return parts, z


def train_step(params: ModelParams, velocity: dict, x: np.ndarray, labels: np.ndarray,
               trusted: np.ndarray, aux: np.ndarray, memory: ls.MemoryBank, cfg: TrainConfig,
               lr: float, rng: np.random.Generator) -> StepResult:
    """One SGD step in place on ``params``/``velocity``; pushes the batch latents to ``memory``."""
    p = params.tensors(requires_grad=True)
    mem_view = memory.view(cfg.projector.z_dim)
    with Tape() as tape:
        parts, z = step_losses(p, x, labels, trusted, aux, mem_view, cfg, rng)
        total = ls.total_loss(parts)
    values = {k: float(v.data) for k, v in parts.items()}
    values["total"] = float(total.data)
    if not all(math.isfinite(v) for v in values.values()):
        raise NumericalError(f"non-finite loss {values}")
    tape.backward(total)
    grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in p.items()}
    sgd_update(params, velocity, grads, cfg, lr)
    z_np = z.data.copy() if z is not None else np.zeros((0, cfg.projector.z_dim))
    if z is not None:
        memory.push(z_np, np.concatenate([labels, labels]), np.concatenate([trusted, trusted]))
    return StepResult(values, z_np, grads)


def _decays(name: str) -> bool:
    return name not in ATTENTION_PARAMS and (name.endswith("_w") or name.endswith(("_w1", "_w2")))


def sgd_update(params: ModelParams, velocity: dict, grads: dict, cfg: TrainConfig, lr: float) -> None:
    """Momentum SGD with decoupled-from-bias weight decay, then QR retraction of attention weights."""
    scale = 1.0
    if cfg.grad_clip > 0:
        norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))
        if norm > cfg.grad_clip:
            scale = cfg.grad_clip / norm
    for name, w in params.arrays.items():
        g = grads[name] * scale
        if _decays(name):
            g = g + cfg.weight_decay * w
        v = velocity.get(name)
        v = g.copy() if v is None else cfg.momentum * v + g
        velocity[name] = v
        params.arrays[name] = w - lr * v
        if name in ATTENTION_PARAMS:
            params.arrays[name], _ = enc.retract(params.arrays[name])


# -- batching / splitting --------------------------------------------------------


def stratified_batches(labels: np.ndarray, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Shuffle within each label and interleave so every batch sees both labels."""
    n = len(labels)
    key = np.empty(n)
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        perm = rng.permutation(len(idx))
        key[idx[perm]] = (np.arange(len(idx)) + rng.uniform(0, 1)) / len(idx)
    order = np.argsort(key, kind="stable")
    batches = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(batches) > 1 and len(batches[-1]) < 4:
        tail = batches.pop()
        batches[-1] = np.concatenate([batches[-1], tail])
    return batches


def subject_split(fs: FragmentSet, n_folds: int, seed: int) -> dict[int, int]:
    """Assign every subject to one fold, balancing classes (by true label) across folds."""
    subjects = {}
    for f in fs.fragments:
        subjects.setdefault(f.subject_id, f.true_label)
    by_class = [sorted(s for s, c in subjects.items() if c == k) for k in (0, 1)]
    if n_folds < 2 or any(len(c) < n_folds for c in by_class):
        raise ValueError(f"{n_folds} folds need at least that many subjects per class")
    rng = np.random.default_rng(seed)
    fold_of = {}
    offset = 0
    for members in by_class:
        perm = rng.permutation(members)
        for k, s in enumerate(perm):
            fold_of[int(s)] = (offset + k) % n_folds
        offset += len(members)
    return fold_of


# -- training loop ---------------------------------------------------------------------


@dataclass
class TrainLog:
    steps: list[dict] = field(default_factory=list)
    epochs: list[dict] = field(default_factory=list)


def epoch_partition(params: ModelParams, x: np.ndarray, labels: np.ndarray, cfg: TrainConfig,
                    epoch: int) -> ConfidencePartition:
    z, probs = forward(params, x, cfg)
    if cfg.mode == "ce":
        ids = np.arange(len(labels))
        return ConfidencePartition(ids, np.zeros(0, dtype=np.int64), labels.copy(), {})
    return stratify(z, labels, cfg.stratifier, epoch, probs)


class Trainer:
    """Stateful driver; :func:`train` is the one-call entry point."""

    def __init__(self, fs: FragmentSet, cfg: TrainConfig):
        if len(fs) == 0:
            raise ValueError("empty fragment set")
        if len(np.unique(fs.train_labels)) < 2:
            raise ValueError("training labels must contain both classes")
        self.fs = fs
        self.cfg = cfg.resolve(fs)
        self.params = ModelParams.init(self.cfg)
        self.velocity: dict[str, np.ndarray] = {}
        self.memory = ls.MemoryBank(self.cfg.contrastive.memory)
        self.log = TrainLog()
        self.x = fs.values()
        self.labels = fs.train_labels
        self.true = fs.true_labels
        self.step_count = 0

    def run_epoch(self, epoch: int) -> dict:
        cfg = self.cfg
        part = epoch_partition(self.params, self.x, self.labels, cfg, epoch)
        trusted_all = part.trusted_mask()
        aux_all = np.full((len(self.labels), 2), 0.5)
        for i, a in part.aux.items():
            aux_all[i] = a
        lr = cfg.lr_at(epoch)
        rng = np.random.default_rng([cfg.seed, epoch])
        sums: dict[str, float] = {}
        batches = stratified_batches(self.labels, cfg.batch_size, rng)
        for b, idx in enumerate(batches):
            step_rng = np.random.default_rng([cfg.seed, epoch, b, 1])
            try:
                res = train_step(self.params, self.velocity, self.x[idx], self.labels[idx],
                                 trusted_all[idx], aux_all[idx], self.memory, cfg, lr, step_rng)
            except NumericalError as exc:
                raise TrainingAborted(str(exc), epoch, b, idx) from exc
            row = {"step": self.step_count, "epoch": epoch, **{k: res.parts.get(k, 0.0) for k in ("ag", "sw", "st", "dl", "total")}}
            self.log.steps.append(row)
            self.step_count += 1
            for k, v in res.parts.items():
                sums[k] = sums.get(k, 0.0) + v
        diag = diagnostics(part, self.true)
        record = {"epoch": epoch, "lr": lr, **diag, **{f"loss_{k}": v / len(batches) for k, v in sums.items()}}
        self.log.epochs.append(record)
        logger.info("epoch %d lr %.4g trusted %d/%d precision %.3f loss %.4f", epoch, lr,
                    diag["trusted_0"], diag["trusted_1"], diag["precision"], record.get("loss_total", 0.0))
        return record

    def run(self) -> tuple[ModelParams, TrainLog]:
        for epoch in range(self.cfg.epochs):
            self.run_epoch(epoch)
        return self.params, self.log


class TrainingAborted(NumericalError):
    def __init__(self, message: str, epoch: int, batch: int, indices: np.ndarray):
        super().__init__(f"epoch {epoch} batch {batch}: {message}")
        self.epoch, self.batch, self.indices = epoch, batch, np.asarray(indices)


def train(fs: FragmentSet, cfg: TrainConfig) -> tuple[ModelParams, TrainLog]:
    return Trainer(fs, cfg).run()
