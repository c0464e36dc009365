"""Recordings, fragments, synthetic generation, label noise and the fragment archive."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import xxhash

MAGIC = b"MACSFRG1"
ARCHIVE_VERSION = 1


class FormatError(ValueError):
    """Malformed fragment archive.  ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int | None = None):
        super().__init__(message if offset is None else f"{message} (byte offset {offset})")
        self.offset = offset


@dataclass(frozen=True)
class Recording:
    subject_id: int
    values: np.ndarray  # (d, T)
    sample_rate: float
    true_label: int

    def __post_init__(self):
        if self.values.ndim != 2:
            raise ValueError("recording values must be a d x T matrix")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("recording contains non-finite values")
        if self.true_label not in (0, 1):
            raise ValueError("labels are binary")

    @property
    def d(self) -> int:
        return self.values.shape[0]

    @property
    def n_samples(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class Fragment:
    subject_id: int
    fragment_id: int
    values: np.ndarray  # (d, T_s) float32
    true_label: int
    train_label: int


@dataclass(frozen=True)
class FragmentSet:
    fragments: tuple[Fragment, ...]
    d: int
    fragment_len: int
    sample_rate: float
    noise_fraction: float = 0.0

    def __post_init__(self):
        for f in self.fragments:
            if f.values.shape != (self.d, self.fragment_len):
                raise ValueError(f"fragment {f.fragment_id} has shape {f.values.shape}")

    def __len__(self) -> int:
        return len(self.fragments)

    def values(self) -> np.ndarray:
        """Stacked fragment values as float64, shape (n, d, T_s)."""
        if not self.fragments:
            return np.zeros((0, self.d, self.fragment_len))
        return np.stack([f.values for f in self.fragments]).astype(np.float64)

    @property
    def true_labels(self) -> np.ndarray:
        return np.array([f.true_label for f in self.fragments], dtype=np.int64)

    @property
    def train_labels(self) -> np.ndarray:
        return np.array([f.train_label for f in self.fragments], dtype=np.int64)

    @property
    def subject_ids(self) -> np.ndarray:
        return np.array([f.subject_id for f in self.fragments], dtype=np.int64)

    def subset(self, mask_or_index) -> "FragmentSet":
        idx = np.arange(len(self))[mask_or_index]
        return replace(self, fragments=tuple(self.fragments[i] for i in idx))

    def by_subjects(self, subjects) -> "FragmentSet":
        keep = np.isin(self.subject_ids, np.asarray(list(subjects)))
        return self.subset(keep)


def segment(rec: Recording, fragment_len: int, first_id: int = 0) -> list[Fragment]:
    """Cut a recording into non-overlapping fragments, dropping the trailing remainder."""
    if fragment_len <= 0 or fragment_len > rec.n_samples:
        raise ValueError(f"fragment length {fragment_len} invalid for {rec.n_samples} samples")
    n = rec.n_samples // fragment_len
    vals = np.asarray(rec.values, dtype=np.float32)
    return [
        Fragment(rec.subject_id, first_id + k, vals[:, k * fragment_len:(k + 1) * fragment_len].copy(),
                 rec.true_label, rec.true_label)
        for k in range(n)
    ]


def make_fragment_set(recordings, fragment_len: int) -> FragmentSet:
    frags: list[Fragment] = []
    for rec in recordings:
        frags.extend(segment(rec, fragment_len, first_id=len(frags)))
    r0 = recordings[0]
    return FragmentSet(tuple(frags), r0.d, fragment_len, r0.sample_rate, 0.0)


# -- synthetic data ----------------------------------------------------------


def toeplitz_template(d: int, rho: float, scale: float = 1.0) -> np.ndarray:
    i = np.arange(d)
    return scale * rho ** np.abs(i[:, None] - i[None, :])


def block_template(d: int, rho: float) -> np.ndarray:
    """Two channel blocks; strong coupling within each block, none across."""
    t = np.eye(d)
    half = d // 2
    for lo, hi in ((0, half), (half, d)):
        t[lo:hi, lo:hi] = rho
    np.fill_diagonal(t, 1.0)
    return t


@dataclass
class SynthSpec:
    n_subjects_per_class: int = 8
    d: int = 8
    seconds: int = 60
    sample_rate: float = 250.0
    template0: np.ndarray = field(default_factory=lambda: toeplitz_template(8, 0.3))
    template1: np.ndarray = field(default_factory=lambda: block_template(8, 0.6))
    band0: tuple[float, float] = (4.0, 30.0)
    band1: tuple[float, float] = (4.0, 30.0)
    noise_floor: float = 0.3
    # spread of subject-specific deviations from the class template
    subject_jitter: float = 0.0
    fragment_seconds: float = 2.0

    @property
    def fragment_len(self) -> int:
        return int(round(self.fragment_seconds * self.sample_rate))

    def validate(self) -> None:
        if self.n_subjects_per_class < 1 or self.d < 1:
            raise ValueError("need at least one subject per class and one channel")
        if self.seconds < 2:
            raise ValueError("recordings must last at least 2 seconds")
        if not float(self.sample_rate * self.seconds).is_integer():
            raise ValueError("sample_rate * seconds must be an integer")
        for name in ("template0", "template1"):
            t = np.asarray(getattr(self, name), dtype=np.float64)
            if t.shape != (self.d, self.d):
                raise ValueError(f"{name} must be {self.d}x{self.d}")
            if not np.allclose(t, t.T, atol=1e-12):
                raise ValueError(f"{name} is not symmetric")
            lo = np.linalg.eigvalsh(t).min()
            if lo < 1e-3:
                raise ValueError(f"{name} is not SPD (min eigenvalue {lo:.3g})")
            if lo <= self.noise_floor ** 2:
                raise ValueError(f"{name} min eigenvalue must exceed noise_floor**2")
        nyq = self.sample_rate / 2
        for band in (self.band0, self.band1):
            if not 0 <= band[0] < band[1] <= nyq:
                raise ValueError(f"band {band} outside (0, {nyq}]")
        if self.subject_jitter < 0:
            raise ValueError("subject_jitter must be non-negative")
        if not 0 < self.fragment_len <= self.sample_rate * self.seconds:
            raise ValueError("fragment_seconds must lie in (0, seconds]")

    def to_json(self) -> dict:
        return {
            "n_subjects_per_class": self.n_subjects_per_class, "d": self.d, "seconds": self.seconds,
            "sample_rate": self.sample_rate, "template0": np.asarray(self.template0).tolist(),
            "template1": np.asarray(self.template1).tolist(), "band0": list(self.band0),
            "band1": list(self.band1), "noise_floor": self.noise_floor, "subject_jitter": self.subject_jitter,
            "fragment_seconds": self.fragment_seconds,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "SynthSpec":
        obj = dict(obj)
        d = int(obj.get("d", 8))
        if "template0" not in obj:
            obj["template0"] = toeplitz_template(d, 0.3)
        if "template1" not in obj:
            obj["template1"] = block_template(d, 0.6)
        for key in ("template0", "template1"):
            obj[key] = np.asarray(obj[key], dtype=np.float64)
        for key in ("band0", "band1"):
            if key in obj:
                obj[key] = tuple(float(v) for v in obj[key])
        unknown = set(obj) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown SynthSpec keys: {sorted(unknown)}")
        return cls(**obj)


def _band_noise(rng: np.random.Generator, d: int, n: int, fs: float, band) -> np.ndarray:
    """Unit-variance white noise restricted to ``band`` (Hz) by an FFT mask, per channel."""
    white = rng.standard_normal((d, n))
    spec = np.fft.rfft(white, axis=1)
    freqs = np.fft.rfftfreq(n, 1.0 / fs)
    spec[:, (freqs < band[0]) | (freqs > band[1])] = 0.0
    out = np.fft.irfft(spec, n=n, axis=1)
    out -= out.mean(axis=1, keepdims=True)
    return out / out.std(axis=1, keepdims=True)


def _subject_factor(rng, chol: np.ndarray, jitter: float) -> np.ndarray:
    d = chol.shape[0]
    if jitter == 0:
        return chol
    e = rng.normal(scale=jitter, size=(d, d))
    e = np.triu(e, 1)
    e = e + e.T
    lam, u = np.linalg.eigh(np.eye(d) + e)
    mix = u @ np.diag(np.maximum(lam, 0.1)) @ u.T
    return chol @ np.linalg.cholesky(mix)


def synthesize(spec: SynthSpec, seed: int) -> list[Recording]:
    """Class-c subjects emit ``L_c Z + noise`` with ``L_c L_c^T + noise_floor^2 I = template_c``.

    ``Z`` is band-limited white noise. A positive ``subject_jitter`` perturbs the
    class factor per subject by a zero-mean symmetric mixing, keeping the
    class-average covariance at the template; the default of 0 leaves every
    subject of a class on the same factor.
    """
    spec.validate()
    rng = np.random.default_rng(seed)
    n = int(spec.sample_rate * spec.seconds)
    recs = []
    sid = 0
    for label, (template, band) in enumerate(((spec.template0, spec.band0), (spec.template1, spec.band1))):
        chol = np.linalg.cholesky(np.asarray(template) - spec.noise_floor ** 2 * np.eye(spec.d))
        for _ in range(spec.n_subjects_per_class):
            factor = _subject_factor(rng, chol, spec.subject_jitter)
            z = _band_noise(rng, spec.d, n, spec.sample_rate, band)
            x = factor @ z + spec.noise_floor * rng.standard_normal((spec.d, n))
            recs.append(Recording(sid, x.astype(np.float32), float(spec.sample_rate), label))
            sid += 1
    return recs


# -- label noise --------------------------------------------------------------


def inject_noise(fs: FragmentSet, alpha: float, seed: int, per_subject: bool = True) -> FragmentSet:
    """Flip the training labels of a uniformly random floor(alpha * n) subset.

    With ``per_subject`` the unit is a subject (all its fragments flip together);
    otherwise single fragments.  True labels are never touched.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    rng = np.random.default_rng(seed)
    if per_subject:
        units = np.unique(fs.subject_ids)
        chosen = rng.choice(units, size=int(np.floor(alpha * len(units))), replace=False)
        flip = np.isin(fs.subject_ids, chosen)
    else:
        idx = rng.choice(len(fs), size=int(np.floor(alpha * len(fs))), replace=False)
        flip = np.zeros(len(fs), dtype=bool)
        flip[idx] = True
    frags = tuple(
        replace(f, train_label=1 - f.true_label) if flip[i] else replace(f, train_label=f.true_label)
        for i, f in enumerate(fs.fragments)
    )
    return replace(fs, fragments=frags, noise_fraction=float(alpha))


# -- archive ------------------------------------------------------------------


def write_archive(fs: FragmentSet, path) -> None:
    """Directory with ``manifest.json`` and ``data.bin`` (magic, float32 LE payload, XXH64 LE)."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest = {
        "version": ARCHIVE_VERSION,
        "d": fs.d,
        "T_s": fs.fragment_len,
        "f_s": fs.sample_rate,
        "alpha": fs.noise_fraction,
        "fragments": [
            {"subject_id": f.subject_id, "fragment_id": f.fragment_id,
             "true_label": f.true_label, "train_label": f.train_label}
            for f in fs.fragments
        ],
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1), encoding="utf-8")
    if fs.fragments:
        payload = np.stack([f.values for f in fs.fragments]).astype("<f4").tobytes()
    else:
        payload = b""
    digest = xxhash.xxh64_intdigest(payload, seed=0)
    with open(path / "data.bin", "wb") as fh:
        fh.write(MAGIC)
        fh.write(payload)
        fh.write(struct.pack("<Q", digest))


def read_archive(path) -> FragmentSet:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"manifest.json is not valid JSON: {exc.msg}", exc.pos) from exc
    for key in ("version", "d", "T_s", "f_s", "alpha", "fragments"):
        if key not in manifest:
            raise FormatError(f"manifest.json lacks key {key!r}")
    if manifest["version"] != ARCHIVE_VERSION:
        raise FormatError(f"unsupported archive version {manifest['version']}")
    d, ts = int(manifest["d"]), int(manifest["T_s"])
    entries = manifest["fragments"]

    raw = (path / "data.bin").read_bytes()
    if raw[:8] != MAGIC:
        raise FormatError(f"bad magic {raw[:8]!r}, expected {MAGIC!r}", 0)
    expected = len(entries) * d * ts * 4
    actual = len(raw) - 8 - 8
    if actual != expected:
        raise FormatError(f"payload length mismatch: expected {expected} bytes, found {max(actual, 0)}",
                          8 + max(actual, 0))
    payload = raw[8:8 + expected]
    (stored,) = struct.unpack("<Q", raw[8 + expected:])
    if xxhash.xxh64_intdigest(payload, seed=0) != stored:
        raise FormatError("checksum mismatch", 8 + expected)
    values = np.frombuffer(payload, dtype="<f4").reshape(len(entries), d, ts).astype(np.float32)
    frags = tuple(
        Fragment(int(e["subject_id"]), int(e["fragment_id"]), values[i].copy(),
                 int(e["true_label"]), int(e["train_label"]))
        for i, e in enumerate(entries)
    )
    return FragmentSet(frags, d, ts, float(manifest["f_s"]), float(manifest["alpha"]))
