"""Noise-category classification from a short reference frame.

Log-Mel features pooled over time feed a small classifier (nearest
centroid or multinomial logistic regression). Also holds the augmentation
transforms and ESC-50 manifest ingestion.
"""

from __future__ import annotations

import base64
import csv
import json
import logging
import os
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
from scipy.signal import get_window

from metasfanc.dsp import Signal, read_wav, resample, resample_ratio, write_wav
from metasfanc.errors import ConfigError, DataError, InvalidArgumentError

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
LOG_FLOOR = 1e-10  # power floor, i.e. -100 dB
# (time factor, semitones) pairs applied to each raw clip.
AUGMENTATIONS = ((1.5, 4.5), (1.5, -4.5), (0.8, 4.5), (0.8, -4.5))
# ESC-50 groups its 50 targets into five blocks of ten.
ESC50_MAJOR = ("animals", "natural", "human", "interior", "exterior")

_TIE_TOL = 1e-12


@dataclass(frozen=True)
class MelParams:
    fft_size: int = 1024
    hop: int = 256
    n_mels: int = 64
    fmin: float = 50.0
    fmax: float | None = None  # None means rate / 2

    def __post_init__(self):
        n = int(self.fft_size)
        if n < 2 or n & (n - 1):
            raise InvalidArgumentError("fft_size must be a power of two")
        if self.hop < 1:
            raise InvalidArgumentError("hop must be >= 1")
        if self.n_mels < 1:
            raise InvalidArgumentError("n_mels must be >= 1")
        if self.fmin < 0:
            raise InvalidArgumentError("fmin must be >= 0")

    def upper(self, sample_rate: int) -> float:
        fmax = sample_rate / 2 if self.fmax is None else float(self.fmax)
        if not self.fmin < fmax <= sample_rate / 2:
            raise InvalidArgumentError(
                f"need 0 <= fmin < fmax <= {sample_rate / 2} Hz, got [{self.fmin}, {fmax}]"
            )
        return fmax

    def to_dict(self):
        return {
            "fft_size": self.fft_size, "hop": self.hop, "n_mels": self.n_mels,
            "fmin": self.fmin, "fmax": self.fmax,
        }


@dataclass(frozen=True, eq=False)
class MelSpectrogram:
    """Log-power Mel spectrogram, shape ``(n_mels, n_frames)``, in dB."""

    values: np.ndarray
    params: MelParams
    sample_rate: int

    @property
    def n_frames(self) -> int:
        return self.values.shape[1]


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(params: MelParams, sample_rate: int) -> np.ndarray:
    """Triangular filters on the HTK Mel scale, peak gain 1.

    Band ``k`` rises from Mel point ``k`` to ``k + 1`` and falls to ``k + 2``,
    with the ``n_mels + 2`` points evenly spaced in Mel between fmin and fmax.
    """
    fmax = params.upper(sample_rate)
    edges = mel_to_hz(np.linspace(hz_to_mel(params.fmin), hz_to_mel(fmax), params.n_mels + 2))
    freqs = np.fft.rfftfreq(params.fft_size, d=1.0 / sample_rate)
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rise = (freqs[None, :] - lo) / (mid - lo)
    fall = (hi - freqs[None, :]) / (hi - mid)
    return np.maximum(0.0, np.minimum(rise, fall))


def band_centers(params: MelParams, sample_rate: int) -> np.ndarray:
    fmax = params.upper(sample_rate)
    pts = mel_to_hz(np.linspace(hz_to_mel(params.fmin), hz_to_mel(fmax), params.n_mels + 2))
    return pts[1:-1]


def mel_spectrogram(sig: Signal, params: MelParams = MelParams()) -> MelSpectrogram:
    n = params.fft_size
    x = sig.samples
    if x.size < n:
        raise InvalidArgumentError(f"signal has {x.size} samples, need at least fft_size={n}")
    n_frames = 1 + (x.size - n) // params.hop
    idx = np.arange(n)[None, :] + params.hop * np.arange(n_frames)[:, None]
    frames = x[idx] * get_window("hann", n, fftbins=True)[None, :]
    power = np.abs(np.fft.rfft(frames, axis=1)) ** 2
    mel = mel_filterbank(params, sig.sample_rate) @ power.T
    return MelSpectrogram(10.0 * np.log10(np.maximum(mel, LOG_FLOOR)), params, sig.sample_rate)


def features(mel: MelSpectrogram) -> np.ndarray:
    """Per-band mean then per-band standard deviation over frames."""
    v = mel.values
    return np.concatenate([v.mean(axis=1), v.std(axis=1)])


def extract(sig: Signal, params: MelParams = MelParams()) -> np.ndarray:
    return features(mel_spectrogram(sig, params))


# --------------------------------------------------------------------------
# augmentation


def time_scale(sig: Signal, factor: float) -> Signal:
    """Stretch duration by ``factor`` by resampling and keeping the rate label.

    Pitch moves by ``1 / factor`` as a side effect.
    """
    if not (np.isfinite(factor) and factor > 0):
        raise InvalidArgumentError("time-scale factor must be positive")
    frac = Fraction(float(factor)).limit_denominator(1000)
    if frac == 1:
        return Signal(sig.samples.copy(), sig.sample_rate)
    target = int(round(sig.samples.size * float(factor)))
    out = resample_ratio(sig.samples, frac.numerator, frac.denominator)
    return Signal(_fit_length(out, target), sig.sample_rate)


def pitch_shift(sig: Signal, semitones: float) -> Signal:
    """Shift pitch by ``semitones`` keeping the duration.

    Resample-and-relabel moves pitch up by 2**(semitones/12) and shortens the
    clip; a phase-vocoder stretch (pitch preserving) then restores the length.
    """
    if not abs(semitones) <= 24:
        raise InvalidArgumentError("|semitones| must be <= 24")
    if semitones == 0:
        return Signal(sig.samples.copy(), sig.sample_rate)
    import librosa

    ratio = 2.0 ** (semitones / 12.0)
    shifted = time_scale(sig, 1.0 / ratio).samples
    n = sig.samples.size
    stretched = librosa.effects.time_stretch(shifted, rate=shifted.size / n)
    return Signal(_fit_length(stretched, n), sig.sample_rate)


def _fit_length(x, n):
    if x.size >= n:
        return x[:n]
    return np.concatenate([x, np.zeros(n - x.size)])


def augment(sig: Signal, combos=AUGMENTATIONS) -> list[Signal]:
    """One transformed copy per (time factor, semitones) combination."""
    return [pitch_shift(time_scale(sig, tf), st) for tf, st in combos]


def expand_corpus(clips, augment_clips: bool, combos=AUGMENTATIONS):
    """``[(Signal, label)]`` -> raw clips followed by their augmented copies."""
    out = list(clips)
    if augment_clips:
        for sig, label in clips:
            out.extend((a, label) for a in augment(sig, combos))
    return out


# --------------------------------------------------------------------------
# classifier


@dataclass(frozen=True)
class TrainConfig:
    kind: str = "linear"
    epochs: int = 400
    learning_rate: float = 0.5
    l2: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("centroid", "linear"):
            raise InvalidArgumentError(f"unknown classifier kind {self.kind!r}")
        if self.epochs < 1 or not self.learning_rate > 0 or self.l2 < 0:
            raise InvalidArgumentError("epochs >= 1, learning_rate > 0, l2 >= 0 required")


@dataclass(eq=False)
class ClassifierModel:
    """Trained classifier over pooled log-Mel features.

    ``weights`` holds centroids (kind "centroid") or the linear weight matrix;
    both are ``(n_classes, n_features)`` in normalized feature space.
    """

    labels: tuple
    kind: str
    mean: np.ndarray
    scale: np.ndarray
    weights: np.ndarray
    bias: np.ndarray
    mel: MelParams = field(default_factory=MelParams)
    sample_rate: int = 16000
    frame_samples: int | None = None
    train_config: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.labels) < 2:
            raise InvalidArgumentError("a classifier needs at least two classes")
        d = self.mean.size
        if self.scale.size != d or self.weights.shape != (len(self.labels), d):
            raise InvalidArgumentError("classifier parameter shapes do not match")
        if self.bias.size != len(self.labels):
            raise InvalidArgumentError("bias length must equal class count")

    def normalize(self, feats):
        return (np.asarray(feats, dtype=np.float64) - self.mean) / self.scale

    def scores(self, feats) -> np.ndarray:
        """Class probabilities (linear) or softmax of -distance**2/2 (centroid)."""
        z = self.normalize(feats)
        if self.kind == "centroid":
            logits = -0.5 * np.sum((self.weights - z) ** 2, axis=1)
        else:
            logits = self.weights @ z + self.bias
        return _softmax(logits)

    def predict(self, feats):
        p = self.scores(feats)
        # labels are sorted, so the first near-maximal entry is the smallest label
        best = int(np.flatnonzero(p >= p.max() - _TIE_TOL)[0])
        return self.labels[best], float(p[best])

    def to_json(self) -> str:
        doc = {
            "schema": SCHEMA_VERSION,
            "labels": list(self.labels),
            "kind": self.kind,
            "mean": _b64(self.mean),
            "scale": _b64(self.scale),
            "weights": _b64(self.weights.reshape(-1)),
            "bias": _b64(self.bias),
            "n_features": int(self.mean.size),
            "mel": self.mel.to_dict(),
            "sample_rate": self.sample_rate,
            "frame_samples": self.frame_samples,
            "train_config": self.train_config,
        }
        return json.dumps(doc, indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ClassifierModel":
        try:
            doc = json.loads(text)
            if doc.get("schema") != SCHEMA_VERSION:
                raise DataError(f"unsupported classifier schema {doc.get('schema')!r}")
            d = int(doc["n_features"])
            labels = tuple(doc["labels"])
            return cls(
                labels=labels,
                kind=doc["kind"],
                mean=_unb64(doc["mean"]),
                scale=_unb64(doc["scale"]),
                weights=_unb64(doc["weights"]).reshape(len(labels), d),
                bias=_unb64(doc["bias"]),
                mel=MelParams(**doc["mel"]),
                sample_rate=int(doc["sample_rate"]),
                frame_samples=doc["frame_samples"],
                train_config=doc.get("train_config", {}),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"malformed classifier file: {exc}") from exc

    def save(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path) -> "ClassifierModel":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(fh.read())


def _b64(arr):
    return base64.b64encode(np.ascontiguousarray(arr, dtype="<f8").tobytes()).decode("ascii")


def _unb64(text):
    return np.frombuffer(base64.b64decode(text), dtype="<f8").copy()


def _softmax(z):
    z = z - np.max(z)
    e = np.exp(z)
    return e / e.sum()


def train_classifier(
    samples,
    config: TrainConfig = TrainConfig(),
    mel: MelParams = MelParams(),
    sample_rate: int = 16000,
    frame_samples: int | None = None,
) -> ClassifierModel:
    """Fit a classifier on ``[(feature_vector, label), ...]``.

    The linear kind is multinomial logistic regression trained by full-batch
    gradient descent from zero weights, so the result does not depend on
    sample order beyond the label sort.
    """
    samples = list(samples)
    if not samples:
        raise InvalidArgumentError("no training samples")
    labels = tuple(sorted({lab for _, lab in samples}))
    if len(labels) < 2:
        raise InvalidArgumentError("training data must contain at least two classes")
    X = np.asarray([np.asarray(f, dtype=np.float64) for f, _ in samples])
    if X.ndim != 2 or not np.all(np.isfinite(X)):
        raise InvalidArgumentError("feature vectors must be finite and equally long")
    index = {lab: i for i, lab in enumerate(labels)}
    y = np.array([index[lab] for _, lab in samples])

    mean = X.mean(axis=0)
    scale = X.std(axis=0)
    scale[scale < 1e-8] = 1.0
    Z = (X - mean) / scale
    C, D = len(labels), X.shape[1]

    if config.kind == "centroid":
        W = np.stack([Z[y == c].mean(axis=0) for c in range(C)])
        b = np.zeros(C)
    else:
        W = np.zeros((C, D))
        b = np.zeros(C)
        Y = np.eye(C)[y]
        n = Z.shape[0]
        for _ in range(config.epochs):
            logits = Z @ W.T + b
            logits -= logits.max(axis=1, keepdims=True)
            P = np.exp(logits)
            P /= P.sum(axis=1, keepdims=True)
            G = (P - Y) / n
            W -= config.learning_rate * (G.T @ Z + config.l2 * W)
            b -= config.learning_rate * G.sum(axis=0)

    return ClassifierModel(
        labels=labels, kind=config.kind, mean=mean, scale=scale, weights=W, bias=b,
        mel=mel, sample_rate=sample_rate, frame_samples=frame_samples,
        train_config={
            "kind": config.kind, "epochs": config.epochs,
            "learning_rate": config.learning_rate, "l2": config.l2, "seed": config.seed,
        },
    )


def classify(model: ClassifierModel, frame: Signal):
    """Label and score for one acquisition frame."""
    if frame.sample_rate != model.sample_rate:
        raise InvalidArgumentError(
            f"frame rate {frame.sample_rate} Hz differs from model rate {model.sample_rate} Hz"
        )
    if model.frame_samples is not None and len(frame) != model.frame_samples:
        raise InvalidArgumentError(
            f"frame has {len(frame)} samples, classifier expects {model.frame_samples}"
        )
    return model.predict(extract(frame, model.mel))


def accuracy(model: ClassifierModel, samples) -> float:
    samples = list(samples)
    if not samples:
        return float("nan")
    hits = sum(model.predict(f)[0] == lab for f, lab in samples)
    return hits / len(samples)


def holdout_split(labels, fraction: float, seed: int):
    """Stratified split; returns (train_idx, test_idx) sorted."""
    if not 0 <= fraction < 1:
        raise InvalidArgumentError("holdout fraction must lie in [0, 1)")
    rng = np.random.default_rng(seed)
    labels = list(labels)
    train, test = [], []
    for lab in sorted(set(labels)):
        idx = np.array([i for i, v in enumerate(labels) if v == lab])
        idx = idx[rng.permutation(idx.size)]
        k = int(round(fraction * idx.size))
        test.extend(idx[:k].tolist())
        train.extend(idx[k:].tolist())
    return sorted(train), sorted(test)


# --------------------------------------------------------------------------
# ESC-50 ingestion

_ESC50_COLUMNS = ("filename", "fold", "target", "category")


@dataclass(frozen=True)
class ManifestRow:
    filename: str
    fold: int
    target: int
    category: str


def read_esc50_manifest(path) -> list[ManifestRow]:
    """Parse an ESC-50 style ``meta/esc50.csv``; malformed rows are fatal."""
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty manifest") from None
        missing = [c for c in _ESC50_COLUMNS if c not in header]
        if missing:
            raise DataError(f"{path}: manifest lacks columns {missing}")
        cols = {c: header.index(c) for c in _ESC50_COLUMNS}
        rows = []
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            try:
                if len(rec) != len(header):
                    raise ValueError(f"expected {len(header)} fields, got {len(rec)}")
                fname = rec[cols["filename"]].strip()
                if not fname:
                    raise ValueError("empty filename")
                rows.append(ManifestRow(
                    fname, int(rec[cols["fold"]]), int(rec[cols["target"]]),
                    rec[cols["category"]].strip(),
                ))
            except ValueError as exc:
                raise DataError(f"{path}: row {lineno}: {exc}") from exc
    return rows


def label_for(row: ManifestRow, category_map) -> str:
    """Map a manifest row to a training label.

    ``category_map`` may be None (use the ESC-50 category), the string
    "major" (five-way grouping by target block) or an explicit dict.
    """
    if category_map is None:
        return row.category
    if category_map == "major":
        if not 0 <= row.target < 10 * len(ESC50_MAJOR):
            raise DataError(f"target {row.target} outside the ESC-50 range")
        return ESC50_MAJOR[row.target // 10]
    try:
        return category_map[row.category]
    except KeyError:
        raise ConfigError(f"category map has no entry for {row.category!r}") from None


def ingest_esc50(
    root, manifest, out_dir, category_map=None, sample_rate=16000, clip_s=2.5, clips_per_file=2
) -> dict:
    """Resample every listed recording and cut consecutive clips of ``clip_s``.

    Clip WAVs go under ``out_dir/clips``; the returned index (also written by
    the caller) lists path, label, category, fold and source file. Unreadable
    or too-short files are skipped with a log entry.
    """
    rows = read_esc50_manifest(manifest)
    clip_dir = os.path.join(out_dir, "clips")
    os.makedirs(clip_dir, exist_ok=True)
    n = int(round(clip_s * sample_rate))
    entries, skipped = [], []
    for row in rows:
        label = label_for(row, category_map)
        src = os.path.join(root, row.filename)
        try:
            sig = resample(read_wav(src), sample_rate)
        except (OSError, DataError) as exc:
            log.warning("skipping %s: %s", src, exc)
            skipped.append({"file": row.filename, "reason": str(exc)})
            continue
        if len(sig) < clips_per_file * n:
            msg = f"only {len(sig)} samples, need {clips_per_file * n}"
            log.warning("skipping %s: %s", src, msg)
            skipped.append({"file": row.filename, "reason": msg})
            continue
        stem = os.path.splitext(os.path.basename(row.filename))[0]
        for k in range(clips_per_file):
            name = f"{stem}_{k}.wav"
            write_wav(sig.segment(k * n, (k + 1) * n), os.path.join(clip_dir, name))
            entries.append({
                "path": os.path.join("clips", name), "label": label,
                "category": row.category, "fold": row.fold, "source": row.filename,
            })
    return {
        "schema": SCHEMA_VERSION, "sample_rate": sample_rate, "clip_s": clip_s,
        "clips": entries, "skipped": skipped,
    }


def load_index_clips(index_path):
    """``[(Signal, label)]`` for every clip of an ingestion index."""
    with open(index_path, encoding="utf-8") as fh:
        doc = json.load(fh)
    base = os.path.dirname(os.path.abspath(index_path))
    return [(read_wav(os.path.join(base, e["path"])), e["label"]) for e in doc["clips"]]
