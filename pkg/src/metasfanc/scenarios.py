"""Seeded synthetic experiments built from band-noise categories.

Every random stream is derived from ``(seed, category, subclass, index,
purpose)`` so training recordings, baseline segments and test clips never
share noise realizations.
"""

from __future__ import annotations

import dataclasses
import json
import zlib
from dataclasses import dataclass, field

import numpy as np

from metasfanc.adaptive import AncPlant
from metasfanc.classify import (
    MelParams,
    TrainConfig,
    accuracy,
    expand_corpus,
    extract,
    holdout_split,
    load_index_clips,
    train_classifier,
)
from metasfanc.dsp import CategorySpec, FirPath, Signal, gaussian_fir, synth_noise
from metasfanc.errors import InvalidArgumentError
from metasfanc.meta import MetaConfig, build_database, make_tasks
from metasfanc.pipeline import MODES, SessionConfig, build_sfanc_database, compare

PRIMARY_SHORT = (1.5, 1.3, -0.6, -1.2, -1.3, 1.2)
SECONDARY = (1.0, 1.0, 1.0, 0.5)
# Scale applied to the unit generators (RMS 0.1), giving RMS 0.03 references.
REFERENCE_LEVEL = 0.3

LOW_BAND = CategorySpec(
    "band_low", 150.0, 1500.0, n_subclasses=10, overlap=4.0, jitter_hz=20.0,
    tilt_db_per_octave=-3.0,
)
MID_BAND = CategorySpec(
    "band_mid", 1500.0, 3200.0, n_subclasses=10, overlap=4.0, jitter_hz=20.0,
    tilt_db_per_octave=-3.0,
)


def short_plant() -> AncPlant:
    return AncPlant(FirPath(PRIMARY_SHORT), FirPath(SECONDARY))


def long_plant(seed: int, length: int = 64, variance: float = 0.1) -> AncPlant:
    return AncPlant(gaussian_fir(length, variance, seed), FirPath(SECONDARY))


def stream_seed(*parts) -> int:
    """Stable 63-bit seed from ints and strings."""
    words = [zlib.crc32(p.encode()) if isinstance(p, str) else int(p) for p in parts]
    return int(np.random.SeedSequence(words).generate_state(2, dtype=np.uint64)[0] >> np.uint64(1))


@dataclass(frozen=True)
class SyntheticCorpus:
    """Categories plus the subclass held out of meta-training in each."""

    categories: tuple
    held_out: dict = field(default_factory=dict)  # label -> subclass; default last
    level: float = REFERENCE_LEVEL
    recording_s: float = 5.0
    recordings_per_subclass: int = 2
    sample_rate: int = 16000

    def __post_init__(self):
        labels = [c.label for c in self.categories]
        if not labels or len(set(labels)) != len(labels):
            raise InvalidArgumentError("category labels must be unique and non-empty")
        if not self.level > 0:
            raise InvalidArgumentError("level must be positive")
        for label, idx in self.held_out.items():
            if not 0 <= idx < self.category(label).n_subclasses:
                raise InvalidArgumentError(f"held-out subclass {idx} out of range for {label!r}")

    @property
    def labels(self):
        return [c.label for c in self.categories]

    def category(self, label) -> CategorySpec:
        for c in self.categories:
            if c.label == label:
                return c
        raise InvalidArgumentError(f"unknown category {label!r}")

    def held_out_index(self, label) -> int:
        return self.held_out.get(label, self.category(label).n_subclasses - 1)

    def training_subclasses(self, label):
        ho = self.held_out_index(label)
        return [i for i in range(self.category(label).n_subclasses) if i != ho]

    def clip(self, label, subclass, duration_s, seed, purpose="test", index=0) -> Signal:
        spec = self.category(label).subclass(subclass)
        raw = synth_noise(
            spec, duration_s, stream_seed(seed, label, subclass, index, purpose), self.sample_rate
        )
        return Signal(self.level * raw.samples, self.sample_rate)

    def training_set(self, label, seed):
        return [
            [self.clip(label, i, self.recording_s, seed, "train", r)
             for r in range(self.recordings_per_subclass)]
            for i in self.training_subclasses(label)
        ]

    def baseline_segment(self, label, seed, choice="held_out"):
        """One recording for single-segment pretraining, with its provenance.

        ``held_out`` draws a fresh recording of the held-out subclass;
        ``random`` picks one training recording at random.
        """
        if choice == "held_out":
            sub = self.held_out_index(label)
            return self.clip(label, sub, self.recording_s, seed, "baseline"), {
                "subclass": sub, "choice": choice,
            }
        if choice == "random":
            rng = np.random.default_rng(stream_seed(seed, label, "baseline-pick"))
            subs = self.training_subclasses(label)
            sub = subs[int(rng.integers(len(subs)))]
            rec = int(rng.integers(self.recordings_per_subclass))
            return self.clip(label, sub, self.recording_s, seed, "train", rec), {
                "subclass": sub, "recording": rec, "choice": choice,
            }
        raise InvalidArgumentError(f"unknown baseline segment choice {choice!r}")


@dataclass(frozen=True)
class PretrainSettings:
    """MAML settings (one config or one per label) and single-segment settings."""

    meta: object
    sfanc_mu: object
    sfanc_delta: float = 1.0
    sfanc_epochs: int = 6
    sfanc_choice: str = "held_out"

    def meta_for(self, label, seed) -> MetaConfig:
        cfg = self.meta[label] if isinstance(self.meta, dict) else self.meta
        return dataclasses.replace(cfg, seed=seed)


def build_databases(corpus: SyntheticCorpus, plant: AncPlant, length: int,
                    settings: PretrainSettings, seed: int):
    """``(maml_database, sfanc_database)`` for every corpus category."""
    dists, cfgs, sources = {}, {}, {}
    for label in corpus.labels:
        cfg = settings.meta_for(label, seed)
        dists[label] = make_tasks(
            corpus.training_set(label, seed), plant, length, cfg.K, cfg.J,
            stream_seed(seed, label, "tasks"), category_id=label,
            subclass_ids=[str(i) for i in corpus.training_subclasses(label)],
        )
        cfgs[label] = cfg
        sources[label] = corpus.baseline_segment(label, seed, settings.sfanc_choice)
    maml = build_database(dists, cfgs)
    sfanc = build_sfanc_database(
        sources, plant, length, settings.sfanc_mu, settings.sfanc_delta, settings.sfanc_epochs
    )
    return maml, sfanc


def classifier_clips(corpus: SyntheticCorpus, seed, clips_per_subclass=4, clip_s=2.5,
                     subclasses="training"):
    """``[(Signal, label)]`` acquisition-length clips for classifier training."""
    out = []
    for label in corpus.labels:
        n = corpus.category(label).n_subclasses
        subs = corpus.training_subclasses(label) if subclasses == "training" else range(n)
        for i in subs:
            for k in range(clips_per_subclass):
                out.append((corpus.clip(label, i, clip_s, seed, "classifier", k), label))
    return out


def train_corpus_classifier(clips, seed, train=TrainConfig(), mel=MelParams(),
                            holdout=0.25, augment_clips=False, frame_samples=None):
    """Split, optionally augment the training part, fit and score.

    Returns ``(model, held_out_accuracy, n_training_clips)``.
    """
    tr, te = holdout_split([lab for _, lab in clips], holdout, seed)
    train_clips = expand_corpus([clips[i] for i in tr], augment_clips)
    feats = [(extract(s, mel), lab) for s, lab in train_clips]
    rate = clips[0][0].sample_rate
    model = train_classifier(feats, dataclasses.replace(train, seed=seed), mel, rate, frame_samples)
    test = [(extract(clips[i][0], mel), clips[i][1]) for i in te]
    return model, accuracy(model, test), len(train_clips)


# --------------------------------------------------------------------------
# preset experiments


@dataclass(frozen=True)
class Experiment:
    corpus: SyntheticCorpus
    plant: AncPlant
    length: int
    pretrain: PretrainSettings
    mu: float
    delta: float = 1.0
    mu_by_mode: dict = field(default_factory=dict)
    acquisition_s: float = 2.5
    duration_s: float = 10.0  # stationary clip, or each non-stationary segment
    threshold_db: float = -10.0


def short_path_experiment(iterations: int = 33_000) -> Experiment:
    """Single low-band category through the short plant."""
    return Experiment(
        corpus=SyntheticCorpus((LOW_BAND,)),
        plant=short_plant(),
        length=10,
        pretrain=PretrainSettings(MetaConfig(0.03, 0.03, 10, 10, iterations), sfanc_mu=0.001),
        mu=0.02,
    )


def category_switch_experiment(iterations=(200_000, 80_000)) -> Experiment:
    """Low band for the first half, mid band for the second."""
    return Experiment(
        corpus=SyntheticCorpus((LOW_BAND, MID_BAND)),
        plant=short_plant(),
        length=10,
        pretrain=PretrainSettings(
            {
                "band_low": MetaConfig(0.002, 0.002, 10, 10, iterations[0]),
                "band_mid": MetaConfig(0.005, 0.005, 10, 10, iterations[1]),
            },
            sfanc_mu={"band_low": 0.02, "band_mid": 0.01},
        ),
        mu=0.015,
        duration_s=15.0,
    )


def _overrides(exp: Experiment, maml_db, sfanc_db):
    out = {}
    for mode in MODES:
        o = {"database": maml_db if mode == "maml_fxlms" else sfanc_db}
        if mode in exp.mu_by_mode:
            o["mu"] = exp.mu_by_mode[mode]
        out[mode] = o
    return out


def run_stationary(exp: Experiment, seed: int, modes=MODES):
    """Comparison on a held-out clip of the first category (oracle labels)."""
    label = exp.corpus.labels[0]
    maml, sfanc = build_databases(exp.corpus, exp.plant, exp.length, exp.pretrain, seed)
    clip = exp.corpus.clip(label, exp.corpus.held_out_index(label), exp.duration_s, seed)
    cfg = SessionConfig(
        plant=exp.plant, mu=exp.mu, delta=exp.delta, acquisition_s=exp.acquisition_s,
        length=exp.length, oracle_labels=True, threshold_db=exp.threshold_db, seed=seed,
    )
    return compare(modes, clip, cfg, _overrides(exp, maml, sfanc), labels=label)


def run_switch(exp: Experiment, seed: int, modes=MODES, classifier=None):
    """Comparison across a category switch at the end of the first segment.

    Without a classifier, true labels are used.
    """
    a, b = exp.corpus.labels[:2]
    maml, sfanc = build_databases(exp.corpus, exp.plant, exp.length, exp.pretrain, seed)
    segs = tuple(
        exp.corpus.clip(lab, exp.corpus.held_out_index(lab), exp.duration_s, seed)
        for lab in (a, b)
    )
    cfg = SessionConfig(
        plant=exp.plant, mu=exp.mu, delta=exp.delta, acquisition_s=exp.acquisition_s,
        length=exp.length, classifier=classifier, oracle_labels=classifier is None,
        threshold_db=exp.threshold_db, seed=seed,
    )
    return compare(modes, segs, cfg, _overrides(exp, maml, sfanc), labels=(a, b))


class IndexedCorpus:
    """Clips listed in an ingestion index, grouped by label and subclass.

    ``held_out`` maps a label to the subclass (ESC-50 category name) kept
    out of meta-training.
    """

    def __init__(self, index_path, held_out=None):
        with open(index_path, encoding="utf-8") as fh:
            doc = json.load(fh)
        clips = load_index_clips(index_path)
        self.sample_rate = int(doc["sample_rate"])
        self.held_out = dict(held_out or {})
        self.groups = {}
        for (sig, label), entry in zip(clips, doc["clips"]):
            self.groups.setdefault(label, {}).setdefault(entry["category"], []).append(sig)
        if not self.groups:
            raise InvalidArgumentError(f"{index_path}: index lists no clips")

    @property
    def labels(self):
        return sorted(self.groups)

    def training_subclasses(self, label):
        ho = self.held_out.get(label)
        return [c for c in sorted(self.groups[label]) if c != ho]

    def training_set(self, label, seed):
        return [self.groups[label][c] for c in self.training_subclasses(label)]

    def baseline_segment(self, label, seed, choice="held_out"):
        if choice == "held_out":
            ho = self.held_out.get(label)
            if ho is None or ho not in self.groups[label]:
                raise InvalidArgumentError(f"no held-out subclass present for {label!r}")
            return self.groups[label][ho][0], {"subclass": ho, "recording": 0, "choice": choice}
        rng = np.random.default_rng(stream_seed(seed, label, "baseline-pick"))
        subs = self.training_subclasses(label)
        sub = subs[int(rng.integers(len(subs)))]
        rec = int(rng.integers(len(self.groups[label][sub])))
        return self.groups[label][sub][rec], {"subclass": sub, "recording": rec, "choice": choice}

    def classifier_clips(self):
        return [(s, lab) for lab in self.labels for c in sorted(self.groups[lab]) for s in self.groups[lab][c]]
