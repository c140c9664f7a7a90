"""Command-line front end.

Subcommands: pretrain, train-classifier, run, compare, ingest-esc50.
Each experiment is one JSON config; ``--seed`` overrides its seed.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
divergence.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import shutil
import sys
import tempfile
from typing import Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from metasfanc.adaptive import AncPlant
from metasfanc.classify import ClassifierModel, MelParams, TrainConfig, ingest_esc50
from metasfanc.dsp import CategorySpec, FirPath, Signal, gaussian_fir, read_wav, resample
from metasfanc.errors import (
    ConfigError,
    DataError,
    InvalidArgumentError,
    NumericError,
    SelectionError,
)
from metasfanc.meta import FilterDatabase, MetaConfig
from metasfanc.pipeline import (
    SessionConfig,
    SessionReport,
    atomic_write_text,
    compare,
    run_nonstationary,
    run_session,
)
from metasfanc.scenarios import (
    IndexedCorpus,
    PretrainSettings,
    SyntheticCorpus,
    build_databases,
    classifier_clips,
    train_corpus_classifier,
)

log = logging.getLogger("metasfanc")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

Mode = Literal["fxlms_baseline", "sfanc_frozen", "sfanc_fxnlms", "maml_fxlms"]


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class GaussianPath(_Strict):
    length: int = Field(ge=1)
    variance: float = Field(gt=0)
    seed: int = 0


class PlantConfig(_Strict):
    primary: Optional[list[float]] = None
    primary_gaussian: Optional[GaussianPath] = None
    secondary: list[float] = Field(min_length=1)
    secondary_estimate: Optional[list[float]] = None

    @model_validator(mode="after")
    def _one_primary(self):
        if (self.primary is None) == (self.primary_gaussian is None):
            raise ValueError("give exactly one of primary / primary_gaussian")
        if self.primary is not None and not self.primary:
            raise ValueError("primary path must be non-empty")
        return self

    def build(self) -> AncPlant:
        if self.primary is not None:
            p = FirPath(self.primary)
        else:
            g = self.primary_gaussian
            p = gaussian_fir(g.length, g.variance, g.seed)
        est = FirPath(self.secondary_estimate) if self.secondary_estimate else None
        return AncPlant(p, FirPath(self.secondary), est)


class CategoryConfig(_Strict):
    label: str = Field(min_length=1)
    low_hz: float = Field(ge=0)
    high_hz: float = Field(gt=0)
    n_subclasses: int = Field(default=10, ge=2)
    overlap: float = Field(default=4.0, gt=0)
    am_depth: float = Field(default=0.3, ge=0, lt=1)
    am_rate_hz: float = Field(default=2.0, ge=0)
    jitter_hz: float = Field(default=20.0, ge=0)
    tilt_db_per_octave: float = -3.0
    held_out: Optional[int] = None

    @model_validator(mode="after")
    def _band(self):
        if not self.low_hz < self.high_hz:
            raise ValueError("low_hz must be below high_hz")
        if self.held_out is not None and not 0 <= self.held_out < self.n_subclasses:
            raise ValueError("held_out must index a subclass")
        return self

    def spec(self) -> CategorySpec:
        return CategorySpec(
            self.label, self.low_hz, self.high_hz, self.n_subclasses, self.overlap,
            self.am_depth, self.am_rate_hz, self.jitter_hz, self.tilt_db_per_octave,
        )


class SyntheticDataset(_Strict):
    kind: Literal["synthetic"]
    categories: list[CategoryConfig] = Field(min_length=1)
    level: float = Field(default=0.3, gt=0)
    recording_s: float = Field(default=5.0, gt=0)
    recordings_per_subclass: int = Field(default=2, ge=1)


class Esc50Dataset(_Strict):
    kind: Literal["esc50"]
    index: str
    held_out: dict[str, str] = {}


class MetaOverride(_Strict):
    alpha: Optional[float] = Field(default=None, ge=0)
    beta: Optional[float] = Field(default=None, gt=0)
    iterations: Optional[int] = Field(default=None, ge=1)


class MetaSection(_Strict):
    alpha: float = Field(ge=0)
    beta: float = Field(gt=0)
    K: int = Field(default=10, ge=1)
    J: int = Field(default=10, ge=1)
    iterations: int = Field(ge=1)
    inner_steps: int = Field(default=1, ge=1)
    query_error_on_support: bool = False
    by_category: dict[str, MetaOverride] = {}

    def for_label(self, label) -> MetaConfig:
        o = self.by_category.get(label, MetaOverride())
        return MetaConfig(
            alpha=self.alpha if o.alpha is None else o.alpha,
            beta=self.beta if o.beta is None else o.beta,
            K=self.K, J=self.J,
            iterations=self.iterations if o.iterations is None else o.iterations,
            inner_steps=self.inner_steps,
            query_error_on_support=self.query_error_on_support,
        )


class SfancSection(_Strict):
    mu: Union[float, dict[str, float]]
    delta: float = Field(default=1.0, gt=0)
    epochs: int = Field(default=6, ge=1)
    segment: Literal["held_out", "random"] = "held_out"


class MelSection(_Strict):
    fft_size: int = 1024
    hop: int = Field(default=256, ge=1)
    n_mels: int = Field(default=64, ge=1)
    fmin: float = Field(default=50.0, ge=0)
    fmax: Optional[float] = None

    def build(self) -> MelParams:
        return MelParams(self.fft_size, self.hop, self.n_mels, self.fmin, self.fmax)


class ClassifierSection(_Strict):
    kind: Literal["centroid", "linear"] = "linear"
    epochs: int = Field(default=400, ge=1)
    learning_rate: float = Field(default=0.5, gt=0)
    l2: float = Field(default=1e-3, ge=0)
    augment: bool = False
    holdout: float = Field(default=0.25, ge=0, lt=1)
    clips_per_subclass: int = Field(default=4, ge=1)
    mel: MelSection = MelSection()


class SessionSection(_Strict):
    modes: list[Mode] = Field(default=["maml_fxlms"], min_length=1)
    mu: float = Field(ge=0)
    mu_by_mode: dict[Mode, float] = {}
    delta: float = Field(default=1.0, gt=0)
    anr_lambda: float = Field(default=0.999, gt=0, lt=1)
    acquisition_s: float = Field(default=2.5, gt=0)
    threshold_db: float = -10.0
    oracle_labels: bool = False
    reclassify: bool = True
    reclassify_s: Optional[float] = Field(default=None, gt=0)
    trace_decimation: int = Field(default=1, ge=1)


class ScenarioSection(_Strict):
    kind: Literal["stationary", "nonstationary"]
    categories: list[str] = Field(min_length=1, max_length=2)
    duration_s: float = Field(default=10.0, gt=0)
    reference_wavs: Optional[list[str]] = None

    @model_validator(mode="after")
    def _count(self):
        need = 1 if self.kind == "stationary" else 2
        if len(self.categories) != need:
            raise ValueError(f"{self.kind} scenario needs {need} categor{'y' if need == 1 else 'ies'}")
        if self.reference_wavs is not None and len(self.reference_wavs) != need:
            raise ValueError("one reference WAV per scenario category")
        return self


class PathsSection(_Strict):
    database: str = "database.json"
    sfanc_database: str = "sfanc_database.json"
    classifier: str = "classifier.json"


class ExperimentConfig(_Strict):
    comment: Optional[str] = None  # free text, ignored
    seed: int = 0
    sample_rate: int = Field(default=16000, gt=0)
    filter_length: int = Field(ge=1)
    plant: PlantConfig
    dataset: Union[SyntheticDataset, Esc50Dataset] = Field(discriminator="kind")
    meta: MetaSection
    sfanc: SfancSection
    classifier: ClassifierSection = ClassifierSection()
    session: SessionSection
    scenario: Optional[ScenarioSection] = None
    paths: PathsSection = PathsSection()


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        return ExperimentConfig.model_validate_json(text)
    except ValidationError as exc:
        raise ConfigError(f"{path}: invalid config\n{exc}") from exc


# --------------------------------------------------------------------------
# helpers


def _resolve(out_dir, path):
    return path if os.path.isabs(path) else os.path.join(out_dir, path)


def _corpus(cfg: ExperimentConfig, base_dir: str):
    ds = cfg.dataset
    if ds.kind == "synthetic":
        held = {c.label: c.held_out for c in ds.categories if c.held_out is not None}
        return SyntheticCorpus(
            tuple(c.spec() for c in ds.categories), held, ds.level, ds.recording_s,
            ds.recordings_per_subclass, cfg.sample_rate,
        )
    index = ds.index if os.path.isabs(ds.index) else os.path.join(base_dir, ds.index)
    if not os.path.exists(index):
        raise DataError(f"dataset index not found: {index}")
    corpus = IndexedCorpus(index, ds.held_out)
    if corpus.sample_rate != cfg.sample_rate:
        raise ConfigError(
            f"index sample rate {corpus.sample_rate} differs from config {cfg.sample_rate}"
        )
    return corpus


def _settings(cfg: ExperimentConfig, labels) -> PretrainSettings:
    metas = {lab: cfg.meta.for_label(lab) for lab in labels}
    mu = cfg.sfanc.mu
    if isinstance(mu, dict):
        missing = [lab for lab in labels if lab not in mu]
        if missing:
            raise ConfigError(f"sfanc.mu has no step size for {missing}")
    return PretrainSettings(metas, mu, cfg.sfanc.delta, cfg.sfanc.epochs, cfg.sfanc.segment)


def _load_file(loader, path, what):
    if not os.path.exists(path):
        raise DataError(f"{what} not found: {path}")
    return loader(path)


def _table(rows) -> str:
    lines = [f"{'mode':<16} {'label':<12} {'t_thr':>8} {'steady_dB':>10} {'recovery':>9}"]
    for r in rows:
        t = "never" if r.time_to_threshold is None else str(r.time_to_threshold)
        rec = "-" if r.recovery is None else str(r.recovery)
        lines.append(f"{r.mode:<16} {(r.label or '-'):<12} {t:>8} {r.steady_state_db:>10.2f} {rec:>9}")
    return "\n".join(lines)


def _replace_dir(tmp_dir, final_dir):
    if os.path.isdir(final_dir):
        shutil.rmtree(final_dir)
    os.replace(tmp_dir, final_dir)


# --------------------------------------------------------------------------
# commands


def cmd_pretrain(cfg: ExperimentConfig, out_dir: str, base_dir: str):
    corpus = _corpus(cfg, base_dir)
    plant = cfg.plant.build()
    maml, sfanc = build_databases(
        corpus, plant, cfg.filter_length, _settings(cfg, corpus.labels), cfg.seed
    )
    os.makedirs(out_dir, exist_ok=True)
    atomic_write_text(_resolve(out_dir, cfg.paths.database), maml.to_json())
    atomic_write_text(_resolve(out_dir, cfg.paths.sfanc_database), sfanc.to_json())
    for label in maml.labels():
        hist = maml.entries[label].loss_history
        print(f"{label}: pretrained L={maml.length}, final query loss {hist[-1]:.3e}")
    return EXIT_OK


def cmd_train_classifier(cfg: ExperimentConfig, out_dir: str, base_dir: str):
    corpus = _corpus(cfg, base_dir)
    cc = cfg.classifier
    frame = int(round(cfg.session.acquisition_s * cfg.sample_rate))
    if isinstance(corpus, SyntheticCorpus):
        clips = classifier_clips(corpus, cfg.seed, cc.clips_per_subclass, cfg.session.acquisition_s)
    else:
        clips = corpus.classifier_clips()
    train = TrainConfig(cc.kind, cc.epochs, cc.learning_rate, cc.l2, cfg.seed)
    model, acc, n_train = train_corpus_classifier(
        clips, cfg.seed, train, cc.mel.build(), cc.holdout, cc.augment, frame
    )
    os.makedirs(out_dir, exist_ok=True)
    atomic_write_text(_resolve(out_dir, cfg.paths.classifier), model.to_json())
    print(f"training clips: {n_train}")
    print(f"held-out accuracy: {acc:.4f}")
    return EXIT_OK


def _session_inputs(cfg: ExperimentConfig, out_dir: str, base_dir: str):
    if cfg.scenario is None:
        raise ConfigError("config has no scenario section")
    sc, ss = cfg.scenario, cfg.session
    modes = list(ss.modes)
    needs_db = [m for m in modes if m != "fxlms_baseline"]
    maml = sfanc = model = None
    if any(m == "maml_fxlms" for m in needs_db):
        maml = _load_file(FilterDatabase.load, _resolve(out_dir, cfg.paths.database), "filter database")
    if any(m in ("sfanc_frozen", "sfanc_fxnlms") for m in needs_db):
        sfanc = _load_file(
            FilterDatabase.load, _resolve(out_dir, cfg.paths.sfanc_database), "SFANC database"
        )
    if needs_db and not ss.oracle_labels:
        model = _load_file(ClassifierModel.load, _resolve(out_dir, cfg.paths.classifier), "classifier")

    if sc.reference_wavs is not None:
        refs = []
        for p in sc.reference_wavs:
            sig = read_wav(p if os.path.isabs(p) else os.path.join(base_dir, p))
            if sig.sample_rate != cfg.sample_rate:
                sig = resample(sig, cfg.sample_rate)
            refs.append(sig)
    else:
        corpus = _corpus(cfg, base_dir)
        if not isinstance(corpus, SyntheticCorpus):
            raise ConfigError("esc50 scenarios need reference_wavs")
        refs = [
            corpus.clip(lab, corpus.held_out_index(lab), sc.duration_s, cfg.seed)
            for lab in sc.categories
        ]

    base = SessionConfig(
        plant=cfg.plant.build(), mu=ss.mu, delta=ss.delta, anr_lambda=ss.anr_lambda,
        acquisition_s=ss.acquisition_s, length=cfg.filter_length, classifier=model,
        oracle_labels=ss.oracle_labels, reclassify=ss.reclassify, reclassify_s=ss.reclassify_s,
        threshold_db=ss.threshold_db, seed=cfg.seed,
    )
    overrides = {}
    for m in modes:
        o = {"database": maml if m == "maml_fxlms" else sfanc}
        if m in ss.mu_by_mode:
            o["mu"] = ss.mu_by_mode[m]
        overrides[m] = o
    inputs = refs[0] if sc.kind == "stationary" else (refs[0], refs[1])
    labels = sc.categories[0] if sc.kind == "stationary" else tuple(sc.categories)
    return modes, inputs, base, overrides, labels


def _run_modes(modes, inputs, base, overrides, labels):
    if len(modes) >= 2:
        return compare(modes, inputs, base, overrides, labels)
    mcfg = dataclasses.replace(base, mode=modes[0], **overrides[modes[0]])
    if isinstance(inputs, Signal):
        rep = run_session(inputs, mcfg, label=labels)
    else:
        rep = run_nonstationary(inputs[0], inputs[1], mcfg, labels=labels)
    return rep


def cmd_run(cfg: ExperimentConfig, out_dir: str, base_dir: str):
    modes, inputs, base, overrides, labels = _session_inputs(cfg, out_dir, base_dir)
    result = _run_modes(modes, inputs, base, overrides, labels)
    os.makedirs(out_dir, exist_ok=True)
    tmp = tempfile.mkdtemp(prefix=".tmp-run-", dir=out_dir)
    try:
        if isinstance(result, SessionReport):
            reports, rows = {modes[0]: result}, None
        else:
            reports, rows = result.reports, result.rows
        for name, rep in reports.items():
            rep.save(os.path.join(tmp, name), cfg.session.trace_decimation)
        if rows is not None:
            atomic_write_text(os.path.join(tmp, "comparison.csv"), result.to_csv())
        _replace_dir(tmp, os.path.join(out_dir, "run"))
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    if rows is not None:
        print(_table(rows))
    else:
        rep = result
        s = rep.summary()
        print(f"mode {rep.mode}: label {rep.label}, time to threshold {s['time_to_threshold']}, "
              f"steady state {s['steady_state_db']:.2f} dB")
    diverged = [n for n, r in reports.items() if r.diverged]
    if diverged:
        print(f"diverged: {', '.join(diverged)}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_compare(cfg: ExperimentConfig, out_dir: str, base_dir: str):
    modes, inputs, base, overrides, labels = _session_inputs(cfg, out_dir, base_dir)
    if len(modes) < 2:
        raise ConfigError("compare needs at least two session modes")
    result = compare(modes, inputs, base, overrides, labels)
    os.makedirs(out_dir, exist_ok=True)
    atomic_write_text(os.path.join(out_dir, "comparison.csv"), result.to_csv())
    print(_table(result.rows))
    return EXIT_OK


def cmd_ingest_esc50(args):
    cmap = None
    if args.category_map is not None:
        if args.category_map == "major":
            cmap = "major"
        else:
            try:
                with open(args.category_map, encoding="utf-8") as fh:
                    cmap = json.load(fh)
            except (OSError, json.JSONDecodeError) as exc:
                raise ConfigError(f"category map {args.category_map}: {exc}") from exc
    if not os.path.exists(args.manifest):
        raise DataError(f"manifest not found: {args.manifest}")
    os.makedirs(args.out, exist_ok=True)
    tmp = tempfile.mkdtemp(prefix=".tmp-ingest-", dir=args.out)
    try:
        index = ingest_esc50(
            args.root, args.manifest, tmp, cmap, args.sample_rate, args.clip_s
        )
        atomic_write_text(os.path.join(tmp, "index.json"), json.dumps(index, indent=1, sort_keys=True) + "\n")
        final_clips = os.path.join(args.out, "clips")
        _replace_dir(os.path.join(tmp, "clips"), final_clips)
        os.replace(os.path.join(tmp, "index.json"), os.path.join(args.out, "index.json"))
    finally:
        shutil.rmtree(tmp, ignore_errors=True)
    print(f"indexed {len(index['clips'])} clips, skipped {len(index['skipped'])} files")
    return EXIT_OK


_COMMANDS = {
    "pretrain": cmd_pretrain,
    "train-classifier": cmd_train_classifier,
    "run": cmd_run,
    "compare": cmd_compare,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", default="out", help="output directory (default: out)")
    common.add_argument("--seed", type=int, default=None, help="override the config seed")
    with_cfg = argparse.ArgumentParser(add_help=False, parents=[common])
    with_cfg.add_argument("--config", required=True, help="experiment JSON file")

    parser = argparse.ArgumentParser(prog="metasfanc", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("pretrain", parents=[with_cfg], help="meta-train the filter databases")
    sub.add_parser("train-classifier", parents=[with_cfg], help="train the noise classifier")
    sub.add_parser("run", parents=[with_cfg], help="run sessions and write reports")
    sub.add_parser("compare", parents=[with_cfg], help="compare modes and write a table")
    ing = sub.add_parser("ingest-esc50", parents=[common], help="index ESC-50 style recordings")
    ing.add_argument("--root", required=True, help="directory holding the WAV files")
    ing.add_argument("--manifest", required=True, help="ESC-50 CSV manifest")
    ing.add_argument("--category-map", default=None,
                     help='JSON file mapping category to label, or "major"')
    ing.add_argument("--sample-rate", type=int, default=16000)
    ing.add_argument("--clip-s", type=float, default=2.5)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "ingest-esc50":
            return cmd_ingest_esc50(args)
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = cfg.model_copy(update={"seed": args.seed})
        base_dir = os.path.dirname(os.path.abspath(args.config))
        return _COMMANDS[args.command](cfg, args.out, base_dir)
    except (ConfigError, InvalidArgumentError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, SelectionError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
