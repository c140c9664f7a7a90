"""SFANC sessions: acquire a frame, classify it, select a filter, cancel.

A session is planned up front from the reference alone (classification
never looks at the residual), then executed with a single call to
``adaptive.simulate`` under the resulting phase schedule.
"""

from __future__ import annotations

import dataclasses
import io
import json
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np

from metasfanc.adaptive import (
    DEFAULT_ANR_LAMBDA,
    FROZEN,
    FXLMS,
    FXNLMS,
    SILENT,
    AncPlant,
    AnrTrace,
    ControlFilter,
    Phase,
    anr_series,
    settle_time,
    simulate,
    steady_state_anr,
    time_to_threshold,
)
from metasfanc.classify import ClassifierModel, classify
from metasfanc.dsp import Signal, write_wav
from metasfanc.errors import (
    ConfigError,
    DivergenceError,
    InvalidArgumentError,
    SelectionError,
)
from metasfanc.meta import DatabaseEntry, FilterDatabase

MODES = ("fxlms_baseline", "sfanc_frozen", "sfanc_fxnlms", "maml_fxlms")
_ALGO = {
    "fxlms_baseline": FXLMS,
    "sfanc_frozen": FROZEN,
    "sfanc_fxnlms": FXNLMS,
    "maml_fxlms": FXLMS,
}
_MODE_NAMES = {SILENT: "silent", FROZEN: "frozen", FXLMS: "fxlms", FXNLMS: "fxnlms"}
NEVER = -1  # CSV sentinel for a threshold that is never reached


@dataclass(frozen=True)
class SessionConfig:
    """Everything a session needs besides the reference signal.

    ``length`` defaults to the database filter length. With
    ``oracle_labels`` the caller supplies true labels and no classifier is
    consulted. ``reclassify`` turns on scheduled re-classification every
    ``reclassify_s`` seconds (defaults to ``acquisition_s``) over a sliding
    window of ``acquisition_s``.
    """

    plant: AncPlant
    mode: str = "maml_fxlms"
    mu: float = 0.0
    delta: float = 1.0
    anr_lambda: float = DEFAULT_ANR_LAMBDA
    acquisition_s: float = 2.5
    length: int | None = None
    database: FilterDatabase | None = None
    classifier: ClassifierModel | None = None
    oracle_labels: bool = False
    reclassify: bool = True
    reclassify_s: float | None = None
    threshold_db: float = -10.0
    seed: int = 0

    def validate(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if not self.acquisition_s > 0:
            raise ConfigError("acquisition_s must be positive")
        if self.reclassify_s is not None and not self.reclassify_s > 0:
            raise ConfigError("reclassify_s must be positive")
        if self.mu < 0:
            raise ConfigError("mu must be non-negative")
        if not self.delta > 0:
            raise ConfigError("delta must be positive")
        if not 0 < self.anr_lambda < 1:
            raise ConfigError("anr_lambda must lie in (0, 1)")
        if self.mode == "fxlms_baseline":
            if self.length is None and self.database is None:
                raise ConfigError("fxlms_baseline needs a filter length")
        else:
            if self.database is None or len(self.database) == 0:
                raise ConfigError(f"mode {self.mode} requires a filter database")
            if self.classifier is None and not self.oracle_labels:
                raise ConfigError(f"mode {self.mode} requires a classifier or oracle_labels")
        if self.database is not None and self.length is not None:
            if self.database.length != self.length:
                raise ConfigError("filter length differs from the database filters")

    @property
    def filter_length(self) -> int:
        return self.length if self.length is not None else self.database.length


@dataclass(frozen=True)
class PhaseRecord:
    start: int
    algorithm: str
    label: str | None


@dataclass(eq=False)
class SessionReport:
    mode: str
    sample_rate: int
    label: str | None
    score: float | None
    selection_index: int
    selections: list
    phases: list
    trace: AnrTrace
    residual: Signal
    final_filter: ControlFilter | None
    diverged_at: int | None = None
    switch_index: int | None = None
    threshold_db: float = -10.0
    settings: dict = field(default_factory=dict)

    @property
    def diverged(self) -> bool:
        return self.diverged_at is not None

    @property
    def time_to_threshold(self):
        """Samples from selection (sample 0 for the baseline) to the threshold."""
        return time_to_threshold(self.trace.anr_db, self.threshold_db, self.selection_index)

    @property
    def steady_state_db(self) -> float:
        return steady_state_anr(self.trace.anr_db)

    @property
    def recovery(self):
        """Samples after the switch until ANR settles at or below the threshold."""
        if self.switch_index is None:
            return None
        return settle_time(self.trace.anr_db, self.threshold_db, self.switch_index)

    def summary(self) -> dict:
        return {
            "time_to_threshold": self.time_to_threshold,
            "steady_state_db": self.steady_state_db,
            "recovery": self.recovery,
        }

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "sample_rate": self.sample_rate,
            "n_samples": len(self.trace),
            "label": self.label,
            "score": self.score,
            "selection_index": self.selection_index,
            "selections": self.selections,
            "phases": [dataclasses.asdict(p) for p in self.phases],
            "switch_index": self.switch_index,
            "diverged": self.diverged,
            "diverged_at": self.diverged_at,
            "threshold_db": self.threshold_db,
            "summary": self.summary(),
            "final_filter": None if self.final_filter is None else self.final_filter.weights.tolist(),
            "settings": self.settings,
        }

    def save(self, out_dir, trace_decimation: int = 1):
        """Write ``report.json``, ``anr.csv`` and ``residual.wav`` into ``out_dir``."""
        os.makedirs(out_dir, exist_ok=True)
        atomic_write_text(
            os.path.join(out_dir, "report.json"),
            json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n",
        )
        atomic_write_text(os.path.join(out_dir, "anr.csv"), self.trace.decimate(trace_decimation).to_csv())
        atomic_write(os.path.join(out_dir, "residual.wav"), lambda p: write_wav(self.residual, p))


def atomic_write(path, writer):
    """Call ``writer(tmp_path)`` and move the result onto ``path`` on success."""
    folder = os.path.dirname(os.path.abspath(path))
    os.makedirs(folder, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=folder)
    os.close(fd)
    try:
        writer(tmp)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


def atomic_write_text(path, text: str):
    def _write(tmp):
        with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)

    atomic_write(path, _write)


def _samples(seconds: float, rate: int) -> int:
    return int(round(seconds * rate))


def _select(db: FilterDatabase, label: str) -> np.ndarray:
    if label not in db:
        raise SelectionError(f"no pretrained filter for category {label!r}")
    return db.filter(label).weights


def _decide(cfg: SessionConfig, x: np.ndarray, rate: int, stop: int, n_acq: int, oracle):
    if cfg.oracle_labels:
        return oracle(stop), None
    frame = Signal(x[stop - n_acq: stop], rate)
    label, score = classify(cfg.classifier, frame)
    return label, score


def _plan(cfg: SessionConfig, reference: Signal, oracle, rescan: bool):
    """Phase schedule and selection log for one reference signal."""
    x = reference.samples
    L = cfg.filter_length
    algo = _ALGO[cfg.mode]
    if cfg.mode == "fxlms_baseline":
        return [Phase(0, FXLMS, np.zeros(L))], [], 0

    n_acq = _samples(cfg.acquisition_s, reference.sample_rate)
    if x.size <= n_acq:
        raise InvalidArgumentError(
            f"reference ({x.size} samples) must be longer than the acquisition window ({n_acq})"
        )
    hop = _samples(cfg.reclassify_s or cfg.acquisition_s, reference.sample_rate)
    phases = [Phase(0, SILENT, label="acquisition")]
    selections = []
    current = None
    stop = n_acq
    while stop < x.size:
        label, score = _decide(cfg, x, reference.sample_rate, stop, n_acq, oracle)
        selections.append({"index": stop, "label": label, "score": score})
        if label != current:
            phases.append(Phase(stop, algo, _select(cfg.database, label), label=label))
            current = label
        if not (rescan and cfg.reclassify):
            break
        stop += hop
    return phases, selections, n_acq


def _execute(cfg: SessionConfig, reference: Signal, phases, selections, selection_index, switch_index):
    x = reference.samples
    res = simulate(
        x, cfg.plant, cfg.filter_length, phases,
        mu=cfg.mu, delta=cfg.delta, anr_lambda=cfg.anr_lambda,
    )
    d = res.d
    if res.diverged:
        # mute the controller from the offending sample on
        k = res.diverged_at
        e = np.concatenate([res.e[:k], d[k:]])
        anr = anr_series(e, d, cfg.anr_lambda)
        final, diverged_at = None, k
    else:
        e, anr = res.e, res.anr_db
        final, diverged_at = ControlFilter(res.weights), None
    trace = AnrTrace(np.arange(x.size, dtype=np.int64), e, d, anr)
    first = selections[0] if selections else {"label": None, "score": None}
    records = [PhaseRecord(p.start, _MODE_NAMES[p.mode], p.label or None) for p in phases]
    return SessionReport(
        mode=cfg.mode,
        sample_rate=reference.sample_rate,
        label=first["label"],
        score=first["score"],
        selection_index=selection_index,
        selections=selections,
        phases=records,
        trace=trace,
        residual=Signal(e, reference.sample_rate),
        final_filter=final,
        diverged_at=diverged_at,
        switch_index=switch_index,
        threshold_db=cfg.threshold_db,
        settings={
            "mu": cfg.mu, "delta": cfg.delta, "anr_lambda": cfg.anr_lambda,
            "acquisition_s": cfg.acquisition_s, "oracle_labels": cfg.oracle_labels,
            "plant": cfg.plant.fingerprint(), "seed": cfg.seed,
        },
    )


def run_session(reference: Signal, cfg: SessionConfig, label: str | None = None) -> SessionReport:
    """Classify the first acquisition window, then cancel with the selected filter.

    Nothing is emitted during acquisition. ``label`` is required with
    ``oracle_labels``. The baseline adapts from zero at sample 0.
    """
    cfg.validate()
    if cfg.oracle_labels and cfg.mode != "fxlms_baseline" and label is None:
        raise InvalidArgumentError("oracle_labels needs the true label")
    phases, selections, sel = _plan(cfg, reference, lambda _: label, rescan=False)
    return _execute(cfg, reference, phases, selections, sel, None)


def run_nonstationary(
    seg1: Signal,
    seg2: Signal,
    cfg: SessionConfig,
    switch_time_s: float | None = None,
    labels=None,
) -> SessionReport:
    """Cancel ``seg1`` followed by ``seg2`` with scheduled re-classification.

    The clip is ``seg1`` up to the switch (its whole length by default)
    followed by all of ``seg2``. The filter is swapped for the newly
    selected one whenever the label changes. ``labels`` gives the true
    (first, second) labels when ``oracle_labels`` is set.
    """
    cfg.validate()
    if seg1.sample_rate != seg2.sample_rate:
        raise InvalidArgumentError("segments must share a sample rate")
    rate = seg1.sample_rate
    switch = len(seg1) if switch_time_s is None else _samples(switch_time_s, rate)
    if not 0 < switch <= len(seg1):
        raise InvalidArgumentError("switch must fall inside the first segment")
    if cfg.oracle_labels and cfg.mode != "fxlms_baseline":
        if labels is None or len(labels) != 2:
            raise InvalidArgumentError("oracle_labels needs (first, second) labels")
    reference = Signal(np.concatenate([seg1.samples[:switch], seg2.samples]), rate)

    def oracle(stop):
        # the newest sample of the window decides its category
        return labels[0] if stop - 1 < switch else labels[1]

    phases, selections, sel = _plan(cfg, reference, oracle, rescan=True)
    return _execute(cfg, reference, phases, selections, sel, switch)


@dataclass(frozen=True)
class ComparisonRow:
    mode: str
    label: str | None
    time_to_threshold: int | None
    steady_state_db: float
    recovery: int | None
    diverged: bool


@dataclass(eq=False)
class Comparison:
    rows: list
    reports: dict

    def row(self, mode) -> ComparisonRow:
        return next(r for r in self.rows if r.mode == mode)

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("mode,label,time_to_threshold,steady_state_db,recovery,diverged\n")
        for r in self.rows:
            ttt = NEVER if r.time_to_threshold is None else r.time_to_threshold
            rec = NEVER if r.recovery is None else r.recovery
            buf.write(
                f"{r.mode},{r.label or ''},{ttt},{r.steady_state_db:.6f},{rec},{int(r.diverged)}\n"
            )
        return buf.getvalue()


def compare(modes, inputs, cfg: SessionConfig, overrides: dict | None = None, labels=None) -> Comparison:
    """Run several modes on identical inputs.

    ``inputs`` is a Signal (single session) or a ``(seg1, seg2)`` pair
    (non-stationary run). ``overrides`` maps a mode to SessionConfig field
    replacements, e.g. its own database or step size.
    """
    modes = list(modes)
    if len(modes) < 2:
        raise InvalidArgumentError("compare needs at least two modes")
    overrides = overrides or {}
    rows, reports = [], {}
    for mode in modes:
        mcfg = dataclasses.replace(cfg, mode=mode, **overrides.get(mode, {}))
        if isinstance(inputs, Signal):
            rep = run_session(inputs, mcfg, label=labels)
        else:
            rep = run_nonstationary(inputs[0], inputs[1], mcfg, labels=labels)
        key = mode if mode not in reports else f"{mode}#{len(reports)}"
        reports[key] = rep
        rows.append(ComparisonRow(
            mode, rep.label, rep.time_to_threshold, rep.steady_state_db, rep.recovery, rep.diverged,
        ))
    return Comparison(rows, reports)


# --------------------------------------------------------------------------
# baseline filters


def pretrain_single_segment(
    recording: Signal, plant: AncPlant, length: int, mu: float, delta: float = 1.0, epochs: int = 1
) -> ControlFilter:
    """FxNLMS from zero over ``epochs`` passes of one recording."""
    if epochs < 1:
        raise InvalidArgumentError("epochs must be >= 1")
    x = np.tile(recording.samples, int(epochs))
    res = simulate(x, plant, length, [Phase(0, FXNLMS, np.zeros(length))], mu=mu, delta=delta)
    if res.diverged:
        raise DivergenceError(
            f"single-segment pretraining diverged at sample {res.diverged_at}", index=res.diverged_at
        )
    return ControlFilter(res.weights)


def build_sfanc_database(sources: dict, plant: AncPlant, length: int, mu, delta=1.0, epochs=1) -> FilterDatabase:
    """Database of single-segment FxNLMS filters, one per category.

    ``sources[label]`` is ``(recording, provenance_dict)``; ``mu`` is a float
    or a dict keyed by label.
    """
    db = FilterDatabase()
    for label in sorted(sources):
        rec, info = sources[label]
        step = mu[label] if isinstance(mu, dict) else mu
        try:
            w = pretrain_single_segment(rec, plant, length, step, delta, epochs)
        except DivergenceError as exc:
            raise DivergenceError(f"category {label!r}: {exc}", index=exc.index) from exc
        extra = dict(info)
        extra.update({"mu": step, "delta": delta, "epochs": epochs})
        db.add(label, DatabaseEntry(w, plant.fingerprint(), None, [], "fxnlms-single-segment", extra))
    return db
