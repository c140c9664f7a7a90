"""Online cancellation: FxLMS / FxNLMS updates, plant simulation and ANR.

Sign and buffer conventions follow the usual single-channel feedforward
setup. Reference buffers hold the newest sample first, the anti-noise
``y(n) = w^T x(n)`` reaches the error sensor through the true secondary path
``s``, and the weight update uses the reference filtered through the
estimate ``s_hat``.
"""

from __future__ import annotations

import hashlib
import io
import json
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from metasfanc.dsp import FirPath, FirState, Signal, convolve, fir_step
from metasfanc.errors import DivergenceError, InvalidArgumentError, NumericError

DIVERGENCE_GUARD = 1e6
ANR_FLOOR = 1e-12
DEFAULT_ANR_LAMBDA = 0.999

# Per-sample control modes understood by the simulation kernel.
SILENT, FROZEN, FXLMS, FXNLMS = 0, 1, 2, 3
ALGOS = {"frozen": FROZEN, "fxlms": FXLMS, "fxnlms": FXNLMS}


@dataclass(eq=False)
class ControlFilter:
    weights: np.ndarray

    def __post_init__(self):
        w = np.array(self.weights, dtype=np.float64).reshape(-1)
        if w.size == 0:
            raise InvalidArgumentError("control filter must have at least one tap")
        if not np.all(np.isfinite(w)):
            raise NumericError("control filter has non-finite taps")
        self.weights = w

    @classmethod
    def zeros(cls, length: int) -> "ControlFilter":
        return cls(np.zeros(int(length)))

    def __len__(self):
        return self.weights.size

    def copy(self) -> "ControlFilter":
        return ControlFilter(self.weights.copy())

    def __eq__(self, other):
        if not isinstance(other, ControlFilter):
            return NotImplemented
        return np.array_equal(self.weights, other.weights)


@dataclass(frozen=True)
class AncPlant:
    primary: FirPath
    secondary: FirPath
    secondary_estimate: FirPath = None

    def __post_init__(self):
        for name in ("primary", "secondary"):
            value = getattr(self, name)
            if not isinstance(value, FirPath):
                object.__setattr__(self, name, FirPath(value))
        est = self.secondary_estimate
        if est is None:
            est = self.secondary
        elif not isinstance(est, FirPath):
            est = FirPath(est)
        object.__setattr__(self, "secondary_estimate", est)

    @property
    def history(self) -> int:
        """Extra past samples a window needs so both secondary filters see full support."""
        return max(len(self.secondary), len(self.secondary_estimate)) - 1

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for path in (self.primary, self.secondary, self.secondary_estimate):
            h.update(np.asarray(path.coefficients, dtype="<f8").tobytes())
            h.update(b"|")
        return h.hexdigest()[:16]

    def disturbance(self, reference: np.ndarray) -> np.ndarray:
        """d(n): the reference through P(z), truncated to the reference length."""
        return convolve(reference, self.primary)[: len(reference)]


@dataclass
class FilteredXState:
    """Delay state shared by the FxLMS-family step functions."""

    plant: AncPlant
    length: int
    x_buf: np.ndarray = field(init=False)
    xf_buf: np.ndarray = field(init=False)
    _est: FirState = field(init=False, repr=False)
    _sec: FirState = field(init=False, repr=False)

    def __post_init__(self):
        if self.length < 1:
            raise InvalidArgumentError("filter length must be positive")
        self.x_buf = np.zeros(self.length)
        self.xf_buf = np.zeros(self.length)
        self._est = FirState(self.plant.secondary_estimate)
        self._sec = FirState(self.plant.secondary)

    def push_reference(self, x: float):
        if not np.isfinite(x):
            raise NumericError("reference sample is not finite")
        self.x_buf[1:] = self.x_buf[:-1]
        self.x_buf[0] = x
        self.xf_buf[1:] = self.xf_buf[:-1]
        self.xf_buf[0] = fir_step(self._est, x)

    def emit(self, y: float) -> float:
        """Pass anti-noise through the true secondary path."""
        return fir_step(self._sec, y)


def _check_step_inputs(w, d, mu):
    if mu < 0:
        raise InvalidArgumentError("step size must be non-negative")
    if not np.isfinite(d):
        raise NumericError("disturbance sample is not finite")


def _guard(w_new: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(w_new)):
        raise NumericError("weight update produced non-finite taps")
    if np.max(np.abs(w_new)) > DIVERGENCE_GUARD:
        raise DivergenceError("control filter diverged")
    return w_new


def fxlms_step(w: ControlFilter, x: float, d: float, mu: float, aux: FilteredXState):
    """One FxLMS sample: returns ``(e, updated filter)``; ``w`` is not modified."""
    _check_step_inputs(w, d, mu)
    if len(w) != aux.length:
        raise InvalidArgumentError("filter length does not match the delay state")
    aux.push_reference(x)
    y = float(np.dot(w.weights, aux.x_buf))
    e = float(d) - aux.emit(y)
    if mu == 0:
        return e, w.copy()
    return e, ControlFilter(_guard(w.weights + mu * e * aux.xf_buf))


def fxnlms_step(
    w: ControlFilter, x: float, d: float, mu: float, delta: float, aux: FilteredXState
):
    """FxLMS with the step normalised by ``delta + |x_f|^2``."""
    if not delta > 0:
        raise InvalidArgumentError("regularization delta must be positive")
    _check_step_inputs(w, d, mu)
    if len(w) != aux.length:
        raise InvalidArgumentError("filter length does not match the delay state")
    aux.push_reference(x)
    y = float(np.dot(w.weights, aux.x_buf))
    e = float(d) - aux.emit(y)
    if mu == 0:
        return e, w.copy()
    xf = aux.xf_buf
    step = mu / (delta + float(np.dot(xf, xf)))
    return e, ControlFilter(_guard(w.weights + step * e * xf))


@dataclass
class AnrState:
    """Exponential estimates of |e| and |d|."""

    lam: float = DEFAULT_ANR_LAMBDA
    a_e: float = 0.0
    a_d: float = 0.0
    floor: float = ANR_FLOOR

    def __post_init__(self):
        if not 0 < self.lam < 1:
            raise InvalidArgumentError("ANR smoothing factor must lie in (0, 1)")


def anr_update(state: AnrState, e: float, d: float):
    """Advance the smoothers; returns ANR in dB, or None while |d| is below the floor."""
    state.a_e = state.lam * state.a_e + (1.0 - state.lam) * abs(e)
    state.a_d = state.lam * state.a_d + (1.0 - state.lam) * abs(d)
    if state.a_d < state.floor:
        return None
    return 20.0 * np.log10(max(state.a_e, state.floor) / state.a_d)


@dataclass(eq=False)
class AnrTrace:
    """Per-sample (or decimated) record of e(n), d(n) and ANR.

    Samples where ANR is undefined (disturbance below the floor) carry 0 dB.
    """

    n: np.ndarray
    e: np.ndarray
    d: np.ndarray
    anr_db: np.ndarray

    def __len__(self):
        return self.n.size

    def decimate(self, factor: int) -> "AnrTrace":
        if factor < 1:
            raise InvalidArgumentError("decimation factor must be >= 1")
        s = slice(None, None, factor)
        return AnrTrace(self.n[s], self.e[s], self.d[s], self.anr_db[s])

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("n,e,d,anr_db\n")
        block = np.column_stack([self.e, self.d, self.anr_db])
        for idx, row in zip(self.n, block):
            buf.write(f"{int(idx)},{row[0]:.12g},{row[1]:.12g},{row[2]:.12g}\n")
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps(
            {
                "n": self.n.tolist(),
                "e": self.e.tolist(),
                "d": self.d.tolist(),
                "anr_db": self.anr_db.tolist(),
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "AnrTrace":
        obj = json.loads(text)
        return cls(
            np.asarray(obj["n"], dtype=np.int64),
            np.asarray(obj["e"], dtype=np.float64),
            np.asarray(obj["d"], dtype=np.float64),
            np.asarray(obj["anr_db"], dtype=np.float64),
        )


@njit(cache=True)
def _simulate_kernel(
    x, d, s, s_hat, w0, seg_starts, seg_modes, seg_weights, seg_load,
    mu, delta, lam, floor, guard,
):
    n_samples = x.size
    L = w0.size
    w = w0.copy()
    x_buf = np.zeros(L)
    xf_buf = np.zeros(L)
    xh = np.zeros(s_hat.size)
    y_buf = np.zeros(s.size)
    e_out = np.empty(n_samples)
    anr_out = np.empty(n_samples)
    a_e = 0.0
    a_d = 0.0
    seg = -1
    mode = 0
    diverged_at = -1

    for n in range(n_samples):
        if seg + 1 < seg_starts.size and n == seg_starts[seg + 1]:
            seg += 1
            mode = seg_modes[seg]
            if seg_load[seg]:
                for k in range(L):
                    w[k] = seg_weights[seg, k]

        for k in range(L - 1, 0, -1):
            x_buf[k] = x_buf[k - 1]
            xf_buf[k] = xf_buf[k - 1]
        x_buf[0] = x[n]
        for k in range(s_hat.size - 1, 0, -1):
            xh[k] = xh[k - 1]
        xh[0] = x[n]
        xf = 0.0
        for k in range(s_hat.size):
            xf += s_hat[k] * xh[k]
        xf_buf[0] = xf

        y = 0.0
        if mode != 0:
            for k in range(L):
                y += w[k] * x_buf[k]
        for k in range(s.size - 1, 0, -1):
            y_buf[k] = y_buf[k - 1]
        y_buf[0] = y
        yf = 0.0
        for k in range(s.size):
            yf += s[k] * y_buf[k]
        e = d[n] - yf
        e_out[n] = e

        if mode == 2 or mode == 3:
            step = mu
            if mode == 3:
                energy = 0.0
                for k in range(L):
                    energy += xf_buf[k] * xf_buf[k]
                step = mu / (delta + energy)
            if step != 0.0:
                bad = False
                for k in range(L):
                    w[k] += step * e * xf_buf[k]
                    if not (abs(w[k]) <= guard):
                        bad = True
                if bad:
                    diverged_at = n

        a_e = lam * a_e + (1.0 - lam) * abs(e)
        a_d = lam * a_d + (1.0 - lam) * abs(d[n])
        if a_d < floor:
            anr_out[n] = 0.0
        else:
            anr_out[n] = 20.0 * np.log10(max(a_e, floor) / a_d)
        if diverged_at >= 0 or not np.isfinite(e):
            if diverged_at < 0:
                diverged_at = n
            break

    if diverged_at >= 0:
        stop = diverged_at + 1
    else:
        stop = n_samples
    return e_out[:stop], anr_out[:stop], w, diverged_at


@dataclass
class Phase:
    """A contiguous run of samples controlled in one mode.

    ``weights`` (if given) is loaded into the filter at ``start``; otherwise
    the filter carries over from the previous phase.
    """

    start: int
    mode: int
    weights: np.ndarray = None
    label: str = ""


@dataclass(eq=False)
class SimulationResult:
    e: np.ndarray
    d: np.ndarray
    anr_db: np.ndarray
    weights: np.ndarray
    diverged_at: int  # -1 when the run completed

    @property
    def diverged(self) -> bool:
        return self.diverged_at >= 0

    def trace(self) -> AnrTrace:
        n = np.arange(self.e.size, dtype=np.int64)
        return AnrTrace(n, self.e, self.d[: self.e.size], self.anr_db)


def simulate(
    reference: np.ndarray,
    plant: AncPlant,
    length: int,
    phases: list[Phase],
    mu: float = 0.0,
    delta: float = 1e-6,
    anr_lambda: float = DEFAULT_ANR_LAMBDA,
    disturbance: np.ndarray = None,
) -> SimulationResult:
    """Sample-by-sample cancellation under a phase schedule.

    The run stops at the first sample whose update trips the divergence
    guard; the result then covers samples up to and including that one.
    """
    x = np.ascontiguousarray(reference, dtype=np.float64)
    if x.size == 0:
        raise InvalidArgumentError("reference must be non-empty")
    if not np.all(np.isfinite(x)):
        raise NumericError("reference contains non-finite samples")
    if mu < 0:
        raise InvalidArgumentError("step size must be non-negative")
    if not delta > 0:
        raise InvalidArgumentError("regularization delta must be positive")
    if not 0 < anr_lambda < 1:
        raise InvalidArgumentError("ANR smoothing factor must lie in (0, 1)")
    if not phases or phases[0].start != 0:
        raise InvalidArgumentError("phase schedule must start at sample 0")
    starts = np.array([p.start for p in phases], dtype=np.int64)
    if np.any(np.diff(starts) <= 0):
        raise InvalidArgumentError("phase starts must be strictly increasing")

    d = plant.disturbance(x) if disturbance is None else np.asarray(disturbance, float)
    weights = np.zeros((len(phases), length))
    load = np.zeros(len(phases), dtype=np.bool_)
    for i, p in enumerate(phases):
        if p.weights is not None:
            wv = np.asarray(p.weights, dtype=np.float64)
            if wv.size != length:
                raise InvalidArgumentError("phase weights do not match filter length")
            weights[i] = wv
            load[i] = True
    w0 = weights[0] if load[0] else np.zeros(length)
    e, anr, w, div = _simulate_kernel(
        x, d,
        np.ascontiguousarray(plant.secondary.coefficients),
        np.ascontiguousarray(plant.secondary_estimate.coefficients),
        w0, starts,
        np.array([p.mode for p in phases], dtype=np.int64),
        weights, load,
        float(mu), float(delta), float(anr_lambda), ANR_FLOOR, DIVERGENCE_GUARD,
    )
    return SimulationResult(e, d, anr, w, int(div))


def run_cancellation(
    reference: Signal,
    plant: AncPlant,
    w0: ControlFilter,
    algo: str = "fxlms",
    mu: float = 0.0,
    delta: float = 1e-6,
    anr_lambda: float = DEFAULT_ANR_LAMBDA,
):
    """Cancel ``reference`` through ``plant`` starting from ``w0``.

    Returns ``(trace, final_filter, residual)``. ``algo="frozen"`` applies
    ``w0`` without adapting it.
    """
    if algo not in ALGOS:
        raise InvalidArgumentError(f"unknown algorithm {algo!r}")
    res = simulate(
        reference.samples, plant, len(w0),
        [Phase(0, ALGOS[algo], w0.weights)],
        mu=mu, delta=delta, anr_lambda=anr_lambda,
    )
    if res.diverged:
        raise DivergenceError(
            f"{algo} diverged at sample {res.diverged_at}", index=res.diverged_at
        )
    return (
        res.trace(),
        ControlFilter(res.weights),
        Signal(res.e, reference.sample_rate),
    )


def time_to_threshold(anr_db: np.ndarray, threshold: float, start: int = 0):
    """Samples from ``start`` until ANR first drops to ``threshold``; None if never."""
    hits = np.flatnonzero(np.asarray(anr_db[start:]) <= threshold)
    return int(hits[0]) if hits.size else None


def settle_time(anr_db: np.ndarray, threshold: float, start: int = 0):
    """Samples from ``start`` until ANR stays at or below ``threshold`` to the end.

    None if the final sample is above the threshold.
    """
    tail = np.asarray(anr_db[start:])
    if tail.size == 0 or tail[-1] > threshold:
        return None
    above = np.flatnonzero(tail > threshold)
    return int(above[-1] + 1) if above.size else 0


def steady_state_anr(anr_db: np.ndarray, fraction: float = 0.1) -> float:
    """Mean ANR over the final ``fraction`` of samples."""
    arr = np.asarray(anr_db)
    k = max(1, int(round(arr.size * fraction)))
    return float(np.mean(arr[-k:]))


@njit(cache=True)
def _anr_kernel(e, d, lam, floor):
    out = np.empty(e.size)
    a_e = 0.0
    a_d = 0.0
    for n in range(e.size):
        a_e = lam * a_e + (1.0 - lam) * abs(e[n])
        a_d = lam * a_d + (1.0 - lam) * abs(d[n])
        if a_d < floor:
            out[n] = 0.0
        else:
            out[n] = 20.0 * np.log10(max(a_e, floor) / a_d)
    return out


def anr_series(e, d, anr_lambda: float = DEFAULT_ANR_LAMBDA) -> np.ndarray:
    """ANR curve in dB for whole residual and disturbance arrays.

    Matches the per-sample values produced inside ``simulate``.
    """
    e = np.ascontiguousarray(e, dtype=np.float64)
    d = np.ascontiguousarray(d, dtype=np.float64)
    if e.shape != d.shape:
        raise InvalidArgumentError("residual and disturbance lengths differ")
    if not 0 < anr_lambda < 1:
        raise InvalidArgumentError("ANR smoothing factor must lie in (0, 1)")
    return _anr_kernel(e, d, float(anr_lambda), ANR_FLOOR)
