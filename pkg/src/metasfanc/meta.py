"""MAML-FxLMS pretraining of control filters and the per-category filter database.

Each training pair is an input window plus the disturbance sample at the
window end. Windows are stored as chronological *segments* of length
``L + H`` where ``H = plant.history``: the extra ``H`` samples supply the
past inputs that the secondary path needs, so scoring a pair never reads
outside its own segment. For a segment ending at time ``n`` the scored
error is

    e = d(n) - sum_m s[m] * w^T x(n - m)  =  d(n) - w^T x_s(n)

with ``x_s`` the window filtered through ``s``. The update direction uses
``x_f``, the window filtered through the secondary-path estimate.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from metasfanc.adaptive import DIVERGENCE_GUARD, AncPlant, ControlFilter
from metasfanc.dsp import FirPath, Signal, convolve
from metasfanc.errors import (
    ConfigError,
    DivergenceError,
    InsufficientDataError,
    InvalidArgumentError,
    MetaSfancError,
    NumericError,
)

DATABASE_SCHEMA = 1


@dataclass(eq=False)
class AncTask:
    """Support and query pairs for one subclass.

    ``support_x``/``query_x`` are ``(n_pairs, L + H)`` chronological segments;
    ``support_d``/``query_d`` hold the disturbance at each segment's end.
    """

    support_x: np.ndarray
    support_d: np.ndarray
    query_x: np.ndarray
    query_d: np.ndarray
    length: int
    subclass_id: str = ""

    def __post_init__(self):
        self.support_x = np.atleast_2d(np.asarray(self.support_x, dtype=np.float64))
        self.query_x = np.atleast_2d(np.asarray(self.query_x, dtype=np.float64))
        self.support_d = np.asarray(self.support_d, dtype=np.float64).reshape(-1)
        self.query_d = np.asarray(self.query_d, dtype=np.float64).reshape(-1)
        if self.support_x.shape[0] != self.support_d.size:
            raise InvalidArgumentError("support windows and targets differ in count")
        if self.query_x.shape[0] != self.query_d.size:
            raise InvalidArgumentError("query windows and targets differ in count")
        if self.support_x.shape[1] != self.query_x.shape[1]:
            raise InvalidArgumentError("support and query segments differ in length")
        if self.support_x.shape[1] < self.length:
            raise InvalidArgumentError("segments shorter than the filter length")

    @property
    def n_support(self) -> int:
        return self.support_d.size

    @property
    def n_query(self) -> int:
        return self.query_d.size

    def support_windows(self) -> np.ndarray:
        """``(K, L)`` reference vectors, newest sample first."""
        return window_vectors(self.support_x, self.length)

    def query_windows(self) -> np.ndarray:
        return window_vectors(self.query_x, self.length)

    def sample(self, rng: np.random.Generator, k: int, j: int) -> "AncTask":
        """Draw a K-support / J-query batch without replacement."""
        if k > self.n_support or j > self.n_query:
            raise InsufficientDataError(
                f"task {self.subclass_id!r}: pools of {self.n_support}/{self.n_query} "
                f"cannot supply K={k}, J={j}"
            )
        si = rng.choice(self.n_support, size=k, replace=False)
        qi = rng.choice(self.n_query, size=j, replace=False)
        return AncTask(
            self.support_x[si], self.support_d[si],
            self.query_x[qi], self.query_d[qi],
            self.length, self.subclass_id,
        )


@dataclass(eq=False)
class TaskDistribution:
    tasks: list
    category_id: str
    plant: AncPlant
    length: int

    def __post_init__(self):
        if len(self.tasks) < 1:
            raise InvalidArgumentError("a task distribution needs at least one task")
        for t in self.tasks:
            if t.length != self.length:
                raise InvalidArgumentError("all tasks must share the filter length")

    def __len__(self):
        return len(self.tasks)


@dataclass
class MetaConfig:
    alpha: float
    beta: float
    K: int = 10
    J: int = 10
    iterations: int = 1000
    seed: int = 0
    inner_steps: int = 1
    task_batch: int = None
    query_error_on_support: bool = False

    def __post_init__(self):
        if not (self.alpha >= 0 and self.beta > 0):
            raise ConfigError("alpha must be non-negative and beta positive")
        if self.K < 1 or self.J < 1:
            raise ConfigError("K and J must be >= 1")
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        if self.inner_steps < 1:
            raise ConfigError("inner_steps must be >= 1")
        if self.task_batch is not None and self.task_batch < 1:
            raise ConfigError("task_batch must be positive when set")
        if self.query_error_on_support and self.K != self.J:
            raise ConfigError("query_error_on_support requires K == J")


def window_vectors(segments: np.ndarray, length: int) -> np.ndarray:
    """Last ``length`` samples of each segment, newest first."""
    segments = np.atleast_2d(segments)
    return segments[:, ::-1][:, :length].copy()


def filtered_windows(segments: np.ndarray, length: int, path: FirPath) -> np.ndarray:
    """Row j, column k: ``sum_m h[m] * seg_j[end - k - m]``."""
    segments = np.atleast_2d(segments)
    h = path.coefficients
    if segments.shape[1] < length + h.size - 1:
        raise InvalidArgumentError("segment too short for the filtered window")
    rev = segments[:, ::-1]
    out = np.zeros((segments.shape[0], length))
    for m, hm in enumerate(h):
        out += hm * rev[:, m : m + length]
    return out


def pair_errors(w: ControlFilter, segments: np.ndarray, d: np.ndarray, plant: AncPlant):
    """Score each pair by running the filter over its segment and the result through s."""
    segments = np.atleast_2d(segments)
    L = len(w)
    s = plant.secondary.coefficients
    out = np.empty(segments.shape[0])
    for j, seg in enumerate(segments):
        end = seg.size - 1
        # y over the last len(s) instants of the segment, oldest first
        y = np.array(
            [np.dot(w.weights, seg[t - L + 1 : t + 1][::-1]) for t in range(end - s.size + 1, end + 1)]
        )
        out[j] = d[j] - convolve(y, s)[y.size - 1]
    return out


@dataclass(eq=False)
class _Mats:
    """Filtered windows for a task batch, through s_hat (xf) and through s (xs)."""

    xf_sup: np.ndarray
    xs_sup: np.ndarray
    d_sup: np.ndarray
    xf_que: np.ndarray
    xs_que: np.ndarray
    d_que: np.ndarray

    @classmethod
    def of(cls, task: AncTask, plant: AncPlant) -> "_Mats":
        L = task.length
        return cls(
            filtered_windows(task.support_x, L, plant.secondary_estimate),
            filtered_windows(task.support_x, L, plant.secondary),
            task.support_d,
            filtered_windows(task.query_x, L, plant.secondary_estimate),
            filtered_windows(task.query_x, L, plant.secondary),
            task.query_d,
        )

    def take(self, si, qi) -> "_Mats":
        return _Mats(
            self.xf_sup[si], self.xs_sup[si], self.d_sup[si],
            self.xf_que[qi], self.xs_que[qi], self.d_que[qi],
        )


def _inner(w: np.ndarray, m: _Mats, alpha: float, steps: int = 1) -> np.ndarray:
    for _ in range(steps):
        e = m.d_sup - m.xs_sup @ w
        w = w + alpha * (m.xf_sup.T @ e)
    return w


def _query_errors(w_adapted: np.ndarray, m: _Mats, on_support: bool) -> np.ndarray:
    xs = m.xs_sup if on_support else m.xs_que
    return m.d_que - xs @ w_adapted


def covariance_sum(xf_sup: np.ndarray) -> np.ndarray:
    """Sum of outer products of the filtered support windows."""
    return xf_sup.T @ xf_sup


def _outer_direction(w: np.ndarray, mats: list, cfg: MetaConfig):
    """Second-order ascent direction summed over tasks, plus the meta loss."""
    L = w.size
    eye = np.eye(L)
    total = np.zeros(L)
    loss = 0.0
    for m in mats:
        w_i = _inner(w, m, cfg.alpha, cfg.inner_steps)
        e_q = _query_errors(w_i, m, cfg.query_error_on_support)
        loss += 0.5 * float(e_q @ e_q)
        q = eye - cfg.alpha * covariance_sum(m.xf_sup)
        if cfg.inner_steps > 1:
            q = np.linalg.matrix_power(q, cfg.inner_steps)
        xf = m.xf_sup if cfg.query_error_on_support else m.xf_que
        total += q @ (xf.T @ e_q)
    return total, loss


def _check_weights(w: np.ndarray, where: str, index=None):
    if not np.all(np.isfinite(w)):
        raise NumericError(f"non-finite weights in {where}")
    if np.max(np.abs(w)) > DIVERGENCE_GUARD:
        raise DivergenceError(f"{where} diverged", index=index)


def inner_update(w: ControlFilter, task: AncTask, alpha: float, plant: AncPlant) -> ControlFilter:
    """One batched FxLMS step on the task's support pairs."""
    out = _inner(w.weights, _Mats.of(task, plant), alpha)
    _check_weights(out, "inner update")
    return ControlFilter(out)


def query_loss(w_adapted: ControlFilter, task: AncTask, plant: AncPlant) -> float:
    """Half the squared norm of the query errors."""
    e = pair_errors(w_adapted, task.query_x, task.query_d, plant)
    return 0.5 * float(np.dot(e, e))


def meta_loss(w: ControlFilter, dist: TaskDistribution, cfg: MetaConfig) -> float:
    """Summed post-adaptation query loss across all tasks of ``dist``."""
    total = 0.0
    for task in dist.tasks:
        w_i = w
        for _ in range(cfg.inner_steps):
            w_i = inner_update(w_i, task, cfg.alpha, dist.plant)
        if cfg.query_error_on_support:
            e = pair_errors(w_i, task.support_x, task.query_d, dist.plant)
            total += 0.5 * float(e @ e)
        else:
            total += query_loss(w_i, task, dist.plant)
    return total


def outer_update(w: ControlFilter, dist: TaskDistribution, cfg: MetaConfig) -> ControlFilter:
    """Single meta step over every task in ``dist`` (each task is one batch)."""
    mats = [_Mats.of(t, dist.plant) for t in dist.tasks]
    direction, _ = _outer_direction(w.weights, mats, cfg)
    out = w.weights + cfg.beta * direction
    _check_weights(out, "outer update")
    return ControlFilter(out)


def _stack(pools: list, attr: str) -> np.ndarray:
    arrays = [getattr(p, attr) for p in pools]
    n = max(a.shape[0] for a in arrays)
    out = np.zeros((len(arrays), n) + arrays[0].shape[1:])
    for i, a in enumerate(arrays):
        out[i, : a.shape[0]] = a
    return out


@njit(cache=True)
def _pretrain_kernel(
    w, xf_s, xs_s, d_s, xf_q, xs_q, d_q, tasks, si, qi,
    alpha, beta, inner_steps, on_support, guard, history, offset,
):
    """Run ``tasks.shape[0]`` outer iterations in place on ``w``.

    Returns the index of the first iteration whose update tripped the
    divergence guard, or -1.
    """
    n_iter, n_b = tasks.shape
    K = si.shape[2]
    J = qi.shape[2]
    L = w.size
    e_s = np.empty(K)
    e_q = np.empty(J)
    w_i = np.empty(L)
    g = np.empty(L)
    direction = np.empty(L)
    for it in range(n_iter):
        direction[:] = 0.0
        loss = 0.0
        for b in range(n_b):
            m = tasks[it, b]
            w_i[:] = w
            for _ in range(inner_steps):
                for k in range(K):
                    r = si[it, b, k]
                    acc = 0.0
                    for l in range(L):
                        acc += xs_s[m, r, l] * w_i[l]
                    e_s[k] = d_s[m, r] - acc
                for k in range(K):
                    r = si[it, b, k]
                    for l in range(L):
                        w_i[l] += alpha * e_s[k] * xf_s[m, r, l]
            g[:] = 0.0
            for j in range(J):
                if on_support:
                    r = si[it, b, j]
                    xs_row = xs_s[m, r]
                    xf_row = xf_s[m, r]
                else:
                    r = qi[it, b, j]
                    xs_row = xs_q[m, r]
                    xf_row = xf_q[m, r]
                acc = 0.0
                for l in range(L):
                    acc += xs_row[l] * w_i[l]
                e_q[j] = d_q[m, qi[it, b, j]] - acc
                loss += 0.5 * e_q[j] * e_q[j]
                for l in range(L):
                    g[l] += xf_row[l] * e_q[j]
            # g <- (I - alpha R)^steps g, with R the support covariance sum
            for _ in range(inner_steps):
                for k in range(K):
                    r = si[it, b, k]
                    acc = 0.0
                    for l in range(L):
                        acc += xf_s[m, r, l] * g[l]
                    e_s[k] = acc
                for k in range(K):
                    r = si[it, b, k]
                    for l in range(L):
                        g[l] -= alpha * e_s[k] * xf_s[m, r, l]
            for l in range(L):
                direction[l] += g[l]
        bad = False
        for l in range(L):
            w[l] += beta * direction[l]
            if not (abs(w[l]) <= guard):
                bad = True
        history[offset + it] = loss
        if bad:
            return it
    return -1


_CHUNK = 4096


def _draw_batches(rng, n_iter, n_tasks, task_batch, n_sup, n_que, k, j):
    """Task choice and pair indices for ``n_iter`` iterations.

    Pairs are drawn with replacement; the pools (thousands of windows) are
    large compared with K and J.
    """
    if task_batch is None or task_batch >= n_tasks:
        tasks = np.tile(np.arange(n_tasks), (n_iter, 1))
    else:
        tasks = np.sort(np.argsort(rng.random((n_iter, n_tasks)), axis=1)[:, :task_batch], axis=1)
    si = rng.integers(0, n_sup[tasks][..., None], size=tasks.shape + (k,))
    qi = rng.integers(0, n_que[tasks][..., None], size=tasks.shape + (j,))
    return tasks, si, qi


def _pools(dist: TaskDistribution):
    pools = [_Mats.of(t, dist.plant) for t in dist.tasks]
    arrays = {a: _stack(pools, a) for a in ("xf_sup", "xs_sup", "d_sup", "xf_que", "xs_que", "d_que")}
    n_sup = np.array([p.d_sup.size for p in pools])
    n_que = np.array([p.d_que.size for p in pools])
    return pools, arrays, n_sup, n_que


def pretrain(dist: TaskDistribution, cfg: MetaConfig):
    """Run MAML-FxLMS from a zero filter.

    Every iteration draws a fresh batch of K support and J query pairs from
    each task's pools and applies one outer update over all tasks, or over
    ``cfg.task_batch`` randomly chosen ones. Returns ``(filter,
    loss_history)``; the history holds the summed query loss of each
    iteration's batch, evaluated before the update.
    """
    for t in dist.tasks:
        if t.n_support < cfg.K or t.n_query < cfg.J:
            raise InsufficientDataError(
                f"task {t.subclass_id!r} has pools {t.n_support}/{t.n_query}, "
                f"needs K={cfg.K}, J={cfg.J}"
            )
    rng = np.random.default_rng(cfg.seed)
    _, arrays, n_sup, n_que = _pools(dist)
    w = np.zeros(dist.length)
    history = np.zeros(cfg.iterations)
    done = 0
    while done < cfg.iterations:
        n = min(_CHUNK, cfg.iterations - done)
        tasks, si, qi = _draw_batches(
            rng, n, len(dist.tasks), cfg.task_batch, n_sup, n_que, cfg.K, cfg.J
        )
        bad = _pretrain_kernel(
            w,
            arrays["xf_sup"], arrays["xs_sup"], arrays["d_sup"],
            arrays["xf_que"], arrays["xs_que"], arrays["d_que"],
            tasks, si, qi,
            float(cfg.alpha), float(cfg.beta), int(cfg.inner_steps),
            bool(cfg.query_error_on_support), DIVERGENCE_GUARD, history, done,
        )
        if bad >= 0 or not np.all(np.isfinite(w)):
            raise DivergenceError(f"pretraining diverged at iteration {done + bad}", index=done + bad)
        done += n
    return ControlFilter(w), history.tolist()


def make_tasks(
    recordings: list,
    plant: AncPlant,
    length: int,
    k: int,
    j: int,
    seed: int,
    category_id: str = "",
    subclass_ids: list = None,
    max_pool: int = None,
) -> TaskDistribution:
    """Cut each subclass's recordings into disjoint windows and split them into pools.

    ``recordings[i]`` is a list of Signals (or a single Signal) for subclass
    ``i``. Windows are non-overlapping blocks at a random per-recording
    offset; blocks are randomly assigned half to the support pool and half
    to the query pool. ``max_pool`` caps each pool.
    """
    if length < 1:
        raise InvalidArgumentError("filter length must be positive")
    if not recordings:
        raise InvalidArgumentError("need at least one subclass")
    rng = np.random.default_rng(seed)
    width = length + plant.history
    tasks = []
    for i, recs in enumerate(recordings):
        if isinstance(recs, Signal):
            recs = [recs]
        if not recs:
            raise InsufficientDataError(f"subclass {i} has no recordings")
        segs, targets = [], []
        for rec in recs:
            x = rec.samples
            n_blocks = x.size // width
            if n_blocks < 1:
                continue
            offset = int(rng.integers(0, x.size - n_blocks * width + 1))
            d = convolve(x, plant.primary)
            starts = offset + width * np.arange(n_blocks)
            idx = starts[:, None] + np.arange(width)[None, :]
            segs.append(x[idx])
            targets.append(d[starts + width - 1])
        if not segs:
            raise InsufficientDataError(f"subclass {i}: recordings shorter than one window")
        segs = np.concatenate(segs)
        targets = np.concatenate(targets)
        order = rng.permutation(targets.size)
        half = targets.size // 2
        sup, que = np.sort(order[:half]), np.sort(order[half:])
        if max_pool is not None:
            sup, que = sup[:max_pool], que[:max_pool]
        if sup.size < k or que.size < j:
            raise InsufficientDataError(
                f"subclass {i}: {targets.size} windows of {width} samples cannot "
                f"fill K={k} support and J={j} query pairs"
            )
        sid = subclass_ids[i] if subclass_ids else str(i)
        tasks.append(AncTask(segs[sup], targets[sup], segs[que], targets[que], length, sid))
    return TaskDistribution(tasks, category_id, plant, length)


@dataclass(eq=False)
class DatabaseEntry:
    filter: ControlFilter
    plant_fingerprint: str
    config: MetaConfig = None
    loss_history: list = field(default_factory=list)
    method: str = "maml-fxlms"
    extra: dict = field(default_factory=dict)


def _encode(arr: np.ndarray) -> str:
    return base64.b64encode(np.asarray(arr, dtype="<f8").tobytes()).decode("ascii")


def _decode(text: str) -> np.ndarray:
    return np.frombuffer(base64.b64decode(text), dtype="<f8").astype(np.float64)


class FilterDatabase:
    """Category label -> pretrained control filter with provenance."""

    def __init__(self, entries: dict = None):
        self.entries = {}
        for label, entry in (entries or {}).items():
            self.add(label, entry)

    def add(self, label: str, entry: DatabaseEntry):
        if label in self.entries:
            raise InvalidArgumentError(f"duplicate category {label!r}")
        if self.entries:
            expected = len(next(iter(self.entries.values())).filter)
            if len(entry.filter) != expected:
                raise InvalidArgumentError("all filters in a database must share L")
        self.entries[label] = entry

    def __contains__(self, label):
        return label in self.entries

    def __len__(self):
        return len(self.entries)

    def labels(self):
        return sorted(self.entries)

    def filter(self, label: str) -> ControlFilter:
        return self.entries[label].filter

    @property
    def length(self) -> int:
        return len(next(iter(self.entries.values())).filter)

    def to_json(self) -> str:
        records = []
        for label in self.labels():
            e = self.entries[label]
            cfg = e.config
            records.append(
                {
                    "category": label,
                    "L": len(e.filter),
                    "weights_b64": _encode(e.filter.weights),
                    "alpha": cfg.alpha if cfg else None,
                    "beta": cfg.beta if cfg else None,
                    "K": cfg.K if cfg else None,
                    "J": cfg.J if cfg else None,
                    "iterations": cfg.iterations if cfg else None,
                    "seed": cfg.seed if cfg else None,
                    "loss_history": [float(v) for v in e.loss_history],
                    "method": e.method,
                    "plant": e.plant_fingerprint,
                    "extra": e.extra,
                }
            )
        return json.dumps({"schema": DATABASE_SCHEMA, "entries": records}, indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "FilterDatabase":
        obj = json.loads(text)
        if obj.get("schema") != DATABASE_SCHEMA:
            raise ConfigError(f"unsupported filter database schema {obj.get('schema')!r}")
        db = cls()
        for rec in obj["entries"]:
            weights = _decode(rec["weights_b64"])
            if weights.size != rec["L"]:
                raise ConfigError(f"category {rec['category']!r}: weight count != L")
            cfg = None
            if rec.get("alpha") is not None:
                cfg = MetaConfig(
                    rec["alpha"], rec["beta"], rec["K"], rec["J"], rec["iterations"], rec["seed"]
                )
            db.add(
                rec["category"],
                DatabaseEntry(
                    ControlFilter(weights), rec["plant"], cfg,
                    list(rec["loss_history"]), rec.get("method", "maml-fxlms"),
                    rec.get("extra", {}),
                ),
            )
        return db

    def save(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path) -> "FilterDatabase":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(fh.read())


def _tag(exc: MetaSfancError, label: str) -> MetaSfancError:
    msg = f"category {label!r}: {exc}"
    if isinstance(exc, DivergenceError):
        tagged = DivergenceError(msg, index=exc.index)
    else:
        tagged = type(exc)(msg)
    tagged.category = label
    return tagged


HISTORY_POINTS = 1000


def summarize_history(history, max_points: int = HISTORY_POINTS) -> list:
    """Block means of a loss history, at most ``max_points`` values."""
    h = np.asarray(history, dtype=np.float64)
    if h.size <= max_points:
        return h.tolist()
    edges = np.linspace(0, h.size, max_points + 1).astype(np.int64)
    return [float(h[a:b].mean()) for a, b in zip(edges[:-1], edges[1:])]


def build_database(categories: dict, cfg) -> FilterDatabase:
    """Pretrain one filter per category.

    ``cfg`` is a MetaConfig shared by all categories or a dict of them keyed
    by label.
    """
    if not categories:
        raise InvalidArgumentError("need at least one category")
    db = FilterDatabase()
    for label in sorted(categories):
        dist = categories[label]
        c = cfg[label] if isinstance(cfg, dict) else cfg
        try:
            w, history = pretrain(dist, c)
        except MetaSfancError as exc:
            raise _tag(exc, label) from exc
        db.add(label, DatabaseEntry(w, dist.plant.fingerprint(), c, summarize_history(history)))
    return db
