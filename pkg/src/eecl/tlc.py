"""Task-wise logits correction.

Older tasks' logits are shifted by ``c_t = a * (T - t) + b`` (the newest
task is left alone) with ``(a, b)`` chosen so that, on the newest task's
data, every task's maximum non-predicted logit is as close as possible
to the common mean across tasks and classifiers.

The fit only touches logits.  For a fixed ``a`` each (sample,
classifier) pair switches its predicted task at most once as ``b``
grows, so a whole row of the coarse grid is evaluated exactly with
binned cumulative sums instead of one pass per grid point.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numba import njit
from scipy.optimize import minimize_scalar

from .errors import DegenerateTaskError, NumericError
from .network import EarlyExitNetwork, LogitBundle, forward_all

GRID_LIMIT = 10.0
GRID_STEP = 0.25
REFINE_WORK = 90_000  # item evaluations shared by all starts
BRENT_LINES = 10
MIN_LINES = 24
COARSE_STRIDE = 5  # lattice steps between coarse a trials
MAX_HALF_SCAN = 2000
SCAN_STEP = 0.01


@dataclass(frozen=True)
class TlcParams:
    a: float = 0.0
    b: float = 0.0

    def offsets(self, num_tasks: int) -> np.ndarray:
        """Per-task correction c_1..c_T; the last task gets none."""
        t = np.arange(1, num_tasks + 1)
        c = self.a * (num_tasks - t) + self.b
        c[-1] = 0.0
        return c


def class_offsets(task_slices, params: TlcParams) -> np.ndarray:
    T = len(task_slices)
    per_task = params.offsets(T)
    out = np.zeros(task_slices[-1][1] if task_slices else 0)
    for c, (lo, hi) in zip(per_task, task_slices):
        out[lo:hi] = c
    return out


def apply_tlc(bundle: LogitBundle, params: TlcParams) -> LogitBundle:
    """Add each older task's offset to its slice of every classifier's logits."""
    off = class_offsets(bundle.task_slices, params).astype(bundle.logits.dtype)
    return LogitBundle(bundle.logits + off, list(bundle.task_slices))


def masked_task_max(bundle: LogitBundle, j: int, i: int, t: int, params: TlcParams) -> float:
    """Max corrected logit of task ``t`` (1-based) for sample j, classifier i (0-based),
    with the predicted class removed when it falls inside task t."""
    off = class_offsets(bundle.task_slices, params)
    row = bundle.logits[j, i].astype(np.float64) + off
    pred = int(np.argmax(row))
    lo, hi = bundle.task_slices[t - 1]
    keep = [c for c in range(lo, hi) if c != pred]
    if not keep:
        raise DegenerateTaskError(f"task {t} has no logits left after excluding the predicted class")
    return float(row[keep].max())


# ---------------------------------------------------------------------------
# energy


@dataclass
class TaskMaxStats:
    """Largest and second-largest raw logit of each task slice, shape (samples, classifiers, tasks)."""

    top1: np.ndarray
    top2: np.ndarray

    @property
    def num_tasks(self) -> int:
        return self.top1.shape[2]

    @property
    def num_classifiers(self) -> int:
        return self.top1.shape[1]

    @classmethod
    def from_bundle(cls, bundle: LogitBundle) -> "TaskMaxStats":
        z = np.asarray(bundle.logits, dtype=np.float64)
        if not np.isfinite(z).all():
            raise NumericError("non-finite logits in TLC input")
        for t, (lo, hi) in enumerate(bundle.task_slices):
            if hi - lo < 2:
                raise DegenerateTaskError(f"task {t + 1} has a single class; TLC needs at least two per task")
        bounds = np.asarray(bundle.task_slices, dtype=np.int64).reshape(-1, 2)
        return cls(*_top_two(np.ascontiguousarray(z), bounds))


@njit(cache=True)
def _top_two(z, bounds):
    n, N, _ = z.shape
    T = bounds.shape[0]
    top1 = np.empty((n, N, T))
    top2 = np.empty((n, N, T))
    for j in range(n):
        for i in range(N):
            for t in range(T):
                first = -np.inf
                second = -np.inf
                for c in range(bounds[t, 0], bounds[t, 1]):
                    v = z[j, i, c]
                    if v > first:
                        second = first
                        first = v
                    elif v > second:
                        second = v
                top1[j, i, t] = first
                top2[j, i, t] = second
    return top1, top2


def _task_coefficients(T: int) -> tuple[np.ndarray, np.ndarray]:
    k = (T - np.arange(1, T + 1)).astype(np.float64)
    e = np.ones(T)
    e[-1] = 0.0
    return k, e


def _masked_maxima(stats: TaskMaxStats, a: float, b: float) -> np.ndarray:
    T = stats.num_tasks
    k, e = _task_coefficients(T)
    c = a * k + b * e
    c[-1] = 0.0
    scores = stats.top1 + c
    pred = scores.argmax(axis=-1)
    m = scores.copy()
    sel = np.take_along_axis(stats.top2 + c, pred[..., None], axis=-1)
    np.put_along_axis(m, pred[..., None], sel, axis=-1)
    return m


def energy_from_stats(stats: TaskMaxStats, a: float, b: float) -> float:
    if stats.num_tasks < 2:
        return 0.0
    m = _masked_maxima(stats, a, b)
    centre = m.mean(axis=(1, 2), keepdims=True)
    return float(((m - centre) ** 2).sum())


def tlc_energy(a: float, b: float, bundle: LogitBundle) -> float:
    """Sum over samples, classifiers and tasks of squared deviation from the per-sample mean masked max."""
    return energy_from_stats(TaskMaxStats.from_bundle(bundle), a, b)


def energy_grid(stats: TaskMaxStats, a_values: np.ndarray, b_values: np.ndarray) -> np.ndarray:
    """Exact energy on the full (a, b) grid, shape (len(a_values), len(b_values)).

    ``b_values`` must be sorted ascending.
    """
    a_values = np.ascontiguousarray(a_values, dtype=np.float64)
    b_values = np.ascontiguousarray(b_values, dtype=np.float64)
    if stats.num_tasks < 2:
        return np.zeros((len(a_values), len(b_values)))
    if np.any(np.diff(b_values) <= 0):
        raise ValueError("b_values must be strictly increasing")
    k, _ = _task_coefficients(stats.num_tasks)
    u = np.ascontiguousarray(stats.top1)
    d = np.ascontiguousarray(stats.top1 - stats.top2)
    out = np.empty((len(a_values), len(b_values)))
    _grid_kernel(u, d, k, a_values, b_values, out)
    return out


@njit(cache=True)
def _search_left(values, x, origin, inv_step):
    """First index with values[g] >= x; the guess from a near-uniform spacing is corrected exactly."""
    B = values.shape[0]
    f = (x - origin) * inv_step
    if f <= 0.0:
        g = 0
    elif f >= B:
        g = B
    else:
        g = int(np.ceil(f))
    while g > 0 and values[g - 1] >= x:
        g -= 1
    while g < B and values[g] < x:
        g += 1
    return g


@njit(cache=True)
def _grid_kernel(u, d, k, a_values, b_values, out):
    n, N, T = u.shape
    A, B = a_values.shape[0], b_values.shape[0]
    K = 0.0
    Skk = 0.0
    for t in range(T - 1):
        K += k[t]
        Skk += k[t] * k[t]
    # a-independent aggregates
    Su = 0.0
    Suu = 0.0
    Suk = 0.0
    const = 0.0
    cj = np.zeros(n)
    for j in range(n):
        for i in range(N):
            uT = u[j, i, T - 1]
            dT = d[j, i, T - 1]
            for t in range(T - 1):
                Su += u[j, i, t]
                Suu += u[j, i, t] * u[j, i, t]
                Suk += u[j, i, t] * k[t]
                cj[j] += u[j, i, t]
            const += uT * uT - 2.0 * uT * dT + dT * dT
            cj[j] += uT - dT
    beta = float(N * (T - 1))
    nN = float(n * N)
    acc = np.zeros((B + 1, 5))
    sw = np.empty(N, np.int64)
    de = np.empty(N)
    origin = b_values[0]
    inv_step = (B - 1) / (b_values[B - 1] - b_values[0]) if B > 1 else 0.0
    for ia in range(A):
        a = a_values[ia]
        acc[:, :] = 0.0
        s_alpha = 0.0
        s_alpha2 = 0.0
        for j in range(n):
            alpha = cj[j] + a * N * K
            s_alpha += alpha
            s_alpha2 += alpha * alpha
            for i in range(N):
                best = u[j, i, 0] + a * k[0]
                q = 0
                for t in range(1, T - 1):
                    r = u[j, i, t] + a * k[t]
                    if r > best:
                        best = r
                        q = t
                uT = u[j, i, T - 1]
                dT = d[j, i, T - 1]
                dq = d[j, i, q]
                g = _search_left(b_values, uT - best, origin, inv_step)
                acc[g, 0] += (-2.0 * best * dq + dq * dq) - (-2.0 * uT * dT + dT * dT)
                acc[g, 1] += -2.0 * dq
                delta = dT - dq
                acc[g, 2] += delta * alpha
                acc[g, 3] += delta
                # insertion into (switch index, delta) list sorted by index
                pos = i
                while pos > 0 and sw[pos - 1] > g:
                    sw[pos] = sw[pos - 1]
                    de[pos] = de[pos - 1]
                    pos -= 1
                sw[pos] = g
                de[pos] = delta
            P = 0.0
            for i in range(N):
                nxt = P + de[i]
                acc[sw[i], 4] += nxt * nxt - P * P
                P = nxt
        base = Suu + 2.0 * a * Suk + a * a * Skk * nN + const
        sR1 = Su + a * nN * K
        c0 = 0.0
        c1 = 0.0
        c2 = 0.0
        c3 = 0.0
        c4 = 0.0
        for g in range(B):
            c0 += acc[g, 0]
            c1 += acc[g, 1]
            c2 += acc[g, 2]
            c3 += acc[g, 3]
            c4 += acc[g, 4]
            b = b_values[g]
            term1 = base + 2.0 * b * sR1 + (T - 1) * nN * b * b + c0 + b * c1
            term2 = s_alpha2 + 2.0 * beta * b * s_alpha + n * beta * beta * b * b + 2.0 * (c2 + beta * b * c3) + c4
            e = term1 - term2 / (N * T)
            out[ia, g] = e if e > 0.0 else 0.0


@njit(cache=True)
def _energy_at(u, d, k, a, b):
    """Direct energy at one point, same tie rule as numpy argmax (earliest task wins)."""
    n, N, T = u.shape
    m = np.empty(T)
    energy = 0.0
    for j in range(n):
        s1 = 0.0
        s2 = 0.0
        for i in range(N):
            p = 0
            best = -np.inf
            for t in range(T):
                sc = u[j, i, t] + (a * k[t] + b if t < T - 1 else 0.0)
                m[t] = sc
                if sc > best:
                    best = sc
                    p = t
            m[p] -= d[j, i, p]
            for t in range(T):
                s1 += m[t]
                s2 += m[t] * m[t]
        energy += s2 - s1 * s1 / (N * T)
    return max(energy, 0.0)


@njit(cache=True)
def _sample_aggregates(u, d, k):
    """Per sample: sum of squares, u.k and sum over older tasks, plus the newest task's masked sum."""
    n, N, T = u.shape
    agg = np.zeros((n, 4))
    for j in range(n):
        for i in range(N):
            for t in range(T - 1):
                agg[j, 0] += u[j, i, t] * u[j, i, t]
                agg[j, 1] += u[j, i, t] * k[t]
                agg[j, 2] += u[j, i, t]
            w = u[j, i, T - 1] - d[j, i, T - 1]
            agg[j, 0] += w * w
            agg[j, 3] += w
    return agg


@njit(cache=True)
def _bucket_order(keys, cnt, lo, hi):
    """Indices sorting keys[:cnt] (all within [lo, hi]): bucket pass, then insertion sort."""
    order = np.empty(cnt, np.int64)
    if cnt == 0:
        return order
    nb = cnt
    scale = nb / (hi - lo) if hi > lo else 0.0
    start = np.zeros(nb + 1, np.int64)
    slot = np.empty(cnt, np.int64)
    for s in range(cnt):
        g = int((keys[s] - lo) * scale)
        if g >= nb:
            g = nb - 1
        elif g < 0:
            g = 0
        slot[s] = g
        start[g + 1] += 1
    for g in range(nb):
        start[g + 1] += start[g]
    for s in range(cnt):
        g = slot[s]
        order[start[g]] = s
        start[g] += 1
    for x in range(1, cnt):
        e = order[x]
        key = keys[e]
        y = x - 1
        while y >= 0 and keys[order[y]] > key:
            order[y + 1] = order[y]
            y -= 1
        order[y + 1] = e
    return order


@njit(cache=True)
def _line_min(u, d, k, agg, a, lo, hi):
    """Exact minimum of E(a, .) over b in [lo, hi].

    For fixed a every (sample, classifier) pair predicts the last task for
    b below its switch point and its best older task from the switch point
    on, so E(a, .) is a chain of convex quadratics with a shared curvature.
    Returns (value, b, open_end); ``open_end`` means the infimum sits at a
    switch point approached from below and is not attained there.
    """
    n, N, T = u.shape
    NT = float(N * T)
    r = (T - 1) / T
    C2 = n * N * (T - 1) / T
    K = 0.0
    Skk = 0.0
    for t in range(T - 1):
        K += k[t]
        Skk += k[t] * k[t]
    m = n * N
    bs = np.empty(m)
    dQ = np.empty(m)
    dL = np.empty(m)
    dP = np.empty(m)
    own = np.empty(m, np.int64)
    cnt = 0
    P = np.zeros(n)
    B0 = 0.0
    B1 = 0.0
    for j in range(n):
        Q = agg[j, 0] + 2.0 * a * agg[j, 1] + a * a * N * Skk
        L = agg[j, 2] + a * N * K
        Pj = agg[j, 3]
        for i in range(N):
            best = u[j, i, 0] + a * k[0]
            q = 0
            for t in range(1, T - 1):
                w = u[j, i, t] + a * k[t]
                if w > best:
                    best = w
                    q = t
            uT = u[j, i, T - 1]
            dT = d[j, i, T - 1]
            dq = d[j, i, q]
            bstar = uT - best
            eQ = dT * (2.0 * uT - dT) + dq * (dq - 2.0 * best)
            if bstar <= lo:
                Q += eQ
                L -= dq
                Pj += dT
            elif bstar <= hi:
                bs[cnt] = bstar
                dQ[cnt] = eQ
                dL[cnt] = -dq
                dP[cnt] = dT - dq
                own[cnt] = j
                cnt += 1
        Pj += L
        P[j] = Pj
        B0 += Q - Pj * Pj / NT
        B1 += 2.0 * (L - r * Pj)
    order = _bucket_order(bs, cnt, lo, hi)
    best_v = np.inf
    best_b = lo
    best_open = False
    seg_lo = lo
    for s in range(cnt + 1):
        if s < cnt:
            idx = order[s]
            seg_hi = bs[idx]
        else:
            idx = -1
            seg_hi = hi
        x = -B1 / (2.0 * C2)
        opened = False
        if x <= seg_lo:
            x = seg_lo
        elif x >= seg_hi:
            x = seg_hi
            opened = idx >= 0
        v = C2 * x * x + B1 * x + B0
        if v < best_v:
            best_v = v
            best_b = x
            best_open = opened
        if idx >= 0:
            j = own[idx]
            dp = dP[idx]
            B0 += dQ[idx] - (2.0 * P[j] * dp + dp * dp) / NT
            B1 += 2.0 * (dL[idx] - r * dp)
            P[j] += dp
            seg_lo = seg_hi
    return best_v, best_b, best_open


@njit(cache=True)
def _scan_kernel(u, d, k, agg, a_values, lo, hi, out):
    for s in range(a_values.shape[0]):
        v, b, open_end = _line_min(u, d, k, agg, a_values[s], lo, hi)
        out[s, 0] = v
        out[s, 1] = b
        out[s, 2] = 1.0 if open_end else 0.0

class _Problem:
    """Contiguous float64 views of the task maxima for the compiled kernels."""

    def __init__(self, stats: TaskMaxStats):
        self.T = stats.num_tasks
        self.k, _ = _task_coefficients(self.T)
        self.u = np.ascontiguousarray(stats.top1, dtype=np.float64)
        self.d = np.ascontiguousarray(stats.top1 - stats.top2, dtype=np.float64)
        self.agg = _sample_aggregates(self.u, self.d, self.k)
        self.calls = 0

    def energy(self, a: float, b: float) -> float:
        self.calls += 1
        return float(_energy_at(self.u, self.d, self.k, float(a), float(b)))

    def line(self, a: float, lo: float, hi: float) -> tuple[float, float, bool]:
        self.calls += 1
        v, b, open_end = _line_min(self.u, self.d, self.k, self.agg, float(a), float(lo), float(hi))
        return float(v), float(b), bool(open_end)

    def scan(self, a_values: np.ndarray, lo: float, hi: float) -> np.ndarray:
        a_values = np.ascontiguousarray(a_values, dtype=np.float64)
        self.calls += len(a_values)
        out = np.empty((len(a_values), 3))
        _scan_kernel(self.u, self.d, self.k, self.agg, a_values, float(lo), float(hi), out)
        return out

    def attained(self, a: float, b: float, open_end: bool, limit: float = GRID_LIMIT) -> tuple[float, float]:
        """Direct energy at a point realising (to ~1e-9) a value the line search reported.

        Breakpoints are recomputed in floating point during direct evaluation,
        so both sides of ``b`` are tried and the lowest value wins.
        """
        eps = 1e-9 * max(1.0, abs(b))
        trials = (b - eps, b, b + eps) if open_end else (b, b + eps, b - eps)
        return min((self.energy(a, x), x) for x in trials if -limit <= x <= limit)


def line_minimum(stats: TaskMaxStats, a: float, lo: float = -GRID_LIMIT, hi: float = GRID_LIMIT) -> tuple[float, float]:
    """min over b in [lo, hi] of E(a, b), returned as (energy, b) at an attained point."""
    if stats.num_tasks < 2:
        return 0.0, lo
    prob = _Problem(stats)
    _, b, open_end = prob.line(a, lo, hi)
    return prob.attained(a, b, open_end, max(abs(lo), abs(hi)))


# ---------------------------------------------------------------------------
# fitting


@dataclass
class TlcFitReport:
    params: TlcParams
    energy: float
    energy_at_zero: float
    oracle_energy: float | None = None
    mean_task_max: list[float] = field(default_factory=list)
    evaluations: int = 0

    def to_dict(self) -> dict:
        return {
            "a": self.params.a,
            "b": self.params.b,
            "energy": self.energy,
            "energy_at_zero": self.energy_at_zero,
            "oracle_energy": self.oracle_energy,
            "mean_task_max": self.mean_task_max,
            "evaluations": self.evaluations,
        }


def _local_minima(grid: np.ndarray, limit: int) -> list[tuple[int, int]]:
    padded = np.pad(grid, 1, constant_values=np.inf)
    centre = padded[1:-1, 1:-1]
    is_min = np.ones_like(grid, dtype=bool)
    for da in (-1, 0, 1):
        for db in (-1, 0, 1):
            if da or db:
                is_min &= centre <= padded[1 + da:1 + da + grid.shape[0], 1 + db:1 + db + grid.shape[1]]
    cand = np.argwhere(is_min)
    cand = sorted(map(tuple, cand), key=lambda ij: (grid[ij], ij))
    return cand[:limit] or [np.unravel_index(np.argmin(grid), grid.shape)]


def _line_budget(items: int, starts: int, work: int) -> int:
    """Exact line minimisations each start may spend under a budget of ``work`` item evaluations."""
    return int(max(MIN_LINES, work // max(items * starts, 1)))


def _scan_best(prob: _Problem, lattice: np.ndarray, limit: float, b: float, b_window: float):
    lo, hi = max(-limit, b - b_window), min(limit, b + b_window)
    a_values = -limit + SCAN_STEP * lattice
    out = prob.scan(a_values, lo, hi)
    i = int(np.argmin(out[:, 0]))
    return i, float(out[i, 0]), float(out[i, 1])


def _refine(prob: _Problem, a0: float, b0: float, limit: float, cell: float, lines: int, b_window: float):
    """Local search around a coarse minimum, exact in b over a window around the current best b.

    E is rough along a at the lattice scale but its basins are wide, so a
    is first scanned coarsely across the neighbouring grid cells (``cell`` wide), then on
    the fine lattice ``-limit + SCAN_STEP * i`` around the best coarse
    point (walking outward while the best value sits on the edge), and
    finally polished with bounded Brent.  ``lines`` caps the number of
    line minimisations; walking may borrow up to as much again.
    """
    top = int(round(2 * limit / SCAN_STEP))
    centre = int(round((a0 + limit) / SCAN_STEP))
    stride = COARSE_STRIDE
    reach = max(1, int(round(cell / SCAN_STEP)))
    coarse = np.arange(max(0, centre - reach), min(top, centre + reach) + 1, stride)
    i, best_v, best_b = _scan_best(prob, coarse, limit, b0, b_window)
    centre = int(coarse[i])
    polish = int(min(BRENT_LINES, max(2, lines // 4)))
    half = int(min(max(stride // 2 + 1, (lines - len(coarse) - polish) // 2), MAX_HALF_SCAN))
    first, last = max(0, centre - half), min(top, centre + half)
    spent = len(coarse)
    while spent < 2 * lines:
        lattice = np.arange(first, last + 1)
        i, v, b = _scan_best(prob, lattice, limit, best_b, b_window)
        spent += len(lattice)
        if v >= best_v and not first <= centre <= last:
            break
        if v < best_v:
            best_v, best_b, centre = v, b, int(lattice[i])
        if 0 < i < len(lattice) - 1 or centre in (0, top) or v > best_v:
            break
        if i == 0:
            first, last = max(0, centre - 2 * half), centre - 1
        else:
            first, last = centre + 1, min(top, centre + 2 * half)
    best_a = -limit + SCAN_STEP * centre
    lo, hi = max(-limit, best_b - b_window), min(limit, best_b + b_window)
    left, right = max(-limit, best_a - SCAN_STEP), min(limit, best_a + SCAN_STEP)

    def phi(a: float) -> float:
        return prob.line(a, lo, hi)[0]

    if right > left:
        res = minimize_scalar(phi, bounds=(left, right), method="bounded", options={"xatol": 1e-5, "maxiter": polish})
        if res.fun < best_v:
            best_a, best_v = float(res.x), float(res.fun)
    _, b, open_end = prob.line(best_a, lo, hi)
    energy, b = prob.attained(best_a, b, open_end, limit)
    return energy, best_a, b


def fit_tlc_bundle(
    bundle: LogitBundle,
    *,
    grid_step: float = GRID_STEP,
    grid_limit: float = GRID_LIMIT,
    starts: int = 3,
    work: int = REFINE_WORK,
    b_window: float = 1.5,
    oracle_step: float | None = None,
) -> TlcFitReport:
    """Coarse (a, b) grid over [-limit, limit]^2, then local refinement of the best grid minima.

    The energy jumps wherever a prediction changes task, which stalls
    simplex-type searches.  Refinement therefore minimises exactly over b
    for each trial a and searches a numerically within a fixed work budget.
    """
    stats = TaskMaxStats.from_bundle(bundle)
    T = stats.num_tasks
    if T < 2:
        return TlcFitReport(TlcParams(0.0, 0.0), 0.0, 0.0, 0.0 if oracle_step else None, _task_means(stats, TlcParams()))
    prob = _Problem(stats)
    e0 = prob.energy(0.0, 0.0)
    axis = np.arange(-grid_limit, grid_limit + grid_step / 2, grid_step)
    grid = energy_grid(stats, axis, axis)
    lines = _line_budget(stats.top1.shape[0] * stats.top1.shape[1], starts, work)
    best = (e0, 0.0, 0.0)
    for ia, ib in _local_minima(grid, starts):
        best = min(best, (float(grid[ia, ib]), float(axis[ia]), float(axis[ib])))
        best = min(best, _refine(prob, float(axis[ia]), float(axis[ib]), grid_limit, grid_step, lines, b_window))
    energy, a, b = best
    params = TlcParams(a, b)
    oracle = None
    if oracle_step is not None:
        fine = np.arange(-grid_limit, grid_limit + oracle_step / 2, oracle_step)
        oracle = float(energy_grid(stats, fine, fine).min())
    return TlcFitReport(params, energy, e0, oracle, _task_means(stats, params), grid.size + prob.calls)


def warm_up() -> None:
    """Load the compiled kernels so that the next fit times the fit alone."""
    z = np.array([[[3.0, 0.0, 1.0, 9.0, 5.0, 0.5]]]).repeat(2, axis=0)
    fit_tlc_bundle(LogitBundle(z, [(0, 2), (2, 4), (4, 6)]), grid_step=5.0)


def _task_means(stats: TaskMaxStats, params: TlcParams) -> list[float]:
    if stats.top1.shape[0] == 0:
        return []
    if stats.num_tasks < 2:
        return [float(stats.top1.mean())]
    m = _masked_maxima(stats, params.a, params.b)
    return [float(v) for v in m.mean(axis=(0, 1))]


def fit_tlc(net: EarlyExitNetwork, X_last: np.ndarray, **kwargs) -> TlcFitReport:
    """Fit the correction on the newest task's data only."""
    return fit_tlc_bundle(forward_all(net, X_last), **kwargs)
