"""Vanilla nested sampling: live-point bookkeeping, shrinkage, dead points, evidence.

Volume convention: after the i-th removal the remaining prior volume is
``V_i = V_{i-1} (N-1)/N``; the removed point carries the shell
``V_{i-1} - V_i = V_{i-1}/N``. The final live points share the remaining
volume equally. The shells and the final split telescope to exactly one, so a
constant likelihood integrates to itself.
"""

from dataclasses import dataclass
from math import inf, log, log1p

import numpy as np

from .errors import LRPSExhausted, UsageError

__all__ = [
    'LivePoint', 'DeadRecord', 'LiveSet', 'RunState',
    'init_live', 'shrink_logv', 'ns_step', 'termination_check',
    'termination_criterion', 'finalize_live', 'run_vanilla',
    'PriorRejectionSampler', 'ReferenceSampler', 'DEFAULT_FRAC',
]

DEFAULT_FRAC = 0.01


@dataclass
class LivePoint:
    u: np.ndarray
    v: np.ndarray
    logl: float
    birth_logl: float
    serial: int


@dataclass
class DeadRecord:
    """One removed point and its share of the prior volume.

    ``logv`` is the log volume left after the removal; ``logw`` is
    ``logl + logwidth`` where ``logwidth`` is the log of the shell volume the
    point represents. For records produced by :func:`finalize_live`
    (``final=True``) ``logv == logwidth`` is the equal share of the remaining
    volume.
    """

    point: LivePoint
    logv: float
    logwidth: float
    logw: float
    n_live: int
    parent: int = -1
    root: int = -1
    final: bool = False
    rank: int = -1
    rank_n: int = 0
    ncall: int = 0
    n_children: int = 0

    @property
    def logl(self):
        return self.point.logl

    @property
    def id(self):
        return self.point.serial


class LiveSet:
    """Array-backed set of live points.

    Rows are kept contiguous; removal moves the last row into the hole. Both
    the vanilla and the tree engine use this container so that constrained
    samplers see the live points in the same order.
    """

    def __init__(self, d, capacity=64):
        self.d = d
        self.n = 0
        self._alloc(max(capacity, 4))

    def _alloc(self, cap):
        old = getattr(self, '_u', None)
        n = self.n
        u = np.empty((cap, self.d))
        v = np.empty((cap, self.d))
        cols = {k: np.empty(cap, dtype=dt) for k, dt in self._columns()}
        if old is not None:
            u[:n] = self._u[:n]
            v[:n] = self._v[:n]
            for k in cols:
                cols[k][:n] = getattr(self, '_' + k)[:n]
        self._u, self._v = u, v
        for k, a in cols.items():
            setattr(self, '_' + k, a)

    @staticmethod
    def _columns():
        return [('logl', float), ('birth', float), ('serial', np.int64), ('parent', np.int64),
                ('root', np.int64), ('rank', np.int64), ('rank_n', np.int64)]

    def __len__(self):
        return self.n

    @property
    def u(self):
        return self._u[:self.n]

    @property
    def v(self):
        return self._v[:self.n]

    @property
    def logl(self):
        return self._logl[:self.n]

    @property
    def serial(self):
        return self._serial[:self.n]

    @property
    def root(self):
        return self._root[:self.n]

    def add(self, u, v, logl, birth, serial, parent=-1, root=-1, rank=-1, rank_n=0):
        if self.n == len(self._logl):
            self._alloc(2 * self.n)
        i = self.n
        self._u[i] = u
        self._v[i] = v
        self._logl[i] = logl
        self._birth[i] = birth
        self._serial[i] = serial
        self._parent[i] = parent
        self._root[i] = root
        self._rank[i] = rank
        self._rank_n[i] = rank_n
        self.n += 1

    def lowest(self):
        """Index of the lowest-likelihood point; ties go to the oldest serial."""
        logl = self.logl
        i = int(np.argmin(logl))
        ties = np.flatnonzero(logl == logl[i])
        if len(ties) > 1:
            i = int(ties[np.argmin(self.serial[ties])])
        return i

    def row(self, i):
        return dict(
            u=self._u[i].copy(), v=self._v[i].copy(), logl=float(self._logl[i]),
            birth=float(self._birth[i]), serial=int(self._serial[i]),
            parent=int(self._parent[i]), root=int(self._root[i]),
            rank=int(self._rank[i]), rank_n=int(self._rank_n[i]))

    def remove(self, i):
        """Remove row ``i`` and return it as a dict."""
        r = self.row(i)
        last = self.n - 1
        if i != last:
            self._u[i] = self._u[last]
            self._v[i] = self._v[last]
            for k, _ in self._columns():
                a = getattr(self, '_' + k)
                a[i] = a[last]
        self.n -= 1
        return r

    def order(self):
        """Row indices sorted by (logl, serial)."""
        return np.lexsort((self.serial, self.logl))

    def get_state(self):
        state = dict(d=self.d, u=self.u.tolist(), v=self.v.tolist())
        for k, _ in self._columns():
            state[k] = getattr(self, '_' + k)[:self.n].tolist()
        return state

    @classmethod
    def from_state(cls, state):
        n = len(state['logl'])
        obj = cls(state['d'], capacity=max(2 * n, 4))
        obj.n = n
        if n:
            obj._u[:n] = state['u']
            obj._v[:n] = state['v']
        for k, _ in cls._columns():
            getattr(obj, '_' + k)[:n] = state[k]
        return obj


def _point(row):
    return LivePoint(u=row['u'], v=row['v'], logl=row['logl'], birth_logl=row['birth'], serial=row['serial'])


def shrink_logv(logv, n_live):
    """Log volume after one removal from ``n_live`` points: ``logv + ln((n-1)/n)``."""
    if n_live < 2:
        raise UsageError('shrinkage needs at least 2 live points, got %d' % n_live)
    return logv + log1p(-1.0 / n_live)


def _remove_shell(logv, n, logl, logz):
    """Volume bookkeeping for one removal; shared by the vanilla and tree engines."""
    logwidth = logv - log(n)
    logv_new = shrink_logv(logv, n)
    logw = logl + logwidth
    return logv_new, logwidth, logw, float(np.logaddexp(logz, logw))


def termination_criterion(logv_next, max_logl, logz, frac):
    """True when the live points' maximal remaining weight is below ``frac * Z``."""
    if frac <= 0:
        raise UsageError('termination fraction must be positive')
    if logz == -inf:
        return False
    return logv_next + max_logl < log(frac) + logz


@dataclass
class RunState:
    problem: object
    live: LiveSet
    dead: list
    logv_current: float
    logz_current: float
    rng: np.random.Generator
    next_serial: int = 0
    iteration: int = 0
    ncall: int = 0
    finished: bool = False


def init_live(problem, n, rng):
    """Draw ``n`` live points uniformly from the unit cube."""
    if n < 2:
        raise UsageError('need at least 2 live points, got %d' % n)
    u = rng.random((n, problem.d))
    v = problem.transform_batch(u)
    logl = problem.loglike_batch(v)
    live = LiveSet(problem.d, capacity=2 * n)
    for i in range(n):
        live.add(u[i], v[i], logl[i], -inf, i, parent=-1, root=i)
    return RunState(problem=problem, live=live, dead=[], logv_current=0.0, logz_current=-inf,
                    rng=rng, next_serial=n, ncall=n)


def _insert(live, u, v, logl, threshold, serial, parent, root):
    rank = int(np.count_nonzero(live.logl < logl))
    live.add(u, v, logl, threshold, serial, parent=parent, root=root, rank=rank, rank_n=live.n + 1)


def ns_step(state, lrps):
    """Replace the worst live point; returns the new :class:`DeadRecord`.

    If other live points share the removed likelihood (a plateau), no
    replacement is requested and the live set shrinks by one, since no point
    can strictly exceed the threshold within the plateau.
    """
    live = state.live
    if live.n == 0:
        raise UsageError('no live points left')
    n = live.n
    row = live.remove(live.lowest())
    state.logv_current, logwidth, logw, state.logz_current = _remove_shell(
        state.logv_current, n, row['logl'], state.logz_current)
    rec = DeadRecord(point=_point(row), logv=state.logv_current, logwidth=logwidth, logw=logw,
                     n_live=n, parent=row['parent'], root=row['root'],
                     rank=row['rank'], rank_n=row['rank_n'])
    state.dead.append(rec)
    state.iteration += 1
    if not np.any(live.logl == row['logl']):
        u, v, logl, ncall = lrps.sample(live, row['logl'], state.rng)
        state.ncall += ncall
        rec.ncall = ncall
        _insert(live, u, v, logl, row['logl'], state.next_serial, row['serial'], row['root'])
        state.next_serial += 1
        rec.n_children = 1
    return rec


def termination_check(state, frac=DEFAULT_FRAC):
    """Whether the live points have become unimportant for the evidence."""
    if not state.dead or state.live.n < 2:
        return False
    return termination_criterion(
        shrink_logv(state.logv_current, state.live.n), float(state.live.logl.max()),
        state.logz_current, frac)


def finalize_live(state):
    """Turn the remaining live points into posterior samples (equal volume split)."""
    live = state.live
    out = []
    if live.n:
        logv = state.logv_current - log(live.n)
        n = live.n
        for i in live.order():
            row = live.row(i)
            logw = row['logl'] + logv
            state.logz_current = float(np.logaddexp(state.logz_current, logw))
            rec = DeadRecord(point=_point(row), logv=logv, logwidth=logv, logw=logw, n_live=n,
                             parent=row['parent'], root=row['root'], final=True,
                             rank=row['rank'], rank_n=row['rank_n'])
            out.append(rec)
        live.n = 0
    state.dead.extend(out)
    state.finished = True
    return out


def run_vanilla(problem, n, lrps, rng, frac=DEFAULT_FRAC, max_iter=None):
    """Run fixed-width nested sampling to termination and close out the live points.

    On :class:`LRPSExhausted` the live points are still finalized and the
    exception is re-raised with the partial :class:`RunState` attached as
    ``exc.state``.
    """
    state = init_live(problem, n, rng)
    try:
        while state.live.n >= 2 and not termination_check(state, frac):
            if max_iter is not None and state.iteration >= max_iter:
                break
            ns_step(state, lrps)
    except LRPSExhausted as e:
        finalize_live(state)
        e.state = state
        raise
    finalize_live(state)
    return state


class PriorRejectionSampler:
    """Draw from the whole unit cube until the likelihood exceeds the threshold."""

    def __init__(self, problem, batch=64, max_draws=10**7):
        self.problem = problem
        self.batch = batch
        self.max_draws = max_draws

    def sample(self, live, threshold, rng):
        ncall = 0
        while ncall < self.max_draws:
            u = rng.random((self.batch, self.problem.d))
            v = self.problem.transform_batch(u)
            logl = self.problem.loglike_batch(v)
            ok = np.flatnonzero(logl > threshold)
            if len(ok):
                i = ok[0]
                # the whole batch was evaluated
                return u[i], v[i], float(logl[i]), ncall + self.batch
            ncall += self.batch
        raise LRPSExhausted('prior rejection: no point above %g in %d draws' % (threshold, ncall))

    def get_state(self):
        return {}

    def set_state(self, state):
        pass


class ReferenceSampler:
    """Exact constrained sampler for problems that know their likelihood contours."""

    def __init__(self, problem, max_tries=1000):
        if problem.sample_above is None:
            raise UsageError('problem %r has no exact constrained sampler' % problem.name)
        self.problem = problem
        self.max_tries = max_tries

    def sample(self, live, threshold, rng):
        for ncall in range(1, self.max_tries + 1):
            u = self.problem.sample_above(threshold, rng, 1)
            v = self.problem.transform_batch(u)
            logl = float(self.problem.loglike_batch(v)[0])
            # a contour-boundary draw can round onto the threshold
            if logl > threshold:
                return u[0], v[0], logl, ncall
        raise LRPSExhausted('reference sampler failed above %g' % threshold)

    def get_state(self):
        return {}

    def set_state(self, state):
        pass
