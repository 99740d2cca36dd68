"""Random-walk constrained samplers: slice sampling along axes or random directions.

A walk starts from a live point above the threshold and makes ``n_steps``
slice-sampling moves, each along a line through the current point. The line's
bracket is found by doubling and then shrunk towards the current point until
a proposal above the threshold is found. Proposals outside the unit cube are
rejected without evaluating the likelihood.
"""

from dataclasses import dataclass
from math import inf

import numpy as np

from .errors import LRPSExhausted, UsageError, WalkError
from .nscore import LivePoint

__all__ = [
    'StepConfig', 'WalkState', 'slice_step', 'hit_and_run_step', 'random_direction',
    'generate_independent', 'StepSampler', 'AutoSampler', 'AXIS_SLICE', 'HIT_AND_RUN',
]

AXIS_SLICE = 'axis-slice'
HIT_AND_RUN = 'hit-and-run'
MIN_WIDTH = 1e-12
MAX_WALK_ERRORS = 10


@dataclass
class StepConfig:
    """Walk settings.

    ``n_steps=None`` means ``2 d``; ``initial_scale`` is the initial bracket
    width as a fraction of the cube side.
    """

    n_steps: int = None
    max_expand: int = 10
    initial_scale: float = 0.5

    def __post_init__(self):
        if self.n_steps is not None and self.n_steps < 1:
            raise UsageError('n_steps must be >= 1, got %r' % (self.n_steps,))
        if not 0 < self.initial_scale <= 1:
            raise UsageError('initial_scale must lie in (0, 1], got %r' % (self.initial_scale,))
        if self.max_expand < 0:
            raise UsageError('max_expand must be >= 0')

    def steps_for(self, d):
        return 2 * d if self.n_steps is None else self.n_steps


@dataclass
class WalkState:
    current: LivePoint
    threshold: float
    n_evals: int = 0


def _evaluate(problem, u):
    v = problem.transform_batch(u[None, :])
    return v[0], float(problem.loglike_batch(v)[0])


def _inside(u):
    return bool(u.min() >= 0.0 and u.max() <= 1.0)


def _cube_range(x, direction):
    """Range of ``t`` for which ``x + t * direction`` stays in the unit cube."""
    with np.errstate(divide='ignore'):
        a = -x / direction
        b = (1 - x) / direction
    lo = np.where(direction != 0, np.minimum(a, b), -inf)
    hi = np.where(direction != 0, np.maximum(a, b), inf)
    return float(lo.max()), float(hi.min())


def slice_step(ws, direction, cfg, problem, rng, scale=None):
    """One slice-sampling move along ``direction``.

    The bracket starts at width ``scale`` (default ``cfg.initial_scale``)
    randomly placed around the current point and is doubled, at most
    ``cfg.max_expand`` times, until both ends fall outside the feasible
    region or outside the cube. The proposal interval is the bracket clipped
    to the cube. Doubling decisions follow Neal's acceptability test so the
    move leaves the uniform distribution on the slice invariant.

    Returns the new :class:`WalkState` and the number of doublings performed.
    """
    direction = np.asarray(direction, dtype=float)
    x0 = ws.current.u
    thr = ws.threshold
    w = cfg.initial_scale if scale is None else scale
    tmin, tmax = _cube_range(x0, direction)
    n_evals = 0

    def above(t):
        nonlocal n_evals
        if not tmin <= t <= tmax:
            return False, None
        u = x0 + t * direction
        if not _inside(u):
            return False, None
        v, logl = _evaluate(problem, u)
        n_evals += 1
        return logl > thr, (u, v, logl)

    left = -w * rng.random()
    right = left + w
    ok_l = above(left)[0]
    ok_r = above(right)[0]
    expansions = 0
    while (ok_l or ok_r) and expansions < cfg.max_expand:
        # double on a random side
        if rng.random() < 0.5:
            left -= right - left
            ok_l = above(left)[0]
        else:
            right += right - left
            ok_r = above(right)[0]
        expansions += 1
    bracket = (left, right)

    lo, hi = max(left, tmin), min(right, tmax)
    while True:
        if hi - lo < MIN_WIDTH:
            err = WalkError('slice interval collapsed below %g at u=%s, threshold %g' % (
                MIN_WIDTH, x0.tolist(), thr))
            err.n_evals = ws.n_evals + n_evals
            raise err
        t = lo + (hi - lo) * rng.random()
        ok, res = above(t)
        if ok and _acceptable(t, bracket, above, expansions):
            u, v, logl = res
            new = LivePoint(u=u, v=v, logl=logl, birth_logl=thr, serial=ws.current.serial)
            return WalkState(current=new, threshold=thr, n_evals=ws.n_evals + n_evals), expansions
        if t < 0:
            lo = t
        else:
            hi = t


def _acceptable(t, bracket, above, expansions):
    """Neal's test: could the doubling procedure have produced the bracket from ``t``?

    Only needed when the bracket was doubled; with no doubling every point in
    the bracket is acceptable.
    """
    if expansions == 0:
        return True
    left, right = bracket
    differ = False
    while right - left > 1.1 * (bracket[1] - bracket[0]) / 2 ** expansions:
        mid = 0.5 * (left + right)
        if (0 < mid) != (t < mid):
            # 0 is the current point; they lie on different sides
            differ = True
        if t < mid:
            right = mid
        else:
            left = mid
        if differ and not above(left)[0] and not above(right)[0]:
            return False
    return True


def random_direction(d, rng, metric=None):
    """Unit vector uniform on the sphere, optionally mapped through ``metric`` (and renormalised)."""
    x = rng.standard_normal(d)
    if metric is not None:
        x = metric @ x
    return x / np.linalg.norm(x)


def hit_and_run_step(ws, cfg, problem, rng, metric=None, scale=None):
    """Slice move along a random direction."""
    return slice_step(ws, random_direction(problem.d, rng, metric), cfg, problem, rng, scale=scale)


def generate_independent(seed, threshold, cfg, scheme, problem, rng, metric=None, scale=None):
    """Walk ``n_steps`` slice moves from ``seed`` and return the final point.

    ``axis-slice`` cycles through a random permutation of the coordinate
    axes; ``hit-and-run`` draws a fresh direction for every move. Returns the
    point (with ``birth_logl = threshold``), the number of likelihood
    evaluations and the number of bracket doublings.
    """
    if not seed.logl > threshold:
        raise UsageError('walk seed must lie above the threshold')
    if scheme not in (AXIS_SLICE, HIT_AND_RUN):
        raise UsageError('unknown walk scheme %r' % (scheme,))
    d = problem.d
    ws = WalkState(current=seed, threshold=threshold)
    perm = rng.permutation(d)
    doublings = 0
    for i in range(cfg.steps_for(d)):
        if scheme == AXIS_SLICE:
            direction = np.zeros(d)
            direction[perm[i % d]] = 1.0
            if i % d == d - 1:
                perm = rng.permutation(d)
        else:
            direction = random_direction(d, rng, metric)
        ws, e = slice_step(ws, direction, cfg, problem, rng, scale=scale)
        doublings += e
    p = ws.current
    return LivePoint(u=p.u, v=p.v, logl=p.logl, birth_logl=threshold, serial=p.serial), ws.n_evals, doublings


class StepSampler:
    """Constrained sampler that walks from a randomly chosen live point.

    Hit-and-run directions are drawn in the metric of the live points'
    covariance (refit once per ``width`` calls); the bracket scale adapts
    (grown when brackets need doubling, shrunk otherwise) so that walks
    stay efficient as the region contracts.
    """

    def __init__(self, problem, scheme=HIT_AND_RUN, cfg=None, max_walk_errors=MAX_WALK_ERRORS):
        if scheme not in (AXIS_SLICE, HIT_AND_RUN):
            raise UsageError('unknown walk scheme %r' % (scheme,))
        self.problem = problem
        self.scheme = scheme
        self.cfg = cfg if cfg is not None else StepConfig()
        self.max_walk_errors = max_walk_errors
        self.scale = self.cfg.initial_scale
        self.metric = None
        self.calls = 0
        self.last_fit = 0
        self.n_evals = 0
        self.n_accepted = 0

    def _fit_metric(self, live):
        d = self.problem.d
        if live.n <= d:
            self.metric = None
            return
        cov = np.atleast_2d(np.cov(live.u, rowvar=False))
        try:
            chol = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError:
            self.metric = None
            return
        # unit-determinant shape: the scale is adapted separately
        self.metric = chol / np.exp(np.log(np.abs(np.diag(chol))).mean())

    def sample(self, live, threshold, rng):
        self.calls += 1
        if self.scheme == HIT_AND_RUN and self.calls - self.last_fit >= live.n + 1:
            self._fit_metric(live)
            self.last_fit = self.calls
        candidates = np.flatnonzero(live.logl > threshold)
        if not len(candidates):
            raise LRPSExhausted('no live point above threshold %g to start a walk from' % threshold)
        ncall = 0
        for _ in range(self.max_walk_errors):
            i = int(candidates[rng.integers(len(candidates))])
            seed = LivePoint(u=live.u[i].copy(), v=live.v[i].copy(), logl=float(live.logl[i]),
                             birth_logl=threshold, serial=int(live.serial[i]))
            try:
                point, n, doublings = generate_independent(
                    seed, threshold, self.cfg, self.scheme, self.problem, rng,
                    metric=self.metric, scale=self.scale)
            except WalkError as e:
                ncall += e.n_evals
                self.n_evals += e.n_evals
                self.scale = max(self.scale / 2, 1e-9)
                continue
            ncall += n
            self.n_evals += n
            self.n_accepted += 1
            steps = self.cfg.steps_for(self.problem.d)
            if doublings > steps:
                self.scale = min(self.scale * 1.1, 1.0)
            elif doublings == 0:
                self.scale = max(self.scale / 1.1, 1e-9)
            return point.u, point.v, point.logl, ncall
        raise LRPSExhausted('%d consecutive walk errors at threshold %g' % (self.max_walk_errors, threshold))

    def acceptance(self):
        return self.n_accepted / max(self.n_evals, 1)

    def get_state(self):
        return dict(scale=self.scale, metric=None if self.metric is None else self.metric.tolist(),
                    calls=self.calls, last_fit=self.last_fit, n_evals=self.n_evals,
                    n_accepted=self.n_accepted)

    def set_state(self, s):
        self.scale = s['scale']
        self.metric = None if s['metric'] is None else np.array(s['metric'])
        self.calls = s['calls']
        self.last_fit = s['last_fit']
        self.n_evals = s['n_evals']
        self.n_accepted = s['n_accepted']


class AutoSampler:
    """Region sampling in low dimension, walks when the region stops paying off.

    Walks are used from the start when ``d > max_region_dim``; otherwise the
    sampler switches (permanently) once the region acceptance since its last
    refit falls below ``min_acceptance`` over at least ``min_evals``
    evaluations, or when the region sampler gives up.
    """

    def __init__(self, problem, cfg=None, max_region_dim=20, min_acceptance=1e-4, min_evals=10**5,
                 **region_kwargs):
        from .region import RegionSampler
        self.region = RegionSampler(problem, **region_kwargs)
        self.walker = StepSampler(problem, HIT_AND_RUN, cfg)
        self.min_acceptance = min_acceptance
        self.min_evals = min_evals
        self.use_walker = problem.d > max_region_dim

    @property
    def active(self):
        return self.walker if self.use_walker else self.region

    def sample(self, live, threshold, rng):
        if not self.use_walker:
            try:
                out = self.region.sample(live, threshold, rng)
            except LRPSExhausted:
                self.use_walker = True
            else:
                r = self.region
                if r.n_eval >= self.min_evals and r.n_acc / r.n_eval < self.min_acceptance:
                    self.use_walker = True
                return out
        return self.walker.sample(live, threshold, rng)

    def get_state(self):
        return dict(region=self.region.get_state(), walker=self.walker.get_state(),
                    use_walker=self.use_walker)

    def set_state(self, s):
        self.region.set_state(s['region'])
        self.walker.set_state(s['walker'])
        self.use_walker = s['use_walker']
