"""Region-based constrained prior sampling.

Three constructions are fitted to the live points and intersected:

* a union of equal balls around the live points in a covariance-whitened
  metric, with the radius calibrated by bootstrapping (MLFriends);
* a bootstrapped single ellipsoid in the unit cube;
* a bootstrapped single ellipsoid in parameter space.

Proposals come from the whole cube, the cube ellipsoid or the ball union,
whichever currently wastes the fewest draws, and are then filtered by the
intersection before the likelihood is evaluated.
"""

import logging
from collections import deque
from dataclasses import dataclass
from math import ceil, exp, lgamma, log, pi

import numpy as np
from scipy.spatial import cKDTree

from .errors import LRPSExhausted, RegionStale, UsageError

__all__ = [
    'BallUnion', 'Ellipsoid', 'RegionSet', 'fit_mlfriends', 'fit_ellipsoid',
    'region_contains', 'sample_region', 'choose_source', 'refit_schedule',
    'sample_ball_union', 'loo_radius', 'RegionSampler',
    'WHOLE_PRIOR', 'U_ELLIPSOID', 'BALL_UNION', 'SOURCES',
]

logger = logging.getLogger(__name__)

WHOLE_PRIOR = 'whole-prior'
U_ELLIPSOID = 'u-ellipsoid'
BALL_UNION = 'ball-union'
SOURCES = (WHOLE_PRIOR, U_ELLIPSOID, BALL_UNION)

DEFAULT_BOOTSTRAPS = 30
DEFAULT_WINDOW = 1000
MAX_REJECTS = 10**6


def _log_unit_ball_volume(d):
    return 0.5 * d * log(pi) - lgamma(0.5 * d + 1)


def _unit_ball(n, d, rng):
    """``n`` points uniform in the unit d-ball."""
    x = rng.standard_normal((n, d))
    x /= np.linalg.norm(x, axis=1)[:, None]
    return x * rng.random(n)[:, None] ** (1.0 / d)


def _covariance(points):
    points = np.asarray(points, dtype=float)
    if len(points) < 2:
        return np.zeros((points.shape[1], points.shape[1]))
    return np.atleast_2d(np.cov(points, rowvar=False))


def _regularize(cov):
    """Return ``cov`` or, if near-singular, its diagonal plus a small ridge."""
    d = len(cov)
    eig = np.linalg.eigvalsh(cov)
    if eig[0] > 1e-12 * max(eig[-1], 0.0) and eig[0] > 0:
        return cov
    trace = float(np.trace(cov))
    eps = 1e-10 * trace / d if trace > 0 else 1e-12
    return np.diag(np.diag(cov)) + eps * np.eye(d)


def _whitening(points):
    """Mean, whitening matrix (inverse square root of covariance) and its inverse."""
    points = np.asarray(points, dtype=float)
    d = points.shape[1]
    mean = points.mean(axis=0)
    cov = _covariance(points)
    eig, vec = np.linalg.eigh(cov)
    if len(points) <= d or eig[0] <= 1e-12 * max(eig[-1], 0.0) or eig[0] <= 0:
        return mean, np.eye(d), np.eye(d)
    W = (vec / np.sqrt(eig)) @ vec.T
    Winv = (vec * np.sqrt(eig)) @ vec.T
    return mean, W, Winv


@dataclass
class BallUnion:
    """Equal balls of squared radius ``r2`` around whitened centres."""

    centers: np.ndarray
    r2: float
    mean: np.ndarray
    whiten: np.ndarray
    unwhiten: np.ndarray

    def __post_init__(self):
        self._tree = cKDTree(self.centers)

    @property
    def d(self):
        return self.centers.shape[1]

    def to_white(self, u):
        return (np.atleast_2d(u) - self.mean) @ self.whiten.T

    def from_white(self, w):
        return w @ self.unwhiten.T + self.mean

    def contains(self, u):
        w = self.to_white(u)
        dist, _ = self._tree.query(w, k=1)
        return dist ** 2 <= self.r2

    def multiplicity(self, u):
        """Number of balls containing each point."""
        w = self.to_white(u)
        return np.asarray(self._tree.query_ball_point(w, np.sqrt(self.r2), return_length=True))

    def log_ball_volume(self):
        """Log volume of one ball in u-space."""
        if self.r2 <= 0:
            return -np.inf
        logdet = np.linalg.slogdet(self.unwhiten)[1]
        return _log_unit_ball_volume(self.d) + 0.5 * self.d * log(self.r2) + logdet

    def get_state(self):
        return dict(centers=self.centers.tolist(), r2=self.r2, mean=self.mean.tolist(),
                    whiten=self.whiten.tolist(), unwhiten=self.unwhiten.tolist())

    @classmethod
    def from_state(cls, s):
        return cls(centers=np.array(s['centers'], dtype=float).reshape(-1, len(s['mean'])),
                   r2=s['r2'], mean=np.array(s['mean']), whiten=np.array(s['whiten']),
                   unwhiten=np.array(s['unwhiten']))


def fit_mlfriends(live_u, n_bootstrap=DEFAULT_BOOTSTRAPS, rng=None):
    """Fit the ball union to the live points.

    In each bootstrap round the live points are resampled with replacement;
    the squared radius of the round is the largest whitened squared distance
    from a left-out point to its nearest selected point. The final radius is
    the maximum over rounds (rounds leaving nothing out contribute 0).
    """
    live_u = np.asarray(live_u, dtype=float)
    if live_u.ndim != 2 or len(live_u) < 2:
        raise UsageError('need at least 2 live points to fit the ball union')
    if n_bootstrap < 1:
        raise UsageError('n_bootstrap must be >= 1')
    rng = np.random.default_rng() if rng is None else rng
    n = len(live_u)
    mean, W, Winv = _whitening(live_u)
    w = (live_u - mean) @ W.T
    r2 = 0.0
    for _ in range(n_bootstrap):
        selected = np.zeros(n, dtype=bool)
        selected[rng.integers(0, n, size=n)] = True
        if selected.all():
            continue
        dist, _ = cKDTree(w[selected]).query(w[~selected], k=1)
        r2 = max(r2, float((dist ** 2).max()))
    return BallUnion(centers=w, r2=r2, mean=mean, whiten=W, unwhiten=Winv)


def loo_radius(points_w):
    """Deterministic leave-one-out squared radius: max nearest-neighbour distance²."""
    points_w = np.asarray(points_w, dtype=float)
    dist, _ = cKDTree(points_w).query(points_w, k=2)
    return float((dist[:, 1] ** 2).max())


def sample_ball_union(balls, n, rng):
    """Uniform draws from the union of balls (in u-space, not cube-restricted).

    A centre is picked uniformly and a point drawn uniformly in its ball; the
    point is kept with probability ``1/k`` where ``k`` is the number of balls
    covering it, which removes the overlap bias. May return fewer than ``n``.
    """
    c = rng.integers(0, len(balls.centers), size=n)
    w = balls.centers[c] + np.sqrt(balls.r2) * _unit_ball(n, balls.d, rng)
    k = np.maximum(np.asarray(balls._tree.query_ball_point(w, np.sqrt(balls.r2), return_length=True)), 1)
    keep = rng.random(n) * k < 1.0
    return balls.from_white(w[keep])


@dataclass
class Ellipsoid:
    """``{x : (x - center)^T precision (x - center) <= 1}``."""

    center: np.ndarray
    cov: np.ndarray  # enlarged: precision == inv(cov)
    space: str
    enlarge: float = 1.0

    def __post_init__(self):
        self.chol = np.linalg.cholesky(self.cov)
        self.precision = np.linalg.inv(self.cov)

    @property
    def d(self):
        return len(self.center)

    @property
    def logvolume(self):
        return _log_unit_ball_volume(self.d) + 0.5 * np.linalg.slogdet(self.cov)[1]

    def membership(self, x):
        delta = np.atleast_2d(x) - self.center
        return np.einsum('ij,jk,ik->i', delta, self.precision, delta)

    def contains(self, x):
        return self.membership(x) <= 1.0

    def sample(self, n, rng):
        return self.center + _unit_ball(n, self.d, rng) @ self.chol.T

    def get_state(self):
        return dict(center=self.center.tolist(), cov=self.cov.tolist(), space=self.space,
                    enlarge=self.enlarge)

    @classmethod
    def from_state(cls, s):
        return cls(center=np.array(s['center']), cov=np.atleast_2d(np.array(s['cov'])),
                   space=s['space'], enlarge=s['enlarge'])


def _max_mahalanobis2(points, mean, cov):
    delta = points - mean
    prec = np.linalg.inv(cov)
    return float(np.einsum('ij,jk,ik->i', delta, prec, delta).max())


def fit_ellipsoid(points, space, n_bootstrap=DEFAULT_BOOTSTRAPS, rng=None):
    """Single ellipsoid around ``points``, enlarged by bootstrapping.

    The shape is the sample covariance. The enlargement factor is the largest
    squared Mahalanobis distance of left-out points under each round's
    mean/covariance, and never less than what covers every point.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    n = len(points)
    rng = np.random.default_rng() if rng is None else rng
    mean = points.mean(axis=0)
    cov = _regularize(_covariance(points))
    f = _max_mahalanobis2(points, mean, cov)
    for _ in range(n_bootstrap):
        idx = rng.integers(0, n, size=n)
        selected = np.zeros(n, dtype=bool)
        selected[idx] = True
        if selected.all():
            continue
        sub = points[idx]
        f = max(f, _max_mahalanobis2(points[~selected], sub.mean(axis=0), _regularize(_covariance(sub))))
    # a zero factor only arises for coincident points; keep the ridge instead
    f = (f if f > 0 else 1.0) * (1 + 1e-9)
    return Ellipsoid(center=mean, cov=f * cov, space=space, enlarge=f)


class RegionSet:
    """Ball union, u-space ellipsoid and optional v-space ellipsoid."""

    def __init__(self, balls, u_ell, v_ell, union_logvol):
        self.balls = balls
        self.u_ell = u_ell
        self.v_ell = v_ell
        self.union_logvol = union_logvol
        self.source = WHOLE_PRIOR
        self.stats = deque()  # (source, draws, feasible)
        self.window = DEFAULT_WINDOW

    @classmethod
    def fit(cls, live_u, live_v, n_bootstrap, rng):
        balls = fit_mlfriends(live_u, n_bootstrap, rng)
        u_ell = fit_ellipsoid(live_u, 'u-space', n_bootstrap, rng)
        v_ell = fit_ellipsoid(live_v, 'v-space', n_bootstrap, rng)
        # union volume = n * ball volume * E[1/multiplicity] over uniform draws from the balls
        m = 256
        c = rng.integers(0, len(balls.centers), size=m)
        w = balls.centers[c] + np.sqrt(balls.r2) * _unit_ball(m, balls.d, rng)
        k = np.maximum(np.asarray(balls._tree.query_ball_point(w, np.sqrt(balls.r2), return_length=True)), 1)
        union_logvol = log(len(balls.centers)) + balls.log_ball_volume() + log(np.mean(1.0 / k))
        return cls(balls, u_ell, v_ell, union_logvol)

    def contains(self, u, v, use_v=True):
        """Vectorised membership for arrays ``u`` and their transforms ``v``.

        ``use_v=False`` skips the v-space ellipsoid.
        """
        u = np.atleast_2d(u)
        ok = np.all((u >= 0) & (u <= 1), axis=1)
        if ok.any():
            ok[ok] = self.u_ell.contains(u[ok])
        if ok.any():
            ok[ok] = self.balls.contains(u[ok])
        if use_v and ok.any():
            ok[ok] = self.v_ell.contains(np.atleast_2d(v)[ok])
        return ok

    def record(self, source, draws, feasible):
        self.stats.append((source, draws, feasible))
        total = sum(s[1] for s in self.stats)
        while len(self.stats) > 1 and total - self.stats[0][1] >= self.window:
            total -= self.stats.popleft()[1]

    def efficiency(self):
        """Feasible draws per raw draw, per source, over the window."""
        out = {}
        for s in SOURCES:
            draws = sum(x[1] for x in self.stats if x[0] == s)
            if draws:
                out[s] = (sum(x[2] for x in self.stats if x[0] == s), draws)
        return out

    def log_volumes(self):
        return {WHOLE_PRIOR: 0.0, U_ELLIPSOID: float(self.u_ell.logvolume), BALL_UNION: float(self.union_logvol)}

    def summary(self):
        return dict(r2=self.balls.r2, u_ell_logvol=float(self.u_ell.logvolume),
                    v_ell_logvol=float(self.v_ell.logvolume),
                    union_logvol=float(self.union_logvol), source=self.source)

    def get_state(self):
        return dict(balls=self.balls.get_state(), u_ell=self.u_ell.get_state(),
                    v_ell=self.v_ell.get_state(),
                    union_logvol=self.union_logvol, source=self.source,
                    stats=[list(s) for s in self.stats])

    @classmethod
    def from_state(cls, s):
        rs = cls(BallUnion.from_state(s['balls']), Ellipsoid.from_state(s['u_ell']),
                 Ellipsoid.from_state(s['v_ell']),
                 s['union_logvol'])
        rs.source = s['source']
        rs.stats = deque(tuple(x) for x in s['stats'])
        return rs


def region_contains(rs, u, problem):
    """Whether unit point ``u`` lies in the cube and all three constructions."""
    u = np.asarray(u, dtype=float)
    u2 = np.atleast_2d(u)
    inside = np.all((u2 >= 0) & (u2 <= 1), axis=1)
    v = np.zeros_like(u2)
    if inside.any():
        v[inside] = problem.transform_batch(u2[inside])
    ok = inside & rs.contains(u2, v)
    return bool(ok[0]) if u.ndim == 1 else ok


def choose_source(rs, min_draws=50):
    """Pick the proposal source expected to waste the fewest draws.

    Measured feasible-per-draw rates from the window are used where a source
    has enough draws; other sources are predicted from their volume relative
    to the estimated volume of the intersection.
    """
    if rs is None:
        return WHOLE_PRIOR
    logvols = rs.log_volumes()
    if logvols[BALL_UNION] > 0:
        return WHOLE_PRIOR
    measured = {s: f / n for s, (f, n) in rs.efficiency().items() if n >= min_draws}
    if measured:
        inter = max(log(e) + logvols[s] for s, e in measured.items() if e > 0) \
            if any(e > 0 for e in measured.values()) else min(logvols.values())
    else:
        inter = min(logvols.values())
    best, best_eff = None, -1.0
    # ties favour the tighter constructions
    for s in (BALL_UNION, U_ELLIPSOID, WHOLE_PRIOR):
        eff = measured[s] if s in measured else min(1.0, exp(min(0.0, inter - logvols[s])))
        if eff > best_eff:
            best, best_eff = s, eff
    return best


def sample_region(rs, rng, problem, n=256, source=None, use_v=True):
    """Raw draws from the chosen source, filtered by the intersection.

    Returns ``(u, v, n_raw)``: the feasible unit points, their transforms
    and the number of raw draws spent. ``use_v=False`` leaves out the
    v-space ellipsoid.
    """
    source = source or rs.source
    d = problem.d
    if source == WHOLE_PRIOR:
        u = rng.random((n, d))
    elif source == U_ELLIPSOID:
        u = rs.u_ell.sample(n, rng)
    elif source == BALL_UNION:
        u = sample_ball_union(rs.balls, n, rng)
    else:
        raise UsageError('unknown proposal source %r' % (source,))
    inside = np.all((u >= 0) & (u <= 1), axis=1)
    u = u[inside]
    v = problem.transform_batch(u) if len(u) else np.empty((0, d))
    ok = rs.contains(u, v, use_v=use_v) if len(u) else np.zeros(0, dtype=bool)
    return u[ok], v[ok], n


def refit_schedule(iteration, last_fit, width, stale=False):
    """Refit after a stale region or once ``width`` iterations have passed."""
    return stale or iteration - last_fit >= width


class RegionSampler:
    """Constrained sampler driven by a :class:`RegionSet`.

    Proposals passing the cube, the u-space ellipsoid and the ball union are
    queued together with their v-space ellipsoid verdict. Likelihoods are
    evaluated in small chunks in queue order, skipping points the v-space
    ellipsoid rejects; candidates left over from one call stay valid for the
    next (they are independent uniform draws from the same region).

    Proposal generation and random-number use do not depend on
    ``use_vspace``: switching the v-space filter off only changes which
    queued points get evaluated. Runs with and without the filter therefore
    follow the same trajectory as long as the filter never excludes a point
    above the threshold, which makes their acceptance rates directly
    comparable.
    """

    def __init__(self, problem, n_bootstrap=DEFAULT_BOOTSTRAPS, use_vspace=True,
                 window=DEFAULT_WINDOW, max_rejects=MAX_REJECTS, max_ncall=10**7):
        self.problem = problem
        self.n_bootstrap = n_bootstrap
        self.use_vspace = use_vspace
        self.window = window
        self.max_rejects = max_rejects
        self.max_ncall = max_ncall
        self.region = None
        self.calls = 0
        self.last_fit = 0
        self.stale = False
        self.n_refits = 0
        self.source_counts = {s: 0 for s in SOURCES}
        self.source_trace = []
        self._reset_queue()

    def _reset_queue(self):
        d = self.problem.d
        self.pending_u = np.empty((0, d))
        self.pending_v = np.empty((0, d))
        self.pending_ok = np.empty(0, dtype=bool)
        self.pending_src = []
        # (u, v, logl or None if skipped by the v-space filter, source), oldest first
        self.evaluated = deque()
        self.n_eval = 0
        self.n_acc = 0
        self.skipped = 0

    def refit(self, live, rng):
        self.region = RegionSet.fit(live.u.copy(), live.v.copy(), self.n_bootstrap, rng)
        self.region.window = self.window
        self.last_fit = self.calls
        self.stale = False
        self.n_refits += 1
        self._reset_queue()
        self.region.source = choose_source(self.region)
        logger.debug('region refit %d: %s', self.n_refits, self.region.summary())

    def acceptance(self):
        return (self.n_acc + 1.0) / (self.n_eval + 2.0)

    def _fill(self, rng):
        """Refill the pending queue with proposals inside the u-space constructions."""
        rejects = 0
        while not len(self.pending_u):
            if self.region is None:
                source = WHOLE_PRIOR
                n = 64
                u = rng.random((n, self.problem.d))
                v = self.problem.transform_batch(u)
                ok = np.ones(n, dtype=bool)
            else:
                source = self.region.source = choose_source(self.region)
                n = int(min(10000, max(64, ceil(4.0 / max(self._source_eff(source), 1e-6)))))
                u, v, n = sample_region(self.region, rng, self.problem, n=n, source=source, use_v=False)
                self.region.record(source, n, len(u))
                ok = self.region.v_ell.contains(v) if self.use_vspace and len(u) else np.ones(len(u), dtype=bool)
            if not len(u):
                rejects += n
                if rejects >= self.max_rejects:
                    raise RegionStale('%d consecutive region proposals rejected' % rejects)
            self.pending_u, self.pending_v, self.pending_ok = u, v, ok
            self.pending_src = [source] * len(u)

    def _source_eff(self, source):
        f, n = self.region.efficiency().get(source, (1, 1))
        return f / n

    def _evaluate_chunk(self, rng):
        """Evaluate the next few queued proposals; returns the number of evaluations."""
        if not len(self.pending_u):
            self._fill(rng)
        m = int(min(len(self.pending_u), max(1, min(100, ceil(1.0 / self.acceptance())))))
        u, v, ok = self.pending_u[:m], self.pending_v[:m], self.pending_ok[:m]
        logl = [None] * m
        if ok.any():
            for i, value in zip(np.flatnonzero(ok), self.problem.loglike_batch(v[ok]).tolist()):
                logl[i] = value
            self.skipped = 0
        else:
            self.skipped += m
            if self.skipped >= self.max_rejects:
                raise RegionStale('%d consecutive proposals rejected by the v-space ellipsoid' % self.skipped)
        self.evaluated.extend(zip(u, v, logl, self.pending_src[:m]))
        self.pending_u, self.pending_v, self.pending_ok = self.pending_u[m:], self.pending_v[m:], self.pending_ok[m:]
        self.pending_src = self.pending_src[m:]
        n = int(ok.sum())
        self.n_eval += n
        return n

    def sample(self, live, threshold, rng):
        self.calls += 1
        if refit_schedule(self.calls, self.last_fit, live.n + 1, self.stale) and live.n >= 2:
            self.refit(live, rng)
        ncall = 0
        retried = False
        while True:
            while self.evaluated:
                u, v, logl, src = self.evaluated.popleft()
                if logl is not None and logl > threshold:
                    self.n_acc += 1
                    self.source_counts[src] += 1
                    self.source_trace.append(src)
                    return u, v, logl, ncall
            if ncall >= self.max_ncall:
                raise LRPSExhausted('region sampler: no point above %g in %d evaluations' % (threshold, ncall))
            try:
                ncall += self._evaluate_chunk(rng)
            except RegionStale:
                if retried or live.n < 2:
                    raise LRPSExhausted('region stale even after refit') from None
                retried = True
                self.stale = True
                self.refit(live, rng)

    def get_state(self):
        return dict(
            region=self.region.get_state() if self.region is not None else None,
            calls=self.calls, last_fit=self.last_fit, stale=self.stale, n_refits=self.n_refits,
            source_counts=self.source_counts,
            pending_u=self.pending_u.tolist(), pending_v=self.pending_v.tolist(),
            pending_ok=self.pending_ok.tolist(), pending_src=self.pending_src,
            evaluated=[[u.tolist(), v.tolist(), logl, s] for u, v, logl, s in self.evaluated],
            n_eval=self.n_eval, n_acc=self.n_acc, skipped=self.skipped,
        )

    def set_state(self, s):
        d = self.problem.d
        self.region = RegionSet.from_state(s['region']) if s['region'] is not None else None
        if self.region is not None:
            self.region.window = self.window
        self.calls = s['calls']
        self.last_fit = s['last_fit']
        self.stale = s['stale']
        self.n_refits = s['n_refits']
        self.source_counts = dict(s['source_counts'])
        self.pending_u = np.array(s['pending_u'], dtype=float).reshape(-1, d)
        self.pending_v = np.array(s['pending_v'], dtype=float).reshape(-1, d)
        self.pending_ok = np.array(s['pending_ok'], dtype=bool)
        self.pending_src = list(s['pending_src'])
        self.evaluated = deque((np.array(u), np.array(v), logl, src) for u, v, logl, src in s['evaluated'])
        self.n_eval = s['n_eval']
        self.n_acc = s['n_acc']
        self.skipped = s['skipped']
