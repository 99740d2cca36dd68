"""Ensemble of bootstrapped evidence integrators.

Each member sees a with-replacement resample of the root edges of the tree.
Nodes under an unsampled edge are invisible to it (weight 0); nodes under an
edge sampled ``m`` times count ``m`` times. Members shrink their private
volume with Beta(n, 1) draws, where ``n`` is the number of open nodes they
can see. A plain integrator that sees everything and shrinks by the expected
``(n-1)/n`` provides the point estimate; the spread of the members' log
evidences provides its uncertainty.
"""

from math import inf, log, log1p

import numpy as np

from .errors import UsageError

__all__ = [
    'IntegratorEnsemble', 'make_ensemble', 'beta_shrink', 'ensemble_update',
    'combine', 'effective_sample_size', 'DEFAULT_K',
]

DEFAULT_K = 30


def beta_shrink(n_visible, rng):
    """Return ``ln t`` with ``t ~ Beta(n_visible, 1)``, i.e. ``t = U**(1/n)``."""
    if n_visible < 1:
        raise UsageError('beta_shrink needs n >= 1')
    # 1 - U lies in (0, 1], so the log is finite
    return log(1.0 - rng.random()) / n_visible


def _log1mexp(x):
    """log(1 - exp(x)) for x <= 0."""
    if x == -inf:
        return 0.0
    if x > -0.6931471805599453:
        return log(-np.expm1(x))
    return log1p(-np.exp(x))


class IntegratorEnsemble:
    """Bootstrapped integrators observing a tree run.

    Parameters
    ----------
    n_roots: int
        Number of root edges.
    k: int
        Number of bootstrapped members.
    rng: numpy.random.Generator
        Used for the edge resampling and to seed one substream per member.
    deterministic: bool
        Members shrink by ``(n-1)/n`` instead of Beta draws.
    full_visibility: bool
        Every member sees every edge exactly once.
    keep_weights: bool
        Store each member's per-sample log weights (``-inf`` = blind).
    """

    def __init__(self, n_roots, k=DEFAULT_K, rng=None, deterministic=False,
                 full_visibility=False, keep_weights=False):
        if k < 2:
            raise UsageError('ensemble needs at least 2 members, got %d' % k)
        if n_roots < 2:
            raise UsageError('root needs at least 2 children, got %d' % n_roots)
        rng = np.random.default_rng() if rng is None else rng
        self.k = k
        self.n_roots = n_roots
        self.deterministic = deterministic
        if full_visibility:
            self.counts = np.ones((k, n_roots), dtype=np.int64)
        else:
            picks = rng.integers(0, n_roots, size=(k, n_roots))
            self.counts = np.stack([np.bincount(p, minlength=n_roots) for p in picks])
        seeds = rng.integers(0, 2**63, size=k)
        self.member_rngs = [np.random.default_rng(int(s)) for s in seeds]
        self.nvis = np.zeros(k, dtype=np.int64)
        self.logv = np.zeros(k)
        self.logz = np.full(k, -inf)
        # plain integrator
        self.n_open = 0
        self.point_logv = 0.0
        self.point_logz = -inf
        self.point_logw = []
        self.keep_weights = keep_weights
        self.member_logw = []

    @property
    def logz_samples(self):
        return self.logz.copy()

    def open(self, root):
        """A node under ``root`` joined the open set."""
        self.nvis += self.counts[:, root]
        self.n_open += 1

    def _log_shrink(self, n, rng):
        if self.deterministic:
            return log1p(-1.0 / n) if n > 1 else -inf
        return beta_shrink(n, rng)

    def pass_node(self, logl, root, visibility=None):
        """A node under ``root`` with log-likelihood ``logl`` is removed.

        ``visibility`` overrides the tracked per-member count of visible open
        nodes. Returns the members' log weights for this node.
        """
        n = self.n_open
        logwidth = self.point_logv - log(n)
        self.point_logv = self.point_logv + log1p(-1.0 / n) if n > 1 else -inf
        logw = logl + logwidth
        self.point_logz = float(np.logaddexp(self.point_logz, logw))
        self.point_logw.append(logw)
        self.n_open -= 1

        vis = self.nvis if visibility is None else np.asarray(visibility)
        mult = self.counts[:, root]
        w = np.full(self.k, -inf)
        for m in np.flatnonzero((mult > 0) & (vis > 0)):
            rng = self.member_rngs[m]
            nm = int(vis[m])
            for j in range(min(int(mult[m]), nm)):
                logt = self._log_shrink(nm - j, rng)
                w[m] = np.logaddexp(w[m], logl + self.logv[m] + _log1mexp(logt))
                self.logv[m] += logt
            self.logz[m] = np.logaddexp(self.logz[m], w[m])
        if visibility is None:
            self.nvis -= mult
        if self.keep_weights:
            self.member_logw.append(w)
        return w

    def finalize(self, logls, roots):
        """Split the remaining volume equally over the open nodes."""
        n = self.n_open
        if n == 0:
            return
        share = self.point_logv - log(n)
        for logl in logls:
            logw = logl + share
            self.point_logz = float(np.logaddexp(self.point_logz, logw))
            self.point_logw.append(logw)
        for logl, root in zip(logls, roots):
            mult = self.counts[:, root]
            w = np.full(self.k, -inf)
            seen = (mult > 0) & (self.nvis > 0)
            w[seen] = logl + np.log(mult[seen]) + self.logv[seen] - np.log(self.nvis[seen])
            self.logz = np.logaddexp(self.logz, w)
            if self.keep_weights:
                self.member_logw.append(w)
        self.n_open = 0
        self.nvis[:] = 0

    def get_state(self):
        return dict(
            counts=self.counts.tolist(),
            member_rngs=[r.bit_generator.state for r in self.member_rngs],
            nvis=self.nvis.tolist(), logv=self.logv.tolist(), logz=self.logz.tolist(),
            n_open=self.n_open, point_logv=self.point_logv, point_logz=self.point_logz,
            deterministic=self.deterministic,
        )

    def set_state(self, state, point_logw):
        self.counts = np.array(state['counts'], dtype=np.int64)
        for r, s in zip(self.member_rngs, state['member_rngs']):
            r.bit_generator.state = s
        self.nvis = np.array(state['nvis'], dtype=np.int64)
        self.logv = np.array(state['logv'], dtype=float)
        self.logz = np.array(state['logz'], dtype=float)
        self.n_open = state['n_open']
        self.point_logv = state['point_logv']
        self.point_logz = state['point_logz']
        self.deterministic = state['deterministic']
        self.point_logw = list(point_logw)


def make_ensemble(root, k, rng, **kwargs):
    """Ensemble over the root edges of ``root`` (a :class:`reactnest.tree.Node`)."""
    return IntegratorEnsemble(len(root.children), k=k, rng=rng, **kwargs)


def ensemble_update(ensemble, logl, root, visibility=None):
    """Fold one removed node into ``ensemble``; see :meth:`IntegratorEnsemble.pass_node`."""
    ensemble.pass_node(logl, root, visibility=visibility)
    return ensemble


def combine(ensemble):
    """Point estimate, its spread, and normalised posterior weights.

    Returns
    -------
    logz_mean: float
    logz_sigma: float
        Sample standard deviation of the members' log evidences.
    weights: numpy.ndarray
        Posterior weight per removed node, in removal order, summing to one.
    """
    samples = ensemble.logz
    finite = samples[np.isfinite(samples)]
    sigma = float(np.std(finite, ddof=1)) if len(finite) > 1 else inf
    logw = np.array(ensemble.point_logw)
    weights = np.exp(logw - ensemble.point_logz)
    weights /= weights.sum()
    return ensemble.point_logz, sigma, weights


def effective_sample_size(weights):
    """Kish effective sample size ``(sum w)^2 / sum w^2``."""
    w = np.asarray(weights, dtype=float)
    if len(w) == 0:
        return 0.0
    return float(w.sum() ** 2 / (w ** 2).sum())
