"""Model abstraction (unit cube -> parameters -> log-likelihood) and benchmark catalog.

Points live in two spaces: the unit hypercube ("u-space"), where the prior is
uniform, and physical parameter space ("v-space"), reached through the
inverse-CDF prior transform. All model callables are vectorised over a leading
axis: ``transform`` maps an ``(n, d)`` array to ``(n, d)`` and ``loglike`` maps
``(n, d)`` to ``(n,)``.
"""

from dataclasses import dataclass, field
from math import acos, erf, log, pi, sqrt
from typing import Callable, Optional

import numpy as np
from scipy.special import ndtri

from .errors import ModelError, UsageError

__all__ = [
    'Problem', 'prior_transform', 'loglike', 'catalog', 'CATALOG_NAMES',
    'uniform_transform', 'normal_transform', 'flat_problem',
]

_U_LO = np.nextafter(0.0, 1.0)
_U_HI = np.nextafter(1.0, 0.0)


@dataclass(frozen=True)
class Problem:
    """A model under analysis.

    Parameters
    ----------
    name: str
        Identifier (catalog key).
    d: int
        Dimension.
    transform_fn: callable
        Vectorised inverse-CDF prior transform, ``(n, d) -> (n, d)``.
    loglike_fn: callable
        Vectorised log-likelihood, ``(n, d) -> (n,)``. May return ``-inf``
        for rejected points but never NaN.
    ref_logz: float or None
        Externally computed reference log-evidence.
    param_names: tuple of str
        Column names for v-space coordinates.
    volume_above: callable or None
        ``volume_above(logl)``: prior mass with log-likelihood above ``logl``,
        when known analytically.
    sample_above: callable or None
        ``sample_above(logl, rng, n)``: ``n`` unit-cube points drawn exactly
        uniformly from the region above ``logl``.
    """

    name: str
    d: int
    transform_fn: Callable[[np.ndarray], np.ndarray]
    loglike_fn: Callable[[np.ndarray], np.ndarray]
    ref_logz: Optional[float] = None
    param_names: tuple = field(default=())
    volume_above: Optional[Callable[[float], float]] = None
    sample_above: Optional[Callable] = None

    def __post_init__(self):
        if self.d < 1:
            raise UsageError('dimension must be at least 1, got %r' % (self.d,))
        if not self.param_names:
            object.__setattr__(self, 'param_names', tuple('p%d' % i for i in range(self.d)))

    def transform_batch(self, u):
        """Transform an ``(n, d)`` array without argument checks."""
        return self.transform_fn(u)

    def loglike_batch(self, v):
        """Evaluate an ``(n, d)`` array; raises :class:`ModelError` on NaN."""
        logl = np.asarray(self.loglike_fn(v), dtype=float)
        if np.isnan(logl).any():
            bad = v[np.isnan(logl)][0]
            raise ModelError('invalid likelihood: %s returned NaN at v=%s' % (self.name, bad.tolist()))
        # +inf cannot be ordered sensibly against the other points
        if np.isposinf(logl).any():
            raise ModelError('invalid likelihood: %s returned +inf' % self.name)
        return logl


def _as_points(problem, x, what):
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    x2 = np.atleast_2d(x)
    if x2.ndim != 2 or x2.shape[1] != problem.d:
        raise UsageError('%s has dimension %s, problem %r expects %d' % (
            what, x.shape[-1] if x.ndim else 0, problem.name, problem.d))
    return x2, single


def prior_transform(problem, u):
    """Map unit-cube point(s) ``u`` to parameter space.

    Accepts a single point of shape ``(d,)`` or a batch ``(n, d)``.
    """
    u2, single = _as_points(problem, u, 'unit point')
    if not np.all((u2 >= 0) & (u2 <= 1)):
        raise UsageError('unit point coordinates must lie in [0, 1]')
    v = problem.transform_batch(u2)
    return v[0] if single else v


def loglike(problem, v):
    """Evaluate the log-likelihood at parameter point(s) ``v``."""
    v2, single = _as_points(problem, v, 'parameter point')
    logl = problem.loglike_batch(v2)
    return float(logl[0]) if single else logl


def uniform_transform(lo, hi):
    """Coordinate-wise uniform prior on ``[lo, hi]``."""
    lo = np.asarray(lo, dtype=float)
    width = np.asarray(hi, dtype=float) - lo

    def transform(u):
        return lo + width * u
    return transform


def normal_transform(mu, sigma):
    """Coordinate-wise normal prior. Endpoints are nudged inwards to stay finite."""
    mu = np.asarray(mu, dtype=float)
    sigma = np.asarray(sigma, dtype=float)

    def transform(u):
        return mu + sigma * ndtri(np.clip(u, _U_LO, _U_HI))
    return transform


def _gauss_loglike(sigma=1.0):
    def loglike(v):
        d = v.shape[1]
        return -0.5 * np.sum((v / sigma) ** 2, axis=1) - d * (0.5 * log(2 * pi) + log(sigma))
    return loglike


def _gauss(d):
    # box-truncated standard normal mass, closed form
    return Problem(
        name='gauss%dd' % d, d=d,
        transform_fn=uniform_transform(-5.0, 5.0),
        loglike_fn=_gauss_loglike(),
        ref_logz=d * log(erf(5.0 / sqrt(2.0))) - d * log(10.0),
        param_names=tuple('x%d' % i for i in range(d)),
    )


def _bimodal2d():
    sigma = 0.1
    centers = np.array([[2.0, 0.0], [-2.0, 0.0]])
    lognorm = log(0.5) - log(2 * pi * sigma ** 2)

    def loglike(v):
        r2 = ((v[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        return lognorm + np.logaddexp(-0.5 * r2[:, 0] / sigma ** 2, -0.5 * r2[:, 1] / sigma ** 2)

    return Problem(
        name='bimodal2d', d=2,
        transform_fn=uniform_transform(-5.0, 5.0),
        loglike_fn=loglike,
        # 2000^2 midpoint grid; halving the grid agrees to 1e-12
        ref_logz=-4.605170185988091,
        param_names=('x', 'y'),
    )


FUNNEL_SIGMA = (1.0, 0.5)


def _funnel2d():
    s1, s2 = FUNNEL_SIGMA

    def transform(u):
        v = np.empty_like(u)
        v[:, 0] = -3.0 + 6.0 * u[:, 0]
        v[:, 1] = np.exp(v[:, 0]) * (2.0 * u[:, 1] - 1.0)
        return v

    def loglike(v):
        return (-0.5 * (v[:, 0] / s1) ** 2 - 0.5 * (v[:, 1] / s2) ** 2
                - log(2 * pi * s1 * s2))

    return Problem(
        name='funnel2d', d=2,
        transform_fn=transform,
        loglike_fn=loglike,
        # adaptive 1D quadrature over the log-scale after integrating out v2
        ref_logz=-2.567182014811318,
        param_names=('logscale', 'x'),
    )


SHELL_RADIUS = 0.5
SHELL_WIDTH = 0.05


def _disc_area(r):
    """Area of the disc of radius ``r`` centred in the square [-1, 1]^2."""
    if r <= 1.0:
        return pi * r * r
    if r >= sqrt(2.0):
        return 4.0
    return pi * r * r - 4.0 * (r * r * acos(1.0 / r) - sqrt(r * r - 1.0))


def _shell_volume_above(logl):
    """Prior mass of {logL > logl} for the sphere-shell problem."""
    if logl == -np.inf:
        return 1.0
    if logl >= 0:
        return 0.0
    delta = SHELL_WIDTH * sqrt(-2.0 * logl)
    r0 = SHELL_RADIUS
    if r0 + delta <= 1.0:
        if delta <= r0:
            # annulus; written without cancellation
            return pi * r0 * delta
        return pi * (r0 + delta) ** 2 / 4.0
    inner = pi * max(r0 - delta, 0.0) ** 2
    return (_disc_area(r0 + delta) - inner) / 4.0


def _shell_sample_above(logl, rng, n=1):
    """Exact uniform draws from {logL > logl}, returned in u-space."""
    if logl == -np.inf:
        return rng.random((n, 2))
    if logl >= 0:
        raise ModelError('sphere-shell: no volume above log-likelihood %r' % logl)
    delta = SHELL_WIDTH * sqrt(-2.0 * logl)
    r_hi = min(SHELL_RADIUS + delta, sqrt(2.0))
    r_lo = max(SHELL_RADIUS - delta, 0.0)
    out = np.empty((0, 2))
    while len(out) < n:
        m = 2 * (n - len(out)) + 8
        r = np.sqrt(r_lo ** 2 + rng.random(m) * (r_hi ** 2 - r_lo ** 2))
        phi = 2 * pi * rng.random(m)
        v = np.stack([r * np.cos(phi), r * np.sin(phi)], axis=1)
        v = v[np.all(np.abs(v) <= 1.0, axis=1)]
        out = np.vstack([out, v])
    return (out[:n] + 1.0) / 2.0


def _sphere_shell():
    def loglike(v):
        r = np.sqrt((v ** 2).sum(axis=1))
        return -0.5 * ((r - SHELL_RADIUS) / SHELL_WIDTH) ** 2

    return Problem(
        name='sphere-shell', d=2,
        transform_fn=uniform_transform(-1.0, 1.0),
        loglike_fn=loglike,
        # radial quadrature of L(r) times the in-square arc length
        ref_logz=-2.3183582156198086,
        param_names=('x', 'y'),
        volume_above=_shell_volume_above,
        sample_above=_shell_sample_above,
    )


_CATALOG = {
    'gauss2d': lambda: _gauss(2),
    'gauss10d': lambda: _gauss(10),
    'funnel2d': _funnel2d,
    'bimodal2d': _bimodal2d,
    'sphere-shell': _sphere_shell,
}
CATALOG_NAMES = tuple(_CATALOG)


def catalog(name):
    """Return the built-in benchmark problem called ``name``."""
    try:
        factory = _CATALOG[name]
    except KeyError:
        raise UsageError('unknown problem %r; available problems: %s' % (
            name, ', '.join(CATALOG_NAMES))) from None
    return factory()


def flat_problem(logc, d=2):
    """Constant likelihood ``L = exp(logc)`` on the unit cube; evidence is exactly ``logc``."""
    def loglike(v):
        return np.full(len(v), float(logc))
    return Problem(
        name='flat', d=d,
        transform_fn=lambda u: u.copy(),
        loglike_fn=loglike,
        ref_logz=float(logc),
    )
