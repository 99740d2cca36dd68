"""Reactive nested sampling over a tree of prior-volume nodes.

The root stands for the whole prior; its children are prior draws. Open nodes
are consumed lowest-likelihood first. Whenever a node is removed, an
:class:`AttachmentPolicy` decides how many children (replacement draws above
the node's likelihood) it gets, so the number of parallel threads (the
"width", i.e. the number of live points) can vary through the run.

With ``min_width == max_width`` and widening disabled the run reduces exactly
to :func:`reactnest.nscore.run_vanilla`.
"""

from dataclasses import dataclass, field
from math import inf, log
from typing import Optional

import numpy as np

from .errors import LRPSExhausted, UsageError
from .nscore import (
    DEFAULT_FRAC, DeadRecord, LiveSet, _insert, _point, _remove_shell,
    shrink_logv, termination_criterion,
)

__all__ = [
    'ROOT', 'Node', 'ExplorerStack', 'AttachmentPolicy', 'RunStats',
    'build_root', 'should_attach_child', 'width_at', 'ReactiveExplorer', 'breadth_first_run',
]

ROOT = -1


@dataclass
class Node:
    id: int
    point: object = None
    parent: Optional[int] = None
    children: list = field(default_factory=list)


class ExplorerStack(LiveSet):
    """Open nodes of the tree; each row is one open node."""

    @property
    def width(self):
        return self.n

    @property
    def open(self):
        """Open node ids in ascending likelihood order."""
        return self.serial[self.order()].tolist()


@dataclass
class AttachmentPolicy:
    """Child-attachment rules.

    ``weight_frac_threshold=None`` disables posterior-weight widening.
    """

    min_width: int
    max_width: Optional[int] = None
    weight_frac_threshold: Optional[float] = 0.1

    def __post_init__(self):
        if self.max_width is None:
            self.max_width = 4 * self.min_width
        if self.min_width < 2:
            raise UsageError('min_width must be at least 2')
        if self.max_width < self.min_width:
            raise UsageError('max_width must be >= min_width')
        if self.weight_frac_threshold is not None and self.weight_frac_threshold <= 0:
            raise UsageError('weight_frac_threshold must be positive')


@dataclass
class RunStats:
    """What the policy needs to know about the run at the node being removed."""

    node_logw: float
    logz: float
    terminate: bool = False
    plateau: bool = False


def width_at(stack):
    return stack.width


def build_root(problem, n_init, rng):
    """Root node plus ``n_init`` prior draws as its open children."""
    if n_init < 2:
        raise UsageError('need at least 2 root children, got %d' % n_init)
    u = rng.random((n_init, problem.d))
    v = problem.transform_batch(u)
    logl = problem.loglike_batch(v)
    stack = ExplorerStack(problem.d, capacity=2 * n_init)
    for i in range(n_init):
        stack.add(u[i], v[i], logl[i], -inf, i, parent=ROOT, root=i)
    root = Node(id=ROOT, children=list(range(n_init)))
    return root, stack


def should_attach_child(node, stack, policy, run_stats):
    """Number of children to attach to ``node``, which has just left ``stack``.

    Rules, in order: nothing once the run terminates or inside a likelihood
    plateau; one child if the width would otherwise fall below
    ``min_width``; one more if the node carries more than
    ``weight_frac_threshold`` of the evidence so far and ``max_width`` allows.
    """
    if run_stats.terminate or run_stats.plateau:
        return 0
    width = stack.width
    n = 1 if width < policy.min_width else 0
    thr = policy.weight_frac_threshold
    if thr is not None and run_stats.node_logw - run_stats.logz > log(thr) \
            and width + n < policy.max_width:
        n += 1
    return n


class ReactiveExplorer:
    """Breadth-first exploration of the sample tree.

    Parameters
    ----------
    problem: Problem
    policy: AttachmentPolicy
    lrps: constrained sampler
        Object with ``sample(live, threshold, rng) -> (u, v, logl, ncall)``.
    rng: numpy.random.Generator
    frac: float
        Termination fraction.
    integrators: list
        Observers with ``open(root)``, ``pass_node(logl, root)`` and
        ``finalize(logls, roots)``.
    on_dead: callable or None
        Called with each completed :class:`DeadRecord`.
    """

    def __init__(self, problem, policy, lrps, rng, frac=DEFAULT_FRAC, integrators=(), on_dead=None):
        self.problem = problem
        self.policy = policy
        self.lrps = lrps
        self.rng = rng
        self.frac = frac
        self.integrators = list(integrators)
        self.on_dead = on_dead
        self.root = None
        self.stack = None
        self.dead = []
        self.logv = 0.0
        self.logz = -inf
        self.next_id = 0
        self.iteration = 0
        self.ncall = 0
        self.finished = False
        self.termination = None

    def start(self):
        self.root, self.stack = build_root(self.problem, self.policy.min_width, self.rng)
        self.next_id = self.stack.n
        self.ncall = self.stack.n
        for integ in self.integrators:
            for r in range(self.stack.n):
                integ.open(r)
        return self.root

    def _emit(self, rec):
        if self.on_dead is not None:
            self.on_dead(rec)

    def should_terminate(self):
        stack = self.stack
        if stack.n < 2:
            return True
        if not self.dead:
            return False
        return termination_criterion(shrink_logv(self.logv, stack.n), float(stack.logl.max()),
                                     self.logz, self.frac)

    def step(self):
        """Process one node; returns False once the run is complete."""
        if self.finished:
            return False
        if self.should_terminate():
            self.termination = 'frac' if self.stack.n >= 2 else 'width'
            self.finish()
            return False
        stack = self.stack
        n = stack.n
        row = stack.remove(stack.lowest())
        self.logv, logwidth, logw, self.logz = _remove_shell(self.logv, n, row['logl'], self.logz)
        rec = DeadRecord(point=_point(row), logv=self.logv, logwidth=logwidth, logw=logw,
                         n_live=n, parent=row['parent'], root=row['root'],
                         rank=row['rank'], rank_n=row['rank_n'])
        self.dead.append(rec)
        self.iteration += 1
        for integ in self.integrators:
            integ.pass_node(row['logl'], row['root'])
        stats = RunStats(node_logw=logw, logz=self.logz,
                         plateau=bool(np.any(stack.logl == row['logl'])))
        node = Node(id=row['serial'], point=rec.point, parent=row['parent'])
        nchild = should_attach_child(node, stack, self.policy, stats)
        try:
            for _ in range(nchild):
                u, v, logl, ncall = self.lrps.sample(stack, row['logl'], self.rng)
                self.ncall += ncall
                rec.ncall += ncall
                _insert(stack, u, v, logl, row['logl'], self.next_id, row['serial'], row['root'])
                self.next_id += 1
                rec.n_children += 1
                for integ in self.integrators:
                    integ.open(row['root'])
        finally:
            self._emit(rec)
        return True

    def finish(self):
        """Close out the open nodes with an equal split of the remaining volume."""
        stack = self.stack
        if stack.n:
            order = stack.order()
            rows = [stack.row(i) for i in order]
            n = stack.n
            logv = self.logv - log(n)
            for integ in self.integrators:
                integ.finalize([r['logl'] for r in rows], [r['root'] for r in rows])
            for r in rows:
                logw = r['logl'] + logv
                self.logz = float(np.logaddexp(self.logz, logw))
                rec = DeadRecord(point=_point(r), logv=logv, logwidth=logv, logw=logw, n_live=n,
                                 parent=r['parent'], root=r['root'], final=True,
                                 rank=r['rank'], rank_n=r['rank_n'])
                self.dead.append(rec)
                self._emit(rec)
            stack.n = 0
        self.finished = True

    def run(self, max_iter=None):
        if self.stack is None:
            self.start()
        try:
            while self.step():
                if max_iter is not None and self.iteration >= max_iter:
                    break
        except LRPSExhausted:
            self.termination = 'lrps-exhausted'
            self.finish()
            raise
        return self.dead

    def get_state(self):
        return dict(
            stack=self.stack.get_state(), n_roots=len(self.root.children),
            logv=self.logv, logz=self.logz, next_id=self.next_id,
            iteration=self.iteration, ncall=self.ncall,
        )

    def set_state(self, state, dead):
        self.stack = ExplorerStack.from_state(state['stack'])
        self.root = Node(id=ROOT, children=list(range(state['n_roots'])))
        self.logv = state['logv']
        self.logz = state['logz']
        self.next_id = state['next_id']
        self.iteration = state['iteration']
        self.ncall = state['ncall']
        self.dead = list(dead)


def breadth_first_run(problem, policy, lrps, rng, frac=DEFAULT_FRAC, integrators=(), max_iter=None):
    """Build the root, explore to termination and return the dead sequence."""
    explorer = ReactiveExplorer(problem, policy, lrps, rng, frac=frac, integrators=integrators)
    explorer.run(max_iter=max_iter)
    return explorer.dead
