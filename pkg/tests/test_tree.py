from math import log, log1p

import numpy as np
import pytest

from reactnest.model import catalog, flat_problem
from reactnest.nscore import PriorRejectionSampler, ReferenceSampler, run_vanilla
from reactnest.region import RegionSampler
from reactnest.tree import (
    ROOT, AttachmentPolicy, ExplorerStack, Node, ReactiveExplorer, RunStats,
    breadth_first_run, build_root, should_attach_child, width_at,
)


def test_build_root():
    root, stack = build_root(catalog('gauss2d'), 400, np.random.default_rng(1))
    assert width_at(stack) == 400
    assert root.id == ROOT and root.point is None
    assert root.children == list(range(400))
    assert np.all(stack._parent[:400] == ROOT)
    assert np.all(np.isfinite(stack.logl)) and np.all(stack._birth[:400] == -np.inf)


def test_build_root_deterministic():
    _, a = build_root(catalog('funnel2d'), 20, np.random.default_rng(3))
    _, b = build_root(catalog('funnel2d'), 20, np.random.default_rng(3))
    np.testing.assert_array_equal(a.u, b.u)


def test_stack_open_sorted():
    _, stack = build_root(catalog('gauss2d'), 50, np.random.default_rng(1))
    logl = dict(zip(stack.serial.tolist(), stack.logl.tolist()))
    ordered = [logl[i] for i in stack.open]
    assert ordered == sorted(ordered)


def test_policy_validation():
    assert AttachmentPolicy(10).max_width == 40
    with pytest.raises(ValueError):
        AttachmentPolicy(1)
    with pytest.raises(ValueError):
        AttachmentPolicy(10, max_width=5)
    with pytest.raises(ValueError):
        AttachmentPolicy(10, weight_frac_threshold=0)


def _stack(width):
    s = ExplorerStack(1)
    for i in range(width):
        s.add(np.zeros(1), np.zeros(1), float(i), -np.inf, i)
    return s


# width after removal, node weight fraction, terminate, plateau -> children
POLICY_TABLE = [
    (9, 0.001, False, False, 1),   # floor
    (10, 0.001, False, False, 0),  # at min width, unimportant node
    (9, 0.5, False, False, 2),     # floor plus widening
    (10, 0.5, False, False, 1),    # widening only
    (39, 0.5, False, False, 1),    # widening allowed up to max
    (40, 0.5, False, False, 0),    # at max width
    (39, 0.09, False, False, 0),   # just below the weight trigger
    (9, 0.5, True, False, 0),      # terminating
    (9, 0.5, False, True, 0),      # plateau
]


@pytest.mark.parametrize('width, frac, terminate, plateau, expected', POLICY_TABLE)
def test_policy_table(width, frac, terminate, plateau, expected):
    policy = AttachmentPolicy(10, 40, 0.1)
    stats = RunStats(node_logw=log(frac), logz=0.0, terminate=terminate, plateau=plateau)
    assert should_attach_child(Node(0), _stack(width), policy, stats) == expected


def test_policy_widening_disabled():
    policy = AttachmentPolicy(10, 40, None)
    stats = RunStats(node_logw=0.0, logz=0.0)
    assert should_attach_child(Node(0), _stack(10), policy, stats) == 0


def test_width_conservation_and_widening():
    p = catalog('gauss2d')
    ex = ReactiveExplorer(p, AttachmentPolicy(400, 1600, None), RegionSampler(p), np.random.default_rng(0))
    ex.start()
    ex.step()
    assert width_at(ex.stack) == 400
    ex = ReactiveExplorer(p, AttachmentPolicy(400, 1600, 0.1), RegionSampler(p), np.random.default_rng(0))
    ex.start()
    ex.step()
    # the first removed node holds all evidence so far: one extra child
    assert ex.dead[0].n_children == 2
    assert width_at(ex.stack) == 401


@pytest.mark.parametrize('name', ['gauss2d', 'funnel2d'])
def test_vanilla_equivalence(name):
    p = catalog(name)
    vanilla = run_vanilla(p, 100, RegionSampler(p), np.random.default_rng(9)).dead
    tree = breadth_first_run(p, AttachmentPolicy(100, 100, None), RegionSampler(p), np.random.default_rng(9))
    assert len(tree) == len(vanilla)
    for a, b in zip(vanilla, tree):
        assert (a.logl, a.logv, a.logw, a.n_live, a.final) == (b.logl, b.logv, b.logw, b.n_live, b.final)
        np.testing.assert_array_equal(a.point.u, b.point.u)


@pytest.fixture(scope='module')
def wide_run():
    p = catalog('bimodal2d')
    ex = ReactiveExplorer(p, AttachmentPolicy(100, 400, 0.1), RegionSampler(p), np.random.default_rng(2))
    ex.run()
    return ex


def test_widening_adds_samples(wide_run):
    p = catalog('bimodal2d')
    vanilla = run_vanilla(p, 100, RegionSampler(p), np.random.default_rng(2))
    assert len(wide_run.dead) > len(vanilla.dead)
    assert max(d.n_live for d in wide_run.dead) > 100


def test_threshold_monotone(wide_run):
    logl = [d.logl for d in wide_run.dead]
    assert all(a <= b for a, b in zip(logl, logl[1:]))


def test_volume_replay(wide_run):
    logv = 0.0
    for d in wide_run.dead:
        if d.final:
            assert d.logv == pytest.approx(logv - log(d.n_live), abs=1e-12)
            continue
        logv += log1p(-1.0 / d.n_live)
        assert abs(d.logv - logv) < 1e-12


def test_parent_child_constraint(wide_run):
    logl = {d.id: d.logl for d in wide_run.dead}
    for d in wide_run.dead:
        if d.parent != ROOT:
            assert d.logl > logl[d.parent]
            assert d.point.birth_logl == logl[d.parent]


def test_roots_inherited(wide_run):
    by_id = {d.id: d for d in wide_run.dead}
    for d in wide_run.dead:
        if d.parent != ROOT:
            assert d.root == by_id[d.parent].root
        else:
            assert d.root == d.id


def test_immediate_termination_drains_children():
    p = catalog('gauss2d')
    # a huge frac stops right after the first removal
    ex = ReactiveExplorer(p, AttachmentPolicy(5, 5, None), PriorRejectionSampler(p), np.random.default_rng(0),
                          frac=0.999999)
    dead = ex.run()
    _, stack = build_root(p, 5, np.random.default_rng(0))
    first = dead[0]
    assert ex.termination in ('frac', 'width')
    assert all(d.parent == ROOT for d in dead if d.id < 5)
    logl = [d.logl for d in dead]
    assert logl == sorted(logl)
    assert first.logl == stack.logl.min()


def test_flat_tree_exact():
    p = flat_problem(3.7)
    ex = ReactiveExplorer(p, AttachmentPolicy(50), PriorRejectionSampler(p), np.random.default_rng(1))
    ex.run()
    assert abs(ex.logz - 3.7) < 1e-9


def test_integrator_hooks_called():
    calls = []

    class Spy:
        def open(self, root):
            calls.append(('open', root))

        def pass_node(self, logl, root):
            calls.append(('pass', root))

        def finalize(self, logls, roots):
            calls.append(('final', len(logls)))

    p = catalog('sphere-shell')
    ex = ReactiveExplorer(p, AttachmentPolicy(10, 10, None), ReferenceSampler(p), np.random.default_rng(0),
                          integrators=[Spy()])
    ex.run()
    opens = sum(1 for c in calls if c[0] == 'open')
    passes = sum(1 for c in calls if c[0] == 'pass')
    assert calls[-1] == ('final', 10)
    assert opens == passes + 10


def test_state_roundtrip_continues_identically():
    p = catalog('gauss2d')

    def make(seed):
        return ReactiveExplorer(p, AttachmentPolicy(50), RegionSampler(p), np.random.default_rng(seed))

    full = make(4)
    full.run()
    a = make(4)
    a.start()
    for _ in range(120):
        a.step()
    state, lrps_state, rng_state = a.get_state(), a.lrps.get_state(), a.rng.bit_generator.state
    b = make(999)
    b.set_state(state, a.dead)
    b.lrps.set_state(lrps_state)
    b.rng.bit_generator.state = rng_state
    b.run()
    assert [d.logw for d in b.dead] == [d.logw for d in full.dead]
