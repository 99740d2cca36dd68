"""Run orchestration: configuration, checkpointing and resume, outputs, diagnostics.

A run directory holds

* ``checkpoint.jsonl``: one JSON record per line. A header (format version,
  configuration and its hash), one ``dead`` record per removed node, a full
  ``snapshot`` of the sampler state every ``snapshot_every`` iterations, and a
  ``done`` record once the run is complete.
* ``results.json``: evidence, its uncertainty, sample counts, status.
* ``samples.csv``: weighted posterior samples (weight, logl, parameters).
* ``diagnostics.json``: insertion-rank test and sampler statistics.

Resuming restores the latest snapshot and truncates the checkpoint after it,
so a resumed run writes exactly the records an uninterrupted run would.
"""

import csv
import hashlib
import json
import logging
import os
import time
from dataclasses import asdict, dataclass
from math import inf, isfinite
from typing import Optional

import numpy as np
from scipy import stats

from .errors import CheckpointError, LRPSExhausted, ModelError, UsageError
from .integrate import DEFAULT_K, IntegratorEnsemble, combine, effective_sample_size
from .model import catalog
from .nscore import DEFAULT_FRAC, DeadRecord, LivePoint
from .region import WHOLE_PRIOR, RegionSampler
from .stepsampler import AXIS_SLICE, HIT_AND_RUN, AutoSampler, StepConfig, StepSampler
from .tree import AttachmentPolicy, ReactiveExplorer

__all__ = [
    'RunConfig', 'RankStat', 'run', 'resume', 'rank_diagnostic', 'rank_test_summary',
    'progress_report', 'Throttle', 'checkpoint_append', 'read_checkpoint', 'config_hash',
    'make_sampler', 'SAMPLERS', 'FORMAT_VERSION', 'EXIT_OK', 'EXIT_USAGE', 'EXIT_RUN',
]

logger = logging.getLogger('reactnest')

FORMAT_VERSION = 1
SAMPLERS = ('region', 'slice', 'hitandrun', 'auto')
CHECKPOINT = 'checkpoint.jsonl'
RESULTS = 'results.json'
SAMPLES = 'samples.csv'
DIAGNOSTICS = 'diagnostics.json'
MIN_RANKS = 100

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_RUN = 3


@dataclass
class RunConfig:
    """Everything that determines a run; ``seed`` fixes all randomness."""

    problem: str
    n_live: int = 400
    max_width: Optional[int] = None
    frac: float = DEFAULT_FRAC
    k_bootstrap: int = DEFAULT_K
    sampler: str = 'region'
    n_steps: Optional[int] = None
    seed: int = 1
    out: str = 'run'
    resume: bool = False
    snapshot_every: int = 100

    def __post_init__(self):
        catalog(self.problem)
        if self.n_live < 2:
            raise UsageError('n_live must be at least 2')
        if self.max_width is None:
            self.max_width = 4 * self.n_live
        if self.max_width < self.n_live:
            raise UsageError('max_width must be >= n_live')
        if not 0 < self.frac < 1:
            raise UsageError('frac must lie in (0, 1)')
        if self.k_bootstrap < 2:
            raise UsageError('k_bootstrap must be at least 2')
        if self.sampler not in SAMPLERS:
            raise UsageError('sampler must be one of %s' % ', '.join(SAMPLERS))
        if self.n_steps is not None and self.n_steps < 1:
            raise UsageError('n_steps must be at least 1')
        if self.seed < 0:
            raise UsageError('seed must be non-negative')
        if self.snapshot_every < 1:
            raise UsageError('snapshot_every must be at least 1')


def config_hash(config):
    """SHA-256 of the configuration, ignoring the output directory and resume flag."""
    d = asdict(config)
    d.pop('out')
    d.pop('resume')
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


@dataclass
class RankStat:
    rank: int
    n: int


def rank_diagnostic(ranks):
    """KS test of insertion ranks against uniformity.

    Each rank ``r`` among ``n`` is mapped to ``(r + 0.5) / n``. Returns
    ``(statistic, p_value)``, or ``(nan, nan)`` with fewer than 100 ranks.
    """
    r = np.array([(s.rank, s.n) if isinstance(s, RankStat) else tuple(s) for s in ranks], dtype=float)
    if len(r) < MIN_RANKS:
        return float('nan'), float('nan')
    r = r.reshape(-1, 2)
    if np.any(r[:, 0] < 0) or np.any(r[:, 0] >= r[:, 1]):
        raise UsageError('ranks must satisfy 0 <= rank < n')
    res = stats.kstest((r[:, 0] + 0.5) / r[:, 1], 'uniform')
    return float(res.statistic), float(res.pvalue)


def rank_test_summary(ranks):
    stat, p = rank_diagnostic(ranks)
    if not isfinite(stat):
        return dict(status='insufficient data', n_ranks=len(ranks))
    return dict(status='ok', n_ranks=len(ranks), statistic=stat, p_value=p)


def _fmt(x, spec='.4f'):
    return format(x, spec) if isfinite(x) else ('-inf' if x < 0 else ('inf' if x > 0 else 'nan'))


def progress_report(snap):
    """One status line from a dict snapshot of the run."""
    line = 'it=%d width=%d logv=%s logz=%s +- %s max_logl=%s source=%s acc=%s' % (
        snap.get('iteration', 0), snap.get('width', 0), _fmt(snap.get('logv', 0.0), '.2f'),
        _fmt(snap.get('logz', -inf)), _fmt(snap.get('logz_sigma', inf)),
        _fmt(snap.get('max_logl', -inf)), snap.get('source', '-'),
        _fmt(snap.get('acceptance', float('nan')), '.3g'))
    if snap.get('done'):
        line = 'done (%s) %s' % (snap.get('termination', '?'), line)
    return line


class Throttle:
    """Allows an action at most once per ``interval`` seconds of ``clock``."""

    def __init__(self, interval=1.0, clock=time.monotonic):
        self.interval = interval
        self.clock = clock
        self.last = None

    def ready(self):
        now = self.clock()
        if self.last is None or now - self.last >= self.interval:
            self.last = now
            return True
        return False


def make_sampler(config, problem):
    cfg = StepConfig(n_steps=config.n_steps)
    if config.sampler == 'region':
        return RegionSampler(problem)
    if config.sampler == 'slice':
        return StepSampler(problem, AXIS_SLICE, cfg)
    if config.sampler == 'hitandrun':
        return StepSampler(problem, HIT_AND_RUN, cfg)
    return AutoSampler(problem, cfg)


def _dead_event(rec):
    p = rec.point
    return dict(type='dead', id=p.serial, parent=rec.parent, root=rec.root,
                u=p.u.tolist(), v=p.v.tolist(), logl=p.logl, birth=p.birth_logl,
                n_live=rec.n_live, logv=rec.logv, logwidth=rec.logwidth, logw=rec.logw,
                final=rec.final, rank=rec.rank, rank_n=rec.rank_n, ncall=rec.ncall,
                n_children=rec.n_children)


def _dead_from_event(e):
    p = LivePoint(u=np.array(e['u'], dtype=float), v=np.array(e['v'], dtype=float), logl=e['logl'],
                  birth_logl=e['birth'], serial=e['id'])
    return DeadRecord(point=p, logv=e['logv'], logwidth=e['logwidth'], logw=e['logw'],
                      n_live=e['n_live'], parent=e['parent'], root=e['root'], final=e['final'],
                      rank=e['rank'], rank_n=e['rank_n'], ncall=e['ncall'], n_children=e['n_children'])


def checkpoint_append(sink, event, sync=False):
    """Append one record and flush it; ``sync`` also forces it to disk."""
    try:
        sink.write(json.dumps(event, separators=(',', ':')) + '\n')
        sink.flush()
        if sync:
            os.fsync(sink.fileno())
    except (OSError, ValueError) as e:
        raise CheckpointError('cannot write checkpoint: %s' % e) from e


def read_checkpoint(path):
    """Parse a checkpoint file.

    Returns ``(records, offsets)`` where ``offsets[i]`` is the byte offset
    just past record ``i``. A partial last line is ignored; a corrupt earlier
    line, a missing header or decreasing likelihoods raise
    :class:`CheckpointError`.
    """
    with open(path, 'rb') as f:
        data = f.read()
    lines = data.split(b'\n')
    records, offsets = [], []
    pos = 0
    for i, line in enumerate(lines):
        last = i == len(lines) - 1
        end = pos + len(line) + (0 if last else 1)
        if last and not line:
            break
        try:
            if last:
                # no newline: the write was cut short
                raise ValueError('unterminated record')
            rec = json.loads(line)
            if not isinstance(rec, dict) or 'type' not in rec:
                raise ValueError('not a record')
        except ValueError as e:
            if last:
                logger.warning('ignoring partial final checkpoint record')
                break
            raise CheckpointError('corrupt checkpoint record on line %d: %s' % (i + 1, e)) from None
        records.append(rec)
        offsets.append(end)
        pos = end
    if not records or records[0]['type'] != 'header':
        raise CheckpointError('checkpoint has no header')
    if records[0].get('version') != FORMAT_VERSION:
        raise CheckpointError('unsupported checkpoint version %r' % records[0].get('version'))
    prev = -inf
    for rec in records:
        if rec['type'] == 'dead':
            if rec['logl'] < prev:
                raise CheckpointError('likelihoods decrease at dead node %d' % rec['id'])
            prev = rec['logl']
    return records, offsets


class _Run:
    """Wires the explorer, sampler, ensemble and checkpoint together."""

    def __init__(self, config):
        self.config = config
        self.problem = catalog(config.problem)
        self.rng = np.random.default_rng(config.seed)
        # separate stream so the ensemble does not perturb the exploration
        ens_rng = np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(1,)))
        self.ensemble = IntegratorEnsemble(config.n_live, k=config.k_bootstrap, rng=ens_rng)
        self.lrps = make_sampler(config, self.problem)
        policy = AttachmentPolicy(min_width=config.n_live, max_width=config.max_width)
        self.explorer = ReactiveExplorer(self.problem, policy, self.lrps, self.rng, frac=config.frac,
                                         integrators=[self.ensemble], on_dead=self._on_dead)
        self.sink = None
        self.throttle = Throttle()

    def _on_dead(self, rec):
        checkpoint_append(self.sink, _dead_event(rec))

    def snapshot(self):
        return dict(type='snapshot', iteration=self.explorer.iteration,
                    explorer=self.explorer.get_state(), rng=self.rng.bit_generator.state,
                    lrps=self.lrps.get_state(), ensemble=self.ensemble.get_state())

    def restore(self, snap, dead):
        self.explorer.set_state(snap['explorer'], dead)
        self.rng.bit_generator.state = snap['rng']
        self.lrps.set_state(snap['lrps'])
        self.ensemble.set_state(snap['ensemble'], [d.logw for d in dead])

    def status(self, done=False):
        ex = self.explorer
        finite = self.ensemble.logz[np.isfinite(self.ensemble.logz)]
        lrps = getattr(self.lrps, 'active', self.lrps)
        if isinstance(lrps, RegionSampler):
            source = lrps.region.source if lrps.region is not None else WHOLE_PRIOR
        else:
            source = lrps.scheme
        return dict(
            iteration=ex.iteration, width=ex.stack.n, logv=ex.logv, logz=ex.logz,
            logz_sigma=float(np.std(finite, ddof=1)) if len(finite) > 1 else inf,
            max_logl=float(ex.stack.logl.max()) if ex.stack.n else -inf,
            source=source,
            acceptance=lrps.acceptance(), done=done, termination=ex.termination)

    def report(self, force=False):
        if force or self.throttle.ready():
            logger.info(progress_report(self.status(done=self.explorer.finished)))

    def loop(self, interrupt_after=None):
        """Iterate to completion; returns False if interrupted."""
        cfg = self.config
        ex = self.explorer
        while True:
            if interrupt_after is not None and ex.iteration >= interrupt_after:
                return False
            if not ex.step():
                return True
            if ex.iteration % cfg.snapshot_every == 0:
                checkpoint_append(self.sink, self.snapshot(), sync=True)
            self.report()


def _summary(run_obj, status):
    ex = run_obj.explorer
    logz, sigma, weights = combine(run_obj.ensemble)
    return dict(type='done', status=status, termination=ex.termination, logz=logz,
                logz_sigma=sigma, logz_samples=run_obj.ensemble.logz.tolist(),
                n_iter=ex.iteration, ncall=ex.ncall)


def _sampler_stats(lrps):
    if isinstance(lrps, AutoSampler):
        out = dict(region=lrps.region, walker=lrps.walker)
    else:
        out = dict(sampler=lrps)
    stats_ = {}
    for name, s in out.items():
        entry = dict(acceptance=s.acceptance())
        if isinstance(s, RegionSampler):
            entry.update(n_refits=s.n_refits, source_counts=s.source_counts)
        else:
            entry.update(scheme=s.scheme, scale=s.scale)
        stats_[name] = entry
    return stats_


def _write_outputs(out, config, problem, dead, summary, sampler_stats):
    logw = np.array([d.logw for d in dead])
    weights = np.exp(logw - summary['logz'])
    weights /= weights.sum()
    ranks = [RankStat(d.rank, d.rank_n) for d in dead if d.rank >= 0]
    rank_test = rank_test_summary(ranks)
    results = dict(
        problem=config.problem, logz=summary['logz'], logz_sigma=summary['logz_sigma'],
        ref_logz=problem.ref_logz, ess=effective_sample_size(weights), n_samples=len(dead),
        n_iter=summary['n_iter'], ncall=summary['ncall'], status=summary['status'],
        termination=summary['termination'], rank_test=rank_test,
    )
    with open(os.path.join(out, RESULTS), 'w') as f:
        json.dump(results, f, indent=2, sort_keys=True)
        f.write('\n')
    with open(os.path.join(out, SAMPLES), 'w', newline='') as f:
        w = csv.writer(f)
        w.writerow(['weight', 'logl'] + list(problem.param_names))
        for wt, d in zip(weights, dead):
            w.writerow([repr(float(wt)), repr(d.logl)] + [repr(float(x)) for x in d.point.v])
    widths = [d.n_live for d in dead]
    diagnostics = dict(
        rank_test=rank_test, logz_samples=summary['logz_samples'], sampler=sampler_stats,
        width_min=int(min(widths)) if widths else 0, width_max=int(max(widths)) if widths else 0,
    )
    with open(os.path.join(out, DIAGNOSTICS), 'w') as f:
        json.dump(diagnostics, f, indent=2, sort_keys=True)
        f.write('\n')
    return results


def _header(config):
    return dict(type='header', version=FORMAT_VERSION, config=asdict(config) | dict(out=None, resume=False),
                config_hash=config_hash(config))


def resume(config, path):
    """Rebuild a run from the checkpoint at ``path``.

    Returns ``(run, records, done_record)``. The run is positioned at the
    latest snapshot (or freshly started if there is none) and the file is
    truncated after that snapshot.
    """
    records, offsets = read_checkpoint(path)
    if records[0]['config_hash'] != config_hash(config):
        raise CheckpointError('checkpoint was written with a different configuration; '
                              'refusing to resume (start a new output directory instead)')
    r = _Run(config)
    done = next((rec for rec in records if rec['type'] == 'done'), None)
    if done is not None:
        return r, records, done
    last = max((i for i, rec in enumerate(records) if rec['type'] == 'snapshot'), default=None)
    if last is None:
        with open(path, 'r+b') as f:
            f.truncate(offsets[0])
        return r, records[:1], None
    dead = [_dead_from_event(rec) for rec in records[:last] if rec['type'] == 'dead']
    r.restore(records[last], dead)
    with open(path, 'r+b') as f:
        f.truncate(offsets[last])
    return r, records[:last + 1], None


def run(config, interrupt_after=None):
    """Execute (or resume) a run and write its outputs.

    Returns the results dict, or ``None`` when stopped early by
    ``interrupt_after`` (a simulated kill after that many iterations; no
    outputs are written). Raises :class:`UsageError` for bad configuration
    and :class:`CheckpointError` for unusable checkpoints.
    """
    os.makedirs(config.out, exist_ok=True)
    path = os.path.join(config.out, CHECKPOINT)
    fresh = True
    if config.resume and os.path.exists(path):
        r, records, done = resume(config, path)
        if done is not None:
            dead = [_dead_from_event(rec) for rec in records if rec['type'] == 'dead']
            logger.info('run already complete; re-emitting outputs')
            return _write_outputs(config.out, config, r.problem, dead, done, done.get('sampler', {}))
        fresh = len(records) == 1
    else:
        r = _Run(config)
        with open(path, 'w') as f:
            checkpoint_append(f, _header(config))
    status = 'ok'
    with open(path, 'a') as sink:
        r.sink = sink
        try:
            if fresh:
                r.explorer.start()
                checkpoint_append(sink, r.snapshot(), sync=True)
            if not r.loop(interrupt_after):
                return None
        except (LRPSExhausted, ModelError) as e:
            logger.error('run stopped: %s', e)
            r.explorer.termination = 'lrps-exhausted' if isinstance(e, LRPSExhausted) else 'model-error'
            if not r.explorer.finished:
                r.explorer.finish()
            status = 'partial'
        summary = _summary(r, status)
        summary['sampler'] = _sampler_stats(r.lrps)
        checkpoint_append(sink, summary, sync=True)
    r.report(force=True)
    return _write_outputs(config.out, config, r.problem, r.explorer.dead, summary, summary['sampler'])


def diagnose(out):
    """Rank test on the dead records stored in a run directory."""
    records, _ = read_checkpoint(os.path.join(out, CHECKPOINT))
    ranks = [RankStat(rec['rank'], rec['rank_n']) for rec in records
             if rec['type'] == 'dead' and rec['rank'] >= 0]
    return rank_test_summary(ranks)
