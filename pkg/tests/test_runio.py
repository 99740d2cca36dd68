import json
import logging
import os
from math import inf, nan

import numpy as np
import pytest
from scipy import stats

from reactnest import runio
from reactnest.errors import CheckpointError, LRPSExhausted, UsageError
from reactnest.model import catalog
from reactnest.region import RegionSampler
from reactnest.runio import (
    CHECKPOINT, DIAGNOSTICS, RESULTS, SAMPLES, RankStat, RunConfig, Throttle, checkpoint_append,
    config_hash, diagnose, progress_report, rank_diagnostic, rank_test_summary, read_checkpoint, run,
)

OUTPUTS = (CHECKPOINT, RESULTS, SAMPLES, DIAGNOSTICS)


def small(tmp_path, name='a', **kwargs):
    kwargs.setdefault('problem', 'gauss2d')
    kwargs.setdefault('n_live', 50)
    kwargs.setdefault('k_bootstrap', 8)
    kwargs.setdefault('snapshot_every', 20)
    return RunConfig(out=str(tmp_path / name), **kwargs)


def read_bytes(out):
    return {name: open(os.path.join(out, name), 'rb').read() for name in OUTPUTS}


def records(cfg):
    return read_checkpoint(os.path.join(cfg.out, CHECKPOINT))[0]


class TestRunConfig:
    def test_defaults(self):
        cfg = RunConfig('gauss2d')
        assert (cfg.n_live, cfg.max_width, cfg.frac, cfg.k_bootstrap, cfg.sampler, cfg.seed) == \
            (400, 1600, 0.01, 30, 'region', 1)

    @pytest.mark.parametrize('kwargs', [
        dict(problem='nope'), dict(n_live=1), dict(max_width=10, n_live=20), dict(frac=0.0), dict(frac=1.0),
        dict(k_bootstrap=1), dict(sampler='nuts'), dict(n_steps=0), dict(seed=-1), dict(snapshot_every=0),
    ])
    def test_invalid(self, kwargs):
        kwargs.setdefault('problem', 'gauss2d')
        with pytest.raises(UsageError):
            RunConfig(**kwargs)

    def test_hash_ignores_out_and_resume(self):
        a = RunConfig('gauss2d', out='x')
        b = RunConfig('gauss2d', out='y', resume=True)
        assert config_hash(a) == config_hash(b)
        assert config_hash(a) != config_hash(RunConfig('gauss2d', n_live=401))


class TestRankDiagnostic:
    def test_uniform_ranks_calibrated(self):
        rng = np.random.default_rng(0)
        passes = 0
        for _ in range(100):
            ranks = [RankStat(int(r), 400) for r in rng.integers(0, 400, 10000)]
            passes += rank_diagnostic(ranks)[1] > 0.01
        # binomial(100, 0.99): P(X < 95) is below 1e-3
        assert passes >= 95

    def test_stuck_sampler(self):
        stat, p = rank_diagnostic([RankStat(0, 400)] * 1000)
        assert p < 1e-6

    @pytest.mark.parametrize('n, count', [(400, 400), (400, 4000), (10, 1000)])
    def test_grid_bound(self, n, count):
        ranks = [RankStat(i % n, n) for i in range(count)]
        stat, _ = rank_diagnostic(ranks)
        assert stat <= 1 / (2 * count) + 1 / n

    def test_insufficient(self):
        stat, p = rank_diagnostic([RankStat(1, 10)] * 99)
        assert np.isnan(stat) and np.isnan(p)
        assert rank_test_summary([RankStat(1, 10)] * 99)['status'] == 'insufficient data'

    def test_tuples_accepted(self):
        assert rank_diagnostic([(i % 7, 7) for i in range(700)]) == \
            rank_diagnostic([RankStat(i % 7, 7) for i in range(700)])

    def test_out_of_range(self):
        with pytest.raises(UsageError):
            rank_diagnostic([RankStat(5, 5)] * 200)

    def test_matches_direct_ks(self):
        rng = np.random.default_rng(1)
        r = rng.integers(0, 50, 300)
        ref = stats.kstest((r + 0.5) / 50, 'uniform')
        assert rank_diagnostic([RankStat(int(x), 50) for x in r]) == (ref.statistic, ref.pvalue)


class TestProgress:
    def test_initial_line(self):
        line = progress_report(dict(iteration=0, width=400, logv=0.0, logz=-inf, logz_sigma=inf,
                                    max_logl=-1.0, source='whole-prior', acceptance=nan))
        assert 'it=0' in line and 'logv=0.00' in line and 'logz=-inf' in line
        assert '\n' not in line

    def test_done_flag(self):
        line = progress_report(dict(iteration=10, done=True, termination='frac'))
        assert line.startswith('done (frac)')

    def test_throttle(self):
        now = [0.0]
        t = Throttle(1.0, clock=lambda: now[0])
        emitted = 0
        for i in range(10000):
            now[0] = i * 1e-3
            emitted += t.ready()
        assert emitted == 10

    def test_run_emits_throttled_lines(self, tmp_path, caplog):
        with caplog.at_level(logging.INFO, logger='reactnest'):
            run(small(tmp_path))
        lines = [r.getMessage() for r in caplog.records if r.name == 'reactnest']
        assert lines[-1].startswith('done (')
        assert len(lines) <= 5


class TestCheckpoint:
    def test_header_and_start_snapshot(self, tmp_path):
        cfg = small(tmp_path)
        assert run(cfg, interrupt_after=0) is None
        recs = records(cfg)
        assert [r['type'] for r in recs] == ['header', 'snapshot']
        assert recs[0]['version'] == 1 and recs[0]['config_hash'] == config_hash(cfg)
        assert recs[1]['iteration'] == 0

    def test_ten_iterations(self, tmp_path):
        cfg = small(tmp_path, snapshot_every=5)
        run(cfg, interrupt_after=10)
        kinds = [r['type'] for r in records(cfg)]
        assert kinds.count('header') == 1 and kinds.count('dead') == 10
        # start snapshot plus one every five iterations
        assert kinds.count('snapshot') == 3

    def test_append_is_one_line(self, tmp_path):
        path = tmp_path / 'c.jsonl'
        with open(path, 'w') as f:
            checkpoint_append(f, dict(type='header', version=1))
            checkpoint_append(f, dict(type='dead', logl=1.0, id=0), sync=True)
        assert path.read_text().count('\n') == 2

    def test_append_failure(self, tmp_path):
        f = open(tmp_path / 'c.jsonl', 'w')
        f.close()
        with pytest.raises(CheckpointError):
            checkpoint_append(f, dict(type='x'))

    def test_partial_final_line_skipped(self, tmp_path):
        cfg = small(tmp_path)
        run(cfg, interrupt_after=30)
        path = os.path.join(cfg.out, CHECKPOINT)
        n = len(records(cfg))
        with open(path, 'a') as f:
            f.write('{"type": "dead", "lo')
        assert len(records(cfg)) == n

    def test_corrupt_middle_line_refused(self, tmp_path):
        cfg = small(tmp_path)
        run(cfg, interrupt_after=30)
        path = os.path.join(cfg.out, CHECKPOINT)
        lines = open(path).read().splitlines(keepends=True)
        lines[3] = '{not json\n'
        open(path, 'w').write(''.join(lines))
        with pytest.raises(CheckpointError, match='line 4'):
            read_checkpoint(path)

    def test_decreasing_logl_refused(self, tmp_path):
        cfg = small(tmp_path)
        run(cfg, interrupt_after=30)
        path = os.path.join(cfg.out, CHECKPOINT)
        lines = open(path).read().splitlines(keepends=True)
        i = max(i for i, line in enumerate(lines) if '"type":"dead"' in line)
        rec = json.loads(lines[i])
        rec['logl'] = -1e300
        lines[i] = json.dumps(rec) + '\n'
        open(path, 'w').write(''.join(lines))
        with pytest.raises(CheckpointError, match='decrease'):
            read_checkpoint(path)

    def test_missing_header(self, tmp_path):
        path = tmp_path / 'c.jsonl'
        path.write_text('{"type":"dead","logl":0}\n')
        with pytest.raises(CheckpointError):
            read_checkpoint(path)

    def test_replay_matches_dead_sequence(self, tmp_path):
        cfg = small(tmp_path)
        run(cfg)
        dead = [r for r in records(cfg) if r['type'] == 'dead']
        logv = 0.0
        for r in dead:
            if r['final']:
                assert abs(r['logv'] - (logv - np.log(r['n_live']))) < 1e-12
                continue
            logv += np.log1p(-1.0 / r['n_live'])
            assert abs(r['logv'] - logv) < 1e-12
        logl = [r['logl'] for r in dead]
        assert logl == sorted(logl)


class TestRun:
    def test_results_files(self, tmp_path):
        cfg = small(tmp_path)
        res = run(cfg)
        assert res['status'] == 'ok'
        on_disk = json.load(open(os.path.join(cfg.out, RESULTS)))
        for key in ('logz', 'logz_sigma', 'ess', 'n_samples'):
            assert on_disk[key] == res[key]
        rows = open(os.path.join(cfg.out, SAMPLES)).read().splitlines()
        assert rows[0] == 'weight,logl,' + ','.join(catalog('gauss2d').param_names)
        assert len(rows) == res['n_samples'] + 1
        w = np.array([float(r.split(',')[0]) for r in rows[1:]])
        assert w.sum() == pytest.approx(1.0, abs=1e-12)
        diag = json.load(open(os.path.join(cfg.out, DIAGNOSTICS)))
        assert diag['rank_test']['status'] == 'ok'
        assert len(diag['logz_samples']) == cfg.k_bootstrap

    def test_gauss2d_default_run(self, tmp_path):
        res = run(RunConfig('gauss2d', n_live=400, seed=1, out=str(tmp_path / 'g')))
        assert abs(res['logz'] - catalog('gauss2d').ref_logz) < 3 * res['logz_sigma']

    def test_determinism(self, tmp_path):
        run(small(tmp_path, 'a'))
        run(small(tmp_path, 'b'))
        assert read_bytes(str(tmp_path / 'a')) == read_bytes(str(tmp_path / 'b'))

    def test_seed_matters(self, tmp_path):
        a = run(small(tmp_path, 'a', seed=1))
        b = run(small(tmp_path, 'b', seed=2))
        assert a['logz'] != b['logz']

    @pytest.mark.parametrize('sampler', ['slice', 'hitandrun', 'auto'])
    def test_other_samplers(self, tmp_path, sampler):
        res = run(small(tmp_path, problem='gauss2d', sampler=sampler, n_steps=4))
        assert res['status'] == 'ok'
        diag = json.load(open(os.path.join(str(tmp_path / 'a'), DIAGNOSTICS)))
        assert set(diag['sampler']) == ({'region', 'walker'} if sampler == 'auto' else {'sampler'})

    def test_exhaustion_gives_partial(self, tmp_path, monkeypatch):
        class Failing(RegionSampler):
            def sample(self, live, threshold, rng):
                if self.calls >= 40:
                    raise LRPSExhausted('gave up')
                return super().sample(live, threshold, rng)

        monkeypatch.setattr(runio, 'make_sampler', lambda config, problem: Failing(problem))
        cfg = small(tmp_path)
        res = run(cfg)
        assert res['status'] == 'partial' and res['termination'] == 'lrps-exhausted'
        assert res['n_samples'] > 40
        assert records(cfg)[-1]['status'] == 'partial'


class TestResume:
    @pytest.mark.parametrize('stop', [0, 1, 19, 20, 57])
    def test_byte_identical(self, tmp_path, stop):
        ref = small(tmp_path, 'ref')
        run(ref)
        cfg = small(tmp_path, 'x')
        assert run(cfg, interrupt_after=stop) is None
        run(RunConfig(**{**cfg.__dict__, 'resume': True}))
        assert read_bytes(cfg.out) == read_bytes(ref.out)

    def test_partial_line_then_resume(self, tmp_path):
        ref = small(tmp_path, 'ref')
        run(ref)
        cfg = small(tmp_path, 'x')
        run(cfg, interrupt_after=45)
        with open(os.path.join(cfg.out, CHECKPOINT), 'a') as f:
            f.write('{"type":"dead","id":')
        run(RunConfig(**{**cfg.__dict__, 'resume': True}))
        assert read_bytes(cfg.out) == read_bytes(ref.out)

    def test_changed_config_refused(self, tmp_path):
        cfg = small(tmp_path)
        run(cfg, interrupt_after=10)
        changed = RunConfig(**{**cfg.__dict__, 'n_live': 60, 'max_width': None, 'resume': True})
        with pytest.raises(CheckpointError, match='different configuration'):
            run(changed)

    def test_completed_run_reemits(self, tmp_path):
        cfg = small(tmp_path)
        first = run(cfg)
        before = read_bytes(cfg.out)
        os.remove(os.path.join(cfg.out, RESULTS))
        again = run(RunConfig(**{**cfg.__dict__, 'resume': True}))
        assert again == first
        assert read_bytes(cfg.out) == before

    def test_resume_without_checkpoint_starts_fresh(self, tmp_path):
        ref = small(tmp_path, 'ref')
        run(ref)
        cfg = small(tmp_path, 'x', resume=True)
        run(cfg)
        assert read_bytes(cfg.out) == read_bytes(ref.out)


def test_diagnose_matches_results(tmp_path):
    cfg = small(tmp_path)
    res = run(cfg)
    assert diagnose(cfg.out) == res['rank_test']
