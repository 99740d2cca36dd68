"""Command-line interface: ``reactnest run|diagnose|problems``."""

import argparse
import json
import logging
import sys

from .errors import CheckpointError, ModelError, UsageError
from .model import CATALOG_NAMES, catalog
from .runio import EXIT_OK, EXIT_RUN, EXIT_USAGE, SAMPLERS, RunConfig, diagnose, run

__all__ = ['main', 'build_parser']


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser():
    parser = _Parser(prog='reactnest', description='Nested sampling with reactive tree exploration.')
    parser.add_argument('-q', '--quiet', action='store_true', help='only report warnings and errors')
    sub = parser.add_subparsers(dest='command', required=True, parser_class=_Parser)

    p = sub.add_parser('run', help='run (or resume) a benchmark problem')
    p.add_argument('--problem', required=True, help='catalog name; see `reactnest problems`')
    p.add_argument('--n-live', type=int, default=400, help='minimum number of live points')
    p.add_argument('--max-width', type=int, default=None, help='maximum number of live points (default 4 x n-live)')
    p.add_argument('--frac', type=float, default=0.01, help='termination fraction of the evidence')
    p.add_argument('--k-bootstrap', type=int, default=30, help='number of bootstrapped integrators')
    p.add_argument('--sampler', choices=SAMPLERS, default='region')
    p.add_argument('--n-steps', type=int, default=None, help='walk length for step samplers (default 2d)')
    p.add_argument('--seed', type=int, default=1)
    p.add_argument('--out', default='run', help='output directory')
    p.add_argument('--resume', action='store_true', help='continue from the checkpoint in --out')

    p = sub.add_parser('diagnose', help='insertion-rank test on a stored run')
    p.add_argument('--out', required=True)

    sub.add_parser('problems', help='list the built-in problems')
    return parser


def _run(args):
    config = RunConfig(problem=args.problem, n_live=args.n_live, max_width=args.max_width,
                       frac=args.frac, k_bootstrap=args.k_bootstrap, sampler=args.sampler,
                       n_steps=args.n_steps, seed=args.seed, out=args.out, resume=args.resume)
    results = run(config)
    print(json.dumps(results, indent=2, sort_keys=True))
    return EXIT_OK if results['status'] == 'ok' else EXIT_RUN


def _diagnose(args):
    summary = diagnose(args.out)
    if summary['status'] == 'ok':
        print('insertion-rank KS test: D = %.4g, p = %.4g (%d ranks)' % (
            summary['statistic'], summary['p_value'], summary['n_ranks']))
    else:
        print('insertion-rank KS test: insufficient data (%d ranks)' % summary['n_ranks'])
    return EXIT_OK


def _problems(args):
    for name in CATALOG_NAMES:
        p = catalog(name)
        print('%-14s d=%-3d ref_logz=%s' % (name, p.d, '%.6f' % p.ref_logz if p.ref_logz is not None else '-'))
    return EXIT_OK


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print('reactnest: error: %s' % e, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format='%(message)s', stream=sys.stderr)
    try:
        return {'run': _run, 'diagnose': _diagnose, 'problems': _problems}[args.command](args)
    except UsageError as e:
        print('reactnest: error: %s' % e, file=sys.stderr)
        return EXIT_USAGE
    except (CheckpointError, ModelError, OSError) as e:
        print('reactnest: run failed: %s' % e, file=sys.stderr)
        return EXIT_RUN


def _console():
    sys.exit(main())
