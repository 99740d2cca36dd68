"""Nested sampling with reactive tree exploration, bootstrapped evidence
uncertainties and region-based or random-walk constrained prior sampling."""

from .errors import CheckpointError, LRPSExhausted, ModelError, RegionStale, UsageError, WalkError
from .integrate import IntegratorEnsemble, combine
from .model import Problem, catalog, flat_problem
from .nscore import ReferenceSampler, run_vanilla
from .region import RegionSampler
from .runio import RunConfig, rank_diagnostic, run
from .stepsampler import AutoSampler, StepConfig, StepSampler
from .tree import AttachmentPolicy, ReactiveExplorer, breadth_first_run

__version__ = '0.1.0'

__all__ = [
    'Problem', 'catalog', 'flat_problem', 'run_vanilla', 'ReferenceSampler',
    'AttachmentPolicy', 'ReactiveExplorer', 'breadth_first_run', 'IntegratorEnsemble', 'combine',
    'RegionSampler', 'StepSampler', 'StepConfig', 'AutoSampler', 'RunConfig', 'run',
    'rank_diagnostic', 'UsageError', 'ModelError', 'LRPSExhausted', 'RegionStale', 'WalkError',
    'CheckpointError',
]
