#!/usr/bin/env python3
"""
loract - Command Line Interface

This module provides the main CLI entry point for the loract tool.
"""

import argparse
import sys
import time
from dataclasses import dataclass
from typing import Any, Dict, List, Optional

import numpy as np
from pydantic import BaseModel

from . import __version__
from .bounds import run_bound_suite
from .compress import CompressionPolicy, kept_ratio, parse_ratio, singular_spectrum
from .config import CHECK_ALIASES, CHECKS, LoractConfig
from .decompose import DecomposeMethod, MethodKind, approx_error, decompose, median_wall_times
from .errors import ConfigError, LoractError, TrainingDiverged
from .file_ops import FileOperations, read_matrix_fixture
from .linalg import SeededRng, as_matrix, resolve_dtype
from .logger import get_logger
from .synthetic import exact_rank, low_rank_plus_noise
from .transformer import STRATEGIES, build_model, build_optimizer, compute_gradients, make_task, train_loop
from .verify import run_gradcheck

DEFAULT_FRACTIONS = (0.5, 0.6, 0.7, 0.8, 0.9, 0.95, 0.99, 1.0)
DEFAULT_BATCHES = (1, 2, 4, 8, 16)
DEFAULT_SEQ_LENS = (4, 8, 16, 32)
TIMING_COLUMNS = ('wall_ns',)


class ReportMetadata(BaseModel):
    tool_version: str
    command: str
    seed: int
    config_hash: str
    wall_time: float
    status: str
    error: Optional[str] = None
    volatile_columns: List[str] = []


@dataclass
class RunContext:
    """Everything a handler needs: parsed args, validated config, output sinks."""

    args: argparse.Namespace
    config: Any
    file_ops: FileOperations
    logger: Any
    threads: int
    started: float

    @property
    def formats(self):
        return tuple(self.config.output.formats)

    def emit(self, name, rows, status='ok', error=None, volatile_columns=()):
        """
        Write one report with the metadata header and config echo.

        `volatile_columns` names row columns that vary between identical runs.
        """
        metadata = ReportMetadata(
            tool_version=__version__,
            command=self.args.command,
            seed=self.config.seed,
            config_hash=self.config.config_hash(),
            wall_time=round(time.perf_counter() - self.started, 6),
            status=status,
            error=error,
            volatile_columns=list(volatile_columns),
        )
        return self.file_ops.write_report(self.config.output.dir, name, rows,
                                          metadata=metadata.model_dump(),
                                          config=self.config.model_dump(mode='json'),
                                          formats=self.formats)


def _common_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', '-c', help='TOML run configuration')
    common.add_argument('--seed', type=int, help='Root seed (overrides config and LORACT_SEED)')
    common.add_argument('--out', help='Output directory')
    common.add_argument('--format', choices=['csv', 'json', 'both'], help='Report format')
    common.add_argument('--verbose', '-v', action='store_true', help='Enable verbose logging')
    common.add_argument('--log-file', help='Also log to this file')
    return common


def _policy_parser():
    policy = argparse.ArgumentParser(add_help=False)
    policy.add_argument('--method', choices=[m.value for m in MethodKind], help='Decomposition method')
    policy.add_argument('--l', type=int, help='Test-matrix width (default l = k)')
    policy.add_argument('--t', type=int, help='Power iterations')
    return policy


def _check_name(value):
    """Bound check name, accepting the numeric aliases."""
    return CHECK_ALIASES.get(value, value)


def _matrix_source(parser):
    parser.add_argument('--input', help='LRMX or headerless CSV fixture (default: synthetic)')
    parser.add_argument('--rows', type=int, default=128, help='Synthetic rows')
    parser.add_argument('--cols', type=int, default=64, help='Synthetic columns')
    parser.add_argument('--rank', type=int, default=8, help='Synthetic dominant rank')
    parser.add_argument('--noise', type=float, default=0.0,
                        help='Flat tail singular value; 0 gives an exactly low-rank matrix')


def create_parser():
    """Create and configure the argument parser."""
    parser = argparse.ArgumentParser(
        prog='loract',
        description='loract - low-rank compression of saved activations, with verification harnesses',
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  loract decompose --rows 256 --cols 128 --rank 8 --k 4 8 16
  loract spectrum --source model --out runs/spectrum
  loract gradcheck --config run.toml
  loract train --ratio exact 1 1/2 1/4 1/8 --steps 300
  loract bounds --theorem deterministic --trials 1000
  loract bounds --theorem 3.3 3.4
  loract memsweep --ratio 1/8
        """
    )
    parser.add_argument('--version', action='version', version=f"loract {__version__}")
    common = _common_parser()
    policy = _policy_parser()
    subparsers = parser.add_subparsers(dest='command', help='Available commands')

    decompose_parser = subparsers.add_parser(
        'decompose', parents=[common, policy],
        help='Compare the four decomposition methods over a rank grid'
    )
    _matrix_source(decompose_parser)
    decompose_parser.add_argument('--k', type=int, nargs='+', help='Rank grid (default 1 2 4 8 16)')
    decompose_parser.add_argument('--repeats', type=int, default=9, help='Timing repeats per method (median reported)')

    spectrum_parser = subparsers.add_parser(
        'spectrum', parents=[common],
        help='Singular spectrum and kept-ratio sweep'
    )
    _matrix_source(spectrum_parser)
    spectrum_parser.add_argument('--source', choices=['matrix', 'model'], default='matrix',
                                 help='Analyze a matrix, or the first pre-norm activation of the toy model')
    spectrum_parser.add_argument('--fractions', type=float, nargs='+', help='Energy fractions')
    spectrum_parser.add_argument('--squared', action='store_true', help='Use squared singular values as energy')

    gradcheck_parser = subparsers.add_parser(
        'gradcheck', parents=[common, policy],
        help='Run the op-level and model-level gradient oracles'
    )
    gradcheck_parser.add_argument('--ratio', help='Compression ratio whose deviation is reported')
    gradcheck_parser.add_argument('--instances', type=int, default=100, help='Norm-equivalence instances')
    gradcheck_parser.add_argument('--mutate', action='store_true',
                                  help='Corrupt the RMSNorm-from-output backward; checks must then fail')

    train_parser = subparsers.add_parser(
        'train', parents=[common, policy],
        help='Toy LoRA fine-tuning under one or more compression ratios'
    )
    train_parser.add_argument('--ratio', nargs='+', help="Ratios to sweep; 'exact' disables compression")
    train_parser.add_argument('--steps', type=int, help='Optimization steps')
    train_parser.add_argument('--strategy', choices=list(STRATEGIES), help='Activation storage strategy')
    train_parser.add_argument('--shadow', action='store_true', help='Record gradient error against exact')

    bounds_parser = subparsers.add_parser(
        'bounds', parents=[common, policy],
        help='Run the error-bound verification suite'
    )
    bounds_parser.add_argument('--theorem', nargs='+', type=_check_name, choices=list(CHECKS),
                               help=f"Checks to run; aliases {', '.join(CHECK_ALIASES)}")
    bounds_parser.add_argument('--trials', type=int, help='Monte Carlo trials / deterministic instances')

    memsweep_parser = subparsers.add_parser(
        'memsweep', parents=[common, policy],
        help='Activation memory over batch size and sequence length'
    )
    memsweep_parser.add_argument('--ratio', help='Compression ratio of the compressed runs')
    memsweep_parser.add_argument('--batches', type=int, nargs='+', help='Batch sizes')
    memsweep_parser.add_argument('--seq-lens', type=int, nargs='+', help='Sequence lengths')

    return parser


def cli_overrides(args):
    """Nested config overrides from parsed flags (unset flags are skipped)."""
    overrides: Dict[str, Dict[str, Any]] = {}

    def put(section, key, value):
        if value is not None:
            if section is None:
                overrides[key] = value
            else:
                overrides.setdefault(section, {})[key] = value

    put(None, 'seed', getattr(args, 'seed', None))
    put('output', 'dir', getattr(args, 'out', None))
    fmt = getattr(args, 'format', None)
    if fmt:
        put('output', 'formats', ['csv', 'json'] if fmt == 'both' else [fmt])
    put('policy', 'method', getattr(args, 'method', None))
    put('policy', 'l', getattr(args, 'l', None))
    put('policy', 't', getattr(args, 't', None))
    ratio = getattr(args, 'ratio', None)
    if isinstance(ratio, str):
        put('policy', 'ratio', ratio)
    put('task', 'steps', getattr(args, 'steps', None))
    put('task', 'strategy', getattr(args, 'strategy', None))
    if getattr(args, 'shadow', False):
        put('task', 'shadow', True)
    put('bounds', 'checks', getattr(args, 'theorem', None))
    put('bounds', 'trials', getattr(args, 'trials', None))
    return overrides


def load_matrix(args, rng):
    """Fixture from --input, else a synthetic matrix from --rows/--cols/--rank/--noise."""
    if args.input:
        return as_matrix(read_matrix_fixture(args.input), args.input).astype(np.float64)
    if args.noise > 0:
        return low_rank_plus_noise(rng, args.rows, args.cols, args.rank, tail=args.noise)
    return exact_rank(rng, args.rows, args.cols, args.rank)


def _method_for(kind, k, l, t, shape):
    """Method parameters valid for a k x (m, n) cell."""
    m, n = shape
    l = max(k, l or k)
    if kind is MethodKind.TSVD:
        return DecomposeMethod.truncated_svd()
    if kind is MethodKind.RSVD:
        return DecomposeMethod.rsvd(min(l, m, n), t)
    if kind is MethodKind.SAMPLED:
        return DecomposeMethod.sampled_ortho(min(l, m), t)
    return DecomposeMethod.random_projection(min(l, m))


def _log_sampling_speed(logger, k, methods, walls):
    """Compare sampled_ortho and rsvd wall time when both ran at equal (l, t)."""
    sampled, randomized = methods.get(MethodKind.SAMPLED.value), methods.get(MethodKind.RSVD.value)
    if sampled is None or randomized is None:
        return
    if (sampled.width(k), sampled.t) != (randomized.width(k), randomized.t):
        return
    ratio = walls[MethodKind.SAMPLED.value] / max(1, walls[MethodKind.RSVD.value])
    if ratio > 1.0:
        logger.warning(f"k={k}: sampled_ortho took {ratio:.2f}x the rsvd wall time")
    else:
        logger.info(f"k={k}: sampled_ortho at {ratio:.2f}x the rsvd wall time")


def handle_decompose(ctx):
    """Handle the decompose command."""
    args = ctx.args
    root = SeededRng(ctx.config.seed).child('decompose')
    A = load_matrix(args, root.child('matrix'))
    p = min(A.shape)
    ks = sorted({k for k in (args.k or [1, 2, 4, 8, 16]) if 1 <= k <= p})
    if not ks:
        raise ConfigError(f"no rank in the grid fits a {A.shape[0]}x{A.shape[1]} matrix")
    kinds = [MethodKind(args.method)] if args.method else list(MethodKind)
    if MethodKind.TSVD not in kinds:
        kinds.insert(0, MethodKind.TSVD)
    t = ctx.config.policy.t
    ctx.logger.info(f"Decomposing {A.shape[0]}x{A.shape[1]} matrix, k in {ks}")

    rows, failures = [], 0
    for k in ks:
        methods = {kind.value: _method_for(kind, k, ctx.config.policy.l, t, A.shape) for kind in kinds}
        walls = median_wall_times(A, k, methods, root.child(f"timing-{k}"), max(1, args.repeats))
        cell = []
        for kind in kinds:
            method = methods[kind.value]
            factor = decompose(A, k, method, root.child(f"{kind.value}-{k}"))
            cell.append({
                'rank': factor.k,
                'method': kind.value, 'k': k, 'l': method.width(k), 't': method.t,
                'spectral_err': approx_error(A, factor, 'spectral'),
                'frob_err': approx_error(A, factor, 'frobenius'),
                'wall_ns': walls[kind.value],
            })
        _log_sampling_speed(ctx.logger, k, methods, walls)
        best = cell[0]
        scale = 1e-12 * max(1.0, float(np.max(np.abs(A))))
        for row in cell:
            # only rank <= k estimators are bounded by the truncated SVD
            within = (best['spectral_err'] <= row['spectral_err'] * (1 + 1e-8) + scale
                      and best['frob_err'] <= row['frob_err'] * (1 + 1e-8) + scale)
            row['optimal_ok'] = bool(row['rank'] > k or within)
            failures += not row['optimal_ok']
        rows += cell

    status = 'ok' if not failures else 'failed'
    ctx.emit('decompose', rows, status, volatile_columns=TIMING_COLUMNS)
    if failures:
        ctx.logger.error(f"{failures} rows beat the truncated SVD; the reference is broken")
        return 1
    return 0


def handle_spectrum(ctx):
    """Handle the spectrum command."""
    args = ctx.args
    fractions = args.fractions or list(DEFAULT_FRACTIONS)
    root = SeededRng(ctx.config.seed).child('spectrum')

    if args.source == 'matrix':
        sigma = singular_spectrum(load_matrix(args, root.child('matrix')))
        ctx.emit('spectrum_sigma', [{'index': i, 'sigma': float(s)} for i, s in enumerate(sigma)])
        rows = [{'fraction': f, 'kept_ratio': kept_ratio(sigma, f, args.squared)} for f in fractions]
        ctx.emit('spectrum_kept', rows)
        return 0

    config = ctx.config
    model = build_model(config.model, root.child('model'), 'f64')
    unit = model.units()[0]
    rows = []
    settings = [('batch', b, config.task.seq_len) for b in DEFAULT_BATCHES]
    settings += [('seq_len', config.task.batch, s) for s in DEFAULT_SEQ_LENS]
    for sweep, batch, seq_len in settings:
        task_cfg = config.task.model_copy(update={'train_size': batch, 'seq_len': seq_len})
        X = make_task(task_cfg, config.model, root.child(f"task-{batch}-{seq_len}"), 'f64').inputs
        A = X / np.sqrt(np.mean(X * X, axis=1, keepdims=True) + unit.eps) * unit.gamma
        sigma = singular_spectrum(A)
        for f in fractions:
            rows.append({'sweep': sweep, 'batch': batch, 'seq_len': seq_len, 'rows': A.shape[0],
                         'cols': A.shape[1], 'fraction': f, 'kept_ratio': kept_ratio(sigma, f, args.squared)})
    ctx.emit('spectrum_model', rows)
    return 0


def handle_gradcheck(ctx):
    """Handle the gradcheck command."""
    args = ctx.args
    records = run_gradcheck(ctx.config, ctx.config.policy.to_policy(), mutate=args.mutate,
                            instances=args.instances)
    failed = [r for r in records if not r.passed]
    ctx.emit('gradcheck', [r.to_record() for r in records], 'ok' if not failed else 'failed')
    if args.mutate and failed:
        ctx.logger.info(f"mutation detected by {len(failed)} checks")
    return 1 if failed else 0


def _ratio_tag(value):
    return 'exact' if value == 'exact' else str(parse_ratio(value)).replace('/', '-')


def handle_train(ctx):
    """Handle the train command."""
    config = ctx.config
    ratios = ctx.args.ratio or [str(config.policy.ratio)]
    summary, status = [], 0
    for value in ratios:
        if value == 'exact':
            policy = CompressionPolicy.exact()
        else:
            policy = config.policy.model_copy(update={'ratio': value, 'enabled': True}).to_policy()
        tag = _ratio_tag(value)
        ctx.logger.info(f"Training with policy {policy.describe()} ({config.task.strategy})")
        try:
            result = train_loop(config, policy)
        except TrainingDiverged as e:
            ctx.logger.error(str(e))
            summary.append({'policy': tag, 'final_loss': None, 'diverged_at': e.step})
            status = 1
            continue
        ctx.emit(f"train_curve_{tag}", result.curve_rows())
        ctx.emit(f"train_ledger_{tag}", result.ledger.summary())
        summary.append({
            'policy': tag,
            'final_loss': result.final_loss,
            'last_batch_loss': result.losses[-1] if result.losses else None,
            'activation_bytes': result.ledger.stored_total,
            'exact_activation_bytes': result.ledger.exact_total,
            'ratio': result.ledger.compression_ratio,
            'diverged_at': None,
        })
    ctx.emit('train_summary', summary, 'ok' if not status else 'failed')
    return status


def handle_bounds(ctx):
    """Handle the bounds command."""
    config = ctx.config
    results = run_bound_suite(config, config.bounds.checks, ctx.args.trials, ctx.threads)
    failed = [r for r in results if r.status == 'fail']
    ctx.emit('bounds', [r.to_record() for r in results], 'ok' if not failed else 'failed')
    for r in failed:
        ctx.logger.error(f"{r.check} failed: lhs={r.lhs:.6e} rhs={r.rhs:.6e} params={r.params}")
    return 1 if failed else 0


def prenorm_analytic_bytes(model, policy, rows, elem_bytes):
    """Activation bytes a pre-norm run stores per the (m + n) k formula, plus RMS vectors."""
    n = model.config.width
    factor_bytes = resolve_dtype(policy.precision).itemsize if policy.precision else elem_bytes
    total = 0
    for _ in model.units():
        k = policy.rank_for(rows, n) if policy.enabled else None
        if k is None or min(rows, n) < policy.min_side or (rows + n) * k >= rows * n:
            total += rows * n * elem_bytes
        else:
            total += (rows + n) * k * factor_bytes
        total += rows * elem_bytes
    return total


def handle_memsweep(ctx):
    """Handle the memsweep command."""
    args = ctx.args
    config = ctx.config
    root = SeededRng(config.seed).child('memsweep')
    model = build_model(config.model, root.child('model'), config.precision)
    elem_bytes = resolve_dtype(config.precision).itemsize
    memory = model.memory_breakdown(build_optimizer(config.task))
    policies = [('exact', CompressionPolicy.exact()), (config.policy.to_policy().describe(), config.policy.to_policy())]
    settings = [('batch', b, config.task.seq_len) for b in (args.batches or DEFAULT_BATCHES)]
    settings += [('seq_len', config.task.batch, s) for s in (args.seq_lens or DEFAULT_SEQ_LENS)]

    rows, mismatches = [], 0
    for sweep, batch, seq_len in settings:
        m = batch * seq_len
        rng = root.child(f"batch-{batch}-{seq_len}")
        X = rng.child('x').uniform((m, config.model.width)).astype(model.dtype) - 0.5
        labels = np.arange(batch) % config.model.n_classes
        for strategy in STRATEGIES:
            for name, policy in policies:
                _, _, ledger = compute_gradients(model, X, labels, seq_len, policy, rng.child(name), strategy)
                row = {'sweep': sweep, 'batch': batch, 'seq_len': seq_len, 'strategy': strategy,
                       'policy': name, 'activation_bytes': ledger.stored_total,
                       'exact_activation_bytes': ledger.exact_total, 'analytic_unit_bytes': None,
                       **memory}
                if strategy == 'prenorm':
                    analytic = prenorm_analytic_bytes(model, policy, m, elem_bytes)
                    measured = sum(e.stored_bytes for e in ledger.entries
                                   if e.label.endswith(('.norm_out', '.rms')))
                    row['analytic_unit_bytes'] = analytic
                    mismatches += measured != analytic
                rows.append(row)

    ctx.emit('memsweep', rows, 'ok' if not mismatches else 'failed')
    if mismatches:
        ctx.logger.error(f"{mismatches} pre-norm runs disagree with the (m + n) k byte formula")
        return 1
    return 0


HANDLERS = {
    'decompose': handle_decompose,
    'spectrum': handle_spectrum,
    'gradcheck': handle_gradcheck,
    'train': handle_train,
    'bounds': handle_bounds,
    'memsweep': handle_memsweep,
}


def main(argv=None):
    """Main entry point for the loract tool."""
    parser = create_parser()
    args = parser.parse_args(argv)

    # Show help if no command provided
    if not args.command:
        parser.print_help()
        return 0

    logger = get_logger(verbose=args.verbose, log_file=args.log_file)
    manager = LoractConfig(verbose=args.verbose)
    try:
        config = manager.load(args.config, cli_overrides(args))
        threads = manager.threads()
        if not args.verbose:
            logger.set_console_level(manager.log_level())
    except ConfigError as e:
        logger.error(str(e))
        return 2

    ctx = RunContext(args, config, FileOperations(verbose=args.verbose), logger, threads, time.perf_counter())
    try:
        return HANDLERS[args.command](ctx)
    except KeyboardInterrupt:
        logger.info("Operation cancelled by user.")
        return 130
    except ConfigError as e:
        logger.error(str(e))
        ctx.emit(args.command, [], 'error', str(e))
        return 2
    except LoractError as e:
        logger.error(f"{type(e).__name__}: {e}")
        ctx.emit(args.command, [], 'error', str(e))
        return 1


if __name__ == '__main__':
    sys.exit(main())
