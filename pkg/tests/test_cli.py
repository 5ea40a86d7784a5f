"""
Unit tests for the loract command line interface.
"""

import json
import tempfile
from pathlib import Path
from unittest.mock import Mock, patch

import pytest

from loract.cli import cli_overrides, create_parser, main, prenorm_analytic_bytes
from loract.compress import CompressionPolicy
from loract.config import ModelConfig
from loract.errors import DomainError
from loract.linalg import SeededRng
from loract.transformer import build_model

SMALL_TOML = """
seed = 1
precision = "f64"

[model]
depth = 1
width = 16
heads = 2
ffn_hidden = 16
lora_rank = 2

[task]
batch = 2
seq_len = 8
steps = 2
train_size = 4
"""


def read_report(directory, name):
    with open(Path(directory) / f"{name}.json") as f:
        return json.load(f)


def run(temp_dir, *argv, config=True):
    args = list(argv) + ['--out', temp_dir, '--format', 'json']
    if config:
        path = Path(temp_dir) / 'run.toml'
        path.write_text(SMALL_TOML)
        args += ['--config', str(path)]
    return main(args)


@patch.dict('os.environ', {}, clear=True)
@patch('loract.config.load_dotenv')
class TestCommands:
    """Test cases for the subcommands."""

    def test_no_command_shows_help(self, mock_load_dotenv):
        """Test running without a subcommand."""
        assert main([]) == 0

    def test_decompose(self, mock_load_dotenv):
        """Test the method grid on a synthetic low-rank matrix."""
        with tempfile.TemporaryDirectory() as temp_dir:
            code = run(temp_dir, 'decompose', '--rows', '32', '--cols', '16', '--rank', '4',
                       '--k', '2', '4', config=False)
            report = read_report(temp_dir, 'decompose')
        assert code == 0
        assert report['metadata']['status'] == 'ok'
        assert report['metadata']['command'] == 'decompose'
        rows = report['rows']
        assert len(rows) == 8
        assert {r['method'] for r in rows} == {'tsvd', 'rsvd', 'sampled', 'randproj'}
        assert all(r['optimal_ok'] for r in rows)
        exact = [r for r in rows if r['k'] == 4 and r['method'] in ('tsvd', 'rsvd', 'sampled')]
        assert all(r['spectral_err'] < 1e-6 for r in exact)

    def test_spectrum_matrix(self, mock_load_dotenv):
        """Test singular values and kept ratios of a synthetic matrix."""
        with tempfile.TemporaryDirectory() as temp_dir:
            code = run(temp_dir, 'spectrum', '--rows', '24', '--cols', '8', '--rank', '2',
                       '--fractions', '0.5', '0.9', config=False)
            sigma = read_report(temp_dir, 'spectrum_sigma')['rows']
            kept = read_report(temp_dir, 'spectrum_kept')['rows']
        assert code == 0
        assert len(sigma) == 8
        assert sigma[0]['sigma'] == pytest.approx(1.0)
        assert kept == [{'fraction': 0.5, 'kept_ratio': 0.125}, {'fraction': 0.9, 'kept_ratio': 0.25}]

    def test_spectrum_fixture_input(self, mock_load_dotenv):
        """Test --input reads a CSV fixture."""
        with tempfile.TemporaryDirectory() as temp_dir:
            fixture = Path(temp_dir) / 'a.csv'
            fixture.write_text('3,0\n0,1\n0,0\n')
            code = run(temp_dir, 'spectrum', '--input', str(fixture), '--fractions', '0.75', config=False)
            sigma = read_report(temp_dir, 'spectrum_sigma')['rows']
            kept = read_report(temp_dir, 'spectrum_kept')['rows']
        assert code == 0
        assert [round(r['sigma'], 12) for r in sigma] == [3.0, 1.0]
        assert kept[0]['kept_ratio'] == 0.5

    def test_train_sweep(self, mock_load_dotenv):
        """Test a two-ratio sweep writes curves, ledgers and a summary."""
        with tempfile.TemporaryDirectory() as temp_dir:
            code = run(temp_dir, 'train', '--ratio', 'exact', '1/2')
            names = {p.stem for p in Path(temp_dir).glob('*.json')}
            summary = read_report(temp_dir, 'train_summary')['rows']
        assert code == 0
        assert {'train_curve_exact', 'train_curve_1-2', 'train_ledger_1-2', 'train_summary'} <= names
        assert [row['policy'] for row in summary] == ['exact', '1-2']
        assert summary[0]['ratio'] == 1.0

    def test_gradcheck(self, mock_load_dotenv):
        """Test the gradient oracles pass, and fail under mutation."""
        with tempfile.TemporaryDirectory() as temp_dir:
            assert run(temp_dir, 'gradcheck', '--instances', '10') == 0
            records = read_report(temp_dir, 'gradcheck')['rows']
            assert all(r['passed'] for r in records)
            assert run(temp_dir, 'gradcheck', '--instances', '10', '--mutate') == 1
            assert read_report(temp_dir, 'gradcheck')['metadata']['status'] == 'failed'

    def test_bounds(self, mock_load_dotenv):
        """Test a small deterministic-bound run."""
        with tempfile.TemporaryDirectory() as temp_dir:
            code = run(temp_dir, 'bounds', '--theorem', 'deterministic', '--trials', '6')
            rows = read_report(temp_dir, 'bounds')['rows']
        assert code == 0
        assert len(rows) == 6
        assert {r['theorem'] for r in rows} == {'deterministic'}

    def test_bounds_numeric_alias(self, mock_load_dotenv):
        """Test a numeric alias selects the matching check."""
        with tempfile.TemporaryDirectory() as temp_dir:
            code = run(temp_dir, 'bounds', '--theorem', '3.3', '--trials', '6')
            report = read_report(temp_dir, 'bounds')
        assert code == 0
        assert len(report['rows']) == 6
        assert {r['theorem'] for r in report['rows']} == {'deterministic'}
        assert report['config']['bounds']['checks'] == ['deterministic']

    def test_memsweep(self, mock_load_dotenv):
        """Test measured pre-norm bytes agree with the analytic count."""
        with tempfile.TemporaryDirectory() as temp_dir:
            code = run(temp_dir, 'memsweep', '--ratio', '1/4', '--batches', '2', '--seq-lens', '8')
            rows = read_report(temp_dir, 'memsweep')['rows']
        assert code == 0
        assert len(rows) == 12
        prenorm = [r for r in rows if r['strategy'] == 'prenorm']
        compressed = [r for r in prenorm if r['policy'] != 'exact']
        assert all(r['analytic_unit_bytes'] is not None for r in prenorm)
        assert all(r['activation_bytes'] < r['exact_activation_bytes'] for r in compressed)


@patch.dict('os.environ', {}, clear=True)
@patch('loract.config.load_dotenv')
class TestExitCodes:
    """Test cases for error handling in main."""

    def test_missing_config_file(self, mock_load_dotenv):
        """Test configuration errors exit with 2."""
        assert main(['decompose', '--config', '/nonexistent/run.toml']) == 2

    def test_invalid_override(self, mock_load_dotenv):
        """Test an invalid flag value fails validation."""
        with tempfile.TemporaryDirectory() as temp_dir:
            assert run(temp_dir, 'decompose', '--t', '-1', config=False) == 2

    def test_library_error_writes_report(self, mock_load_dotenv):
        """Test a library error exits with 1 and still writes an error report."""
        failing = Mock(side_effect=DomainError('zero spectrum'))
        with tempfile.TemporaryDirectory() as temp_dir:
            with patch.dict('loract.cli.HANDLERS', {'decompose': failing}):
                code = run(temp_dir, 'decompose', config=False)
            metadata = read_report(temp_dir, 'decompose')['metadata']
        assert code == 1
        assert metadata['status'] == 'error'
        assert metadata['error'] == 'zero spectrum'

    def test_keyboard_interrupt(self, mock_load_dotenv):
        """Test cancellation exits with 130."""
        with tempfile.TemporaryDirectory() as temp_dir:
            with patch.dict('loract.cli.HANDLERS', {'decompose': Mock(side_effect=KeyboardInterrupt)}):
                assert run(temp_dir, 'decompose', config=False) == 130

@patch.dict('os.environ', {}, clear=True)
@patch('loract.config.load_dotenv')
class TestDeterminism:
    """Test cases for identical reports from identical runs."""

    COMMANDS = [
        ['decompose', '--rows', '32', '--cols', '16', '--rank', '4', '--k', '2', '4', '--repeats', '3'],
        ['spectrum', '--rows', '24', '--cols', '8', '--rank', '2'],
        ['spectrum', '--source', 'model'],
        ['gradcheck', '--instances', '5'],
        ['train', '--ratio', 'exact', '1/2'],
        ['bounds', '--theorem', 'deterministic', 'accumulation', '--trials', '4'],
        ['memsweep', '--ratio', '1/4', '--batches', '2', '--seq-lens', '8'],
    ]

    def _reports(self, argv):
        with tempfile.TemporaryDirectory() as temp_dir:
            assert run(temp_dir, *argv) == 0
            reports = {}
            for path in sorted(Path(temp_dir).glob('*.json')):
                report = read_report(temp_dir, path.stem)
                volatile = set(report['metadata']['volatile_columns'])
                rows = [{key: value for key, value in row.items() if key not in volatile}
                        for row in report['rows']]
                config = {key: value for key, value in report['config'].items() if key != 'output'}
                reports[path.stem] = json.dumps({'rows': rows, 'config': config}, sort_keys=True)
        return reports

    def test_every_command_repeats_exactly(self, mock_load_dotenv):
        """Test each subcommand run twice with one seed writes the same rows."""
        for argv in self.COMMANDS:
            first, second = self._reports(argv), self._reports(argv)
            assert first, argv
            assert first == second, argv

    def test_timing_columns_are_declared(self, mock_load_dotenv):
        """Test wall-clock columns are declared in the report metadata."""
        with tempfile.TemporaryDirectory() as temp_dir:
            run(temp_dir, *self.COMMANDS[0])
            decompose = read_report(temp_dir, 'decompose')
            run(temp_dir, *self.COMMANDS[-1])
            memsweep = read_report(temp_dir, 'memsweep')
        assert decompose['metadata']['volatile_columns'] == ['wall_ns']
        assert all('wall_ns' in row for row in decompose['rows'])
        assert memsweep['metadata']['volatile_columns'] == []



class TestParserHelpers:
    """Test cases for flag parsing and analytic byte counts."""

    def test_overrides(self):
        """Test only given flags become overrides."""
        args = create_parser().parse_args(['memsweep', '--seed', '9', '--ratio', '1/8', '--format', 'both'])
        assert cli_overrides(args) == {
            'seed': 9,
            'output': {'formats': ['csv', 'json']},
            'policy': {'ratio': '1/8'},
        }

    def test_train_ratio_list_is_not_a_policy_override(self):
        """Test a ratio sweep leaves the configured policy ratio alone."""
        args = create_parser().parse_args(['train', '--ratio', 'exact', '1/4', '--steps', '5'])
        assert cli_overrides(args) == {'task': {'steps': 5}}

    def test_check_aliases(self):
        """Test numeric aliases map to check names and unknown ones are refused."""
        args = create_parser().parse_args(['bounds', '--theorem', '3.1', '3.2', '3.3', '3.4', 'sampling'])
        assert cli_overrides(args) == {
            'bounds': {'checks': ['accumulation', 'projection_floor', 'deterministic', 'sampling', 'sampling']},
        }
        with pytest.raises(SystemExit):
            create_parser().parse_args(['bounds', '--theorem', '3.9'])

    def test_analytic_bytes(self):
        """Test the (m + n) k count plus one RMS vector per unit."""
        model = build_model(ModelConfig(depth=1, width=16, heads=2), SeededRng(0), 'f32')
        policy = CompressionPolicy(ratio='1/4')
        assert prenorm_analytic_bytes(model, policy, 64, 4) == 2 * ((64 + 16) * 4 * 4 + 64 * 4)
        assert prenorm_analytic_bytes(model, CompressionPolicy.exact(), 64, 4) == 2 * (64 * 16 * 4 + 64 * 4)


if __name__ == '__main__':
    pytest.main([__file__])
