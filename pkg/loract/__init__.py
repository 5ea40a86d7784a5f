"""
loract - low-rank compression of saved activations.

A Python toolkit that provides:
- Rank-k decompositions (truncated SVD, randomized SVD, row-sampling
  orthogonal decomposition, random projection) on a small dense kernel
- A reverse-mode tape whose saved activations follow a compression policy
- A toy pre-norm Transformer with LoRA adapters and three storage strategies
- Numerical verification of the error bounds and gradient correctness
"""

__version__ = "0.1.0"
__description__ = "Low-rank compression of autodiff activations"

# Import main classes for easy access
from .compress import CompressionPolicy, MemoryLedger, compress_activation, kept_ratio, retrieve_activation
from .config import LoractConfig, RunConfig
from .decompose import DecomposeMethod, LowRankFactor, decompose
from .errors import LoractError
from .file_ops import FileOperations
from .linalg import SeededRng
from .logger import get_logger

__all__ = [
    'CompressionPolicy',
    'DecomposeMethod',
    'FileOperations',
    'LoractConfig',
    'LoractError',
    'LowRankFactor',
    'MemoryLedger',
    'RunConfig',
    'SeededRng',
    'compress_activation',
    'decompose',
    'get_logger',
    'kept_ratio',
    'retrieve_activation',
]
