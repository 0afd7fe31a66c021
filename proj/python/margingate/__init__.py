"""Batch-shape token-flip simulator and the MarginGate decoding policy."""

from ._margingate import *  # noqa: F401,F403
from ._margingate import __version__
