"""Block-pruned ViT inference with token dropping, plus an FPGA accelerator simulator."""

from .errors import InvalidArgument, InvariantViolation, VitsimError

__version__ = "0.1.0"

__all__ = ["InvalidArgument", "InvariantViolation", "VitsimError", "__version__"]
