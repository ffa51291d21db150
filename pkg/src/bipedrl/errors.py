"""Exception hierarchy shared across the package.

ContractError (and subclasses) map to CLI exit code 1, NumericError to exit
code 2.
"""


class ContractError(ValueError):
    """A caller violated a documented precondition."""


class DimensionError(ContractError):
    """Array shapes do not line up; message names the offending layer/op."""


class CheckpointSchemaError(ContractError):
    """Checkpoint manifest does not match the expected parameter set."""


class NumericError(RuntimeError):
    """NaN/Inf or other numeric breakdown; message names the producing op."""


class SimulationDiverged(NumericError):
    """Physics state blew up (velocity beyond sanity bounds)."""
