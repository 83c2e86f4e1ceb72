"""Exception types shared across the package."""


class RiskWadcError(Exception):
    """Base class for all package errors."""


class ValidationError(RiskWadcError):
    """Input data failed a structural or physical check."""


class NonReducibleNetworkError(RiskWadcError):
    def __init__(self, nodes):
        self.nodes = list(nodes)
        super().__init__(f"non-reducible network: eliminated block singular over nodes {self.nodes}")


class DegenerateOperatingPointError(RiskWadcError):
    def __init__(self, detail=""):
        msg = "algebraically degenerate operating point"
        super().__init__(f"{msg}: {detail}" if detail else msg)


class UnknownSystemError(RiskWadcError):
    pass


class InfeasibleGainError(RiskWadcError):
    """Initial gain does not stabilize the delay-free closed loop."""

    def __init__(self, spectral_radius):
        self.spectral_radius = float(spectral_radius)
        super().__init__(
            f"initial gain is infeasible: closed-loop spectral radius {self.spectral_radius:.6f} >= 1"
        )
