"""Exception types shared across the package."""


class MaglabError(Exception):
    """Base class for all errors raised by maglab."""

    module = "maglab"

    def to_json(self):
        payload = {"error": type(self).__name__, "module": self.module, "message": str(self)}
        payload.update(getattr(self, "details", {}) or {})
        return payload


class DomainError(MaglabError, ValueError):
    """A chart point lies outside the validity region of its chart."""

    module = "surface_geometry"

    def __init__(self, message, kind=None, point=None):
        super().__init__(message)
        self.kind = kind
        self.point = point
        self.details = {"chart_kind": kind, "point": None if point is None else list(map(float, point))}


class ContractError(MaglabError, ValueError):
    """A precondition of an operation is violated."""

    def __init__(self, message, module="maglab", **details):
        super().__init__(message)
        self.module = module
        self.details = details


class ExpressionError(MaglabError, ValueError):
    module = "expressions"


class FlowDomainError(MaglabError):
    """The integrated orbit left the chart's validity region.

    Carries the last valid state and an estimate of the exit time.
    """

    module = "flow"

    def __init__(self, message, last_state, last_time, exit_time):
        super().__init__(message)
        self.last_state = None if last_state is None else tuple(float(v) for v in last_state)
        self.last_time = None if last_time is None else float(last_time)
        self.exit_time = None if exit_time is None else float(exit_time)
        self.details = {
            "last_state": None if self.last_state is None else list(self.last_state),
            "last_time": self.last_time,
            "exit_time_estimate": self.exit_time,
        }


class StiffnessError(MaglabError):
    """Adaptive stepping underflowed."""

    module = "flow"

    def __init__(self, message, time, step, state):
        super().__init__(message)
        self.details = {"time": float(time), "step": float(step), "state": [float(v) for v in state]}
