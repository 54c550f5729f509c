"""
Structured errors shared by every module of the CIR toolkit.

Each error carries a short machine code and a details dict so the CLI can
print one stable line per failure.
"""

from typing import Any, Dict, List, Optional


class CIRError(Exception):
    """Base class for all toolkit errors."""
    code = "cir-error"

    def __init__(self, message: str, **details: Any):
        super().__init__(message)
        self.message = message
        self.details: Dict[str, Any] = details

    def __str__(self) -> str:
        if not self.details:
            return f"[{self.code}] {self.message}"
        extras = ", ".join(f"{k}={v}" for k, v in sorted(self.details.items()))
        return f"[{self.code}] {self.message} ({extras})"


class TensorShapeError(CIRError):
    """Kernel received tensors or parameters of incompatible shape."""
    code = "tensor-shape"


class GraphError(CIRError):
    """Layer graph is ill-formed, or a node failed during forward."""
    code = "graph"

    def __init__(self, message: str, node: Optional[str] = None, **details: Any):
        if node is not None:
            details["node"] = node
        super().__init__(message, **details)
        self.node = node


class WeightsError(CIRError):
    """Weights file does not match the graph it is loaded into."""
    code = "weights"

    def __init__(self, message: str,
                 missing: Optional[List[str]] = None,
                 extra: Optional[List[str]] = None,
                 **details: Any):
        self.missing = sorted(missing or [])
        self.extra = sorted(extra or [])
        if self.missing:
            details["missing"] = ",".join(self.missing)
        if self.extra:
            details["extra"] = ",".join(self.extra)
        super().__init__(message, **details)


class AnalysisError(CIRError):
    """Static analysis cannot assign a geometry to some node."""
    code = "analysis"


class MatchError(CIRError):
    """Matching head or tracker received inconsistent inputs."""
    code = "match"


class SequenceError(CIRError):
    """Synthetic sequence configuration or evaluation input is invalid."""
    code = "sequence"
