from typing import List, Optional, Sequence

# Process exit codes used by the command-line surface
EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_SAMPLER = 4


class ModelingError(Exception):
    """Base class for errors raised by this package"""
    exit_code = 1


class ConfigurationError(ModelingError, ValueError):
    exit_code = EXIT_USAGE


class GraphValidationError(ModelingError, ValueError):
    exit_code = EXIT_DATA


class DataValidationError(ModelingError, ValueError):
    """Ingest rejection; `problems` holds one line-numbered message per offending row"""
    exit_code = EXIT_DATA

    def __init__(self, message: str, problems: Optional[Sequence[str]] = None):
        self.problems: List[str] = list(problems or [])
        if self.problems:
            shown = "\n".join(f"  - {p}" for p in self.problems[:50])
            more = len(self.problems) - 50
            if more > 0:
                shown += f"\n  ... and {more} more"
            message = f"{message}\n{shown}"
        super().__init__(message)


class DomainError(ModelingError, ValueError):
    exit_code = EXIT_DATA


class StructuralError(ModelingError, ValueError):
    exit_code = EXIT_DATA


class InsufficientDrawsError(ModelingError, ValueError):
    pass


class DiagnosticUnavailableError(ModelingError, ValueError):
    pass


class SimulationOverflowError(ModelingError, ValueError):
    exit_code = EXIT_DATA


class SamplerError(ModelingError, RuntimeError):
    """Chain failure; `completed` carries the chains that did finish"""
    exit_code = EXIT_SAMPLER

    def __init__(self, message: str, completed: Optional[list] = None):
        super().__init__(message)
        self.completed = list(completed or [])
