"""Exception types shared across the package."""


class DataFormatError(ValueError):
    """Raised when input files violate the CSV schemas; carries an itemized report."""

    def __init__(self, diagnostics):
        if isinstance(diagnostics, str):
            diagnostics = [diagnostics]
        self.diagnostics = list(diagnostics)
        super().__init__("\n".join(self.diagnostics))


class ConvergenceError(RuntimeError):
    """Raised when an iterative fit diverges or cannot proceed numerically."""
