"""Scene-graph matching for few-shot scene classification, on a small numpy autodiff engine."""

__version__ = "0.1.0"
