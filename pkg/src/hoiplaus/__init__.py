"""Physical plausibility metrics, learned surrogates and refinement for hand-object interaction."""

__version__ = "0.1.0"
