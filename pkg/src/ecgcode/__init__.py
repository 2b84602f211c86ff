"""ECG P/QRS/T delineation on an interval grid, with confidence-ranked self-training."""

__version__ = "0.1.0"
