"""Event-based pupil tracking with ConvLSTM and change-based ConvLSTM cells."""

__version__ = "0.1.0"
