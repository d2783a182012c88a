"""Full-waveform inversion with optimal-transport misfits."""

__version__ = "0.1.0"
