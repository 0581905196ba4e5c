"""Audio-visual target speaker extraction for sparsely overlapped speech."""

__version__ = "0.1.0"
