"""synthpose: desk-scale synthetic parametric-human sequence toolchain."""

__version__ = "0.1.0"
