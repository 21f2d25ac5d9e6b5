"""Event-driven spiking networks trained by backpropagation on spike traces."""

__version__ = "0.1.0"
