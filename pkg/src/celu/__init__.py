"""Two-party vertical federated learning with cache-enabled local updates."""

__version__ = "0.1.0"
