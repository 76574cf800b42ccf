"""CAV to UAV incident relay testbed."""

__version__ = "0.1.0"
