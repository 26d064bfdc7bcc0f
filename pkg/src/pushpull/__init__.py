"""Push vs pull web event notification testbed."""

__version__ = "0.1.0"
