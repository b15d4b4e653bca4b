"""Ray-based radio propagation engine with a reproducible timing benchmark."""

__version__ = "0.1.0"
