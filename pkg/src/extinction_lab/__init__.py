"""Numerics for finite-time extinction in dt u - Delta_p u + |grad u|^q = 0."""
from importlib.metadata import PackageNotFoundError, version

try:
    __version__ = version("artifact")
except PackageNotFoundError:  # running from a source tree
    __version__ = "0.1.0"
