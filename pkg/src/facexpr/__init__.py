"""Landmark-based 3D face model fitting, expression regression and emotion classification."""

from importlib.metadata import PackageNotFoundError, version

try:
    __version__ = version("facexpr")
except PackageNotFoundError:
    __version__ = "0.1.0"
