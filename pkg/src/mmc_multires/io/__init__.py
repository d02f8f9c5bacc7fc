"""Configuration parsing, the command-line interface and output files."""

import importlib

_SUBMODULES = ("config", "export", "cli")


def __getattr__(name):
    if name in _SUBMODULES:
        return importlib.import_module(f".{name}", __name__)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
