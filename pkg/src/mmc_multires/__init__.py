"""Multi-resolution topology optimisation with moving morphable components.

Modules: ``geometry`` (component TDFs, K-S union, Heaviside), ``mesh``
(background grid, hyper-element mesh, sub-regions), ``fea`` (hyper-element
assembly and solve), ``sensitivity`` (analytic gradients), ``optimizer``
(MMA and convergence), ``driver`` (problems and the optimisation loop) and
``io`` (configuration, CLI and output files).

Submodules are imported on first attribute access so that the CLI can set
thread-count environment variables before numpy is loaded.
"""

import importlib

__version__ = "0.1.0"

_SUBMODULES = ("geometry", "mesh", "fea", "sensitivity", "optimizer", "driver", "io", "kernels",
               "checks")


def __getattr__(name):
    if name in _SUBMODULES:
        return importlib.import_module(f".{name}", __name__)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
