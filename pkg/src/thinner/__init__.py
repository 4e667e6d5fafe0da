"""Filter-level CNN pruning toolkit.

Channels are selected with a greedy next-layer reconstruction criterion,
rescaled by least squares, and removed by structural surgery, followed by
short fine-tuning rounds.

Submodules are imported lazily so that the command-line entry point can
configure threading before numpy is loaded.
"""

__version__ = "0.1.0"

_SUBMODULES = (
    "nn_core",
    "graph",
    "model_io",
    "metrics",
    "sampling",
    "selection",
    "lsq_prune",
    "finetune",
    "cli",
    "errors",
    "util",
)


def __getattr__(name):
    if name in _SUBMODULES:
        import importlib

        return importlib.import_module(f".{name}", __name__)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
