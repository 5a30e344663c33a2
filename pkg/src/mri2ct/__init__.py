"""Desk-scale 3D MRI-to-CT synthesis pipeline.

Submodules are imported lazily so the CLI can pin BLAS threading before
numpy loads.
"""

__version__ = "0.1.0"

_SUBMODULES = (
    "tensor", "swin", "generator", "discriminator", "losses", "optim",
    "train", "volume", "inference", "metrics", "checkpoint", "kernels",
    "errors", "cli",
)


def __getattr__(name):
    if name in _SUBMODULES:
        import importlib
        return importlib.import_module(f".{name}", __name__)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")


def __dir__():
    return sorted(list(globals()) + list(_SUBMODULES))
