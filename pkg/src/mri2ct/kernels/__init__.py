"""Backend selection for the convolution hot kernels.

Two interchangeable implementations sit behind one interface:

* ``conv_py``   — numpy fallback: stride-trick window gathering reduced by
  BLAS contractions; always available.
* ``_convcore`` — compiled extension (Cython): explicit loop nests with a
  fixed scalar accumulation order, independent of any BLAS.

``MRI2CT_KERNELS`` picks the backend: ``python``, ``cython`` (fail loudly if
the extension is missing) or ``auto`` (default).  ``auto`` resolves to the
numpy path: on desk-scale shapes the BLAS-backed fallback measures ~3x
faster than the compiled loops (see ``bench/bench_kernels.py``), so the
extension is the opt-in choice for environments without a tuned BLAS or
when a bit-reproducible scalar accumulation order matters more than speed.
Both backends agree to float rounding and are covered by the same tests.
"""

import os

from . import conv_py

_requested = os.environ.get("MRI2CT_KERNELS", "auto").lower()

if _requested not in ("auto", "cython", "python"):
    raise ValueError(f"MRI2CT_KERNELS must be auto|cython|python, got {_requested!r}")

_impl = None
if _requested == "cython":
    from . import _convcore as _impl
elif _requested == "auto":
    # fastest measured default; the extension stays one env var away
    _impl = conv_py
if _impl is None:
    _impl = conv_py

ACTIVE_BACKEND = "cython" if _impl is not conv_py else "python"

conv3d_fwd = _impl.conv3d_fwd
conv3d_gw = _impl.conv3d_gw
conv3d_gx = _impl.conv3d_gx
out_extent = conv_py.out_extent


def get_backend(name):
    """Return the kernel module for ``name`` ("python" or "cython")."""
    if name == "python":
        return conv_py
    if name == "cython":
        from . import _convcore
        return _convcore
    raise ValueError(f"unknown kernel backend {name!r}")


def available_backends():
    names = ["python"]
    try:
        from . import _convcore  # noqa: F401
        names.append("cython")
    except ImportError:
        pass
    return names
