"""Kernel backend selection: compiled extension when available, pure Python otherwise.

The active backend is chosen once at import (override with the
``TWOPASS_SLU_BACKEND`` environment variable, values ``compiled`` or
``python``) and can be switched at runtime with :func:`use_backend` — used by
tests and the backend benchmark.
"""

import os

from twopass_slu import kernels_py

try:
    from twopass_slu import _kernels
except ImportError:
    _kernels = None

#: Module providing the active kernel set; ops access kernels through here.
K = None
_ACTIVE = None


def available_backends():
    names = []
    if _kernels is not None:
        names.append("compiled")
    names.append("python")
    return names


def active_backend():
    return _ACTIVE


def use_backend(name):
    """Activate a kernel backend by name ('compiled' or 'python')."""
    global K, _ACTIVE
    if name == "compiled":
        if _kernels is None:
            raise RuntimeError(
                "compiled kernels unavailable: build the extension with "
                "`pip install -e .` or select TWOPASS_SLU_BACKEND=python")
        K = _kernels
    elif name == "python":
        K = kernels_py
    else:
        raise ValueError(f"unknown backend {name!r}; expected 'compiled' or 'python'")
    _ACTIVE = name
    return K


_requested = os.environ.get("TWOPASS_SLU_BACKEND")
if _requested:
    use_backend(_requested)
else:
    use_backend("compiled" if _kernels is not None else "python")
