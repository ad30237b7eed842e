"""Kernel backend selection.

The compiled Cython core (`_core`) is preferred when importable; the
vectorized numpy twin is the fallback. `DEMAGOPT_BACKEND=numpy|cython`
forces a choice (forcing `cython` raises if the extension is missing).
"""

import os

_requested = os.environ.get("DEMAGOPT_BACKEND", "").strip().lower()

if _requested == "numpy":
    from . import numpy_backend as backend
elif _requested == "cython":
    from . import _core as backend  # noqa: F401  (ImportError is the diagnostic)
else:
    try:
        from . import _core as backend
    except ImportError:
        from . import numpy_backend as backend


def backend_name():
    return backend.NAME


def available_backends():
    names = ["numpy"]
    try:
        from . import _core  # noqa: F401

        names.append("cython")
    except ImportError:
        pass
    return names
