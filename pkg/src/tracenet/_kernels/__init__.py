"""Hot loops for skip-gram training.

The compiled ``_hs`` extension is used when it was built; otherwise (or when
``TRACENET_PURE_PYTHON`` is set) the numpy module ``_hs_py`` takes its place.
"""

import importlib
import os

_NAMES = {"cython": "tracenet._kernels._hs", "python": "tracenet._kernels._hs_py"}


def load_backend(name: str):
    return importlib.import_module(_NAMES[name])


def available_backends() -> list[str]:
    out = []
    for name in _NAMES:
        try:
            load_backend(name)
        except ImportError:
            continue
        out.append(name)
    return out


if os.environ.get("TRACENET_PURE_PYTHON"):
    BACKEND = "python"
else:
    try:
        load_backend("cython")
        BACKEND = "cython"
    except ImportError:
        BACKEND = "python"

hs = load_backend(BACKEND)
