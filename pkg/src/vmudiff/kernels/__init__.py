"""Selective-scan kernels.

The compiled Cython kernel is used when it was built; otherwise the numpy
implementation is selected. Set ``VMUDIFF_BACKEND=numpy`` to force the
fallback. Both expose ``scan_forward`` and ``scan_backward`` with identical
signatures:

    scan_forward(u, delta, A, B, C, D, exact) -> (y, cache)
    scan_backward(dy, u, delta, A, B, C, D, cache, exact) -> (du, ddelta, dA, dB, dC, dD)

with ``u, delta: (G, L, Dm)``, ``A: (G, Dm, N)``, ``B, C: (G, L, N)`` and
``D: (G, Dm)``; ``A`` holds the (negative) continuous transition rates.
``cache`` is private to the backend that produced it. ``cache[0]`` is always
the ``(G, L, Dm, N)`` hidden states. The numpy kernel also keeps the
transition factors, while the compiled one recomputes them per time chunk.
"""

import os

from . import _scan_np

try:
    from . import _scan_cy
except ImportError:  # extension not built
    _scan_cy = None

BACKENDS = {"numpy": _scan_np}
if _scan_cy is not None:
    BACKENDS["cython"] = _scan_cy

_requested = os.environ.get("VMUDIFF_BACKEND", "").strip().lower()
if _requested and _requested not in BACKENDS:
    raise ImportError(f"VMUDIFF_BACKEND={_requested!r} unavailable; have {sorted(BACKENDS)}")

backend = BACKENDS[_requested] if _requested else (_scan_cy or _scan_np)
BACKEND_NAME = backend.NAME


def get_backend(name=None):
    return backend if name is None else BACKENDS[name]


def scan_forward(u, delta, A, B, C, D, exact=False):
    return backend.scan_forward(u, delta, A, B, C, D, exact)


def scan_backward(dy, u, delta, A, B, C, D, cache, exact=False):
    return backend.scan_backward(dy, u, delta, A, B, C, D, cache, exact)
