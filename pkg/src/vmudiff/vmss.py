"""State-space core: discretization, selective scan, cross-scan SS2D and the VMSS block."""

from __future__ import annotations

import enum
import time

import numpy as np

from . import kernels
from .errors import ShapeError
from .nn import Dense, DepthwiseConv2d, LayerNorm, Module, silu, silu_backward, softplus, softplus_backward


class ScanDirection(enum.IntEnum):
    ROW_FWD = 0
    ROW_BWD = 1
    COL_FWD = 2
    COL_BWD = 3

    @property
    def tag(self) -> str:
        return self.name.lower()


DIRECTIONS = tuple(ScanDirection)


def discretize_zoh(a, b, delta, exact=False):
    """Zero-order-hold discretization of ``h' = a h + b x``.

    Returns ``(abar, bbar)`` with ``abar = exp(delta*a)``. The default is the
    simplified form ``bbar = delta*b``; ``exact=True`` gives
    ``bbar = (exp(delta*a) - 1)/a * b`` (which tends to ``delta*b`` as a -> 0).
    """
    delta = np.asarray(delta, dtype=np.float64)
    if np.any(delta <= 0):
        raise ValueError("step size delta must be > 0")
    a = np.asarray(a, dtype=np.float64)
    with np.errstate(over="ignore", under="ignore"):
        abar = np.exp(delta * a)
    if not exact:
        return abar, delta * np.asarray(b, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        coef = np.where(a == 0, delta, np.expm1(delta * a) / np.where(a == 0, 1.0, a))
    return abar, coef * np.asarray(b, dtype=np.float64)


def selective_scan(u, delta, A, B, C, D, exact=False):
    """Run the selective recurrence on one or more sequences.

    Shapes: ``u, delta: (L, D)`` or ``(G, L, D)``; ``A: (D, N)``/``(G, D, N)``;
    ``B, C: (L, N)``/``(G, L, N)``; ``D: (D,)``/``(G, D)``.
    ``h_k = exp(delta_k a) h_{k-1} + delta_k B_k u_k``, ``y_k = <C_k, h_k> + D u_k``.
    Returns ``(y, cache)``; ``cache[0]`` holds every hidden state.
    """
    u = np.asarray(u)
    single = u.ndim == 2
    if single:
        u, delta, A, B, C, D = (np.asarray(a)[None] for a in (u, delta, A, B, C, D))
    if u.shape[1] == 0:
        raise ShapeError("selective_scan: sequence length must be >= 1")
    _check_scan_shapes(u, delta, A, B, C, D)
    dtype = u.dtype
    args = [np.ascontiguousarray(a, dtype=dtype) for a in (u, delta, A, B, C, D)]
    y, cache = kernels.scan_forward(*args, exact=exact)
    if single:
        return y[0], tuple(c[0] for c in cache)
    return y, cache


def selective_scan_backward(dy, u, delta, A, B, C, D, cache, exact=False):
    """Gradients ``(du, ddelta, dA, dB, dC, dD)`` of ``sum(dy * y)``."""
    single = np.ndim(u) == 2
    if single:
        dy, u, delta, A, B, C, D = (np.asarray(a)[None] for a in (dy, u, delta, A, B, C, D))
        cache = tuple(c[None] for c in cache)
    dtype = np.asarray(u).dtype
    args = [np.ascontiguousarray(a, dtype=dtype) for a in (dy, u, delta, A, B, C, D)]
    grads = kernels.scan_backward(*args, cache, exact=exact)
    if single:
        return tuple(g[0] for g in grads)
    return grads


def _check_scan_shapes(u, delta, A, B, C, D):
    G, L, Dm = u.shape
    N = A.shape[-1]
    expect = {
        "delta": (delta.shape, (G, L, Dm)),
        "A": (A.shape, (G, Dm, N)),
        "B": (B.shape, (G, L, N)),
        "C": (C.shape, (G, L, N)),
        "D": (D.shape, (G, Dm)),
    }
    for name, (got, want) in expect.items():
        if tuple(got) != want:
            raise ShapeError(f"selective_scan: {name} has shape {tuple(got)}, expected {want}")


# --------------------------------------------------------------------------
# Cross-scan

def scan_orders(h: int, w: int) -> np.ndarray:
    """Flat-index permutation for each direction, shape ``(4, h*w)``."""
    grid = np.arange(h * w).reshape(h, w)
    row = grid.ravel()
    col = grid.T.ravel()
    return np.stack([row, row[::-1], col, col[::-1]])


def cross_scan(x):
    """``(C, H, W)`` or ``(B, C, H, W)`` -> ``(..., 4, H*W, C)`` directional sequences."""
    x = np.asarray(x)
    single = x.ndim == 3
    if single:
        x = x[None]
    Bn, C, H, W = x.shape
    flat = x.reshape(Bn, C, H * W).transpose(0, 2, 1)  # (B, L, C)
    seqs = flat[:, scan_orders(H, W)]  # (B, 4, L, C)
    return seqs[0] if single else seqs


def cross_merge(seqs, h: int, w: int):
    """Inverse of :func:`cross_scan`: undo each permutation and sum the four maps."""
    seqs = np.asarray(seqs)
    single = seqs.ndim == 3
    if single:
        seqs = seqs[None]
    Bn, ndir, L, C = seqs.shape
    if ndir != 4 or L != h * w:
        raise ShapeError(f"cross_merge: got {seqs.shape} for a {h}x{w} map")
    orders = scan_orders(h, w)
    flat = np.zeros((Bn, L, C), dtype=seqs.dtype)
    for k in range(4):
        flat[:, orders[k]] += seqs[:, k]
    out = flat.transpose(0, 2, 1).reshape(Bn, C, h, w)
    return out[0] if single else out


# --------------------------------------------------------------------------
# SS2D and the VMSS block

def _inv_softplus(y):
    return y + np.log(-np.expm1(-y))


class SS2D(Module):
    """Four-direction selective scan over a ``(B, D, H, W)`` map.

    Projections producing delta, B and C are shared by the directions; each
    direction has its own ``a_log`` (``a = -exp(a_log)``) and skip gain.
    ``selective=False`` switches to a time-invariant SSM whose B, C and delta
    are plain parameters.
    """

    def __init__(self, store, name, d_model, d_state=8, selective=True, exact_zoh=False,
                 dt_min=0.01, dt_max=0.1):
        super().__init__(store, name)
        self.d = d_model
        self.n = d_state
        self.selective = selective
        self.exact = exact_zoh
        rng = store._rng(f"{name}.dt_init")
        dt = np.exp(rng.uniform(np.log(dt_min), np.log(dt_max), size=d_model))
        self._add("dt_bias", (d_model,), _inv_softplus(dt))
        if selective:
            self.proj_dt = Dense(store, f"{name}.proj_dt", d_model, d_model, bias=False)
            self.proj_b = Dense(store, f"{name}.proj_b", d_model, d_state, bias=False)
            self.proj_c = Dense(store, f"{name}.proj_c", d_model, d_state, bias=False)
        else:
            self._add("b", (d_state,), "uniform", bound=1.0)
            self._add("c", (d_state,), "uniform", bound=1.0)
        a_init = np.log(np.tile(np.arange(1, d_state + 1, dtype=np.float64), (d_model, 1)))
        for direction in DIRECTIONS:
            self._add(f"{direction.tag}.a_log", (d_model, d_state), a_init)
            self._add(f"{direction.tag}.d_skip", (d_model,), "ones")
        self.norm = LayerNorm(store, f"{name}.norm", d_model)

    def forward(self, x):
        Bn, D, H, W = x.shape
        if D != self.d:
            raise ShapeError(f"{self.name}: expected {self.d} channels, got {D}")
        L = H * W
        tokens = x.reshape(Bn, D, L).transpose(0, 2, 1)  # (B, L, D)
        if self.selective:
            dt_raw = self.proj_dt.forward(tokens) + self.p("dt_bias")
            Bm = self.proj_b.forward(tokens)
            Cm = self.proj_c.forward(tokens)
        else:
            dt_raw = np.broadcast_to(self.p("dt_bias"), (Bn, L, D))
            Bm = np.broadcast_to(self.p("b"), (Bn, L, self.n))
            Cm = np.broadcast_to(self.p("c"), (Bn, L, self.n))
        delta = softplus(dt_raw)
        orders = scan_orders(H, W)
        G = Bn * 4
        gather = lambda a: a[:, orders].reshape(G, L, a.shape[-1])  # noqa: E731
        u_s, dt_s, B_s, C_s = gather(tokens), gather(delta), gather(Bm), gather(Cm)
        A = -np.exp(np.stack([self.p(f"{d.tag}.a_log") for d in DIRECTIONS]))  # (4, D, N)
        Dsk = np.stack([self.p(f"{d.tag}.d_skip") for d in DIRECTIONS])  # (4, D)
        A_g = np.broadcast_to(A, (Bn, 4, D, self.n)).reshape(G, D, self.n)
        D_g = np.broadcast_to(Dsk, (Bn, 4, D)).reshape(G, D)
        y, hs = selective_scan(u_s, dt_s, A_g, B_s, C_s, D_g, exact=self.exact)
        merged = np.zeros((Bn, L, D), dtype=x.dtype)
        y4 = y.reshape(Bn, 4, L, D)
        for k in range(4):
            merged[:, orders[k]] += y4[:, k]
        out = self.norm.forward(merged)  # layer norm over channels
        self._cache = (x.shape, orders, dt_raw, (u_s, dt_s, A_g, B_s, C_s, D_g, hs), A)
        return np.ascontiguousarray(out.transpose(0, 2, 1).reshape(Bn, D, H, W))

    def backward(self, dout):
        (Bn, D, H, W), orders, dt_raw, scan_args, A = self._cache
        L = H * W
        G = Bn * 4
        dmerged = self.norm.backward(dout.reshape(Bn, D, L).transpose(0, 2, 1))
        dy = np.stack([dmerged[:, orders[k]] for k in range(4)], axis=1).reshape(G, L, D)
        du_s, ddt_s, dA_g, dB_s, dC_s, dD_g = selective_scan_backward(dy, *scan_args, exact=self.exact)

        def scatter(g):
            g4 = g.reshape(Bn, 4, L, g.shape[-1])
            out = np.zeros((Bn, L, g.shape[-1]), dtype=g.dtype)
            for k in range(4):
                out[:, orders[k]] += g4[:, k]
            return out

        dtokens = scatter(du_s)
        ddelta = scatter(ddt_s)
        dBm = scatter(dB_s)
        dCm = scatter(dC_s)
        dA = dA_g.reshape(Bn, 4, D, self.n).sum(axis=0)
        dDsk = dD_g.reshape(Bn, 4, D).sum(axis=0)
        for k, direction in enumerate(DIRECTIONS):
            # a = -exp(a_log)  ->  d a_log = dA * a
            self._acc(f"{direction.tag}.a_log", dA[k] * A[k])
            self._acc(f"{direction.tag}.d_skip", dDsk[k])
        ddt_raw = softplus_backward(ddelta, dt_raw)
        self._acc("dt_bias", ddt_raw.sum(axis=(0, 1)))
        if self.selective:
            dtokens = dtokens + self.proj_dt.backward(ddt_raw)
            dtokens = dtokens + self.proj_b.backward(dBm)
            dtokens = dtokens + self.proj_c.backward(dCm)
        else:
            self._acc("b", dBm.sum(axis=(0, 1)))
            self._acc("c", dCm.sum(axis=(0, 1)))
        return np.ascontiguousarray(dtokens.transpose(0, 2, 1).reshape(Bn, D, H, W))


class VMSSBlock(Module):
    """Gated state-space block with a residual connection.

    ``z = embed(x)``; ``out = project(ss2d(silu(dwconv(z))) * silu(z)) + x``.
    The output projection starts at zero, so a fresh block is the identity.
    """

    def __init__(self, store, name, d_model, d_state=8, selective=True, exact_zoh=False):
        super().__init__(store, name)
        self.embed = Dense(store, f"{name}.in_proj", d_model, d_model)
        self.dwconv = DepthwiseConv2d(store, f"{name}.dwconv", d_model, 3)
        self.ss2d = SS2D(store, f"{name}.ss2d", d_model, d_state, selective, exact_zoh)
        self.out_proj = Dense(store, f"{name}.out_proj", d_model, d_model, init="zeros")

    @staticmethod
    def _to_last(x):
        return x.transpose(0, 2, 3, 1)

    @staticmethod
    def _to_first(x):
        return np.ascontiguousarray(x.transpose(0, 3, 1, 2))

    def forward(self, x):
        z = self._to_first(self.embed.forward(self._to_last(x)))
        c = self.dwconv.forward(z)
        a, self._act1 = silu(c)
        p1 = self.ss2d.forward(a)
        p2, self._act2 = silu(z)
        self._p = (p1, p2)
        out = self.out_proj.forward(self._to_last(p1 * p2))
        return self._to_first(out) + x

    def backward(self, dout):
        p1, p2 = self._p
        dprod = self._to_first(self.out_proj.backward(self._to_last(dout)))
        dp1 = dprod * p2
        dp2 = dprod * p1
        da = self.ss2d.backward(dp1)
        dz = self.dwconv.backward(silu_backward(da, self._act1))
        dz = dz + silu_backward(dp2, self._act2)
        dx = self._to_first(self.embed.backward(self._to_last(dz)))
        return dx + dout


# --------------------------------------------------------------------------
# Benchmark

def scan_benchmark(lengths, d_model=16, d_state=8, repeats=5, seed=0, backend=None):
    """Time one forward selective scan per length.

    Returns rows ``(L, nanos, nanos_per_element)`` using the minimum over
    ``repeats`` timings.
    """
    lengths = [int(n) for n in lengths]
    if any(b <= a for a, b in zip(lengths, lengths[1:])):
        raise ValueError("lengths must be strictly increasing")
    impl = kernels.get_backend(backend)
    rng = np.random.default_rng(seed)
    cases = {}
    for L in lengths:
        cases[L] = (rng.normal(size=(1, L, d_model)).astype(np.float32),
                    rng.uniform(0.01, 0.1, size=(1, L, d_model)).astype(np.float32),
                    -rng.uniform(0.5, d_state, size=(1, d_model, d_state)).astype(np.float32),
                    rng.normal(size=(1, L, d_state)).astype(np.float32),
                    rng.normal(size=(1, L, d_state)).astype(np.float32),
                    np.ones((1, d_model), np.float32))
    # Warm up largest first: freeing a big buffer lifts glibc's mmap threshold, so
    # every length then allocates its cache the same way.
    for L in reversed(lengths):
        impl.scan_forward(*cases[L], False)
    rows = []
    for L in lengths:
        best = None
        for _ in range(repeats):
            t0 = time.perf_counter_ns()
            impl.scan_forward(*cases[L], False)
            elapsed = time.perf_counter_ns() - t0
            best = elapsed if best is None else min(best, elapsed)
        best = max(best, 1)
        rows.append((L, best, best / L))
    return rows


def format_benchmark(rows) -> str:
    lines = ["L\tnanos\tnanos_per_element"]
    lines += [f"{L}\t{ns}\t{per:.3f}" for L, ns, per in rows]
    return "\n".join(lines) + "\n"
