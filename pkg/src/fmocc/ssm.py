"""Selective state-space scans over unfolded TPV planes.

The recurrence per channel ``c`` and state slot ``n`` is

    h[k] = exp(delta[k, c] * A[c, n]) * h[k-1] + delta[k, c] * B[k, n] * x[k, c]
    y[k, c] = sum_n C[k, n] * h[k, c, n] + D[c] * x[k, c]

with ``A = -exp(a_log)`` (strictly negative) and ``delta = softplus(.)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ops
from .autodiff.tensor import Tensor, as_tensor, make_result
from .errors import ContractError, DimensionError
from .nn import Module, param

DEFAULT_CHUNK = 32
# exp(+600) is far from float64 overflow; chunks whose cumulative log-decay
# exceeds this fall back to the sequential recurrence.
_MAX_LOG_SPAN = 600.0


def discretize(a_log, delta) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(A_bar, B_scale)`` for step sizes ``delta[..., C]``.

    ``A_bar[..., c, n] = exp(delta[..., c] * A[c, n])`` and the input enters
    scaled by ``delta`` itself.
    """
    a_log = np.asarray(a_log, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    if np.any(delta <= 0):
        raise ContractError("discretize: delta must be strictly positive")
    A = -np.exp(a_log)
    return np.exp(delta[..., None] * A), delta


# --- recurrences -----------------------------------------------------------
#
# Recurrence arrays are time-major, (L, M): each step reads and writes one
# contiguous row, M being every (sequence, channel, state) lane at once.

# Below this many lanes the blocked closed form wins; above it the row loop does.
BLOCKED_MAX_LANES = 160


def _sequential_recurrence(loga: np.ndarray, u: np.ndarray) -> np.ndarray:
    a = np.exp(loga)
    h = np.empty_like(u)
    state = np.zeros(u.shape[1])
    for k in range(u.shape[0]):
        state = a[k] * state + u[k]
        h[k] = state
    return h


def _blocked_recurrence(loga: np.ndarray, u: np.ndarray, chunk: int) -> np.ndarray | None:
    length, m = u.shape
    n_chunks = -(-length // chunk)
    pad = n_chunks * chunk - length
    if pad:
        loga = np.concatenate([loga, np.zeros((pad, m))])
        u = np.concatenate([u, np.zeros((pad, m))])
    S = np.cumsum(loga.reshape(n_chunks, chunk, m), axis=1)
    if -S[:, -1].min() > _MAX_LOG_SPAN:
        return None
    decay = np.exp(S)
    h = np.cumsum(u.reshape(n_chunks, chunk, m) / decay, axis=1)
    h *= decay
    if n_chunks > 1:
        # block-end states obey the same recurrence one level up
        ends = linear_recurrence(S[:-1, -1], h[:-1, -1], chunk, "blocked")
        h[1:] += decay[1:] * ends[:, None, :]
    return h.reshape(n_chunks * chunk, m)[:length]


def linear_recurrence(loga: np.ndarray, u: np.ndarray, chunk: int = DEFAULT_CHUNK,
                      method: str = "auto") -> np.ndarray:
    """Evaluate ``h[k] = exp(loga[k]) * h[k-1] + u[k]`` with ``h[-1] = 0``.

    ``loga`` and ``u`` are (L, ...) with time leading; every ``loga`` must be
    <= 0. ``method="blocked"`` splits time into blocks of ``chunk`` steps where
    the recurrence has the closed form
    ``h[k] = exp(S[k]) * (h_in + sum_{j<=k} exp(-S[j]) u[j])`` (``S`` the running
    sum of ``loga`` inside the block), leaving only block carries sequential.
    ``method="rows"`` steps one time row at a time across all lanes.
    """
    shape = u.shape
    if shape[0] == 0:
        return np.array(u, dtype=np.float64)
    la2 = np.asarray(loga, dtype=np.float64).reshape(shape[0], -1)
    u2 = np.asarray(u, dtype=np.float64).reshape(shape[0], -1)
    if method == "auto":
        method = "blocked" if u2.shape[1] < BLOCKED_MAX_LANES else "rows"
    h = None
    if method == "blocked":
        h = _blocked_recurrence(la2, u2, chunk)
    elif method != "rows":
        raise ContractError(f"unknown recurrence method {method!r}")
    if h is None:
        h = _sequential_recurrence(la2, u2)
    return h.reshape(shape)


def scan_reference(x, delta, a_log, B, C, d_skip) -> np.ndarray:
    """Naive per-step scan, one sequence at a time. Oracle for the optimized path."""
    x = np.asarray(x, dtype=np.float64)
    lead = x.shape[:-2]
    length, channels = x.shape[-2:]
    xs = x.reshape(-1, length, channels)
    ds = np.asarray(delta, dtype=np.float64).reshape(xs.shape)
    Bs = np.asarray(B, dtype=np.float64).reshape(xs.shape[0], length, -1)
    Cs = np.asarray(C, dtype=np.float64).reshape(xs.shape[0], length, -1)
    A = -np.exp(np.asarray(a_log, dtype=np.float64))
    D = np.asarray(d_skip, dtype=np.float64)
    y = np.empty_like(xs)
    for s in range(xs.shape[0]):
        h = np.zeros(A.shape)
        for k in range(length):
            a_bar = np.exp(ds[s, k][:, None] * A)
            h = a_bar * h + ds[s, k][:, None] * Bs[s, k][None, :] * xs[s, k][:, None]
            y[s, k] = (h * Cs[s, k][None, :]).sum(axis=1) + D * xs[s, k]
    return y.reshape(lead + (length, channels))


def _check_scan_shapes(x, delta, a_log, B, C, d_skip):
    if x.ndim < 2:
        raise DimensionError(f"scan: x must be (..., L, C), got {x.shape}")
    channels = x.shape[-1]
    if delta.shape != x.shape:
        raise DimensionError(f"scan: delta {delta.shape} != x {x.shape}")
    if a_log.ndim != 2 or a_log.shape[0] != channels:
        raise DimensionError(f"scan: a_log {a_log.shape} incompatible with C={channels}")
    n = a_log.shape[1]
    for name, m in (("B", B), ("C", C)):
        if m.shape != x.shape[:-1] + (n,):
            raise DimensionError(f"scan: {name} {m.shape} != {x.shape[:-1] + (n,)}")
    if d_skip.shape != (channels,):
        raise DimensionError(f"scan: d_skip {d_skip.shape} != ({channels},)")


def _time_major(a: np.ndarray, length: int) -> np.ndarray:
    """(..., L, F) -> contiguous (L, b, F)."""
    return np.ascontiguousarray(np.moveaxis(a.reshape(-1, length, a.shape[-1]), 1, 0))


def selective_scan(x, delta, a_log, B, C, d_skip, chunk: int = DEFAULT_CHUNK,
                   method: str = "auto") -> Tensor:
    """Differentiable scan over ``x[..., L, C]``; see module docstring."""
    x, delta, a_log, B, C, d_skip = (as_tensor(t) for t in (x, delta, a_log, B, C, d_skip))
    _check_scan_shapes(x, delta, a_log, B, C, d_skip)
    length = x.shape[-2]
    xs = _time_major(x.data, length)  # (L, b, C)
    ds = _time_major(delta.data, length)
    Bs = _time_major(B.data, length)  # (L, b, N)
    Cs = _time_major(C.data, length)
    A = -np.exp(a_log.data)
    D = d_skip.data

    loga = ds[..., None] * A  # (L, b, C, N)
    dx = ds * xs
    u = dx[..., None] * Bs[:, :, None, :]
    h = linear_recurrence(loga, u, chunk, method)
    y = np.einsum("lbcn,lbn->lbc", h, Cs) + D * xs

    def to_input(a: np.ndarray, like: Tensor) -> np.ndarray:
        return np.moveaxis(a, 0, 1).reshape(like.shape)

    def vjp(g):
        gy = _time_major(g, length)
        local = gy[..., None] * Cs[:, :, None, :]
        shifted = np.empty_like(loga)
        shifted[:-1] = loga[1:]
        shifted[-1] = 0.0
        gh = linear_recurrence(shifted[::-1], local[::-1], chunk, method)[::-1]
        h_prev = np.empty_like(h)
        h_prev[0] = 0.0
        h_prev[1:] = h[:-1]
        g_loga = gh * np.exp(loga) * h_prev
        gu_b = np.einsum("lbcn,lbn->lbc", gh, Bs)
        g_x = gy * D + gu_b * ds
        g_delta = gu_b * xs + np.einsum("lbcn,cn->lbc", g_loga, A)
        g_alog = np.einsum("lbcn,lbc->cn", g_loga, ds) * A
        g_B = np.einsum("lbcn,lbc->lbn", gh, dx)
        g_C = np.einsum("lbc,lbcn->lbn", gy, h)
        g_D = (gy * xs).sum(axis=(0, 1))
        return (
            to_input(g_x, x),
            to_input(g_delta, delta),
            g_alog,
            to_input(g_B, B),
            to_input(g_C, C),
            g_D,
        )

    return make_result("selective_scan", to_input(y, x), (x, delta, a_log, B, C, d_skip), vjp)


# --- parameters and projections ---------------------------------------------


class SsmBlockParams(Module):
    """Learnable state for one plane block: scan maps plus in/out mixes and norm gain."""

    def __init__(self, channels: int, state_size: int, rng: np.random.Generator,
                 zero_out: bool = True):
        c, n = channels, state_size
        s = 1.0 / np.sqrt(c)
        self.a_log = param(np.tile(np.log(np.arange(1, n + 1) / n), (c, 1)))
        self.d_skip = param(np.ones(c))
        self.w_B = param(rng.standard_normal((c, n)) * s)
        self.w_C = param(rng.standard_normal((c, n)) * s)
        self.w_delta = param(rng.standard_normal((c, c)) * 0.1 * s)
        self.b_delta = param(np.zeros(c))
        self.in_proj = param(np.eye(c) + rng.standard_normal((c, c)) * 0.1 * s)
        self.out_proj = param(np.zeros((c, c)) if zero_out else rng.standard_normal((c, c)) * s)
        self.norm_gain = param(np.ones(c))

    @property
    def channels(self) -> int:
        return self.d_skip.shape[0]

    @property
    def state_size(self) -> int:
        return self.a_log.shape[1]


def selective_params(x: Tensor, p: SsmBlockParams) -> tuple[Tensor, Tensor, Tensor]:
    """Input-dependent ``(B, C, delta)`` for a sequence ``x[..., L, C]``."""
    B = ops.matmul(x, p.w_B)
    C = ops.matmul(x, p.w_C)
    delta = ops.softplus(ops.add(ops.matmul(x, p.w_delta), p.b_delta))
    return B, C, delta


def ssm_scan(x: Tensor, p: SsmBlockParams, chunk: int = DEFAULT_CHUNK) -> Tensor:
    x = as_tensor(x)
    if x.ndim < 2 or x.shape[-2] < 1:
        raise ContractError(f"ssm_scan needs a non-empty (..., L, C) sequence, got {x.shape}")
    B, C, delta = selective_params(x, p)
    return selective_scan(x, delta, p.a_log, B, C, p.d_skip, chunk=chunk)


# --- plane unfolding ---------------------------------------------------------

DIRECTIONS = ("row_forward", "row_backward", "col_forward", "col_backward")


@dataclass
class DirectionalSequences:
    """The four traversals of a ``rows x cols`` plane, each (..., rows*cols, C)."""

    row_forward: Tensor
    row_backward: Tensor
    col_forward: Tensor
    col_backward: Tensor
    rows: int
    cols: int

    def as_list(self) -> list[Tensor]:
        return [getattr(self, d) for d in DIRECTIONS]


def _swap_rc(t: Tensor) -> Tensor:
    axes = list(range(t.ndim))
    axes[-3], axes[-2] = axes[-2], axes[-3]
    return ops.transpose(t, axes)


def unfold_plane(P) -> DirectionalSequences:
    P = as_tensor(P)
    rows, cols, ch = P.shape[-3:]
    lead = P.shape[:-3]
    row_f = ops.reshape(P, lead + (rows * cols, ch))
    col_f = ops.reshape(_swap_rc(P), lead + (rows * cols, ch))
    return DirectionalSequences(
        row_forward=row_f,
        row_backward=ops.flip(row_f, -2),
        col_forward=col_f,
        col_backward=ops.flip(col_f, -2),
        rows=rows,
        cols=cols,
    )


def fold_sequence(seq, direction: str, rows: int, cols: int) -> Tensor:
    """Inverse of one traversal from :func:`unfold_plane`."""
    seq = as_tensor(seq)
    lead, ch = seq.shape[:-2], seq.shape[-1]
    if direction.endswith("backward"):
        seq = ops.flip(seq, -2)
    if direction.startswith("row"):
        return ops.reshape(seq, lead + (rows, cols, ch))
    if direction.startswith("col"):
        return _swap_rc(ops.reshape(seq, lead + (cols, rows, ch)))
    raise ContractError(f"unknown direction {direction!r}")


def fold_plane(seqs: DirectionalSequences) -> list[Tensor]:
    return [fold_sequence(getattr(seqs, d), d, seqs.rows, seqs.cols) for d in DIRECTIONS]


# --- time conditioning -------------------------------------------------------


def time_embedding(t, dim: int) -> np.ndarray:
    """Sinusoidal features of ``t`` in [0, 1]; shape ``t.shape + (dim,)``, values in [-1, 1]."""
    t = np.asarray(t, dtype=np.float64)
    half = dim // 2
    freqs = np.pi * 2.0 ** np.arange(half)
    angles = t[..., None] * freqs
    emb = np.concatenate([np.sin(angles), np.cos(angles)], axis=-1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros(t.shape + (1,))], axis=-1)
    return emb


# --- blocks --------------------------------------------------------------------


def plane_ssm_block(P, t_vec, p: SsmBlockParams, chunk: int = DEFAULT_CHUNK) -> Tensor:
    """One pre-norm residual block: scan the four traversals, sum, project, add back.

    ``P`` is (..., rows, cols, C); ``t_vec`` is broadcastable to it, typically (..., 1, 1, C).
    """
    P = as_tensor(P)
    if P.shape[-1] != p.channels:
        raise DimensionError(f"plane has {P.shape[-1]} channels, block expects {p.channels}")
    x = ops.layer_norm(ops.add(P, t_vec), p.norm_gain)
    x = ops.matmul(x, p.in_proj)
    seqs = unfold_plane(x)
    stacked = ops.stack(seqs.as_list(), axis=0)
    y = ssm_scan(stacked, p, chunk=chunk)
    merged = None
    for i, d in enumerate(DIRECTIONS):
        folded = fold_sequence(y[i], d, seqs.rows, seqs.cols)
        merged = folded if merged is None else ops.add(merged, folded)
    return ops.add(P, ops.matmul(merged, p.out_proj))


PLANES = ("xy", "yz", "zx")


class PlaneBranch(Module):
    def __init__(self, channels: int, state_size: int, depth: int, rng: np.random.Generator,
                 zero_out: bool = True):
        self.time_proj = param(rng.standard_normal((channels, channels)) / np.sqrt(channels))
        self.blocks = [SsmBlockParams(channels, state_size, rng, zero_out) for _ in range(depth)]

    def __call__(self, P: Tensor, t_emb: np.ndarray, chunk: int = DEFAULT_CHUNK) -> Tensor:
        t_vec = ops.matmul(Tensor(t_emb), self.time_proj)
        lead = t_vec.shape[:-1]
        pad = (1,) * (P.ndim - 1 - len(lead))
        t_vec = ops.reshape(t_vec, lead + pad + (t_vec.shape[-1],))
        for block in self.blocks:
            P = plane_ssm_block(P, t_vec, block, chunk)
        return P


class TpvSsmLayer(Module):
    """Three plane branches (xy, yz, zx), unshared unless ``share=True``."""

    def __init__(self, channels: int, state_size: int = 8, depth: int = 2, seed: int = 0,
                 share: bool = False, zero_out: bool = True):
        rng = np.random.default_rng(seed)
        self.channels = channels
        if share:
            branch = PlaneBranch(channels, state_size, depth, rng, zero_out)
            self.branches = [branch]
        else:
            self.branches = [
                PlaneBranch(channels, state_size, depth, rng, zero_out) for _ in PLANES
            ]

    def branch(self, i: int) -> PlaneBranch:
        return self.branches[i % len(self.branches)]

    def __call__(self, triplet, t, chunk: int = DEFAULT_CHUNK):
        from .tpv import TpvTriplet

        t = np.asarray(t, dtype=np.float64)
        if np.any(t < 0) or np.any(t > 1):
            raise ContractError(f"tpv_ssm_layer: t must lie in [0, 1], got {t}")
        t_emb = time_embedding(t, self.channels)
        planes = [self.branch(i)(P, t_emb, chunk) for i, P in enumerate(triplet.planes())]
        return TpvTriplet(*planes)


def tpv_ssm_layer(triplet, t, layer: TpvSsmLayer, chunk: int = DEFAULT_CHUNK):
    return layer(triplet, t, chunk)
