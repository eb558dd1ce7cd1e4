"""Diagonal state-space primitives: ZOH discretization, linear scans, A init.

All functions are pure and operate on torch tensors so gradients flow through
them. Sequence tensors put time on axis -2 and the state on axis -1, i.e.
``(..., T, N)``; scalar inputs/outputs per step are ``(..., T)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import DomainError, InvalidParameterError, ShapeError

ZOH_LIMIT_EPS = 1e-12

INIT_SCHEMES = ("neg_ramp", "neg_half")


@dataclass
class ScanState:
    """Latent state carried between scan calls."""

    h: torch.Tensor
    step_index: int = 0

    @classmethod
    def zeros(cls, *shape: int, dtype=torch.float32) -> "ScanState":
        return cls(torch.zeros(*shape, dtype=dtype), 0)


def _as_tensor(x, dtype=None) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x if dtype is None else x.to(dtype)
    return torch.as_tensor(np.asarray(x, dtype=np.float64), dtype=dtype or torch.float64)


def discretize_zoh(A, B, delta, *, check: bool = True):
    """Exact zero-order-hold transform of a diagonal continuous system.

    Returns ``(A_bar, B_bar)`` with ``A_bar = exp(delta*A)`` and
    ``B_bar = (exp(delta*A) - 1) / A * B``. Entries with ``|A| < 1e-12`` use the
    analytic limit ``delta*B``. Arguments broadcast against each other.
    """
    A = _as_tensor(A)
    B = _as_tensor(B, A.dtype)
    delta = _as_tensor(delta, A.dtype)
    if check:
        for name, t in (("A", A), ("B", B), ("delta", delta)):
            if not torch.isfinite(t).all():
                raise InvalidParameterError(f"{name} contains non-finite values")
        if not (delta > 0).all():
            raise InvalidParameterError("delta must be strictly positive")
    dA = delta * A
    A_bar = torch.exp(dA)
    tiny = A.abs() < ZOH_LIMIT_EPS
    safe_A = torch.where(tiny, torch.ones_like(A), A)
    # keep the unused branch finite so its gradient is zero rather than NaN
    safe_dA = torch.where(tiny, torch.zeros_like(dA), dA)
    B_bar = torch.where(tiny, delta * B, torch.expm1(safe_dA) / safe_A * B)
    return A_bar, B_bar


def _check_scan_shapes(A_bar, B_bar, C, x):
    if A_bar.shape != B_bar.shape or A_bar.shape != C.shape:
        raise ShapeError(
            f"A_bar {tuple(A_bar.shape)}, B_bar {tuple(B_bar.shape)} and C "
            f"{tuple(C.shape)} must share shape (..., T, N)"
        )
    if tuple(x.shape) != tuple(A_bar.shape[:-1]):
        raise ShapeError(f"x has shape {tuple(x.shape)}, expected {tuple(A_bar.shape[:-1])}")


def linear_scan_sequential(a: torch.Tensor, b: torch.Tensor, h0: torch.Tensor | None = None):
    """States of ``h_t = a_t * h_{t-1} + b_t`` by direct recurrence.

    ``a`` and ``b`` are ``(..., T, N)``; returns all states, same shape.
    """
    T = a.shape[-2]
    h = torch.zeros_like(b[..., 0, :]) if h0 is None else h0.expand_as(b[..., 0, :])
    out = []
    for t in range(T):
        h = a[..., t, :] * h + b[..., t, :]
        out.append(h)
    if not out:
        return b.new_zeros(b.shape)
    return torch.stack(out, dim=-2)


def linear_scan_parallel(a: torch.Tensor, b: torch.Tensor, h0: torch.Tensor | None = None):
    """Same result as :func:`linear_scan_sequential` in ceil(log2 T) rounds.

    Hillis-Steele inclusive scan with the combinator
    ``(a1, b1) . (a2, b2) = (a1*a2, a2*b1 + b2)`` (earlier element on the
    left). The reduction order is fixed, so results are deterministic.
    """
    T = a.shape[-2]
    if T == 0:
        return b.new_zeros(b.shape)
    if h0 is not None:
        first = a[..., :1, :] * h0.unsqueeze(-2) + b[..., :1, :]
        b = torch.cat([first, b[..., 1:, :]], dim=-2)
    offset = 1
    while offset < T:
        a_prev = a[..., :-offset, :]
        b_prev = b[..., :-offset, :]
        a_cur = a[..., offset:, :]
        b_cur = b[..., offset:, :]
        b = torch.cat([b[..., :offset, :], a_cur * b_prev + b_cur], dim=-2)
        a = torch.cat([a[..., :offset, :], a_cur * a_prev], dim=-2)
        offset *= 2
    return b


def _scan(A_bar, B_bar, C, x, h0, D, states_fn):
    A_bar, B_bar, C, x = (_as_tensor(t) for t in (A_bar, B_bar, C, x))
    _check_scan_shapes(A_bar, B_bar, C, x)
    if h0 is None:
        h0 = ScanState(torch.zeros_like(A_bar[..., 0, :]), 0)
    elif not isinstance(h0, ScanState):
        h0 = ScanState(_as_tensor(h0, A_bar.dtype), 0)
    if not torch.isfinite(h0.h).all():
        raise InvalidParameterError("initial state is not finite")
    T = A_bar.shape[-2]
    if T == 0:
        return x.new_zeros(x.shape), h0
    h = states_fn(A_bar, B_bar * x.unsqueeze(-1), h0.h)
    y = (h * C).sum(-1)
    if not (isinstance(D, (int, float)) and D == 0):
        y = y + D * x
    return y, ScanState(h[..., -1, :], h0.step_index + T)


def scan_sequential(A_bar, B_bar, C, x, h0: ScanState | None = None, D=0.0):
    """Recurrent evaluation ``h_t = A_bar_t*h_{t-1} + B_bar_t*x_t``, ``y_t = <C_t, h_t> + D*x_t``.

    Returns ``(y, final ScanState)``.
    """
    return _scan(A_bar, B_bar, C, x, h0, D, linear_scan_sequential)


def scan_parallel(A_bar, B_bar, C, x, h0: ScanState | None = None, D=0.0):
    """Associative-scan evaluation of :func:`scan_sequential`."""
    return _scan(A_bar, B_bar, C, x, h0, D, linear_scan_parallel)


def init_state_matrix(N: int, scheme: str = "neg_ramp", dtype=torch.float32) -> torch.Tensor:
    """Diagonal of the continuous state matrix.

    ``neg_ramp``: ``A[n] = -(n+1)``; ``neg_half``: every entry ``-1/2``.
    """
    if N < 1:
        raise InvalidParameterError(f"state size must be >= 1, got {N}")
    if scheme == "neg_ramp":
        return -torch.arange(1, N + 1, dtype=dtype)
    if scheme == "neg_half":
        return torch.full((N,), -0.5, dtype=dtype)
    raise InvalidParameterError(f"unknown init scheme {scheme!r}; expected one of {INIT_SCHEMES}")


def spectrum_log(A_diag) -> np.ndarray:
    """log10 of |A| entrywise, shape and order preserved."""
    if isinstance(A_diag, torch.Tensor):
        A_diag = A_diag.detach().cpu().numpy()
    a = np.abs(np.asarray(A_diag, dtype=np.float64))
    if (a == 0).any():
        raise DomainError("spectrum undefined for zero entries of A")
    return np.log10(a)
