"""Fused selective-scan kernel with a hand-written backward pass.

For every batch row ``b`` and channel ``e``::

    A_bar  = exp(delta[b,t,e] * A[e,n])
    h_t[n] = A_bar * h_{t-1}[n] + (A_bar - 1) / A[e,n] * Bm[b,t,n] * u[b,t,e]
    y[b,t,e] = sum_n Cm[b,t,n] * h_t[n]

i.e. exact diagonal ZOH, recurrence and readout in one pass, without
materialising the ``(B, T, E, N)`` discretised tensors. The C code lives in
``_scan.c`` with one float32 and one float64 entry point; when it was not built, :func:`available`
returns False and callers use the pure-torch path, which is also the
reference the kernel is tested against.
"""

from __future__ import annotations

import ctypes
import importlib.util

import torch

_lib = None


def _load():
    global _lib
    if _lib is not None:
        return _lib
    spec = importlib.util.find_spec("mambadm._scan")
    if spec is None or spec.origin is None:
        _lib = False
        return _lib
    lib = ctypes.CDLL(spec.origin)
    ptr = ctypes.c_void_p
    ints = [ctypes.c_int] * 4
    for sfx in ("f32", "f64"):
        fwd = getattr(lib, f"mambadm_scan_forward_{sfx}")
        bwd = getattr(lib, f"mambadm_scan_backward_{sfx}")
        fwd.argtypes = ints + [ptr] * 8
        bwd.argtypes = ints + [ptr] * 15
        fwd.restype = bwd.restype = ctypes.c_int
    _lib = lib
    return _lib


def available() -> bool:
    return bool(_load())


def _entry(dtype: torch.dtype, kind: str):
    sfx = "f64" if dtype == torch.float64 else "f32"
    return getattr(_load(), f"mambadm_scan_{kind}_{sfx}")


def _work_dtype(dtype: torch.dtype) -> torch.dtype:
    return dtype if dtype in (torch.float32, torch.float64) else torch.float32


def _prep(tensors, dtype):
    return [t.detach().to(device="cpu", dtype=dtype).contiguous() for t in tensors]


# Saved-state buffers are large and freshly allocated memory is slow to touch
# the first time, so released buffers are kept for reuse.
_free: dict[tuple, list[torch.Tensor]] = {}
_MAX_FREE = 16


def _take(shape: tuple, dtype: torch.dtype) -> torch.Tensor:
    bucket = _free.get((shape, dtype))
    return bucket.pop() if bucket else torch.empty(shape, dtype=dtype)


def _give(t: torch.Tensor) -> None:
    bucket = _free.setdefault((tuple(t.shape), t.dtype), [])
    if len(bucket) < _MAX_FREE:
        bucket.append(t)


def _ptr(t: torch.Tensor):
    return ctypes.c_void_p(t.data_ptr())


def _optr(t: torch.Tensor | None):
    return None if t is None else _ptr(t)


class SelectiveScanFn(torch.autograd.Function):
    """``(y, h_last) = f(u, delta, A, Bm, Cm, h0)``; ``h0=None`` is a zero state.

    With ``want_state=False`` the final state is not returned (an empty
    tensor stands in for it).
    """

    @staticmethod
    def forward(ctx, u, delta, A, Bm, Cm, h0, want_state):
        wd = _work_dtype(u.dtype)
        nb, nt, ne = u.shape
        nn_ = A.shape[1]
        args = _prep((u, delta, A, Bm, Cm), wd)
        h0w = None if h0 is None else _prep((h0,), wd)[0]
        y = torch.empty(nb, nt, ne, dtype=wd)
        # saved states, state-major: (B, T, N, E)
        hs = _take((nb, nt, nn_, ne), wd)
        if _entry(wd, "forward")(nb, nt, ne, nn_, *map(_ptr, args), _optr(h0w), _ptr(y), _ptr(hs)) != 0:
            raise MemoryError("scan kernel could not allocate its workspace")
        if not want_state:
            h_last = u.new_empty(0)
        elif nt > 0:
            h_last = hs[:, -1].transpose(1, 2).to(u.dtype).contiguous()
        else:
            h_last = u.new_zeros(nb, ne, nn_) if h0 is None else h0.detach().clone()
        if any(ctx.needs_input_grad):
            ctx.save_for_backward(*args, h0w)
            ctx.hs = hs
            ctx.dtypes = [t.dtype for t in (u, delta, A, Bm, Cm)]
            ctx.want_state = want_state
            ctx.h0_dtype = None if h0 is None else h0.dtype
        else:
            _give(hs)
        if not want_state:
            ctx.mark_non_differentiable(h_last)
        return y.to(u.dtype), h_last

    @staticmethod
    def backward(ctx, gy, gh_last):
        *args, h0 = ctx.saved_tensors
        u = args[0]
        wd = u.dtype
        nb, nt, ne = u.shape
        gy = torch.zeros_like(u) if gy is None else gy.to(wd).contiguous()
        if gh_last is not None and ctx.want_state:
            gh_last = gh_last.to(wd).contiguous()
        else:
            gh_last = None
        outs = [torch.empty_like(a) for a in args]
        gh0 = torch.empty_like(h0) if h0 is not None and ctx.needs_input_grad[5] else None
        if _entry(wd, "backward")(nb, nt, ne, args[2].shape[1], *map(_ptr, args), _optr(h0), _ptr(ctx.hs),
                                  _ptr(gy), _optr(gh_last), *map(_ptr, outs), _optr(gh0)) != 0:
            raise MemoryError("scan kernel could not allocate its workspace")
        _give(ctx.hs)
        del ctx.hs
        grads = [o.to(dt) for o, dt in zip(outs, ctx.dtypes)]
        return (*grads, None if gh0 is None else gh0.to(ctx.h0_dtype), None)


def selective_scan(u, delta, A, Bm, Cm, h0=None, want_state: bool = True):
    """Fused scan; ``u, delta: (B, T, E)``, ``A: (E, N)``, ``Bm, Cm: (B, T, N)``."""
    return SelectiveScanFn.apply(u, delta, A, Bm, Cm, h0, want_state)
