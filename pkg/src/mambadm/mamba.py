"""Selective (input-dependent) Mamba block."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from . import kernels
from .errors import ConfigurationError, ShapeError
from .ssm import (
    ScanState,
    discretize_zoh,
    init_state_matrix,
    linear_scan_parallel,
    linear_scan_sequential,
)

SCAN_BACKENDS = {
    "parallel": linear_scan_parallel,
    "sequential": linear_scan_sequential,
}
BACKENDS = ("auto", "fused", "parallel", "sequential")


def resolve_backend(name: str) -> str:
    """``auto`` picks the compiled fused kernel when it was built, else ``parallel``."""
    if name not in BACKENDS:
        raise ConfigurationError(f"unknown scan backend {name!r}; expected one of {BACKENDS}")
    if name == "auto":
        return "fused" if kernels.available() else "parallel"
    if name == "fused" and not kernels.available():
        raise ConfigurationError("fused scan kernel is not built; reinstall with a C compiler")
    return name


def causal_conv(u: torch.Tensor, kernel: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    """Depthwise causal convolution over time.

    ``u`` is ``(B, T, E)``, ``kernel`` is ``(E, w)``. Output at ``t`` is
    ``sum_k kernel[:, k] * u[t - (w-1) + k]`` with zeros left of the start, so
    ``kernel[:, -1]`` is the tap on the current step.
    """
    E, w = kernel.shape
    if u.shape[-1] != E:
        raise ShapeError(f"input has {u.shape[-1]} channels, kernel has {E}")
    # shifted multiply-adds: much cheaper backward than a grouped conv1d on CPU
    T = u.shape[-2]
    y = u * kernel[:, w - 1]
    for s in range(1, min(w, T + 1)):
        # tap w-1-s sees the input s steps back
        y[..., s:, :] += u[..., :T - s, :] * kernel[:, w - 1 - s]
    return y if bias is None else y + bias


def selective_params(u: torch.Tensor, W_B: torch.Tensor, W_C: torch.Tensor,
                     W_delta: torch.Tensor, delta_bias: torch.Tensor):
    """Per-step ``B_t = u_t W_B``, ``C_t = u_t W_C``, ``delta_t = softplus(u_t W_delta + bias)``.

    ``W_delta`` is ``(E, 1)`` (shared step broadcast over channels) or ``(E, E)``.
    """
    B = u @ W_B
    C = u @ W_C
    delta = F.softplus(u @ W_delta + delta_bias)
    return B, C, delta


def inverse_softplus(y: torch.Tensor) -> torch.Tensor:
    return y + torch.log(-torch.expm1(-y))


@dataclass
class MambaCache:
    """Streaming state: SSM latent per channel plus the conv input tail."""

    ssm: ScanState
    conv_tail: torch.Tensor  # (B, w-1, E)


class MambaBlock(nn.Module):
    def __init__(self, d: int, d_state: int = 16, expand: int = 1, conv_width: int = 4,
                 a_init: str = "neg_ramp", full_delta: bool = False, learnable_D: bool = False,
                 clamp_A_negative: bool = False, backend: str = "auto",
                 dt_min: float = 1e-3, dt_max: float = 1e-1):
        super().__init__()
        E = expand * d
        self.d, self.E, self.N, self.w = d, E, d_state, conv_width
        self.clamp_A_negative = clamp_A_negative
        self.backend = resolve_backend(backend)
        self.W_in = nn.Parameter(torch.empty(d, E))
        self.W_gate = nn.Parameter(torch.empty(d, E))
        self.conv_kernel = nn.Parameter(torch.empty(E, conv_width))
        self.conv_bias = nn.Parameter(torch.empty(E))
        self.W_B = nn.Parameter(torch.empty(E, d_state))
        self.W_C = nn.Parameter(torch.empty(E, d_state))
        self.W_delta = nn.Parameter(torch.empty(E, E if full_delta else 1))
        self.delta_bias = nn.Parameter(torch.empty(E))
        self.A = nn.Parameter(init_state_matrix(d_state, a_init).repeat(E, 1))
        if learnable_D:
            self.D = nn.Parameter(torch.zeros(E))
        else:
            self.register_buffer("D", torch.zeros(E))
        self.W_out = nn.Parameter(torch.empty(E, d))

        for p in (self.W_in, self.W_gate, self.W_B, self.W_C, self.W_delta, self.W_out):
            nn.init.normal_(p, 0.0, 0.02)
        bound = 1.0 / math.sqrt(conv_width)
        nn.init.uniform_(self.conv_kernel, -bound, bound)
        nn.init.uniform_(self.conv_bias, -bound, bound)
        with torch.no_grad():
            log_dt = torch.empty(E).uniform_(math.log(dt_min), math.log(dt_max))
            self.delta_bias.copy_(inverse_softplus(torch.exp(log_dt)))

    def state_matrix(self) -> torch.Tensor:
        if self.clamp_A_negative:
            return self.A.clamp(max=-1e-4)
        return self.A

    def _skip(self, y: torch.Tensor, u: torch.Tensor) -> torch.Tensor:
        # the fixed D buffer is zero unless a caller overwrote it
        if isinstance(self.D, nn.Parameter) or bool(self.D.any()):
            return y + self.D * u
        return y

    def _ssm(self, u: torch.Tensor, h0: torch.Tensor | None = None, want_state: bool = True):
        # u: (B, T, E) -> y (B, T, E), final state (B, E, N)
        B_t, C_t, delta = selective_params(u, self.W_B, self.W_C, self.W_delta, self.delta_bias)
        if delta.shape[-1] != self.E:
            delta = delta.expand(-1, -1, self.E)
        if self.backend == "fused":
            y, h_last = kernels.selective_scan(u, delta, self.state_matrix(), B_t, C_t, h0, want_state)
            return self._skip(y, u), h_last
        A_bar, B_bar = discretize_zoh(self.state_matrix(), B_t.unsqueeze(-2), delta.unsqueeze(-1),
                                      check=False)
        a = A_bar.permute(0, 2, 1, 3)
        b = (B_bar * u.unsqueeze(-1)).permute(0, 2, 1, 3)
        h = SCAN_BACKENDS[self.backend](a, b, h0)
        y = (h * C_t.unsqueeze(1)).sum(-1).transpose(1, 2)
        return self._skip(y, u), h[:, :, -1]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 3 or x.shape[-1] != self.d:
            raise ShapeError(f"expected (B, T, {self.d}) input, got {tuple(x.shape)}")
        u = F.silu(causal_conv(x @ self.W_in, self.conv_kernel, self.conv_bias))
        z = F.silu(x @ self.W_gate)
        y, _ = self._ssm(u, want_state=False)
        return (y * z) @ self.W_out

    def empty_cache(self, batch: int) -> MambaCache:
        dtype = self.W_in.dtype
        return MambaCache(ScanState(torch.zeros(batch, self.E, self.N, dtype=dtype), 0),
                          torch.zeros(batch, self.w - 1, self.E, dtype=dtype))

    def step(self, x_t: torch.Tensor, cache: MambaCache):
        """Process one token ``(B, d)``; returns ``(out (B, d), new cache)``."""
        xe = (x_t @ self.W_in).unsqueeze(1)
        window = torch.cat([cache.conv_tail, xe], dim=1)
        u = F.silu((window * self.conv_kernel.T).sum(1) + self.conv_bias)
        z = F.silu(x_t @ self.W_gate)
        y, h = self._ssm(u.unsqueeze(1), cache.ssm.h)
        out = (y[:, 0] * z) @ self.W_out
        new = MambaCache(ScanState(h, cache.ssm.step_index + 1), window[:, 1:])
        return out, new
