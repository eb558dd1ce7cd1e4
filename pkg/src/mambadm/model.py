"""Trajectory embedding, the global/local fusion layer, and ablation variants."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigurationError, DataError, ShapeError
from .mamba import MambaBlock, causal_conv

VARIANTS = ("gloma", "cmc", "pmc", "global_only", "local_only")
ROLES = ("rtg", "state", "action")


@dataclass
class GlomaConfig:
    state_dim: int
    action_dim: int
    action_type: str = "discrete"
    d: int = 64
    n_layers: int = 3
    K: int = 10
    l_s: int = 6
    N_state: int = 16
    dropout: float = 0.1
    variant: str = "gloma"
    a_init: str = "neg_ramp"
    conv_width: int = 4
    mixer_width: int = 6
    ffn_mult: int = 4
    expand: int = 1
    full_delta: bool = False
    learnable_D: bool = False
    clamp_A_negative: bool = False
    use_timestep_embedding: bool = False
    max_timestep: int = 1024
    rtg_scale: float = 1.0
    backend: str = "auto"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.action_type not in ("discrete", "continuous"):
            raise ConfigurationError(f"action_type must be discrete or continuous, got {self.action_type!r}")
        if self.K < 1:
            raise ConfigurationError("K must be >= 1")
        if not 1 <= self.l_s <= 3 * self.K:
            raise ConfigurationError(f"l_s must lie in [1, 3K] = [1, {3 * self.K}], got {self.l_s}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigurationError("dropout must lie in [0, 1)")
        if self.d < 1 or self.n_layers < 1 or self.N_state < 1 or self.action_dim < 1:
            raise ConfigurationError("d, n_layers, N_state and action_dim must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "GlomaConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class TokenSequence:
    """Interleaved <rtg, state, action> tokens, ``(B, 3K, d)``."""

    tokens: torch.Tensor
    pad_mask: torch.Tensor  # (B, T) bool, True on real tokens
    token_roles: list = field(default_factory=list)


def padding_plan(T: int, l_s: int) -> tuple[int, int]:
    """Return ``(l_p, n_s)``: zero tokens appended and number of sub-sequences."""
    if l_s < 1:
        raise ConfigurationError("l_s must be >= 1")
    l_p = (l_s - T % l_s) % l_s
    return l_p, (T + l_p) // l_s


def pad_and_split(tokens: torch.Tensor, l_s: int, pad_mask: torch.Tensor | None = None):
    """Append zero tokens to a multiple of ``l_s`` and fold the sub-sequences into the batch.

    Returns ``(sub, sub_mask)`` with ``sub`` of shape ``(B * n_s, l_s, d)``.
    """
    B, T, d = tokens.shape
    l_p, n_s = padding_plan(T, l_s)
    if pad_mask is None:
        pad_mask = torch.ones(B, T, dtype=torch.bool)
    padded = torch.cat([tokens, tokens.new_zeros(B, l_p, d)], dim=1)
    mask = torch.cat([pad_mask, pad_mask.new_zeros(B, l_p)], dim=1)
    return padded.reshape(B * n_s, l_s, d), mask.reshape(B * n_s, l_s)


def merge_split(sub: torch.Tensor, batch: int, T: int) -> torch.Tensor:
    """Inverse of :func:`pad_and_split`, dropping the padding."""
    return sub.reshape(batch, -1, sub.shape[-1])[:, :T]


def dropout(x: torch.Tensor, p: float, training: bool, generator: torch.Generator | None = None):
    if not training or p == 0.0:
        return x
    keep = torch.rand(x.shape, generator=generator, dtype=x.dtype) >= p
    return x * keep / (1.0 - p)


class ConvMixer(nn.Module):
    """Causal depthwise token mixer used by the PMC/CMC variants."""

    def __init__(self, d: int, width: int):
        super().__init__()
        self.kernel = nn.Parameter(torch.empty(d, width))
        self.bias = nn.Parameter(torch.zeros(d))
        nn.init.normal_(self.kernel, 0.0, 0.02)
        with torch.no_grad():
            self.kernel[:, -1] += 1.0

    def forward(self, x):
        return causal_conv(x, self.kernel, self.bias)


class FFN(nn.Module):
    def __init__(self, d: int, mult: int, p: float):
        super().__init__()
        self.fc1 = nn.Linear(d, mult * d)
        self.fc2 = nn.Linear(mult * d, d)
        self.p = p

    def forward(self, x, generator=None):
        return dropout(self.fc2(F.gelu(self.fc1(x))), self.p, self.training, generator)


class GlomaLayer(nn.Module):
    """One fusion layer: ``f_c = global + Dropout(local)``; ``out = FFN(LN(f_c)) + f_c``.

    The variant decides what fills the two branches.
    """

    def __init__(self, cfg: GlomaConfig):
        super().__init__()
        self.variant = cfg.variant
        self.p = cfg.dropout

        def mamba():
            return MambaBlock(cfg.d, cfg.N_state, cfg.expand, cfg.conv_width, cfg.a_init,
                              cfg.full_delta, cfg.learnable_D, cfg.clamp_A_negative, cfg.backend)

        if self.variant != "local_only":
            self.ln_global = nn.LayerNorm(cfg.d)
            self.global_mamba = mamba()
        if self.variant in ("gloma", "local_only"):
            self.ln_local = nn.LayerNorm(cfg.d)
            self.local_mamba = mamba()
        if self.variant == "pmc":
            self.ln_local = nn.LayerNorm(cfg.d)
            self.mixer = ConvMixer(cfg.d, cfg.mixer_width)
        if self.variant == "cmc":
            self.mixer = ConvMixer(cfg.d, cfg.mixer_width)
        self.ln_ffn = nn.LayerNorm(cfg.d)
        self.ffn = FFN(cfg.d, cfg.ffn_mult, cfg.dropout)

    def global_branch(self, x):
        return self.global_mamba(self.ln_global(x))

    def local_branch(self, x, l_s: int):
        B, T, _ = x.shape
        sub, _ = pad_and_split(self.ln_local(x), l_s)
        return merge_split(self.local_mamba(sub), B, T)

    def fuse(self, x, l_s: int, generator=None):
        v = self.variant
        if v == "gloma":
            return self.global_branch(x) + dropout(self.local_branch(x, l_s), self.p, self.training, generator)
        if v == "global_only":
            return self.global_branch(x)
        if v == "local_only":
            return dropout(self.local_branch(x, l_s), self.p, self.training, generator)
        if v == "pmc":
            return self.global_branch(x) + dropout(self.mixer(self.ln_local(x)), self.p, self.training, generator)
        return self.mixer(self.global_branch(x))  # cmc

    def forward(self, x, l_s: int, generator=None):
        f_c = self.fuse(x, l_s, generator)
        return self.ffn(self.ln_ffn(f_c), generator) + f_c

    def mamba_blocks(self) -> dict:
        out = {}
        if hasattr(self, "global_mamba"):
            out["global"] = self.global_mamba
        if hasattr(self, "local_mamba"):
            out["local"] = self.local_mamba
        return out


class GlomaModel(nn.Module):
    def __init__(self, cfg: GlomaConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.d
        self.embed_rtg = nn.Linear(1, d)
        self.embed_state = nn.Linear(cfg.state_dim, d)
        if cfg.action_type == "discrete":
            self.embed_action = nn.Embedding(cfg.action_dim, d)
        else:
            self.embed_action = nn.Linear(cfg.action_dim, d)
        if cfg.use_timestep_embedding:
            self.embed_timestep = nn.Embedding(cfg.max_timestep, d)
        self.layers = nn.ModuleList(GlomaLayer(cfg) for _ in range(cfg.n_layers))
        self.ln_f = nn.LayerNorm(d)
        self.head = nn.Linear(d, cfg.action_dim)

    def embed_trajectory(self, rtg, states, actions, timesteps=None, step_mask=None) -> TokenSequence:
        """Embed ``K`` steps into ``3K`` interleaved tokens.

        ``actions`` may hold ``K - 1`` entries, in which case the last action
        slot is a zero token. Steps where ``step_mask`` is False become zero
        tokens with ``pad_mask`` False.
        """
        cfg = self.cfg
        B, K = rtg.shape
        if states.shape[:2] != (B, K):
            raise ShapeError(f"states {tuple(states.shape)} do not match rtg {tuple(rtg.shape)}")
        n_act = actions.shape[1]
        if n_act not in (K, K - 1) or actions.shape[0] != B:
            raise ShapeError(f"actions {tuple(actions.shape)} do not match K={K}")
        if step_mask is None:
            step_mask = torch.ones(B, K, dtype=torch.bool)
        act_mask = step_mask.clone()
        if n_act == K - 1:
            act_mask[:, -1] = False
            fill = actions.new_zeros((B, 1) + tuple(actions.shape[2:]))
            actions = torch.cat([actions, fill], dim=1)

        dtype = self.head.weight.dtype
        r = self.embed_rtg((rtg / cfg.rtg_scale).to(dtype).unsqueeze(-1))
        s = self.embed_state(states.to(dtype))
        if cfg.action_type == "discrete":
            a_idx = actions.long()
            bad = act_mask & ((a_idx < 0) | (a_idx >= cfg.action_dim))
            if bad.any():
                raise DataError(f"discrete action out of range [0, {cfg.action_dim})")
            a = self.embed_action(torch.where(act_mask, a_idx, torch.zeros_like(a_idx)))
        else:
            a = self.embed_action(actions.to(dtype))
        if cfg.use_timestep_embedding and timesteps is not None:
            t_emb = self.embed_timestep(timesteps.long().clamp(0, cfg.max_timestep - 1))
            r, s, a = r + t_emb, s + t_emb, a + t_emb
        sm = step_mask.unsqueeze(-1).to(dtype)
        r, s = r * sm, s * sm
        a = a * act_mask.unsqueeze(-1).to(dtype)
        tokens = torch.stack([r, s, a], dim=2).reshape(B, 3 * K, cfg.d)
        mask = torch.stack([step_mask, step_mask, act_mask], dim=2).reshape(B, 3 * K)
        return TokenSequence(tokens, mask, list(ROLES) * K)

    def forward_tokens(self, tokens: torch.Tensor, l_s: int | None = None, generator=None) -> torch.Tensor:
        l_s = self.cfg.l_s if l_s is None else l_s
        x = tokens
        for layer in self.layers:
            x = layer(x, l_s, generator)
        return self.ln_f(x)

    def forward(self, rtg, states, actions, timesteps=None, step_mask=None,
                l_s: int | None = None, generator=None) -> torch.Tensor:
        """Per-step action predictions ``(B, K, action_dim)`` read at state tokens."""
        seq = self.embed_trajectory(rtg, states, actions, timesteps, step_mask)
        feats = self.forward_tokens(seq.tokens, l_s, generator)
        return self.head(feats[:, 1::3])

    def mamba_blocks(self):
        """Yield ``(layer_index, branch, block)`` for every Mamba block."""
        for i, layer in enumerate(self.layers):
            for branch, block in layer.mamba_blocks().items():
                yield i, branch, block


def build_variant(kind: str, cfg: GlomaConfig, seed: int | None = 0) -> GlomaModel:
    """Construct a model of the given variant with deterministic initialization."""
    if kind not in VARIANTS:
        raise ConfigurationError(f"unknown variant {kind!r}; expected one of {VARIANTS}")
    if cfg.variant != kind:
        cfg = GlomaConfig(**{**cfg.to_dict(), "variant": kind})
    if seed is None:
        return GlomaModel(cfg)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return GlomaModel(cfg)
