"""Loss, learning-rate schedules, the training loop and RTG-conditioned rollouts."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .checkpoint import ModelCheckpoint, optimizer_moments, restore_optimizer, save_checkpoint
from .data import Episode, Manifest, WindowSampler
from .envs import EnvSpec
from .errors import ConfigurationError, DomainError, TrainingError, UndefinedLossError
from .model import GlomaModel

log = logging.getLogger(__name__)

SCHEDULES = ("warmup_cosine", "warmup_linear")
FINAL_LR_FRACTION = 0.1


@dataclass
class TrainConfig:
    batch_size: int = 64
    learning_rate: float = 1e-3
    adam_betas: tuple = (0.9, 0.95)
    weight_decay: float = 0.1
    grad_clip: float = 1.0
    schedule: str = "warmup_cosine"
    progress_unit: str = "steps"
    warmup: float = 100
    final_budget: float | None = None  # defaults to max_steps in step units
    max_steps: int = 2000
    seed: int = 0
    precision: str = "float32"
    loss_norm: str = "sum"
    log_every: int = 1

    def __post_init__(self):
        self.adam_betas = tuple(self.adam_betas)
        if not self.learning_rate >= 0:
            raise ConfigurationError("learning_rate must be nonnegative")
        if not self.grad_clip > 0:
            raise ConfigurationError("grad_clip must be positive")
        if not all(0 < b < 1 for b in self.adam_betas) or len(self.adam_betas) != 2:
            raise ConfigurationError("adam_betas must be two values in (0, 1)")
        if self.schedule not in SCHEDULES:
            raise ConfigurationError(f"schedule must be one of {SCHEDULES}")
        if self.progress_unit not in ("steps", "tokens"):
            raise ConfigurationError("progress_unit must be steps or tokens")
        if self.precision not in ("float32", "float64"):
            raise ConfigurationError("precision must be float32 or float64")
        if self.loss_norm not in ("sum", "mean"):
            raise ConfigurationError("loss_norm must be sum or mean")
        if self.batch_size < 1 or self.max_steps < 0:
            raise ConfigurationError("batch_size must be >= 1 and max_steps >= 0")

    @property
    def budget(self) -> float:
        return self.max_steps if self.final_budget is None else self.final_budget

    @classmethod
    def atari(cls, K: int = 30, transitions: int = 500_000, **kw) -> "TrainConfig":
        """Token-budget warmup + cosine schedule used for discrete-control data."""
        base = dict(batch_size=256, learning_rate=6e-4, adam_betas=(0.9, 0.95), weight_decay=0.1,
                    grad_clip=1.0, schedule="warmup_cosine", progress_unit="tokens",
                    warmup=512 * 20, final_budget=2 * transitions * K)
        return cls(**{**base, **kw})

    @classmethod
    def gym(cls, **kw) -> "TrainConfig":
        """Step-budget warmup then constant rate used for continuous control."""
        base = dict(batch_size=64, learning_rate=1e-4, adam_betas=(0.9, 0.999), weight_decay=1e-4,
                    grad_clip=0.25, schedule="warmup_linear", progress_unit="steps",
                    warmup=10_000, max_steps=100_000)
        return cls(**{**base, **kw})


def lr_schedule(progress: float, cfg: TrainConfig) -> float:
    """Learning rate after ``progress`` steps or tokens.

    Linear ramp from 0 over ``warmup``; then either cosine decay to 10% of the
    peak at ``budget`` (held there afterwards) or a constant peak.
    """
    peak = cfg.learning_rate
    if progress < cfg.warmup:
        return peak * progress / cfg.warmup
    if cfg.schedule == "warmup_linear":
        return peak
    span = cfg.budget - cfg.warmup
    frac = 1.0 if span <= 0 else min(1.0, (progress - cfg.warmup) / span)
    return peak * (FINAL_LR_FRACTION + (1 - FINAL_LR_FRACTION) * 0.5 * (1.0 + math.cos(math.pi * frac)))


def action_loss(preds: torch.Tensor, targets: torch.Tensor, action_type: str,
                mask: torch.Tensor, norm: str = "sum") -> torch.Tensor:
    """Masked mean over steps of cross-entropy (discrete) or squared error (continuous).

    ``norm="sum"`` sums squared error over action dimensions per step;
    ``"mean"`` averages it.
    """
    mask = mask.bool()
    if not mask.any():
        raise UndefinedLossError("loss mask selects no steps")
    p = preds[mask]
    y = targets[mask]
    if action_type == "discrete":
        return F.cross_entropy(p, y.long())
    err = (p - y.to(p.dtype)) ** 2
    per_step = err.sum(-1) if norm == "sum" else err.mean(-1)
    return per_step.mean()


def _param_groups(model: torch.nn.Module, weight_decay: float):
    decay, no_decay = [], []
    for name, p in model.named_parameters():
        leaf = name.rsplit(".", 1)[-1]
        if p.dim() >= 2 and leaf not in ("A",) and "embed" not in name:
            decay.append(p)
        else:
            no_decay.append(p)
    return [{"params": decay, "weight_decay": weight_decay},
            {"params": no_decay, "weight_decay": 0.0}]


def _grad_norm(model) -> float:
    grads = [p.grad for p in model.parameters() if p.grad is not None]
    return float(torch.linalg.vector_norm(torch.stack(torch._foreach_norm(grads)))) if grads else 0.0


def train(model: GlomaModel, episodes: Sequence[Episode], cfg: TrainConfig, manifest: Manifest | None = None,
          log_path=None, state_transform: Callable | None = None, resume: ModelCheckpoint | None = None,
          diagnostic_path=None):
    """Fit the model by return-conditioned action imitation.

    Returns ``(ModelCheckpoint, log)`` where ``log`` is a list of dicts with
    ``step, loss, lr, wall_ms, grad_norm, clipped_norm``.
    """
    mcfg = model.cfg
    if manifest is not None and (manifest.action_type != mcfg.action_type
                                 or manifest.action_dim != mcfg.action_dim
                                 or manifest.state_dim != mcfg.state_dim):
        raise ConfigurationError(
            f"model expects {mcfg.action_type}({mcfg.action_dim}) actions and state_dim {mcfg.state_dim}; "
            f"archive has {manifest.action_type}({manifest.action_dim}) and state_dim {manifest.state_dim}"
        )
    if cfg.precision == "float64":
        model.double()
    sampler = WindowSampler(episodes, mcfg.K, state_transform)
    rng = np.random.default_rng(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    opt = torch.optim.AdamW(_param_groups(model, cfg.weight_decay), lr=cfg.learning_rate,
                            betas=cfg.adam_betas, eps=1e-8, fused=True)
    step, tokens = 0, 0
    if resume is not None:
        ts = resume.train_state
        step, tokens = int(ts.get("step", 0)), int(ts.get("tokens_seen", 0))
        if "sampler_rng" in ts:
            rng.bit_generator.state = ts["sampler_rng"]
        if "dropout_rng" in ts:
            gen.set_state(torch.tensor(ts["dropout_rng"], dtype=torch.uint8))
        restore_optimizer(model, opt, resume.optimizer_moments, step)

    log_fh = None
    if log_path is not None:
        log_path = Path(log_path)
        new = not log_path.exists() or resume is None
        log_fh = open(log_path, "w" if resume is None else "a", encoding="utf-8", newline="\n")
        if new:
            log_fh.write("step,loss,lr,wall_ms\n")
    records = []
    model.train()
    t0 = time.perf_counter()
    dtype = torch.float64 if cfg.precision == "float64" else torch.float32

    def snapshot():
        return {
            "step": step,
            "tokens_seen": tokens,
            "sampler_rng": rng.bit_generator.state,
            "dropout_rng": gen.get_state().tolist(),
            "train_config": {**asdict(cfg), "adam_betas": list(cfg.adam_betas)},
        }

    meta = {"manifest": manifest.to_dict()} if manifest is not None else {}
    try:
        while step < cfg.max_steps:
            progress = tokens if cfg.progress_unit == "tokens" else step
            lr = lr_schedule(progress, cfg)
            for g in opt.param_groups:
                g["lr"] = lr
            batch = sampler.sample_batch(cfg.batch_size, rng)
            states = batch["states"].to(dtype)
            actions = batch["actions"] if mcfg.action_type == "discrete" else batch["actions"].to(dtype)
            preds = model(batch["rtg"].to(dtype), states, actions, batch["timesteps"], batch["mask"],
                          generator=gen)
            loss = action_loss(preds, actions, mcfg.action_type, batch["mask"], cfg.loss_norm)
            if not torch.isfinite(loss):
                if diagnostic_path is not None:
                    save_checkpoint(diagnostic_path, mcfg, model, snapshot(), meta=meta)
                raise TrainingError(f"non-finite loss {float(loss.detach())} at step {step}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            pre = float(torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip))
            post = _grad_norm(model)
            opt.step()
            step += 1
            tokens += int(batch["mask"].sum())
            wall_ms = int((time.perf_counter() - t0) * 1000)
            rec = {"step": step, "loss": float(loss.detach()), "lr": lr, "wall_ms": wall_ms,
                   "grad_norm": pre, "clipped_norm": post}
            records.append(rec)
            if log_fh is not None and (step % cfg.log_every == 0 or step == cfg.max_steps):
                log_fh.write(f"{step},{float(loss.detach())!r},{lr!r},{wall_ms}\n")
    finally:
        if log_fh is not None:
            log_fh.close()
    model.eval()
    ckpt = ModelCheckpoint(mcfg, model, snapshot(), optimizer_moments(model, opt), meta)
    return ckpt, records


# evaluation ----------------------------------------------------------------

def normalized_score(raw: float, random_score: float, expert_score: float) -> float:
    if not expert_score > random_score:
        raise DomainError(f"expert score {expert_score} must exceed random score {random_score}")
    return 100.0 * (raw - random_score) / (expert_score - random_score)


@dataclass
class EvalReport:
    returns: list
    mean_return: float
    std_return: float
    normalized: float | None
    target_rtg: float
    seed: int
    episodes: int
    rtg_traces: list | None = field(default=None, repr=False)

    def to_dict(self, include_traces: bool = False) -> dict:
        d = asdict(self)
        if not include_traces:
            d.pop("rtg_traces")
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


@torch.no_grad()
def rollout(model: GlomaModel, env: EnvSpec, target_rtg: float, K: int | None = None, episodes: int = 10,
            seed: int = 0, state_transform: Callable | None = None, sample: bool = False,
            random_score: float | None = None, expert_score: float | None = None,
            record_trace: bool = False) -> EvalReport:
    """Return-conditioned evaluation.

    Episodes run in lock-step as one batch. Each step feeds the last ``K``
    steps with the current action slot left empty, sets the local sub-sequence
    length to the whole token count, and picks the argmax action (lowest index
    on ties) unless ``sample`` is set. The conditioning return is decremented
    by every reward received.
    """
    if episodes < 1:
        raise ConfigurationError("episodes must be >= 1")
    K = model.cfg.K if K is None else K
    was_training = model.training
    model.eval()
    dtype = model.head.weight.dtype
    rng = np.random.default_rng(seed)
    transform = state_transform or (lambda s: s)

    states = [[env.reset(seed)] for _ in range(episodes)]
    obs = [[transform(env.observe(s[0]))] for s in states]
    rtgs = [[float(target_rtg)] for _ in range(episodes)]
    acts: list[list[int]] = [[] for _ in range(episodes)]
    returns = [0.0] * episodes
    active = list(range(episodes))
    t = 0
    while active:
        lo = max(0, t + 1 - K)
        rtg_b = torch.tensor([rtgs[i][lo:] for i in active], dtype=dtype)
        st_b = torch.tensor(np.array([obs[i][lo:] for i in active]), dtype=dtype)
        act_b = torch.tensor([acts[i][lo:] for i in active], dtype=torch.long).reshape(len(active), -1)
        ts_b = torch.arange(lo, t + 1).expand(len(active), -1)
        w = t + 1 - lo
        logits = model(rtg_b, st_b, act_b, ts_b, l_s=3 * w)[:, -1]
        if sample:
            probs = torch.softmax(logits.double(), -1).numpy()
            chosen = [int(rng.choice(len(p), p=p / p.sum())) for p in probs]
        else:
            chosen = logits.argmax(-1).tolist()
        still = []
        for i, a in zip(active, chosen):
            s_next, r, done = env.step(states[i][-1], a)
            returns[i] += r
            acts[i].append(a)
            if not done:
                states[i].append(s_next)
                obs[i].append(transform(env.observe(s_next)))
                rtgs[i].append(rtgs[i][-1] - r)
                still.append(i)
        active = still
        t += 1
    if was_training:
        model.train()

    ordered = sorted(returns)
    mean = float(np.mean(ordered))
    std = float(np.std(ordered))
    norm = None
    if random_score is not None and expert_score is not None:
        norm = normalized_score(mean, random_score, expert_score)
    return EvalReport(returns, mean, std, norm, float(target_rtg), seed, episodes,
                      rtgs if record_trace else None)


def evaluate_targets(model: GlomaModel, env: EnvSpec, targets: Sequence[float], **kw):
    """Roll out at each target return; returns ``(reports, index of best mean return)``."""
    reports = [rollout(model, env, tr, **kw) for tr in targets]
    best = max(range(len(reports)), key=lambda i: (reports[i].mean_return, -i))
    return reports, best
