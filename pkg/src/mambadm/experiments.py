"""Train-and-evaluate legs, scaling sweeps and spectrum export.

Shared by the command-line harness and the acceptance experiments. CSV files
carry a header row and a leading ``# schema=<name> v<version>`` comment line.
Plots are SVG with the producing command line echoed in a comment and no
timestamps, so reruns with the same inputs give identical bytes.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import envs
from .checkpoint import save_checkpoint
from .data import Episode, Manifest, subsample
from .errors import ConfigurationError, MambaDMError
from .model import GlomaConfig, GlomaModel, build_variant
from .ssm import spectrum_log
from .training import EvalReport, TrainConfig, evaluate_targets, train

log = logging.getLogger(__name__)

SWEEP_SCHEMA = 1
SPECTRA_SCHEMA = 1
RESULTS_SCHEMA = 1
SWEEP_COLUMNS = ("factor", "value", "seed", "raw_return", "normalized", "wall_s", "status")
RESULTS_COLUMNS = ("env", "variant", "seed", "target_rtg", "raw_return", "normalized")

# factor name -> GlomaConfig field (dataset_size is handled by subsampling)
FACTORS = {
    "context_length": "K",
    "layer_number": "n_layers",
    "embedding_dim": "d",
    "local_length": "l_s",
    "dataset_size": None,
}

# desk-scale environments used by the acceptance experiments
TOY_ENVS = {
    "chain": lambda: envs.chain(8, 12),
    "key_door": lambda: envs.key_door(9, 2, 8, 14),
}
TOY_MIX = "expert:100,medium:100"


def env_for_manifest(manifest: Manifest) -> envs.EnvSpec:
    if not manifest.env_params:
        raise ConfigurationError(f"manifest for {manifest.env_name!r} carries no environment parameters")
    return envs.env_from_params(manifest.env_name, manifest.env_params)


@dataclass
class LegResult:
    seed: int
    reports: list
    best: int
    wall_s: float
    model: GlomaModel | None = field(default=None, repr=False)

    @property
    def best_report(self) -> EvalReport:
        return self.reports[self.best]


def run_leg(manifest: Manifest, episodes: Sequence[Episode], model_cfg: GlomaConfig, train_cfg: TrainConfig,
            targets: Sequence[float], eval_episodes: int, seed: int, out_dir=None,
            keep_model: bool = False) -> LegResult:
    """Train one model from ``seed`` and roll it out at every target return."""
    t0 = time.perf_counter()
    env = env_for_manifest(manifest)
    model = build_variant(model_cfg.variant, model_cfg, seed=seed)
    cfg = replace(train_cfg, seed=seed)
    log_path = diag = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log_path, diag = out_dir / "train_log.csv", out_dir / "diagnostic.ckpt"
    ckpt, _ = train(model, episodes, cfg, manifest=manifest, log_path=log_path, diagnostic_path=diag)
    if out_dir is not None:
        save_checkpoint(out_dir / "model.ckpt", ckpt.config, ckpt.model, ckpt.train_state,
                        ckpt.optimizer_moments, ckpt.meta)
    reports, best = evaluate_targets(model, env, targets, episodes=eval_episodes, seed=seed,
                                     random_score=manifest.random_score, expert_score=manifest.expert_score)
    return LegResult(seed, reports, best, time.perf_counter() - t0, model if keep_model else None)


def fmt(x) -> str:
    """Shortest round-trip decimal for floats; empty for missing values."""
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return ""
    return repr(float(x)) if isinstance(x, float) else str(x)


def write_csv(path, schema: str, version: int, columns: Sequence[str], rows: Sequence[dict]) -> None:
    buf = io.StringIO()
    buf.write(f"# schema={schema} v{version}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([fmt(row.get(c)) for c in columns])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def read_csv(path) -> list[dict]:
    lines = [ln for ln in Path(path).read_text(encoding="utf-8").splitlines() if not ln.startswith("#")]
    return list(csv.DictReader(lines))


# sweeps --------------------------------------------------------------------

@dataclass
class SweepSpec:
    factor: str
    values: list
    repeats: int = 1
    base_seed: int = 0

    def __post_init__(self):
        if self.factor not in FACTORS:
            raise ConfigurationError(f"unknown sweep factor {self.factor!r}; expected one of {sorted(FACTORS)}")
        if not self.values:
            raise ConfigurationError("sweep values must be nonempty")
        if self.repeats < 1:
            raise ConfigurationError("repeats must be >= 1")

    @property
    def seeds(self) -> list[int]:
        return [self.base_seed + i for i in range(self.repeats)]


def parse_values(factor: str, text: str) -> list:
    """``25%,50%,100%`` for dataset_size (or absolute transition counts); integers otherwise."""
    out = []
    for part in filter(None, (p.strip() for p in text.split(","))):
        try:
            if factor == "dataset_size" and part.endswith("%"):
                pct = float(part[:-1])
                if not 0 < pct <= 100:
                    raise ValueError
                out.append(part)
            else:
                out.append(int(part))
        except ValueError as exc:
            raise ConfigurationError(f"bad value {part!r} for factor {factor}") from exc
    return out


def dataset_target(value, total: int) -> int:
    if isinstance(value, str) and value.endswith("%"):
        return int(math.ceil(total * float(value[:-1]) / 100.0))
    return int(value)


def sweep_leg(spec: SweepSpec, value, seed: int, manifest: Manifest, episodes: Sequence[Episode],
              model_cfg: GlomaConfig, train_cfg: TrainConfig, targets: Sequence[float],
              eval_episodes: int, out_dir=None) -> dict:
    """Run one (value, seed) leg; failures are recorded rather than raised."""
    row = {"factor": spec.factor, "value": value, "seed": seed}
    t0 = time.perf_counter()
    try:
        eps = list(episodes)
        cfg = model_cfg
        if spec.factor == "dataset_size":
            total = sum(len(e) for e in eps)
            eps = subsample(eps, dataset_target(value, total), np.random.default_rng(seed))
        else:
            key = FACTORS[spec.factor]
            changes = {key: value}
            if key == "K" and cfg.l_s > 3 * value:
                changes["l_s"] = 3 * value
            cfg = GlomaConfig(**{**cfg.to_dict(), **changes})
        res = run_leg(manifest, eps, cfg, train_cfg, targets, eval_episodes, seed, out_dir)
        best = res.best_report
        row.update(raw_return=best.mean_return, normalized=best.normalized, status="ok")
    except (MambaDMError, ValueError, RuntimeError) as exc:
        log.error("sweep leg %s=%s seed %d failed: %s", spec.factor, value, seed, exc)
        row.update(raw_return=None, normalized=None, status="failed")
    row["wall_s"] = round(time.perf_counter() - t0, 3)
    return row


def _leg_worker(args):
    torch.set_num_threads(1)
    return sweep_leg(*args)


def run_sweep(spec: SweepSpec, manifest: Manifest, episodes: Sequence[Episode], model_cfg: GlomaConfig,
              train_cfg: TrainConfig, targets: Sequence[float], eval_episodes: int, out_dir=None,
              jobs: int = 1) -> list[dict]:
    """All legs of a sweep, in (value, seed) order regardless of completion order."""
    legs = []
    for vi, value in enumerate(spec.values):
        for seed in spec.seeds:
            leg_dir = None if out_dir is None else Path(out_dir) / "legs" / f"{spec.factor}_{vi}_seed{seed}"
            legs.append((spec, value, seed, manifest, episodes, model_cfg, train_cfg, targets,
                         eval_episodes, leg_dir))
    if jobs <= 1:
        return [sweep_leg(*leg) for leg in legs]
    from concurrent.futures import ProcessPoolExecutor

    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_leg_worker, legs))


def write_sweep_csv(path, rows: Sequence[dict]) -> None:
    write_csv(path, "sweep", SWEEP_SCHEMA, SWEEP_COLUMNS, rows)


def sweep_summary(rows: Sequence[dict]) -> list[tuple]:
    """``(value, mean normalized, std normalized, ok count)`` per value in first-seen order."""
    order, groups = [], {}
    for r in rows:
        key = str(r["value"])
        if key not in groups:
            order.append(key)
            groups[key] = []
        if r.get("status", "ok") == "ok" and r.get("normalized") not in (None, ""):
            groups[key].append(float(r["normalized"]))
    out = []
    for key in order:
        vals = groups[key]
        mean = float(np.mean(vals)) if vals else float("nan")
        std = float(np.std(vals)) if vals else float("nan")
        out.append((key, mean, std, len(vals)))
    return out


def _svg_figure():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "mambadm"
    return plt


def _save_svg(fig, path, command: str | None) -> None:
    buf = io.StringIO()
    fig.savefig(buf, format="svg", metadata={"Date": None, "Creator": "mambadm"})
    text = buf.getvalue()
    if command:
        safe = command.replace("--", "- -")
        head, sep, rest = text.partition("\n")
        if head.startswith("<?xml"):
            text = f"{head}\n<!-- command: {safe} -->{sep}{rest}"
        else:
            text = f"<!-- command: {safe} -->\n{text}"
    Path(path).write_text(text, encoding="utf-8")


def plot_sweep(path, factor: str, rows: Sequence[dict], command: str | None = None) -> None:
    plt = _svg_figure()
    summary = sweep_summary(rows)
    xs = list(range(len(summary)))
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.errorbar(xs, [s[1] for s in summary], yerr=[s[2] for s in summary], marker="o", capsize=4)
    ax.set_xticks(xs, [s[0] for s in summary])
    ax.set_xlabel(factor)
    ax.set_ylabel("normalized score")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    _save_svg(fig, path, command)
    plt.close(fig)


# spectra -------------------------------------------------------------------

def spectra_rows(model: GlomaModel) -> list[dict]:
    """One row per (layer, branch, channel) with ``log10|A|`` for every state index."""
    rows = []
    for layer, branch, block in model.mamba_blocks():
        spec = spectrum_log(block.A.detach())
        for ch in range(spec.shape[0]):
            row = {"layer": layer, "branch": branch, "channel": ch}
            row.update({f"n{i}": float(v) for i, v in enumerate(spec[ch])})
            rows.append(row)
    return rows


def skipped_branches(model: GlomaModel) -> list[tuple[int, str]]:
    """Branches without a Mamba block (conv mixers), reported as skipped."""
    out = []
    for i, layer in enumerate(model.layers):
        if getattr(layer, "mixer", None) is not None:
            out.append((i, "local" if layer.variant == "pmc" else "mixer"))
        if layer.variant == "global_only":
            out.append((i, "local"))
        if layer.variant == "local_only":
            out.append((i, "global"))
    return out


def write_spectra_csv(path, rows: Sequence[dict], n_state: int) -> None:
    cols = ("layer", "branch", "channel") + tuple(f"n{i}" for i in range(n_state))
    write_csv(path, "spectra", SPECTRA_SCHEMA, cols, rows)


def plot_spectra(path, rows: Sequence[dict], n_state: int, command: str | None = None) -> None:
    """One panel per layer; x is the state index, y is log10|A| over all channels."""
    plt = _svg_figure()
    layers = sorted({r["layer"] for r in rows}) or [0]
    fig, axes = plt.subplots(1, len(layers), figsize=(3.2 * len(layers), 3), sharey=True, squeeze=False)
    markers = {"global": "o", "local": "x"}
    for ax, layer in zip(axes[0], layers):
        for branch in ("global", "local"):
            sel = [r for r in rows if r["layer"] == layer and r["branch"] == branch]
            if not sel:
                continue
            xs = np.tile(np.arange(n_state), len(sel))
            ys = np.array([[r[f"n{i}"] for i in range(n_state)] for r in sel]).ravel()
            ax.scatter(xs, ys, s=6, marker=markers[branch], alpha=0.5, label=branch)
        ax.set_title(f"layer {layer}")
        ax.set_xlabel("state index")
        ax.grid(alpha=0.3)
    axes[0][0].set_ylabel("log10 |A|")
    axes[0][0].legend(loc="best", fontsize=7)
    fig.tight_layout()
    _save_svg(fig, path, command)
    plt.close(fig)
