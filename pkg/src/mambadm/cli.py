"""Command-line entry point: ``mambadm {gen-data,train,eval,sweep,spectra}``.

Config precedence is built-in defaults < ``--config`` file (``key=value``
lines, keys are long flag names with or without dashes) < explicit flags.
Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 training failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import shlex
import sys
from pathlib import Path

import torch

from . import __version__, envs, experiments
from .checkpoint import load_checkpoint, save_checkpoint
from .data import load_archive
from .errors import ConfigurationError, DataError, LoadError, MambaDMError, TrainingError
from .model import VARIANTS, GlomaConfig, build_variant
from .training import SCHEDULES, TrainConfig, evaluate_targets, train

log = logging.getLogger("mambadm")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_TRAIN = 0, 1, 2, 3


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _float_list(text: str) -> list[float]:
    try:
        vals = [float(p) for p in text.split(",") if p.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc
    if not vals:
        raise argparse.ArgumentTypeError("expected at least one value")
    return vals


def _bool(text: str) -> bool:
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", default=".")
    p.add_argument("--config", default=None, help="key=value file; explicit flags take precedence")
    p.add_argument("--threads", type=_positive_int, default=1, help="torch intra-op threads (1 = reproducible)")
    p.add_argument("--log-level", default="INFO")


def _model_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model")
    g.add_argument("--variant", choices=VARIANTS, default="gloma")
    g.add_argument("--d", type=_positive_int, default=64)
    g.add_argument("--layers", type=_positive_int, default=3)
    g.add_argument("--K", type=_positive_int, default=10)
    g.add_argument("--l-s", type=_positive_int, default=6)
    g.add_argument("--n-state", type=_positive_int, default=16)
    g.add_argument("--dropout", type=float, default=0.1)
    g.add_argument("--a-init", choices=("neg_ramp", "neg_half"), default="neg_ramp")
    g.add_argument("--conv-width", type=_positive_int, default=4)
    g.add_argument("--expand", type=_positive_int, default=1)
    g.add_argument("--full-delta", type=_bool, default=False)
    g.add_argument("--learnable-d", type=_bool, default=False)
    g.add_argument("--clamp-a-negative", type=_bool, default=False)
    g.add_argument("--timestep-embedding", type=_bool, default=False)
    g.add_argument("--backend", choices=("auto", "fused", "parallel", "sequential"), default="auto")
    g.add_argument("--state-dim", type=_positive_int, default=None, help="defaults to the archive manifest")
    g.add_argument("--action-dim", type=_positive_int, default=None, help="defaults to the archive manifest")
    g.add_argument("--action-type", choices=("discrete", "continuous"), default=None)


def _train_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("training")
    g.add_argument("--data", required=True, help="trajectory archive")
    g.add_argument("--steps", type=int, default=2000)
    g.add_argument("--batch-size", type=_positive_int, default=64)
    g.add_argument("--lr", type=float, default=1e-3)
    g.add_argument("--betas", type=_float_list, default=[0.9, 0.95])
    g.add_argument("--weight-decay", type=float, default=0.1)
    g.add_argument("--grad-clip", type=float, default=1.0)
    g.add_argument("--schedule", choices=SCHEDULES, default="warmup_cosine")
    g.add_argument("--progress-unit", choices=("steps", "tokens"), default="steps")
    g.add_argument("--warmup", type=float, default=100)
    g.add_argument("--final-budget", type=float, default=None)
    g.add_argument("--precision", choices=("float32", "float64"), default="float32")
    g.add_argument("--loss-norm", choices=("sum", "mean"), default="sum")


def _eval_flags(p: argparse.ArgumentParser, default_episodes: int) -> None:
    g = p.add_argument_group("evaluation")
    g.add_argument("--target-rtg", type=_float_list, default=None,
                   help="comma-separated targets; defaults to the manifest expert score")
    g.add_argument("--episodes", type=_positive_int, default=default_episodes)


def build_parser() -> dict:
    root = Parser(prog="mambadm", description=__doc__.splitlines()[0])
    root.add_argument("--version", action="version", version=f"mambadm {__version__}")
    sub = root.add_subparsers(dest="command", parser_class=Parser, required=True)

    p = sub.add_parser("gen-data", help="roll out behaviour policies on a toy MDP")
    _common(p)
    p.add_argument("--env", choices=("chain", "key_door"), required=True)
    p.add_argument("--n", type=_positive_int, default=8, help="chain length")
    p.add_argument("--length", type=_positive_int, default=9, help="key_door corridor length")
    p.add_argument("--key", type=int, default=2)
    p.add_argument("--door", type=int, default=8)
    p.add_argument("--horizon", type=_positive_int, default=12)
    p.add_argument("--mix", default=experiments.TOY_MIX, help="policy:count list, e.g. expert:100,medium:100")
    p.add_argument("--out", required=True, help="archive path (relative to --out-dir)")
    subs = {"gen-data": p}

    p = sub.add_parser("train", help="train a model on an archive")
    _common(p)
    _model_flags(p)
    _train_flags(p)
    subs["train"] = p

    p = sub.add_parser("eval", help="return-conditioned rollouts of a checkpoint")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    _eval_flags(p, default_episodes=10)
    p.add_argument("--K", type=_positive_int, default=None, help="context length override")
    p.add_argument("--sample", type=_bool, default=False, help="sample actions instead of argmax")
    subs["eval"] = p

    p = sub.add_parser("sweep", help="scaling-factor sweep: train and evaluate per value and seed")
    _common(p)
    _model_flags(p)
    _train_flags(p)
    _eval_flags(p, default_episodes=10)
    p.add_argument("--factor", choices=sorted(experiments.FACTORS), required=True)
    p.add_argument("--values", required=True, help="comma list; dataset_size accepts percentages")
    p.add_argument("--repeats", type=_positive_int, default=1)
    p.add_argument("--jobs", type=_positive_int, default=1, help="parallel leg processes")
    subs["sweep"] = p

    p = sub.add_parser("spectra", help="export log10|A| of every Mamba block")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    subs["spectra"] = p
    return {"root": root, **subs}


def _apply_config_file(parser: argparse.ArgumentParser, path: str) -> None:
    """Install ``key=value`` lines as parser defaults, converted by each flag's type."""
    actions = {a.dest: a for a in parser._actions if a.option_strings}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from exc
    defaults = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        dest = key.lstrip("-").replace("-", "_")
        act = actions.get(dest)
        if act is None or dest in ("config", "help"):
            raise UsageError(f"{path}:{lineno}: unknown key {key!r}")
        try:
            conv = act.type(value) if act.type else value
        except (argparse.ArgumentTypeError, ValueError) as exc:
            raise UsageError(f"{path}:{lineno}: bad value for {key}: {exc}") from exc
        if act.choices is not None and conv not in act.choices:
            raise UsageError(f"{path}:{lineno}: {key} must be one of {list(act.choices)}")
        defaults[dest] = conv
        act.required = False
    parser.set_defaults(**defaults)


def _find_config(argv) -> tuple[str | None, str | None]:
    """The subcommand and ``--config`` path, found before full parsing so the
    file can satisfy required flags."""
    command = next((a for a in argv if not a.startswith("-")), None)
    path = None
    for i, a in enumerate(argv):
        if a == "--config" and i + 1 < len(argv):
            path = argv[i + 1]
        elif a.startswith("--config="):
            path = a.split("=", 1)[1]
    return command, path


def parse_args(argv):
    parsers = build_parser()
    command, path = _find_config(argv)
    if path and command in parsers:
        _apply_config_file(parsers[command], path)
    return parsers["root"].parse_args(argv)


def _resolve(out_dir: str, path: str) -> Path:
    p = Path(path)
    return p if p.is_absolute() else Path(out_dir) / p


def _model_config(args, manifest) -> GlomaConfig:
    return GlomaConfig(
        state_dim=args.state_dim or manifest.state_dim,
        action_dim=args.action_dim or manifest.action_dim,
        action_type=args.action_type or manifest.action_type,
        d=args.d, n_layers=args.layers, K=args.K, l_s=args.l_s, N_state=args.n_state,
        dropout=args.dropout, variant=args.variant, a_init=args.a_init, conv_width=args.conv_width,
        expand=args.expand, full_delta=args.full_delta, learnable_D=args.learnable_d,
        clamp_A_negative=args.clamp_a_negative, use_timestep_embedding=args.timestep_embedding,
        backend=args.backend,
    )


def _train_config(args) -> TrainConfig:
    return TrainConfig(
        batch_size=args.batch_size, learning_rate=args.lr, adam_betas=tuple(args.betas),
        weight_decay=args.weight_decay, grad_clip=args.grad_clip, schedule=args.schedule,
        progress_unit=args.progress_unit, warmup=args.warmup, final_budget=args.final_budget,
        max_steps=args.steps, seed=args.seed, precision=args.precision, loss_norm=args.loss_norm,
    )


def cmd_gen_data(args, command: str) -> int:
    if args.env == "chain":
        env = envs.chain(args.n, args.horizon)
    else:
        env = envs.key_door(args.length, args.key, args.door, args.horizon)
    mix = envs.parse_mix(args.mix)
    out = _resolve(args.out_dir, args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    manifest, episodes = envs.generate_dataset(env, mix, args.seed, out)
    mean = sum(e.total_return for e in episodes) / len(episodes) if episodes else float("nan")
    print(f"wrote {out}: env={manifest.env_name} episodes={manifest.episode_count} "
          f"transitions={sum(len(e) for e in episodes)} mean_return={mean:.4f} "
          f"random_score={manifest.random_score:.4f} expert_score={manifest.expert_score:.4f}")
    return EXIT_OK


def cmd_train(args, command: str) -> int:
    manifest, episodes = load_archive(args.data)
    cfg = _model_config(args, manifest)
    tcfg = _train_config(args)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model = build_variant(cfg.variant, cfg, seed=args.seed)
    ckpt, records = train(model, episodes, tcfg, manifest=manifest, log_path=out / "train_log.csv",
                          diagnostic_path=out / "diagnostic.ckpt")
    save_checkpoint(out / "model.ckpt", ckpt.config, ckpt.model, ckpt.train_state,
                    ckpt.optimizer_moments, ckpt.meta)
    final = records[-1]["loss"] if records else float("nan")
    print(f"trained {cfg.variant} for {tcfg.max_steps} steps; final loss {final:.6f}; "
          f"wrote {out / 'model.ckpt'} and {out / 'train_log.csv'}")
    return EXIT_OK


def _manifest_from_meta(meta: dict, path: str):
    from .data import Manifest

    m = meta.get("manifest")
    if not m:
        raise LoadError(f"{path}: checkpoint carries no archive manifest; cannot build the environment")
    return Manifest(**m)


def cmd_eval(args, command: str) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    manifest = _manifest_from_meta(ckpt.meta, args.checkpoint)
    env = experiments.env_for_manifest(manifest)
    if ckpt.config.action_type != "discrete" or ckpt.config.action_dim != envs.N_ACTIONS \
            or ckpt.config.state_dim != env.state_dim:
        raise LoadError(f"{args.checkpoint}: checkpoint is incompatible with environment {env.name}")
    targets = args.target_rtg or [manifest.expert_score]
    reports, best = evaluate_targets(ckpt.model, env, targets, K=args.K, episodes=args.episodes,
                                     seed=args.seed, sample=args.sample, random_score=manifest.random_score,
                                     expert_score=manifest.expert_score)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = []
    for i, rep in enumerate(reports):
        row = {**rep.to_dict(), "best": i == best}
        lines.append(json.dumps(row, sort_keys=True))
        mark = "  <- best" if i == best else ""
        print(f"target_rtg={rep.target_rtg:g} mean_return={rep.mean_return:.4f} "
              f"std={rep.std_return:.4f} normalized={rep.normalized:.2f}{mark}")
    (out / "eval_report.jsonl").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_sweep(args, command: str) -> int:
    manifest, episodes = load_archive(args.data)
    spec = experiments.SweepSpec(args.factor, experiments.parse_values(args.factor, args.values),
                                 args.repeats, args.seed)
    cfg = _model_config(args, manifest)
    tcfg = _train_config(args)
    targets = args.target_rtg or [manifest.expert_score]
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = experiments.run_sweep(spec, manifest, episodes, cfg, tcfg, targets, args.episodes, out, args.jobs)
    experiments.write_sweep_csv(out / "sweep.csv", rows)
    experiments.plot_sweep(out / "sweep.svg", spec.factor, rows, command)
    for value, mean, std, n in experiments.sweep_summary(rows):
        print(f"{spec.factor}={value}: normalized {mean:.2f} +- {std:.2f} over {n} seeds")
    failed = sum(r["status"] != "ok" for r in rows)
    if failed:
        print(f"{failed} sweep leg(s) failed", file=sys.stderr)
        return EXIT_TRAIN
    return EXIT_OK


def cmd_spectra(args, command: str) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    rows = experiments.spectra_rows(ckpt.model)
    for layer, branch in experiments.skipped_branches(ckpt.model):
        print(f"notice: layer {layer} {branch} branch has no Mamba block; skipped")
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n = ckpt.config.N_state
    experiments.write_spectra_csv(out / "spectra.csv", rows, n)
    experiments.plot_spectra(out / "spectra.svg", rows, n, command)
    print(f"wrote {len(rows)} spectrum rows to {out / 'spectra.csv'}")
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "spectra": cmd_spectra,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO),
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(args.threads)
    command = "mambadm " + " ".join(shlex.quote(a) for a in argv)
    try:
        return COMMANDS[args.command](args, command)
    except TrainingError as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return EXIT_TRAIN
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except MambaDMError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
