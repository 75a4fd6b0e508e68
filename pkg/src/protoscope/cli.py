"""protoscope command line: collect, discover, wrap, eval, baseline, ablate.

Configuration is a flat key=value text file; command-line flags override
file values, and unknown keys are rejected. Every report row embeds a
hash of the configuration that produced it. PROTOSCOPE_SEED serves as
the seed fallback when --seed is not given.
"""

from __future__ import annotations

import argparse
import os
import sys
import time
from dataclasses import fields, replace

import numpy as np

from . import discover as disc
from . import envlab, pwnet, report, synthfix
from .dataset import collect_rollout, load_dataset, save_dataset
from .discover import Stage1Config
from .embednet import gradient_check_report
from .errors import ConfigError, ProtoscopeError
from .pwnet import Stage2Config

_STAGE1_KEYS = {f.name: f for f in fields(Stage1Config)}
_STAGE2_KEYS = {"stage2_epochs": int, "stage2_batch_size": int,
                "stage2_lr": float, "stage2_lr_decay": float, "stage2_seed": int}
_GLOBAL_KEYS = {"env": str, "steps": int, "episodes": int, "out_dir": str}


def _default_seed() -> int:
    return int(os.environ.get("PROTOSCOPE_SEED", "0"))


def _parse_config_value(key: str, raw: str):
    if key in _STAGE1_KEYS:
        f = _STAGE1_KEYS[key]
        if key in ("n_anchors", "k_max_neighbors"):
            return None if raw == "none" else int(raw)
        if isinstance(f.default, bool):
            return raw.lower() in ("true", "1")
        if isinstance(f.default, int):
            return int(raw)
        if isinstance(f.default, float):
            return float(raw)
        return raw
    caster = _STAGE2_KEYS.get(key) or _GLOBAL_KEYS.get(key)
    return caster(raw)


def load_config_file(path) -> dict:
    """Flat key=value file; blank lines and #-comments allowed."""
    known = set(_STAGE1_KEYS) | set(_STAGE2_KEYS) | set(_GLOBAL_KEYS)
    values = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, _, raw = line.partition("=")
            key, raw = key.strip(), raw.strip()
            if key not in known:
                raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
            try:
                values[key] = _parse_config_value(key, raw)
            except ValueError as exc:
                raise ConfigError(f"{path}:{lineno}: bad value for {key}: {exc}") from exc
    return values


def _add_stage1_flags(parser: argparse.ArgumentParser) -> None:
    defaults = Stage1Config()
    group = parser.add_argument_group("stage-1 options (defaults in parentheses)")
    flag = {
        "epochs": int, "batch_size": int, "lr_net": float, "lr_proxy": float,
        "lr_decay": float, "gamma": float, "alpha": float, "eps_margin": float,
        "delta": float, "m": int, "T": float, "N_alpha": float, "N_beta": float,
        "n_anchors": int, "k_max_neighbors": int, "prototypes_per_class": int,
        "prototype_dim": int, "norm_epsilon": float, "workers": int,
    }
    for name, caster in flag.items():
        group.add_argument(f"--{name.replace('_', '-').lower()}", dest=name,
                           type=caster, default=None,
                           help=f"({getattr(defaults, name)})")
    group.add_argument("--sign-mode", dest="sign_mode", default=None,
                       choices=("semantic", "as_printed"), help="(semantic)")
    group.add_argument("--chart-space", dest="chart_space", default=None,
                       choices=("input", "embedding"), help="(input)")
    group.add_argument("--deterministic", dest="deterministic", default=None,
                       action="store_true", help="(True) single-worker, bitwise runs")


def _stage1_config(args) -> Stage1Config:
    values = {}
    if getattr(args, "config", None):
        file_values = load_config_file(args.config)
        values.update({k: v for k, v in file_values.items() if k in _STAGE1_KEYS})
    for name in _STAGE1_KEYS:
        if getattr(args, name, None) is not None:
            values[name] = getattr(args, name)
    if "seed" not in values:
        values["seed"] = getattr(args, "seed", None)
        if values["seed"] is None:
            values["seed"] = _default_seed()
    return Stage1Config(**values)


def _stage2_config(args, fallback_seed: int) -> Stage2Config:
    values = {}
    if getattr(args, "config", None):
        file_values = load_config_file(args.config)
        values = {k[len("stage2_"):]: v for k, v in file_values.items()
                  if k in _STAGE2_KEYS}
    for flag_name, cfg_name in (("stage2_epochs", "epochs"),
                                ("stage2_batch_size", "batch_size"),
                                ("stage2_lr", "lr"),
                                ("stage2_lr_decay", "lr_decay"),
                                ("stage2_seed", "seed")):
        value = getattr(args, flag_name, None)
        if value is not None:
            values[cfg_name] = value
    values.setdefault("seed", fallback_seed)
    return Stage2Config(**values)


def _encoder_fn(weight: np.ndarray, bias: np.ndarray):
    return lambda s: np.tanh(weight @ np.asarray(s, dtype=np.float64) + bias)


# ---------------------------------------------------------------- commands


def cmd_collect(args) -> int:
    env = envlab.make_env(args.env)
    seed = args.seed if args.seed is not None else _default_seed()
    if args.policy:
        policy = envlab.load_policy(args.policy)
    else:
        cem = envlab.CEMConfig(
            hidden_dim=args.bb_hidden, population=args.bb_pop,
            iterations=args.bb_iters, target_reward=args.bb_target,
        )
        policy = envlab.train_blackbox(env, cem, seed=seed)
    if args.policy_out:
        envlab.save_policy(policy, args.policy_out)
    ds = collect_rollout(policy.decomposition(), env, args.steps, seed)
    save_dataset(ds, args.out)
    print(f"collected {len(ds)} rows from {args.env} "
          f"(d_z={ds.d_z}, C={ds.n_classes}) -> {args.out}")
    return 0


def cmd_fixture(args) -> int:
    seed = args.seed if args.seed is not None else _default_seed()
    ds, _ = synthfix.make_planes_fixture(
        n_classes=args.classes, n_per_class=args.per_class,
        d=args.dim, sigma=args.sigma, seed=seed,
    )
    save_dataset(ds, args.out)
    print(f"fixture '{args.name}': {len(ds)} rows, C={ds.n_classes} -> {args.out}")
    return 0


def cmd_discover(args) -> int:
    cfg = _stage1_config(args)
    ds = load_dataset(args.data)
    state = disc.train_stage1(ds, cfg)
    disc.save_state(state, args.out)
    if state.loss_history:
        last = state.loss_history[-1]
        print(f"stage 1 done: {cfg.epochs} epochs, final total loss "
              f"{last.total:.6g} -> {args.out}")
    else:
        print(f"stage 1 done: 0 epochs -> {args.out}")
    return 0


def cmd_baseline(args) -> int:
    ds = load_dataset(args.data)
    seed = args.seed if args.seed is not None else _default_seed()
    if args.method == "kmeans":
        protos = envlab.kmeans_prototypes(ds, seed=seed, per_class=args.per_class)
    elif args.method == "classmean":
        protos = envlab.class_mean_prototypes(ds)
    else:
        protos = envlab.canonical_prototypes(ds)
    disc.save_prototypes(protos, args.out)
    rows = ", ".join(str(e.dataset_index) for e in protos.entries)
    print(f"{args.method} prototypes: rows [{rows}] -> {args.out}")
    return 0


def cmd_wrap(args) -> int:
    state = disc.load_state(args.ckpt)
    ds = load_dataset(args.data)
    seed = args.seed if args.seed is not None else _default_seed()
    if args.protos:
        protos = disc.load_prototypes(args.protos)
    else:
        protos = disc.extract_prototypes(state, ds)
    head = pwnet.build_head(protos, state.net, n_actions=ds.n_actions,
                            eps_sim=args.eps_sim, seed=seed)
    cfg2 = _stage2_config(args, fallback_seed=seed)
    pwnet.train_stage2(head, ds, cfg2)
    enc_w = enc_b = None
    if args.policy:
        policy = envlab.load_policy(args.policy)
        enc_w, enc_b = policy.enc_weight, policy.enc_bias
    pwnet.save_head(head, args.out, enc_w, enc_b, env_name=ds.env_name)
    print(f"wrapped head ({head.method}): imitation mse "
          f"{pwnet.imitation_mse(head, ds):.6g}, label agreement "
          f"{pwnet.action_agreement(head, ds):.3f} -> {args.out}")
    return 0


def _append_csv(path, row, columns) -> None:
    exists = os.path.exists(path)
    data_line = report.format_csv([row], columns).split("\n")[1]
    with open(path, "a", encoding="utf-8", newline="\n") as fh:
        if not exists:
            fh.write(",".join(columns) + "\n")
        fh.write(data_line + "\n")


def cmd_eval(args) -> int:
    if bool(args.head) == bool(args.policy):
        raise ConfigError("exactly one of --head or --policy is required")
    env = envlab.make_env(args.env)
    seed = args.seed if args.seed is not None else _default_seed()
    if args.head:
        head, enc_w, enc_b, _ = pwnet.load_head(args.head)
        if enc_w is None:
            raise ConfigError(
                "head file has no embedded encoder; re-run wrap with --policy"
            )
        actor = pwnet.head_actor(head, _encoder_fn(enc_w, enc_b), env)
        method = head.method
    else:
        policy = envlab.load_policy(args.policy)
        actor = pwnet.policy_actor(policy, env)
        method = "blackbox"
    stats = pwnet.evaluate(actor, env, args.episodes, seed)
    row = {
        "method": method, "env": args.env, "mean_reward": stats.mean,
        "stderr": stats.stderr, "episodes": args.episodes, "seed": seed,
        "config_hash": report.config_hash({
            "method": method, "env": args.env,
            "episodes": args.episodes, "seed": seed,
        }),
    }
    if args.out:
        _append_csv(args.out, row, report.EVAL_COLUMNS)
    sys.stdout.write(report.format_csv([row], report.EVAL_COLUMNS))
    return 0


_ABLATE_FIELDS = {
    "m": ("m", int), "gamma": ("gamma", float), "n_alpha": ("N_alpha", float),
    "n_beta": ("N_beta", float), "T": ("T", float), "delta": ("delta", float),
    "alpha": ("alpha", float), "eps_margin": ("eps_margin", float),
    "prototypes": ("prototypes_per_class", int),
}


def _planes_point(cfg: Stage1Config, args, seed: int):
    """Fixture-backed pipeline: held-out action agreement as the reward."""
    ds, _ = synthfix.make_planes_fixture(
        n_classes=args.classes, n_per_class=args.per_class,
        d=args.dim, sigma=args.sigma, seed=seed,
    )
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(ds))
    split = max(1, int(0.8 * len(ds)))

    def subset(rows):
        return type(ds)(
            z=ds.z[rows], raw_actions=ds.raw_actions[rows], labels=ds.labels[rows],
            layout=ds.layout, env_name=ds.env_name, seed=ds.seed,
            action_kind=ds.action_kind,
        )

    train_ds, test_ds = subset(perm[:split]), subset(perm[split:])
    state = disc.train_stage1(train_ds, cfg)
    protos = disc.extract_prototypes(state, train_ds)
    head = pwnet.build_head(protos, state.net, n_actions=ds.n_actions, seed=seed)
    pwnet.train_stage2(head, train_ds, _stage2_config(args, fallback_seed=seed))
    return pwnet.action_agreement(head, test_ds), 0.0


def _env_point(cfg: Stage1Config, args, seed: int, env, policy, ds):
    state = disc.train_stage1(ds, cfg)
    protos = disc.extract_prototypes(state, ds)
    head = pwnet.build_head(protos, state.net, n_actions=ds.n_actions, seed=seed)
    pwnet.train_stage2(head, ds, _stage2_config(args, fallback_seed=seed))
    actor = pwnet.head_actor(head, policy.encode, env)
    stats = pwnet.evaluate(actor, env, args.episodes, seed)
    return stats.mean, stats.stderr


def cmd_ablate(args) -> int:
    if args.parameter not in _ABLATE_FIELDS:
        raise ConfigError(
            f"unknown ablation parameter {args.parameter!r}; "
            f"choose from {sorted(_ABLATE_FIELDS)}"
        )
    field_name, caster = _ABLATE_FIELDS[args.parameter]
    try:
        values = [caster(v) for v in args.values.split(",") if v != ""]
    except ValueError as exc:
        raise ConfigError(f"bad --values list: {exc}") from exc
    if not values:
        raise ConfigError("--values must list at least one value")

    base_cfg = _stage1_config(args)
    seed = base_cfg.seed
    os.makedirs(args.out_dir, exist_ok=True)

    env = policy = ds = None
    if args.env != "planes":
        env = envlab.make_env(args.env)
        cem = envlab.CEMConfig(hidden_dim=args.bb_hidden, population=args.bb_pop,
                               iterations=args.bb_iters, target_reward=args.bb_target)
        policy = envlab.train_blackbox(env, cem, seed=seed)
        ds = collect_rollout(policy.decomposition(), env, args.steps, seed)

    rows = []
    for value in values:
        cfg = replace(base_cfg, **{field_name: value})
        started = time.perf_counter()
        if args.env == "planes":
            mean, stderr = _planes_point(cfg, args, seed)
            episodes = 0
        else:
            mean, stderr = _env_point(cfg, args, seed, env, policy, ds)
            episodes = args.episodes
        elapsed = time.perf_counter() - started
        rows.append({
            "parameter": args.parameter, "value": value, "method": "ours",
            "env": args.env, "mean_reward": mean, "stderr": stderr,
            "episodes": episodes, "seed": seed,
            "config_hash": report.config_hash(disc.config_to_meta(cfg)),
            "wall_time_s": round(elapsed, 3),
        })
        print(f"{args.parameter}={value}: reward {mean:.4f} ({elapsed:.1f}s)")

    csv_path = os.path.join(args.out_dir, f"ablate_{args.parameter}.csv")
    svg_path = os.path.join(args.out_dir, f"ablate_{args.parameter}.svg")
    report.write_csv(csv_path, rows, report.ABLATION_COLUMNS)
    report.svg_curve(
        svg_path, [r["value"] for r in rows], [r["mean_reward"] for r in rows],
        xlabel=args.parameter, ylabel="reward",
        title=f"Reward vs {args.parameter} ({args.env})",
    )
    _write_trend_note(args, rows)
    print(f"wrote {csv_path} and {svg_path}")
    return 0


def _write_trend_note(args, rows) -> None:
    # observed direction is recorded, never asserted
    means = [r["mean_reward"] for r in rows]
    if len(means) > 1:
        direction = "rising" if means[-1] > means[0] else (
            "falling" if means[-1] < means[0] else "flat")
    else:
        direction = "single point"
    path = os.path.join(args.out_dir, f"ablate_{args.parameter}_notes.txt")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"parameter: {args.parameter}\n")
        fh.write(f"values: {[r['value'] for r in rows]}\n")
        fh.write(f"rewards: {means}\n")
        fh.write(f"observed trend: {direction}\n")


def cmd_gradcheck(args) -> int:
    seed = args.seed if args.seed is not None else _default_seed()
    result = gradient_check_report(seed=seed, corrupt=args.corrupt)
    failures = []
    for component, err in result.items():
        status = "PASS" if err < 1e-4 else "FAIL"
        print(f"{component}: max rel err {err:.3e} {status}")
        if err >= 1e-4:
            failures.append(component)
    if failures:
        print(f"error: gradient check failed for {','.join(failures)}",
              file=sys.stderr)
        return 1
    return 0


# ---------------------------------------------------------------- parser


def _add_bb_flags(parser) -> None:
    group = parser.add_argument_group("black-box training")
    group.add_argument("--bb-hidden", type=int, default=16, help="(16) encoder width")
    group.add_argument("--bb-pop", type=int, default=48, help="(48) CEM population")
    group.add_argument("--bb-iters", type=int, default=60, help="(60) CEM iteration cap")
    group.add_argument("--bb-target", type=float, default=None,
                       help="target mean reward (env default)")


def _add_stage2_flags(parser) -> None:
    group = parser.add_argument_group("stage-2 options")
    group.add_argument("--stage2-epochs", type=int, default=None, help="(10)")
    group.add_argument("--stage2-batch-size", type=int, default=None, help="(128)")
    group.add_argument("--stage2-lr", type=float, default=None, help="(0.01)")
    group.add_argument("--stage2-lr-decay", type=float, default=None, help="(0.97)")
    group.add_argument("--stage2-seed", type=int, default=None)


def _add_fixture_flags(parser) -> None:
    parser.add_argument("--classes", type=int, default=3, help="(3)")
    parser.add_argument("--per-class", type=int, default=500, help="(500)")
    parser.add_argument("--dim", type=int, default=10, help="(10)")
    parser.add_argument("--sigma", type=float, default=0.01, help="(0.01)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="protoscope",
        description="Automated geometry-aware prototype discovery for RL policies",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("collect", help="roll out a black-box policy into a dataset")
    p.add_argument("--env", required=True, choices=("cartpole", "pointmass"))
    p.add_argument("--steps", type=int, required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--policy", help="load a saved policy instead of training")
    p.add_argument("--policy-out", help="save the trained policy here")
    _add_bb_flags(p)
    p.set_defaults(func=cmd_collect)

    p = sub.add_parser("fixture", help="generate a synthetic fixture dataset")
    p.add_argument("--name", default="planes", choices=("planes",))
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    _add_fixture_flags(p)
    p.set_defaults(func=cmd_fixture)

    p = sub.add_parser("discover", help="stage-1 prototype discovery training")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--seed", type=int, default=None)
    _add_stage1_flags(p)
    p.set_defaults(func=cmd_discover)

    p = sub.add_parser("baseline", help="baseline prototype selectors")
    p.add_argument("--method", required=True,
                   choices=("kmeans", "classmean", "canonical"))
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--per-class", type=int, default=1, help="(1) kmeans only")
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("wrap", help="stage-2: fit the prototype-wrapper head")
    p.add_argument("--ckpt", required=True, help="stage-1 checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--protos", help="use saved prototypes instead of extracting")
    p.add_argument("--policy", help="embed this policy's encoder for rollouts")
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--eps-sim", type=float, default=1e-5, help="(1e-5)")
    _add_stage2_flags(p)
    p.set_defaults(func=cmd_wrap)

    p = sub.add_parser("eval", help="evaluate a head or policy over episodes")
    p.add_argument("--head")
    p.add_argument("--policy")
    p.add_argument("--env", required=True, choices=("cartpole", "pointmass"))
    p.add_argument("--episodes", type=int, default=30, help="(30)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", help="append the CSV row to this file")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="sweep one parameter through the pipeline")
    p.add_argument("--parameter", required=True)
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--env", default="planes",
                   choices=("planes", "cartpole", "pointmass"))
    p.add_argument("--out-dir", required=True)
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--steps", type=int, default=2000,
                   help="(2000) rollout size for env-backed sweeps")
    p.add_argument("--episodes", type=int, default=10,
                   help="(10) eval episodes for env-backed sweeps")
    _add_stage1_flags(p)
    _add_stage2_flags(p)
    _add_bb_flags(p)
    _add_fixture_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--corrupt", default=None,
                   help="testing aid: corrupt this component's gradient")
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ProtoscopeError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: OSError: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
