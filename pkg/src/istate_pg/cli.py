"""Command-line entry point: ``istate-pg {train,eval,graph,chance}``.

Exit codes: 0 success, 1 usage or configuration error, 2 numerical abort.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .core import make_rng
from .envs import ENVIRONMENTS, DEFAULT_HORIZON, chance_level_stats
from .policy import load_checkpoint
from .train import NonFiniteError, TrainConfig, evaluate, train
from . import statemap

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2

EPILOG = "exit codes: 0 ok, 1 usage/config error, 2 numerical abort"

# CLI flag -> TrainConfig key
OVERRIDES = {
    "env": "env_name",
    "mode": "mode",
    "internal_states": "num_internal_states",
    "batch_envs": "batch_envs",
    "updates": "num_updates",
    "horizon": "horizon",
    "step_size": "step_size",
    "step_size_internal": "step_size_internal",
    "baseline": "baseline",
    "eval_every": "eval_every",
    "hidden_width": "hidden_width",
    "shared_trunk": "shared_trunk",
    "init_scale": "init_scale",
    "entropy": "entropy",
    "entropy_internal": "entropy_internal",
    "memory_init": "memory_init",
}


class CliError(Exception):
    pass


def _fail(msg: str, code: int = EXIT_CONFIG) -> int:
    print(f"error: {msg}", file=sys.stderr)
    return code


def resolve_config(args) -> TrainConfig:
    d = {}
    if args.config:
        try:
            d = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise CliError(f"cannot read config {args.config}: {e}") from e
        if not isinstance(d, dict):
            raise CliError("config file must hold a JSON object")
    for flag, key in OVERRIDES.items():
        v = getattr(args, flag, None)
        if v is not None:
            d[key] = v
    if args.seed is not None:
        d["seed"] = args.seed
    try:
        return TrainConfig.from_dict(d)
    except (TypeError, ValueError) as e:
        raise CliError(str(e)) from e


def _completed(out: Path, marker: str) -> bool:
    p = out / marker
    if not p.exists():
        return False
    if marker != "manifest.json":
        return True
    try:
        return json.loads(p.read_text()).get("status") == "complete"
    except (OSError, json.JSONDecodeError):
        return False


def cmd_train(args) -> int:
    try:
        config = resolve_config(args)
    except CliError as e:
        return _fail(str(e))
    out = Path(args.out) if args.out else Path("runs") / f"{config.env_name}_{config.mode}_s{config.seed}"
    if _completed(out, "manifest.json") and not args.force:
        return _fail(f"{out} holds a completed run; pass --force to overwrite")
    try:
        result = train(config, out)
    except NonFiniteError as e:
        return _fail(str(e), EXIT_NUMERIC)
    summary = {
        "out_dir": str(out),
        "final_mean_return": result.curve.mean_return[-1] if len(result.curve) else None,
    }
    print(json.dumps(summary) if args.json else f"run written to {out}")
    return EXIT_OK


def _load(args):
    try:
        policy = load_checkpoint(args.checkpoint)
    except (OSError, ValueError, KeyError, json.JSONDecodeError) as e:
        raise CliError(f"cannot load checkpoint {args.checkpoint}: {e}") from e
    env = args.env or policy.env_name
    if env not in ENVIRONMENTS:
        raise CliError(f"unknown environment {env!r}")
    if policy.env_name and env != policy.env_name:
        raise CliError(f"checkpoint was trained on {policy.env_name!r}, not {env!r}")
    spec = ENVIRONMENTS[env](args.horizon)
    if (spec.num_observations, spec.num_actions) != (policy.num_observations, policy.num_actions):
        raise CliError(f"checkpoint dimensions do not match environment {env!r}")
    return policy, env


def cmd_eval(args) -> int:
    if args.episodes < 1:
        return _fail("--episodes must be >= 1")
    try:
        policy, env = _load(args)
    except CliError as e:
        return _fail(str(e))
    mean, se = evaluate(policy, env, args.episodes, seed=args.seed,
                        greedy=not args.stochastic, horizon=args.horizon)
    if args.json:
        print(json.dumps({"env": env, "episodes": args.episodes, "greedy": not args.stochastic,
                          "mean_return": mean, "stderr": se}))
    else:
        print(f"{env}: mean return {mean:.6f} +- {se:.6f} over {args.episodes} episodes")
    return EXIT_OK


def cmd_graph(args) -> int:
    if args.rollouts < 1:
        return _fail("--rollouts must be >= 1")
    try:
        policy, env = _load(args)
    except CliError as e:
        return _fail(str(e))
    out = Path(args.out)
    if _completed(out, "statemap.dot") and not args.force:
        return _fail(f"{out} already holds a state map; pass --force to overwrite")
    rollouts = statemap.harvest_rollouts(policy, env, args.rollouts, seed=args.seed,
                                         horizon=args.horizon)
    full = statemap.build_matrix(rollouts, policy.num_observations, policy.num_internal_states)
    matrix, kept = statemap.prune_unreachable(full)
    graph = statemap.build_graph(matrix, env)
    table = statemap.build_policy_table(policy, kept)
    paths = statemap.write_statemap(out, graph, table)
    info = {"pairs": len(kept), "files": {k: str(v) for k, v in paths.items()}}
    if env == "heaven_hell":
        info["branch_mutual_information"] = statemap.branch_mutual_information(rollouts)
    elif env == "tiger":
        info["tiger_rule"] = statemap.verify_tiger_rule(rollouts)
    print(json.dumps(info) if args.json else "\n".join(f"{k}: {v}" for k, v in info.items()))
    return EXIT_OK


def cmd_chance(args) -> int:
    if args.env not in ENVIRONMENTS:
        return _fail(f"unknown environment {args.env!r}; choose from {sorted(ENVIRONMENTS)}")
    if args.episodes < 1:
        return _fail("--episodes must be >= 1")
    mean, se = chance_level_stats(args.env, args.episodes, make_rng(args.seed, 0),
                                  horizon=args.horizon)
    if args.json:
        print(json.dumps({"env": args.env, "episodes": args.episodes, "seed": args.seed,
                          "mean_return": mean, "stderr": se}))
    else:
        print(f"{args.env}: chance level {mean!r} +- {se!r} ({args.episodes} episodes, seed {args.seed})")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="istate-pg", description=__doc__.splitlines()[0], epilog=EPILOG)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="default 0, or the config value")
    common.add_argument("--json", action="store_true", help="machine-readable output")

    t = sub.add_parser("train", parents=[common], epilog=EPILOG, help="train a policy")
    t.add_argument("--config", help="JSON file with TrainConfig keys")
    t.add_argument("--env", choices=sorted(ENVIRONMENTS))
    t.add_argument("--mode")
    t.add_argument("--internal-states", type=int)
    t.add_argument("--batch-envs", type=int)
    t.add_argument("--updates", type=int)
    t.add_argument("--horizon", type=int)
    t.add_argument("--step-size", type=float)
    t.add_argument("--step-size-internal", type=float)
    t.add_argument("--baseline", action=argparse.BooleanOptionalAction, default=None)
    t.add_argument("--eval-every", type=int)
    t.add_argument("--hidden-width", type=int)
    t.add_argument("--shared-trunk", action=argparse.BooleanOptionalAction, default=None)
    t.add_argument("--init-scale", type=float)
    t.add_argument("--entropy", type=float, help="action-head entropy bonus")
    t.add_argument("--entropy-internal", type=float, help="internal-head entropy bonus")
    t.add_argument("--memory-init", type=float,
                   help="initial keep probability of the internal state (0 = plain init)")
    t.add_argument("--out", help="run directory (default runs/<env>_<mode>_s<seed>)")
    t.add_argument("--force", action="store_true", help="overwrite a completed run")
    t.set_defaults(func=cmd_train)

    for name, fn, helptext in (("eval", cmd_eval, "evaluate a checkpoint"),
                               ("graph", cmd_graph, "export the transition graph")):
        s = sub.add_parser(name, parents=[common], epilog=EPILOG, help=helptext)
        s.add_argument("checkpoint")
        s.add_argument("--env", help="expected environment (must match the checkpoint)")
        s.add_argument("--horizon", type=int, default=DEFAULT_HORIZON)
        s.set_defaults(func=fn)
        if name == "eval":
            s.add_argument("--episodes", type=int, default=1000)
            s.add_argument("--stochastic", action="store_true", help="sample instead of argmax")
        else:
            s.add_argument("--rollouts", type=int, default=10000)
            s.add_argument("--out", default="statemap")
            s.add_argument("--force", action="store_true")

    c = sub.add_parser("chance", parents=[common], epilog=EPILOG, help="uniform-random baseline")
    c.add_argument("env")
    c.add_argument("--episodes", type=int, default=1_000_000)
    c.add_argument("--horizon", type=int, default=DEFAULT_HORIZON)
    c.set_defaults(func=cmd_chance)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command != "train" and args.seed is None:
        args.seed = 0
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
