"""``latent-probe`` command line.

Every flag can also be set in a ``--config`` file (``key = value`` lines);
flags given on the command line win. Exit codes: 0 success, 1 invalid
input, 2 failure while running.
"""

from __future__ import annotations

import argparse
import contextlib
import logging
import sys
from pathlib import Path

from . import env as grasp
from .agent import REPRESENTATIONS, Policy, TrainConfig, train_agent
from .config import ConfigError, load_config, normalize_key, parse_bool
from .experiment import (
    DEFAULT_CONDITIONS,
    DEFAULT_SNAPSHOTS,
    ExperimentPlan,
    PlanError,
    ProbeConfig,
    collect_images,
    load_records,
    probe_policy,
    probe_timeline,
    run_grid,
    write_vae_history,
)
from .nn.initializers import ALIASES, SCHEMES
from .vae import VAE, ImageDataset, train_vae

log = logging.getLogger("latent_probe")

EXIT_OK, EXIT_INVALID, EXIT_FAILED = 0, 1, 2


class UsageError(ValueError):
    """Bad flags, config values or input files; reported with exit code 1."""


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


@contextlib.contextmanager
def validating():
    try:
        yield
    except (ValueError, KeyError) as exc:
        raise UsageError(str(exc)) from exc


def int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.replace(",", " ").split()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma-separated list of integers, got {text!r}") from None


def str_list(text: str) -> list[str]:
    return [x for x in text.replace(",", " ").split() if x]


def condition_list(text: str) -> list[tuple[str, str]]:
    out = []
    for item in str_list(text):
        task, _, rep = item.rpartition("-")
        if task not in grasp.TASKS or rep not in REPRESENTATIONS:
            raise argparse.ArgumentTypeError(f"condition must look like static_static-latent, got {item!r}")
        out.append((task, rep))
    return out


INIT_CHOICES = sorted(set(SCHEMES) | set(ALIASES))


def build_parser() -> Parser:
    common = Parser(add_help=False)
    common.add_argument("--config", type=Path, help="flat key = value file; flags override it")
    common.add_argument("--out", type=Path, help="output location (see each command for the default)")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("-v", "--verbose", action="store_true")

    p = Parser(prog="latent-probe", description="Train VAE-latent and pixel agents on a grasping stand-in and probe their hidden layers.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=Parser)

    c = sub.add_parser("collect", parents=[common], help="random-policy image dataset")
    c.add_argument("--tasks", type=str_list, default=list(grasp.TASKS), help="comma-separated tasks sharing the set")
    c.add_argument("--images", type=int, default=1000, help="number of images")
    c.set_defaults(func=cmd_collect)

    v = sub.add_parser("train-vae", parents=[common], help="train the denoising VAE; --out is the checkpoint")
    v.add_argument("--images", type=Path, help="image dataset file from 'collect'")
    v.add_argument("--epochs", type=int, default=300)
    v.add_argument("--latent-dim", type=int, default=16)
    v.add_argument("--batch", type=int, default=32)
    v.add_argument("--lr", type=float, default=1e-3)
    v.set_defaults(func=cmd_train_vae)

    a = sub.add_parser("train-agent", parents=[common], help="train one actor-critic agent")
    a.add_argument("--task", choices=grasp.TASKS, default="static_static")
    a.add_argument("--repr", choices=REPRESENTATIONS, default="latent")
    a.add_argument("--vae", type=Path, help="VAE checkpoint (latent only)")
    a.add_argument("--episodes", type=int, default=2000)
    a.add_argument("--snapshot-every", type=int, default=0)
    a.add_argument("--snapshots", type=int_list, default=list(DEFAULT_SNAPSHOTS))
    a.add_argument("--init", choices=INIT_CHOICES, default="he_normal")
    a.add_argument("--lr", type=float, default=1e-3)
    a.add_argument("--gamma", type=float, default=0.99)
    a.add_argument("--optimizer", choices=("adaptive_moments", "plain_sgd"), default="adaptive_moments")
    a.set_defaults(func=cmd_train_agent)

    q = sub.add_parser("probe", parents=[common], help="PCA probe of one policy snapshot")
    q.add_argument("--policy", type=Path, help="policy checkpoint")
    q.add_argument("--task", choices=grasp.TASKS, default="static_static")
    q.add_argument("--repr", choices=REPRESENTATIONS)
    q.add_argument("--vae", type=Path)
    q.add_argument("--random-inputs", action="store_true", help="feed unit-normal inputs instead of states")
    q.add_argument("--driver", choices=("policy", "scripted"), default="policy")
    q.add_argument("--episodes-needed", type=int, default=3)
    q.add_argument("--k-neighbors", type=int, default=5)
    q.add_argument("--stem", default="probe")
    q.set_defaults(func=cmd_probe)

    g = sub.add_parser("grid", parents=[common], help="VAE pretraining plus the condition grid")
    g.add_argument("--conditions", type=condition_list,
                   default=[tuple(c) for c in DEFAULT_CONDITIONS])
    g.add_argument("--seeds", type=int, default=3)
    g.add_argument("--episodes", type=int, default=2000)
    g.add_argument("--snapshots", type=int_list, default=list(DEFAULT_SNAPSHOTS))
    g.add_argument("--init", choices=INIT_CHOICES, default="he_normal")
    g.add_argument("--lr", type=float, default=1e-3)
    g.add_argument("--gamma", type=float, default=0.99)
    g.add_argument("--vae", type=Path, help="reuse this VAE instead of training one")
    g.add_argument("--vae-images", type=int, default=1000)
    g.add_argument("--vae-epochs", type=int, default=300)
    g.add_argument("--latent-dim", type=int, default=16)
    g.add_argument("--workers", type=int, default=1)
    g.set_defaults(func=cmd_grid)

    r = sub.add_parser("report", parents=[common], help="SVG + CSV report from a finished grid")
    r.add_argument("--records", type=Path, help="records.json written by 'grid' (default <root>/records.json)")
    r.add_argument("--root", type=Path, default=Path("out"))
    r.add_argument("--probe-timelines", action="store_true", help="probe every snapshot of every run")
    r.add_argument("--driver", choices=("policy", "scripted"), default="policy")
    r.set_defaults(func=cmd_report)
    return p


# --- config twin ---------------------------------------------------------------

def _subparser(parser: Parser, name: str) -> Parser:
    for action in parser._subparsers._group_actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[name]
    raise KeyError(name)


def apply_config(sub: Parser, values: dict[str, str]) -> None:
    """Turn config entries into parser defaults so that explicit flags still win."""
    actions = {a.dest: a for a in sub._actions if a.dest not in ("help", "config", "func")}
    defaults = {}
    for key, raw in values.items():
        dest = normalize_key(key)
        if dest not in actions:
            raise ConfigError(f"unknown config key {key!r} for '{sub.prog}'")
        action = actions[dest]
        if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
            value = parse_bool(raw)
        else:
            try:
                value = action.type(raw) if action.type else raw
            except (argparse.ArgumentTypeError, ValueError) as exc:
                raise ConfigError(f"config key {key!r}: {exc}") from None
            if action.choices is not None and value not in action.choices:
                raise ConfigError(f"config key {key!r}: {value!r} is not one of {sorted(action.choices)}")
        defaults[dest] = value
    sub.set_defaults(**defaults)


def parse_args(argv: list[str] | None = None) -> argparse.Namespace:
    parser = build_parser()
    first = parser.parse_args(argv)
    if first.config is not None:
        apply_config(_subparser(parser, first.command), load_config(first.config))
        return parser.parse_args(argv)
    return first


# --- commands --------------------------------------------------------------------

def _require(args, *names):
    missing = [f"--{n.replace('_', '-')}" for n in names if getattr(args, n) is None]
    if missing:
        raise UsageError(f"missing required option(s): {', '.join(missing)}")


def _existing(path: Path, what: str) -> Path:
    if not path.exists():
        raise UsageError(f"{what} {path} does not exist")
    return path


def _load_vae(path: Path) -> VAE:
    _existing(path, "VAE checkpoint")
    with validating():
        return VAE.load(path)


def cmd_collect(args) -> int:
    out = args.out or Path("out/vae/images.lprb")
    with validating():
        if args.images < 1:
            raise ValueError("--images must be >= 1")
        for t in args.tasks:
            grasp.EnvConfig(task=t)
    dataset = collect_images(args.tasks, args.images, args.seed)
    out.parent.mkdir(parents=True, exist_ok=True)
    dataset.save(out)
    print(f"wrote {len(dataset)} images to {out}")
    return EXIT_OK


def cmd_train_vae(args) -> int:
    _require(args, "images")
    out = args.out or Path("out/vae/vae.lprb")
    _existing(args.images, "image file")
    with validating():
        dataset = ImageDataset.load(args.images)
        if args.epochs < 0 or args.batch < 1 or args.latent_dim < 1:
            raise ValueError("--epochs must be >= 0, --batch and --latent-dim >= 1")
    vae, history = train_vae(dataset, args.epochs, args.batch, args.seed, args.latent_dim, args.lr)
    out.parent.mkdir(parents=True, exist_ok=True)
    vae.save(out)
    write_vae_history(out.with_name(out.stem + "_history.csv"), history)
    if history.recon:
        print(f"recon {history.recon[0]:.3f} -> {history.recon[-1]:.3f}; wrote {out}")
    return EXIT_OK


def cmd_train_agent(args) -> int:
    vae = None
    if args.repr == "latent":
        _require(args, "vae")
        vae = _load_vae(args.vae)
    with validating():
        tc = TrainConfig(representation=args.repr, episodes=args.episodes, gamma=args.gamma, lr=args.lr,
                         optimizer=args.optimizer, init=args.init, seed=args.seed,
                         snapshot_every=args.snapshot_every, snapshots=tuple(args.snapshots))
    out = args.out or Path("out/runs") / f"{args.task}-{args.repr}-{args.seed}"
    result = train_agent(tc, grasp.EnvConfig(task=args.task, seed=args.seed), vae, out_dir=out)
    final = result.windowed[-1] if result.windowed else 0.0
    print(f"{args.episodes} episodes, final windowed success {final:.3f}; wrote {out}")
    return EXIT_OK


def cmd_probe(args) -> int:
    _require(args, "policy")
    _existing(args.policy, "policy checkpoint")
    with validating():
        policy = Policy.load(args.policy)
    rep = args.repr or policy.representation
    if rep != policy.representation:
        raise UsageError(f"--repr {rep} does not match the {policy.representation} policy in {args.policy}")
    vae = None
    if rep == "latent":
        _require(args, "vae")
        vae = _load_vae(args.vae)
        if vae.latent_dim != policy.input_dim:
            raise UsageError(f"VAE latent size {vae.latent_dim} != policy input size {policy.input_dim}")
    cfg = ProbeConfig(driver=args.driver, episodes_needed=args.episodes_needed, k_neighbors=args.k_neighbors,
                      random_inputs=args.random_inputs, seed=args.seed)
    report = probe_policy(policy, grasp.EnvConfig(task=args.task, seed=args.seed), vae, cfg,
                          {"policy": str(args.policy), "random_inputs": args.random_inputs})
    out = args.out or Path("out/reports")
    paths = report.write(out, args.stem)
    flags = ",".join(sorted(report.activations.flags)) or "none"
    print(f"organization score {report.score:.4f} collapsed={report.collapsed} flags={flags}")
    for p in paths.values():
        print(f"wrote {p}")
    return EXIT_OK


def cmd_grid(args) -> int:
    with validating():
        plan = ExperimentPlan(out=args.out or Path("out"), conditions=tuple(args.conditions), seeds=args.seeds,
                              base_seed=args.seed, episodes=args.episodes, snapshots=tuple(args.snapshots),
                              init=args.init, lr=args.lr, gamma=args.gamma, vae_checkpoint=args.vae,
                              vae_images=args.vae_images, vae_epochs=args.vae_epochs,
                              latent_dim=args.latent_dim, vae_seed=args.seed, workers=args.workers)
        plan.validate()
    records = run_grid(plan)
    failed = [r for r in records if not r.ok]
    for r in records:
        status = "ok" if r.ok else f"FAILED ({r.error})"
        print(f"{r.condition}-{r.seed}: {status} [{r.wall_clock:.1f}s]")
    return EXIT_FAILED if failed else EXIT_OK


def cmd_report(args) -> int:
    from .report import render_report  # matplotlib import only when needed

    records_path = args.records or args.root / "records.json"
    _existing(records_path, "records file")
    with validating():
        records = load_records(records_path)
        if not records:
            raise ValueError(f"{records_path} lists no runs")
    out = args.out or args.root / "reports"
    reports = []
    if args.probe_timelines:
        cfg = ProbeConfig(driver=args.driver, seed=args.seed)
        for rec in records:
            if rec.ok:
                reports.extend(probe_timeline(rec, cfg, out))
    written = render_report(records, reports, out)
    print(f"wrote {len(written)} files to {out}")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    try:
        args = parse_args(argv)
    except ConfigError as exc:
        print(f"latent-probe: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except SystemExit as exc:  # argparse usage errors and --help
        return exc.code if isinstance(exc.code, int) else EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, PlanError) as exc:
        print(f"latent-probe: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # anything that goes wrong once work has started
        log.debug("failure", exc_info=True)
        print(f"latent-probe: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
