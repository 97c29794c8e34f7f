"""Study orchestration: shared VAE pretraining, the condition grid, probe timelines and sweeps."""

from __future__ import annotations

import hashlib
import json
import logging
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import env as grasp
from .agent import REPRESENTATIONS, Encoder, Policy, TrainConfig, read_metrics, snapshot_name, train_agent
from .nn import InitScheme
from .nn.initializers import SCHEMES
from .nn.serialization import CheckpointError
from .probe import (
    ProbeReport,
    activations_for,
    collect_probe_episodes,
    permutation_baseline,
    policy_driver,
    probe_activations,
    scripted_driver,
)
from .vae import VAE, ImageDataset, collect_dataset, train_vae

log = logging.getLogger(__name__)

DEFAULT_CONDITIONS = (
    ("static_static", "latent"),
    ("static_static", "image"),
    ("static_random", "latent"),
    ("static_random", "image"),
)
DEFAULT_SNAPSHOTS = (0, 250, 500, 1000, 2000)


class PlanError(ValueError):
    pass


@dataclass
class ExperimentPlan:
    out: Path = Path("out")
    conditions: tuple[tuple[str, str], ...] = DEFAULT_CONDITIONS
    seeds: int = 3
    base_seed: int = 0
    episodes: int = 2000
    snapshots: tuple[int, ...] = DEFAULT_SNAPSHOTS
    init: str = "he_normal"
    lr: float = 1e-3
    gamma: float = 0.99
    optimizer: str = "adaptive_moments"
    vae_checkpoint: Path | None = None
    train_vae: bool = True
    vae_images: int = 1000
    vae_epochs: int = 300
    latent_dim: int = 16
    vae_seed: int = 0
    workers: int = 1

    def __post_init__(self):
        self.out = Path(self.out)
        self.conditions = tuple(tuple(c) for c in self.conditions)
        self.snapshots = tuple(sorted(set(int(s) for s in self.snapshots) | {0}))
        if self.vae_checkpoint is not None:
            self.vae_checkpoint = Path(self.vae_checkpoint)

    def validate(self) -> None:
        if self.seeds < 1:
            raise PlanError("seeds must be >= 1")
        if self.episodes < 0:
            raise PlanError("episodes must be >= 0")
        if not self.conditions:
            raise PlanError("plan has no conditions")
        for task, rep in self.conditions:
            if task not in grasp.TASKS or rep not in REPRESENTATIONS:
                raise PlanError(f"bad condition ({task}, {rep})")
        InitScheme(self.init)
        if self.needs_vae:
            if self.vae_checkpoint is None and not self.train_vae:
                raise PlanError("latent conditions need a VAE checkpoint (or train_vae enabled)")
            if self.vae_checkpoint is not None and not self.vae_checkpoint.exists():
                raise PlanError(f"VAE checkpoint {self.vae_checkpoint} does not exist")

    @property
    def needs_vae(self) -> bool:
        return any(rep == "latent" for _, rep in self.conditions)

    def train_config(self, representation: str, seed: int) -> TrainConfig:
        return TrainConfig(representation=representation, episodes=self.episodes, gamma=self.gamma,
                           lr=self.lr, optimizer=self.optimizer, init=self.init, seed=seed,
                           snapshots=self.snapshots)


@dataclass
class RunRecord:
    task: str
    representation: str
    seed: int
    run_dir: Path
    metrics_path: Path | None = None
    snapshot_paths: dict[int, Path] = field(default_factory=dict)
    wall_clock: float = 0.0
    config_hash: str = ""
    vae_checkpoint: Path | None = None
    error: str | None = None

    @property
    def condition(self) -> str:
        return f"{self.task}-{self.representation}"

    @property
    def ok(self) -> bool:
        return self.error is None

    def to_json(self) -> dict:
        return {
            "task": self.task, "representation": self.representation, "seed": self.seed,
            "run_dir": str(self.run_dir),
            "metrics_path": str(self.metrics_path) if self.metrics_path else None,
            "snapshot_paths": {str(k): str(v) for k, v in sorted(self.snapshot_paths.items())},
            "wall_clock": self.wall_clock, "config_hash": self.config_hash,
            "vae_checkpoint": str(self.vae_checkpoint) if self.vae_checkpoint else None,
            "error": self.error,
        }

    @classmethod
    def from_json(cls, d: dict) -> "RunRecord":
        return cls(d["task"], d["representation"], d["seed"], Path(d["run_dir"]),
                   Path(d["metrics_path"]) if d.get("metrics_path") else None,
                   {int(k): Path(v) for k, v in d.get("snapshot_paths", {}).items()},
                   d.get("wall_clock", 0.0), d.get("config_hash", ""),
                   Path(d["vae_checkpoint"]) if d.get("vae_checkpoint") else None, d.get("error"))


def config_hash(env_config: grasp.EnvConfig, train_config: TrainConfig, vae_path: Path | None) -> str:
    payload = {"env": asdict(env_config), "train": asdict(train_config)}
    if vae_path is not None:
        payload["vae_sha256"] = hashlib.sha256(Path(vae_path).read_bytes()).hexdigest()
    blob = json.dumps(payload, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def collect_images(tasks, n: int, seed: int) -> ImageDataset:
    """Random-policy images split as evenly as possible across ``tasks``."""
    tasks = list(tasks)
    if not tasks:
        raise ValueError("need at least one task")
    per_task = [n // len(tasks) + (i < n % len(tasks)) for i in range(len(tasks))]
    parts = [collect_dataset(grasp.EnvConfig(task=t, seed=seed), k, seed) for t, k in zip(tasks, per_task) if k > 0]
    return ImageDataset(np.concatenate([p.images for p in parts]), {"tasks": tasks, "seed": seed})


def write_vae_history(path, history) -> None:
    with open(path, "w") as fh:
        fh.write("epoch,total,recon,kl\n")
        for i, row in enumerate(zip(history.total, history.recon, history.kl)):
            fh.write(f"{i + 1}," + ",".join(repr(float(v)) for v in row) + "\n")


def prepare_vae(plan: ExperimentPlan) -> Path:
    """Collect the random-policy image set and train the shared VAE, once per plan."""
    if plan.vae_checkpoint is not None:
        return plan.vae_checkpoint
    vae_dir = plan.out / "vae"
    vae_dir.mkdir(parents=True, exist_ok=True)
    ckpt = vae_dir / "vae.lprb"
    tasks = sorted({task for task, _ in plan.conditions})
    dataset = collect_images(tasks, plan.vae_images, plan.vae_seed)
    dataset.save(vae_dir / "images.lprb")
    vae, history = train_vae(dataset, plan.vae_epochs, seed=plan.vae_seed, latent_dim=plan.latent_dim)
    vae.save(ckpt)
    write_vae_history(vae_dir / "vae_history.csv", history)
    return ckpt


def _run_one(plan: ExperimentPlan, task: str, rep: str, seed: int, vae_path: Path | None) -> RunRecord:
    run_dir = plan.out / "runs" / f"{task}-{rep}-{seed}"
    env_config = grasp.EnvConfig(task=task, seed=seed)
    tc = plan.train_config(rep, seed)
    record = RunRecord(task, rep, seed, run_dir, vae_checkpoint=vae_path if rep == "latent" else None)
    start = time.perf_counter()
    try:
        vae = VAE.load(vae_path) if rep == "latent" else None
        record.config_hash = config_hash(env_config, tc, record.vae_checkpoint)
        result = train_agent(tc, env_config, vae, out_dir=run_dir)
        record.metrics_path = result.metrics_path
        record.snapshot_paths = dict(result.snapshots)
    except Exception as exc:  # failures stay inside their own run
        record.error = f"{type(exc).__name__}: {exc}"
        log.error("run %s failed:\n%s", record.condition, traceback.format_exc())
    record.wall_clock = time.perf_counter() - start
    return record


def run_grid(plan: ExperimentPlan) -> list[RunRecord]:
    plan.validate()
    vae_path = prepare_vae(plan) if plan.needs_vae else None
    jobs = [(task, rep, plan.base_seed + i) for task, rep in plan.conditions for i in range(plan.seeds)]
    if plan.workers > 1:
        with ProcessPoolExecutor(plan.workers) as pool:
            futures = [pool.submit(_run_one, plan, t, r, s, vae_path) for t, r, s in jobs]
            records = [f.result() for f in futures]
    else:
        records = [_run_one(plan, t, r, s, vae_path) for t, r, s in jobs]
    save_records(plan.out / "records.json", records)
    return records


def save_records(path, records: list[RunRecord]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps([r.to_json() for r in records], indent=2))


def load_records(path) -> list[RunRecord]:
    return [RunRecord.from_json(d) for d in json.loads(Path(path).read_text())]


@dataclass
class Curve:
    mean: np.ndarray
    std: np.ndarray
    runs: int


def aggregate_curves(records: list[RunRecord]) -> dict[str, Curve]:
    """Pointwise mean and population std of windowed success per condition, cut to the shortest run."""
    by_cond: dict[str, list[np.ndarray]] = {}
    for r in records:
        if not r.ok or r.metrics_path is None:
            continue
        curve = np.array([row["windowed_success"] for row in read_metrics(r.metrics_path)])
        by_cond.setdefault(r.condition, []).append(curve)
    out = {}
    for cond, curves in by_cond.items():
        n = min(len(c) for c in curves)
        stack = np.stack([c[:n] for c in curves])
        out[cond] = Curve(stack.mean(axis=0), stack.std(axis=0), len(curves))
    return out


def final_success(records: list[RunRecord]) -> dict[str, list[float]]:
    out: dict[str, list[float]] = {}
    for r in records:
        if r.ok and r.metrics_path is not None:
            rows = read_metrics(r.metrics_path)
            out.setdefault(r.condition, []).append(rows[-1]["windowed_success"] if rows else 0.0)
    return out


# --- probing ---------------------------------------------------------------------

@dataclass
class ProbeConfig:
    driver: str = "policy"  # or "scripted"
    epsilon: float = 0.3
    episodes_needed: int = 3
    successful_only: bool = True
    max_attempts: int = 200
    k_neighbors: int = 5
    collapse_tol: float = 1e-6
    random_inputs: bool = False
    seed: int = 0


def probe_policy(policy: Policy, env_config: grasp.EnvConfig, vae: VAE | None, cfg: ProbeConfig,
                 meta: dict | None = None) -> ProbeReport:
    encoder = Encoder(policy.representation, vae)
    rng = np.random.default_rng([cfg.seed, 4])
    if cfg.driver == "scripted":
        driver = scripted_driver(env_config, cfg.epsilon)
    elif cfg.driver == "policy":
        driver = policy_driver(policy, encoder)
    else:
        raise ValueError(f"unknown probe driver {cfg.driver!r}")
    episodes = collect_probe_episodes(env_config, driver, rng, cfg.episodes_needed, cfg.successful_only,
                                      cfg.max_attempts, fallback=True)
    acts = activations_for(policy, encoder, episodes, cfg.random_inputs, rng)
    meta = {"driver": cfg.driver, **(meta or {})}
    return probe_activations(acts, cfg.k_neighbors, cfg.collapse_tol, meta)


def probe_timeline(record: RunRecord, cfg: ProbeConfig, out_dir=None) -> list[ProbeReport]:
    """Probe every snapshot of a run, in episode order; optionally write CSVs."""
    vae = VAE.load(record.vae_checkpoint) if record.representation == "latent" else None
    env_config = grasp.EnvConfig(task=record.task, seed=record.seed)
    reports = []
    for ep in sorted(record.snapshot_paths):
        path = record.snapshot_paths[ep]
        try:
            policy = Policy.load(path)
        except (CheckpointError, ValueError, KeyError) as exc:
            raise CheckpointError(f"cannot read snapshot {path}: {exc}") from exc
        report = probe_policy(policy, env_config, vae, cfg,
                              {"snapshot_episode": ep, "condition": record.condition, "seed": record.seed})
        reports.append(report)
        if out_dir is not None:
            report.write(out_dir, f"{record.condition}-{record.seed}_ep{ep}")
    if out_dir is not None:
        with open(Path(out_dir) / f"{record.condition}-{record.seed}_timeline.csv", "w") as fh:
            fh.write("episode,organization_score,collapsed\n")
            for r in reports:
                fh.write(f"{r.meta['snapshot_episode']},{r.score!r},{int(r.collapsed)}\n")
    return reports


def init_sweep(vae: VAE, env_config: grasp.EnvConfig, seed: int = 0, cfg: ProbeConfig | None = None,
               schemes=SCHEMES) -> list[ProbeReport]:
    """Untrained dense policies under each init scheme, probed on one shared set of episodes."""
    cfg = cfg or ProbeConfig(driver="scripted", seed=seed)
    if cfg.driver != "scripted":
        raise ValueError("the sweep needs a policy-independent driver so every scheme sees the same episodes")
    rng = np.random.default_rng([cfg.seed, 4])
    episodes = collect_probe_episodes(env_config, scripted_driver(env_config, cfg.epsilon), rng,
                                      cfg.episodes_needed, cfg.successful_only, cfg.max_attempts)
    encoder = Encoder("latent", vae)
    reports = []
    for scheme in schemes:
        policy = Policy("dense", vae.latent_dim, InitScheme(scheme, seed))
        acts = activations_for(policy, encoder, episodes)
        reports.append(probe_activations(acts, cfg.k_neighbors, cfg.collapse_tol,
                                         {"init": scheme, "snapshot_episode": 0, "condition": "latent-init"}))
    return reports


@dataclass
class InitContrast:
    latent: ProbeReport
    image: ProbeReport
    latent_random: ProbeReport
    image_random: ProbeReport
    baseline: dict[str, np.ndarray]


def init_contrast(vae: VAE, env_config: grasp.EnvConfig, policy_seed: int = 0, cfg: ProbeConfig | None = None,
                  n_perm: int = 1000) -> InitContrast:
    """Episode-0 latent vs image policies on identical episodes, plus the random-input control."""
    cfg = cfg or ProbeConfig(driver="scripted", seed=env_config.seed)
    rng = np.random.default_rng([cfg.seed, 4])
    episodes = collect_probe_episodes(env_config, scripted_driver(env_config, cfg.epsilon), rng,
                                      cfg.episodes_needed, cfg.successful_only, cfg.max_attempts)
    latent = Policy("dense", vae.latent_dim, InitScheme("he_normal", policy_seed))
    image = Policy("conv", env_config.image_size, InitScheme("he_normal", policy_seed))
    reports = {}
    for name, policy in (("latent", latent), ("image", image)):
        enc = Encoder(policy.representation, vae)
        for random_inputs in (False, True):
            acts = activations_for(policy, enc, episodes, random_inputs, np.random.default_rng([cfg.seed, 5]))
            key = name + ("_random" if random_inputs else "")
            reports[key] = probe_activations(acts, cfg.k_neighbors, cfg.collapse_tol,
                                             {"condition": key, "snapshot_episode": 0})
    baseline = {key: permutation_baseline(rep.activations.X, rep.activations.rewards, cfg.k_neighbors, n_perm,
                                          np.random.default_rng([cfg.seed, 6]))
                for key, rep in reports.items()}
    return InitContrast(reports["latent"], reports["image"], reports["latent_random"], reports["image_random"],
                        baseline)


def baseline_band(scores: np.ndarray, lo: float = 0.5, hi: float = 99.5) -> tuple[float, float]:
    """Central 99% interval of permutation-baseline scores."""
    return float(np.percentile(scores, lo)), float(np.percentile(scores, hi))


def with_task(env_config: grasp.EnvConfig, task: str) -> grasp.EnvConfig:
    return replace(env_config, task=task)
