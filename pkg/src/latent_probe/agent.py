"""Monte Carlo actor-critic with a shared policy base.

The policy network has a base (three stride-2 convs + dense on pixels, or two
dense layers on latent codes) whose 64-unit ReLU output feeds an actor head
(7 action logits) and a critic head (scalar value). After every episode the
summed loss

    sum_n -log pi(a_n|s_n) * delta_n  +  sum_n |V(s_n) - G_n|,   delta_n = G_n - V(s_n)

is minimized with one optimizer step; delta is treated as a constant.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import env as grasp
from .nn import (
    Conv2d,
    Dense,
    Flatten,
    InitScheme,
    NonFiniteError,
    OptimizerState,
    ReLU,
    Sequential,
    ShapeError,
    conv_output_size,
    initialize,
    load_tensors,
    log_softmax,
    optimizer_step,
    save_tensors,
)
from .nn.initializers import SCHEMES
from .vae import VAE

log = logging.getLogger(__name__)

BASE_DIM = 64
REPRESENTATIONS = ("image", "latent")
METRIC_COLUMNS = ["episode", "steps", "return", "success", "windowed_success"]


class TrainingDiverged(RuntimeError):
    pass


def returns(rewards, gamma: float) -> np.ndarray:
    """Discounted reward-to-go by backward recurrence G_t = r_t + gamma * G_{t+1}."""
    if len(rewards) == 0:
        raise ValueError("rewards must be non-empty")
    if not 0 <= gamma < 1:
        raise ValueError("gamma must lie in [0, 1)")
    G = np.empty(len(rewards), dtype=np.float64)
    acc = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        acc = float(rewards[t]) + gamma * acc
        G[t] = acc
    return G


class Policy:
    """Shared-base actor-critic network."""

    def __init__(self, body: str, input_dim: int, init: InitScheme | str = "he_normal",
                 seed: int = 0, dtype=np.float32):
        if body not in ("conv", "dense"):
            raise ValueError(f"body must be 'conv' or 'dense', got {body!r}")
        self.body = body
        self.input_dim = input_dim
        self.init = init if isinstance(init, InitScheme) else InitScheme(init, seed)
        if body == "conv":
            side = input_dim
            for _ in range(3):
                side = conv_output_size(side)
            layers = [
                Conv2d(3, 16, dtype=dtype), ReLU(),
                Conv2d(16, 32, dtype=dtype), ReLU(),
                Conv2d(32, 32, dtype=dtype), ReLU(),
                Flatten(), Dense(32 * side * side, BASE_DIM, dtype=dtype), ReLU(),
            ]
        else:
            layers = [Dense(input_dim, 32, dtype=dtype), ReLU(), Dense(32, BASE_DIM, dtype=dtype), ReLU()]
        self.base = Sequential(layers, name="base")
        self.base.layers[0].skip_input_grad = True
        self.actor = Sequential([Dense(BASE_DIM, grasp.N_ACTIONS, dtype=dtype)], name="actor")
        self.critic = Sequential([Dense(BASE_DIM, 1, dtype=dtype)], name="critic")
        rng = np.random.default_rng([self.init.seed, 2])
        for net in self.networks:
            initialize(net, self.init, rng)

    @property
    def networks(self):
        return (self.base, self.actor, self.critic)

    @property
    def representation(self) -> str:
        return "image" if self.body == "conv" else "latent"

    def parameters(self) -> dict[str, np.ndarray]:
        out = {}
        for net in self.networks:
            out.update(net.parameters())
        return out

    def gradients(self) -> dict[str, np.ndarray]:
        out = {}
        for net in self.networks:
            out.update(net.gradients())
        return out

    def zero_grad(self):
        for net in self.networks:
            net.zero_grad()

    def astype(self, dtype) -> "Policy":
        for net in self.networks:
            net.astype(dtype)
        return self

    def _batch(self, states: np.ndarray) -> np.ndarray:
        states = np.asarray(states)
        if self.body == "conv":
            want = (3, self.input_dim, self.input_dim)
            if states.shape[-3:] != want or states.ndim not in (3, 4):
                raise ShapeError(f"conv policy expects image states {want}, got {states.shape}")
            return states if states.ndim == 4 else states[None]
        if states.shape[-1] != self.input_dim or states.ndim not in (1, 2):
            raise ShapeError(f"dense policy expects latent states of length {self.input_dim}, got {states.shape}")
        return states if states.ndim == 2 else states[None]

    def forward_batch(self, states: np.ndarray):
        """Returns (logits (B,7), values (B,), base activations (B,64))."""
        h = self.base.forward(self._batch(states))
        return self.actor.forward(h), self.critic.forward(h)[:, 0], h

    def activations(self, states: np.ndarray) -> np.ndarray:
        return self.base.forward(self._batch(states))

    def state_dict(self) -> dict[str, np.ndarray]:
        tensors = dict(self.parameters())
        tensors["meta.policy"] = np.array(
            [0 if self.body == "conv" else 1, self.input_dim, SCHEMES.index(self.init.variant), self.init.seed],
            np.float32)
        return tensors

    def save(self, path) -> Path:
        return save_tensors(path, self.state_dict())

    @classmethod
    def from_tensors(cls, tensors: dict[str, np.ndarray]) -> "Policy":
        try:
            body, input_dim, scheme, seed = (int(v) for v in tensors["meta.policy"])
        except KeyError:
            raise ValueError("not a policy checkpoint (missing meta.policy)") from None
        policy = cls("conv" if body == 0 else "dense", input_dim, InitScheme(SCHEMES[scheme], seed))
        for net in policy.networks:
            for prefix, layer in net.named_layers():
                for k in layer.params:
                    arr = tensors[f"{prefix}.{k}"]
                    if arr.shape != layer.params[k].shape:
                        raise ShapeError(f"{prefix}.{k}: checkpoint shape {arr.shape} != {layer.params[k].shape}")
                    layer.params[k] = arr.copy()
        return policy

    @classmethod
    def load(cls, path) -> "Policy":
        return cls.from_tensors(load_tensors(path))


def policy_forward(policy: Policy, state: np.ndarray) -> tuple[np.ndarray, float, np.ndarray]:
    logits, values, h = policy.forward_batch(state)
    probs = np.exp(log_softmax(logits[0].astype(np.float64)))
    return probs, float(values[0]), h[0]


def select_action(probs: np.ndarray, rng: np.random.Generator) -> int:
    probs = np.asarray(probs, dtype=np.float64)
    total = probs.sum()
    if probs.ndim != 1 or abs(total - 1.0) > 1e-4 or (probs < 0).any():
        raise ValueError(f"not a probability distribution (sum {total:.6f})")
    cdf = np.cumsum(probs) / total
    return int(min(np.searchsorted(cdf, rng.random(), side="right"), len(probs) - 1))


@dataclass
class EpisodeBuffer:
    states: list = field(default_factory=list)
    actions: list[int] = field(default_factory=list)
    rewards: list[float] = field(default_factory=list)

    def append(self, state, action: int, reward: float) -> None:
        self.states.append(state)
        self.actions.append(int(action))
        self.rewards.append(float(reward))

    def __len__(self):
        return len(self.actions)

    def clear(self) -> None:
        self.states.clear()
        self.actions.clear()
        self.rewards.clear()


def actor_critic_loss(policy: Policy, buffer: EpisodeBuffer, gamma: float, backward: bool = True) -> dict:
    """Summed actor + L1 critic loss over one episode; fills policy gradients when ``backward``."""
    if len(buffer) == 0:
        raise ValueError("cannot update from an empty episode buffer")
    G = returns(buffer.rewards, gamma)
    logits, values, h = policy.forward_batch(np.stack(buffer.states))
    a = np.asarray(buffer.actions)
    n = len(a)
    v64 = values.astype(np.float64)
    delta = G - v64
    logp = log_softmax(logits.astype(np.float64))
    actor_loss = float(-np.sum(logp[np.arange(n), a] * delta))
    critic_loss = float(np.sum(np.abs(v64 - G)))
    if backward:
        policy.zero_grad()
        probs = np.exp(logp)
        onehot = np.zeros_like(probs)
        onehot[np.arange(n), a] = 1.0
        dlogits = (-delta[:, None] * (onehot - probs)).astype(logits.dtype)
        dvalues = np.sign(v64 - G).astype(values.dtype)[:, None]
        dh = policy.actor.backward(dlogits) + policy.critic.backward(dvalues)
        policy.base.backward(dh)
    return {"loss": actor_loss + critic_loss, "actor": actor_loss, "critic": critic_loss,
            "mean_delta": float(delta.mean())}


def actor_critic_update(policy: Policy, buffer: EpisodeBuffer, gamma: float, opt: OptimizerState) -> dict:
    parts = actor_critic_loss(policy, buffer, gamma, backward=True)
    if not np.isfinite(parts["loss"]):
        raise NonFiniteError("actor-critic loss is not finite")
    optimizer_step(policy.parameters(), policy.gradients(), opt)
    return parts


class Encoder:
    """Maps raw observations to policy states for a given representation."""

    def __init__(self, representation: str, vae: VAE | None = None, stochastic: bool = False):
        if representation not in REPRESENTATIONS:
            raise ValueError(f"representation must be one of {REPRESENTATIONS}")
        if representation == "latent" and vae is None:
            raise ValueError("latent representation requires a VAE")
        self.representation = representation
        self.vae = vae
        self.stochastic = stochastic

    def __call__(self, obs: np.ndarray, rng: np.random.Generator | None = None) -> np.ndarray:
        if self.representation == "image":
            return obs
        if self.stochastic:
            return self.vae.encode(obs, rng=rng).z[0]
        return self.vae.encode_mean(obs)[0][0]

    @property
    def state_dim(self):
        return self.vae.latent_dim if self.representation == "latent" else None


def run_episode(config: grasp.EnvConfig, policy: Policy, encoder: Encoder, rng: np.random.Generator,
                episode_seed: int = 0, on_step=None) -> tuple[EpisodeBuffer, bool]:
    if encoder.representation != policy.representation:
        raise ValueError(f"{policy.body} policy cannot consume {encoder.representation} states")
    buffer = EpisodeBuffer()
    state, obs = grasp.reset(config, episode_seed)
    while not state.done:
        s = encoder(obs, rng)
        probs, _, _ = policy_forward(policy, s)
        a = select_action(probs, rng)
        state, obs, r, _ = grasp.step(state, a, config)
        buffer.append(s, a, r)
        if on_step is not None:
            on_step(state, a, r)
    return buffer, state.success


def success_rate_window(outcomes, w: int = 100) -> list[float]:
    x = np.asarray(outcomes, dtype=np.float64)
    if x.size == 0:
        raise ValueError("outcomes must be non-empty")
    c = np.concatenate([[0.0], np.cumsum(x)])
    i = np.arange(1, len(x) + 1)
    lo = np.maximum(0, i - w)
    return list((c[i] - c[lo]) / (i - lo))


@dataclass
class TrainConfig:
    representation: str = "image"
    episodes: int = 2000
    gamma: float = 0.99
    lr: float = 3e-4
    optimizer: str = "adaptive_moments"
    init: str = "he_normal"
    seed: int = 0
    snapshot_every: int = 0
    snapshots: tuple[int, ...] = ()
    stochastic_latent: bool = False
    window: int = 100

    def __post_init__(self):
        if not 0 <= self.gamma < 1:
            raise ValueError("gamma must lie in [0, 1)")
        if self.episodes < 0:
            raise ValueError("episodes must be non-negative")
        if self.representation not in REPRESENTATIONS:
            raise ValueError(f"representation must be one of {REPRESENTATIONS}")
        InitScheme(self.init)

    def snapshot_schedule(self) -> list[int]:
        eps = {0, self.episodes}
        if self.snapshot_every > 0:
            eps.update(range(0, self.episodes + 1, self.snapshot_every))
        eps.update(e for e in self.snapshots if 0 <= e <= self.episodes)
        return sorted(eps)


@dataclass
class TrainResult:
    policy: Policy
    steps: list[int] = field(default_factory=list)
    returns: list[float] = field(default_factory=list)
    successes: list[bool] = field(default_factory=list)
    windowed: list[float] = field(default_factory=list)
    snapshots: dict[int, Path] = field(default_factory=dict)
    metrics_path: Path | None = None

    def rows(self):
        for i, (n, ret, ok, w) in enumerate(zip(self.steps, self.returns, self.successes, self.windowed)):
            yield {"episode": i + 1, "steps": n, "return": repr(float(ret)), "success": int(ok),
                   "windowed_success": repr(float(w))}


def write_metrics(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{"episode": int(r["episode"]), "steps": int(r["steps"]), "return": float(r["return"]),
                 "success": bool(int(r["success"])), "windowed_success": float(r["windowed_success"])}
                for r in csv.DictReader(fh)]


def snapshot_name(episode: int) -> str:
    return f"policy_ep{episode}.lprb"


def make_policy(config: TrainConfig, env_config: grasp.EnvConfig, vae: VAE | None) -> Policy:
    if config.representation == "image":
        return Policy("conv", env_config.image_size, InitScheme(config.init, config.seed))
    if vae is None:
        raise ValueError("latent representation requires a VAE")
    return Policy("dense", vae.latent_dim, InitScheme(config.init, config.seed))


def train_agent(config: TrainConfig, env_config: grasp.EnvConfig, vae: VAE | None = None,
                out_dir=None, policy: Policy | None = None) -> TrainResult:
    """Episode loop: rollout, one update per episode, metrics and scheduled snapshots."""
    env_config = replace(env_config, seed=config.seed)
    encoder = Encoder(config.representation, vae, config.stochastic_latent)
    policy = policy or make_policy(config, env_config, vae)
    opt = OptimizerState(config.optimizer, lr=config.lr)
    rng = np.random.default_rng([config.seed, 3])
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    schedule = set(config.snapshot_schedule())
    result = TrainResult(policy)

    def snapshot(ep, name=None):
        if out is not None:
            result.snapshots[ep] = policy.save(out / (name or snapshot_name(ep)))

    snapshot(0)
    for ep in range(1, config.episodes + 1):
        try:
            buffer, ok = run_episode(env_config, policy, encoder, rng, episode_seed=ep)
            actor_critic_update(policy, buffer, config.gamma, opt)
        except NonFiniteError as exc:
            snapshot(ep - 1, f"policy_abort_ep{ep - 1}.lprb")
            raise TrainingDiverged(f"episode {ep}: {exc}") from exc
        result.steps.append(len(buffer))
        result.returns.append(float(np.sum(buffer.rewards)))
        result.successes.append(bool(ok))
        if ep in schedule:
            snapshot(ep)
        if ep % 100 == 0:
            recent = np.mean(result.successes[-config.window:])
            log.info("%s seed %d episode %d windowed success %.2f",
                     config.representation, config.seed, ep, recent)
    result.windowed = success_rate_window(result.successes, config.window) if result.successes else []
    if out is not None:
        result.metrics_path = out / "metrics.csv"
        write_metrics(result.metrics_path, result.rows())
    return result
