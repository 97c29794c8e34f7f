"""Rasterized gripper-and-tray grasping environment.

A gripper point moves inside a box above a tray holding one object. Each of
the 7 discrete actions selects a column of the movement matrix and is
repeated ``action_repeat`` times. The object attaches when the gripper comes
within ``grasp_radius`` of it; lifting it above ``lift_height`` ends the
episode with success.

The camera is a top-down orthographic raster: the tray is a flat rectangle,
the object an oriented rectangle, the arm a line from a fixed base to the
gripper and the gripper a disc whose radius grows with height.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

N_ACTIONS = 7
STEP = 0.005

# Rows are x, y, z. The two x columns are ordered so that action 2 moves
# toward -x; the y and z columns follow the (-, +) order of the source matrix.
MOVEMENT = np.array(
    [
        [0.0, STEP, -STEP, 0.0, 0.0, 0.0, 0.0],
        [0.0, 0.0, 0.0, -STEP, STEP, 0.0, 0.0],
        [0.0, 0.0, 0.0, 0.0, 0.0, -STEP, STEP],
    ]
)

TASKS = ("static_static", "static_random")

BACKGROUND = (0.05, 0.05, 0.1)
TRAY = (0.45, 0.45, 0.45)
OBJECT = (0.9, 0.25, 0.1)
ARM = (0.3, 0.5, 0.9)
GRIPPER = (0.95, 0.95, 0.3)


class EnvError(RuntimeError):
    pass


def action_vector(a: int) -> np.ndarray:
    if not (isinstance(a, (int, np.integer)) and 0 <= a < N_ACTIONS):
        raise ValueError(f"action must be an integer in 0..{N_ACTIONS - 1}, got {a!r}")
    return MOVEMENT[:, a].copy()


@dataclass(frozen=True)
class EnvConfig:
    task: str = "static_static"
    image_size: int = 64
    horizon: int = 40
    action_repeat: int = 25
    low: tuple[float, float, float] = (0.0, 0.0, 0.0)
    high: tuple[float, float, float] = (1.0, 1.0, 0.5)
    tray_low: tuple[float, float] = (0.125, 0.125)
    tray_high: tuple[float, float] = (0.875, 0.875)
    gripper_start: tuple[float, float, float] = (0.5, 0.5, 0.375)
    object_static: tuple[float, float] = (0.375, 0.625)
    object_static_angle: float = 0.0
    grasp_radius: float = 0.1
    lift_height: float = 0.2
    step_penalty: float = 0.1
    success_reward: float = 10.0
    draw_arm: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.horizon <= 0:
            raise ValueError("horizon must be positive")
        if self.grasp_radius <= 0:
            raise ValueError("grasp radius must be positive")
        if self.image_size < 16:
            raise ValueError("image size must be at least 16")

    @property
    def diameter(self) -> float:
        return float(np.linalg.norm(np.subtract(self.high, self.low)))


@dataclass(frozen=True)
class WorldState:
    gripper: tuple[float, float, float]
    obj: tuple[float, float, float]
    angle: float
    attached: bool = False
    steps: int = 0
    done: bool = False
    success: bool = False

    @property
    def distance(self) -> float:
        return float(np.linalg.norm(np.subtract(self.gripper, self.obj)))


def reward(state: WorldState, success: bool, config: EnvConfig = EnvConfig()) -> float:
    if success:
        return config.success_reward
    return -config.step_penalty * state.distance / config.diameter


def reset(config: EnvConfig, episode_seed: int | None = None) -> tuple[WorldState, np.ndarray]:
    if config.task == "static_static":
        x, y = config.object_static
        angle = config.object_static_angle
    else:
        rng = np.random.default_rng([config.seed, 0 if episode_seed is None else episode_seed])
        x, y = rng.uniform(config.tray_low, config.tray_high)
        angle = rng.uniform(0.0, 2 * math.pi)
    state = WorldState(gripper=tuple(float(v) for v in config.gripper_start),
                       obj=(float(x), float(y), float(config.low[2])), angle=float(angle))
    return state, render(state, config)


def step(state: WorldState, a: int, config: EnvConfig) -> tuple[WorldState, np.ndarray, float, bool]:
    if state.done:
        raise EnvError("step called on a finished episode; call reset first")
    move = config.action_repeat * action_vector(a)
    gripper = tuple(float(v) for v in np.clip(np.add(state.gripper, move), config.low, config.high))
    attached = state.attached
    obj = state.obj
    if not attached and math.dist(gripper, obj) < config.grasp_radius:
        attached = True
    if attached:
        obj = gripper
    success = attached and obj[2] - config.low[2] > config.lift_height
    steps = state.steps + 1
    done = success or steps >= config.horizon
    new = WorldState(gripper, obj, state.angle, attached, steps, done, success)
    return new, render(new, config), reward(new, success, config), done


def scripted_action(state: WorldState, config: EnvConfig) -> int:
    """Greedy expert: line up in x, then y, descend, then lift."""
    if state.attached:
        return 6
    dx = state.obj[0] - state.gripper[0]
    dy = state.obj[1] - state.gripper[1]
    half = config.action_repeat * STEP / 2
    if abs(dx) > half:
        return 1 if dx > 0 else 2
    if abs(dy) > half:
        return 4 if dy > 0 else 3
    return 5


# --- rendering -------------------------------------------------------------

def _pixel(config: EnvConfig, x: float, y: float) -> tuple[float, float]:
    n = config.image_size
    u = (x - config.low[0]) / (config.high[0] - config.low[0]) * n
    v = (y - config.low[1]) / (config.high[1] - config.low[1]) * n
    return u, v


_GRID_CACHE: dict[int, tuple[np.ndarray, np.ndarray]] = {}
_BASE_CACHE: dict[EnvConfig, np.ndarray] = {}


def _grid(n: int):
    if n not in _GRID_CACHE:
        c = np.arange(n) + 0.5
        _GRID_CACHE[n] = np.meshgrid(c, c, indexing="xy")
    return _GRID_CACHE[n]


def _background(config: EnvConfig) -> np.ndarray:
    key = replace(config, task="static_static", seed=0)
    if key not in _BASE_CACHE:
        n = config.image_size
        img = np.empty((3, n, n), np.float32)
        img[:] = np.asarray(BACKGROUND, np.float32)[:, None, None]
        u, v = _grid(n)
        u0, v0 = _pixel(config, *config.tray_low)
        u1, v1 = _pixel(config, *config.tray_high)
        tray = (u >= u0) & (u < u1) & (v >= v0) & (v < v1)
        img[:, tray] = np.asarray(TRAY, np.float32)[:, None]
        _BASE_CACHE[key] = img
    return _BASE_CACHE[key]


def _draw_arm(img, u, v, gu, gv, n):
    """Segment from the base (top edge centre) to the gripper."""
    bu, bv = n / 2, 0.0
    seg = np.array([gu - bu, gv - bv])
    length2 = float(seg @ seg)
    t = np.clip(((u - bu) * seg[0] + (v - bv) * seg[1]) / length2, 0, 1) if length2 > 0 else np.zeros_like(u)
    arm = np.hypot(u - (bu + t * seg[0]), v - (bv + t * seg[1])) <= 1.0
    img[:, arm] = np.asarray(ARM, np.float32)[:, None]


def render(state: WorldState, config: EnvConfig) -> np.ndarray:
    n = config.image_size
    img = _background(config).copy()
    u, v = _grid(n)
    scale = n / (config.high[0] - config.low[0])

    # object: oriented rectangle 0.12 x 0.06 workspace units
    ou, ov = _pixel(config, state.obj[0], state.obj[1])
    c, s = math.cos(state.angle), math.sin(state.angle)
    du, dv = u - ou, v - ov
    along = du * c + dv * s
    across = -du * s + dv * c
    body = (np.abs(along) <= 0.06 * scale) & (np.abs(across) <= 0.03 * scale)
    img[:, body] = np.asarray(OBJECT, np.float32)[:, None]

    gu, gv = _pixel(config, state.gripper[0], state.gripper[1])
    if config.draw_arm:
        _draw_arm(img, u, v, gu, gv, n)

    # gripper: disc whose radius encodes height
    zf = (state.gripper[2] - config.low[2]) / (config.high[2] - config.low[2])
    radius = (0.04 + 0.08 * zf) * scale
    disc = np.hypot(u - gu, v - gv) <= radius
    img[:, disc] = np.asarray(GRIPPER, np.float32)[:, None]
    return img


# --- trajectory logs -----------------------------------------------------------

TRAJECTORY_COLUMNS = ["episode", "step", "action", "reward", "done",
                      "gripper_x", "gripper_y", "gripper_z", "object_x", "object_y", "object_z"]


@dataclass
class TrajectoryLog:
    rows: list[dict] = field(default_factory=list)

    def record(self, episode: int, state: WorldState, action: int, r: float) -> None:
        self.rows.append({
            "episode": episode, "step": state.steps, "action": action, "reward": repr(float(r)),
            "done": int(state.done),
            "gripper_x": repr(state.gripper[0]), "gripper_y": repr(state.gripper[1]),
            "gripper_z": repr(state.gripper[2]),
            "object_x": repr(state.obj[0]), "object_y": repr(state.obj[1]), "object_z": repr(state.obj[2]),
        })

    def write(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=TRAJECTORY_COLUMNS)
            w.writeheader()
            w.writerows(self.rows)


def replay(config: EnvConfig, actions: list[int], episode_seed: int | None = None) -> list[WorldState]:
    state, _ = reset(config, episode_seed)
    states = [state]
    for a in actions:
        state, _, _, done = step(state, a, config)
        states.append(state)
        if done:
            break
    return states
