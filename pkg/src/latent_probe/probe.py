"""Hidden-activation probes: capture, PCA projection, collapse and reward organization."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import env as grasp
from .agent import Encoder, Policy, policy_forward, returns, select_action

JACOBI_TOL = 1e-10


class ProbeError(RuntimeError):
    pass


# --- PCA -----------------------------------------------------------------------

def _round_robin(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Tournament schedule: every index pair exactly once, in rounds of disjoint pairs."""
    players = list(range(n)) + ([-1] if n % 2 else [])
    m = len(players)
    rounds = []
    for _ in range(m - 1):
        pairs = [(players[i], players[m - 1 - i]) for i in range(m // 2)]
        pairs = [(min(a, b), max(a, b)) for a, b in pairs if a >= 0 and b >= 0]
        rounds.append((np.array([a for a, _ in pairs]), np.array([b for _, b in pairs])))
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def jacobi_eigh(A: np.ndarray, tol: float = JACOBI_TOL, max_sweeps: int = 60) -> tuple[np.ndarray, np.ndarray]:
    """Eigen-decomposition of a symmetric matrix by Jacobi rotations.

    Each sweep visits every off-diagonal pair once, in rounds of disjoint
    pairs whose rotations commute and are applied together. Returns
    (eigenvalues, eigenvectors as columns) in the matrix's axis order,
    unsorted. Stops once the off-diagonal Frobenius norm is below ``tol``
    times the norm of the whole matrix.
    """
    A = np.array(A, dtype=np.float64)
    n = A.shape[0]
    if A.ndim != 2 or A.shape != (n, n):
        raise ValueError("matrix must be square")
    V = np.eye(n)
    if n < 2:
        return np.diag(A).copy(), V
    scale = max(np.linalg.norm(A), np.finfo(float).tiny)
    iu = np.triu_indices(n, 1)
    schedule = _round_robin(n)
    for _ in range(max_sweeps):
        if np.sqrt(2 * np.sum(A[iu] ** 2)) <= tol * scale:
            break
        for p, q in schedule:
            apq = A[p, q]
            active = np.abs(apq) > 1e-300
            if not active.any():
                continue
            p, q, apq = p[active], q[active], apq[active]
            theta = (A[q, q] - A[p, p]) / (2 * apq)
            t = np.where(theta >= 0, 1.0, -1.0) / (np.abs(theta) + np.sqrt(theta * theta + 1))
            c = 1 / np.sqrt(t * t + 1)
            s = t * c
            Ap, Aq = A[p, :], A[q, :]
            A[p, :] = c[:, None] * Ap - s[:, None] * Aq
            A[q, :] = s[:, None] * Ap + c[:, None] * Aq
            Ap, Aq = A[:, p], A[:, q]
            A[:, p] = c * Ap - s * Aq
            A[:, q] = s * Ap + c * Aq
            Vp, Vq = V[:, p], V[:, q]
            V[:, p] = c * Vp - s * Vq
            V[:, q] = s * Vp + c * Vq
    return np.diag(A).copy(), V


@dataclass
class PcaModel:
    mean: np.ndarray
    components: np.ndarray  # (k, d), rows orthonormal
    explained_variance: np.ndarray  # eigenvalues of the top-k components
    explained_variance_ratio: np.ndarray


def pca_fit(X: np.ndarray, k: int = 3) -> PcaModel:
    X = np.asarray(X, dtype=np.float64)
    n, d = X.shape
    if k > d:
        raise ValueError(f"cannot extract {k} components from {d} columns")
    if n < k + 1:
        raise ValueError(f"need at least {k + 1} rows for {k} components, got {n}")
    mean = X.mean(axis=0)
    Xc = X - mean
    cov = Xc.T @ Xc / (n - 1)
    cov = (cov + cov.T) / 2
    w, V = jacobi_eigh(cov)
    order = np.argsort(-w, kind="stable")[:k]
    comps = V[:, order].T.copy()
    for row in comps:
        if row[np.argmax(np.abs(row))] < 0:
            row *= -1
    total = np.clip(w, 0, None).sum()
    top = np.clip(w[order], 0, None)
    ratio = top / total if total > 0 else np.zeros(k)
    return PcaModel(mean, comps, top, ratio)


def pca_project(model: PcaModel, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.mean.shape[0]:
        raise ValueError(f"expected {model.mean.shape[0]} columns, got shape {X.shape}")
    return (X - model.mean) @ model.components.T


# --- collapse and organization ---------------------------------------------------

def collapse_detect(X: np.ndarray, tol: float = 1e-6) -> bool:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or len(X) < 2:
        raise ValueError("need at least two rows")
    return bool(np.all(X.std(axis=0) < tol))


@dataclass
class Organization:
    score: float
    degenerate: bool = False
    collapsed: bool = False


def organization(X: np.ndarray, rewards: np.ndarray, k: int = 5, collapse_tol: float = 1e-6) -> Organization:
    """1 - (mean reward gap to the k nearest activation neighbours) / (mean gap over all pairs)."""
    X = np.asarray(X, dtype=np.float64)
    r = np.asarray(rewards, dtype=np.float64)
    n = len(X)
    if len(r) != n:
        raise ValueError("rewards and activations must have the same length")
    if n <= k:
        raise ValueError(f"need more than k={k} points, got {n}")
    if collapse_detect(X, collapse_tol):
        return Organization(0.0, collapsed=True)
    gaps = np.abs(r[:, None] - r[None, :])
    overall = gaps.sum() / (n * (n - 1))
    if overall == 0:
        return Organization(0.0, degenerate=True)
    sq = np.sum(X * X, axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2 * X @ X.T, 0)
    np.fill_diagonal(d2, np.inf)
    nbrs = np.argsort(d2, axis=1, kind="stable")[:, :k]
    local = np.take_along_axis(gaps, nbrs, axis=1).mean()
    return Organization(float(1 - local / overall))


def organization_score(X: np.ndarray, rewards: np.ndarray, k: int = 5) -> float:
    return organization(X, rewards, k).score


def permutation_baseline(X: np.ndarray, rewards: np.ndarray, k: int = 5, n_perm: int = 100,
                         rng: np.random.Generator | None = None) -> np.ndarray:
    """Organization scores with rewards shuffled against activations."""
    rng = rng if rng is not None else np.random.default_rng(0)
    r = np.asarray(rewards)
    return np.array([organization_score(X, rng.permutation(r), k) for _ in range(n_perm)])


# --- activation capture -----------------------------------------------------------

@dataclass
class ProbeEpisodes:
    """Observations and rewards from a set of episodes, reusable across policies."""

    observations: np.ndarray  # (n, 3, H, W), the state each action was chosen in
    rewards: np.ndarray  # reward received on entering that state
    returns: np.ndarray  # discounted reward-to-go from that state
    episode: np.ndarray
    step: np.ndarray
    successful: bool = True
    attempts: int = 0

    def __len__(self):
        return len(self.rewards)


Driver = Callable[[grasp.WorldState, np.ndarray, np.random.Generator], int]


def policy_driver(policy: Policy, encoder: Encoder) -> Driver:
    def act(state, obs, rng):
        probs, _, _ = policy_forward(policy, encoder(obs, rng))
        return select_action(probs, rng)
    return act


def scripted_driver(config: grasp.EnvConfig, epsilon: float = 0.3) -> Driver:
    """Greedy expert that takes a uniformly random action with probability ``epsilon``."""
    def act(state, obs, rng):
        if rng.random() < epsilon:
            return int(rng.integers(grasp.N_ACTIONS))
        return grasp.scripted_action(state, config)
    return act


def collect_probe_episodes(config: grasp.EnvConfig, driver: Driver, rng: np.random.Generator,
                           episodes_needed: int = 3, successful_only: bool = True,
                           max_attempts: int = 100, fallback: bool = True, gamma: float = 0.99,
                           first_episode_seed: int = 0) -> ProbeEpisodes:
    kept, spare = [], []
    attempts = 0
    while len(kept) < episodes_needed and attempts < max_attempts:
        seed = first_episode_seed + attempts
        attempts += 1
        state, obs = grasp.reset(config, seed)
        # each captured state carries the reward it was entered with; the start
        # state gets the shaping reward of its own distance
        obs_list, labels, rewards = [], [grasp.reward(state, False, config)], []
        while not state.done:
            a = driver(state, obs, rng)
            obs_list.append(obs)
            state, obs, r, _ = grasp.step(state, a, config)
            labels.append(r)
            rewards.append(r)
        ep = (seed, np.stack(obs_list), np.asarray(labels[:-1]), returns(np.asarray(rewards), gamma))
        if state.success or not successful_only:
            kept.append(ep)
        elif len(spare) < episodes_needed:
            spare.append(ep)
    successful = True
    if len(kept) < episodes_needed:
        if not fallback:
            raise ProbeError(f"only {len(kept)} successful episodes in {max_attempts} attempts")
        kept = (kept + spare)[:episodes_needed]
        successful = False
    obs = np.concatenate([o for _, o, _, _ in kept])
    rew = np.concatenate([r for _, _, r, _ in kept])
    ret = np.concatenate([g for _, _, _, g in kept])
    epi = np.concatenate([np.full(len(r), s) for s, _, r, _ in kept])
    stp = np.concatenate([np.arange(len(r)) for _, _, r, _ in kept])
    return ProbeEpisodes(obs, rew, ret, epi, stp, successful, attempts)


@dataclass
class ActivationSet:
    X: np.ndarray  # (n, 64)
    rewards: np.ndarray
    returns: np.ndarray
    episode: np.ndarray
    step: np.ndarray
    flags: set = field(default_factory=set)

    def __post_init__(self):
        n = len(self.X)
        if not (len(self.rewards) == len(self.returns) == len(self.episode) == len(self.step) == n):
            raise ValueError("activation rows and labels differ in length")

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["episode", "step", "reward", "return"] + [f"act_{i}" for i in range(self.X.shape[1])])
            for i in range(len(self.X)):
                w.writerow([int(self.episode[i]), int(self.step[i]), repr(float(self.rewards[i])),
                            repr(float(self.returns[i]))] + [repr(float(v)) for v in self.X[i]])

    @classmethod
    def read_csv(cls, path) -> "ActivationSet":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        body = np.array(rows[1:], dtype=np.float64).reshape(len(rows) - 1, len(rows[0]))
        return cls(body[:, 4:].astype(np.float32), body[:, 2], body[:, 3],
                   body[:, 0].astype(int), body[:, 1].astype(int))


def activations_for(policy: Policy, encoder: Encoder, episodes: ProbeEpisodes,
                    random_inputs: bool = False, rng: np.random.Generator | None = None) -> ActivationSet:
    """Base activations of ``policy`` on the states of ``episodes``.

    With ``random_inputs`` the policy sees unit-normal inputs of matching
    dimensions instead, paired with the same reward labels.
    """
    flags = set() if episodes.successful else {"unsuccessful_fallback"}
    if random_inputs:
        rng = rng if rng is not None else np.random.default_rng(0)
        if policy.body == "conv":
            shape = (len(episodes), 3, policy.input_dim, policy.input_dim)
        else:
            shape = (len(episodes), policy.input_dim)
        states = rng.standard_normal(shape).astype(np.float32)
        flags.add("random_inputs")
    else:
        states = np.stack([encoder(o, rng) for o in episodes.observations])
    X = np.concatenate([policy.activations(states[i:i + 64]) for i in range(0, len(states), 64)])
    return ActivationSet(X, episodes.rewards, episodes.returns, episodes.episode, episodes.step, flags)


def capture_activations(policy: Policy, config: grasp.EnvConfig, encoder: Encoder,
                        rng: np.random.Generator, episodes_needed: int = 3, successful_only: bool = True,
                        max_attempts: int = 100, fallback: bool = True, driver: Driver | None = None,
                        random_inputs: bool = False) -> ActivationSet:
    """Roll out (with the policy itself unless another driver is given) and capture base outputs."""
    driver = driver or policy_driver(policy, encoder)
    episodes = collect_probe_episodes(config, driver, rng, episodes_needed, successful_only,
                                      max_attempts, fallback)
    return activations_for(policy, encoder, episodes, random_inputs, rng)


# --- report ------------------------------------------------------------------------

@dataclass
class ProbeReport:
    projected: np.ndarray
    collapsed: bool
    score: float
    activations: ActivationSet
    pca: PcaModel
    meta: dict = field(default_factory=dict)

    def write(self, out_dir, stem: str = "probe") -> dict[str, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {"activations": out / f"{stem}_activations.csv", "projection": out / f"{stem}_projection.csv"}
        self.activations.write_csv(paths["activations"])
        write_projection(paths["projection"], self.projected, self.activations.rewards)
        return paths


def write_projection(path, Y: np.ndarray, rewards: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["pc1", "pc2", "pc3", "reward"])
        for y, r in zip(Y, rewards):
            w.writerow([repr(float(v)) for v in y] + [repr(float(r))])


def read_projection(path) -> tuple[np.ndarray, np.ndarray]:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return data[:, :3], data[:, 3]


def probe_activations(acts: ActivationSet, k_neighbors: int = 5, collapse_tol: float = 1e-6,
                      meta: dict | None = None) -> ProbeReport:
    collapsed = collapse_detect(acts.X, collapse_tol)
    model = pca_fit(acts.X, 3)
    Y = pca_project(model, acts.X)
    org = organization(acts.X, acts.rewards, k_neighbors, collapse_tol)
    meta = dict(meta or {})
    meta.setdefault("pca_fit", "per_policy_per_snapshot")
    meta["degenerate"] = org.degenerate
    meta["flags"] = sorted(acts.flags)
    return ProbeReport(Y, collapsed, org.score, acts, model, meta)
