"""Desk-scale environments, a decomposable black-box policy, and baselines.

Environments expose a functional interface: reset(seed) -> state and
step(state, action) -> (next state, reward, done), so trajectories are
fully determined by the seed and the action sequence. The black-box
policy is a tanh hidden layer plus a final linear layer, trained by a
derivative-free cross-entropy search; the hidden layer is the encoder of
the policy decomposition.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .dataset import ActionLayout, EncodedDataset, PolicyDecomposition
from .discover import PrototypeEntry, PrototypeSet
from .errors import ConfigError, TrainingFailed
from . import textio


class Environment:
    """Base for built-in environments; subclasses define the dynamics."""

    name = "environment"
    state_dim = 0
    discrete = True
    n_actions = 0
    max_steps = 0

    def reset(self, seed: int) -> np.ndarray:
        raise NotImplementedError

    def step(self, state, action):
        raise NotImplementedError

    def action_layout(self) -> ActionLayout:
        raise NotImplementedError


class CartPoleEnv(Environment):
    """Pole balancing on a cart: 4-dim state, two discrete pushes.

    Euler-integrated dynamics with the classic constants; an episode
    ends when the cart leaves +-2.4 or the pole passes +-12 degrees,
    with reward 1 per surviving step and a 200-step cap.
    """

    name = "cartpole"
    state_dim = 4
    discrete = True
    n_actions = 2
    max_steps = 200

    gravity = 9.8
    cart_mass = 1.0
    pole_mass = 0.1
    half_length = 0.5
    force_mag = 10.0
    tau = 0.02
    x_limit = 2.4
    theta_limit = 12.0 * math.pi / 180.0

    def reset(self, seed: int) -> np.ndarray:
        rng = np.random.default_rng(seed)
        return rng.uniform(-0.05, 0.05, size=4)

    def step(self, state, action):
        x, x_dot, theta, theta_dot = (float(v) for v in state)
        force = self.force_mag if action == 1 else -self.force_mag
        total_mass = self.cart_mass + self.pole_mass
        pole_ml = self.pole_mass * self.half_length
        cos_t, sin_t = math.cos(theta), math.sin(theta)

        temp = (force + pole_ml * theta_dot**2 * sin_t) / total_mass
        theta_acc = (self.gravity * sin_t - cos_t * temp) / (
            self.half_length * (4.0 / 3.0 - self.pole_mass * cos_t**2 / total_mass)
        )
        x_acc = temp - pole_ml * theta_acc * cos_t / total_mass

        x += self.tau * x_dot
        x_dot += self.tau * x_acc
        theta += self.tau * theta_dot
        theta_dot += self.tau * theta_acc

        done = abs(x) > self.x_limit or abs(theta) > self.theta_limit
        return np.array([x, x_dot, theta, theta_dot]), 1.0, done

    def action_layout(self) -> ActionLayout:
        return ActionLayout(order=(0, 1), names=("push_left", "push_right"))


class PointMassEnv(Environment):
    """Planar point mass steered by two continuous force components.

    State is (px, py, vx, vy); forces clip to [-1, 1] and integrate with
    dt = 0.1. Reward is the negative distance to the origin; episodes run
    to the 100-step cap.
    """

    name = "pointmass"
    state_dim = 4
    discrete = False
    n_actions = 2
    max_steps = 100
    dt = 0.1

    def reset(self, seed: int) -> np.ndarray:
        rng = np.random.default_rng(seed)
        pos = rng.uniform(-1.0, 1.0, size=2)
        return np.array([pos[0], pos[1], 0.0, 0.0])

    def step(self, state, action):
        force = np.clip(np.asarray(action, dtype=np.float64), -1.0, 1.0)
        vel = state[2:] + self.dt * force
        pos = state[:2] + self.dt * vel
        nxt = np.concatenate([pos, vel])
        return nxt, -float(np.linalg.norm(pos)), False

    def action_layout(self) -> ActionLayout:
        return ActionLayout(order=(0, 1), names=("force_x", "force_y"),
                            signed=(True, True))


_ENVS = {"cartpole": CartPoleEnv, "pointmass": PointMassEnv}


def cartpole_env() -> CartPoleEnv:
    return CartPoleEnv()


def pointmass_env() -> PointMassEnv:
    return PointMassEnv()


def make_env(name: str) -> Environment:
    if name not in _ENVS:
        raise ConfigError(f"unknown environment {name!r}; choose from {sorted(_ENVS)}")
    return _ENVS[name]()


@dataclass
class BlackBoxPolicy:
    """Tanh hidden layer (the encoder) plus a final linear layer."""

    enc_weight: np.ndarray   # h x state_dim
    enc_bias: np.ndarray     # h
    final_weight: np.ndarray  # A x h
    final_bias: np.ndarray   # A
    meta: dict = field(default_factory=dict)

    def encode(self, state) -> np.ndarray:
        return np.tanh(self.enc_weight @ np.asarray(state, dtype=np.float64)
                       + self.enc_bias)

    def __call__(self, state) -> np.ndarray:
        return self.final_weight @ self.encode(state) + self.final_bias

    def decomposition(self) -> PolicyDecomposition:
        return PolicyDecomposition(
            encoder=self.encode,
            final_weight=self.final_weight,
            final_bias=self.final_bias,
        )

    @property
    def latent_dim(self) -> int:
        return self.enc_weight.shape[0]


@dataclass
class CEMConfig:
    """Cross-entropy method settings for black-box training."""

    hidden_dim: int = 16
    population: int = 48
    elite_frac: float = 1.0 / 6.0
    iterations: int = 60
    sigma_init: float = 1.0
    sigma_floor: float = 0.02
    eval_episodes: int = 3
    confirm_episodes: int = 20
    target_reward: float | None = None  # env default when None


_TARGETS = {"cartpole": 195.0, "pointmass": -35.0}


def _policy_from_flat(theta: np.ndarray, state_dim: int, hidden: int,
                      n_actions: int, meta=None) -> BlackBoxPolicy:
    sizes = [hidden * state_dim, hidden, n_actions * hidden, n_actions]
    parts = np.split(theta, np.cumsum(sizes)[:-1])
    return BlackBoxPolicy(
        enc_weight=parts[0].reshape(hidden, state_dim),
        enc_bias=parts[1],
        final_weight=parts[2].reshape(n_actions, hidden),
        final_bias=parts[3],
        meta=meta or {},
    )


def _rollout_return(policy: BlackBoxPolicy, env: Environment, seed: int) -> float:
    state = env.reset(seed)
    total = 0.0
    for _ in range(env.max_steps):
        raw = policy(state)
        action = int(np.argmax(raw)) if env.discrete else raw
        state, reward, done = env.step(state, action)
        total += reward
        if done:
            break
    return total


def _mean_return(policy: BlackBoxPolicy, env: Environment, episodes: int,
                 seed_base: int) -> float:
    return float(np.mean([
        _rollout_return(policy, env, seed_base + ep) for ep in range(episodes)
    ]))


def train_blackbox(env: Environment, cfg: CEMConfig | None = None,
                   seed: int = 0) -> BlackBoxPolicy:
    """Cross-entropy search until the confirm-run mean hits the target.

    Candidates within an iteration share evaluation seeds (common random
    numbers), and all sampling comes from one seeded generator, so the
    result is a deterministic function of (env, cfg, seed).
    """
    cfg = cfg or CEMConfig()
    target = cfg.target_reward if cfg.target_reward is not None else _TARGETS.get(env.name)
    if target is None:
        raise ConfigError(f"no target reward known for env {env.name!r}")

    hidden, state_dim, n_actions = cfg.hidden_dim, env.state_dim, env.n_actions
    dim = hidden * state_dim + hidden + n_actions * hidden + n_actions
    rng = np.random.default_rng(seed)
    mean = np.zeros(dim)
    sigma = np.full(dim, cfg.sigma_init)
    n_elite = max(1, int(round(cfg.population * cfg.elite_frac)))
    best_score = -np.inf

    for iteration in range(cfg.iterations):
        samples = mean + sigma * rng.standard_normal((cfg.population, dim))
        eval_base = seed * 1_000_003 + iteration * 1_009
        scores = np.array([
            _mean_return(
                _policy_from_flat(samples[i], state_dim, hidden, n_actions),
                env, cfg.eval_episodes, eval_base,
            )
            for i in range(cfg.population)
        ])
        elite = samples[np.argsort(-scores, kind="stable")[:n_elite]]
        mean = elite.mean(axis=0)
        sigma = np.maximum(elite.std(axis=0), cfg.sigma_floor)

        candidate = _policy_from_flat(mean, state_dim, hidden, n_actions)
        confirm = _mean_return(candidate, env, cfg.confirm_episodes,
                               seed * 1_000_003 + 777_001)
        best_score = max(best_score, confirm)
        if confirm >= target:
            candidate.meta = {
                "method": "cem", "seed": seed, "env": env.name,
                "reward": confirm, "iterations": iteration + 1,
            }
            return candidate

    raise TrainingFailed(
        f"target {target} unreached after {cfg.iterations} iterations "
        f"(best {best_score:.3f})",
        best_score=best_score,
    )


def _nearest_row(target_z: np.ndarray, candidates: np.ndarray,
                 indices: np.ndarray, taken: set) -> int:
    dist = np.linalg.norm(candidates - target_z, axis=1)
    order = np.lexsort((indices, dist))
    return next(int(indices[o]) for o in order if int(indices[o]) not in taken)


def kmeans_prototypes(dataset: EncodedDataset, seed: int = 0,
                      per_class: int = 1) -> PrototypeSet:
    """Per-class k-means centers (k-means++ start), mapped to real rows."""
    rng = np.random.default_rng(seed)
    entries = []
    for class_id in range(dataset.n_classes):
        idx = dataset.class_indices(class_id)
        if idx.size == 0:
            raise ConfigError(f"class {class_id} has no dataset rows")
        if idx.size < per_class:
            raise ConfigError(
                f"class {class_id} has {idx.size} rows < {per_class} prototypes"
            )
        points = dataset.z[idx]
        centers = _kmeans(points, per_class, rng)
        taken: set = set()
        for slot in range(per_class):
            chosen = _nearest_row(centers[slot], points, idx, taken)
            taken.add(chosen)
            entries.append(PrototypeEntry(
                class_id=class_id, slot=slot, dataset_index=chosen,
                z=dataset.z[chosen].copy(),
            ))
    return PrototypeSet(entries=entries, method="kmeans")


def _kmeans(points: np.ndarray, k: int, rng, max_iter: int = 100) -> np.ndarray:
    # k-means++ seeding
    centers = [points[int(rng.integers(points.shape[0]))]]
    for _ in range(k - 1):
        d2 = np.min(
            [((points - c) ** 2).sum(axis=1) for c in centers], axis=0
        )
        total = d2.sum()
        if total == 0.0:
            centers.append(centers[0])
            continue
        probs = d2 / total
        centers.append(points[int(rng.choice(points.shape[0], p=probs))])
    centers = np.stack(centers)

    for _ in range(max_iter):
        d2 = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        assign = np.argmin(d2, axis=1)
        new_centers = centers.copy()
        for j in range(k):
            members = points[assign == j]
            if members.shape[0]:
                new_centers[j] = members.mean(axis=0)
        if np.allclose(new_centers, centers, rtol=0.0, atol=1e-12):
            break
        centers = new_centers
    return centers


def class_mean_prototypes(dataset: EncodedDataset) -> PrototypeSet:
    """The dataset row nearest each class's mean encoded vector."""
    entries = []
    for class_id in range(dataset.n_classes):
        idx = dataset.class_indices(class_id)
        if idx.size == 0:
            raise ConfigError(f"class {class_id} has no dataset rows")
        mean = dataset.z[idx].mean(axis=0)
        chosen = _nearest_row(mean, dataset.z[idx], idx, set())
        entries.append(PrototypeEntry(
            class_id=class_id, slot=0, dataset_index=chosen,
            z=dataset.z[chosen].copy(),
        ))
    return PrototypeSet(entries=entries, method="classmean")


def canonical_prototypes(dataset: EncodedDataset,
                         layout: ActionLayout | None = None) -> PrototypeSet:
    """Rows whose raw actions best match the canonical one-hot actions.

    For each class the canonical vector has 1 at the class position (a
    -1 variant too when the layout marks it signed); the search runs
    over all rows, not class-restricted.
    """
    if len(dataset) == 0:
        raise ConfigError("dataset is empty")
    layout = layout or dataset.layout
    entries = []
    for class_id in range(layout.n_classes):
        variants = [1.0]
        if layout.signed[class_id]:
            variants.append(-1.0)
        best = None  # (distance, row index)
        for value in variants:
            canonical = np.zeros(layout.n_classes)
            canonical[class_id] = value
            dist = np.linalg.norm(dataset.raw_actions - canonical, axis=1)
            row = int(np.argmin(dist))  # lowest index on ties
            key = (float(dist[row]), row)
            if best is None or key < best:
                best = key
        entries.append(PrototypeEntry(
            class_id=class_id, slot=0, dataset_index=best[1],
            z=dataset.z[best[1]].copy(),
        ))
    return PrototypeSet(entries=entries, method="canonical")


def save_policy(policy: BlackBoxPolicy, path) -> None:
    meta = {"env_name": policy.meta.get("env", "unknown"),
            "method": policy.meta.get("method", "cem"),
            "seed": policy.meta.get("seed", 0),
            "reward": textio.format_float(policy.meta.get("reward", 0.0))}
    textio.write_blocks(path, "policy", meta, arrays={
        "enc_weight": policy.enc_weight,
        "enc_bias": policy.enc_bias[None, :],
        "final_weight": policy.final_weight,
        "final_bias": policy.final_bias[None, :],
    })


def load_policy(path) -> BlackBoxPolicy:
    meta, arrays, _ = textio.read_blocks(path, "policy")
    return BlackBoxPolicy(
        enc_weight=arrays["enc_weight"],
        enc_bias=arrays["enc_bias"][0],
        final_weight=arrays["final_weight"],
        final_bias=arrays["final_bias"][0],
        meta={"env": meta.get("env_name", "unknown"),
              "method": meta.get("method", "cem"),
              "seed": int(meta.get("seed", 0)),
              "reward": float(meta.get("reward", 0.0))},
    )
