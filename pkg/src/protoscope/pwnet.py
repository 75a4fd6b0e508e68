"""Prototype-wrapper head: similarity scoring, imitation training, evaluation.

Each slot projects the encoder latent into prototype space and scores it
against a frozen prototype embedding with a log-ratio similarity; the
fixed class-to-action matrix W' turns scores into an action vector. Only
the slot projections train (by imitating the stored black-box actions);
prototypes and W' never move in stage 2.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .dataset import EncodedDataset
from .discover import PrototypeSet
from .embednet import MappingNet, forward_batch
from .errors import ConfigError, NumericalError, ShapeError
from .numkit import MomentOptimizer
from . import textio


@dataclass
class PWNetHead:
    """Per-slot projections, frozen prototype embeddings, fixed W'."""

    projections: np.ndarray          # K x p x d_z, trainable
    prototype_embeddings: np.ndarray  # K x p, frozen
    w_prime: np.ndarray              # A x K, fixed at construction
    eps_sim: float = 1e-5
    slot_classes: np.ndarray | None = None   # K class ids, for explanations
    slot_indices: np.ndarray | None = None   # K source dataset rows
    method: str = "ours"

    def __post_init__(self):
        if not 0.0 < self.eps_sim < 1.0:
            raise ConfigError(f"eps_sim must lie in (0, 1), got {self.eps_sim}")

    @property
    def n_slots(self) -> int:
        return self.projections.shape[0]

    @property
    def n_actions(self) -> int:
        return self.w_prime.shape[0]

    @property
    def input_dim(self) -> int:
        return self.projections.shape[2]


@dataclass
class Stage2Config:
    epochs: int = 10
    batch_size: int = 128
    lr: float = 1e-2
    lr_decay: float = 0.97
    seed: int = 0


@dataclass
class RewardStats:
    rewards: list
    episodes: int

    @property
    def mean(self) -> float:
        return float(np.mean(self.rewards))

    @property
    def stderr(self) -> float:
        if self.episodes < 2:
            return 0.0
        return float(np.std(self.rewards, ddof=1) / math.sqrt(self.episodes))


def class_identity_weights(n_actions: int, slot_classes) -> np.ndarray:
    """W' with a 1 wherever a slot's class equals the action index."""
    slot_classes = np.asarray(slot_classes, dtype=np.int64)
    w = np.zeros((n_actions, slot_classes.size))
    for j, c in enumerate(slot_classes):
        w[c, j] = 1.0
    return w


def build_head(protos: PrototypeSet, net: MappingNet, n_actions: int,
               eps_sim: float = 1e-5, w_prime=None, seed: int = 0) -> PWNetHead:
    """Assemble a head from a prototype set.

    Prototype embeddings come from the shared stage-1 mapping when a
    prototype entry does not already carry one. Slots are ordered by
    (class, slot); W' defaults to the class-identity mapping.
    """
    entries = sorted(protos.entries, key=lambda e: (e.class_id, e.slot))
    if not entries:
        raise ConfigError("prototype set is empty")
    embeddings = np.stack([
        e.embedding if e.embedding is not None
        else forward_batch(net, e.z[None, :])[0]
        for e in entries
    ])
    slot_classes = np.array([e.class_id for e in entries])
    if w_prime is None:
        w_prime = class_identity_weights(n_actions, slot_classes)
    d_z = entries[0].z.shape[0]
    rng = np.random.default_rng(seed)
    bound = 1.0 / np.sqrt(d_z)
    projections = rng.uniform(-bound, bound, size=(len(entries), embeddings.shape[1], d_z))
    return PWNetHead(
        projections=projections,
        prototype_embeddings=embeddings,
        w_prime=np.asarray(w_prime, dtype=np.float64),
        eps_sim=eps_sim,
        slot_classes=slot_classes,
        slot_indices=np.array([e.dataset_index for e in entries]),
        method=protos.method,
    )


def sim(u, proto, eps_sim: float) -> float:
    """log((d^2 + 1) / (d^2 + eps)) with d the Euclidean distance.

    Strictly positive and strictly decreasing in d^2, peaking at
    log(1/eps) when u hits the prototype.
    """
    d2 = float(((np.asarray(u) - np.asarray(proto)) ** 2).sum())
    return math.log((d2 + 1.0) / (d2 + eps_sim))


def slot_scores(head: PWNetHead, z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (head.input_dim,):
        raise ShapeError(f"latent shape {z.shape} != (d_z={head.input_dim},)")
    u = head.projections @ z                      # K x p
    d2 = ((u - head.prototype_embeddings) ** 2).sum(axis=1)
    return np.log((d2 + 1.0) / (d2 + head.eps_sim))


def wrap_forward(head: PWNetHead, z) -> np.ndarray:
    """Action vector a' = W' @ similarity scores for one latent."""
    return head.w_prime @ slot_scores(head, z)


def explain(head: PWNetHead, z, dataset: EncodedDataset | None = None,
            protos: PrototypeSet | None = None) -> list:
    """Slots ranked by similarity score, most similar first.

    Each item reports the slot, its class, the source dataset row of the
    prototype, and the score; ties keep slot order. When the dataset is
    supplied the prototype's stored row is attached for display.
    """
    scores = slot_scores(head, z)
    order = np.argsort(-scores, kind="stable")
    entries = sorted(protos.entries, key=lambda e: (e.class_id, e.slot)) if protos else None
    ranked = []
    for rank, j in enumerate(order):
        if head.slot_indices is not None:
            index = int(head.slot_indices[j])
        elif entries is not None:
            index = entries[j].dataset_index
        else:
            index = -1
        item = {
            "rank": rank,
            "slot": int(j),
            "class_id": int(head.slot_classes[j]) if head.slot_classes is not None else -1,
            "dataset_index": index,
            "score": float(scores[j]),
        }
        if dataset is not None and 0 <= index < len(dataset):
            item["z"] = dataset.z[index]
            item["raw_action"] = dataset.raw_actions[index]
        ranked.append(item)
    return ranked


def _batch_forward(head: PWNetHead, Z: np.ndarray):
    # u[n, k, :] = projections[k] @ Z[n]
    u = np.einsum("kpd,nd->nkp", head.projections, Z)
    diff = u - head.prototype_embeddings[None, :, :]
    d2 = (diff**2).sum(axis=2)
    scores = np.log((d2 + 1.0) / (d2 + head.eps_sim))
    actions = scores @ head.w_prime.T
    return actions, scores, diff, d2


def train_stage2(head: PWNetHead, dataset: EncodedDataset,
                 cfg: Stage2Config | None = None) -> PWNetHead:
    """Fit slot projections by mean-squared imitation of stored actions.

    Prototype embeddings and W' are untouched; gradients flow only into
    the projections.
    """
    cfg = cfg or Stage2Config()
    n = len(dataset)
    if n == 0:
        raise ConfigError("dataset is empty")
    if dataset.d_z != head.input_dim:
        raise ShapeError(f"dataset d_z={dataset.d_z} != head d_z={head.input_dim}")
    batch_size = min(cfg.batch_size, n)
    rng = np.random.default_rng(cfg.seed)
    opt = MomentOptimizer(step_size=cfg.lr)
    targets = dataset.raw_actions
    n_act = head.n_actions

    for epoch in range(cfg.epochs):
        opt.step_size = cfg.lr * cfg.lr_decay**epoch
        perm = rng.permutation(n)
        for start in range(0, n, batch_size):
            rows = perm[start:start + batch_size]
            Z = dataset.z[rows]
            actions, _, diff, d2 = _batch_forward(head, Z)
            err = actions - targets[rows]
            mse = float((err**2).mean())
            if not np.isfinite(mse):
                raise NumericalError(f"non-finite stage-2 loss at epoch {epoch}")
            g_actions = 2.0 * err / err.size
            g_scores = g_actions @ head.w_prime                    # n x K
            dscore_dd2 = 1.0 / (d2 + 1.0) - 1.0 / (d2 + head.eps_sim)
            g_d2 = g_scores * dscore_dd2
            g_u = 2.0 * g_d2[:, :, None] * diff                    # n x K x p
            g_proj = np.einsum("nkp,nd->kpd", g_u, Z)
            head.projections = opt.step(
                {"projections": head.projections}, {"projections": g_proj}
            )["projections"]
    return head


def imitation_mse(head: PWNetHead, dataset: EncodedDataset) -> float:
    actions, _, _, _ = _batch_forward(head, dataset.z)
    return float(((actions - dataset.raw_actions) ** 2).mean())


def action_agreement(head: PWNetHead, dataset: EncodedDataset) -> float:
    """Fraction of rows where the head's argmax action matches the label."""
    actions, _, _, _ = _batch_forward(head, dataset.z)
    return float((np.argmax(actions, axis=1) == dataset.labels).mean())


def evaluate(actor, env, episodes: int, seed: int) -> RewardStats:
    """Roll the actor for the given episodes with per-episode derived seeds."""
    if episodes < 1:
        raise ValueError(f"episodes must be >= 1, got {episodes}")
    rewards = []
    for ep in range(episodes):
        state = env.reset(seed + ep)
        total = 0.0
        for _ in range(env.max_steps):
            state, reward, done = env.step(state, actor(state))
            total += reward
            if done:
                break
        rewards.append(total)
    return RewardStats(rewards=rewards, episodes=episodes)


def policy_actor(policy, env):
    """Greedy actor for a decomposed policy: argmax for discrete actions."""
    decomp = policy.decomposition() if hasattr(policy, "decomposition") else policy
    if env.discrete:
        return lambda s: int(np.argmax(decomp(s)))
    return lambda s: decomp(s)


def head_actor(head: PWNetHead, encoder, env):
    """Actor that encodes the state and acts on the head's output."""
    if env.discrete:
        return lambda s: int(np.argmax(wrap_forward(head, encoder(s))))
    return lambda s: wrap_forward(head, encoder(s))


def save_head(head: PWNetHead, path, encoder_weight=None, encoder_bias=None,
              env_name: str = "unknown") -> None:
    k, p, d_z = head.projections.shape
    meta = {
        "slots": k, "proto_dim": p, "d_z": d_z,
        "eps_sim": textio.format_float(head.eps_sim),
        "method": head.method, "env_name": env_name,
        "has_encoder": int(encoder_weight is not None),
    }
    arrays = {
        "projections": head.projections.reshape(k * p, d_z),
        "prototype_embeddings": head.prototype_embeddings,
        "w_prime": head.w_prime,
    }
    ints = {}
    if head.slot_classes is not None:
        ints["slot_classes"] = head.slot_classes
    if head.slot_indices is not None:
        ints["slot_indices"] = head.slot_indices
    if encoder_weight is not None:
        arrays["encoder_weight"] = encoder_weight
        arrays["encoder_bias"] = np.asarray(encoder_bias)[None, :]
    textio.write_blocks(path, "head", meta, arrays, ints)


def load_head(path):
    """Returns (head, encoder_weight, encoder_bias, env_name)."""
    meta, arrays, ints = textio.read_blocks(path, "head")
    k, p, d_z = int(meta["slots"]), int(meta["proto_dim"]), int(meta["d_z"])
    head = PWNetHead(
        projections=arrays["projections"].reshape(k, p, d_z),
        prototype_embeddings=arrays["prototype_embeddings"],
        w_prime=arrays["w_prime"],
        eps_sim=float(meta["eps_sim"]),
        slot_classes=ints.get("slot_classes"),
        slot_indices=ints.get("slot_indices"),
        method=meta.get("method", "ours"),
    )
    enc_w = arrays.get("encoder_weight")
    enc_b = arrays["encoder_bias"][0] if "encoder_bias" in arrays else None
    return head, enc_w, enc_b, meta.get("env_name", "unknown")
