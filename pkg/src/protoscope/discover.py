"""Stage-1 training: joint metric + manifold objective, then prototype extraction.

Each mini-batch gets fresh charts and a fresh target similarity matrix
computed on the raw encoded vectors (constant w.r.t. the loss); the
mapping and the trainable proxies are updated by two separate
adaptive-moment optimizers, and the momentum proxies track the trainable
ones once per epoch. Prototypes are the nearest real dataset rows to the
momentum proxies in embedding space.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .dataset import EncodedDataset
from .embednet import (
    MappingNet,
    ProxyBank,
    forward_batch,
    total_loss,
)
from .errors import ConfigError, NumericalError
from .manifold import SimilarityParams, build_charts, pairwise_similarity
from .numkit import MomentOptimizer
from . import textio


@dataclass
class Stage1Config:
    """Training defaults for prototype discovery."""

    epochs: int = 200
    batch_size: int = 128
    lr_net: float = 1e-3
    lr_proxy: float = 1e-3
    lr_decay: float = 0.97
    gamma: float = 0.999
    alpha: float = 32.0
    eps_margin: float = 0.1
    delta: float = 2.0
    m: int = 3
    T: float = 0.9
    N_alpha: float = 4.0
    N_beta: float = 0.5
    n_anchors: int | None = None
    k_max_neighbors: int | None = None
    prototypes_per_class: int = 1
    prototype_dim: int = 50
    norm_epsilon: float = 1e-5
    sign_mode: str = "semantic"
    chart_space: str = "input"  # charts on raw z, or "embedding" for h(z)
    seed: int = 0
    deterministic: bool = True
    workers: int = 1

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        for name in ("batch_size", "lr_net", "lr_proxy", "lr_decay", "alpha",
                     "delta", "m", "prototypes_per_class", "prototype_dim"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if not 0.0 < self.T <= 1.0:
            raise ConfigError(f"T must lie in (0, 1], got {self.T}")
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError(f"gamma must lie in [0, 1], got {self.gamma}")
        if self.eps_margin < 0:
            raise ConfigError(f"eps_margin must be >= 0, got {self.eps_margin}")
        if self.chart_space not in ("input", "embedding"):
            raise ConfigError(f"chart_space must be input|embedding, got {self.chart_space}")

    def similarity_params(self) -> SimilarityParams:
        return SimilarityParams(
            N_alpha=self.N_alpha, N_beta=self.N_beta, T=self.T, m=self.m,
            n_anchors=self.n_anchors, k_max_neighbors=self.k_max_neighbors,
        )


@dataclass
class EpochStats:
    epoch: int
    pa_loss: float
    manifold_loss: float
    total: float
    lr_net: float
    lr_proxy: float


@dataclass
class TrainedState:
    net: MappingNet
    bank: ProxyBank
    loss_history: list
    config: Stage1Config


@dataclass
class PrototypeEntry:
    class_id: int
    slot: int
    dataset_index: int
    z: np.ndarray
    embedding: np.ndarray | None = None


@dataclass
class PrototypeSet:
    entries: list
    method: str = "ours"

    def __iter__(self):
        return iter(self.entries)

    def __len__(self):
        return len(self.entries)

    def by_class_slot(self) -> dict:
        return {(e.class_id, e.slot): e for e in self.entries}


def momentum_update(bank: ProxyBank) -> ProxyBank:
    """theta_m <- gamma * theta_m + (1 - gamma) * theta_q, elementwise."""
    bank.theta_m = bank.gamma * bank.theta_m + (1.0 - bank.gamma) * bank.theta_q
    return bank


def train_stage1(dataset: EncodedDataset, cfg: Stage1Config) -> TrainedState:
    """Run the full stage-1 loop; deterministic for a fixed config seed."""
    n = len(dataset)
    n_classes = dataset.n_classes
    if n < cfg.batch_size:
        raise ConfigError(f"dataset has {n} rows < batch_size {cfg.batch_size}")
    present = np.unique(dataset.labels)
    missing = sorted(set(range(n_classes)) - set(int(c) for c in present))
    if missing:
        raise ConfigError(f"classes absent from dataset: {missing}")

    rng = np.random.default_rng(cfg.seed)
    net = MappingNet.initialize(dataset.d_z, cfg.prototype_dim, rng, cfg.norm_epsilon)
    bank = ProxyBank.initialize(n_classes, cfg.prototypes_per_class,
                                cfg.prototype_dim, cfg.gamma, rng)
    opt_net = MomentOptimizer(step_size=cfg.lr_net)
    opt_proxy = MomentOptimizer(step_size=cfg.lr_proxy)
    sim_params = cfg.similarity_params()
    workers = 1 if cfg.deterministic else max(1, cfg.workers)

    history = []
    n_batches = n // cfg.batch_size  # incomplete trailing batch is dropped
    for epoch in range(cfg.epochs):
        opt_net.step_size = cfg.lr_net * cfg.lr_decay**epoch
        opt_proxy.step_size = cfg.lr_proxy * cfg.lr_decay**epoch
        perm = rng.permutation(n)
        sums = np.zeros(3)
        for b in range(n_batches):
            batch = perm[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            z_batch = dataset.z[batch]
            chart_pts = z_batch if cfg.chart_space == "input" else forward_batch(net, z_batch)
            chart_seed = int(rng.integers(2**31 - 1))
            charts = build_charts(chart_pts, sim_params, seed=chart_seed)
            target = pairwise_similarity(chart_pts, charts, sim_params, workers=workers)

            breakdown = total_loss(
                net, z_batch, dataset.labels[batch], bank, target,
                cfg.alpha, cfg.eps_margin, cfg.delta, cfg.sign_mode,
            )
            if not np.isfinite(breakdown.total):
                raise NumericalError(f"non-finite loss at epoch {epoch} batch {b}")
            new_net = opt_net.step(
                {"weight": net.weight, "bias": net.bias},
                {"weight": breakdown.grads["weight"], "bias": breakdown.grads["bias"]},
            )
            net.weight, net.bias = new_net["weight"], new_net["bias"]
            bank.theta_q = opt_proxy.step(
                {"theta_q": bank.theta_q},
                {"theta_q": breakdown.grads["theta_q"]},
            )["theta_q"]
            sums += (breakdown.pa_loss, breakdown.manifold_loss, breakdown.total)
        momentum_update(bank)
        history.append(EpochStats(
            epoch=epoch,
            pa_loss=sums[0] / n_batches,
            manifold_loss=sums[1] / n_batches,
            total=sums[2] / n_batches,
            lr_net=opt_net.step_size,
            lr_proxy=opt_proxy.step_size,
        ))
    return TrainedState(net=net, bank=bank, loss_history=history, config=cfg)


def extract_prototypes(state: TrainedState, dataset: EncodedDataset) -> PrototypeSet:
    """Nearest real instance to each momentum proxy, per (class, slot).

    Ties break to the lowest dataset index; colliding slots of one class
    fall through to the next-nearest untaken row, in slot order.
    """
    bank = state.bank
    entries = []
    for class_id in range(bank.n_classes):
        idx = dataset.class_indices(class_id)
        if idx.size == 0:
            raise ConfigError(f"class {class_id} has no dataset rows")
        emb = forward_batch(state.net, dataset.z[idx])
        taken = set()
        for slot in range(bank.per_class):
            proxy = bank.theta_m[class_id, slot]
            dist = np.linalg.norm(emb - proxy, axis=1)
            order = np.lexsort((idx, dist))  # distance, then dataset index
            chosen = next(int(idx[o]) for o in order if int(idx[o]) not in taken)
            taken.add(chosen)
            entries.append(PrototypeEntry(
                class_id=class_id,
                slot=slot,
                dataset_index=chosen,
                z=dataset.z[chosen].copy(),
                embedding=forward_batch(state.net, dataset.z[chosen][None, :])[0],
            ))
    return PrototypeSet(entries=entries, method="ours")


_NONE_FIELDS = ("n_anchors", "k_max_neighbors")


def config_to_meta(cfg: Stage1Config) -> dict:
    meta = {}
    for f in fields(cfg):
        value = getattr(cfg, f.name)
        meta[f.name] = "none" if value is None else value
    return meta


def config_from_meta(meta: dict) -> Stage1Config:
    kwargs = {}
    for f in fields(Stage1Config):
        if f.name not in meta:
            continue
        raw = meta[f.name]
        if f.name in _NONE_FIELDS and raw == "none":
            kwargs[f.name] = None
        elif isinstance(f.default, bool):
            kwargs[f.name] = raw in ("True", "true", "1")
        elif isinstance(f.default, int) and not isinstance(f.default, bool):
            kwargs[f.name] = int(raw)
        elif isinstance(f.default, float):
            kwargs[f.name] = float(raw)
        else:
            kwargs[f.name] = raw
    return Stage1Config(**kwargs)


def save_state(state: TrainedState, path) -> None:
    c, p_slots = state.bank.n_classes, state.bank.per_class
    meta = config_to_meta(state.config)
    meta.update({"classes": c, "slots": p_slots, "d_z": state.net.input_dim})
    hist = np.array(
        [[h.epoch, h.pa_loss, h.manifold_loss, h.total, h.lr_net, h.lr_proxy]
         for h in state.loss_history]
    ).reshape(len(state.loss_history), 6)
    textio.write_blocks(path, "stage1", meta, arrays={
        "weight": state.net.weight,
        "bias": state.net.bias[None, :],
        "theta_q": state.bank.theta_q.reshape(c * p_slots, -1),
        "theta_m": state.bank.theta_m.reshape(c * p_slots, -1),
        "loss_history": hist,
    })


def load_state(path) -> TrainedState:
    meta, arrays, _ = textio.read_blocks(path, "stage1")
    cfg = config_from_meta(meta)
    c, p_slots = int(meta["classes"]), int(meta["slots"])
    net = MappingNet(
        weight=arrays["weight"],
        bias=arrays["bias"][0],
        norm_epsilon=cfg.norm_epsilon,
    )
    dim = arrays["theta_q"].shape[1]
    bank = ProxyBank(
        theta_q=arrays["theta_q"].reshape(c, p_slots, dim),
        theta_m=arrays["theta_m"].reshape(c, p_slots, dim),
        gamma=cfg.gamma,
    )
    history = [
        EpochStats(epoch=int(r[0]), pa_loss=r[1], manifold_loss=r[2],
                   total=r[3], lr_net=r[4], lr_proxy=r[5])
        for r in arrays["loss_history"]
    ]
    return TrainedState(net=net, bank=bank, loss_history=history, config=cfg)


def save_prototypes(protos: PrototypeSet, path) -> None:
    entries = protos.entries
    meta = {"method": protos.method, "count": len(entries)}
    arrays = {"z": np.stack([e.z for e in entries])}
    if all(e.embedding is not None for e in entries):
        arrays["embedding"] = np.stack([e.embedding for e in entries])
    ints = {
        "class_id": np.array([e.class_id for e in entries]),
        "slot": np.array([e.slot for e in entries]),
        "dataset_index": np.array([e.dataset_index for e in entries]),
    }
    textio.write_blocks(path, "protoset", meta, arrays, ints)


def load_prototypes(path) -> PrototypeSet:
    meta, arrays, ints = textio.read_blocks(path, "protoset")
    embeddings = arrays.get("embedding")
    entries = [
        PrototypeEntry(
            class_id=int(ints["class_id"][i]),
            slot=int(ints["slot"][i]),
            dataset_index=int(ints["dataset_index"][i]),
            z=arrays["z"][i],
            embedding=None if embeddings is None else embeddings[i],
        )
        for i in range(len(ints["class_id"]))
    ]
    return PrototypeSet(entries=entries, method=meta.get("method", "ours"))
