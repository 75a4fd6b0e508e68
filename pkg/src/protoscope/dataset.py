"""Encoded state-action datasets: collection, discretization, serialization.

A dataset row pairs the encoder latent z with the policy's raw action
vector and a discrete class label. Files are line-delimited text: one
header line with meta as key=value pairs, then one record per line
(label, raw action components, z components) as full-precision decimal
floats, UTF-8 with '\\n' separators.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ConfigError, FormatError, NumericalError, ShapeError
from .textio import FORMAT_VERSION, format_float, parse_meta


@dataclass(frozen=True)
class ActionLayout:
    """Flattening order and naming of the action vector.

    ``order`` maps nested action-tuple positions to flat indices (a
    permutation of range(A)); ``names`` gives one class name per flat
    position; ``signed`` marks positions whose canonical action may be
    -1 as well as +1.
    """

    order: tuple
    names: tuple
    signed: tuple = ()

    def __post_init__(self):
        a = len(self.order)
        if sorted(self.order) != list(range(a)):
            raise ConfigError(f"order {self.order} is not a permutation of 0..{a - 1}")
        if len(self.names) != a:
            raise ConfigError("one class name required per action position")
        if not self.signed:
            object.__setattr__(self, "signed", tuple(False for _ in range(a)))
        elif len(self.signed) != a:
            raise ConfigError("signed flags must match action positions")

    @property
    def n_classes(self) -> int:
        return len(self.order)


@dataclass(frozen=True)
class PolicyDecomposition:
    """A policy split into an encoder and its final linear layer.

    The black-box output is final_weight @ encoder(state) + final_bias.
    """

    encoder: Callable[[np.ndarray], np.ndarray]
    final_weight: np.ndarray
    final_bias: np.ndarray

    def raw_action(self, z: np.ndarray) -> np.ndarray:
        return self.final_weight @ z + self.final_bias

    def __call__(self, state: np.ndarray) -> np.ndarray:
        return self.raw_action(self.encoder(state))


@dataclass
class EncodedDataset:
    """Rows of (encoded state z, raw action vector, class label)."""

    z: np.ndarray            # n x d_z
    raw_actions: np.ndarray  # n x A
    labels: np.ndarray       # n, integer classes in [0, C)
    layout: ActionLayout
    env_name: str = "unknown"
    seed: int = 0
    action_kind: str = "continuous"  # or "discrete"
    extra_meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.z = np.asarray(self.z, dtype=np.float64)
        self.raw_actions = np.asarray(self.raw_actions, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        n = self.z.shape[0]
        if self.raw_actions.shape[0] != n or self.labels.shape[0] != n:
            raise ShapeError("z, raw_actions and labels must have equal row counts")
        if self.raw_actions.shape[1] != self.layout.n_classes:
            raise ShapeError(
                f"raw action width {self.raw_actions.shape[1]} != layout size "
                f"{self.layout.n_classes}"
            )
        if n and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ConfigError("labels must lie in [0, C)")

    def __len__(self) -> int:
        return self.z.shape[0]

    @property
    def d_z(self) -> int:
        return self.z.shape[1]

    @property
    def n_actions(self) -> int:
        return self.raw_actions.shape[1]

    @property
    def n_classes(self) -> int:
        return self.layout.n_classes

    def class_indices(self, label: int) -> np.ndarray:
        return np.flatnonzero(self.labels == label)


def discretize_action(raw, layout: ActionLayout) -> int:
    """Class of the dominant action component.

    Applies a sigmoid to the absolute component values and returns the
    argmax; ties break to the lowest index. Monotonicity makes this
    equal to argmax |raw_i|, but the transform is applied as stated.
    """
    raw = np.asarray(raw, dtype=np.float64)
    if raw.shape != (layout.n_classes,):
        raise ShapeError(f"action has {raw.shape} components, layout expects {layout.n_classes}")
    if np.any(np.isnan(raw)):
        raise NumericalError("action vector contains NaN")
    activation = 1.0 / (1.0 + np.exp(-np.abs(raw)))
    return int(np.argmax(activation))


def collect_rollout(policy: PolicyDecomposition, env, n_steps: int, seed: int) -> EncodedDataset:
    """Run the policy greedily for n_steps and record (z, raw action, label).

    Episodes reset with seeds drawn from one seeded generator, so the
    dataset is deterministic under a fixed (env, policy, seed) triple.
    """
    if n_steps < 1:
        raise ValueError(f"n_steps must be >= 1, got {n_steps}")
    layout = env.action_layout()
    probe = policy.encoder(env.reset(0))
    if policy.final_weight.shape != (layout.n_classes, probe.shape[0]):
        raise ShapeError(
            f"final layer {policy.final_weight.shape} incompatible with "
            f"d_z={probe.shape[0]}, A={layout.n_classes}"
        )

    rng = np.random.default_rng(seed)
    zs = np.empty((n_steps, probe.shape[0]))
    actions = np.empty((n_steps, layout.n_classes))
    labels = np.empty(n_steps, dtype=np.int64)

    state = env.reset(int(rng.integers(2**31 - 1)))
    t_in_episode = 0
    for t in range(n_steps):
        z = policy.encoder(state)
        raw = policy.raw_action(z)
        zs[t] = z
        actions[t] = raw
        if env.discrete:
            labels[t] = int(np.argmax(raw))
            state, _, done = env.step(state, int(np.argmax(raw)))
        else:
            labels[t] = discretize_action(raw, layout)
            state, _, done = env.step(state, raw)
        t_in_episode += 1
        if done or t_in_episode >= env.max_steps:
            state = env.reset(int(rng.integers(2**31 - 1)))
            t_in_episode = 0

    return EncodedDataset(
        z=zs, raw_actions=actions, labels=labels, layout=layout,
        env_name=env.name, seed=seed,
        action_kind="discrete" if env.discrete else "continuous",
    )


_HEADER_PREFIX = f"protoscope-dataset {FORMAT_VERSION}"


def save_dataset(dataset: EncodedDataset, path) -> None:
    meta = {
        "d_z": dataset.d_z,
        "A": dataset.n_actions,
        "C": dataset.n_classes,
        "env_name": dataset.env_name,
        "seed": dataset.seed,
        "action_kind": dataset.action_kind,
        "action_order": ",".join(str(i) for i in dataset.layout.order),
        "action_names": ",".join(dataset.layout.names),
        "action_signed": ",".join("1" if s else "0" for s in dataset.layout.signed),
        "n_rows": len(dataset),
    }
    header = f"{_HEADER_PREFIX} " + " ".join(f"{k}={v}" for k, v in meta.items())
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(header + "\n")
        for label, action, z in zip(dataset.labels, dataset.raw_actions, dataset.z):
            fields = [str(int(label))]
            fields.extend(format_float(a) for a in action)
            fields.extend(format_float(v) for v in z)
            fh.write(" ".join(fields) + "\n")


def load_dataset(path) -> EncodedDataset:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise FormatError("empty file", line=1)
    if not lines[0].startswith(_HEADER_PREFIX + " "):
        raise FormatError(f"expected header starting with {_HEADER_PREFIX!r}", line=1)
    meta = parse_meta(lines[0].split(" ")[2:], line=1)
    try:
        d_z = int(meta["d_z"])
        n_act = int(meta["A"])
        n_cls = int(meta["C"])
        n_rows = int(meta["n_rows"])
        layout = ActionLayout(
            order=tuple(int(i) for i in meta["action_order"].split(",")),
            names=tuple(meta["action_names"].split(",")),
            signed=tuple(s == "1" for s in meta["action_signed"].split(",")),
        )
    except (KeyError, ValueError) as exc:
        raise FormatError(f"bad header meta: {exc}", line=1) from exc
    if n_cls != layout.n_classes or n_act != layout.n_classes:
        raise FormatError("header C/A inconsistent with action layout", line=1)

    records = lines[1:]
    if len(records) != n_rows:
        raise FormatError(
            f"expected {n_rows} records, found {len(records)}", line=len(lines)
        )
    zs = np.empty((n_rows, d_z))
    actions = np.empty((n_rows, n_act))
    labels = np.empty(n_rows, dtype=np.int64)
    width = 1 + n_act + d_z
    for r, record in enumerate(records):
        lineno = r + 2
        fields = record.split(" ")
        if len(fields) != width:
            raise FormatError(
                f"record has {len(fields)} fields, expected {width}", line=lineno
            )
        try:
            labels[r] = int(fields[0])
            actions[r] = [float(x) for x in fields[1:1 + n_act]]
            zs[r] = [float(x) for x in fields[1 + n_act:]]
        except ValueError as exc:
            raise FormatError(str(exc), line=lineno) from exc
        if not 0 <= labels[r] < n_cls:
            raise FormatError(f"label {labels[r]} outside [0, {n_cls})", line=lineno)

    return EncodedDataset(
        z=zs, raw_actions=actions, labels=labels, layout=layout,
        env_name=meta.get("env_name", "unknown"), seed=int(meta.get("seed", 0)),
        action_kind=meta.get("action_kind", "continuous"),
    )
