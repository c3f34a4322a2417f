"""Q-value networks and their hand-derived gradients.

Variants
--------
``deers``    GRU-encoded positive and negative states, each concatenated with
             the action embedding and pushed through its own three ReLU
             layers; the two streams join for two more layers.
``deers-p``  positive stream only (the negative window is never read).
``deers-f``  one fully connected five-layer stack over ``s+ ++ s- ++ a``.
``deers-t``  dual stream, but states are raw concatenated window embeddings.
``deers-r``  ``deers`` trained with the pairwise term switched off.

All arrays are float64.  Item embeddings are frozen inputs.
"""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Iterator, Sequence

import numpy as np

from deers.encoder import GATES, EncoderParameters, gru_backward, gru_forward
from deers.session import DualState


class ConfigError(ValueError):
    pass


class TrainingAborted(RuntimeError):
    """Non-finite values reached the optimiser."""


class QVariant(str, Enum):
    DEERS = "deers"
    DEERS_P = "deers-p"
    DEERS_F = "deers-f"
    DEERS_T = "deers-t"
    DEERS_R = "deers-r"

    @property
    def uses_gru(self) -> bool:
        return self is not QVariant.DEERS_T

    @property
    def uses_negative(self) -> bool:
        return self is not QVariant.DEERS_P

    @property
    def fully_connected(self) -> bool:
        return self is QVariant.DEERS_F

    def effective_alpha(self, alpha: float) -> float:
        """``deers-r`` drops the pairwise term; ``deers-p`` trains on plain TD error."""
        if self in (QVariant.DEERS_R, QVariant.DEERS_P):
            return 0.0
        return alpha


@dataclass(frozen=True)
class Architecture:
    embedding_dim: int = 50
    hidden_dim: int = 50
    window: int = 10
    stream_widths: tuple[int, ...] = (64, 32, 16)
    joint_widths: tuple[int, ...] = (16,)
    output_dim: int = 1

    def __post_init__(self):
        object.__setattr__(self, "stream_widths", tuple(int(w) for w in self.stream_widths))
        object.__setattr__(self, "joint_widths", tuple(int(w) for w in self.joint_widths))
        if min(self.embedding_dim, self.hidden_dim, self.window, self.output_dim) < 1:
            raise ConfigError("architecture dimensions must be positive")
        if not self.stream_widths:
            raise ConfigError("need at least one separated layer")

    def state_dim(self, variant: QVariant) -> int:
        return self.hidden_dim if variant.uses_gru else self.window * self.embedding_dim

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stream_widths"] = list(self.stream_widths)
        d["joint_widths"] = list(self.joint_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Architecture":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


@dataclass(frozen=True)
class Hyperparameters:
    gamma: float = 0.95
    alpha: float = 0.1
    learning_rate: float = 0.005
    gradient_clip: float = 5.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError("gamma must lie in [0, 1]")
        if self.alpha < 0:
            raise ConfigError("alpha must be nonnegative")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.gradient_clip <= 0:
            raise ConfigError("gradient_clip must be positive")


def _streams(arch: Architecture, variant: QVariant) -> list[tuple[str, int, tuple[int, ...]]]:
    """(prefix, number of state parts, widths) for each separated stack."""
    if variant.fully_connected:
        return [("fc", 2, tuple(2 * w for w in arch.stream_widths))]
    if not variant.uses_negative:
        return [("pos", 1, arch.stream_widths)]
    return [("pos", 1, arch.stream_widths), ("neg", 1, arch.stream_widths)]


def layout(arch: Architecture, variant: QVariant) -> dict[str, tuple[int, ...]]:
    """Ordered parameter names and shapes for a variant."""
    shapes: dict[str, tuple[int, ...]] = {}
    h, d = arch.hidden_dim, arch.embedding_dim
    if variant.uses_gru:
        for enc in ("gru_pos", "gru_neg") if variant.uses_negative else ("gru_pos",):
            for g in GATES:
                shapes[f"{enc}.{g}"] = (h, d) if g.startswith("W") else (h, h)
    sd = arch.state_dim(variant)
    joint_in = 0
    for prefix, parts, widths in _streams(arch, variant):
        fan_in = parts * sd + d
        for k, w in enumerate(widths):
            shapes[f"{prefix}.{k}.W"] = (w, fan_in)
            shapes[f"{prefix}.{k}.b"] = (w,)
            fan_in = w
        joint_in += fan_in
    fan_in = joint_in
    for k, w in enumerate(arch.joint_widths + (arch.output_dim,)):
        shapes[f"joint.{k}.W"] = (w, fan_in)
        shapes[f"joint.{k}.b"] = (w,)
        fan_in = w
    return shapes


@dataclass
class NetworkParameters:
    """Named float64 arrays plus the structure needed to interpret them."""

    arch: Architecture
    variant: QVariant
    arrays: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        expected = layout(self.arch, self.variant)
        if set(expected) != set(self.arrays):
            missing = set(expected) ^ set(self.arrays)
            raise ConfigError(f"parameter names do not match layout: {sorted(missing)[:4]}")
        for name, shape in expected.items():
            if self.arrays[name].shape != shape:
                raise ConfigError(f"{name}: expected shape {shape}, got {self.arrays[name].shape}")

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def names(self) -> list[str]:
        return list(layout(self.arch, self.variant))

    def items(self) -> Iterator[tuple[str, np.ndarray]]:
        for n in self.names():
            yield n, self.arrays[n]

    def copy(self) -> "NetworkParameters":
        return NetworkParameters(self.arch, self.variant, {k: v.copy() for k, v in self.arrays.items()})

    def zeros_like(self) -> "NetworkParameters":
        return NetworkParameters(self.arch, self.variant, {k: np.zeros_like(v) for k, v in self.arrays.items()})

    def encoder(self, stream: str = "pos") -> EncoderParameters:
        return EncoderParameters.from_arrays(self.arrays, f"gru_{stream}")

    @property
    def size(self) -> int:
        return sum(v.size for v in self.arrays.values())

    def flat(self) -> np.ndarray:
        return np.concatenate([v.ravel() for _, v in self.items()])

    def with_flat(self, vec: np.ndarray) -> "NetworkParameters":
        out, off = {}, 0
        for name, v in self.items():
            out[name] = np.asarray(vec[off : off + v.size], dtype=np.float64).reshape(v.shape).copy()
            off += v.size
        return NetworkParameters(self.arch, self.variant, out)

    def global_norm(self) -> float:
        return math.sqrt(sum(float(np.sum(v * v)) for _, v in self.items()))

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.arrays.values())


def init_parameters(arch: Architecture, variant: QVariant | str, seed=0) -> NetworkParameters:
    """Glorot-uniform weights, zero biases."""
    variant = QVariant(variant)
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, shape in layout(arch, variant).items():
        if len(shape) == 1:
            arrays[name] = np.zeros(shape)
        else:
            limit = math.sqrt(6.0 / (shape[0] + shape[1]))
            arrays[name] = rng.uniform(-limit, limit, size=shape)
    return NetworkParameters(arch, variant, arrays)


# --------------------------------------------------------------------------
# forward / backward
# --------------------------------------------------------------------------


def _encode(params: NetworkParameters, E, pos_rows, neg_rows):
    arch, variant = params.arch, params.variant
    Xp = E[pos_rows]
    Xn = E[neg_rows] if variant.uses_negative else None
    if Xp.shape[1] != arch.window:
        raise ConfigError(f"window length {Xp.shape[1]} != architecture window {arch.window}")
    if variant.uses_gru:
        sp, cp = gru_forward(params.encoder("pos"), Xp)
        if Xn is None:
            return [sp], [cp]
        sn, cn = gru_forward(params.encoder("neg"), Xn)
        return [sp, sn], [cp, cn]
    parts = [Xp.reshape(len(Xp), -1)]
    if Xn is not None:
        parts.append(Xn.reshape(len(Xn), -1))
    return parts, [None] * len(parts)


def forward(params: NetworkParameters, E, pos_rows, neg_rows, act_rows, state_index=None):
    """Network output for R (state, action) rows over S distinct states.

    ``pos_rows``/``neg_rows`` are (S, N) embedding-row indices, ``act_rows``
    is (R,), and ``state_index`` (R,) maps each row to its state (identity by
    default).  The state-dependent part of each stream's first layer is
    computed once per state.
    """
    arch, variant = params.arch, params.variant
    pos_rows = np.asarray(pos_rows)
    neg_rows = np.asarray(neg_rows)
    act_rows = np.asarray(act_rows)
    if state_index is None:
        state_index = np.arange(len(act_rows))
    states, enc_caches = _encode(params, E, pos_rows, neg_rows)
    A = E[act_rows]
    sd = arch.state_dim(variant)
    stream_caches, stream_outs = [], []
    for prefix, nparts, widths in _streams(arch, variant):
        parts = states if variant.fully_connected else [states[0 if prefix == "pos" else 1]]
        W0, b0 = params[f"{prefix}.0.W"], params[f"{prefix}.0.b"]
        per_state = sum(p @ W0[:, k * sd : (k + 1) * sd].T for k, p in enumerate(parts))
        Wa = W0[:, nparts * sd :]
        # scoring many candidates: project each catalog row once, then gather
        per_action = (E @ Wa.T)[act_rows] if len(act_rows) > len(E) else A @ Wa.T
        pre = per_state[state_index] + per_action + b0
        layers = [(None, pre)]
        x = np.maximum(pre, 0.0)
        for k in range(1, len(widths)):
            pre = x @ params[f"{prefix}.{k}.W"].T + params[f"{prefix}.{k}.b"]
            layers.append((x, pre))
            x = np.maximum(pre, 0.0)
        stream_caches.append((prefix, parts, layers))
        stream_outs.append(x)
    x = np.concatenate(stream_outs, axis=1) if len(stream_outs) > 1 else stream_outs[0]
    joint = []
    n_joint = len(arch.joint_widths) + 1
    for k in range(n_joint):
        pre = x @ params[f"joint.{k}.W"].T + params[f"joint.{k}.b"]
        joint.append((x, pre))
        x = np.maximum(pre, 0.0) if k < n_joint - 1 else pre
    cache = (A, state_index, len(pos_rows), enc_caches, stream_caches, joint)
    return x, cache


def backward(params: NetworkParameters, cache, dout: np.ndarray) -> NetworkParameters:
    """Gradient of ``sum(dout * output)`` with respect to every parameter."""
    arch, variant = params.arch, params.variant
    A, state_index, n_states, enc_caches, stream_caches, joint = cache
    grads: dict[str, np.ndarray] = {}
    g = dout
    for k in range(len(joint) - 1, -1, -1):
        x, pre = joint[k]
        if k < len(joint) - 1:
            g = g * (pre > 0)
        grads[f"joint.{k}.W"] = g.T @ x
        grads[f"joint.{k}.b"] = g.sum(axis=0)
        g = g @ params[f"joint.{k}.W"]
    sd = arch.state_dim(variant)
    d_states = [np.zeros((n_states, sd)) for _ in enc_caches]
    offset = 0
    for prefix, parts, layers in stream_caches:
        width = layers[-1][1].shape[1]
        gs = g[:, offset : offset + width]
        offset += width
        for k in range(len(layers) - 1, 0, -1):
            x, pre = layers[k]
            gs = gs * (pre > 0)
            grads[f"{prefix}.{k}.W"] = gs.T @ x
            grads[f"{prefix}.{k}.b"] = gs.sum(axis=0)
            gs = gs @ params[f"{prefix}.{k}.W"]
        gs = gs * (layers[0][1] > 0)
        W0 = params[f"{prefix}.0.W"]
        g_state = np.zeros((n_states, gs.shape[1]))
        np.add.at(g_state, state_index, gs)
        dW0 = np.empty_like(W0)
        for k, p in enumerate(parts):
            dW0[:, k * sd : (k + 1) * sd] = g_state.T @ p
            target = k if variant.fully_connected else (0 if prefix == "pos" else 1)
            d_states[target] += g_state @ W0[:, k * sd : (k + 1) * sd]
        dW0[:, len(parts) * sd :] = gs.T @ A
        grads[f"{prefix}.0.W"] = dW0
        grads[f"{prefix}.0.b"] = gs.sum(axis=0)
    if variant.uses_gru:
        for stream, ds, ec in zip(("pos", "neg"), d_states, enc_caches):
            for gate, val in gru_backward(params.encoder(stream), ec, ds).items():
                grads[f"gru_{stream}.{gate}"] = val
    return NetworkParameters(arch, variant, grads)


# --------------------------------------------------------------------------
# Q-values and targets
# --------------------------------------------------------------------------


def _state_rows(states: Sequence[DualState], catalog):
    pos = catalog.rows([s.positive for s in states])
    neg = catalog.rows([s.negative for s in states])
    return pos.reshape(len(states), -1), neg.reshape(len(states), -1)


def q_values(params: NetworkParameters, state: DualState, actions, catalog) -> np.ndarray:
    """Scalar network output for each action at one state."""
    actions = list(actions)
    if not actions:
        return np.zeros(0)
    pos, neg = _state_rows([state], catalog)
    out, _ = forward(params, catalog.embeddings, pos, neg, catalog.rows(actions), np.zeros(len(actions), dtype=np.int64))
    return out[:, 0] if params.arch.output_dim == 1 else out


def q_value(params: NetworkParameters, variant, state: DualState, action: int, catalog) -> float:
    if QVariant(variant) is not params.variant:
        raise ConfigError(f"parameters are for {params.variant.value}, not {QVariant(variant).value}")
    return float(q_values(params, state, [action], catalog)[0])


def td_target(r, next_state, candidates, params_target, gamma, terminal, catalog) -> float:
    """``r`` if terminal, else ``r + gamma * max_a' Q_target(s', a')`` over the candidates."""
    if terminal:
        return float(r)
    candidates = sorted(candidates)
    if not candidates:
        raise ValueError("empty candidate set for a non-terminal transition")
    return float(r + gamma * np.max(q_values(params_target, next_state, candidates, catalog)))


def td_targets(params_target, catalog, rewards, next_states, candidate_lists, gamma, terminal) -> np.ndarray:
    """Batched :func:`td_target`; one GRU pass per next state."""
    rewards = np.asarray(rewards, dtype=np.float64)
    terminal = np.asarray(terminal, dtype=bool)
    y = rewards.copy()
    live = np.flatnonzero(~terminal)
    if len(live) == 0:
        return y
    counts = np.array([len(candidate_lists[i]) for i in live])
    if np.any(counts == 0):
        raise ValueError("empty candidate set for a non-terminal transition")
    pos, neg = _state_rows([next_states[i] for i in live], catalog)
    acts = catalog.rows(np.concatenate([np.asarray(candidate_lists[i], dtype=np.int64) for i in live]))
    sidx = np.repeat(np.arange(len(live)), counts)
    out, _ = forward(params_target, catalog.embeddings, pos, neg, acts, sidx)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    y[live] = rewards[live] + gamma * np.maximum.reduceat(out[:, 0], starts)
    return y


# --------------------------------------------------------------------------
# loss
# --------------------------------------------------------------------------


@dataclass
class TDBatch:
    """Array form of a minibatch; ``comp_rows`` is -1 where no competitor exists."""

    pos_rows: np.ndarray
    neg_rows: np.ndarray
    act_rows: np.ndarray
    comp_rows: np.ndarray
    y: np.ndarray

    @classmethod
    def from_transitions(cls, batch, catalog) -> "TDBatch":
        trans = [t for t, _ in batch]
        pos, neg = _state_rows([t.state for t in trans], catalog)
        acts = catalog.rows([t.action for t in trans])
        comp = np.array(
            [catalog.row(t.competitor) if t.competitor is not None else -1 for t in trans], dtype=np.int64
        )
        return cls(pos, neg, acts, comp, np.array([y for _, y in batch], dtype=np.float64))


def td_loss_terms(params: NetworkParameters, batch: TDBatch, alpha: float, E, need_grad: bool = True):
    """Loss, gradient and per-transition TD error for a minibatch.

    With ``need_grad=False`` the gradient slot is ``None`` and no backward
    pass runs.
    """
    if alpha < 0:
        raise ConfigError("alpha must be nonnegative")
    B = len(batch.act_rows)
    # alpha == 0 evaluates exactly the plain TD forward pass
    has_c = np.flatnonzero(batch.comp_rows >= 0) if alpha > 0 else np.zeros(0, dtype=np.int64)
    acts = np.concatenate([batch.act_rows, batch.comp_rows[has_c]])
    sidx = np.concatenate([np.arange(B), has_c])
    out, cache = forward(params, E, batch.pos_rows, batch.neg_rows, acts, sidx)
    q = out[:B, 0]
    qc = out[B:, 0]
    td = batch.y - q
    gap = np.zeros(B)
    gap[has_c] = q[has_c] - qc
    per = td**2 - alpha * gap**2
    loss = float(np.mean(per))
    if not need_grad:
        return loss, None, td
    dout = np.empty_like(out)
    dout[:B, 0] = (-2.0 * td - 2.0 * alpha * gap) / B
    dout[B:, 0] = 2.0 * alpha * gap[has_c] / B
    return loss, backward(params, cache, dout), td


def loss_and_gradient(params: NetworkParameters, batch, alpha: float, catalog):
    """Mean of ``(y - Q(s,a))^2 - alpha * (Q(s,a) - Q(s,a^C))^2`` and its exact gradient.

    ``batch`` is a sequence of ``(Transition, y)`` pairs or a :class:`TDBatch`.
    The pairwise term only applies to transitions with a competitor, whose
    Q-value is taken at the same state; ``y`` is a constant.
    """
    if not isinstance(batch, TDBatch):
        batch = TDBatch.from_transitions(batch, catalog)
    loss, grad, _ = td_loss_terms(params, batch, alpha, catalog.embeddings)
    return loss, grad


def td_loss(params: NetworkParameters, batch: TDBatch, catalog) -> float:
    """Plain mean squared TD error (no pairwise term)."""
    out, _ = forward(params, catalog.embeddings, batch.pos_rows, batch.neg_rows, batch.act_rows)
    return float(np.mean((batch.y - out[:, 0]) ** 2))


def apply_update(params: NetworkParameters, gradient: NetworkParameters, learning_rate: float, gradient_clip: float = math.inf):
    """Clip the gradient to a global norm, then take one SGD step."""
    if gradient.arch != params.arch or gradient.variant is not params.variant:
        raise ConfigError("gradient does not match parameter structure")
    for name, g in gradient.items():
        if not np.all(np.isfinite(g)):
            raise TrainingAborted(f"non-finite gradient in {name}")
    norm = gradient.global_norm()
    scale = 1.0 if norm <= gradient_clip else gradient_clip / norm
    step = learning_rate * scale
    return NetworkParameters(
        params.arch, params.variant, {k: v - step * gradient.arrays[k] for k, v in params.arrays.items()}
    )


def sync_target(params: NetworkParameters) -> NetworkParameters:
    """Independent deep copy used as the target network."""
    return copy.deepcopy(params)
