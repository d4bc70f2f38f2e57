"""Sequential attention-weighting episode over one feature set.

Members are visited once each. At every step the agent sees the current
member next to the weighted aggregate of the others and emits a positive
weight for it. The reward is the drop in classification loss of the
aggregate plus a hinge bonus for weights below one.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol

import numpy as np

from .data import FeatureSet
from .nn import DenseNet, backward, forward, softmax_xent


class EpisodeError(RuntimeError):
    pass


def aggregate(features, weights) -> np.ndarray:
    """Weighted mean ``sum(a_i f_i) / sum(a_i)``.

    Weights are rescaled by their maximum first; this leaves the result
    unchanged mathematically and makes equal weights reproduce the plain
    mean bit for bit.
    """
    features = np.asarray(features, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] == 0:
        raise ValueError("aggregate needs a non-empty (T, d) feature array")
    if weights.shape != (features.shape[0],):
        raise ValueError("one weight per feature required")
    if not np.all(weights > 0) or not np.all(np.isfinite(weights)):
        raise ValueError("weights must be finite and positive")
    c = weights / weights.max()
    return c @ features / c.sum()


def build_state(features, weights, t: int) -> np.ndarray:
    """Concatenate the aggregate of all members except ``t`` with member ``t``.

    ``t`` is a 0-based member index whose weight is still 1. For a singleton
    set the aggregate half is zero.
    """
    features = np.asarray(features, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if weights[t] != 1.0:
        raise ValueError(f"member {t} has already been weighted")
    T, d = features.shape
    if T == 1:
        rest = np.zeros(d)
    else:
        mask = np.arange(T) != t
        rest = aggregate(features[mask], weights[mask])
    return np.concatenate([rest, features[t]])


@dataclass
class RewardHead:
    """Classifier ``h`` on aggregated features plus the hinge coefficient."""

    net: DenseNet
    lam: float = 0.01

    @property
    def num_classes(self) -> int:
        return self.net.dims[-1]

    def loss(self, feature, label: int) -> float:
        return softmax_xent(self.net(feature), label)[0]

    def loss_and_grad(self, feature, label: int):
        logits, tape = forward(self.net, feature)
        loss, dlogits = softmax_xent(logits, label)
        grads, _ = backward(self.net, tape, dlogits)
        return loss, grads


@dataclass
class ActionSample:
    raw: float
    weight: float
    logdensity: float


class Policy(Protocol):
    def act(self, state: np.ndarray, rng: np.random.Generator | None, mode: str) -> ActionSample: ...


@dataclass
class EpisodeState:
    weights: np.ndarray  # indexed by member
    step: int  # position in ``order`` of the member about to be weighted
    order: np.ndarray
    state_vec: np.ndarray | None
    loss: float = float("nan")  # loss of the current aggregate under the frozen head

    @property
    def terminal(self) -> bool:
        return self.step >= len(self.order)

    @property
    def current(self) -> int:
        return int(self.order[self.step])


@dataclass
class Trajectory:
    set_id: str
    identity: int
    order: np.ndarray
    states: np.ndarray  # (T, 2d), in visit order
    raws: np.ndarray
    weights: np.ndarray  # emitted weight per step, in visit order
    logmu: np.ndarray  # behaviour log-density of each raw action
    rewards: np.ndarray
    loss_terms: np.ndarray  # loss-difference part of each reward
    final_weights: np.ndarray  # indexed by member
    final_aggregate: np.ndarray
    initial_loss: float = float("nan")
    final_loss: float = float("nan")
    terminal: bool = True

    def __len__(self) -> int:
        return len(self.raws)


def reset(fs: FeatureSet, order=None, head: RewardHead | None = None) -> EpisodeState:
    T = len(fs)
    order = np.arange(T) if order is None else np.asarray(order)
    if sorted(order.tolist()) != list(range(T)):
        raise ValueError("order must be a permutation of member indices")
    weights = np.ones(T)
    loss = head.loss(aggregate(fs.features, weights), fs.identity) if head is not None else float("nan")
    return EpisodeState(weights, 0, order, build_state(fs.features, weights, int(order[0])), loss)


def step(fs: FeatureSet, es: EpisodeState, head: RewardHead | None, action: float):
    """Assign ``action`` to the current member; returns ``(next_state, reward)``.

    With ``head=None`` no loss is evaluated and only the hinge part of the
    reward is returned.
    """
    if es.terminal:
        raise EpisodeError("episode already terminated")
    if not (np.isfinite(action) and action > 0):
        raise EpisodeError(f"action must be finite and positive, got {action!r}")
    weights = es.weights.copy()
    weights[es.current] = action
    hinge = (head.lam if head is not None else 0.0) * max(0.0, 1.0 - action)
    if head is not None:
        loss = head.loss(aggregate(fs.features, weights), fs.identity)
        reward = (es.loss - loss) + hinge
    else:
        loss = float("nan")
        reward = hinge
    nxt = es.step + 1
    state_vec = build_state(fs.features, weights, int(es.order[nxt])) if nxt < len(es.order) else None
    return EpisodeState(weights, nxt, es.order, state_vec, loss), reward


def run_episode(fs: FeatureSet, policy: Policy, head: RewardHead | None, mode: str = "stochastic",
                rng: np.random.Generator | None = None, order=None) -> Trajectory:
    """Traverse every member once.

    Without an explicit ``order`` the members are visited in a fresh random
    permutation in stochastic mode and in the given order otherwise.
    """
    T = len(fs)
    if order is None:
        order = rng.permutation(T) if mode == "stochastic" else np.arange(T)
    es = reset(fs, order, head)
    states = np.empty((T, 2 * fs.dim))
    raws, weights, logmu = np.empty(T), np.empty(T), np.empty(T)
    rewards, loss_terms = np.empty(T), np.empty(T)
    initial_loss = es.loss
    for k in range(T):
        states[k] = es.state_vec
        sample = policy.act(es.state_vec, rng, mode)
        prev_loss = es.loss
        es, rewards[k] = step(fs, es, head, sample.weight)
        raws[k], weights[k], logmu[k] = sample.raw, sample.weight, sample.logdensity
        loss_terms[k] = prev_loss - es.loss
    if not np.all(np.isfinite(logmu)):
        raise EpisodeError("non-finite behaviour log-density")
    return Trajectory(fs.set_id, fs.identity, np.asarray(es.order), states, raws, weights, logmu,
                      rewards, loss_terms, es.weights, aggregate(fs.features, es.weights),
                      initial_loss, es.loss)


def infer_weights(fs: FeatureSet, policy: Policy) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic pass in the given member order; returns (weights, aggregate)."""
    traj = run_episode(fs, policy, None, mode="deterministic", order=np.arange(len(fs)))
    return traj.final_weights, traj.final_aggregate
