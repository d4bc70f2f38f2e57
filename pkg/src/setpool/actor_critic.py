"""Shared-trunk actor-critic over the attention-weighting episode.

The actor is a Gaussian over a raw action ``u``; the emitted weight is
``softplus(u) + floor``. Densities are always evaluated in raw space, so
importance ratios never need the softplus Jacobian.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import Dataset
from .env import ActionSample, RewardHead, Trajectory, aggregate, run_episode
from .nn import SGD, DenseNet, backward, forward, load_net, save_net, sgd_step, softplus

log = logging.getLogger(__name__)

LOG_STD_MIN, LOG_STD_MAX = -5.0, 2.0
ACTION_FLOOR = 1e-3
_LOG_2PI = math.log(2.0 * math.pi)


class TrainingDiverged(RuntimeError):
    pass


def state_features(states: np.ndarray, kind: str) -> np.ndarray:
    """Map ``[rest, f]`` to the trunk input.

    ``interact`` appends ``rest * f`` and its sum, so the trunk sees the
    member/rest agreement directly; without it the policy cannot learn to
    single out outliers within a desk-scale episode budget.
    """
    if kind == "raw":
        return states
    d = states.shape[-1] // 2
    prod = states[..., :d] * states[..., d:]
    dot = prod.sum(axis=-1, keepdims=True)
    if kind == "interact":
        return np.concatenate([states, prod, dot], axis=-1)
    raise ValueError(f"unknown state feature map {kind!r}")


def feature_width(dim: int, kind: str) -> int:
    return {"raw": 2 * dim, "interact": 3 * dim + 1}[kind]


def gaussian_logpdf(u, mean, log_std):
    z = (np.asarray(u) - mean) * np.exp(-log_std)
    return -0.5 * z * z - log_std - 0.5 * _LOG_2PI


def sample_action(mean: float, log_std: float, rng: np.random.Generator | None, mode: str = "stochastic",
                  floor: float = ACTION_FLOOR) -> ActionSample:
    if mode == "stochastic":
        u = mean + math.exp(log_std) * rng.standard_normal()
    elif mode == "deterministic":
        u = mean
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return ActionSample(float(u), float(softplus(u)) + floor, float(gaussian_logpdf(u, mean, log_std)))


def td_error(r: float, v_t: float, v_next: float, gamma: float, terminal: bool) -> float:
    return r + gamma * v_next * (0.0 if terminal else 1.0) - v_t


class ActorCritic:
    def __init__(self, trunk: DenseNet, policy_head: DenseNet, value_head: DenseNet,
                 reward_head: RewardHead, dim: int, features: str = "interact",
                 gamma: float = 0.9, floor: float = ACTION_FLOOR,
                 avg_trunk: DenseNet | None = None, avg_policy_head: DenseNet | None = None):
        if trunk.dims[0] != feature_width(dim, features):
            raise ValueError("trunk input width does not match the state feature map")
        if policy_head.dims[-1] != 2 or value_head.dims[-1] != 1:
            raise ValueError("policy head must emit (mean, log_std); value head a scalar")
        self.trunk, self.policy_head, self.value_head = trunk, policy_head, value_head
        self.reward_head = reward_head
        self.dim, self.features, self.gamma, self.floor = dim, features, gamma, floor
        self.avg_trunk = avg_trunk if avg_trunk is not None else trunk.copy()
        self.avg_policy_head = avg_policy_head if avg_policy_head is not None else policy_head.copy()

    @classmethod
    def create(cls, dim: int, num_classes: int, rng: np.random.Generator, hidden=(32,), head_hidden=(),
               features: str = "interact", gamma: float = 0.9, lam: float = 0.01) -> "ActorCritic":
        if not hidden:
            raise ValueError("trunk needs at least one hidden layer")
        width = feature_width(dim, features)
        trunk = DenseNet.create([width, *hidden], ["tanh"] * len(hidden), rng)
        policy_head = DenseNet.create([hidden[-1], 2], ["identity"], rng, zero_last=True)
        value_head = DenseNet.create([hidden[-1], 1], ["identity"], rng, zero_last=True)
        h_dims = [dim, *head_hidden, num_classes]
        h = DenseNet.create(h_dims, ["tanh"] * len(head_hidden) + ["identity"], rng)
        return cls(trunk, policy_head, value_head, RewardHead(h, lam), dim, features, gamma)

    # parameter groups -------------------------------------------------------

    def policy_nets(self) -> list[DenseNet]:
        return [self.trunk, self.policy_head]

    def value_nets(self) -> list[DenseNet]:
        return [self.trunk, self.value_head]

    def policy_params(self) -> list[np.ndarray]:
        return [p for net in self.policy_nets() for p in net.params()]

    def value_params(self) -> list[np.ndarray]:
        return [p for net in self.value_nets() for p in net.params()]

    def avg_policy_params(self) -> list[np.ndarray]:
        return self.avg_trunk.params() + self.avg_policy_head.params()

    def touch(self) -> None:
        for net in (self.trunk, self.policy_head, self.value_head, self.avg_trunk, self.avg_policy_head):
            net.touch()

    def copy(self) -> "ActorCritic":
        return ActorCritic(self.trunk.copy(), self.policy_head.copy(), self.value_head.copy(),
                           RewardHead(self.reward_head.net.copy(), self.reward_head.lam), self.dim,
                           self.features, self.gamma, self.floor, self.avg_trunk.copy(),
                           self.avg_policy_head.copy())

    def update_average(self, alpha: float) -> None:
        """theta_a <- alpha * theta_a + (1 - alpha) * theta."""
        if not 0.0 <= alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        for pa, p in zip(self.avg_policy_params(), self.policy_params()):
            pa *= alpha
            pa += (1.0 - alpha) * p
        self.avg_trunk.touch()
        self.avg_policy_head.touch()

    # forward passes -----------------------------------------------------------

    def _check_states(self, states) -> np.ndarray:
        states = np.asarray(states, dtype=np.float64)
        if states.shape[-1] != 2 * self.dim:
            raise ValueError(f"state width {states.shape[-1]} != {2 * self.dim}")
        return states

    def policy_pass(self, states, average: bool = False):
        """Batched head outputs; returns (mean, log_std clamped, cache for backward)."""
        states = np.atleast_2d(self._check_states(states))
        trunk, head = (self.avg_trunk, self.avg_policy_head) if average else (self.trunk, self.policy_head)
        hid, t_tape = forward(trunk, state_features(states, self.features))
        out, h_tape = forward(head, hid)
        raw_ls = out[:, 1]
        return out[:, 0], np.clip(raw_ls, LOG_STD_MIN, LOG_STD_MAX), (t_tape, h_tape, raw_ls)

    def policy_backward(self, cache, dmean, dlog_std) -> list[np.ndarray]:
        """Gradient over ``policy_params()`` given upstream on (mean, clamped log_std)."""
        t_tape, h_tape, raw_ls = cache
        inside = (raw_ls >= LOG_STD_MIN) & (raw_ls <= LOG_STD_MAX)
        up = np.stack([dmean, np.where(inside, dlog_std, 0.0)], axis=1)
        g_head, dhid = backward(self.policy_head, h_tape, up)
        g_trunk, _ = backward(self.trunk, t_tape, dhid)
        return g_trunk + g_head

    def value_pass(self, states):
        states = np.atleast_2d(self._check_states(states))
        hid, t_tape = forward(self.trunk, state_features(states, self.features))
        out, h_tape = forward(self.value_head, hid)
        return out[:, 0], (t_tape, h_tape)

    def value_backward(self, cache, dvalue) -> list[np.ndarray]:
        t_tape, h_tape = cache
        g_head, dhid = backward(self.value_head, h_tape, np.asarray(dvalue)[:, None])
        g_trunk, _ = backward(self.trunk, t_tape, dhid)
        return g_trunk + g_head

    def policy_forward(self, state) -> tuple[float, float]:
        mean, log_std, _ = self.policy_pass(state)
        return float(mean[0]), float(log_std[0])

    def value_forward(self, state) -> float:
        return float(self.value_pass(state)[0][0])

    def act(self, state, rng, mode: str = "stochastic") -> ActionSample:
        mean, log_std = self.policy_forward(state)
        return sample_action(mean, log_std, rng, mode, self.floor)

    def log_prob(self, states, raws) -> np.ndarray:
        mean, log_std, _ = self.policy_pass(states)
        return gaussian_logpdf(raws, mean, log_std)


# gradients -------------------------------------------------------------------


def logp_grad(p: ActorCritic, states, raws, coeffs) -> tuple[list[np.ndarray], np.ndarray]:
    """Gradient of ``sum_t coeffs[t] * log pi(raws[t] | states[t])`` over policy params."""
    mean, log_std, cache = p.policy_pass(states)
    raws = np.asarray(raws, dtype=np.float64)
    coeffs = np.asarray(coeffs, dtype=np.float64)
    inv_var = np.exp(-2.0 * log_std)
    diff = raws - mean
    dmean = coeffs * diff * inv_var
    dls = coeffs * (diff * diff * inv_var - 1.0)
    return p.policy_backward(cache, dmean, dls), gaussian_logpdf(raws, mean, log_std)


def value_grad(p: ActorCritic, states, coeffs) -> tuple[list[np.ndarray], np.ndarray]:
    """Gradient of ``sum_t coeffs[t] * V(states[t])`` over value params."""
    values, cache = p.value_pass(states)
    return p.value_backward(cache, np.asarray(coeffs, dtype=np.float64)), values


def td_errors(rewards, values, gamma: float) -> np.ndarray:
    """Per-step TD errors of one finished trajectory (V after the last step is 0)."""
    nxt = np.append(values[1:], 0.0)
    terminal = np.zeros(len(values), dtype=bool)
    terminal[-1] = True
    return np.array([td_error(r, v, vn, gamma, term)
                     for r, v, vn, term in zip(rewards, values, nxt, terminal)])


def a2c_gradients(p: ActorCritic, traj: Trajectory, gamma: float):
    """Ascent directions (policy, value) and the TD errors used for both."""
    values, _ = p.value_pass(traj.states)
    deltas = td_errors(traj.rewards, values, gamma)
    g_pi, _ = logp_grad(p, traj.states, traj.raws, deltas)
    g_v, _ = value_grad(p, traj.states, deltas)
    return g_pi, g_v, deltas


def all_finite(grads) -> bool:
    return all(np.all(np.isfinite(g)) for g in grads)


def clip_by_norm(grads, max_norm: float):
    if not math.isfinite(max_norm):
        return grads
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if norm <= max_norm:
        return grads
    return [g * (max_norm / norm) for g in grads]


def ascend(nets: list[DenseNet], grads: list[np.ndarray], lr: float, opt: SGD | None = None) -> None:
    """Move every parameter of ``nets`` by ``+lr * grad`` (grads in params order)."""
    pos = 0
    for net in nets:
        n = len(net.params())
        neg = [-g for g in grads[pos:pos + n]]
        if opt is None:
            sgd_step(net, neg, lr)
        else:
            opt.step(net, neg, lr)
        pos += n


def update_reward_head(p: ActorCritic, feature, label: int, lr: float, opt: SGD | None = None) -> float:
    loss, grads = p.reward_head.loss_and_grad(feature, label)
    if all_finite(grads):
        if opt is None:
            sgd_step(p.reward_head.net, grads, lr)
        else:
            opt.step(p.reward_head.net, grads, lr)
    return loss


def mean_kl(p: ActorCritic, states) -> float:
    """Mean KL(pi_avg || pi) over ``states``."""
    m, ls, _ = p.policy_pass(states)
    ma, lsa, _ = p.policy_pass(states, average=True)
    return float(np.mean(gaussian_kl(ma, lsa, m, ls)))


def gaussian_kl(m_a, ls_a, m, ls):
    """KL(N(m_a, e^ls_a) || N(m, e^ls)), elementwise."""
    return ls - ls_a + (np.exp(2 * ls_a) + (m_a - m) ** 2) / (2 * np.exp(2 * ls)) - 0.5


@dataclass
class TrainConfig:
    episodes: int = 2000
    gamma: float = 0.9
    lr_pi: float = 0.05
    lr_v: float = 0.01
    lr_h: float = 0.1
    momentum: float = 0.0
    alpha: float = 0.99
    xi: float = 1.0
    rho_clip: float = 10.0
    pool_capacity: int = 5000
    minibatch: int = 16
    warmup: int = 32
    head_warmup_epochs: int = 0
    head_warmup_lr: float = 0.1
    max_grad_norm: float = 1.0


def a2c_update(p: ActorCritic, traj: Trajectory, lr_pi: float, lr_v: float, gamma: float,
               lr_h: float = 0.0, alpha: float = 1.0, opt: dict | None = None,
               max_grad_norm: float = math.inf) -> dict:
    """One on-policy step from a single trajectory generated by ``p``."""
    opt = opt or {}
    g_pi, g_v, deltas = a2c_gradients(p, traj, gamma)
    diag = {"skipped": False, "mean_delta": float(np.mean(deltas))}
    if all_finite(g_pi) and all_finite(g_v):
        ascend(p.policy_nets(), clip_by_norm(g_pi, max_grad_norm), lr_pi, opt.get("pi"))
        ascend(p.value_nets(), clip_by_norm(g_v, max_grad_norm), lr_v, opt.get("v"))
    else:
        log.warning("non-finite A2C gradient on set %s, update skipped", traj.set_id)
        diag["skipped"] = True
    if lr_h > 0:
        diag["head_loss"] = update_reward_head(p, traj.final_aggregate, traj.identity, lr_h, opt.get("h"))
    p.update_average(alpha)
    return diag


def make_optimizers(cfg: TrainConfig) -> dict:
    return {k: SGD(lr, cfg.momentum) for k, lr in (("pi", cfg.lr_pi), ("v", cfg.lr_v), ("h", cfg.lr_h))}


def warm_up_reward_head(p: ActorCritic, data: Dataset, cfg: TrainConfig, rng: np.random.Generator) -> None:
    """Fit ``h`` on uniform (mean-pooled) aggregates before any RL."""
    pooled = [(aggregate(s.features, np.ones(len(s))), s.identity) for s in data.sets]
    for _ in range(cfg.head_warmup_epochs):
        for i in rng.permutation(len(pooled)):
            update_reward_head(p, pooled[i][0], pooled[i][1], cfg.head_warmup_lr)


class DivergenceGuard:
    """Raises after ``limit`` consecutive non-finite losses."""

    def __init__(self, limit: int = 10):
        self.limit, self.count = limit, 0

    def __call__(self, loss: float) -> None:
        self.count = 0 if math.isfinite(loss) else self.count + 1
        if self.count >= self.limit:
            raise TrainingDiverged(f"non-finite loss for {self.limit} consecutive iterations")


METRIC_COLUMNS = ("iter", "episodes_seen", "mean_reward", "xent_loss", "mean_KL", "clip_fraction")


def train_on_policy(p: ActorCritic, data: Dataset, cfg: TrainConfig, rng: np.random.Generator,
                    callback=None) -> list[dict]:
    """Vanilla advantage actor-critic: one update per freshly collected episode."""
    warm_up_reward_head(p, data, cfg, rng)
    opt = make_optimizers(cfg)
    guard = DivergenceGuard()
    rows = []
    for ep in range(1, cfg.episodes + 1):
        fs = data.sets[int(rng.integers(len(data.sets)))]
        traj = run_episode(fs, p, p.reward_head, "stochastic", rng)
        kl = mean_kl(p, traj.states)
        a2c_update(p, traj, cfg.lr_pi, cfg.lr_v, cfg.gamma, cfg.lr_h, cfg.alpha, opt, cfg.max_grad_norm)
        row = {"iter": ep, "episodes_seen": ep, "mean_reward": float(np.mean(traj.rewards)),
               "xent_loss": traj.final_loss, "mean_KL": kl, "clip_fraction": 0.0}
        rows.append(row)
        guard(traj.final_loss)
        if callback is not None:
            callback(row)
    return rows


# checkpoints -----------------------------------------------------------------

_NETS = ("trunk", "policy_head", "value_head", "avg_trunk", "avg_policy_head")


def save_checkpoint(p: ActorCritic, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for name in _NETS:
        save_net(getattr(p, name), d / f"{name}.net")
    save_net(p.reward_head.net, d / "reward_head.net")
    manifest = {
        "format": "setpool-checkpoint/1",
        "dim": p.dim,
        "features": p.features,
        "gamma": repr(p.gamma),
        "lam": repr(p.reward_head.lam),
        "floor": repr(p.floor),
        "trunk_dims": ",".join(map(str, p.trunk.dims)),
        "num_classes": p.reward_head.num_classes,
    }
    (d / "manifest.txt").write_text("".join(f"{k}={v}\n" for k, v in manifest.items()))


def read_kv(path) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def load_checkpoint(directory) -> ActorCritic:
    d = Path(directory)
    meta = read_kv(d / "manifest.txt")
    nets = {name: load_net(d / f"{name}.net") for name in _NETS}
    head = RewardHead(load_net(d / "reward_head.net"), float(meta["lam"]))
    return ActorCritic(nets["trunk"], nets["policy_head"], nets["value_head"], head, int(meta["dim"]),
                       meta["features"], float(meta["gamma"]), float(meta["floor"]),
                       nets["avg_trunk"], nets["avg_policy_head"])
