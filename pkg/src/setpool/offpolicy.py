"""Off-policy actor-critic with experience replay and a KL trust region."""
from __future__ import annotations

import logging
import math
import struct
from collections import deque
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .actor_critic import (
    ActorCritic,
    DivergenceGuard,
    TrainConfig,
    all_finite,
    ascend,
    clip_by_norm,
    gaussian_kl,
    logp_grad,
    make_optimizers,
    update_reward_head,
    warm_up_reward_head,
)
from .data import Dataset
from .env import Trajectory, run_episode
from .nn import flatten, softplus, unflatten

log = logging.getLogger(__name__)


@dataclass
class TrustRegionConfig:
    xi: float = 1.0
    alpha: float = 0.99
    rho_clip: float = 10.0

    def __post_init__(self):
        if not self.xi > 0:
            raise ValueError("xi must be positive")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if not self.rho_clip > 0:
            raise ValueError("rho_clip must be positive")


class ReplayPool:
    """FIFO pool of whole trajectories with uniform sampling."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.entries: deque[Trajectory] = deque(maxlen=capacity)
        self.inserted = 0

    def __len__(self) -> int:
        return len(self.entries)

    def push(self, traj: Trajectory) -> None:
        if not np.all(np.isfinite(traj.logmu)):
            raise ValueError("trajectory has non-finite behaviour densities")
        self.entries.append(traj)
        self.inserted += 1

    def sample(self, n: int, rng: np.random.Generator) -> list[Trajectory]:
        if not self.entries:
            raise ValueError("cannot sample from an empty pool")
        if n > len(self.entries):
            raise ValueError(f"requested {n} trajectories from a pool of {len(self.entries)}")
        idx = rng.choice(len(self.entries), size=n, replace=False)
        return [self.entries[i] for i in idx]


def is_ratios(traj: Trajectory, p: ActorCritic, rho_clip: float = math.inf) -> np.ndarray:
    """Truncated importance ratios pi/mu, compared in raw action space."""
    logpi = p.log_prob(traj.states, traj.raws)
    if not (np.all(np.isfinite(logpi)) and np.all(np.isfinite(traj.logmu))):
        raise ValueError(f"non-finite density in trajectory {traj.set_id}")
    return np.minimum(np.exp(logpi - traj.logmu), rho_clip)


def off_policy_return(rewards, rho, gamma: float) -> np.ndarray:
    """R_t = r_t + gamma * rho_{t+1} * R_{t+1}, with R_T = r_T."""
    rewards = np.asarray(rewards, dtype=np.float64)
    rho = np.asarray(rho, dtype=np.float64)
    if rho.shape != rewards.shape:
        raise ValueError("one ratio per step required")
    out = np.empty_like(rewards)
    acc = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        acc = rewards[t] + (gamma * rho[t + 1] * acc if t + 1 < len(rewards) else 0.0)
        out[t] = acc
    return out


def value_grad_off(traj: Trajectory, rho, p: ActorCritic, gamma: float) -> list[np.ndarray]:
    """sum_t (R_t - V(s_t)) * grad V(s_t) * prod_{i<=t} rho_i, as an ascent direction."""
    returns = off_policy_return(traj.rewards, rho, gamma)
    values, cache = p.value_pass(traj.states)
    coeffs = (returns - values) * np.cumprod(rho)
    return p.value_backward(cache, coeffs)


def policy_grad_off(traj: Trajectory, rho, p: ActorCritic, gamma: float) -> list[np.ndarray]:
    """sum_t rho_t * grad log pi(u_t|s_t) * TD error, the TD error held constant."""
    values, _ = p.value_pass(traj.states)
    nxt = np.append(values[1:], 0.0)
    deltas = traj.rewards + gamma * nxt - values
    grads, _ = logp_grad(p, traj.states, traj.raws, np.asarray(rho) * deltas)
    return grads


def kl_grad(p: ActorCritic, states) -> tuple[float, list[np.ndarray]]:
    """Mean KL(pi_avg || pi) over ``states`` and its gradient w.r.t. the live policy."""
    states = np.atleast_2d(np.asarray(states, dtype=np.float64))
    if states.shape[0] == 0:
        raise ValueError("kl_grad needs at least one state")
    m, ls, cache = p.policy_pass(states)
    ma, lsa, _ = p.policy_pass(states, average=True)
    n = states.shape[0]
    kl = gaussian_kl(ma, lsa, m, ls)
    inv_var = np.exp(-2.0 * ls)
    dmean = (m - ma) * inv_var / n
    dls = (1.0 - (np.exp(2.0 * lsa) + (ma - m) ** 2) * inv_var) / n
    return float(np.mean(kl)), p.policy_backward(cache, dmean, dls)


def trust_region_project(dtheta: np.ndarray, k: np.ndarray, xi: float) -> np.ndarray:
    """Closest point to ``dtheta`` satisfying ``k @ z <= xi`` (flat vectors)."""
    if xi < 0:
        raise ValueError("xi must be non-negative")
    kk = float(k @ k)
    if kk == 0.0:
        return dtheta.copy()
    scale = max((float(k @ dtheta) - xi) / kk, 0.0)
    return dtheta - scale * k


def average_policy_update(p: ActorCritic, alpha: float) -> ActorCritic:
    p.update_average(alpha)
    return p


def off_policy_step(p: ActorCritic, batch: list[Trajectory], cfg: TrainConfig, opt: dict | None = None) -> dict:
    """IS-weighted value/policy gradients over a minibatch, KL-projected, then applied."""
    opt = opt or {}
    n = len(batch)
    g_pi = [np.zeros_like(a) for a in p.policy_params()]
    g_v = [np.zeros_like(a) for a in p.value_params()]
    clipped = total = 0
    for traj in batch:
        raw = np.exp(p.log_prob(traj.states, traj.raws) - traj.logmu)
        clipped += int(np.sum(raw > cfg.rho_clip))
        total += raw.size
        rho = is_ratios(traj, p, cfg.rho_clip)
        for acc, g in zip(g_pi, policy_grad_off(traj, rho, p, cfg.gamma)):
            acc += g / n
        for acc, g in zip(g_v, value_grad_off(traj, rho, p, cfg.gamma)):
            acc += g / n
    states = np.concatenate([t.states for t in batch])
    kl, k = kl_grad(p, states)
    z = trust_region_project(flatten(g_pi), flatten(k), cfg.xi)
    g_pi = unflatten(z, g_pi)
    diag = {"mean_KL": kl, "clip_fraction": clipped / total, "skipped": False}
    if all_finite(g_pi) and all_finite(g_v):
        ascend(p.policy_nets(), clip_by_norm(g_pi, cfg.max_grad_norm), cfg.lr_pi, opt.get("pi"))
        ascend(p.value_nets(), clip_by_norm(g_v, cfg.max_grad_norm), cfg.lr_v, opt.get("v"))
    else:
        log.warning("non-finite off-policy gradient, update skipped")
        diag["skipped"] = True
    return diag


def train_off_policy(p: ActorCritic, data: Dataset, cfg: TrainConfig, rng: np.random.Generator,
                     replay_rng: np.random.Generator, pool: ReplayPool | None = None,
                     callback=None) -> list[dict]:
    """Collect one episode per iteration, replay a minibatch once the pool is warm."""
    pool = pool if pool is not None else ReplayPool(cfg.pool_capacity)
    warm_up_reward_head(p, data, cfg, rng)
    opt = make_optimizers(cfg)
    guard = DivergenceGuard()
    rows = []
    for ep in range(1, cfg.episodes + 1):
        fs = data.sets[int(rng.integers(len(data.sets)))]
        traj = run_episode(fs, p, p.reward_head, "stochastic", rng)
        pool.push(traj)
        if cfg.lr_h > 0:
            update_reward_head(p, traj.final_aggregate, traj.identity, cfg.lr_h, opt.get("h"))
        if len(pool) <= cfg.warmup:  # updates start once `warmup` episodes precede this one
            continue
        batch = pool.sample(min(cfg.minibatch, len(pool)), replay_rng)
        diag = off_policy_step(p, batch, cfg, opt)
        p.update_average(cfg.alpha)
        row = {"iter": len(rows) + 1, "episodes_seen": ep, "mean_reward": float(np.mean(traj.rewards)),
               "xent_loss": traj.final_loss, "mean_KL": diag["mean_KL"],
               "clip_fraction": diag["clip_fraction"]}
        rows.append(row)
        guard(traj.final_loss)
        if callback is not None:
            callback(row)
    return rows


# trajectory spill file: magic, u32 version, u32 state width, u64 count; per
# trajectory u32 len(set_id) + utf-8 set_id, i64 identity, u32 T, then T
# records of (state, raw, log mu, reward) as little-endian float64.
POOL_MAGIC = b"SETPOOLTRJ"
POOL_VERSION = 1


def save_pool(pool: ReplayPool, path) -> None:
    entries = list(pool.entries)
    width = entries[0].states.shape[1] if entries else 0
    parts = [POOL_MAGIC, struct.pack("<IIQ", POOL_VERSION, width, len(entries))]
    for t in entries:
        sid = t.set_id.encode("utf-8")
        parts.append(struct.pack("<I", len(sid)) + sid + struct.pack("<qI", t.identity, len(t)))
        rec = np.column_stack([t.states, t.raws, t.logmu, t.rewards])
        parts.append(np.ascontiguousarray(rec, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_pool(path, capacity: int, floor: float = 1e-3) -> ReplayPool:
    """Rebuild a pool from a spill file.

    Only the fields needed for replay are stored; the rest of each
    trajectory is reconstructed (weights from raw actions) or left empty.
    """
    blob = Path(path).read_bytes()
    if not blob.startswith(POOL_MAGIC):
        raise ValueError("not a trajectory file (bad magic)")
    pos = len(POOL_MAGIC)
    version, width, count = struct.unpack_from("<IIQ", blob, pos)
    pos += 16
    if version != POOL_VERSION:
        raise ValueError(f"unsupported trajectory file version {version}")
    pool = ReplayPool(capacity)
    for _ in range(count):
        (n,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        set_id = blob[pos:pos + n].decode("utf-8")
        pos += n
        identity, T = struct.unpack_from("<qI", blob, pos)
        pos += 12
        rec = np.frombuffer(blob, dtype="<f8", count=T * (width + 3), offset=pos).reshape(T, width + 3)
        pos += 8 * rec.size
        rec = rec.astype(np.float64)
        raws = rec[:, width]
        pool.push(Trajectory(set_id, int(identity), np.arange(T), rec[:, :width].copy(), raws.copy(),
                             softplus(raws) + floor, rec[:, width + 1].copy(), rec[:, width + 2].copy(),
                             np.full(T, np.nan), np.full(T, np.nan), np.zeros(width // 2)))
    if pos != len(blob):
        raise ValueError("trailing bytes in trajectory file")
    return pool
