"""Numerical self-checks: gradients, estimator reductions, projection, telescoping."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .actor_critic import ActorCritic, a2c_gradients, gaussian_kl, logp_grad, value_grad
from .data import SyntheticConfig, gen_synthetic
from .env import run_episode
from .offpolicy import is_ratios, kl_grad, off_policy_return, policy_grad_off, trust_region_project


@dataclass
class CheckResult:
    name: str
    max_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(self.max_error <= self.tolerance)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.name:<44} max_err={self.max_error:.3e}  tol={self.tolerance:.0e}"


def _corrupt(backward_fn):
    def bad(net, tape, upstream):
        grads, dx = backward_fn(net, tape, upstream)
        return [g * 1.01 for g in grads], dx
    return bad


def check_dense_backward(nets, rng, backward_fn=nn.backward) -> float:
    worst = 0.0
    for net in nets:
        x = rng.standard_normal((3, net.dims[0]))
        up = rng.standard_normal((3, net.dims[-1]))
        _, tape = nn.forward(net, x)
        grads, dx = backward_fn(net, tape, up)
        worst = max(worst, nn.grad_check(lambda: float(np.sum(up * net(x))), net.params(), grads))
        worst = max(worst, nn.grad_check(lambda: float(np.sum(up * net(x))), [x], [dx]))
    return worst


def check_softmax_xent(rng) -> float:
    logits = rng.standard_normal(7)
    _, d = nn.softmax_xent(logits, 3)
    # absolute error, matching the tighter 1e-6 bar for this op
    worst = 0.0
    for i in range(7):
        e = np.zeros(7)
        e[i] = 1e-6
        num = (nn.softmax_xent(logits + e, 3)[0] - nn.softmax_xent(logits - e, 3)[0]) / 2e-6
        worst = max(worst, abs(num - d[i]))
    return worst


def _model(dim: int, hidden, classes: int, rng) -> ActorCritic:
    p = ActorCritic.create(dim, classes, rng, hidden)
    # give the zero-initialised heads some signal
    for net in (p.policy_head, p.value_head):
        for a in net.params():
            a[...] = 0.3 * rng.standard_normal(a.shape)
    p.policy_head.layers[-1].b[1] = -0.5
    p.touch()
    return p


def check_policy_surrogate(p: ActorCritic, rng) -> float:
    state = rng.standard_normal((1, 2 * p.dim)) * 0.3
    raw = np.array([rng.standard_normal()])
    delta = 0.7
    grads, _ = logp_grad(p, state, raw, [delta])
    return nn.grad_check(lambda: float(delta * p.log_prob(state, raw)[0]), p.policy_params(), grads)


def check_value_loss(p: ActorCritic, rng) -> float:
    states = rng.standard_normal((6, 2 * p.dim)) * 0.3
    targets = rng.standard_normal(6)
    values, _ = p.value_pass(states)
    g, _ = value_grad(p, states, targets - values)
    grads = [-a for a in g]  # descent gradient of 0.5 * sum (target - V)^2
    return nn.grad_check(lambda: float(0.5 * np.sum((targets - p.value_pass(states)[0]) ** 2)),
                         p.value_params(), grads)


def check_reward_head(p: ActorCritic, rng) -> float:
    feat = rng.standard_normal(p.dim)
    _, grads = p.reward_head.loss_and_grad(feat, 1)
    return nn.grad_check(lambda: p.reward_head.loss(feat, 1), p.reward_head.net.params(), grads)


def check_kl_grad(p: ActorCritic, rng) -> float:
    for a in p.avg_policy_params():
        a += 0.05 * rng.standard_normal(a.shape)
    p.touch()
    states = rng.standard_normal((5, 2 * p.dim)) * 0.3

    def mean_kl():
        m, ls, _ = p.policy_pass(states)
        ma, lsa, _ = p.policy_pass(states, average=True)
        return float(np.mean(gaussian_kl(ma, lsa, m, ls)))

    _, k = kl_grad(p, states)
    return nn.grad_check(mean_kl, p.policy_params(), k)


def _episode(p: ActorCritic, rng, T: int = 6):
    cfg = SyntheticConfig(num_identities=p.reward_head.num_classes, sets_per_identity=1,
                          set_size_min=T, set_size_max=T, dim=p.dim)
    fs = gen_synthetic(cfg, rng).sets[0]
    return fs, run_episode(fs, p, p.reward_head, "stochastic", rng)


def check_estimator_reductions(p: ActorCritic, rng, gamma: float = 0.9) -> float:
    worst = 0.0
    for _ in range(5):
        _, traj = _episode(p, rng)
        rho = is_ratios(traj, p, rho_clip=10.0)
        worst = max(worst, float(np.max(np.abs(rho - 1.0))))
        direct = np.array([sum(gamma ** j * traj.rewards[t + j] for j in range(len(traj) - t))
                           for t in range(len(traj))])
        worst = max(worst, float(np.max(np.abs(off_policy_return(traj.rewards, rho, gamma) - direct))))
        g_on, _, _ = a2c_gradients(p, traj, gamma)
        g_off = policy_grad_off(traj, rho, p, gamma)
        worst = max(worst, max(float(np.max(np.abs(a - b))) for a, b in zip(g_on, g_off)))
    return worst


def check_return_hand_case() -> float:
    got = off_policy_return([1.0, 1.0, 1.0], [np.nan, 2.0, 0.5], 0.9)
    return float(np.max(np.abs(got - np.array([3.61, 1.45, 1.0]))))


def qp_oracle(dtheta, k, xi):
    """Solve min 0.5|dtheta - z|^2 s.t. k.z <= xi via its KKT system."""
    if k @ dtheta <= xi:
        return dtheta.copy()
    n = len(dtheta)
    A = np.zeros((n + 1, n + 1))
    A[:n, :n] = np.eye(n)
    A[:n, n] = k
    A[n, :n] = k
    sol = np.linalg.solve(A, np.append(dtheta, xi))
    return sol[:n]


def check_projection(rng, trials: int = 200) -> float:
    worst = 0.0
    for _ in range(trials):
        dtheta, k = rng.standard_normal(20), rng.standard_normal(20)
        xi = float(rng.uniform(0.0, 2.0))
        z = trust_region_project(dtheta, k, xi)
        worst = max(worst, float(np.max(np.abs(z - qp_oracle(dtheta, k, xi)))),
                    max(0.0, float(k @ z - xi)))
    return worst


def check_telescoping(p: ActorCritic, rng, episodes: int = 20) -> float:
    worst = 0.0
    for _ in range(episodes):
        _, traj = _episode(p, rng, T=int(rng.integers(1, 12)))
        worst = max(worst, abs(traj.loss_terms.sum() - (traj.initial_loss - traj.final_loss)))
    return worst


def run_selfcheck(dim: int = 8, hidden=(16,), seed: int = 0, fault: str | None = None) -> list[CheckResult]:
    """All checks on a randomly initialised model; ``fault='backward'`` corrupts reverse mode."""
    rng = np.random.default_rng(seed)
    backward_fn = _corrupt(nn.backward) if fault == "backward" else nn.backward
    p = _model(dim, hidden, 5, rng)
    nets = [p.trunk, p.policy_head, p.value_head, p.reward_head.net]
    return [
        CheckResult("dense backward vs finite differences", check_dense_backward(nets, rng, backward_fn), 1e-4),
        CheckResult("softmax cross-entropy gradient", check_softmax_xent(rng), 1e-6),
        CheckResult("policy surrogate gradient", check_policy_surrogate(p, rng), 1e-4),
        CheckResult("value loss gradient", check_value_loss(p, rng), 1e-4),
        CheckResult("reward head cross-entropy gradient", check_reward_head(p, rng), 1e-4),
        CheckResult("KL gradient", check_kl_grad(p.copy(), rng), 1e-4),
        CheckResult("on-policy reductions (rho = 1)", check_estimator_reductions(p, rng), 1e-10),
        CheckResult("off-policy return hand case", check_return_hand_case(), 1e-12),
        CheckResult("trust-region projection vs KKT oracle", check_projection(rng), 1e-10),
        CheckResult("reward telescoping", check_telescoping(p, rng), 1e-9),
    ]
