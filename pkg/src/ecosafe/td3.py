"""TD3 agent on small numpy MLPs with hand-written backpropagation."""
from __future__ import annotations

import base64
import hashlib
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

U_MAX = 3.0
CHECKPOINT_FORMAT = "ecosafe-td3"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


class Mlp:
    """Dense ReLU network; output activation ``tanh`` (scaled) or ``linear``."""

    def __init__(self, sizes, out_act: str = "linear", out_scale: float = 1.0,
                 rng: np.random.Generator | None = None, final_init: float = 3e-3):
        if out_act not in ("tanh", "linear"):
            raise ValueError(out_act)
        self.sizes = list(sizes)
        self.out_act = out_act
        self.out_scale = float(out_scale)
        rng = rng if rng is not None else np.random.default_rng(0)
        shapes = []
        for i, o in zip(self.sizes[:-1], self.sizes[1:]):
            shapes += [(i, o), (o,)]
        self._bind(shapes)
        for k in range(len(shapes) // 2):
            lim = final_init if k == len(shapes) // 2 - 1 else 1.0 / np.sqrt(self.sizes[k])
            self.params[2 * k][...] = rng.uniform(-lim, lim, size=shapes[2 * k])
            self.params[2 * k + 1][...] = rng.uniform(-lim, lim, size=shapes[2 * k + 1])

    def _bind(self, shapes, theta=None):
        # all weights live in one flat vector; params are views into it
        sizes = [int(np.prod(s)) for s in shapes]
        self.theta = np.zeros(sum(sizes)) if theta is None else theta
        self.grad = np.zeros_like(self.theta)
        self.params, self._gviews = [], []
        off = 0
        for shp, n in zip(shapes, sizes):
            self.params.append(self.theta[off:off + n].reshape(shp))
            self._gviews.append(self.grad[off:off + n].reshape(shp))
            off += n

    @property
    def in_dim(self) -> int:
        return self.sizes[0]

    def copy(self) -> "Mlp":
        new = Mlp.__new__(Mlp)
        new.sizes, new.out_act, new.out_scale = list(self.sizes), self.out_act, self.out_scale
        new._bind([p.shape for p in self.params], self.theta.copy())
        return new

    def load_params(self, params) -> None:
        for dst, src in zip(self.params, params):
            if dst.shape != np.shape(src):
                raise ValueError(f"shape {np.shape(src)} != {dst.shape}")
            dst[...] = src

    def forward(self, x, cache: bool = False):
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.in_dim:
            raise ValueError(f"expected input width {self.in_dim}, got {x.shape[-1]}")
        acts = [x]
        n_layers = len(self.params) // 2
        h = x
        for k in range(n_layers):
            W, b = self.params[2 * k], self.params[2 * k + 1]
            h = h @ W + b
            if k < n_layers - 1:
                h = np.maximum(h, 0.0)
            acts.append(h)
        out = h
        if self.out_act == "tanh":
            out = self.out_scale * np.tanh(h)
        return (out, acts) if cache else out

    __call__ = forward

    def backward(self, acts, d_out):
        """Gradients of a loss w.r.t. params and input, given dL/d(output).

        Parameter gradients are views into ``self.grad`` and are overwritten
        by the next call.
        """
        n_layers = len(self.params) // 2
        g = np.asarray(d_out, dtype=float)
        if self.out_act == "tanh":
            t = np.tanh(acts[-1])
            g = g * self.out_scale * (1.0 - t * t)
        grads = self._gviews
        for k in range(n_layers - 1, -1, -1):
            if k < n_layers - 1:
                g = g * (acts[k + 1] > 0)
            a_in = acts[k]
            W = self.params[2 * k]
            if a_in.ndim == 1:
                np.outer(a_in, g, out=grads[2 * k])
                grads[2 * k + 1][...] = g
            else:
                np.matmul(a_in.T, g, out=grads[2 * k])
                g.sum(axis=0, out=grads[2 * k + 1])
            g = g @ W.T
        return grads, g


class Adam:
    """Adam over one flat parameter vector (bias correction folded into the step size)."""

    def __init__(self, theta: np.ndarray, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros_like(theta)
        self.v = np.zeros_like(theta)
        self._tmp = np.zeros_like(theta)
        self.t = 0

    def step(self, theta: np.ndarray, grad: np.ndarray) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = math.sqrt(1.0 - self.b2**self.t)
        m, v, tmp = self.m, self.v, self._tmp
        m *= self.b1
        m += (1 - self.b1) * grad
        v *= self.b2
        np.multiply(grad, grad, out=tmp)
        tmp *= 1 - self.b2
        v += tmp
        np.sqrt(v, out=tmp)
        tmp += self.eps * c2
        np.divide(m, tmp, out=tmp)
        tmp *= self.lr * c2 / c1
        theta -= tmp


def soft_update(target: Mlp, source: Mlp, tau: float) -> None:
    target.theta *= 1.0 - tau
    target.theta += tau * source.theta


@dataclass(frozen=True)
class Td3Config:
    buffer_capacity: int = 20000
    gamma: float = 0.9
    batch: int = 16
    lr_policy: float = 1e-5
    lr_q: float = 2e-5
    soft_tau: float = 0.005
    policy_delay: int = 2
    exploration_decay: float = 0.9992
    target_noise_std: float = 0.1
    target_noise_clip: float = 0.1
    hidden: tuple = (256, 128)

    def exploration_std(self, episode: int) -> float:
        return self.exploration_decay**episode


class ReplayBuffer:
    """FIFO ring of (state, action, reward, next_state, done) transitions."""

    def __init__(self, capacity: int, state_dim: int):
        self.capacity = int(capacity)
        self.s = np.zeros((capacity, state_dim))
        self.a = np.zeros(capacity)
        self.r = np.zeros(capacity)
        self.s2 = np.zeros((capacity, state_dim))
        self.d = np.zeros(capacity)
        self.size = 0
        self._next = 0
        self.pushed = 0

    def __len__(self) -> int:
        return self.size

    def push(self, s, a, r, s2, done) -> None:
        i = self._next
        self.s[i], self.a[i], self.r[i], self.s2[i], self.d[i] = s, a, r, s2, float(done)
        self._next = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)
        self.pushed += 1

    def sample(self, batch: int, rng: np.random.Generator):
        idx = rng.choice(self.size, size=batch, replace=False)
        return self.s[idx], self.a[idx], self.r[idx], self.s2[idx], self.d[idx]

    def oldest(self):
        i = self._next if self.size == self.capacity else 0
        return self.s[i], self.a[i], self.r[i], self.s2[i], self.d[i]


def default_obs_scale(state_dim: int) -> np.ndarray:
    # gaps ~ tens of metres, speeds ~ 10 m/s
    if state_dim == 5:
        return np.array([20.0, 20.0, 5.0, 10.0, 10.0])
    if state_dim == 3:
        return np.array([20.0, 5.0, 10.0])
    return np.ones(state_dim)


class Td3Agent:
    def __init__(self, state_dim: int, cfg: Td3Config = Td3Config(), seed: int = 0,
                 scenario: str = "C", obs_scale=None):
        self.state_dim, self.cfg, self.seed, self.scenario = state_dim, cfg, seed, scenario
        self.obs_scale = np.asarray(obs_scale if obs_scale is not None
                                    else default_obs_scale(state_dim), dtype=float)
        rng = np.random.default_rng(seed)
        h = list(cfg.hidden)
        self.policy = Mlp([state_dim, *h, 1], "tanh", U_MAX, rng)
        self.q1 = Mlp([state_dim + 1, *h, 1], "linear", rng=rng)
        self.q2 = Mlp([state_dim + 1, *h, 1], "linear", rng=rng)
        self.policy_t, self.q1_t, self.q2_t = self.policy.copy(), self.q1.copy(), self.q2.copy()
        self.opt_pi = Adam(self.policy.theta, cfg.lr_policy)
        self.opt_q1 = Adam(self.q1.theta, cfg.lr_q)
        self.opt_q2 = Adam(self.q2.theta, cfg.lr_q)
        self.updates = 0

    def networks(self) -> dict[str, Mlp]:
        return {"policy": self.policy, "q1": self.q1, "q2": self.q2,
                "policy_target": self.policy_t, "q1_target": self.q1_t, "q2_target": self.q2_t}

    def _norm(self, s):
        s = np.asarray(s, dtype=float)
        if s.shape[-1] != self.state_dim:
            raise ValueError(f"state width {s.shape[-1]} != {self.state_dim}")
        return s / self.obs_scale

    def _qin(self, s_n, a):
        return np.concatenate([s_n, np.asarray(a).reshape(-1, 1) / U_MAX], axis=1)

    def act(self, state) -> float:
        return float(forward_policy(self, state))

    def act_with_exploration(self, state, episode: int, rng: np.random.Generator,
                             std: float | None = None) -> float:
        std = self.cfg.exploration_std(episode) if std is None else std
        a = self.act(state)
        if std > 0:
            a += rng.normal(0.0, std)
        return float(np.clip(a, -U_MAX, U_MAX))

    def q_values(self, s, a):
        s_n = self._norm(np.atleast_2d(s))
        x = self._qin(s_n, a)
        return self.q1(x)[:, 0], self.q2(x)[:, 0]

    def update(self, buffer: ReplayBuffer, rng: np.random.Generator) -> dict:
        cfg = self.cfg
        if len(buffer) < cfg.batch:
            return {"skipped": True}
        s, a, r, s2, d = buffer.sample(cfg.batch, rng)
        s_n, s2_n = self._norm(s), self._norm(s2)
        noise = np.clip(rng.normal(0.0, cfg.target_noise_std, size=len(a)),
                        -cfg.target_noise_clip, cfg.target_noise_clip) if cfg.target_noise_std > 0 \
            else np.zeros(len(a))
        a2 = np.clip(self.policy_t(s2_n)[:, 0] + noise, -U_MAX, U_MAX)
        x2 = self._qin(s2_n, a2)
        tq1, tq2 = self.q1_t(x2)[:, 0], self.q2_t(x2)[:, 0]
        tmin = np.minimum(tq1, tq2)
        y = r + cfg.gamma * (1.0 - d) * tmin
        x = self._qin(s_n, a)
        B = len(a)
        losses = {}
        for name, net, opt in (("q1", self.q1, self.opt_q1), ("q2", self.q2, self.opt_q2)):
            q, acts = net.forward(x, cache=True)
            err = q[:, 0] - y
            losses[name] = float(np.mean(err**2))
            net.backward(acts, (2.0 * err / B)[:, None])
            opt.step(net.theta, net.grad)
        self.updates += 1
        if self.updates % cfg.policy_delay == 0:
            a_pi, pacts = self.policy.forward(s_n, cache=True)
            xq = self._qin(s_n, a_pi[:, 0])
            q, qacts = self.q1.forward(xq, cache=True)
            losses["policy"] = float(-np.mean(q))
            _, dx = self.q1.backward(qacts, np.full((B, 1), -1.0 / B))
            da = dx[:, -1:] / U_MAX
            self.policy.backward(pacts, da)
            self.opt_pi.step(self.policy.theta, self.policy.grad)
            soft_update(self.policy_t, self.policy, cfg.soft_tau)
            soft_update(self.q1_t, self.q1, cfg.soft_tau)
            soft_update(self.q2_t, self.q2, cfg.soft_tau)
        losses["target"] = y
        losses["target_q1"], losses["target_q2"], losses["reward"] = tq1, tq2, r
        losses["discount"] = cfg.gamma * (1.0 - d)
        return losses


def forward_policy(agent_or_net, state):
    """Deterministic action in [-U_MAX, U_MAX] for one state or a batch."""
    if isinstance(agent_or_net, Td3Agent):
        out = agent_or_net.policy(agent_or_net._norm(state))
    else:
        out = agent_or_net(np.asarray(state, dtype=float))
    return out[..., 0]


def td3_update(agent: Td3Agent, buffer: ReplayBuffer, rng: np.random.Generator) -> dict:
    return agent.update(buffer, rng)


def gradient_check(net: Mlp, loss_fn, x, n_weights: int = 200, step: float = 1e-5,
                   rng: np.random.Generator | None = None) -> float:
    """Max relative error between backprop and central differences.

    ``loss_fn(out) -> (loss, dloss/dout)``.  Relative error uses
    |a - n| / max(|a| + |n|, 1e-7).  Weights whose perturbation flips a ReLU
    on or off are replaced by other draws, since the difference quotient
    straddles a kink there.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    out, acts = net.forward(x, cache=True)
    _, dout = loss_fn(out)
    grads = [g.copy() for g in net.backward(acts, dout)[0]]
    pattern = _relu_pattern(acts)
    sizes = [p.size for p in net.params]
    total = sum(sizes)
    offsets = np.cumsum([0] + sizes)
    worst, checked = 0.0, 0
    for flat in rng.permutation(total):
        if checked >= n_weights:
            break
        k = int(np.searchsorted(offsets, flat, side="right") - 1)
        idx = np.unravel_index(flat - offsets[k], net.params[k].shape)
        p = net.params[k]
        orig = p[idx]
        p[idx] = orig + step
        op, ap = net.forward(x, cache=True)
        p[idx] = orig - step
        om, am = net.forward(x, cache=True)
        p[idx] = orig
        if not (np.array_equal(_relu_pattern(ap), pattern) and np.array_equal(_relu_pattern(am), pattern)):
            continue
        num = (loss_fn(op)[0] - loss_fn(om)[0]) / (2 * step)
        ana = grads[k][idx]
        worst = max(worst, abs(ana - num) / max(abs(ana) + abs(num), 1e-7))
        checked += 1
    return float(worst)


def _relu_pattern(acts) -> np.ndarray:
    return np.concatenate([(a > 0).ravel() for a in acts[1:-1]]) if len(acts) > 2 else np.zeros(0)


def _enc(a: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(a, dtype="<f8").tobytes()).decode("ascii")


def _dec(text: str, shape) -> np.ndarray:
    raw = base64.b64decode(text.encode("ascii"), validate=True)
    arr = np.frombuffer(raw, dtype="<f8")
    if arr.size != int(np.prod(shape)):
        raise CheckpointError("weight payload size mismatch")
    return arr.reshape(shape).astype(float)


def save_checkpoint(agent: Td3Agent, path, extra: dict | None = None) -> None:
    nets = {}
    for name, net in agent.networks().items():
        nets[name] = {"sizes": net.sizes, "out_act": net.out_act, "out_scale": net.out_scale,
                      "params": [{"shape": list(p.shape), "data": _enc(p)} for p in net.params]}
    body = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "scenario": agent.scenario,
        "state_dim": agent.state_dim,
        "seed": agent.seed,
        "obs_scale": _enc(agent.obs_scale),
        "config": asdict(agent.cfg),
        "updates": agent.updates,
        "networks": nets,
        "extra": extra or {},
    }
    payload = json.dumps(body, sort_keys=True)
    digest = hashlib.sha256(payload.encode()).hexdigest()
    Path(path).write_text(json.dumps({"sha256": digest, "body": body}, sort_keys=True))


def load_checkpoint(path, expected_state_dim: int | None = None) -> Td3Agent:
    try:
        doc = json.loads(Path(path).read_text())
        body, digest = doc["body"], doc["sha256"]
    except (json.JSONDecodeError, KeyError, TypeError) as e:
        raise CheckpointError(f"{path}: unreadable checkpoint ({e})") from None
    if hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch")
    if body.get("format") != CHECKPOINT_FORMAT or body.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported format/version "
                              f"{body.get('format')}/{body.get('version')}")
    dim = int(body["state_dim"])
    if expected_state_dim is not None and dim != expected_state_dim:
        raise CheckpointError(f"checkpoint policy expects {dim} inputs (scenario "
                              f"{body['scenario']}), environment provides {expected_state_dim}")
    cfg_d = dict(body["config"])
    cfg_d["hidden"] = tuple(cfg_d["hidden"])
    agent = Td3Agent(dim, Td3Config(**cfg_d), seed=int(body["seed"]), scenario=body["scenario"],
                     obs_scale=_dec(body["obs_scale"], (dim,)))
    for name, net in agent.networks().items():
        spec = body["networks"][name]
        if spec["sizes"] != net.sizes:
            raise CheckpointError(f"{name}: layer sizes {spec['sizes']} != {net.sizes}")
        net.load_params([_dec(p["data"], tuple(p["shape"])) for p in spec["params"]])
    agent.opt_pi = Adam(agent.policy.theta, agent.cfg.lr_policy)
    agent.opt_q1 = Adam(agent.q1.theta, agent.cfg.lr_q)
    agent.opt_q2 = Adam(agent.q2.theta, agent.cfg.lr_q)
    agent.updates = int(body["updates"])
    return agent
