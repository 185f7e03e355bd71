"""Small numpy MLPs with hand-rolled reverse-mode gradients.

Architecture is fixed at in_dim -> 64 -> 64 -> out_dim with tanh hidden
activations and a linear output. Parameters live in plain float64 arrays
with a flat-vector view used by the optimizer, finite-difference checks,
and checkpointing. The losses below return (value, flat gradient) pairs;
stochastic terms take their noise as an explicit argument so gradients
are exact for the sampled draw.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

HIDDEN = (64, 64)
LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0
LOG_2PI = math.log(2.0 * math.pi)

CHECKPOINT_MAGIC = b"TWPKCKPT"
CHECKPOINT_VERSION = 1


class EmptyBatchError(ValueError):
    """A loss was evaluated on an empty batch."""


class NumericError(RuntimeError):
    """A loss became non-finite; carries the offending batch index."""

    def __init__(self, message: str, batch_index: int | None = None):
        super().__init__(message)
        self.batch_index = batch_index


class MLP:
    """Two-hidden-layer tanh MLP on float64 with manual backprop."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator):
        self.in_dim = in_dim
        self.out_dim = out_dim
        dims = [in_dim, *HIDDEN, out_dim]
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        for a, b in zip(dims, dims[1:]):
            bound = 1.0 / math.sqrt(a)
            self.weights.append(rng.uniform(-bound, bound, size=(a, b)))
            self.biases.append(np.zeros(b))

    @property
    def n_params(self) -> int:
        return sum(w.size for w in self.weights) + sum(b.size for b in self.biases)

    def forward(self, x: np.ndarray) -> np.ndarray:
        y, _ = self.forward_cached(x)
        return y

    def forward_cached(self, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
        """Forward pass keeping activations for backprop."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[1] != self.in_dim:
            raise ValueError(f"expected input dim {self.in_dim}, got {x.shape[1]}")
        acts = [x]
        h = x
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if i < len(self.weights) - 1:
                h = np.tanh(h)
            acts.append(h)
        return h, acts

    def backward(
        self, acts: list[np.ndarray], dy: np.ndarray
    ) -> tuple[np.ndarray, np.ndarray]:
        """Backprop dy through the cached pass.

        Returns (flat parameter gradient, gradient w.r.t. the input batch).
        """
        grads_w = [np.zeros_like(w) for w in self.weights]
        grads_b = [np.zeros_like(b) for b in self.biases]
        g = np.asarray(dy, dtype=np.float64)
        for i in reversed(range(len(self.weights))):
            a_in, a_out = acts[i], acts[i + 1]
            if i < len(self.weights) - 1:
                g = g * (1.0 - a_out * a_out)  # tanh'
            grads_w[i] = a_in.T @ g
            grads_b[i] = g.sum(axis=0)
            g = g @ self.weights[i].T
        return self._flatten(grads_w, grads_b), g

    # flat parameter view -------------------------------------------------

    def _flatten(self, ws: list[np.ndarray], bs: list[np.ndarray]) -> np.ndarray:
        return np.concatenate([a.ravel() for pair in zip(ws, bs) for a in pair])

    def get_flat(self) -> np.ndarray:
        return self._flatten(self.weights, self.biases)

    def set_flat(self, v: np.ndarray) -> None:
        if v.size != self.n_params:
            raise ValueError(f"expected {self.n_params} params, got {v.size}")
        off = 0
        for i in range(len(self.weights)):
            for arr in (self.weights[i], self.biases[i]):
                arr[...] = v[off : off + arr.size].reshape(arr.shape)
                off += arr.size

    def copy(self) -> "MLP":
        other = MLP.__new__(MLP)
        other.in_dim = self.in_dim
        other.out_dim = self.out_dim
        other.weights = [w.copy() for w in self.weights]
        other.biases = [b.copy() for b in self.biases]
        return other


def mlp_forward(net: MLP, x: np.ndarray) -> np.ndarray:
    return net.forward(x)


class GaussianPolicy:
    """Diagonal Gaussian policy: state-conditioned mean, learnable log-std.

    Observations are standardized by frozen per-dimension statistics
    (identity until set, typically from the cloning dataset) before the
    mean net; the statistics are not parameters and receive no gradient.
    """

    def __init__(self, obs_dim: int, act_dim: int, rng: np.random.Generator):
        self.obs_dim = obs_dim
        self.act_dim = act_dim
        self.mean_net = MLP(obs_dim, act_dim, rng)
        # The gripper channel (last action dim) starts biased open, so the
        # untrained default far from any anchor is "do not close".
        self.mean_net.biases[-1][-1] = -1.0
        self.log_std = np.zeros(act_dim)
        self.obs_mean = np.zeros(obs_dim)
        self.obs_std = np.ones(obs_dim)

    @property
    def n_params(self) -> int:
        return self.mean_net.n_params + self.act_dim

    def get_flat(self) -> np.ndarray:
        return np.concatenate([self.mean_net.get_flat(), self.log_std])

    def set_flat(self, v: np.ndarray) -> None:
        n = self.mean_net.n_params
        self.mean_net.set_flat(v[:n])
        self.log_std[...] = v[n:]

    def set_obs_norm(self, mean: np.ndarray, std: np.ndarray) -> None:
        self.obs_mean = np.asarray(mean, dtype=np.float64).copy()
        self.obs_std = np.maximum(np.asarray(std, dtype=np.float64), 1e-6)

    def normalize(self, obs: np.ndarray) -> np.ndarray:
        return (np.asarray(obs, dtype=np.float64) - self.obs_mean) / self.obs_std

    def clamp_log_std(self) -> None:
        np.clip(self.log_std, LOG_STD_MIN, LOG_STD_MAX, out=self.log_std)

    def mean_cached(self, obs: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
        return self.mean_net.forward_cached(self.normalize(np.atleast_2d(obs)))

    def mean(self, obs: np.ndarray) -> np.ndarray:
        return self.mean_cached(obs)[0]

    def sample(self, obs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        mu = self.mean(np.atleast_2d(obs))
        eps = rng.standard_normal(mu.shape)
        a = mu + np.exp(self.log_std) * eps
        return a[0] if np.asarray(obs).ndim == 1 else a

    def copy(self) -> "GaussianPolicy":
        other = GaussianPolicy.__new__(GaussianPolicy)
        other.obs_dim = self.obs_dim
        other.act_dim = self.act_dim
        other.mean_net = self.mean_net.copy()
        other.log_std = self.log_std.copy()
        other.obs_mean = self.obs_mean.copy()
        other.obs_std = self.obs_std.copy()
        return other


class Critic:
    """State-action value net with a polyak-averaged target copy."""

    def __init__(self, obs_dim: int, act_dim: int, rng: np.random.Generator, rho: float = 0.995):
        if not 0.0 < rho < 1.0:
            raise ValueError("polyak rho must be in (0, 1)")
        self.obs_dim = obs_dim
        self.act_dim = act_dim
        self.q_net = MLP(obs_dim + act_dim, 1, rng)
        self.target_q_net = self.q_net.copy()
        self.rho = rho

    def q(self, obs: np.ndarray, act: np.ndarray) -> np.ndarray:
        return self.q_net.forward(np.concatenate([obs, act], axis=1))[:, 0]

    def q_target(self, obs: np.ndarray, act: np.ndarray) -> np.ndarray:
        return self.target_q_net.forward(np.concatenate([obs, act], axis=1))[:, 0]

    def copy(self) -> "Critic":
        other = Critic.__new__(Critic)
        other.obs_dim = self.obs_dim
        other.act_dim = self.act_dim
        other.q_net = self.q_net.copy()
        other.target_q_net = self.target_q_net.copy()
        other.rho = self.rho
        return other


def polyak_update(critic: Critic, rho: float | None = None) -> None:
    """target <- rho * target + (1 - rho) * online, elementwise."""
    if rho is None:
        rho = critic.rho
    online = critic.q_net.get_flat()
    target = critic.target_q_net.get_flat()
    critic.target_q_net.set_flat(rho * target + (1.0 - rho) * online)


@dataclass(frozen=True)
class LossWeights:
    beta: float = 1.0
    eta: float = 0.1
    gamma: float = 0.97

    def __post_init__(self) -> None:
        if self.beta < 0 or self.eta < 0:
            raise ValueError("beta and eta must be >= 0")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must be in (0, 1]")


# --- losses -------------------------------------------------------------


def _check_batch(x: np.ndarray, name: str) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[0] == 0:
        raise EmptyBatchError(f"{name} batch is empty")
    return x


def _check_finite(per_sample: np.ndarray, what: str) -> None:
    bad = np.flatnonzero(~np.isfinite(per_sample))
    if bad.size:
        raise NumericError(f"non-finite {what} at batch index {bad[0]}", int(bad[0]))


def il_loss(policy: GaussianPolicy, states: np.ndarray, actions: np.ndarray) -> float:
    return il_loss_grad(policy, states, actions)[0]


def il_loss_grad(
    policy: GaussianPolicy, states: np.ndarray, actions: np.ndarray
) -> tuple[float, np.ndarray]:
    """Mean Gaussian negative log-likelihood of the actions and its gradient."""
    s = _check_batch(states, "il")
    a = _check_batch(actions, "il")
    mu, cache = policy.mean_cached(s)
    std = np.exp(policy.log_std)
    z = (a - mu) / std
    per_sample = 0.5 * (z * z).sum(axis=1) + policy.log_std.sum() + 0.5 * LOG_2PI * policy.act_dim
    _check_finite(per_sample, "il loss")
    loss = float(per_sample.mean())
    n = s.shape[0]
    dmu = -(z / std) / n
    mean_grad, _ = policy.mean_net.backward(cache, dmu)
    dlog_std = (1.0 - z * z).mean(axis=0)
    return loss, np.concatenate([mean_grad, dlog_std])


def td_loss(
    critic: Critic,
    batch: "TransitionBatch",
    policy: GaussianPolicy,
    w: LossWeights,
    next_eps: np.ndarray | None = None,
) -> float:
    return td_loss_grad(critic, batch, policy, w, next_eps)[0]


def td_loss_grad(
    critic: Critic,
    batch: "TransitionBatch",
    policy: GaussianPolicy,
    w: LossWeights,
    next_eps: np.ndarray | None = None,
) -> tuple[float, np.ndarray]:
    """MSE between Q(s, a) and the bootstrapped target; gradient w.r.t. q_net.

    next_eps supplies the unit noise for a' ~ pi(s'); None means the
    policy mean. The target network and policy receive no gradient.
    """
    s = _check_batch(batch.s, "td")
    a = _check_batch(batch.a, "td")
    n = s.shape[0]
    mu_next = policy.mean(batch.s_next)
    a_next = mu_next if next_eps is None else mu_next + np.exp(policy.log_std) * next_eps
    q_next = critic.q_target(batch.s_next, a_next)
    target = batch.r + w.gamma * (1.0 - batch.done.astype(np.float64)) * q_next
    q, cache = critic.q_net.forward_cached(np.concatenate([s, a], axis=1))
    q = q[:, 0]
    per_sample = (q - target) ** 2
    _check_finite(per_sample, "td loss")
    loss = float(per_sample.mean())
    dq = (2.0 * (q - target) / n)[:, None]
    grad, _ = critic.q_net.backward(cache, dq)
    return loss, grad


def actor_loss(
    policy: GaussianPolicy,
    critic: Critic,
    states: np.ndarray,
    eps: np.ndarray | None = None,
) -> float:
    return actor_loss_grad(policy, critic, states, eps)[0]


def actor_loss_grad(
    policy: GaussianPolicy,
    critic: Critic,
    states: np.ndarray,
    eps: np.ndarray | None = None,
) -> tuple[float, np.ndarray]:
    """-mean Q(s, a) with a reparameterized as mean + std * eps.

    Gradient flows through the sampled action into the policy; the
    critic's parameters are treated as constants. eps=None uses the mean
    action (zero noise).
    """
    s = _check_batch(states, "actor")
    n = s.shape[0]
    mu, mean_cache = policy.mean_cached(s)
    std = np.exp(policy.log_std)
    if eps is None:
        eps = np.zeros_like(mu)
    a = mu + std * eps
    q, q_cache = critic.q_net.forward_cached(np.concatenate([s, a], axis=1))
    per_sample = -q[:, 0]
    _check_finite(per_sample, "actor loss")
    loss = float(per_sample.mean())
    dy = np.full((n, 1), -1.0 / n)
    _, dinput = critic.q_net.backward(q_cache, dy)
    da = dinput[:, policy.obs_dim :]
    mean_grad, _ = policy.mean_net.backward(mean_cache, da)
    dlog_std = (da * eps * std).sum(axis=0)
    return loss, np.concatenate([mean_grad, dlog_std])


def joint_loss(w: LossWeights, il: float, aq: float) -> float:
    """Combined policy objective: beta * il + eta * aq."""
    return w.beta * il + w.eta * aq


def joint_loss_grad(
    policy: GaussianPolicy,
    critic: Critic,
    w: LossWeights,
    il_states: np.ndarray | None,
    il_actions: np.ndarray | None,
    q_states: np.ndarray | None,
    eps: np.ndarray | None = None,
    eta_scale: float = 1.0,
) -> tuple[float, np.ndarray]:
    """Gradient of beta * L_IL + eta * L_Q w.r.t. the policy parameters.

    Zero-weighted terms are skipped entirely, so the eta=0 case is
    bit-identical to a pure imitation step.
    """
    loss = 0.0
    grad = np.zeros(policy.n_params)
    eta = w.eta * eta_scale
    if w.beta != 0.0 and il_states is not None:
        il, g = il_loss_grad(policy, il_states, il_actions)
        loss += w.beta * il
        grad += w.beta * g
    if eta != 0.0 and q_states is not None:
        aq, g = actor_loss_grad(policy, critic, q_states, eps)
        loss += eta * aq
        grad += eta * g
    return loss, grad


class Adam:
    """Adam on a flat parameter vector."""

    def __init__(self, n_params: int, lr: float = 3e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = np.zeros(n_params)
        self.v = np.zeros(n_params)
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1 ** self.t)
        v_hat = self.v / (1.0 - self.beta2 ** self.t)
        return params - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass
class TransitionBatch:
    """Stacked transition arrays for the losses."""

    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s_next: np.ndarray
    done: np.ndarray
    sources: list


# --- checkpoints --------------------------------------------------------


def save_checkpoint(
    path: str | Path,
    arrays: dict[str, np.ndarray],
    meta: dict,
    rng_state: dict | None = None,
) -> None:
    """Binary checkpoint: magic, version, JSON header, raw float64 blobs."""
    header = {
        "meta": meta,
        "rng_state": rng_state,
        "arrays": {k: list(v.shape) for k, v in arrays.items()},
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(hbytes)))
        f.write(hbytes)
        for k in sorted(arrays):
            f.write(np.ascontiguousarray(arrays[k], dtype=np.float64).tobytes())


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict, dict | None]:
    with open(path, "rb") as f:
        magic = f.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"not a checkpoint file: {path}")
        version, hlen = struct.unpack("<II", f.read(8))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        header = json.loads(f.read(hlen).decode("utf-8"))
        arrays = {}
        for k in sorted(header["arrays"]):
            shape = tuple(header["arrays"][k])
            n = int(np.prod(shape)) if shape else 1
            buf = f.read(8 * n)
            arrays[k] = np.frombuffer(buf, dtype=np.float64).reshape(shape).copy()
    return arrays, header["meta"], header.get("rng_state")
