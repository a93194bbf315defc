"""A small noise-conditioned MLP with hand-written backpropagation.

The noise level is embedded with fixed random Fourier features, passed
through a two-layer MLP, and each hidden layer of the main trunk is then
modulated FiLM-style: ``h <- silu(gamma(sigma) * (W h + b) + beta(sigma))``.
The same trunk serves as the eps-network (output dimension d) and as the
noisy classifier (output dimension K, see ``classifier``).
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .kernel import TrainingTuple, sample_training_tuple
from .schedules import Schedule

ADAM_LR = 2e-4
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
EMA_RATE = 0.999


def silu(z):
    return z * expit(z)


def silu_grad(z):
    s = expit(z)
    return s * (1.0 + z * (1.0 - s))


@dataclass(frozen=True)
class RFFEmbedding:
    """[cos(2 pi f sigma), sin(2 pi f sigma)] with frozen Gaussian frequencies."""

    frequencies: np.ndarray

    def __post_init__(self):
        f = np.array(self.frequencies, dtype=float).reshape(-1)
        f.setflags(write=False)
        object.__setattr__(self, "frequencies", f)

    @classmethod
    def random(cls, n: int = 32, std: float = 4.0, rng: np.random.Generator | None = None) -> "RFFEmbedding":
        rng = np.random.default_rng(0) if rng is None else rng
        return cls(rng.normal(0.0, std, size=n))

    @property
    def dim(self) -> int:
        return 2 * self.frequencies.size

    def __call__(self, sigma):
        sigma = np.asarray(sigma, dtype=float)
        if np.any(sigma < 0):
            raise ValueError("sigma must be nonnegative")
        phase = 2.0 * np.pi * sigma[..., None] * self.frequencies
        return np.concatenate([np.cos(phase), np.sin(phase)], axis=-1)


def _uniform(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class FiLMMLP:
    """Noise-conditioned MLP; parameters live in the ``params`` dict.

    Weight matrices are stored as (fan_in, fan_out) and applied as
    ``h @ W + b``.  The output layer starts at zero.
    """

    def __init__(self, in_dim: int, out_dim: int, hidden=(128, 128, 128), n_freq: int = 32,
                 freq_std: float = 4.0, emb_hidden: int = 128, seed: int = 0):
        if in_dim < 1 or out_dim < 1 or not hidden:
            raise ValueError("dimensions must be positive and at least one hidden layer is required")
        self.in_dim, self.out_dim = int(in_dim), int(out_dim)
        self.hidden = tuple(int(h) for h in hidden)
        self.n_freq, self.freq_std, self.emb_hidden, self.seed = int(n_freq), float(freq_std), int(emb_hidden), int(seed)

        freq_seq, param_seq = np.random.SeedSequence(seed).spawn(2)
        self.embedding = RFFEmbedding.random(n_freq, freq_std, np.random.default_rng(freq_seq))
        rng = np.random.default_rng(param_seq)
        p = {}
        e, eh = self.embedding.dim, self.emb_hidden
        p["emb0.W"], p["emb0.b"] = _uniform(rng, e, (e, eh)), _uniform(rng, e, (eh,))
        p["emb1.W"], p["emb1.b"] = _uniform(rng, eh, (eh, eh)), _uniform(rng, eh, (eh,))
        fan = self.in_dim
        for i, h in enumerate(self.hidden):
            p[f"dense{i}.W"], p[f"dense{i}.b"] = _uniform(rng, fan, (fan, h)), _uniform(rng, fan, (h,))
            p[f"film{i}.W"] = _uniform(rng, eh, (eh, 2 * h))
            p[f"film{i}.b"] = np.concatenate([np.ones(h), np.zeros(h)])
            fan = h
        p["out.W"], p["out.b"] = np.zeros((fan, self.out_dim)), np.zeros(self.out_dim)
        self.params = p

    # -- bookkeeping -----------------------------------------------------------

    def config(self) -> dict:
        return {"in_dim": self.in_dim, "out_dim": self.out_dim, "hidden": list(self.hidden), "n_freq": self.n_freq,
                "freq_std": self.freq_std, "emb_hidden": self.emb_hidden, "seed": self.seed}

    def names(self) -> list[str]:
        return list(self.params)

    def num_params(self) -> int:
        return sum(v.size for v in self.params.values())

    def to_flat(self) -> np.ndarray:
        return np.concatenate([self.params[k].ravel() for k in self.names()])

    def load_flat(self, flat) -> None:
        flat = np.asarray(flat, dtype=float).reshape(-1)
        if flat.size != self.num_params():
            raise ValueError(f"expected {self.num_params()} parameters, got {flat.size}")
        pos = 0
        for k in self.names():
            v = self.params[k]
            self.params[k] = flat[pos:pos + v.size].reshape(v.shape).copy()
            pos += v.size

    def copy(self) -> "FiLMMLP":
        return copy.deepcopy(self)

    # -- forward / backward ----------------------------------------------------

    def _prepare(self, x, sigma):
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        xb = x[None] if single else x
        if xb.ndim != 2 or xb.shape[1] != self.in_dim:
            raise ValueError(f"expected inputs of dimension {self.in_dim}, got shape {x.shape}")
        s = np.broadcast_to(np.asarray(sigma, dtype=float), (xb.shape[0],))
        return xb, s, single

    def forward_cache(self, x, sigma):
        """Forward pass over a batch, keeping what ``backward`` needs."""
        p = self.params
        xb, s, single = self._prepare(x, sigma)
        e = self.embedding(s)
        a0 = e @ p["emb0.W"] + p["emb0.b"]
        c0 = silu(a0)
        a1 = c0 @ p["emb1.W"] + p["emb1.b"]
        c = silu(a1)
        h = xb
        layers = []
        for i, width in enumerate(self.hidden):
            z = h @ p[f"dense{i}.W"] + p[f"dense{i}.b"]
            fb = c @ p[f"film{i}.W"] + p[f"film{i}.b"]
            gamma = fb[:, :width]
            u = gamma * z + fb[:, width:]
            layers.append((h, z, gamma, u))
            h = silu(u)
        out = h @ p["out.W"] + p["out.b"]
        cache = {"e": e, "a0": a0, "c0": c0, "a1": a1, "c": c, "layers": layers, "h": h, "single": single}
        return (out[0] if single else out), cache

    def __call__(self, x, sigma):
        return self.forward_cache(x, sigma)[0]

    def backward(self, cache, dout):
        """Reverse-mode pass.  Returns ``(param_grads, input_grad)``."""
        p = self.params
        dout = np.asarray(dout, dtype=float)
        if cache["single"]:
            dout = dout[None]
        g = {}
        g["out.W"] = cache["h"].T @ dout
        g["out.b"] = dout.sum(axis=0)
        dh = dout @ p["out.W"].T
        c = cache["c"]
        dc = np.zeros_like(c)
        for i in reversed(range(len(self.hidden))):
            h_prev, z, gamma, u = cache["layers"][i]
            du = dh * silu_grad(u)
            dfb = np.concatenate([du * z, du], axis=1)
            g[f"film{i}.W"] = c.T @ dfb
            g[f"film{i}.b"] = dfb.sum(axis=0)
            dc += dfb @ p[f"film{i}.W"].T
            dz = du * gamma
            g[f"dense{i}.W"] = h_prev.T @ dz
            g[f"dense{i}.b"] = dz.sum(axis=0)
            dh = dz @ p[f"dense{i}.W"].T
        da1 = dc * silu_grad(cache["a1"])
        g["emb1.W"] = cache["c0"].T @ da1
        g["emb1.b"] = da1.sum(axis=0)
        da0 = (da1 @ p["emb1.W"].T) * silu_grad(cache["a0"])
        g["emb0.W"] = cache["e"].T @ da0
        g["emb0.b"] = da0.sum(axis=0)
        grads = {k: g[k] for k in self.names()}
        return grads, (dh[0] if cache["single"] else dh)


# -- loss and optimization ------------------------------------------------------


def dsm_loss_and_grads(net: FiLMMLP, batch: TrainingTuple):
    """Mean over the batch of ||w (eps_hat - eps)||^2 and its parameter gradients."""
    n = len(batch)
    if n == 0:
        raise ValueError("empty batch")
    eps_hat, cache = net.forward_cache(batch.x_t, batch.sigma)
    w2 = np.asarray(batch.weight, dtype=float)[:, None] ** 2
    r = eps_hat - batch.eps
    loss = float(np.sum(w2 * r * r) / n)
    grads, _ = net.backward(cache, 2.0 * w2 * r / n)
    return loss, grads


class Adam:
    def __init__(self, params: dict, lr: float = ADAM_LR, betas=ADAM_BETAS, eps: float = ADAM_EPS):
        self.lr, (self.b1, self.b2), self.eps = lr, betas, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.step_count = 0

    def step(self, params: dict, grads: dict) -> None:
        self.step_count += 1
        c1 = 1.0 - self.b1**self.step_count
        c2 = 1.0 - self.b2**self.step_count
        for k, gk in grads.items():
            self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * gk
            self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * gk * gk
            params[k] = params[k] - self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


class EMA:
    """Shadow parameters, ``shadow <- rate * shadow + (1 - rate) * params``."""

    def __init__(self, params: dict, rate: float = EMA_RATE):
        if not 0.0 <= rate < 1.0:
            raise ValueError("EMA rate must lie in [0, 1)")
        self.rate = rate
        self.shadow = {k: v.copy() for k, v in params.items()}

    def update(self, params: dict) -> None:
        for k, v in params.items():
            self.shadow[k] = self.rate * self.shadow[k] + (1.0 - self.rate) * v

    def apply_to(self, net: FiLMMLP) -> FiLMMLP:
        out = net.copy()
        out.params = {k: v.copy() for k, v in self.shadow.items()}
        return out


def train_step(net: FiLMMLP, adam: Adam, ema: EMA, batch: TrainingTuple) -> float:
    loss, grads = dsm_loss_and_grads(net, batch)
    adam.step(net.params, grads)
    ema.update(net.params)
    return loss


@dataclass
class TrainResult:
    net: FiLMMLP
    ema_net: FiLMMLP
    epoch_losses: list = field(default_factory=list)
    step_losses: list = field(default_factory=list)

    @property
    def steps(self) -> int:
        return len(self.step_losses)


def batch_order(n: int, batch_size: int, rng: np.random.Generator):
    """Seeded permutation split into consecutive minibatches."""
    perm = rng.permutation(n)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


def train(dataset, schedule: Schedule, weighting: str = "sigma2", epochs: int = 1, batch_size: int = 128,
          seed: int = 0, *, max_steps: int | None = None, net: FiLMMLP | None = None, lr: float = ADAM_LR,
          ema_rate: float = EMA_RATE, callback=None, **net_kwargs) -> TrainResult:
    """Denoising score matching with Adam and an EMA shadow.

    ``callback(step, net)`` runs after every optimizer step when given.
    Training stops after ``epochs`` passes or ``max_steps`` updates,
    whichever comes first.
    """
    data = np.atleast_2d(np.asarray(dataset, dtype=float))
    if data.shape[0] == 0:
        raise ValueError("empty dataset")
    if batch_size < 1 or epochs < 0:
        raise ValueError("batch_size must be >= 1 and epochs >= 0")
    net_seq, data_seq = np.random.SeedSequence(seed).spawn(2)
    if net is None:
        net = FiLMMLP(data.shape[1], data.shape[1], seed=int(net_seq.generate_state(1)[0]), **net_kwargs)
    rng = np.random.default_rng(data_seq)
    adam, ema = Adam(net.params, lr=lr), EMA(net.params, ema_rate)
    result = TrainResult(net=net, ema_net=net)
    for _ in range(epochs):
        if max_steps is not None and result.steps >= max_steps:
            break
        losses = []
        for idx in batch_order(data.shape[0], batch_size, rng):
            if max_steps is not None and result.steps >= max_steps:
                break
            loss = train_step(net, adam, ema, sample_training_tuple(data[idx], schedule, weighting, rng))
            losses.append(loss)
            result.step_losses.append(loss)
            if callback is not None:
                callback(result.steps, net)
        result.epoch_losses.append(float(np.mean(losses)))
    result.ema_net = ema.apply_to(net)
    return result


def eps_fn_of(net: FiLMMLP):
    """Adapt a network to the samplers' ``(x, sigma) -> eps`` signature."""

    def eps(x, sigma):
        return net(x, sigma)

    return eps
