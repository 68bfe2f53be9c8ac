"""Small numpy networks with hand-written backward passes.

Only what the trainers need: fully connected nets, a multi-head categorical
policy over a shared body, Adam, and a few loss kernels that return both value
and gradient. Everything runs in float64 so finite-difference checks are
meaningful and training is bit-reproducible on one machine.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .cmdp import fmt_real


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    hidden: tuple[int, ...] = (64, 64)
    output_dim: int = 1
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if min((self.input_dim, self.output_dim) + self.hidden) < 1:
            raise ValueError(f"all widths must be >= 1: {self}")
        if self.activation not in ("relu", "tanh"):
            raise ValueError(f"unknown activation {self.activation!r}")

    def to_record(self) -> dict:
        return {"input_dim": self.input_dim, "hidden": list(self.hidden),
                "output_dim": self.output_dim, "activation": self.activation}


def _act(name, z):
    return np.maximum(z, 0.0) if name == "relu" else np.tanh(z)


def _act_grad(name, z, h):
    return (z > 0).astype(z.dtype) if name == "relu" else 1.0 - h * h


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_in, fan_out))


class Mlp:
    """Dense net; hidden layers use the activation, the last layer is linear
    unless ``activate_output`` is set (used for shared bodies)."""

    def __init__(self, spec: MlpSpec, rng: np.random.Generator | None = None,
                 activate_output: bool = False):
        self.spec = spec
        self.activate_output = activate_output
        dims = (spec.input_dim,) + spec.hidden + (spec.output_dim,)
        self.params: list[np.ndarray] = []
        for i, o in zip(dims[:-1], dims[1:]):
            W = glorot(rng, i, o) if rng is not None else np.zeros((i, o))
            self.params += [W, np.zeros(o)]
        self._cache = None

    @property
    def n_layers(self) -> int:
        return len(self.params) // 2

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.spec.input_dim:
            raise ShapeError(f"expected (N, {self.spec.input_dim}) input, got {x.shape}")
        acts = [x]
        pre = []
        h = x
        for i in range(self.n_layers):
            W, b = self.params[2 * i], self.params[2 * i + 1]
            z = h @ W + b
            pre.append(z)
            last = i == self.n_layers - 1
            h = z if (last and not self.activate_output) else _act(self.spec.activation, z)
            acts.append(h)
        self._cache = (acts, pre)
        return h

    def backward(self, grad_out: np.ndarray) -> tuple[list[np.ndarray], np.ndarray]:
        """Gradients w.r.t. parameters (same order as ``params``) and the input."""
        if self._cache is None:
            raise RuntimeError("backward called before forward")
        acts, pre = self._cache
        g = np.asarray(grad_out, dtype=np.float64)
        if g.shape != acts[-1].shape:
            raise ShapeError(f"upstream gradient {g.shape} does not match output {acts[-1].shape}")
        grads: list[np.ndarray] = [None] * len(self.params)
        for i in range(self.n_layers - 1, -1, -1):
            last = i == self.n_layers - 1
            if not (last and not self.activate_output):
                g = g * _act_grad(self.spec.activation, pre[i], acts[i + 1])
            grads[2 * i] = acts[i].T @ g
            grads[2 * i + 1] = g.sum(axis=0)
            g = g @ self.params[2 * i].T
        return grads, g

    def __call__(self, x):
        return self.forward(x)

    def copy(self) -> "Mlp":
        m = Mlp.__new__(Mlp)
        m.spec, m.activate_output, m._cache = self.spec, self.activate_output, None
        m.params = [p.copy() for p in self.params]
        return m

    def flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params])

    def set_flat(self, vec: np.ndarray) -> None:
        i = 0
        for p in self.params:
            n = p.size
            p[...] = vec[i:i + n].reshape(p.shape)
            i += n
        if i != len(vec):
            raise ShapeError(f"flat vector has {len(vec)} entries, net has {i}")


class MultiHeadPolicyNet:
    """K categorical heads over one shared body.

    ``forward`` returns logits of shape ``(K, N, n_actions)``. The body ends in
    an activation; each head is a single linear layer. Head order is
    ``[pi_r, pi_1 .. pi_{K-2}, pi_c]``.
    """

    def __init__(self, input_dim: int, n_actions: int, K: int, hidden=(64, 64),
                 activation: str = "relu", rng: np.random.Generator | None = None):
        hidden = tuple(hidden)
        self.K = K
        self.n_actions = n_actions
        self.body = Mlp(MlpSpec(input_dim, hidden[:-1], hidden[-1], activation), rng,
                        activate_output=True)
        self.heads = [Mlp(MlpSpec(hidden[-1], (), n_actions, activation), rng) for _ in range(K)]
        self.params = self.body.params + [p for h in self.heads for p in h.params]

    def forward(self, x: np.ndarray) -> np.ndarray:
        f = self.body.forward(x)
        return np.stack([h.forward(f) for h in self.heads])

    def backward(self, grad_logits: np.ndarray) -> list[np.ndarray]:
        """``grad_logits`` has shape ``(K, N, n_actions)``; returns grads aligned with ``params``."""
        head_grads = []
        g_feat = None
        for k, h in enumerate(self.heads):
            gk, gf = h.backward(grad_logits[k])
            head_grads += gk
            g_feat = gf if g_feat is None else g_feat + gf
        body_grads, _ = self.body.backward(g_feat)
        return body_grads + head_grads


class SeparatePolicyNets:
    """K independent single-head policies exposing the multi-head interface."""

    def __init__(self, input_dim: int, n_actions: int, K: int, hidden=(64, 64),
                 activation: str = "relu", rng: np.random.Generator | None = None):
        self.K = K
        self.n_actions = n_actions
        self.nets = [MultiHeadPolicyNet(input_dim, n_actions, 1, hidden, activation, rng)
                     for _ in range(K)]
        self.params = [p for n in self.nets for p in n.params]

    def forward(self, x):
        return np.concatenate([n.forward(x) for n in self.nets])

    def backward(self, grad_logits):
        out = []
        for k, n in enumerate(self.nets):
            out += n.backward(grad_logits[k:k + 1])
        return out


class Adam:
    def __init__(self, params: list[np.ndarray], lr: float = 3e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.step_count = 0

    def step(self, grads: list[np.ndarray]) -> None:
        if len(grads) != len(self.params):
            raise ShapeError(f"{len(grads)} gradients for {len(self.params)} parameters")
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            if g.shape != p.shape:
                raise ShapeError(f"gradient {g.shape} vs parameter {p.shape}")
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def adam_step(state: Adam, grads: list[np.ndarray]) -> list[np.ndarray]:
    state.step(grads)
    return state.params


# ---------------------------------------------------------------------------
# loss kernels: each returns (value, gradient w.r.t. its first argument)


def expectile_loss(u, tau: float):
    """Elementwise ``|tau - 1(u < 0)| * u**2`` and its derivative."""
    if not 0.0 < tau < 1.0:
        raise ValueError(f"expectile tau must lie in (0, 1), got {tau}")
    u = np.asarray(u, dtype=np.float64)
    w = np.where(u < 0, 1.0 - tau, tau)
    return w * u * u, 2.0 * w * u


def td_loss(pred, target):
    """Elementwise ``0.5 * (pred - target)**2`` and d/d pred."""
    diff = np.asarray(pred, dtype=np.float64) - target
    return 0.5 * diff * diff, diff


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax_policy(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_prob(logits: np.ndarray, a) -> np.ndarray:
    logp = log_softmax(np.asarray(logits, dtype=np.float64))
    a = np.asarray(a)
    if logp.ndim == 1:
        return logp[a]
    return np.take_along_axis(logp, a.reshape(-1, 1), axis=-1)[:, 0]


def weighted_nll(logits: np.ndarray, a: np.ndarray, weights: np.ndarray):
    """``-sum_i w_i log pi(a_i | x_i)`` and its gradient w.r.t. logits."""
    p = softmax_policy(logits)
    lp = log_prob(logits, a)
    onehot = np.zeros_like(p)
    onehot[np.arange(len(a)), a] = 1.0
    return -(weights * lp).sum(), weights[:, None] * (p - onehot)


def soft_policy_objective(logits: np.ndarray, q: np.ndarray, alpha: float):
    """``sum_a pi(a) * (q(a) - alpha * log pi(a))`` per row and its gradient w.r.t. logits.

    Discrete counterpart of the reparameterized soft actor objective.
    """
    p = softmax_policy(logits)
    lp = log_softmax(logits)
    g = q - alpha * lp
    value = (p * g).sum(axis=-1)
    grad = p * (g - value[..., None])
    return value, grad


def entropy(logits: np.ndarray) -> np.ndarray:
    p = softmax_policy(logits)
    return -(p * log_softmax(logits)).sum(axis=-1)


# ---------------------------------------------------------------------------
# state encoding


def encode_states(s, t, n_states: int, horizon: int) -> np.ndarray:
    """One-hot state concatenated with ``t / T``."""
    s = np.atleast_1d(np.asarray(s, dtype=np.int64))
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    x = np.zeros((len(s), n_states + 1))
    x[np.arange(len(s)), s] = 1.0
    x[:, -1] = t / horizon
    return x


def grid_encoding(n_states: int, horizon: int, t_max: int | None = None) -> np.ndarray:
    """Encodings for every ``(t, s)`` with ``t < t_max`` in ``t``-major order."""
    t_max = horizon if t_max is None else t_max
    tt, ss = np.meshgrid(np.arange(t_max), np.arange(n_states), indexing="ij")
    return encode_states(ss.ravel(), tt.ravel(), n_states, horizon)


# ---------------------------------------------------------------------------
# checkpoints


def dumps_params(header: dict, params: list[np.ndarray]) -> str:
    flat = np.concatenate([p.ravel() for p in params]) if params else np.zeros(0)
    head = dict(header)
    head["shapes"] = [list(p.shape) for p in params]
    return json.dumps(head, sort_keys=True) + "\n" + " ".join(fmt_real(x) for x in flat) + "\n"


def loads_params(text: str) -> tuple[dict, list[np.ndarray]]:
    first, _, rest = text.partition("\n")
    header = json.loads(first)
    flat = np.array([float(x) for x in rest.split()], dtype=np.float64)
    out, i = [], 0
    for shape in header["shapes"]:
        n = int(np.prod(shape)) if shape else 1
        out.append(flat[i:i + n].reshape(shape))
        i += n
    if i != len(flat):
        raise ShapeError(f"checkpoint holds {len(flat)} values, shapes need {i}")
    return header, out


def load_into(params: list[np.ndarray], values: list[np.ndarray]) -> None:
    if len(params) != len(values):
        raise ShapeError(f"{len(values)} arrays for {len(params)} parameters")
    for p, v in zip(params, values):
        if p.shape != v.shape:
            raise ShapeError(f"checkpoint array {v.shape} vs parameter {p.shape}")
        p[...] = v
