"""Small numpy function-approximation stack.

Fully-connected ReLU networks with hand-written backprop, an Adam
optimizer, EMA target tracking, running moments and a squashed-mean
Gaussian policy head. Each network keeps its parameters in one flat
vector (``flat``) with shaped views on top (``params``). Optimizers and
target trackers update the flat vector in place.
"""
from __future__ import annotations

import copy
import math
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

LOG_2PI = math.log(2.0 * math.pi)


def _check_finite(arrays, what):
    # a single reduction per array; inf - inf or nan anywhere propagates to the total
    if not math.isfinite(sum(float(np.sum(a)) for a in arrays)):
        raise FloatingPointError(f"non-finite {what}")


def _flat_views(shapes, dtype):
    """One contiguous parameter vector plus a list of shaped views into it."""
    sizes = [int(np.prod(s)) for s in shapes]
    flat = np.zeros(sum(sizes), dtype=dtype)
    views, start = [], 0
    for shape, size in zip(shapes, sizes):
        views.append(flat[start:start + size].reshape(shape))
        start += size
    return flat, views


def flatten(grads) -> np.ndarray:
    return np.concatenate([np.ravel(g) for g in grads])


class Mlp:
    """ReLU multilayer perceptron with a linear output layer.

    ``sizes`` lists every layer width including input and output, e.g.
    ``[2, 64, 64, 1]``. Initialization is uniform in +-1/sqrt(fan_in) for
    weights and biases.
    """

    def __init__(self, sizes: Sequence[int], rng: np.random.Generator | None = None,
                 dtype=np.float32):
        if len(sizes) < 2 or any(int(s) <= 0 for s in sizes):
            raise ValueError(f"invalid layer sizes {sizes!r}")
        rng = np.random.default_rng() if rng is None else rng
        self.sizes = [int(s) for s in sizes]
        self.dtype = np.dtype(dtype)
        shapes = []
        for fan_in, fan_out in zip(self.sizes[:-1], self.sizes[1:]):
            shapes += [(fan_in, fan_out), (fan_out,)]
        self.flat, self.params = _flat_views(shapes, self.dtype)
        for i, (fan_in, fan_out) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            bound = 1.0 / math.sqrt(fan_in)
            self.params[2 * i][...] = rng.uniform(-bound, bound, (fan_in, fan_out))
            self.params[2 * i + 1][...] = rng.uniform(-bound, bound, fan_out)

    def __deepcopy__(self, memo):
        out = copy.copy(self)
        out.flat, out.params = _flat_views([p.shape for p in self.params], self.dtype)
        out.flat[...] = self.flat
        return out

    @property
    def n_layers(self) -> int:
        return len(self.sizes) - 1

    @property
    def in_dim(self) -> int:
        return self.sizes[0]

    @property
    def out_dim(self) -> int:
        return self.sizes[-1]

    def _check_input(self, x):
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ValueError(f"expected input of shape (n, {self.in_dim}), got {x.shape}")
        return x

    def forward(self, x) -> np.ndarray:
        h = self._check_input(x)
        last = self.n_layers - 1
        for i in range(self.n_layers):
            h = h @ self.params[2 * i] + self.params[2 * i + 1]
            if i < last:
                np.maximum(h, 0, out=h)
        return h

    __call__ = forward

    def forward_cache(self, x):
        """Forward pass that keeps the layer inputs for :meth:`backward`."""
        h = self._check_input(x)
        inputs = []
        last = self.n_layers - 1
        for i in range(self.n_layers):
            inputs.append(h)
            h = h @ self.params[2 * i] + self.params[2 * i + 1]
            if i < last:
                np.maximum(h, 0, out=h)
        return h, inputs

    def backward(self, cache, grad_out, input_grad: bool = False):
        """Gradients of a scalar loss given ``grad_out`` = dloss/doutput.

        Returns the parameter gradients in ``params`` order, plus the
        gradient with respect to the input when ``input_grad`` is set.
        """
        g = np.asarray(grad_out, dtype=self.dtype)
        grads: list[np.ndarray] = [None] * len(self.params)  # type: ignore[list-item]
        for i in range(self.n_layers - 1, -1, -1):
            h_in = cache[i]
            grads[2 * i] = h_in.T @ g
            grads[2 * i + 1] = g.sum(axis=0)
            if i > 0 or input_grad:
                g = g @ self.params[2 * i].T
                if i > 0:
                    # ReLU mask: stored input of layer i is the activation of layer i-1
                    g *= h_in > 0
        if input_grad:
            return grads, g
        return grads

    def copy(self) -> "Mlp":
        return copy.deepcopy(self)

    def named_params(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = {}
        for i in range(self.n_layers):
            out[f"{prefix}layer{i}.weight"] = self.params[2 * i]
            out[f"{prefix}layer{i}.bias"] = self.params[2 * i + 1]
        return out


def grad(net: Mlp, loss_fn: Callable[[np.ndarray], tuple[float, np.ndarray]], batch):
    """Loss value and parameter gradients of ``loss_fn(net(batch))``.

    ``loss_fn`` maps the network output to ``(loss, dloss/doutput)``.
    """
    out, cache = net.forward_cache(batch)
    loss, dout = loss_fn(out)
    if not np.isfinite(loss):
        raise FloatingPointError("non-finite loss")
    return float(loss), net.backward(cache, dout)


def mse_loss(target):
    """Loss function for :func:`grad`: mean squared error against ``target``."""
    target = np.asarray(target)

    def fn(out):
        diff = out - target.reshape(out.shape)
        return float(np.mean(diff ** 2)), (2.0 / diff.size) * diff
    return fn


class Adam:
    """Adam optimizer updating parameters in place.

    ``params`` is a network (anything with a ``flat`` parameter vector), a
    single array, or a list of arrays. Gradients are given in the matching
    form: a flat vector, or a list in ``params`` order.
    """

    def __init__(self, params, lr: float = 3e-4,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        if lr <= 0:
            raise ValueError("lr must be positive")
        self.params = _as_list(params)
        self.lr = float(lr)
        self.beta1, self.beta2 = betas
        self.eps = float(eps)
        self.m = [np.zeros_like(p) for p in self.params]
        self.v = [np.zeros_like(p) for p in self.params]
        self.t = 0

    def step(self, grads) -> None:
        if isinstance(grads, np.ndarray):
            grads = [grads]
        if len(grads) != len(self.params):
            if len(self.params) == 1:
                grads = [flatten(grads)]
            else:
                raise ValueError(f"expected {len(self.params)} gradients, got {len(grads)}")
        for p, g in zip(self.params, grads):
            if p.shape != np.shape(g):
                raise ValueError(f"gradient shape {np.shape(g)} does not match parameter {p.shape}")
        _check_finite(grads, "gradients")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        step_size = self.lr * math.sqrt(c2) / c1
        eps = self.eps * math.sqrt(c2)
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p -= step_size * m / (np.sqrt(v) + eps)
        _check_finite(self.params, "parameters after update")

    def state_dict(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = {f"{prefix}t": np.array([self.t], dtype=np.float64)}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            out[f"{prefix}m{i}"] = m
            out[f"{prefix}v{i}"] = v
        return out


def _as_list(params) -> list[np.ndarray]:
    if isinstance(params, np.ndarray):
        return [params]
    if isinstance(params, (list, tuple)):
        return list(params)
    return [params.flat]


def ema_update(target, online, rate: float) -> None:
    """target <- (1 - rate) * target + rate * online, in place.

    Accepts networks (anything with a ``flat`` vector), arrays, or lists of arrays.
    """
    tp, op = _as_list(target), _as_list(online)
    if len(tp) != len(op) or any(a.shape != b.shape for a, b in zip(tp, op)):
        raise ValueError("EMA requires identical architectures")
    if rate == 1.0:
        for a, b in zip(tp, op):
            a[...] = b
        return
    if rate == 0.0:
        return
    for a, b in zip(tp, op):
        a *= 1.0 - rate
        a += rate * b


class RunningMoments:
    """Streaming mean/variance (Chan et al. parallel merge) in float64."""

    def __init__(self, shape=(), eps_std: float = 1e-8):
        self.shape = tuple(np.atleast_1d(shape)) if shape != () else ()
        self.count = 0
        self.mean = np.zeros(self.shape)
        self.m2 = np.zeros(self.shape)
        self.eps_std = eps_std

    def update(self, x) -> None:
        x = np.asarray(x, dtype=np.float64).reshape((-1,) + self.shape)
        n = x.shape[0]
        if n == 0:
            return
        self._merge(n, x.mean(axis=0), ((x - x.mean(axis=0)) ** 2).sum(axis=0))

    def _merge(self, n, mean, m2):
        total = self.count + n
        delta = mean - self.mean
        self.mean = self.mean + delta * (n / total)
        self.m2 = self.m2 + m2 + delta ** 2 * (self.count * n / total)
        self.count = total

    def merge(self, other: "RunningMoments") -> "RunningMoments":
        out = copy.deepcopy(self)
        if other.count:
            out._merge(other.count, other.mean, other.m2)
        return out

    @property
    def var(self) -> np.ndarray:
        if self.count == 0:
            return np.ones(self.shape)
        return np.maximum(self.m2 / self.count, 0.0)

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(self.var)

    def normalize(self, x) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean) / np.maximum(self.std, self.eps_std)

    def scale(self, x) -> np.ndarray:
        """Divide by the running std without centering."""
        return np.asarray(x, dtype=np.float64) / np.maximum(self.std, self.eps_std)

    def state_dict(self, prefix: str = "") -> dict[str, np.ndarray]:
        return {f"{prefix}count": np.array([self.count], dtype=np.float64),
                f"{prefix}mean": np.atleast_1d(self.mean), f"{prefix}m2": np.atleast_1d(self.m2)}


class GaussianPolicy:
    """Gaussian policy with tanh-squashed mean and state-independent log-std.

    Actions live in the normalized box [-1, 1]^action_dim. The mean is
    ``tanh(mlp(s))``; samples are clipped to the box. The log-std is a free
    parameter vector clamped to ``log_std_range`` (gradient is zero outside).
    """

    def __init__(self, state_dim: int, action_dim: int, hidden: Sequence[int] = (256, 256),
                 rng: np.random.Generator | None = None, log_std_range=(-5.0, 2.0),
                 init_log_std: float = 0.0, dtype=np.float32):
        mlp = Mlp([state_dim, *hidden, action_dim], rng=rng, dtype=dtype)
        self.log_std_range = tuple(float(v) for v in log_std_range)
        self.action_dim = action_dim
        self._adopt(mlp, np.full(action_dim, init_log_std))

    def _adopt(self, mlp: Mlp, log_std):
        """Re-home the MLP parameters and log-std in one flat vector."""
        shapes = [p.shape for p in mlp.params] + [(self.action_dim,)]
        self.flat, self.params = _flat_views(shapes, mlp.dtype)
        self.flat[: mlp.flat.size] = mlp.flat
        self.params[-1][...] = log_std
        mlp.flat = self.flat[: mlp.flat.size]
        mlp.params = self.params[:-1]
        self.mlp = mlp

    @property
    def log_std(self) -> np.ndarray:
        return self.params[-1]

    def __deepcopy__(self, memo):
        out = copy.copy(self)
        out._adopt(copy.deepcopy(self.mlp), self.log_std)
        return out

    @property
    def clamped_log_std(self) -> np.ndarray:
        return np.clip(self.log_std, *self.log_std_range)

    def mean(self, states) -> np.ndarray:
        return np.tanh(self.mlp(states))

    def sample(self, states, rng: np.random.Generator) -> np.ndarray:
        mu = self.mean(states)
        noise = rng.standard_normal(mu.shape)
        return np.clip(mu + np.exp(self.clamped_log_std) * noise, -1.0, 1.0)

    def log_prob(self, states, actions) -> np.ndarray:
        mu = self.mean(states)
        log_std = self.clamped_log_std
        z = (np.asarray(actions, dtype=mu.dtype) - mu) / np.exp(log_std)
        return np.sum(-0.5 * z ** 2 - log_std - 0.5 * LOG_2PI, axis=1)

    def weighted_nll_grad(self, states, actions, weights):
        """Loss ``-mean(w * log pi(a|s))`` and its gradients in ``params`` order."""
        pre, cache = self.mlp.forward_cache(states)
        mu = np.tanh(pre)
        log_std = self.clamped_log_std
        inv_std = np.exp(-log_std)
        a = np.asarray(actions, dtype=mu.dtype)
        z = (a - mu) * inv_std
        logp = np.sum(-0.5 * z ** 2 - log_std - 0.5 * LOG_2PI, axis=1)
        w = np.asarray(weights, dtype=mu.dtype).reshape(-1)
        n = len(w)
        loss = -float(np.mean(w * logp))
        # d(-w logp / n)/dmu = -w (a - mu)/sigma^2 / n
        dmu = -(w[:, None] * z * inv_std) / n
        dpre = dmu * (1.0 - mu ** 2)
        grads = self.mlp.backward(cache, dpre)
        dlog_std = -np.sum(w[:, None] * (z ** 2 - 1.0), axis=0) / n
        lo, hi = self.log_std_range
        dlog_std = np.where((self.log_std >= lo) & (self.log_std <= hi), dlog_std, 0.0)
        if not np.isfinite(loss):
            raise FloatingPointError("non-finite policy loss")
        return loss, grads + [dlog_std.astype(self.log_std.dtype)]

    def mean_backward(self, states, grad_mean):
        """Gradients of a loss through the deterministic action tanh(mlp(s))."""
        pre, cache = self.mlp.forward_cache(states)
        mu = np.tanh(pre)
        grads = self.mlp.backward(cache, grad_mean * (1.0 - mu ** 2))
        return grads + [np.zeros_like(self.log_std)]

    def copy(self) -> "GaussianPolicy":
        return copy.deepcopy(self)

    def named_params(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = self.mlp.named_params(prefix)
        out[f"{prefix}log_std"] = self.log_std
        return out


# checkpoints: text manifest, then little-endian float32 payload

_MAGIC = "ooorl-checkpoint 1"


def save_checkpoint(path, tensors: dict[str, np.ndarray]) -> None:
    lines = [_MAGIC]
    blobs = []
    offset = 0
    for name, arr in tensors.items():
        if any(c.isspace() for c in name):
            raise ValueError(f"tensor name {name!r} contains whitespace")
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        shape = ",".join(str(s) for s in np.shape(arr)) or "-"
        lines.append(f"{name} {shape} {offset}")
        blobs.append(data)
        offset += len(data)
    lines.append("end")
    with open(path, "wb") as f:
        f.write(("\n".join(lines) + "\n").encode("ascii"))
        for b in blobs:
            f.write(b)


def load_checkpoint(path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    end = raw.find(b"\nend\n")
    if not raw.startswith(_MAGIC.encode()) or end < 0:
        raise ValueError(f"{path}: not a checkpoint file")
    header = raw[:end].decode("ascii").splitlines()[1:]
    payload = raw[end + len(b"\nend\n"):]
    out = {}
    for line in header:
        name, shape, offset = line.split()
        shape = () if shape == "-" else tuple(int(s) for s in shape.split(","))
        count = int(np.prod(shape)) if shape else 1
        start = int(offset)
        out[name] = np.frombuffer(payload, dtype="<f4", count=count, offset=start).reshape(shape).copy()
    return out
