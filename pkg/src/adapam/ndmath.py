"""Numerical core: seeded MLPs, loss heads with reverse-mode gradients, Adam and
Polyak averaging, plus the binary checkpoint format.

Arrays are plain ``numpy.ndarray`` of float64.  Parameter arrays held by a
:class:`ParameterSet` are read-only; every update returns a new set.
"""

from __future__ import annotations

import json
import math
from collections.abc import Mapping
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ArgumentError, ConfigError, NumericError, ShapeError

CKPT_FORMAT = "adapam-ckpt-1"


def _tanh_grad(y):
    return 1.0 - y * y


def _relu(z):
    return np.maximum(z, 0.0)


def _relu_grad(y):
    return (y > 0.0).astype(np.float64)


ACTIVATIONS = {
    "tanh": (np.tanh, _tanh_grad),
    "relu": (_relu, _relu_grad),
}


@dataclass(frozen=True)
class MlpSpec:
    layer_sizes: tuple
    hidden_activation: str = "tanh"
    output_activation: str = "identity"

    def __post_init__(self):
        try:
            sizes = tuple(int(s) for s in self.layer_sizes)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad layer sizes {self.layer_sizes!r}") from exc
        if len(sizes) < 2:
            raise ConfigError("an MLP needs at least an input and an output size")
        if any(s <= 0 for s in sizes):
            raise ConfigError(f"layer sizes must be positive, got {sizes}")
        if self.hidden_activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.hidden_activation!r}")
        if self.output_activation != "identity":
            raise ConfigError("output layer must be linear (logits)")
        object.__setattr__(self, "layer_sizes", sizes)

    @property
    def n_layers(self):
        return len(self.layer_sizes) - 1

    @property
    def in_dim(self):
        return self.layer_sizes[0]

    @property
    def out_dim(self):
        return self.layer_sizes[-1]

    def to_dict(self):
        return {
            "layer_sizes": list(self.layer_sizes),
            "hidden_activation": self.hidden_activation,
            "output_activation": self.output_activation,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["layer_sizes"]), d.get("hidden_activation", "tanh"),
                   d.get("output_activation", "identity"))


def _readonly(a):
    a = np.array(a, dtype=np.float64, copy=True)
    a.flags.writeable = False
    return a


class ParameterSet(Mapping):
    """Ordered, immutable name -> array mapping."""

    def __init__(self, entries, seed=0):
        self._entries = {str(k): _readonly(v) for k, v in entries.items()}
        self.seed = int(seed)

    def __getitem__(self, name):
        return self._entries[name]

    def __iter__(self):
        return iter(self._entries)

    def __len__(self):
        return len(self._entries)

    def __repr__(self):
        shapes = ", ".join(f"{k}:{v.shape}" for k, v in self._entries.items())
        return f"ParameterSet({shapes}; seed={self.seed})"

    @property
    def shapes(self):
        return {k: v.shape for k, v in self._entries.items()}

    @property
    def size(self):
        return sum(v.size for v in self._entries.values())

    def check_compatible(self, other):
        if list(self.keys()) != list(other.keys()):
            raise ShapeError(f"parameter names differ: {list(self)} vs {list(other)}")
        for k in self:
            if self[k].shape != np.shape(other[k]):
                raise ShapeError(f"shape mismatch for {k}: {self[k].shape} vs {np.shape(other[k])}")

    def replace(self, entries):
        """New set with the same names and shapes but new values."""
        new = ParameterSet(entries, self.seed)
        self.check_compatible(new)
        return new

    def map(self, fn):
        return ParameterSet({k: fn(v) for k, v in self._entries.items()}, self.seed)

    def zeros_like(self):
        return self.map(np.zeros_like)

    def flat(self):
        if not self._entries:
            return np.zeros(0)
        return np.concatenate([v.ravel() for v in self._entries.values()])

    def from_flat(self, vec):
        vec = np.asarray(vec, dtype=np.float64)
        if vec.size != self.size:
            raise ShapeError(f"flat vector has {vec.size} entries, expected {self.size}")
        out, i = {}, 0
        for k, v in self._entries.items():
            out[k] = vec[i:i + v.size].reshape(v.shape)
            i += v.size
        return ParameterSet(out, self.seed)

    def allclose(self, other, atol=0.0):
        self.check_compatible(other)
        return all(np.allclose(self[k], other[k], rtol=0.0, atol=atol) for k in self)

    def identical(self, other):
        if list(self.keys()) != list(other.keys()):
            return False
        return all(self[k].shape == other[k].shape and np.array_equal(self[k], other[k])
                   for k in self)


def mlp_init(spec, seed):
    """Glorot-uniform weights, zero biases; fully determined by ``seed``."""
    if not isinstance(spec, MlpSpec):
        spec = MlpSpec(tuple(spec))
    rng = np.random.default_rng(int(seed))
    entries = {}
    for k in range(spec.n_layers):
        fan_in, fan_out = spec.layer_sizes[k], spec.layer_sizes[k + 1]
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        entries[f"W{k}"] = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        entries[f"b{k}"] = np.zeros(fan_out)
    return ParameterSet(entries, seed)


def _as_batch(spec, x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        if x.shape[0] != spec.in_dim:
            raise ShapeError(f"input has {x.shape[0]} coordinates, expected {spec.in_dim}")
        return x[None, :], True
    if x.ndim == 2 and x.shape[1] == spec.in_dim:
        return x, False
    raise ShapeError(f"input shape {x.shape} incompatible with input dim {spec.in_dim}")


def mlp_forward_cache(params, spec, x):
    """Forward pass over a 2-D batch; returns logits and per-layer activations."""
    act, _ = ACTIVATIONS[spec.hidden_activation]
    hs = [x]
    h = x
    last = spec.n_layers - 1
    for k in range(spec.n_layers):
        z = h @ params[f"W{k}"] + params[f"b{k}"]
        h = z if k == last else act(z)
        hs.append(h)
    return h, hs


def mlp_forward(params, spec, x):
    """Logits for one input vector or a batch of row vectors."""
    xb, single = _as_batch(spec, x)
    out, _ = mlp_forward_cache(params, spec, xb)
    return out[0] if single else out


def mlp_backward(params, spec, hs, d_out, want_input=False, want_params=True):
    """Back-propagate ``d_out`` (d loss / d logits, batch-shaped) through the net.

    Returns ``(grads_dict, d_input)``; ``d_input`` is None unless requested and
    ``grads_dict`` is empty when ``want_params`` is false.
    """
    _, act_grad = ACTIVATIONS[spec.hidden_activation]
    grads = {}
    d = d_out
    d_input = None
    for k in reversed(range(spec.n_layers)):
        h_in = hs[k]
        if want_params:
            grads[f"W{k}"] = h_in.T @ d
            grads[f"b{k}"] = d.sum(axis=0)
        if k > 0:
            d = (d @ params[f"W{k}"].T) * act_grad(h_in)
        elif want_input:
            d_input = d @ params["W0"].T
    if not want_params:
        return {}, d_input
    ordered = {}
    for k in range(spec.n_layers):
        ordered[f"W{k}"] = grads[f"W{k}"]
        ordered[f"b{k}"] = grads[f"b{k}"]
    return ordered, d_input


def softmax(logits, axis=-1):
    z = np.asarray(logits, dtype=np.float64)
    if z.size == 0 or z.shape[axis] == 0:
        raise ShapeError("softmax of an empty vector")
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(logits, axis=-1):
    z = np.asarray(logits, dtype=np.float64)
    if z.size == 0 or z.shape[axis] == 0:
        raise ShapeError("log_softmax of an empty vector")
    z = z - z.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    return np.exp(-np.logaddexp(0.0, -z))


def argmax_first(v):
    """Index of the maximum; ties resolve to the lowest index (numpy's rule)."""
    return int(np.argmax(v))


# --------------------------------------------------------------------------
# loss heads


class Head:
    """A scalar loss on top of a network's logits.

    ``evaluate(logits, x)`` takes 2-D logits and the 2-D input batch and
    returns ``(loss, d_logits, d_x_direct)`` where ``d_x_direct`` is the part
    of the input gradient that does not flow through the network (or None).
    """

    name = "head"

    def evaluate(self, logits, x):
        raise NotImplementedError


def _int_targets(targets, batch):
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    if t.shape[0] != batch:
        raise ShapeError(f"{t.shape[0]} targets for a batch of {batch}")
    return t


def _row_weights(weights, batch):
    if weights is None:
        return np.full(batch, 1.0 / batch)
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    if w.shape[0] != batch:
        raise ShapeError(f"{w.shape[0]} weights for a batch of {batch}")
    return w


class CrossEntropy(Head):
    """Softmax cross-entropy to integer targets; batch mean unless weighted."""

    name = "cross_entropy"

    def __init__(self, targets, weights=None):
        self.targets = targets
        self.weights = weights

    def evaluate(self, logits, x):
        b, k = logits.shape
        t = _int_targets(self.targets, b)
        if t.min(initial=0) < 0 or t.max(initial=0) >= k:
            raise ArgumentError("cross-entropy target out of range")
        w = _row_weights(self.weights, b)
        logp = log_softmax(logits)
        rows = np.arange(b)
        loss = -float(np.sum(w * logp[rows, t]))
        d = np.exp(logp)
        d[rows, t] -= 1.0
        return loss, d * w[:, None], None


class MeanSquared(Head):
    """Mean over all logit entries of (logit - target)^2."""

    name = "mse"

    def __init__(self, target):
        self.target = target

    def evaluate(self, logits, x):
        t = np.asarray(self.target, dtype=np.float64)
        if t.ndim == 1 and logits.shape[1] == 1 and t.shape[0] == logits.shape[0]:
            t = t[:, None]
        try:
            t = np.broadcast_to(t, logits.shape)
        except ValueError:
            raise ShapeError(f"MSE target shape {t.shape} vs logits {logits.shape}") from None
        diff = logits - t
        n = logits.size
        return float(np.sum(diff * diff) / n), 2.0 * diff / n, None


class TableSquared(Head):
    """Batch mean of 1/2 (Z[b, index_b] - y_b)^2: the soft Bellman residual."""

    name = "critic_td"

    def __init__(self, indices, targets):
        self.indices = indices
        self.targets = targets

    def evaluate(self, logits, x):
        b, k = logits.shape
        idx = _int_targets(self.indices, b)
        y = np.asarray(self.targets, dtype=np.float64).reshape(-1)
        if y.shape[0] != b:
            raise ShapeError(f"{y.shape[0]} regression targets for a batch of {b}")
        rows = np.arange(b)
        err = logits[rows, idx] - y
        d = np.zeros_like(logits)
        d[rows, idx] = err / b
        return float(0.5 * np.mean(err * err)), d, None


class WeightedLogProb(Head):
    """-mean_b w_b log softmax(Z_b)[a_b] - beta * mean_b H(softmax(Z_b)).

    The REINFORCE surrogate: minimising it ascends the weighted log-likelihood.
    """

    name = "weighted_log_prob"

    def __init__(self, actions, weights, entropy_coef=0.0):
        self.actions = actions
        self.weights = weights
        self.entropy_coef = float(entropy_coef)

    def evaluate(self, logits, x):
        b, k = logits.shape
        a = _int_targets(self.actions, b)
        w = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        if w.shape[0] != b:
            raise ShapeError(f"{w.shape[0]} weights for a batch of {b}")
        logp = log_softmax(logits)
        p = np.exp(logp)
        rows = np.arange(b)
        ent = -np.sum(p * logp, axis=1)
        loss = -float(np.mean(w * logp[rows, a])) - self.entropy_coef * float(np.mean(ent))
        onehot = np.zeros_like(logits)
        onehot[rows, a] = 1.0
        d = -(w[:, None] / b) * (onehot - p)
        d += (self.entropy_coef / b) * p * (logp + ent[:, None])
        return loss, d, None


class SigmoidCrossEntropy(Head):
    """Weighted binary cross-entropy on a single logit column."""

    name = "sigmoid_bce"

    def __init__(self, labels, weights=None):
        self.labels = labels
        self.weights = weights

    def evaluate(self, logits, x):
        b, k = logits.shape
        if k != 1:
            raise ShapeError("binary cross-entropy expects one logit per row")
        y = np.asarray(self.labels, dtype=np.float64).reshape(-1)
        if y.shape[0] != b:
            raise ShapeError(f"{y.shape[0]} labels for a batch of {b}")
        w = _row_weights(self.weights, b)
        z = logits[:, 0]
        # -[y log s(z) + (1-y) log(1-s(z))] == softplus(z) - y z
        loss = float(np.sum(w * (np.logaddexp(0.0, z) - y * z)))
        d = (w * (sigmoid(z) - y))[:, None]
        return loss, d, None


def margin(logits, target, kappa=0.0):
    """max(max_{a != target} Z_a - Z_target + kappa, 0) per row; also returns the runner-up index."""
    z = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    b, k = z.shape
    t = np.asarray(target, dtype=np.int64).reshape(-1)
    rows = np.arange(b)
    others = z.copy()
    others[rows, t] = -np.inf
    runner = np.argmax(others, axis=1)
    f = np.maximum(others[rows, runner] - z[rows, t] + kappa, 0.0)
    return f, runner


class CarliniWagner(Head):
    """Sum over rows of ||x - origin||_2^2 + c * margin(Z(x), target).

    Rows are independent attack problems, so each row's input gradient is the
    gradient of its own objective.
    """

    name = "cw"

    def __init__(self, origin, target, c=1.0, kappa=0.0):
        self.origin = origin
        self.target = target
        self.c = float(c)
        self.kappa = float(kappa)

    def evaluate(self, logits, x):
        b, k = logits.shape
        if k < 2:
            raise ArgumentError("margin objective needs at least two actions")
        t = _int_targets(self.target, b)
        o = np.asarray(self.origin, dtype=np.float64).reshape(x.shape)
        delta = x - o
        f, runner = margin(logits, t, self.kappa)
        rows = np.arange(b)
        d = np.zeros_like(logits)
        active = f > 0.0
        d[rows[active], runner[active]] = self.c
        d[rows[active], t[active]] = -self.c
        loss = float(np.sum(delta * delta) + self.c * np.sum(f))
        return loss, d, 2.0 * delta


HEADS = {
    cls.name: cls
    for cls in (CrossEntropy, MeanSquared, TableSquared, WeightedLogProb,
                SigmoidCrossEntropy, CarliniWagner)
}


def make_head(name, **kwargs):
    try:
        return HEADS[name](**kwargs)
    except KeyError:
        raise ConfigError(f"unregistered loss head {name!r}") from None


@dataclass(frozen=True)
class GradResult:
    loss: float
    d_params: ParameterSet
    d_input: np.ndarray | None


def grad(params, spec, x, head, want_input=False):
    """Loss and gradients of ``head`` composed with the network at ``x``."""
    if type(head) not in HEADS.values():
        raise ConfigError(f"unregistered loss head {type(head).__name__}")
    xb, single = _as_batch(spec, x)
    logits, hs = mlp_forward_cache(params, spec, xb)
    loss, d_logits, d_direct = head.evaluate(logits, xb)
    if not math.isfinite(loss):
        raise NumericError(f"non-finite loss from head {head.name}")
    grads, d_in = mlp_backward(params, spec, hs, d_logits, want_input=want_input)
    if want_input:
        if d_direct is not None:
            d_in = d_in + d_direct
        if single:
            d_in = d_in[0]
    return GradResult(loss, ParameterSet(grads, params.seed), d_in if want_input else None)


def loss_value(params, spec, x, head):
    xb, _ = _as_batch(spec, x)
    logits, _ = mlp_forward_cache(params, spec, xb)
    return head.evaluate(logits, xb)[0]


# --------------------------------------------------------------------------
# optimisation


@dataclass(frozen=True)
class AdamState:
    m: ParameterSet
    v: ParameterSet
    t: int = 0


def adam_init(params):
    return AdamState(params.zeros_like(), params.zeros_like(), 0)


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update; returns ``(params', state')``."""
    params.check_compatible(grads)
    params.check_compatible(state.m)
    t = state.t + 1
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    new_p, new_m, new_v = {}, {}, {}
    for k in params:
        g = np.asarray(grads[k])
        m = beta1 * state.m[k] + (1.0 - beta1) * g
        v = beta2 * state.v[k] + (1.0 - beta2) * g * g
        p = params[k] - lr * (m / c1) / (np.sqrt(v / c2) + eps)
        if not np.all(np.isfinite(p)):
            raise NumericError(f"Adam produced non-finite values in {k}")
        new_p[k], new_m[k], new_v[k] = p, m, v
    return (ParameterSet(new_p, params.seed),
            AdamState(ParameterSet(new_m, params.seed), ParameterSet(new_v, params.seed), t))


def clip_by_global_norm(grads, max_norm):
    if max_norm is None or max_norm <= 0:
        return grads
    norm = math.sqrt(sum(float(np.sum(np.square(g))) for g in grads.values()))
    if norm <= max_norm:
        return grads
    scale = max_norm / norm
    return grads.map(lambda g: g * scale)


def polyak_update(target, online, mu):
    """target' = mu * online + (1 - mu) * target, element-wise."""
    if not 0.0 <= mu <= 1.0:
        raise ConfigError(f"Polyak rate must lie in [0, 1], got {mu}")
    target.check_compatible(online)
    if mu == 0.0:
        return target
    if mu == 1.0:
        return ParameterSet(dict(online.items()), target.seed)
    return ParameterSet({k: mu * online[k] + (1.0 - mu) * target[k] for k in target}, target.seed)


# --------------------------------------------------------------------------
# networks and checkpoints


@dataclass(frozen=True)
class Network:
    """An MLP spec bundled with its parameters."""

    spec: MlpSpec
    params: ParameterSet

    def __call__(self, x):
        return mlp_forward(self.params, self.spec, x)

    def with_params(self, params):
        self.params.check_compatible(params)
        return Network(self.spec, params)

    @classmethod
    def init(cls, layer_sizes, seed, activation="tanh"):
        spec = MlpSpec(tuple(layer_sizes), activation)
        return cls(spec, mlp_init(spec, seed))


def save_checkpoint(path, params, meta=None):
    """Write a JSON manifest line followed by the raw little-endian float64 payload."""
    header = {
        "format": CKPT_FORMAT,
        "seed": params.seed,
        "entries": [{"name": k, "shape": list(v.shape)} for k, v in params.items()],
        "meta": meta or {},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8"))
        fh.write(b"\n")
        for v in params.values():
            fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())
    return path


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`; returns ``(params, meta)``."""
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise ConfigError(f"{path}: missing checkpoint manifest")
    header = json.loads(raw[:nl].decode("utf-8"))
    if header.get("format") != CKPT_FORMAT:
        raise ConfigError(f"{path}: unsupported checkpoint format {header.get('format')!r}")
    payload = raw[nl + 1:]
    entries, off = {}, 0
    for e in header["entries"]:
        shape = tuple(e["shape"])
        n = int(np.prod(shape)) if shape else 1
        nbytes = 8 * n
        if off + nbytes > len(payload):
            raise ShapeError(f"{path}: truncated payload at {e['name']}")
        entries[e["name"]] = np.frombuffer(payload, dtype="<f8", count=n, offset=off).reshape(shape)
        off += nbytes
    if off != len(payload):
        raise ShapeError(f"{path}: {len(payload) - off} trailing payload bytes")
    return ParameterSet(entries, header["seed"]), header.get("meta", {})


def save_network(path, net, meta=None):
    meta = dict(meta or {})
    meta["mlp"] = net.spec.to_dict()
    return save_checkpoint(path, net.params, meta)


def load_network(path):
    params, meta = load_checkpoint(path)
    spec = MlpSpec.from_dict(meta["mlp"])
    net = Network(spec, params)
    params.check_compatible(mlp_init(spec, 0))
    return net, meta
