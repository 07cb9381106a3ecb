"""Targeted observation perturbations crafted on a white-box proxy.

The attack minimises ``||delta||_2^2 + c * margin(Z(o + delta), target)`` with
Adam on ``delta``.  After every step ``delta`` is projected onto the L-inf
ball of radius epsilon and ``o + delta`` is clipped to the observation box, so
every iterate (and therefore every result) respects the budget.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import ndmath as nm
from .errors import ArgumentError, ConfigError


@dataclass(frozen=True)
class PerturbBudget:
    epsilon: float
    low: float = -1.0
    high: float = 1.0

    def __post_init__(self):
        if self.epsilon < 0:
            raise ConfigError("perturbation budget must be non-negative")
        if self.high <= self.low:
            raise ConfigError("empty clip box")
        if self.epsilon > 0.5 * (self.high - self.low):
            raise ConfigError("budget exceeds half the clip-box width")

    def bounds(self, origin):
        """Per-coordinate interval of the feasible set, nudged so rounding never leaves the ball."""
        o = np.asarray(origin, dtype=np.float64)
        lo = np.maximum(o - self.epsilon, self.low)
        hi = np.minimum(o + self.epsilon, self.high)
        lo = np.where(o - lo > self.epsilon, np.nextafter(lo, np.inf), lo)
        hi = np.where(hi - o > self.epsilon, np.nextafter(hi, -np.inf), hi)
        return lo, hi

    def project(self, origin, candidate):
        """Nearest point to ``candidate`` inside both the eps-ball around ``origin`` and the box."""
        lo, hi = self.bounds(origin)
        return np.minimum(np.maximum(candidate, lo), hi)


@dataclass(frozen=True)
class CwConfig:
    c: float = 5.0
    max_iters: int = 500
    step_size: float = 0.05
    kappa: float = 0.0
    early_stop: bool = True
    restart_patience: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.c <= 0 or self.step_size <= 0 or self.max_iters < 1:
            raise ConfigError("c, step_size and max_iters must be positive")
        if self.kappa < 0:
            raise ConfigError("kappa must be non-negative")
        if self.restart_patience < 0:
            raise ConfigError("restart_patience must be non-negative")


@dataclass(frozen=True)
class PerturbResult:
    perturbed: np.ndarray
    success_on_proxy: bool
    l2: float
    linf: float
    iters_used: int
    margin: float
    trace: list = field(default=None, repr=False, compare=False)


def margin_f(logits, target, kappa=0.0):
    """``max(max_{a != target} Z_a - Z_target + kappa, 0)`` for one logit vector."""
    z = np.asarray(logits, dtype=np.float64).reshape(-1)
    if z.shape[0] < 2:
        raise ArgumentError("margin needs at least two actions")
    if not 0 <= int(target) < z.shape[0]:
        raise ArgumentError(f"target {target} out of range")
    others = np.delete(z, int(target))
    return float(max(others.max() - z[int(target)] + kappa, 0.0))


def _already_target(logits, target):
    return nm.argmax_first(logits) == target


def cw_attack(proxy, origin, target, budget, config=CwConfig(), trace=False):
    """Craft an observation within ``budget`` that makes ``proxy`` prefer ``target``.

    ``proxy`` is a :class:`~adapam.ndmath.Network` producing action logits.
    Failure is reported through ``success_on_proxy``; the returned iterate is
    the one with the smallest margin, ties broken by smaller L2 distance.
    If the proxy already picks ``target`` at ``origin`` the origin is returned
    unchanged, whatever ``kappa``.  With ``restart_patience > 0`` the search restarts from a random point of
    the feasible set whenever the best margin has not improved for that many
    iterations; ``max_iters`` bounds the total over all restarts.
    """
    o = np.asarray(origin, dtype=np.float64)
    target = int(target)
    if target < 0 or target >= proxy.spec.out_dim:
        raise ArgumentError(f"target action {target} out of range")
    n_layers = proxy.spec.n_layers
    Ws = [proxy.params[f"W{k}"] for k in range(n_layers)]
    WTs = [w.T.copy() for w in Ws]
    bs = [proxy.params[f"b{k}"] for k in range(n_layers)]
    act, act_grad = nm.ACTIVATIONS[proxy.spec.hidden_activation]
    c, kappa = config.c, config.kappa
    lo, hi = budget.bounds(o)
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    m = np.zeros_like(o)
    v = np.zeros_like(o)
    best_x, best_key = o, None
    log = [] if trace else None
    steps = 0
    x = o
    rng = None
    t = 0
    stall = 0
    for it in range(config.max_iters + 1):
        # single-row forward pass, kept inline: this loop dominates evaluation time
        hs = [x]
        h = x
        for k in range(n_layers):
            z = h @ Ws[k] + bs[k]
            h = z if k == n_layers - 1 else act(z)
            hs.append(h)
        zt = h[target]
        h[target] = -np.inf
        runner = int(np.argmax(h))
        f = max(float(h[runner] - zt) + kappa, 0.0)
        h[target] = zt
        delta = x - o
        l2 = float(np.sqrt(delta @ delta))
        key = (f, l2)
        stall = 0 if best_key is None or f < best_key[0] else stall + 1
        if best_key is None or key < best_key:
            best_x, best_key = x, key
        if log is not None:
            log.append({"iter": it, "f": f, "l2": l2, "linf": float(np.abs(delta).max(initial=0.0)),
                        "objective": l2 * l2 + c * f, "x": x})
        if (config.early_stop and f <= 0.0) or it == config.max_iters or budget.epsilon == 0.0:
            break
        if it == 0 and _already_target(h, target):
            # the clean observation already yields the target; kappa only shapes moving iterates
            break
        if config.restart_patience and stall >= config.restart_patience:
            if rng is None:
                rng = np.random.default_rng([config.seed, target])
            x = budget.project(o, o + rng.uniform(-budget.epsilon, budget.epsilon, o.shape))
            m[:] = 0.0
            v[:] = 0.0
            t = 0
            stall = 0
            steps += 1
            continue
        g = 2.0 * delta
        if f > 0.0:
            d = np.zeros(h.shape[0])
            d[runner] = c
            d[target] = -c
            for k in range(n_layers - 1, 0, -1):
                d = (d @ WTs[k]) * act_grad(hs[k])
            g = g + d @ WTs[0]
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        t += 1
        step = config.step_size * (m / (1 - beta1 ** t)) / (np.sqrt(v / (1 - beta2 ** t)) + eps)
        x = np.minimum(np.maximum(x - step, lo), hi)
        steps += 1
    delta = best_x - o
    z = nm.mlp_forward(proxy.params, proxy.spec, best_x)
    return PerturbResult(
        perturbed=best_x,
        success_on_proxy=nm.argmax_first(z) == target,
        l2=float(np.sqrt(delta @ delta)),
        linf=float(np.abs(delta).max(initial=0.0)),
        iters_used=steps,
        margin=best_key[0],
        trace=log,
    )


def verify(policy_query, perturbed, target):
    """True iff the queried policy picks ``target`` on ``perturbed``.

    ``policy_query`` maps an observation vector to an action index, e.g. a
    bound ``victim.act`` or :func:`proxy_query`.
    """
    return int(policy_query(np.asarray(perturbed, dtype=np.float64))) == int(target)


def proxy_query(proxy):
    return lambda obs: nm.argmax_first(proxy(obs))


def write_trace_csv(path, trace):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iter", "f", "l2", "linf"])
        for row in trace:
            w.writerow([row["iter"], repr(row["f"]), repr(row["l2"]), repr(row["linf"])])
