"""Parameter storage, SGD with momentum and the adaptive loss-weight schedule."""

from __future__ import annotations

import math
from collections import OrderedDict, deque

import numpy as np

from ..errors import ConfigError, NumericError, ShapeError
from .autodiff import Tensor

DEGENERATE_LOSS = 1e-12
LAMBDA_EPS = 1e-9


class ParamStore:
    """Named parameters plus one velocity buffer each and a step counter."""

    def __init__(self):
        self.params = OrderedDict()
        self.velocity = OrderedDict()
        self.step = 0

    def add(self, name: str, value) -> Tensor:
        if name in self.params:
            raise ConfigError(f"duplicate parameter {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)
        self.params[name] = t
        self.velocity[name] = np.zeros_like(t.data)
        return t

    def __getitem__(self, name) -> Tensor:
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def __len__(self):
        return len(self.params)

    def items(self):
        return self.params.items()

    def n_parameters(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def grads(self) -> dict:
        """Current gradients; parameters the loss never touched get exact zeros."""
        return {k: (p.grad if p.grad is not None else np.zeros_like(p.data))
                for k, p in self.params.items()}

    def state(self) -> "OrderedDict[str, np.ndarray]":
        """Flat name -> array mapping (parameters and velocities) for persistence."""
        out = OrderedDict()
        for k, p in self.params.items():
            out[k] = p.data
        for k, v in self.velocity.items():
            out["velocity/" + k] = v
        out["meta/step"] = np.array([float(self.step)])
        return out

    def load_state(self, state):
        for k, v in state.items():
            if k == "meta/step":
                self.step = int(np.asarray(v).ravel()[0])
            elif k.startswith("velocity/"):
                name = k[len("velocity/"):]
                self._check(name, v)
                self.velocity[name] = np.array(v, dtype=np.float64).reshape(self.params[name].shape)
            else:
                self._check(k, v)
                self.params[k].data = np.array(v, dtype=np.float64).reshape(self.params[k].shape)

    def _check(self, name, v):
        if name not in self.params:
            raise ShapeError(f"unknown parameter {name!r}")
        if np.asarray(v).size != self.params[name].data.size:
            raise ShapeError(f"size mismatch for {name!r}")

    def copy(self) -> "ParamStore":
        other = ParamStore()
        for k, p in self.params.items():
            other.add(k, p.data.copy())
            other.velocity[k] = self.velocity[k].copy()
        other.step = self.step
        return other

    def subset(self, prefixes) -> list:
        return [k for k in self.params if k.startswith(tuple(prefixes))]


def sgd_momentum_step(store: ParamStore, grads=None, lr: float = 0.1, momentum: float = 0.9,
                      names=None, weight_decay: float = 0.0):
    """``v <- momentum * v + g``; ``theta <- theta - lr * v``."""
    if grads is None:
        grads = store.grads()
    for name in (names if names is not None else list(store.params)):
        p = store.params[name]
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match {name!r} {p.data.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name!r}")
        if weight_decay:
            g = g + weight_decay * p.data
        v = store.velocity[name]
        v *= momentum
        v += g
        if lr != 0.0:
            p.data = p.data - lr * v
    store.step += 1
    return store


class LossHistory:
    """Recent values of the two objectives, most recent last."""

    def __init__(self, maxlen: int = 3):
        if maxlen < 3:
            raise ConfigError("loss history needs length >= 3")
        self.ce = deque(maxlen=maxlen)
        self.con = deque(maxlen=maxlen)

    def record(self, l_ce: float, l_con: float):
        if not (math.isfinite(l_ce) and math.isfinite(l_con)):
            raise NumericError("non-finite loss recorded")
        self.ce.append(float(l_ce))
        self.con.append(float(l_con))

    def __len__(self):
        return len(self.ce)


def _ratio(values) -> float:
    prev2, prev1 = values[-2], values[-1]
    if abs(prev2) <= DEGENERATE_LOSS:
        return 1.0
    return prev1 / prev2


def lambda_schedule(history: LossHistory, i: int) -> float:
    """Weight of the cross-entropy term at iteration ``i`` (1-based).

    The softmax of the two objectives' latest loss ratios; iterations 1 and 2
    (or a history too short to form ratios) give 0.5.
    """
    if i < 1:
        raise ConfigError("iteration index starts at 1")
    if i <= 2 or len(history) < 2:
        w1 = w2 = 1.0
    else:
        w1, w2 = _ratio(history.ce), _ratio(history.con)
    m = max(w1, w2)
    e1, e2 = math.exp(w1 - m), math.exp(w2 - m)
    # keep the weight strictly inside (0, 1) under extreme ratios
    return min(max(e1 / (e1 + e2), LAMBDA_EPS), 1.0 - LAMBDA_EPS)
