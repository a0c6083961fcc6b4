"""Small float64 MLP toolkit: dense and factorized-noisy layers, a categorical
Q head, hand-written backprop and Adam.
"""
from __future__ import annotations

import json
import math
from collections import OrderedDict

import numpy as np

from .model import UsageError

FORMAT_VERSION = 1


class TrainingError(RuntimeError):
    pass


def _scale_noise(x):
    return np.sign(x) * np.sqrt(np.abs(x))


def relu(x):
    return np.maximum(x, 0.0)


def softmax(logits, axis=-1):
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


class Dense:
    kind = "dense"

    def __init__(self, n_in, n_out, activation="relu", rng=None):
        if activation not in ("relu", "identity"):
            raise ValueError(f"unknown activation {activation!r}")
        rng = rng or np.random.default_rng(0)
        bound = 1.0 / math.sqrt(n_in)
        self.n_in, self.n_out, self.activation = n_in, n_out, activation
        self.params = OrderedDict(
            w=rng.uniform(-bound, bound, size=(n_out, n_in)),
            b=rng.uniform(-bound, bound, size=n_out),
        )
        self.grads = OrderedDict((k, np.zeros_like(v)) for k, v in self.params.items())
        self._cache = None

    def weight(self):
        return self.params["w"], self.params["b"]

    def forward(self, x):
        w, b = self.weight()
        z = x @ w.T + b
        self._cache = (x, z)
        return relu(z) if self.activation == "relu" else z

    def backward(self, grad_out):
        if self._cache is None:
            raise UsageError("backward called before forward")
        x, z = self._cache
        dz = grad_out * (z > 0) if self.activation == "relu" else grad_out
        self._accumulate(dz.T @ x, dz.sum(axis=0))
        w, _ = self.weight()
        return dz @ w

    def _accumulate(self, dw, db):
        self.grads["w"] = dw
        self.grads["b"] = db

    # noise hooks are no-ops on a plain layer
    def resample_noise(self, rng):
        pass

    def zero_noise(self):
        pass


class NoisyDense(Dense):
    """Linear layer whose weights are mu + sigma * (eps_out outer eps_in)."""

    kind = "noisy"

    def __init__(self, n_in, n_out, activation="relu", rng=None, sigma0=0.5):
        if activation not in ("relu", "identity"):
            raise ValueError(f"unknown activation {activation!r}")
        rng = rng or np.random.default_rng(0)
        bound = 1.0 / math.sqrt(n_in)
        self.n_in, self.n_out, self.activation = n_in, n_out, activation
        self.params = OrderedDict(
            mu_w=rng.uniform(-bound, bound, size=(n_out, n_in)),
            sigma_w=np.full((n_out, n_in), sigma0 / math.sqrt(n_in)),
            mu_b=rng.uniform(-bound, bound, size=n_out),
            sigma_b=np.full(n_out, sigma0 / math.sqrt(n_in)),
        )
        self.grads = OrderedDict((k, np.zeros_like(v)) for k, v in self.params.items())
        self.eps_in = np.zeros(n_in)
        self.eps_out = np.zeros(n_out)
        self._cache = None

    def resample_noise(self, rng):
        self.eps_in = _scale_noise(rng.standard_normal(self.n_in))
        self.eps_out = _scale_noise(rng.standard_normal(self.n_out))

    def zero_noise(self):
        self.eps_in = np.zeros(self.n_in)
        self.eps_out = np.zeros(self.n_out)

    def weight(self):
        p = self.params
        eps_w = np.outer(self.eps_out, self.eps_in)
        return p["mu_w"] + p["sigma_w"] * eps_w, p["mu_b"] + p["sigma_b"] * self.eps_out

    def _accumulate(self, dw, db):
        self.grads["mu_w"] = dw
        self.grads["sigma_w"] = dw * np.outer(self.eps_out, self.eps_in)
        self.grads["mu_b"] = db
        self.grads["sigma_b"] = db * self.eps_out


class CategoricalQNet:
    """MLP mapping states to a probability distribution over value atoms for
    every action.  Output shape is (batch, n_actions, n_atoms)."""

    def __init__(self, n_in, n_actions, n_atoms=10, v_min=-10.0, v_max=10.0,
                 hidden=(128, 128), noisy=True, sigma0=0.5, seed=0):
        if not v_min < v_max or n_atoms < 2:
            raise ValueError("need v_min < v_max and at least two atoms")
        rng = np.random.default_rng(seed)
        self.n_in, self.n_actions, self.n_atoms = n_in, n_actions, n_atoms
        self.v_min, self.v_max = float(v_min), float(v_max)
        self.hidden, self.noisy, self.sigma0 = tuple(hidden), noisy, sigma0
        self.support = np.linspace(self.v_min, self.v_max, n_atoms)
        self.delta_z = (self.v_max - self.v_min) / (n_atoms - 1)
        sizes = [n_in, *self.hidden, n_actions * n_atoms]
        self.layers = []
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            act = "identity" if i == len(sizes) - 2 else "relu"
            if noisy:
                self.layers.append(NoisyDense(a, b, act, rng, sigma0))
            else:
                self.layers.append(Dense(a, b, act, rng))
        self._probs = None

    # -- forward / backward ------------------------------------------------
    def logits(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.n_in:
            raise UsageError(f"expected input width {self.n_in}, got shape {x.shape}")
        h = x
        for layer in self.layers:
            h = layer.forward(h)
        return h.reshape(-1, self.n_actions, self.n_atoms)

    def forward(self, x):
        probs = softmax(self.logits(x), axis=-1)
        self._probs = probs
        return probs

    def q_values(self, x):
        return self.forward(x) @ self.support

    def backward(self, grad_logits):
        """Backpropagate d(loss)/d(logits); fills every layer's ``grads``."""
        if self.layers[-1]._cache is None:
            raise UsageError("backward called before forward")
        g = np.asarray(grad_logits, dtype=np.float64).reshape(-1, self.n_actions * self.n_atoms)
        for layer in reversed(self.layers):
            g = layer.backward(g)
        return g

    # -- noise ---------------------------------------------------------------
    def resample_noise(self, rng):
        for layer in self.layers:
            layer.resample_noise(rng)

    def zero_noise(self):
        for layer in self.layers:
            layer.zero_noise()

    # -- parameters ----------------------------------------------------------
    def named_params(self):
        out = OrderedDict()
        for i, layer in enumerate(self.layers):
            for k, v in layer.params.items():
                out[f"layers.{i}.{k}"] = v
        return out

    def named_grads(self):
        out = OrderedDict()
        for i, layer in enumerate(self.layers):
            for k, v in layer.grads.items():
                out[f"layers.{i}.{k}"] = v
        return out

    def n_params(self):
        return sum(v.size for v in self.named_params().values())

    def copy_from(self, other: "CategoricalQNet"):
        for (k, dst), (k2, src) in zip(self.named_params().items(), other.named_params().items()):
            if k != k2 or dst.shape != src.shape:
                raise UsageError(f"parameter mismatch at {k}")
            dst[...] = src

    def config(self):
        return {"n_in": self.n_in, "n_actions": self.n_actions, "n_atoms": self.n_atoms,
                "v_min": self.v_min, "v_max": self.v_max, "hidden": list(self.hidden),
                "noisy": self.noisy, "sigma0": self.sigma0}

    def clone(self) -> "CategoricalQNet":
        other = CategoricalQNet(**self.config())
        other.copy_from(self)
        return other

    def state_dict(self):
        return {
            "format_version": FORMAT_VERSION,
            "config": self.config(),
            "params": {k: {"shape": list(v.shape), "data": v.ravel().tolist()}
                       for k, v in self.named_params().items()},
        }

    @classmethod
    def from_state_dict(cls, state) -> "CategoricalQNet":
        if state.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported parameter format {state.get('format_version')!r}")
        net = cls(**state["config"])
        params = net.named_params()
        if set(params) != set(state["params"]):
            raise ValueError("parameter names do not match the network layout")
        for k, v in params.items():
            rec = state["params"][k]
            arr = np.asarray(rec["data"], dtype=np.float64).reshape(rec["shape"])
            if arr.shape != v.shape:
                raise ValueError(f"shape mismatch for {k}: {arr.shape} vs {v.shape}")
            v[...] = arr
        return net

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.state_dict(), fh)

    @classmethod
    def load(cls, path) -> "CategoricalQNet":
        with open(path) as fh:
            return cls.from_state_dict(json.load(fh))


class Adam:
    def __init__(self, lr=0.01, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: dict = {}
        self.v: dict = {}
        self.t = 0

    def step(self, params, grads, t=None):
        """In-place bias-corrected Adam update of ``params`` (name -> array)."""
        self.t = self.t + 1 if t is None else t
        if self.t < 1:
            raise UsageError("adam step counter must start at 1")
        for g in grads.values():
            if not np.all(np.isfinite(g)):
                raise TrainingError("non-finite gradient")
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, p in params.items():
            g = grads[name]
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            if "sigma" in name:
                np.maximum(p, 0.0, out=p)  # noise scales stay nonnegative
