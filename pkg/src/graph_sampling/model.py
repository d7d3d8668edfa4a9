"""Learnable embedding maps with hand-written backward passes.

Parameters live in one flat float64 vector; the weight matrices are views
into it, so an optimizer step is a single vector update and the gradient
of every parameter comes back as one vector in the same layout.
"""
from __future__ import annotations

import os

import numpy as np

from .errors import ConfigError, ParseError, ValidationError

__all__ = ["EmbeddingModel", "MODEL_KINDS"]

MODEL_KINDS = ("linear", "mlp1")

_MAGIC = "# graph-sampling embedding model v1"


class EmbeddingModel:
    """``linear``: ``x W^T (+ b)``; ``mlp1``: ``relu(x W1^T (+ b1)) W2^T (+ b2)``.

    With ``l2_normalize`` every output row is scaled to unit norm (zero rows
    stay zero).
    """

    def __init__(self, kind, d_in, d_out, hidden=None, bias=False, l2_normalize=False,
                 params=None):
        if kind not in MODEL_KINDS:
            raise ConfigError(f"unknown model kind {kind!r}, expected one of {MODEL_KINDS}")
        if d_in < 1 or d_out < 2:
            raise ConfigError(f"need d_in >= 1 and d_out >= 2, got {d_in}, {d_out}")
        if kind == "mlp1" and (hidden is None or hidden < 1):
            raise ConfigError("mlp1 needs a hidden width >= 1")
        self.kind = kind
        self.d_in = int(d_in)
        self.d_out = int(d_out)
        self.hidden = int(hidden) if kind == "mlp1" else None
        self.bias = bool(bias)
        self.l2_normalize = bool(l2_normalize)

        self._layout = []
        if kind == "linear":
            self._layout.append(("W1", (self.d_out, self.d_in)))
            if self.bias:
                self._layout.append(("b1", (self.d_out,)))
        else:
            self._layout.append(("W1", (self.hidden, self.d_in)))
            if self.bias:
                self._layout.append(("b1", (self.hidden,)))
            self._layout.append(("W2", (self.d_out, self.hidden)))
            if self.bias:
                self._layout.append(("b2", (self.d_out,)))
        size = sum(int(np.prod(s)) for _, s in self._layout)
        if params is None:
            params = np.zeros(size)
        params = np.array(params, dtype=np.float64).reshape(-1)
        if params.size != size:
            raise ValidationError(f"expected {size} parameters, got {params.size}")
        if not np.all(np.isfinite(params)):
            raise ValidationError("non-finite model parameters")
        self.params = params

    @property
    def params(self) -> np.ndarray:
        return self._params

    @params.setter
    def params(self, value):
        self._params = value
        self._views = {}
        offset = 0
        for name, shape in self._layout:
            n = int(np.prod(shape))
            self._views[name] = value[offset:offset + n].reshape(shape)
            offset += n

    def __getattr__(self, name):
        views = self.__dict__.get("_views", {})
        if name in views:
            return views[name]
        raise AttributeError(name)

    @property
    def num_params(self) -> int:
        return self._params.size

    def param_names(self):
        return [name for name, _ in self._layout]

    @classmethod
    def initialize(cls, kind, d_in, d_out, hidden=None, bias=False, l2_normalize=False,
                   seed=0):
        """Gaussian init that keeps squared distances unchanged in expectation."""
        rng = np.random.default_rng(seed)
        model = cls(kind, d_in, d_out, hidden, bias, l2_normalize)
        if kind == "linear":
            model.W1[:] = rng.standard_normal(model.W1.shape) / np.sqrt(d_out)
        else:
            model.W1[:] = rng.standard_normal(model.W1.shape) * np.sqrt(2.0 / hidden)
            model.W2[:] = rng.standard_normal(model.W2.shape) / np.sqrt(d_out)
        return model

    def copy(self) -> "EmbeddingModel":
        return EmbeddingModel(self.kind, self.d_in, self.d_out, self.hidden, self.bias,
                              self.l2_normalize, self._params.copy())

    def same_architecture(self, other) -> bool:
        return (self.kind, self.d_in, self.d_out, self.hidden, self.bias, self.l2_normalize) == (
            other.kind, other.d_in, other.d_out, other.hidden, other.bias, other.l2_normalize)

    # forward / backward

    def _check_input(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.d_in:
            raise ValidationError(f"model expects inputs of width {self.d_in}, got {x.shape}")
        return x

    def forward(self, x) -> np.ndarray:
        return self.forward_with_cache(x)[0]

    def forward_with_cache(self, x):
        x = self._check_input(x)
        cache = {"x": x}
        z = x @ self.W1.T
        if self.bias:
            z += self.b1
        if self.kind == "mlp1":
            h = np.maximum(z, 0.0)
            cache["h"] = h
            z = h @ self.W2.T
            if self.bias:
                z += self.b2
        if self.l2_normalize:
            norms = np.linalg.norm(z, axis=1)
            cache["z_norm"] = norms
            z = z / np.where(norms > 0, norms, 1.0)[:, None]
        cache["out"] = z
        return z, cache

    def backward(self, cache, grad_out) -> np.ndarray:
        """Flat parameter gradient given ``d loss / d output``."""
        g = np.asarray(grad_out, dtype=np.float64)
        if self.l2_normalize:
            y, norms = cache["out"], cache["z_norm"]
            radial = np.einsum("ij,ij->i", y, g)
            safe = np.where(norms > 0, norms, 1.0)
            g = (g - y * radial[:, None]) / safe[:, None]
            g[norms == 0] = 0.0
        grads = {}
        if self.kind == "linear":
            grads["W1"] = g.T @ cache["x"]
            if self.bias:
                grads["b1"] = g.sum(axis=0)
        else:
            h = cache["h"]
            grads["W2"] = g.T @ h
            if self.bias:
                grads["b2"] = g.sum(axis=0)
            gh = (g @ self.W2) * (h > 0)
            grads["W1"] = gh.T @ cache["x"]
            if self.bias:
                grads["b1"] = gh.sum(axis=0)
        return np.concatenate([grads[name].ravel() for name, _ in self._layout])

    # checkpoint

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(_MAGIC + "\n")
            fh.write(f"kind={self.kind} d_in={self.d_in} d_out={self.d_out} "
                     f"hidden={self.hidden or 0} bias={int(self.bias)} "
                     f"l2_normalize={int(self.l2_normalize)}\n")
            for name, shape in self._layout:
                values = " ".join(repr(float(v)) for v in self._views[name].ravel())
                fh.write(f"{name} {'x'.join(map(str, shape))} {values}\n")

    @classmethod
    def load(cls, path) -> "EmbeddingModel":
        path = os.fspath(path)
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.read().splitlines()
        if not lines or lines[0].strip() != _MAGIC:
            raise ParseError("not a model checkpoint", 1, path)
        try:
            meta = dict(item.split("=", 1) for item in lines[1].split())
            model = cls(meta["kind"], int(meta["d_in"]), int(meta["d_out"]),
                        int(meta["hidden"]) or None, meta["bias"] == "1",
                        meta["l2_normalize"] == "1")
        except (IndexError, KeyError, ValueError) as exc:
            raise ParseError(f"bad checkpoint header: {exc}", 2, path) from None
        chunks = []
        for lineno, (name, shape) in enumerate(model._layout, start=3):
            if lineno > len(lines):
                raise ParseError(f"missing tensor {name}", lineno, path)
            parts = lines[lineno - 1].split()
            want = "x".join(map(str, shape))
            if len(parts) < 2 or parts[0] != name or parts[1] != want:
                raise ParseError(f"expected tensor {name} of shape {want}", lineno, path)
            values = np.array([float(v) for v in parts[2:]])
            if values.size != int(np.prod(shape)):
                raise ParseError(f"tensor {name} has {values.size} values", lineno, path)
            chunks.append(values)
        model.params = np.concatenate(chunks)
        return model
