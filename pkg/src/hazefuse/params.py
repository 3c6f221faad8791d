"""Named parameter collections with deterministic lexicographic ordering."""

from __future__ import annotations

import numpy as np

from .errors import ConfigError
from .tensor import Tensor


class ParamSet:
    """Map from dotted-path name to Tensor, with a per-entry trainable flag.

    Names are unique; all iteration is in lexicographic name order so that
    optimizer state and serialization are reproducible.
    """

    def __init__(self):
        self._tensors = {}
        self._trainable = {}

    def add(self, name, tensor, trainable=True):
        if name in self._tensors:
            raise ConfigError(f"duplicate parameter name {name!r}")
        if not isinstance(tensor, Tensor):
            tensor = Tensor(tensor)
        tensor.requires_grad = True
        self._tensors[name] = tensor
        self._trainable[name] = bool(trainable)
        return tensor

    def __getitem__(self, name):
        return self._tensors[name]

    def __contains__(self, name):
        return name in self._tensors

    def __len__(self):
        return len(self._tensors)

    def names(self):
        return sorted(self._tensors)

    def items(self):
        for name in self.names():
            yield name, self._tensors[name]

    def trainable(self, name):
        return self._trainable[name]

    def set_trainable(self, trainable, prefix=""):
        for name in self._tensors:
            if name.startswith(prefix):
                self._trainable[name] = bool(trainable)

    def view(self, prefix):
        """Plain dict of entries under `prefix`, names stripped."""
        out = {}
        for name, t in self._tensors.items():
            if name.startswith(prefix):
                out[name[len(prefix) :]] = t
        return out

    def merge(self, other, prefix=""):
        for name, t in other.items():
            self.add(prefix + name, t, other.trainable(name))
        return self

    def size(self):
        return sum(t.size for t in self._tensors.values())

    def zero_grad(self):
        for t in self._tensors.values():
            t.grad = None

    def copy_values(self):
        """Snapshot of current values, keyed by name."""
        return {name: t.data.copy() for name, t in self.items()}

    def assign(self, name, arr):
        t = self._tensors[name]
        arr = np.asarray(arr, dtype=np.float64)
        if arr.shape != t.data.shape:
            raise ConfigError(
                f"parameter {name!r}: stored shape {arr.shape} != model shape {t.data.shape}"
            )
        t.data = arr.copy()

    def load_values(self, values):
        missing = set(self._tensors) - set(values)
        unexpected = set(values) - set(self._tensors)
        if missing or unexpected:
            from .errors import ParamMismatchError

            raise ParamMismatchError(missing, unexpected)
        for name, arr in values.items():
            self.assign(name, arr)


def fan_in_uniform(rng, shape, fan_in):
    """Uniform init scaled by 1/sqrt(fan_in)."""
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def conv_weight(rng, out_c, in_c, k):
    return fan_in_uniform(rng, (out_c, in_c, k, k), in_c * k * k)


def dense_weight(rng, in_c, out_c):
    return fan_in_uniform(rng, (in_c, out_c), in_c)
