"""Named-tensor store with explicit sharing.

Each parameter name maps to a storage key. Names with the same key resolve
to the very same ndarray, so writes through one name are visible through the
other and gradients accumulate into one buffer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class ParamTensor:
    name: str
    shared_key: str | None
    shape: tuple[int, ...]


class ModelParams:
    def __init__(self):
        self._storage: dict[str, np.ndarray] = {}
        self._alias: dict[str, str] = {}
        self._shared: set[str] = set()

    def add(self, name, array, shared_key=None):
        if name in self._alias:
            raise ValueError(f"duplicate parameter name {name!r}")
        key = shared_key or name
        if key in self._storage:
            if self._storage[key].shape != array.shape:
                raise ValueError(
                    f"shared key {key!r}: shape {array.shape} differs from {self._storage[key].shape}"
                )
        else:
            self._storage[key] = array
        if shared_key is not None:
            self._shared.add(key)
        self._alias[name] = key
        return self._storage[key]

    def __getitem__(self, name):
        return self._storage[self._alias[name]]

    def __contains__(self, name):
        return name in self._alias

    def key_of(self, name):
        return self._alias[name]

    def names(self):
        return list(self._alias)

    def keys(self):
        return list(self._storage)

    def storage(self, key):
        return self._storage[key]

    def aliases(self, key):
        return [n for n, k in self._alias.items() if k == key]

    def shared_key(self, key):
        return key if key in self._shared else None

    def tensors(self):
        return [
            ParamTensor(name, self._alias[name] if self._alias[name] in self._shared else None,
                        self[name].shape)
            for name in self._alias
        ]

    def count(self):
        """Number of distinct learnable scalars (shared storage counted once)."""
        return int(sum(a.size for a in self._storage.values()))

    def astype(self, dtype):
        """Copy with every tensor cast to ``dtype``; sharing structure preserved."""
        out = ModelParams()
        cast = {k: np.array(v, dtype=dtype) for k, v in self._storage.items()}
        out._storage = cast
        out._alias = dict(self._alias)
        out._shared = set(self._shared)
        return out

    def copy(self):
        return self.astype(None)

    def zeros_like(self):
        return {k: np.zeros_like(v) for k, v in self._storage.items()}

    def equal(self, other):
        return (
            self._alias == other._alias
            and all(np.array_equal(self._storage[k], other._storage[k]) for k in self._storage)
            and all(self._storage[k].dtype == other._storage[k].dtype for k in self._storage)
        )


class Grads(dict):
    """Gradient buffers keyed by storage key; ``add`` resolves names and sums."""

    def __init__(self, params: ModelParams):
        super().__init__()
        self.params = params

    def add(self, name, g):
        if g is None:
            return
        key = self.params.key_of(name)
        if key in self:
            self[key] = self[key] + g
        else:
            self[key] = g
