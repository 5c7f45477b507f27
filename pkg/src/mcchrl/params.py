"""Parameter storage: named float64 arrays with gradients and Adam state."""

from __future__ import annotations

import numpy as np

CHECKPOINT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    """Uniform in [-1/sqrt(fan_in), +1/sqrt(fan_in)]."""
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)


class Param:
    __slots__ = ("value", "grad", "m", "v")

    def __init__(self, value: np.ndarray):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)
        self.m = np.zeros_like(self.value)
        self.v = np.zeros_like(self.value)


class ParamStore:
    """Map from parameter path to (value, grad, Adam moments).

    Single-writer: exactly one training loop mutates a store; snapshots for
    parallel evaluation are made with clone().
    """

    def __init__(self):
        self._params: dict[str, Param] = {}
        self.step_count = 0

    def add(self, path: str, value: np.ndarray) -> Param:
        if path in self._params:
            raise ValueError(f"duplicate parameter path: {path}")
        p = Param(value)
        self._params[path] = p
        return p

    def __getitem__(self, path: str) -> Param:
        return self._params[path]

    def __contains__(self, path: str) -> bool:
        return path in self._params

    def paths(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def zero_grads(self) -> None:
        for p in self._params.values():
            p.grad[...] = 0.0

    def adam_step(self, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                  eps: float = 1e-8, l1: float = 0.0, l2: float = 0.0) -> None:
        """Standard Adam with bias correction; gradients are zeroed afterwards.

        l1/l2 are added to the gradient before the moment update (loss-addition
        regularizers, used by the dataset profile only).
        """
        if not self._params:
            return
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - beta1 ** t
        c2 = 1.0 - beta2 ** t
        for p in self._params.values():
            g = p.grad
            if l1:
                g = g + l1 * np.sign(p.value)
            if l2:
                g = g + l2 * p.value
            p.m[...] = beta1 * p.m + (1.0 - beta1) * g
            p.v[...] = beta2 * p.v + (1.0 - beta2) * (g * g)
            p.value[...] -= lr * (p.m / c1) / (np.sqrt(p.v / c2) + eps)
            p.grad[...] = 0.0

    def soft_update_from(self, src: "ParamStore", tau: float) -> None:
        """self <- tau * src + (1 - tau) * self, element-wise over shared paths.

        Written incrementally (self += tau * (src - self)) so that
        src == self is an exact fixed point in floating point.
        """
        for path, p in self._params.items():
            s = src[path]
            if s.value.shape != p.value.shape:
                raise ValueError(f"shape mismatch in soft update at {path}")
            p.value[...] += tau * (s.value - p.value)

    def copy_values_from(self, src: "ParamStore") -> None:
        for path, p in self._params.items():
            p.value[...] = src[path].value

    def copy_state_from(self, src: "ParamStore") -> None:
        """Full sync of values, gradients, and optimizer state (edge replica)."""
        for path, p in self._params.items():
            s = src[path]
            p.value[...] = s.value
            p.grad[...] = s.grad
            p.m[...] = s.m
            p.v[...] = s.v
        self.step_count = src.step_count

    def clone(self) -> "ParamStore":
        out = ParamStore()
        for path, p in self._params.items():
            q = out.add(path, p.value.copy())
            q.grad[...] = p.grad
            q.m[...] = p.m
            q.v[...] = p.v
        out.step_count = self.step_count
        return out

    def total_size(self) -> int:
        return sum(p.value.size for p in self._params.values())

    def save(self, path: str) -> None:
        arrays = {"__version__": np.array([CHECKPOINT_VERSION])}
        for name, p in self._params.items():
            arrays["p:" + name] = p.value
        np.savez(path, **arrays)

    @staticmethod
    def load(path: str) -> "ParamStore":
        with np.load(path) as data:
            if "__version__" not in data:
                raise CheckpointError("checkpoint missing version field")
            version = int(data["__version__"][0])
            if version != CHECKPOINT_VERSION:
                raise CheckpointError(f"unsupported checkpoint version {version}")
            store = ParamStore()
            for key in data.files:
                if key.startswith("p:"):
                    store.add(key[2:], data[key])
        return store
