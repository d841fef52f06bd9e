from __future__ import annotations

from typing import Iterator, Mapping

import numpy as np

from .tensor import Tensor


class ParamBlock:
    """Named trainable tensors; each carries a gradient slot of the same shape."""

    def __init__(self, tensors: Mapping[str, np.ndarray] | None = None):
        self._params: dict[str, Tensor] = {}
        for name, value in (tensors or {}).items():
            self.add(name, value)

    @classmethod
    def join(cls, **blocks: "ParamBlock") -> "ParamBlock":
        """A view sharing the tensors of several blocks, names prefixed ``block.``."""
        out = cls()
        for prefix, block in blocks.items():
            for name, t in block.items():
                out._params[f"{prefix}.{name}"] = t
        return out

    def add(self, name: str, value) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return list(self._params.items())

    def names(self) -> list[str]:
        return list(self._params)

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        return {k: (np.zeros_like(t.data) if t.grad is None else t.grad)
                for k, t in self._params.items()}

    def values(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self._params.items()}

    def load(self, values: Mapping[str, np.ndarray]) -> None:
        for k, v in values.items():
            v = np.asarray(v, dtype=np.float64)
            if v.shape != self._params[k].shape:
                raise ValueError(f"{k}: shape {v.shape} != {self._params[k].shape}")
            self._params[k].data = v.copy()

    def copy(self) -> "ParamBlock":
        return ParamBlock(self.values())

    def num_values(self) -> int:
        return sum(t.data.size for t in self._params.values())

    def fingerprint(self) -> int:
        """Hash of the current parameter bytes; changes whenever any value does."""
        return hash(tuple((k, t.data.tobytes()) for k, t in sorted(self._params.items())))


class Adam:
    """Adam with bias correction, stepping a ParamBlock in place (descent)."""

    def __init__(self, params: ParamBlock, lr: float = 2e-4,
                 betas: tuple[float, float] = (0.5, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in params.items()}

    def step(self, grads: Mapping[str, np.ndarray] | None = None) -> None:
        grads = self.params.grads() if grads is None else grads
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for name, t in self.params.items():
            g = grads[name]
            self.m[name] = self.b1 * self.m[name] + (1 - self.b1) * g
            self.v[name] = self.b2 * self.v[name] + (1 - self.b2) * g * g
            if self.lr == 0.0:
                continue
            step = self.lr * (self.m[name] / c1) / (np.sqrt(self.v[name] / c2) + self.eps)
            t.data = t.data - step
