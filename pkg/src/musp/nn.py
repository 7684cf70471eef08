"""Parameter containers: convolution, linear and batch-norm layers."""

from __future__ import annotations

import numpy as np

from . import functional as F
from .autograd import DTYPE, Tensor


class Module:
    """Owns named parameters, non-trainable buffers and child modules."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.children: dict[str, Module] = {}
        self.training = True

    def add_param(self, name: str, data: np.ndarray) -> Tensor:
        t = Tensor(data, requires_grad=True, name=name)
        self.params[name] = t
        return t

    def add_child(self, name: str, module: Module) -> Module:
        self.children[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out = {prefix + k: v for k, v in self.params.items()}
        for cname, child in self.children.items():
            out.update(child.named_parameters(f"{prefix}{cname}."))
        return out

    def named_buffers(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = {prefix + k: v for k, v in self.buffers.items()}
        for cname, child in self.children.items():
            out.update(child.named_buffers(f"{prefix}{cname}."))
        return out

    def state(self) -> dict[str, np.ndarray]:
        """Parameters and buffers as plain arrays, in a stable order."""
        out = {k: v.data for k, v in self.named_parameters().items()}
        out.update(self.named_buffers())
        return out

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        params, buffers = self.named_parameters(), self.named_buffers()
        missing = (set(params) | set(buffers)) - set(arrays)
        if missing:
            raise KeyError(f"state is missing entries: {sorted(missing)}")
        for k, t in params.items():
            if arrays[k].shape != t.shape:
                raise ValueError(f"{k}: shape {arrays[k].shape} != {t.shape}")
            t.data[...] = arrays[k]
        for k, b in buffers.items():
            b[...] = arrays[k]

    def train(self, mode: bool = True) -> Module:
        self.training = mode
        for child in self.children.values():
            child.train(mode)
        return self

    def eval(self) -> Module:
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.named_parameters().values():
            p.grad = None


class Conv3x3(Module):
    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator):
        super().__init__()
        self.kernel = self.add_param("kernel", F.uniform_init(rng, (3, 3, c_in, c_out), 9 * c_in))
        self.bias = self.add_param("bias", np.zeros(c_out, dtype=DTYPE))

    def __call__(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.kernel, self.bias)


class Linear(Module):
    def __init__(self, r_in: int, r_out: int, rng: np.random.Generator, bias: bool = True):
        super().__init__()
        self.weight = self.add_param("weight", F.uniform_init(rng, (r_in, r_out), r_in))
        self.bias = self.add_param("bias", np.zeros(r_out, dtype=DTYPE)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight, self.bias)


class BatchNorm(Module):
    def __init__(self, c: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.momentum, self.eps = momentum, eps
        self.scale = self.add_param("scale", np.ones(c, dtype=DTYPE))
        self.shift = self.add_param("shift", np.zeros(c, dtype=DTYPE))
        self.buffers["running_mean"] = np.zeros(c, dtype=DTYPE)
        self.buffers["running_var"] = np.ones(c, dtype=DTYPE)

    def __call__(self, x: Tensor) -> Tensor:
        return F.batch_norm(
            x,
            self.scale,
            self.shift,
            self.buffers["running_mean"],
            self.buffers["running_var"],
            training=self.training,
            momentum=self.momentum,
            eps=self.eps,
        )
