"""Layer containers and the composite blocks of the YOLOv8 backbone and neck.

Every module exposes ``cost(shape) -> (out_shape, flops)``: an analytic FLOP
count for one forward pass at input ``shape``. FLOPs follow the 2*MACs
convention over weighted layers only (convolutions, linear maps, per-channel
affine "FC" maps); normalization, activations, pooling, concatenation and
parameter-free elementwise arithmetic count zero.
"""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Parameter(Tensor):
    """A leaf tensor that always requires grad."""

    __slots__ = ()

    def __init__(self, data, dtype=np.float32):
        super().__init__(data, requires_grad=True, dtype=dtype)


def _uniform(rng: np.random.Generator, bound: float, shape) -> np.ndarray:
    return rng.uniform(-bound, bound, size=shape)


class Module:
    training = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def cost(self, shape: tuple) -> tuple:
        raise NotImplementedError(f"{type(self).__name__} has no cost model")

    # -- traversal ---------------------------------------------------------
    def _children(self) -> Iterator[tuple]:
        for name, v in vars(self).items():
            if isinstance(v, (Module, Parameter)):
                yield name, v
            elif isinstance(v, (list, tuple)) and v and all(isinstance(m, Module) for m in v):
                for i, m in enumerate(v):
                    yield f"{name}.{i}", m

    def named_parameters(self, prefix: str = "") -> Iterator[tuple]:
        for name, v in self._children():
            full = prefix + name
            if isinstance(v, Parameter):
                yield full, v
            else:
                yield from v.named_parameters(full + ".")

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple]:
        for name, arr in getattr(self, "_buffers", {}).items():
            yield prefix + name, arr
        for name, v in self._children():
            if isinstance(v, Module):
                yield from v.named_buffers(prefix + name + ".")

    def named_modules(self, prefix: str = "") -> Iterator[tuple]:
        yield prefix.rstrip("."), self
        for name, v in self._children():
            if isinstance(v, Module):
                yield from v.named_modules(prefix + name + ".")

    def num_params(self) -> int:
        return sum(p.size for p in self.parameters())

    # -- state -------------------------------------------------------------
    def train(self, mode: bool = True) -> "Module":
        for _, m in self.named_modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def to(self, dtype) -> "Module":
        """Cast parameters and buffers in place (float32 training, float64 checks)."""
        dtype = np.dtype(dtype)
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        for _, m in self.named_modules():
            bufs = getattr(m, "_buffers", None)
            if bufs:
                for k in bufs:
                    bufs[k] = bufs[k].astype(dtype)
        return self

    def state_dict(self) -> dict:
        out = {name: p.data.copy() for name, p in self.named_parameters()}
        out.update({name: b.copy() for name, b in self.named_buffers()})
        return out

    def load_state_dict(self, state: dict) -> None:
        params = dict(self.named_parameters())
        bufs = {}
        for mname, m in self.named_modules():
            for bname in getattr(m, "_buffers", {}):
                bufs[f"{mname}.{bname}" if mname else bname] = (m, bname)
        missing = (set(params) | set(bufs)) - set(state)
        unexpected = set(state) - set(params) - set(bufs)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)[:5]} unexpected={sorted(unexpected)[:5]}")
        for name, p in params.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"shape mismatch for {name}: checkpoint {arr.shape} vs model {p.shape}")
            p.data = arr.astype(p.dtype).copy()
        for name, (m, bname) in bufs.items():
            arr = np.asarray(state[name])
            if arr.shape != m._buffers[bname].shape:
                raise ValueError(f"shape mismatch for {name}: checkpoint {arr.shape} vs model {m._buffers[bname].shape}")
            m._buffers[bname] = arr.astype(m._buffers[bname].dtype).copy()


class Sequential(Module):
    def __init__(self, *layers: Module):
        self.layers = list(layers)

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x

    def cost(self, shape):
        total = 0
        for layer in self.layers:
            shape, f = layer.cost(shape)
            total += f
        return shape, total


# -- primitive layers --------------------------------------------------------
class Conv2d(Module):
    def __init__(self, cin: int, cout: int, k: int, s: int = 1, p: int | None = None, bias: bool = True, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cin, self.cout, self.k, self.s = cin, cout, k, s
        self.p = k // 2 if p is None else p
        bound = 1.0 / np.sqrt(cin * k * k)
        self.weight = Parameter(_uniform(rng, bound, (cout, cin, k, k)))
        self.bias = Parameter(_uniform(rng, bound, (cout,))) if bias else None

    def forward(self, x):
        return T.conv2d(x, self.weight, self.bias, self.s, self.p)

    def cost(self, shape):
        n, c, h, w = shape
        if c != self.cin:
            raise ValueError(f"Conv2d expects {self.cin} channels, got {c}")
        oh, ow = T.conv_out_size(h, self.k, self.s, self.p), T.conv_out_size(w, self.k, self.s, self.p)
        flops = 2 * self.k * self.k * self.cin * self.cout * oh * ow * n
        if self.bias is not None:
            flops += self.cout * oh * ow * n
        return (n, self.cout, oh, ow), flops


class BatchNorm2d(Module):
    def __init__(self, c: int, momentum: float = 0.03, eps: float = 1e-5):
        self.c, self.momentum, self.eps = c, momentum, eps
        self.weight = Parameter(np.ones(c))
        self.bias = Parameter(np.zeros(c))
        self._buffers = {"running_mean": np.zeros(c, np.float32), "running_var": np.ones(c, np.float32)}

    def forward(self, x):
        b = self._buffers
        return T.batchnorm2d(
            x, self.weight, self.bias, b["running_mean"], b["running_var"], self.training, self.momentum, self.eps
        )

    def cost(self, shape):
        return shape, 0


class GroupNorm(Module):
    def __init__(self, groups: int, c: int, eps: float = 1e-5):
        if c % groups:
            raise ValueError(f"GroupNorm: {groups} groups do not divide {c} channels")
        self.groups, self.c, self.eps = groups, c, eps
        self.weight = Parameter(np.ones(c))
        self.bias = Parameter(np.zeros(c))

    def forward(self, x):
        return T.groupnorm(x, self.groups, self.weight, self.bias, self.eps)

    def cost(self, shape):
        return shape, 0


class Linear(Module):
    def __init__(self, fin: int, fout: int, bias: bool = True, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.fin, self.fout = fin, fout
        bound = 1.0 / np.sqrt(fin)
        self.weight = Parameter(_uniform(rng, bound, (fout, fin)))
        self.bias = Parameter(_uniform(rng, bound, (fout,))) if bias else None

    def forward(self, x):
        return T.linear(x, self.weight, self.bias)

    def cost(self, shape):
        rows = int(np.prod(shape[:-1]))
        flops = 2 * self.fin * self.fout * rows + (self.fout * rows if self.bias is not None else 0)
        return tuple(shape[:-1]) + (self.fout,), flops


class Upsample(Module):
    def forward(self, x):
        return T.upsample_nearest2x(x)

    def cost(self, shape):
        n, c, h, w = shape
        return (n, c, 2 * h, 2 * w), 0


# -- composite blocks --------------------------------------------------------
class CBS(Module):
    """Convolution (no bias) -> BatchNorm -> SiLU."""

    def __init__(self, cin: int, cout: int, k: int = 1, s: int = 1, rng=None):
        self.conv = Conv2d(cin, cout, k, s, bias=False, rng=rng)
        self.bn = BatchNorm2d(cout)

    def forward(self, x):
        return T.silu(self.bn(self.conv(x)))

    def cost(self, shape):
        return self.conv.cost(shape)


class Bottleneck(Module):
    def __init__(self, c1: int, c2: int, shortcut: bool = True, rng=None):
        self.cv1 = CBS(c1, c2, 3, rng=rng)
        self.cv2 = CBS(c2, c2, 3, rng=rng)
        self.add = shortcut and c1 == c2

    def forward(self, x):
        y = self.cv2(self.cv1(x))
        return x + y if self.add else y

    def cost(self, shape):
        s, f1 = self.cv1.cost(shape)
        s, f2 = self.cv2.cost(s)
        return s, f1 + f2


class C2f(Module):
    """1x1 CBS, split in halves, n chained bottlenecks on the second half, concat all, 1x1 CBS."""

    def __init__(self, c1: int, c2: int, n: int = 1, shortcut: bool = False, rng=None):
        if c2 % 2:
            raise ValueError(f"C2f output channels must be even, got {c2}")
        self.c = c = c2 // 2
        self.cv1 = CBS(c1, 2 * c, 1, rng=rng)
        self.m = [Bottleneck(c, c, shortcut, rng=rng) for _ in range(n)]
        self.cv2 = CBS((2 + n) * c, c2, 1, rng=rng)

    def forward(self, x):
        y = T.split(self.cv1(x), [self.c, self.c], axis=1)
        for m in self.m:
            y.append(m(y[-1]))
        return self.cv2(T.concat(y, axis=1))

    def cost(self, shape):
        s, total = self.cv1.cost(shape)
        n, _, h, w = s
        half = (n, self.c, h, w)
        for m in self.m:
            half, f = m.cost(half)
            total += f
        s, f = self.cv2.cost((n, (2 + len(self.m)) * self.c, h, w))
        return s, total + f


class SPPF(Module):
    """1x1 CBS -> three chained kxk max-pools -> concat(4) -> 1x1 CBS."""

    def __init__(self, c1: int, c2: int, k: int = 5, rng=None):
        c_ = c1 // 2
        self.k = k
        self.cv1 = CBS(c1, c_, 1, rng=rng)
        self.cv2 = CBS(4 * c_, c2, 1, rng=rng)

    def forward(self, x):
        y = [self.cv1(x)]
        for _ in range(3):
            y.append(T.maxpool2d(y[-1], self.k, 1, self.k // 2))
        return self.cv2(T.concat(y, axis=1))

    def cost(self, shape):
        s, f1 = self.cv1.cost(shape)
        n, c, h, w = s
        s, f2 = self.cv2.cost((n, 4 * c, h, w))
        return s, f1 + f2


class MLP2(Module):
    """Linear C -> C/r -> ReLU -> Linear C/r -> C, acting on the last axis."""

    def __init__(self, c: int, r: int, rng=None):
        if r < 1 or c % r:
            raise ValueError(f"MLP reduction ratio {r} does not divide {c} channels")
        self.fc1 = Linear(c, c // r, rng=rng)
        self.fc2 = Linear(c // r, c, rng=rng)

    def forward(self, x):
        return self.fc2(T.relu(self.fc1(x)))

    def cost(self, shape):
        s, f1 = self.fc1.cost(shape)
        s, f2 = self.fc2.cost(s)
        return s, f1 + f2
