"""Shape-preserving attention modules inserted after the neck C2f blocks.

All variants map ``[N, C, H, W] -> [N, C, H, W]`` and gate the input with
sigmoid maps along channels, positions, or both.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .nn import BatchNorm2d, Conv2d, GroupNorm, MLP2, Module, Parameter

KINDS = ("none", "cbam", "rescbam", "eca", "sa", "gam", "resgam")
_DEFAULT_R = {"cbam": 16, "rescbam": 16, "gam": 4, "resgam": 4}


@dataclass(frozen=True)
class AttentionSpec:
    kind: str = "none"
    r: Optional[int] = None  # None -> 16 for CBAM variants, 4 for GAM variants
    groups: int = 8  # SA group count
    gamma: float = 2.0
    b: float = 1.0

    def __post_init__(self):
        kind = self.kind.lower()
        if kind not in KINDS:
            raise ValueError(f"unknown attention kind {self.kind!r}; expected one of {KINDS}")
        object.__setattr__(self, "kind", kind)
        if self.r is not None and self.r < 1:
            raise ValueError(f"reduction ratio must be >= 1, got {self.r}")

    @property
    def reduction(self) -> int:
        return self.r if self.r is not None else _DEFAULT_R.get(self.kind, 1)

    def check_channels(self, c: int) -> None:
        """Raise ValueError if this spec cannot be inserted at a site with ``c`` channels."""
        if self.kind in _DEFAULT_R and c % self.reduction:
            raise ValueError(f"{self.kind}: reduction ratio {self.reduction} does not divide {c} channels")
        if self.kind == "sa" and c % (2 * self.groups):
            raise ValueError(f"sa: 2*G = {2 * self.groups} does not divide {c} channels")
        if self.kind == "eca" and c < 2:
            raise ValueError(f"eca: needs at least 2 channels, got {c}")


def eca_kernel_size(c: int, gamma: float = 2.0, b: float = 1.0) -> int:
    """Odd 1-d kernel size nearest to ``|log2(c)/gamma + b/gamma|``.

    Exact ties between two odd integers resolve to the smaller one, so
    c=128 (t=4.0) gives 3 while c=256 (t=4.5) gives 5.
    """
    if c < 2:
        raise ValueError(f"eca_kernel_size needs c >= 2, got {c}")
    t = abs(math.log2(c) / gamma + b / gamma)
    lo = 2 * math.floor((t - 1) / 2) + 1
    k = lo if t - lo <= lo + 2 - t else lo + 2
    return max(k, 1)


def channel_shuffle(x: T.Tensor, groups: int) -> T.Tensor:
    """Reshape channels to (groups, C/groups), transpose, flatten."""
    n, c, h, w = x.shape
    if groups < 1 or c % groups:
        raise ValueError(f"channel_shuffle: {groups} groups do not divide {c} channels")
    if groups == 1:
        return x
    y = T.permute(T.reshape(x, (n, groups, c // groups, h, w)), (0, 2, 1, 3, 4))
    return T.reshape(y, (n, c, h, w))


def shuffle_permutation(c: int, groups: int) -> np.ndarray:
    """Output channel j of :func:`channel_shuffle` is input channel ``perm[j]``."""
    return np.arange(c).reshape(groups, c // groups).T.reshape(-1)


class Identity(Module):
    def forward(self, x):
        return x

    def cost(self, shape):
        return shape, 0


class CBAM(Module):
    """Channel gate from pooled descriptors through a shared MLP, then a 7x7 spatial gate.

    With ``residual=True`` the refined feature is added back to the input.
    """

    def __init__(self, c: int, r: int = 16, residual: bool = False, rng=None):
        self.c = c
        self.residual = residual
        self.mlp = MLP2(c, r, rng=rng)
        self.spatial = Conv2d(2, 1, 7, 1, 3, bias=False, rng=rng)

    def channel_gate(self, x):
        n, c = x.shape[:2]
        avg = T.reshape(T.gap(x), (n, c))
        mx = T.reshape(T.gmp(x), (n, c))
        return T.reshape(T.sigmoid(self.mlp(avg) + self.mlp(mx)), (n, c, 1, 1))

    def spatial_gate(self, x):
        desc = T.concat([x.mean(axis=1, keepdims=True), x.max(axis=1, keepdims=True)], axis=1)
        return T.sigmoid(self.spatial(desc))

    def forward(self, x):
        refined = x * self.channel_gate(x)
        refined = refined * self.spatial_gate(refined)
        return x + refined if self.residual else refined

    def cost(self, shape):
        n, c, h, w = shape
        _, f_mlp = self.mlp.cost((n, c))
        _, f_sp = self.spatial.cost((n, 2, h, w))
        return shape, 2 * f_mlp + f_sp


class ECA(Module):
    """GAP -> shared 1-d conv across channels -> sigmoid -> per-channel rescale."""

    def __init__(self, c: int, gamma: float = 2.0, b: float = 1.0, k: int | None = None, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.k = eca_kernel_size(c, gamma, b) if k is None else k
        bound = 1.0 / math.sqrt(self.k)
        self.weight = Parameter(rng.uniform(-bound, bound, (1, 1, self.k)))

    def gate(self, x):
        n, c = x.shape[:2]
        y = T.conv1d(T.reshape(T.gap(x), (n, 1, c)), self.weight)
        return T.reshape(T.sigmoid(y), (n, c, 1, 1))

    def forward(self, x):
        return x * self.gate(x)

    def cost(self, shape):
        n, c = shape[:2]
        return shape, 2 * self.k * c * n


class ShuffleAttention(Module):
    """Per-group channel and spatial gates on the two halves of each group, then shuffle.

    The "FC" maps are per-channel scale-and-shift parameters shared across
    groups; the spatial branch normalizes each channel over its positions.
    """

    def __init__(self, c: int, groups: int = 8):
        if c % (2 * groups):
            raise ValueError(f"ShuffleAttention: 2*G = {2 * groups} does not divide {c} channels")
        self.groups = groups
        self.half = half = c // (2 * groups)
        self.cweight = Parameter(np.zeros((1, half, 1, 1)))
        self.cbias = Parameter(np.ones((1, half, 1, 1)))
        self.sweight = Parameter(np.zeros((1, half, 1, 1)))
        self.sbias = Parameter(np.ones((1, half, 1, 1)))
        self.gn = GroupNorm(half, half)

    def forward(self, x):
        n, c, h, w = x.shape
        g, half = self.groups, self.half
        xg = T.reshape(x, (n * g, 2 * half, h, w))
        x0, x1 = T.split(xg, [half, half], axis=1)
        xc = x0 * T.sigmoid(T.gap(x0) * self.cweight + self.cbias)
        xs = x1 * T.sigmoid(self.gn(x1) * self.sweight + self.sbias)
        out = T.reshape(T.concat([xc, xs], axis=1), (n, c, h, w))
        return channel_shuffle(out, g)

    def cost(self, shape):
        n, c, h, w = shape
        # channel FC on pooled halves plus spatial FC at every position, 2 FLOPs per MAC
        return shape, 2 * n * (c // 2) + 2 * n * (c // 2) * h * w


class GAM(Module):
    """Channel gate from an MLP over the channel axis at every position, then a conv spatial gate.

    No pooling anywhere. With ``residual=True`` the input is added to the output.
    """

    def __init__(self, c: int, r: int = 4, residual: bool = False, rng=None):
        self.residual = residual
        self.mlp = MLP2(c, r, rng=rng)
        self.conv1 = Conv2d(c, c // r, 7, 1, 3, rng=rng)
        self.bn1 = BatchNorm2d(c // r)
        self.conv2 = Conv2d(c // r, c, 7, 1, 3, rng=rng)
        self.bn2 = BatchNorm2d(c)

    def channel_gate(self, x):
        return T.permute(T.sigmoid(self.mlp(T.permute(x, (0, 2, 3, 1)))), (0, 3, 1, 2))

    def spatial_gate(self, x):
        y = T.relu(self.bn1(self.conv1(x)))
        return T.sigmoid(self.bn2(self.conv2(y)))

    def forward(self, x):
        refined = x * self.channel_gate(x)
        refined = refined * self.spatial_gate(refined)
        return x + refined if self.residual else refined

    def cost(self, shape):
        n, c, h, w = shape
        _, f_mlp = self.mlp.cost((n, h, w, c))
        s, f1 = self.conv1.cost(shape)
        _, f2 = self.conv2.cost(s)
        return shape, f_mlp + f1 + f2


def build_attention(spec: AttentionSpec, c: int, rng=None) -> Module:
    spec.check_channels(c)
    kind = spec.kind
    if kind == "none":
        return Identity()
    if kind in ("cbam", "rescbam"):
        return CBAM(c, spec.reduction, residual=kind == "rescbam", rng=rng)
    if kind == "eca":
        return ECA(c, spec.gamma, spec.b, rng=rng)
    if kind == "sa":
        return ShuffleAttention(c, spec.groups)
    return GAM(c, spec.reduction, residual=kind == "resgam", rng=rng)
