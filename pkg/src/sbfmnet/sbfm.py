"""Shallow binary feature module.

A Sobel layer runs four direction-constrained 3x3 filter banks over the same
input and sums their responses.  After ``l`` stacked Sobel layers the summed
response is rectified and binarised per channel at ``t`` times the channel
maximum.

Kernel sign patterns (rows i, columns j, 1-indexed)::

    horizontal          row 1 in [0, 1], row 2 == 0, row 3 in [-1, 0]
    vertical            column 1 in [0, 1], column 2 == 0, column 3 in [-1, 0]
    positive diagonal   (1,1) (1,2) (2,1) in [0, 1]; (1,3) (2,2) (3,1) == 0;
                        (2,3) (3,2) (3,3) in [-1, 0]
    negative diagonal   (1,2) (1,3) (2,3) in [0, 1]; (1,1) (2,2) (3,3) == 0;
                        (2,1) (3,1) (3,2) in [-1, 0]
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .exceptions import ConfigError, DimensionError
from .tensor import Tensor, absolute, add, conv2d, conv_output_size, flatten, maxpool2d

DEGENERATE_MAX = 1e-12


class Direction(str, enum.Enum):
    HORIZONTAL = "horizontal"
    VERTICAL = "vertical"
    POSITIVE_DIAGONAL = "positive_diagonal"
    NEGATIVE_DIAGONAL = "negative_diagonal"


DIRECTIONS = tuple(Direction)

# +1 -> [0, 1], 0 -> fixed zero, -1 -> [-1, 0]
_SIGN_PATTERNS = {
    Direction.HORIZONTAL: [[1, 1, 1], [0, 0, 0], [-1, -1, -1]],
    Direction.VERTICAL: [[1, 0, -1], [1, 0, -1], [1, 0, -1]],
    Direction.POSITIVE_DIAGONAL: [[1, 1, 0], [1, 0, -1], [0, -1, -1]],
    Direction.NEGATIVE_DIAGONAL: [[0, 1, 1], [-1, 0, 1], [-1, -1, 0]],
}

# classic Sobel operators scaled into the feasible box
CLASSIC_SOBEL = {
    Direction.HORIZONTAL: np.array([[0.5, 1.0, 0.5], [0.0, 0.0, 0.0], [-0.5, -1.0, -0.5]]),
    Direction.VERTICAL: np.array([[0.5, 0.0, -0.5], [1.0, 0.0, -1.0], [0.5, 0.0, -0.5]]),
    Direction.POSITIVE_DIAGONAL: np.array([[1.0, 0.5, 0.0], [0.5, 0.0, -0.5], [0.0, -0.5, -1.0]]),
    Direction.NEGATIVE_DIAGONAL: np.array([[0.0, 0.5, 1.0], [-0.5, 0.0, 0.5], [-1.0, -0.5, 0.0]]),
}


@dataclass(frozen=True, eq=False)
class DirectionPattern:
    kind: Direction
    pos_mask: np.ndarray
    zero_mask: np.ndarray
    neg_mask: np.ndarray

    @property
    def kernel_size(self) -> int:
        return self.pos_mask.shape[0]

    @property
    def lower(self) -> np.ndarray:
        return np.where(self.neg_mask, -1.0, 0.0)

    @property
    def upper(self) -> np.ndarray:
        return np.where(self.pos_mask, 1.0, 0.0)


def direction_pattern(kind: Direction | str, kernel_size: int = 3) -> DirectionPattern:
    kind = Direction(kind)
    if kernel_size != 3:
        raise ConfigError(f"only 3x3 directional kernels are supported, got {kernel_size}")
    signs = np.array(_SIGN_PATTERNS[kind])
    masks = [signs == 1, signs == 0, signs == -1]
    for m in masks:
        m.setflags(write=False)
    return DirectionPattern(kind, *masks)


def project_weights(weights: np.ndarray, pattern: DirectionPattern) -> np.ndarray:
    """Clamp ``weights[..., K, K]`` onto the box constraints of ``pattern``."""
    return np.clip(weights, pattern.lower, pattern.upper)


@dataclass(eq=False)
class DirectionalKernel:
    pattern: DirectionPattern
    weights: Tensor  # [F, C, K, K]

    @property
    def direction(self) -> Direction:
        return self.pattern.kind

    def project_(self) -> None:
        """Project the weights onto their feasible set in place."""
        np.clip(self.weights.data, self.pattern.lower, self.pattern.upper, out=self.weights.data)

    def is_feasible(self) -> bool:
        w = self.weights.data
        p = self.pattern
        return bool(
            np.all(w[..., p.zero_mask] == 0.0)
            and np.all((w[..., p.pos_mask] >= 0.0) & (w[..., p.pos_mask] <= 1.0))
            and np.all((w[..., p.neg_mask] >= -1.0) & (w[..., p.neg_mask] <= 0.0))
        )


def project_kernel(kernel: DirectionalKernel) -> DirectionalKernel:
    """Return a projected copy of ``kernel``; idempotent."""
    w = Tensor(project_weights(kernel.weights.data, kernel.pattern),
               requires_grad=kernel.weights.requires_grad)
    return DirectionalKernel(kernel.pattern, w)


def init_directional_kernel(pattern: DirectionPattern, n_filters: int, in_channels: int,
                            seed: int | np.random.SeedSequence = 0,
                            noise: float = 0.05) -> DirectionalKernel:
    """Classic Sobel coefficients plus uniform noise on the free entries, projected.

    The same pattern is repeated across every filter and input channel.
    """
    if n_filters < 1 or in_channels < 1:
        raise ConfigError("n_filters and in_channels must be >= 1")
    rng = np.random.default_rng(seed)
    k = pattern.kernel_size
    base = np.broadcast_to(CLASSIC_SOBEL[pattern.kind], (n_filters, in_channels, k, k))
    jitter = rng.uniform(-noise, noise, size=base.shape) if noise else 0.0
    w = np.where(pattern.zero_mask, 0.0, base + jitter)
    return DirectionalKernel(pattern, Tensor(project_weights(w, pattern), requires_grad=True))


# ---------------------------------------------------------------- Sobel layer


@dataclass(eq=False)
class SobelLayer:
    kernels: tuple[DirectionalKernel, ...]
    stride: int = 1
    padding: int = 0
    pool_window: int = 2
    pool_stride: int = 2

    def __post_init__(self):
        if len(self.kernels) != 4 or {k.direction for k in self.kernels} != set(DIRECTIONS):
            raise ConfigError("a Sobel layer needs exactly one kernel per direction")
        shapes = {k.weights.shape for k in self.kernels}
        if len(shapes) != 1:
            raise ConfigError(f"directional kernels disagree on shape: {sorted(shapes)}")

    @property
    def in_channels(self) -> int:
        return self.kernels[0].weights.shape[1]

    @property
    def out_channels(self) -> int:
        return self.kernels[0].weights.shape[0]

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        k = self.kernels[0].pattern.kernel_size
        h = conv_output_size(h, k, self.stride, self.padding)
        w = conv_output_size(w, k, self.stride, self.padding)
        if self.pool_window > 1:
            h = (h - self.pool_window) // self.pool_stride + 1
            w = (w - self.pool_window) // self.pool_stride + 1
        return h, w

    def forward(self, x: Tensor) -> Tensor:
        return sobel_layer_forward(self, x)


def sobel_layer_forward(layer: SobelLayer, x: Tensor) -> Tensor:
    """Sum of the four directional responses, then the layer's max pooling."""
    if x.ndim != 4 or x.shape[1] != layer.in_channels:
        raise DimensionError(
            f"Sobel layer expects [B, {layer.in_channels}, H, W] input, got {x.shape}")
    out = None
    for kernel in layer.kernels:
        resp = conv2d(x, kernel.weights, stride=layer.stride, padding=layer.padding)
        out = resp if out is None else add(out, resp)
    if layer.pool_window > 1:
        out = maxpool2d(out, layer.pool_window, layer.pool_stride)
    return out


# ---------------------------------------------------------------- threshold


def _check_t(t: float) -> None:
    if not 0.0 <= t <= 1.0:
        raise ConfigError(f"threshold proportion t must lie in [0, 1], got {t}")


def threshold_forward(x, t: float) -> np.ndarray:
    """Binarise each channel at ``t * max(channel)``.

    ``x`` is [N, P, Q] or batched [B, N, P, Q] and should already be
    rectified.  Channels whose maximum is below 1e-12 map to all zeros.
    """
    _check_t(t)
    a = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    if a.ndim < 3:
        raise DimensionError(f"threshold expects [N, P, Q] or [B, N, P, Q], got {a.shape}")
    cmax = a.max(axis=(-2, -1), keepdims=True)
    live = cmax >= DEGENERATE_MAX
    return ((a >= t * cmax) & live).astype(np.float64)


def threshold_backward_ste(upstream_grad: np.ndarray, x) -> np.ndarray:
    """Straight-through gradient: pass ``upstream_grad`` wherever ``x != 0``."""
    a = x.data if isinstance(x, Tensor) else np.asarray(x)
    if np.shape(upstream_grad) != a.shape:
        raise DimensionError(f"gradient shape {np.shape(upstream_grad)} != input shape {a.shape}")
    return upstream_grad * (np.abs(a) > 0)


def threshold(x: Tensor, t: float) -> Tensor:
    """Differentiable (straight-through) wrapper around :func:`threshold_forward`."""
    out = threshold_forward(x, t)
    xd = x.data
    return Tensor._from_op(out, (x,), lambda g: (threshold_backward_ste(g, xd),), "threshold")


# ---------------------------------------------------------------- module


@dataclass
class SBFMConfig:
    """Hyperparameters of the binary feature module.

    ``pool_windows`` gives the (square, non-overlapping) max-pool window after
    each Sobel layer; ``None`` pools by 2 after the first layer only.
    """

    l: int = 3
    t: float = 0.8
    channels_per_direction: int = 8
    kernel_size: int = 3
    stride: int = 1
    padding: int = 0
    pool_windows: tuple[int, ...] | None = None
    init_noise: float = 0.05
    freeze: bool = False

    def __post_init__(self):
        if self.pool_windows is not None:
            self.pool_windows = tuple(int(p) for p in self.pool_windows)
        self.validate()

    def validate(self) -> None:
        if int(self.l) != self.l or self.l < 1:
            raise ConfigError(f"number of Sobel layers l must be a positive int, got {self.l}")
        _check_t(self.t)
        if self.channels_per_direction < 1:
            raise ConfigError("channels_per_direction must be >= 1")
        if self.kernel_size != 3:
            raise ConfigError("only kernel_size=3 is implemented")
        if self.stride < 1 or self.padding < 0:
            raise ConfigError("stride must be >= 1 and padding >= 0")
        if self.pool_windows is not None:
            if len(self.pool_windows) != self.l:
                raise ConfigError(f"pool_windows needs {self.l} entries, got {len(self.pool_windows)}")
            if any(p < 1 for p in self.pool_windows):
                raise ConfigError("pool windows must be >= 1")

    @property
    def pools(self) -> tuple[int, ...]:
        if self.pool_windows is not None:
            return self.pool_windows
        return (2,) + (1,) * (self.l - 1)

    def to_dict(self) -> dict:
        return {
            "l": self.l, "t": self.t, "channels_per_direction": self.channels_per_direction,
            "kernel_size": self.kernel_size, "stride": self.stride, "padding": self.padding,
            "pool_windows": list(self.pools), "init_noise": self.init_noise, "freeze": self.freeze,
        }

    @classmethod
    def from_dict(cls, d: dict) -> SBFMConfig:
        d = dict(d)
        if d.get("pool_windows") is not None:
            d["pool_windows"] = tuple(d["pool_windows"])
        return cls(**d)


@dataclass(eq=False)
class SBFM:
    config: SBFMConfig
    layers: list[SobelLayer] = field(default_factory=list)

    def kernels(self) -> list[DirectionalKernel]:
        return [k for layer in self.layers for k in layer.kernels]

    def named_parameters(self, prefix: str = "sbfm") -> list[tuple[str, Tensor]]:
        return [(f"{prefix}.layer{i}.{k.direction.value}", k.weights)
                for i, layer in enumerate(self.layers) for k in layer.kernels]

    def project_(self) -> None:
        for k in self.kernels():
            k.project_()

    def output_shape(self, h: int, w: int) -> tuple[int, int, int]:
        """(channels, height, width) of the binary map for an HxW input."""
        for i, layer in enumerate(self.layers):
            k = self.config.kernel_size
            if k > h + 2 * layer.padding or k > w + 2 * layer.padding:
                raise ConfigError(f"Sobel layer {i} receives {h}x{w} input, too small for {k}x{k}")
            ch = conv_output_size(h, k, layer.stride, layer.padding)
            cw = conv_output_size(w, k, layer.stride, layer.padding)
            if layer.pool_window > min(ch, cw):
                raise ConfigError(f"pool window {layer.pool_window} after Sobel layer {i} "
                                  f"exceeds its {ch}x{cw} output")
            h, w = layer.output_hw(h, w)
        return self.layers[-1].out_channels, h, w

    def feature_width(self, h: int, w: int) -> int:
        c, oh, ow = self.output_shape(h, w)
        return c * oh * ow

    def edge_response(self, x: Tensor) -> Tensor:
        """Rectified response of the last Sobel layer, [B, F, P, Q]."""
        out = x
        for layer in self.layers:
            out = sobel_layer_forward(layer, out)
        return absolute(out)

    def forward(self, x: Tensor) -> Tensor:
        """Flattened binary feature vector, [B, F*P*Q]."""
        return flatten(threshold(self.edge_response(x), self.config.t))

    __call__ = forward


def build_sbfm(cfg: SBFMConfig, in_channels: int = 3,
               seed: int | np.random.SeedSequence = 0) -> SBFM:
    """Stack ``cfg.l`` Sobel layers; layer k consumes layer k-1's channels."""
    if not isinstance(cfg, SBFMConfig):
        raise ConfigError(f"expected SBFMConfig, got {type(cfg).__name__}")
    cfg.validate()
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    children = ss.spawn(cfg.l * len(DIRECTIONS))
    layers = []
    c_in = in_channels
    for i in range(cfg.l):
        kernels = tuple(
            init_directional_kernel(direction_pattern(d, cfg.kernel_size), cfg.channels_per_direction,
                                    c_in, children[i * len(DIRECTIONS) + j], noise=cfg.init_noise)
            for j, d in enumerate(DIRECTIONS)
        )
        if cfg.freeze:
            for k in kernels:
                k.weights.requires_grad = False
        pool = cfg.pools[i]
        layers.append(SobelLayer(kernels, stride=cfg.stride, padding=cfg.padding,
                                 pool_window=pool, pool_stride=pool))
        c_in = cfg.channels_per_direction
    return SBFM(cfg, layers)
