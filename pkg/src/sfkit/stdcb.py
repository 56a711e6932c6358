"""Spatio-temporal deep coupling blocks over 4D sparse tensors.

Each block runs three decomposed submanifold convolutions (spatial 3x3x3x1,
temporal 1x1x1x3, and a temporally dilated 1x1x1x3 for cross-timestep
reach), fuses the temporal branches through a sigmoid-gated soft selection,
modulates the spatial branch with a (1 + beta) gate, and fuses everything
back onto the input through a point-wise convolution.  All convolutions are
submanifold: outputs exist exactly at the input's active sites, so residual
connections are always well defined.
"""

from dataclasses import dataclass

import numpy as np

from .errors import AlignmentError, InvalidConfig, ShapeError
from .ssm import sigmoid
from .voxelizer import SparseTensor4D
from .weights import uniform_init

# "Dilated by one" cross-timestep conv: neighbors at t-2, t, t+2.
GAP1_DILATION = 2


@dataclass(frozen=True)
class ConvKernel4D:
    """Sparse convolution kernel over (x, y, z, t) with optional t-dilation.

    weights: (kx, ky, kz, kt, Cin, Cout); extents odd where > 1 so the kernel
    is centered.  dilation_t stretches the temporal taps.
    """

    weights: np.ndarray
    bias: np.ndarray
    dilation_t: int = 1

    def __post_init__(self):
        if self.weights.ndim != 6:
            raise ShapeError(
                f"kernel weights must be (kx, ky, kz, kt, Cin, Cout), got {self.weights.shape}"
            )
        for extent in self.weights.shape[:4]:
            if extent > 1 and extent % 2 == 0:
                raise ShapeError(f"kernel extents must be odd where > 1, got {extent}")
        if self.bias.shape != (self.weights.shape[5],):
            raise ShapeError(f"bias must be ({self.weights.shape[5]},)")
        if self.dilation_t < 1:
            raise ShapeError("dilation_t must be >= 1")
        if not (np.all(np.isfinite(self.weights)) and np.all(np.isfinite(self.bias))):
            raise ShapeError("kernel contains non-finite values")

    @property
    def c_in(self):
        return self.weights.shape[4]

    @property
    def c_out(self):
        return self.weights.shape[5]

    @classmethod
    def seeded(cls, extent, c_in, c_out, rng, dilation_t=1):
        kx, ky, kz, kt = extent
        return cls(
            weights=uniform_init(rng, (kx, ky, kz, kt, c_in, c_out)),
            bias=uniform_init(rng, (c_out,)),
            dilation_t=dilation_t,
        )

    def offsets(self):
        """Kernel taps as (n_taps, 4) displacements in (t, x, y, z) key order."""
        kx, ky, kz, kt = self.weights.shape[:4]
        taps = []
        for a in range(kx):
            for b in range(ky):
                for c in range(kz):
                    for d in range(kt):
                        taps.append(
                            (
                                (d - kt // 2) * self.dilation_t,
                                a - kx // 2,
                                b - ky // 2,
                                c - kz // 2,
                            )
                        )
        return np.array(taps, dtype=np.int64).reshape(-1, 4)


def sparse_conv(tensor, kernel):
    """Submanifold convolution: evaluate only at the input's active sites.

    Absent neighbors contribute zero, so the active set is preserved exactly.
    The tap order is fixed, keeping floating-point sums deterministic.
    """
    if kernel.c_in != tensor.n_channels:
        raise ShapeError(
            f"kernel expects {kernel.c_in} channels, tensor has {tensor.n_channels}"
        )
    kx, ky, kz, kt = kernel.weights.shape[:4]
    flat_w = kernel.weights.reshape(-1, kernel.c_in, kernel.c_out)
    out = np.broadcast_to(kernel.bias, (tensor.n_active, kernel.c_out)).copy()
    for tap, w in zip(kernel.offsets(), flat_w):
        idx, found = tensor.lookup(tensor.coords + tap)
        if np.any(found):
            out[found] += tensor.features[idx[found]] @ w
    return tensor.with_features(out)


def pointwise(tensor, weight, bias):
    """1x1x1x1 convolution: a per-site linear map."""
    weight = np.asarray(weight, dtype=np.float64)
    if weight.shape[0] != tensor.n_channels:
        raise ShapeError(
            f"pointwise weight expects {weight.shape[0]} channels, tensor has "
            f"{tensor.n_channels}"
        )
    return tensor.with_features(tensor.features @ weight + bias)


def _require_aligned(a, b, what):
    if a.n_channels != b.n_channels:
        raise ShapeError(f"{what}: channel counts differ ({a.n_channels} vs {b.n_channels})")
    if not a.same_active_set(b):
        in_a = set(map(tuple, a.coords)) - set(map(tuple, b.coords))
        in_b = set(map(tuple, b.coords)) - set(map(tuple, a.coords))
        sample = sorted(in_a | in_b)[:8]
        raise AlignmentError(f"{what}: active sets differ, e.g. {sample}")


@dataclass(frozen=True)
class SfsmWeights:
    """Sigmoid gate for blending a main and an auxiliary branch.

    The gate is sigmoid(LeakyReLU(BN(pointwise(concat(main, aux))))) with
    inference-mode batch norm; the running statistics travel with the weights.
    """

    conv_w: np.ndarray  # (2C, C)
    conv_b: np.ndarray
    bn_scale: np.ndarray
    bn_shift: np.ndarray
    bn_mean: np.ndarray
    bn_var: np.ndarray
    bn_eps: float = 1e-5
    leaky_slope: float = 0.01

    def __post_init__(self):
        c = self.conv_w.shape[1]
        if self.conv_w.shape != (2 * c, c):
            raise ShapeError(f"SFSM conv must map 2C -> C, got {self.conv_w.shape}")
        for name in ("conv_b", "bn_scale", "bn_shift", "bn_mean", "bn_var"):
            if getattr(self, name).shape != (c,):
                raise ShapeError(f"SFSM {name} must be ({c},)")
        if self.bn_eps <= 0:
            raise ShapeError("bn_eps must be positive")

    @classmethod
    def seeded(cls, channels, rng):
        return cls(
            conv_w=uniform_init(rng, (2 * channels, channels)),
            conv_b=uniform_init(rng, (channels,)),
            bn_scale=np.ones(channels),
            bn_shift=np.zeros(channels),
            bn_mean=np.zeros(channels),
            bn_var=np.ones(channels),
        )

    def gate(self, stacked):
        """Per-site blending weights alpha from the concatenated branches."""
        pre = stacked @ self.conv_w + self.conv_b
        norm = (pre - self.bn_mean) / np.sqrt(self.bn_var + self.bn_eps)
        norm = self.bn_scale * norm + self.bn_shift
        act = np.where(norm >= 0.0, norm, self.leaky_slope * norm)
        return sigmoid(act)


def sfsm(f_main, f_aux, w):
    """Soft feature selection: alpha * main + (1 - alpha) * aux, element-wise."""
    _require_aligned(f_main, f_aux, "sfsm")
    alpha = w.gate(np.concatenate([f_main.features, f_aux.features], axis=1))
    return f_main.with_features(alpha * f_main.features + (1.0 - alpha) * f_aux.features)


@dataclass(frozen=True)
class GateWeights:
    """Two point-wise convolutions producing the temporal attention beta."""

    w1: np.ndarray  # (C, C)
    b1: np.ndarray
    w2: np.ndarray  # (C, C)
    b2: np.ndarray

    def __post_init__(self):
        c = self.w1.shape[0]
        if self.w1.shape != (c, c) or self.w2.shape != (c, c):
            raise ShapeError("gate convolutions must be square (C, C)")
        if self.b1.shape != (c,) or self.b2.shape != (c,):
            raise ShapeError("gate biases must be (C,)")

    @classmethod
    def seeded(cls, channels, rng):
        return cls(
            w1=uniform_init(rng, (channels, channels)),
            b1=uniform_init(rng, (channels,)),
            w2=uniform_init(rng, (channels, channels)),
            b2=uniform_init(rng, (channels,)),
        )

    def beta(self, feats):
        hidden = np.maximum(feats @ self.w1 + self.b1, 0.0)
        return sigmoid(hidden @ self.w2 + self.b2)


def temporal_gated_block(f_spatial, f_temporal, f_temporal_ct, sfsm_w, gate_w):
    """Fuse the temporal branches, then scale the spatial branch by (1 + beta).

    Returns (modulated spatial features, fused temporal features); the
    multiplier stays in (1, 2) so spatial magnitudes never shrink and at most
    double.
    """
    f_temporal_fused = sfsm(f_temporal, f_temporal_ct, sfsm_w)
    _require_aligned(f_spatial, f_temporal_fused, "temporal gate")
    beta = gate_w.beta(f_temporal_fused.features)
    f_spatial_mod = f_spatial.with_features(f_spatial.features * (1.0 + beta))
    return f_spatial_mod, f_temporal_fused


@dataclass(frozen=True)
class StdcbWeights:
    """All parameters of one spatio-temporal deep coupling block."""

    conv_spatial: ConvKernel4D  # 3x3x3x1
    conv_temporal: ConvKernel4D  # 1x1x1x3
    conv_cross: ConvKernel4D  # 1x1x1x3, temporally dilated
    sfsm_temporal: SfsmWeights
    gate: GateWeights
    sfsm_fuse: SfsmWeights
    fuse_w: np.ndarray  # (2C, C)
    fuse_b: np.ndarray

    @classmethod
    def seeded(cls, channels, rng, cross_dilation=GAP1_DILATION):
        return cls(
            conv_spatial=ConvKernel4D.seeded((3, 3, 3, 1), channels, channels, rng),
            conv_temporal=ConvKernel4D.seeded((1, 1, 1, 3), channels, channels, rng),
            conv_cross=ConvKernel4D.seeded(
                (1, 1, 1, 3), channels, channels, rng, dilation_t=cross_dilation
            ),
            sfsm_temporal=SfsmWeights.seeded(channels, rng),
            gate=GateWeights.seeded(channels, rng),
            sfsm_fuse=SfsmWeights.seeded(channels, rng),
            fuse_w=uniform_init(rng, (2 * channels, channels)),
            fuse_b=uniform_init(rng, (channels,)),
        )


def stdcb_forward(f_sparse, w):
    """One coupling block; the active set is preserved end to end."""
    if f_sparse.n_active == 0:
        return f_sparse
    f_spatial = sparse_conv(f_sparse, w.conv_spatial)
    f_temporal = sparse_conv(f_sparse, w.conv_temporal)
    f_cross = sparse_conv(f_sparse, w.conv_cross)
    f_spatial_mod, f_temporal_fused = temporal_gated_block(
        f_spatial, f_temporal, f_cross, w.sfsm_temporal, w.gate
    )
    f_fused = sfsm(f_temporal_fused, f_spatial_mod, w.sfsm_fuse)
    stacked = np.concatenate([f_fused.features, f_sparse.features], axis=1)
    return f_sparse.with_features(stacked @ w.fuse_w + w.fuse_b)


@dataclass(frozen=True)
class StdcbConfig:
    """Backbone layout: one encoder stack per level, decoder stacks between."""

    channels: int = 16
    encoder_depths: tuple = (2, 2, 2, 2, 2)
    decoder_depths: tuple = (1, 1, 1, 1)
    cross_dilation: int = GAP1_DILATION

    def __post_init__(self):
        if self.channels < 1:
            raise InvalidConfig("channels must be >= 1")
        if not self.encoder_depths or any(d < 1 for d in self.encoder_depths):
            raise InvalidConfig("encoder depths must be non-empty and positive")
        if len(self.decoder_depths) != len(self.encoder_depths) - 1:
            raise InvalidConfig(
                "need one decoder stack per level transition "
                f"({len(self.encoder_depths) - 1}), got {len(self.decoder_depths)}"
            )
        if any(d < 1 for d in self.decoder_depths):
            raise InvalidConfig("decoder depths must be positive")
        if self.cross_dilation < 1:
            raise InvalidConfig("cross_dilation must be >= 1")

    @classmethod
    def desk(cls, channels=16, cross_dilation=GAP1_DILATION):
        """Shrunken two-level layout that keeps dense-oracle tests feasible."""
        return cls(
            channels=channels,
            encoder_depths=(1, 1),
            decoder_depths=(1,),
            cross_dilation=cross_dilation,
        )

    @property
    def n_levels(self):
        return len(self.encoder_depths)


@dataclass(frozen=True)
class BackboneWeights:
    encoder: tuple  # tuple per level of tuple[StdcbWeights]
    decoder: tuple  # tuple per transition of tuple[StdcbWeights]

    @classmethod
    def seeded(cls, config, rng):
        enc = tuple(
            tuple(
                StdcbWeights.seeded(config.channels, rng, config.cross_dilation)
                for _ in range(depth)
            )
            for depth in config.encoder_depths
        )
        dec = tuple(
            tuple(
                StdcbWeights.seeded(config.channels, rng, config.cross_dilation)
                for _ in range(depth)
            )
            for depth in config.decoder_depths
        )
        return cls(encoder=enc, decoder=dec)


def downsample2(tensor):
    """Stride-2 spatial pooling: children sharing a parent cell are averaged.

    The time axis is untouched.  Parent order is canonical, so the result is
    deterministic.
    """
    parents = tensor.coords.copy()
    parents[:, 1:] = np.floor_divide(parents[:, 1:], 2)
    uniq, inverse = np.unique(parents, axis=0, return_inverse=True)
    sums = np.zeros((len(uniq), tensor.n_channels))
    np.add.at(sums, inverse, tensor.features)
    counts = np.bincount(inverse, minlength=len(uniq))
    return SparseTensor4D(uniq, sums / counts[:, None])


def upsample_into(coarse, fine_coords):
    """Copy each parent feature to its child active sites (nearest unpooling)."""
    parents = np.asarray(fine_coords, dtype=np.int64).copy()
    parents[:, 1:] = np.floor_divide(parents[:, 1:], 2)
    idx, found = coarse.lookup(parents)
    if not np.all(found):
        raise AlignmentError("fine active site without a coarse parent")
    return coarse.features[idx]


def backbone_forward(f_4d, config, weights):
    """U-shaped encoder/decoder over coupling-block stacks.

    Spatial resolution halves between levels; skip connections add by active
    site, and the full-resolution output is residually combined with the
    input (active sets coincide by the submanifold property).  A single-level
    config is a plain block stack: no skips and no outer residual, so depth-1
    reduces exactly to one block.
    """
    if len(weights.encoder) != config.n_levels or len(weights.decoder) != config.n_levels - 1:
        raise ShapeError("weights do not match the configured level count")
    x = f_4d
    skips = []
    for level in range(config.n_levels):
        for block in weights.encoder[level]:
            x = stdcb_forward(x, block)
        if level < config.n_levels - 1:
            skips.append(x)
            x = downsample2(x)
    if config.n_levels == 1:
        return x
    for level in range(config.n_levels - 2, -1, -1):
        skip = skips[level]
        up = upsample_into(x, skip.coords)
        x = skip.with_features(skip.features + up)
        for block in weights.decoder[level]:
            x = stdcb_forward(x, block)
    return f_4d.with_features(f_4d.features + x.features)


def count_parameters(weights):
    """Total scalar parameter count of a backbone weight set."""
    total = 0
    for stacks in (weights.encoder, weights.decoder):
        for stack in stacks:
            for block in stack:
                for kernel in (block.conv_spatial, block.conv_temporal, block.conv_cross):
                    total += kernel.weights.size + kernel.bias.size
                for gate in (block.sfsm_temporal, block.sfsm_fuse):
                    total += (
                        gate.conv_w.size + gate.conv_b.size + gate.bn_scale.size
                        + gate.bn_shift.size + gate.bn_mean.size + gate.bn_var.size
                    )
                total += (
                    block.gate.w1.size + block.gate.b1.size
                    + block.gate.w2.size + block.gate.b2.size
                )
                total += block.fuse_w.size + block.fuse_b.size
    return total
