"""End-to-end orchestration: configuration, the full weight bundle, and the
scene -> flow inference path shared by the CLI and the tests.

Inference order: voxelize and encode each of the five frames, pool to voxel
features, stack along time, run the sparse backbone, pull the prediction
frame's voxel features back out, and decode them to per-point flow.
"""

from dataclasses import dataclass, field

import numpy as np

from .decoder import DecoderConfig, DecoderWeights, FlowHeadWeights, decode
from .errors import InvalidConfig, ShapeError
from .pointcloud import DEFAULT_DT, FRAME_T, FRAME_T1
from .ssm import DEFAULT_BLOCK_SIZE, SsmParams, ZohMode
from .stdcb import (
    GAP1_DILATION,
    BackboneWeights,
    ConvKernel4D,
    GateWeights,
    SfsmWeights,
    StdcbConfig,
    StdcbWeights,
    backbone_forward,
)
from .voxelizer import (
    DEFAULT_CELL_SIZE,
    DEFAULT_CHANNELS,
    DEFAULT_EXTENTS,
    DEFAULT_ORIGIN,
    VoxelGrid,
    encode_point_features,
    pool_to_voxels,
    stack_temporal,
    voxelize,
)
from .weights import MlpWeights, load_weight_dict, save_weight_dict


@dataclass(frozen=True)
class RunConfig:
    """Every knob of the pipeline in one validated bundle."""

    grid_origin: tuple = DEFAULT_ORIGIN
    cell_size: float = DEFAULT_CELL_SIZE
    grid_extents: tuple = DEFAULT_EXTENTS
    channels: int = DEFAULT_CHANNELS
    encoder_depths: tuple = (1, 1)
    decoder_depths: tuple = (1,)
    decoder_layers: int = 1
    state_size: int = 16
    zoh_mode: str = "simplified"
    dilation: str = "gap1"  # gap1 -> taps at {t-2, t, t+2}; literal -> {t-1, t, t+1}
    dt: float = DEFAULT_DT
    k_bins: int = 100
    dynamic_threshold: float = 0.05
    block_size: int = DEFAULT_BLOCK_SIZE
    threads: int = 1
    decode_frame: str = "t"  # which frame's points receive flow: "t" | "t+1"

    def __post_init__(self):
        if self.zoh_mode not in ("exact", "simplified"):
            raise InvalidConfig(f"zoh_mode must be exact|simplified, got {self.zoh_mode!r}")
        if self.dilation not in ("gap1", "literal"):
            raise InvalidConfig(f"dilation must be gap1|literal, got {self.dilation!r}")
        if self.decode_frame not in ("t", "t+1"):
            raise InvalidConfig(f"decode_frame must be t|t+1, got {self.decode_frame!r}")
        if self.decoder_layers < 1:
            raise InvalidConfig("decoder_layers must be >= 1")
        if self.k_bins < 2:
            raise InvalidConfig("k_bins must be >= 2")
        if self.dt <= 0:
            raise InvalidConfig("dt must be positive")
        if self.threads < 1:
            raise InvalidConfig("threads must be >= 1")
        VoxelGrid(self.grid_origin, self.cell_size, self.grid_extents)
        self.stdcb_config()  # validates depths/channels

    def grid(self):
        return VoxelGrid(
            tuple(self.grid_origin), self.cell_size, tuple(self.grid_extents)
        )

    def stdcb_config(self):
        return StdcbConfig(
            channels=self.channels,
            encoder_depths=tuple(self.encoder_depths),
            decoder_depths=tuple(self.decoder_depths),
            cross_dilation=GAP1_DILATION if self.dilation == "gap1" else 1,
        )

    def decoder_config(self):
        return DecoderConfig(
            n_layers=self.decoder_layers,
            channels=self.channels,
            state_size=self.state_size,
            zoh_mode=ZohMode(self.zoh_mode),
            block_size=self.block_size,
        )

    @classmethod
    def from_mapping(cls, mapping):
        known = set(cls.__dataclass_fields__)
        unknown = set(mapping) - known
        if unknown:
            raise InvalidConfig(f"unknown config keys: {sorted(unknown)}")
        coerced = {}
        for key, value in mapping.items():
            if isinstance(value, list):
                value = tuple(value)
            coerced[key] = value
        try:
            return cls(**coerced)
        except TypeError as exc:
            raise InvalidConfig(str(exc)) from exc

    def to_mapping(self):
        out = {}
        for key in self.__dataclass_fields__:
            value = getattr(self, key)
            out[key] = list(value) if isinstance(value, tuple) else value
        return out


@dataclass(frozen=True)
class PipelineWeights:
    """All learnable arrays of the inference path."""

    point_encoder: MlpWeights  # 3 -> C -> C, shared across frames
    backbone: BackboneWeights
    decoder: DecoderWeights


def init_pipeline_weights(config, seed):
    """Draw a full weight bundle from one seed (uniform on [-0.1, 0.1])."""
    rng = np.random.default_rng(seed)
    c = config.channels
    point_encoder = MlpWeights.seeded(3, c, c, rng)
    backbone = BackboneWeights.seeded(config.stdcb_config(), rng)
    offset_encoder = MlpWeights.seeded(3, c, c, rng)
    ssm_layers = tuple(
        SsmParams.seeded(2 * c, config.state_size, c, rng)
        for _ in range(config.decoder_layers)
    )
    head = FlowHeadWeights.seeded(c, rng)
    return PipelineWeights(
        point_encoder=point_encoder,
        backbone=backbone,
        decoder=DecoderWeights(
            offset_encoder=offset_encoder, ssm_layers=ssm_layers, head=head
        ),
    )


def zero_pipeline_weights(config):
    """All-zero bundle; useful for the zero-network sanity contract."""
    c = config.channels
    seeded = init_pipeline_weights(config, 0)

    def zero_kernel(k):
        return ConvKernel4D(
            weights=np.zeros_like(k.weights),
            bias=np.zeros_like(k.bias),
            dilation_t=k.dilation_t,
        )

    def zero_sfsm(w):
        return SfsmWeights(
            conv_w=np.zeros_like(w.conv_w), conv_b=np.zeros_like(w.conv_b),
            bn_scale=np.ones_like(w.bn_scale), bn_shift=np.zeros_like(w.bn_shift),
            bn_mean=np.zeros_like(w.bn_mean), bn_var=np.ones_like(w.bn_var),
        )

    def zero_block(b):
        return StdcbWeights(
            conv_spatial=zero_kernel(b.conv_spatial),
            conv_temporal=zero_kernel(b.conv_temporal),
            conv_cross=zero_kernel(b.conv_cross),
            sfsm_temporal=zero_sfsm(b.sfsm_temporal),
            gate=GateWeights(
                w1=np.zeros_like(b.gate.w1), b1=np.zeros_like(b.gate.b1),
                w2=np.zeros_like(b.gate.w2), b2=np.zeros_like(b.gate.b2),
            ),
            sfsm_fuse=zero_sfsm(b.sfsm_fuse),
            fuse_w=np.zeros_like(b.fuse_w), fuse_b=np.zeros_like(b.fuse_b),
        )

    backbone = BackboneWeights(
        encoder=tuple(tuple(zero_block(b) for b in stack) for stack in seeded.backbone.encoder),
        decoder=tuple(tuple(zero_block(b) for b in stack) for stack in seeded.backbone.decoder),
    )
    return PipelineWeights(
        point_encoder=MlpWeights.zeros(3, c, c),
        backbone=backbone,
        decoder=DecoderWeights(
            offset_encoder=MlpWeights.zeros(3, c, c),
            ssm_layers=tuple(
                SsmParams.zeros(2 * c, config.state_size, c)
                for _ in range(config.decoder_layers)
            ),
            head=FlowHeadWeights.zeros(c),
        ),
    )


# --- SFWT round trip ---------------------------------------------------------


def pipeline_weights_to_dict(weights):
    flat = {}
    for name in ("w1", "b1", "w2", "b2"):
        flat[f"point_encoder.{name}"] = getattr(weights.point_encoder, name)
        flat[f"decoder.offset_encoder.{name}"] = getattr(
            weights.decoder.offset_encoder, name
        )
        flat[f"decoder.head.{name}"] = getattr(weights.decoder.head, name)
    for i, params in enumerate(weights.decoder.ssm_layers):
        for name in ("a_log", "d", "w_delta", "b_delta", "w_b", "w_c"):
            flat[f"decoder.ssm.{i}.{name}"] = getattr(params, name)
    for side, stacks in (("encoder", weights.backbone.encoder),
                         ("decoder", weights.backbone.decoder)):
        for li, stack in enumerate(stacks):
            for bi, block in enumerate(stack):
                base = f"backbone.{side}.{li}.{bi}"
                for conv in ("conv_spatial", "conv_temporal", "conv_cross"):
                    kernel = getattr(block, conv)
                    flat[f"{base}.{conv}.weights"] = kernel.weights
                    flat[f"{base}.{conv}.bias"] = kernel.bias
                    flat[f"{base}.{conv}.dilation_t"] = np.array(
                        float(kernel.dilation_t)
                    )
                for gate_name in ("sfsm_temporal", "sfsm_fuse"):
                    gate = getattr(block, gate_name)
                    for part in ("conv_w", "conv_b", "bn_scale", "bn_shift",
                                 "bn_mean", "bn_var"):
                        flat[f"{base}.{gate_name}.{part}"] = getattr(gate, part)
                for part in ("w1", "b1", "w2", "b2"):
                    flat[f"{base}.gate.{part}"] = getattr(block.gate, part)
                flat[f"{base}.fuse_w"] = block.fuse_w
                flat[f"{base}.fuse_b"] = block.fuse_b
    return flat


def pipeline_weights_from_dict(flat, config):
    """Rebuild the structured bundle; missing sections raise ShapeError."""

    def pull(name):
        if name not in flat:
            raise ShapeError(f"weight file is missing section {name!r}")
        return flat[name]

    def mlp(prefix):
        return MlpWeights(*(pull(f"{prefix}.{k}") for k in ("w1", "b1", "w2", "b2")))

    def kernel(prefix):
        return ConvKernel4D(
            weights=pull(f"{prefix}.weights"),
            bias=pull(f"{prefix}.bias"),
            dilation_t=int(pull(f"{prefix}.dilation_t")),
        )

    def sfsm_w(prefix):
        return SfsmWeights(
            *(pull(f"{prefix}.{p}") for p in ("conv_w", "conv_b", "bn_scale",
                                              "bn_shift", "bn_mean", "bn_var"))
        )

    def block(base):
        return StdcbWeights(
            conv_spatial=kernel(f"{base}.conv_spatial"),
            conv_temporal=kernel(f"{base}.conv_temporal"),
            conv_cross=kernel(f"{base}.conv_cross"),
            sfsm_temporal=sfsm_w(f"{base}.sfsm_temporal"),
            gate=GateWeights(*(pull(f"{base}.gate.{p}") for p in ("w1", "b1", "w2", "b2"))),
            sfsm_fuse=sfsm_w(f"{base}.sfsm_fuse"),
            fuse_w=pull(f"{base}.fuse_w"),
            fuse_b=pull(f"{base}.fuse_b"),
        )

    stdcb_cfg = config.stdcb_config()
    encoder = tuple(
        tuple(block(f"backbone.encoder.{li}.{bi}") for bi in range(depth))
        for li, depth in enumerate(stdcb_cfg.encoder_depths)
    )
    bdecoder = tuple(
        tuple(block(f"backbone.decoder.{li}.{bi}") for bi in range(depth))
        for li, depth in enumerate(stdcb_cfg.decoder_depths)
    )
    ssm_layers = tuple(
        SsmParams(
            *(pull(f"decoder.ssm.{i}.{k}")
              for k in ("a_log", "d", "w_delta", "b_delta", "w_b", "w_c"))
        )
        for i in range(config.decoder_layers)
    )
    return PipelineWeights(
        point_encoder=mlp("point_encoder"),
        backbone=BackboneWeights(encoder=encoder, decoder=bdecoder),
        decoder=DecoderWeights(
            offset_encoder=mlp("decoder.offset_encoder"),
            ssm_layers=ssm_layers,
            head=FlowHeadWeights(
                *(pull(f"decoder.head.{k}") for k in ("w1", "b1", "w2", "b2"))
            ),
        ),
    )


def save_pipeline_weights(weights, path):
    save_weight_dict(pipeline_weights_to_dict(weights), path)


def load_pipeline_weights(path, config):
    return pipeline_weights_from_dict(load_weight_dict(path), config)


# --- Inference ---------------------------------------------------------------


@dataclass
class InferenceTrace:
    """Intermediates kept for debugging and tests."""

    results: list = field(default_factory=list)
    voxel_features: list = field(default_factory=list)
    stacked: object = None
    backbone_out: object = None
    frame_t_voxel_features: object = None
    coarse_point_features: object = None


def infer_flow(scene, weights, config, trace=None):
    """Predict per-point flow for the scene's prediction frame."""
    grid = config.grid()
    slot = FRAME_T if config.decode_frame == "t" else FRAME_T1
    results, voxel_feats = [], []
    point_feats_t = None
    for frame in scene.frames:
        res = voxelize(frame, grid)
        pf = encode_point_features(frame, weights.point_encoder)
        results.append(res)
        voxel_feats.append(pool_to_voxels(pf, res))
        if frame.frame_index == slot:
            point_feats_t = pf

    stacked = stack_temporal(results, voxel_feats)
    refined = backbone_forward(stacked, config.stdcb_config(), weights.backbone)

    res_t = results[slot]
    keys = np.empty((res_t.n_voxels, 4), dtype=np.int64)
    keys[:, 0] = slot
    keys[:, 1:] = res_t.voxel_coords
    idx, found = refined.lookup(keys)
    if not np.all(found):
        raise ShapeError("backbone dropped prediction-frame voxels")
    f3d_t = refined.features[idx]

    flow = decode(
        f3d_t, point_feats_t, res_t.offsets, res_t, weights.decoder,
        config.decoder_config(),
    )
    if trace is not None:
        trace.results = results
        trace.voxel_features = voxel_feats
        trace.stacked = stacked
        trace.backbone_out = refined
        trace.frame_t_voxel_features = f3d_t
        trace.coarse_point_features = point_feats_t
    return flow
