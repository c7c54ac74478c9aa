"""Full FasterViT networks: stem, conv stages, downsamplers, HAT stages, head."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

from .errors import ConfigError, DimensionError
from .hat import (HatStageConfig, HatStageParams, WindowStageParams, ct_path_param_count,
                  hat_stage, init_hat_stage)
from .nn import (Conv2dParams, NormParams, batchnorm, conv2d, gelu, layernorm, layernorm_2d,
                 linear, relu)
from .params import ParamFactory, count, named_tensors
from .tensor import Tensor

STAGE_KINDS = ("res", "hat")


@dataclass(frozen=True)
class StageSpec:
    dim: int
    depth: int
    kind: str = "res"
    heads: int | None = None
    window: int = 7
    L: int = 4


@dataclass(frozen=True)
class VariantSpec:
    """A whole-network description: stem, four stages, classification head.

    ``stem_strides`` defaults to (2, 1): the stem halves the resolution and
    every stage (including the first) opens with a stride-2 downsampler, giving
    the 2/4/8/16/32 downsampling sequence.
    """

    name: str
    stem_dims: tuple[int, int]
    stages: tuple[StageSpec, ...]
    stem_strides: tuple[int, int] = (2, 1)
    in_chans: int = 3
    num_classes: int = 1000
    input_size: int = 224
    use_abs_bias: bool = True
    use_rel_bias: bool = True
    use_layerscale: bool = True
    layerscale_init: float = 1e-5
    bias_hidden: int = 32
    eps: float = 1e-5

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if len(self.stages) != 4:
            raise ConfigError(f"expected 4 stages, got {len(self.stages)}", "four_stages")
        for i, st in enumerate(self.stages, 1):
            if st.kind not in STAGE_KINDS:
                raise ConfigError(f"stage{i}: unknown block kind {st.kind!r}", "block_kind")
            if st.dim < 1 or st.depth < 0:
                raise ConfigError(f"stage{i}: dim/depth must be positive", "positive_dims")
        total = self.stem_strides[0] * self.stem_strides[1] * 16
        if self.input_size % total:
            raise ConfigError(f"input size {self.input_size} not divisible by {total}",
                              "input_divisible")
        for i, _ in enumerate(self.stages):
            if self.stages[i].kind == "hat":
                self.stage_config(i)  # raises on bad geometry

    def stage_resolution(self, i: int, input_size: int | None = None) -> int:
        size = self.input_size if input_size is None else input_size
        return size // (self.stem_strides[0] * self.stem_strides[1] * 2 ** (i + 1))

    def stage_config(self, i: int, input_size: int | None = None) -> HatStageConfig:
        st = self.stages[i]
        H = self.stage_resolution(i, input_size)
        try:
            return HatStageConfig(H=H, d=st.dim, k=min(st.window, H), L=st.L,
                                  heads=st.heads or 1, depth=st.depth,
                                  use_abs_bias=self.use_abs_bias, use_rel_bias=self.use_rel_bias,
                                  use_layerscale=self.use_layerscale,
                                  layerscale_init=self.layerscale_init,
                                  bias_hidden=self.bias_hidden, eps=self.eps)
        except ConfigError as e:
            raise ConfigError(f"stage{i + 1}: {e}", e.constraint) from None

    def scaled(self, width_div: int) -> "VariantSpec":
        """Same topology with every channel count divided by ``width_div``.

        Head counts drop to the largest divisor of the new width not exceeding
        the original count, so head_dim stays integral.
        """
        if width_div == 1:
            return self

        def w(c):
            return max(1, round(c / width_div))

        stages = []
        for st in self.stages:
            dim = w(st.dim)
            heads = st.heads
            if heads is not None:
                heads = max(h for h in range(1, heads + 1) if dim % h == 0)
            stages.append(dataclasses.replace(st, dim=dim, heads=heads))
        return dataclasses.replace(self, name=f"{self.name}/w{width_div}",
                                   stem_dims=(w(self.stem_dims[0]), w(self.stem_dims[1])),
                                   stages=tuple(stages))


def _hat(dim, depth, heads):
    return StageSpec(dim=dim, depth=depth, kind="hat", heads=heads)


def _res(dim, depth):
    return StageSpec(dim=dim, depth=depth, kind="res")


# FasterViT-1..4 architecture configurations.
VARIANTS: dict[str, VariantSpec] = {
    "faster_vit_1": VariantSpec("faster_vit_1", (32, 80),
                                (_res(160, 1), _res(320, 3), _hat(640, 8, 8), _hat(1280, 5, 16))),
    "faster_vit_2": VariantSpec("faster_vit_2", (64, 96),
                                (_res(192, 3), _res(384, 3), _hat(768, 8, 8), _hat(1536, 5, 16))),
    "faster_vit_3": VariantSpec("faster_vit_3", (64, 128),
                                (_res(256, 3), _res(512, 3), _hat(1024, 12, 8),
                                 _hat(2048, 5, 16))),
    "faster_vit_4": VariantSpec("faster_vit_4", (64, 196),
                                (_res(392, 3), _res(768, 3), _hat(1568, 12, 16),
                                 _hat(3136, 5, 32))),
}

# Reported parameter counts (millions) for reference output only.
REPORTED_PARAMS_M = {"faster_vit_1": 53.4, "faster_vit_2": 75.9, "faster_vit_3": 159.5,
                  "faster_vit_4": 424.6}


def get_variant(name: str) -> VariantSpec:
    try:
        return VARIANTS[name]
    except KeyError:
        raise ConfigError(f"unknown variant {name!r}; known: {sorted(VARIANTS)}",
                          "known_variant") from None


# ---------------------------------------------------------------- params


@dataclass
class StemParams:
    conv1: Conv2dParams
    bn1: NormParams
    conv2: Conv2dParams
    bn2: NormParams


@dataclass
class ResBlockParams:
    conv1: Conv2dParams
    bn1: NormParams
    conv2: Conv2dParams
    bn2: NormParams

    @classmethod
    def init(cls, pf: ParamFactory, c: int, eps: float = 1e-5):
        return cls(conv1=Conv2dParams.init(pf, c, c, 3, bias=False),
                   bn1=NormParams.init(pf, c, "batchnorm", eps),
                   conv2=Conv2dParams.init(pf, c, c, 3, bias=False),
                   bn2=NormParams.init(pf, c, "batchnorm", eps))


@dataclass
class DownsamplerParams:
    norm: NormParams
    conv: Conv2dParams

    @classmethod
    def init(cls, pf: ParamFactory, c_in: int, c_out: int, eps: float = 1e-5):
        return cls(norm=NormParams.init(pf, c_in, "layernorm_2d", eps),
                   conv=Conv2dParams.init(pf, c_in, c_out, 3, stride=2, bias=False))


@dataclass
class StageParams:
    down: DownsamplerParams
    res_blocks: list[ResBlockParams] | None = None
    hat: HatStageParams | None = None


@dataclass
class HeadParams:
    norm: NormParams
    w: Tensor
    b: Tensor


@dataclass
class Model:
    spec: VariantSpec = field(metadata={"skip": True})
    stem: StemParams
    stage1: StageParams
    stage2: StageParams
    stage3: StageParams
    stage4: StageParams
    head: HeadParams

    @property
    def stages(self) -> list[StageParams]:
        return [self.stage1, self.stage2, self.stage3, self.stage4]

    def named_tensors(self):
        return named_tensors(self)

    def forward(self, x: Tensor, return_features: bool = False):
        return forward(self, x, return_features)

    __call__ = forward


# ---------------------------------------------------------------- blocks


def stem(x: Tensor, p: StemParams) -> Tensor:
    """Conv-BN-ReLU twice."""
    x = relu(batchnorm(conv2d(x, p.conv1), p.bn1))
    return relu(batchnorm(conv2d(x, p.conv2), p.bn2))


def res_block(x: Tensor, p: ResBlockParams) -> Tensor:
    """x + BN(Conv(GELU(BN(Conv(x)))))."""
    if x.shape[1] != p.conv1.weight.shape[1]:
        raise DimensionError(f"res_block expects {p.conv1.weight.shape[1]} channels, "
                             f"got {x.shape}")
    y = gelu(batchnorm(conv2d(x, p.conv1), p.bn1))
    return batchnorm(conv2d(y, p.conv2), p.bn2) + x


def downsampler(x: Tensor, p: DownsamplerParams) -> Tensor:
    """2D layer norm then a stride-2 3x3 conv."""
    if x.ndim != 4 or x.shape[2] % 2 or x.shape[3] % 2:
        raise DimensionError(f"downsampler needs even spatial dims, got {x.shape}")
    return conv2d(layernorm_2d(x, p.norm), p.conv)


# ---------------------------------------------------------------- build / forward


def build_variant(spec: VariantSpec | str, seed: int = 0, dtype="f32",
                  meta: bool = False) -> Model:
    """Initialise every parameter of a network (``meta=True``: shapes only)."""
    if isinstance(spec, str):
        spec = get_variant(spec)
    pf = ParamFactory(seed, dtype, meta)
    c1, c2 = spec.stem_dims
    s1, s2 = spec.stem_strides
    st = StemParams(conv1=Conv2dParams.init(pf, spec.in_chans, c1, 3, stride=s1, bias=False),
                    bn1=NormParams.init(pf, c1, "batchnorm", spec.eps),
                    conv2=Conv2dParams.init(pf, c1, c2, 3, stride=s2, bias=False),
                    bn2=NormParams.init(pf, c2, "batchnorm", spec.eps))
    stages = []
    c_in = c2
    for i, ss in enumerate(spec.stages):
        down = DownsamplerParams.init(pf, c_in, ss.dim, spec.eps)
        if ss.kind == "res":
            stages.append(StageParams(down=down, res_blocks=[
                ResBlockParams.init(pf, ss.dim, spec.eps) for _ in range(ss.depth)]))
        else:
            stages.append(StageParams(down=down, hat=init_hat_stage(spec.stage_config(i), pf)))
        c_in = ss.dim
    head = HeadParams(norm=NormParams.init(pf, c_in, eps=spec.eps),
                      w=pf.trunc_normal((c_in, spec.num_classes)),
                      b=pf.zeros((spec.num_classes,)))
    return Model(spec, st, *stages, head)


def forward(model: Model, x: Tensor, return_features: bool = False):
    """Logits (B, num_classes); optionally also the per-stage feature maps."""
    spec = model.spec
    if x.ndim != 4 or x.shape[1] != spec.in_chans or x.shape[2] != x.shape[3]:
        raise DimensionError(f"expected (B, {spec.in_chans}, S, S), got {x.shape}")
    size = x.shape[2]
    feats = []
    x = stem(x, model.stem)
    for i, (ss, sp) in enumerate(zip(spec.stages, model.stages)):
        x = downsampler(x, sp.down)
        if ss.kind == "res":
            for blk in sp.res_blocks:
                x = res_block(x, blk)
        else:
            cfg = spec.stage_config(i, size)
            x = hat_stage(x.permute(0, 2, 3, 1), cfg, sp.hat).permute(0, 3, 1, 2)
        feats.append(x)
    pooled = x.mean(axis=(2, 3))
    logits = linear(layernorm(pooled, model.head.norm), model.head.w, model.head.b)
    return (logits, feats) if return_features else logits


# ---------------------------------------------------------------- audits


def param_count(model: Model | VariantSpec | str) -> tuple[int, dict[str, int]]:
    """Exact trainable-scalar count with a stem/stage1..4/head breakdown.

    Accepts a spec (or registered name) too; it is built shape-only.
    """
    if not isinstance(model, Model):
        model = build_variant(model, meta=True)
    breakdown = {"stem": count(model.stem)}
    for i, sp in enumerate(model.stages, 1):
        breakdown[f"stage{i}"] = count(sp)
    breakdown["head"] = count(model.head)
    return sum(breakdown.values()), breakdown


def plug_hat_into(cfg: HatStageConfig, params: WindowStageParams, pf: ParamFactory,
                  L: int = 4) -> tuple[HatStageConfig, HatStageParams, dict]:
    """Upgrade a windowed-attention stage to a HAT stage.

    The windowed blocks are reused as the window+CT attention of each HAT
    block; only the carrier-token path is newly initialised. Returns the new
    config, parameters, and a report of added parameter shapes.
    """
    if cfg.L != 0:
        raise ConfigError("source stage already has carrier tokens", "source_is_windowed")
    if len(params.blocks) != cfg.depth:
        raise ConfigError(f"{len(params.blocks)} blocks for depth {cfg.depth}", "depth_matches")
    new_cfg = cfg.with_(L=L)
    fresh = init_hat_stage(new_cfg, pf)
    for blk, win in zip(fresh.blocks, params.blocks):
        blk.win_attn = win
    fresh.abs_bias = params.abs_bias
    added = {name: t.shape for name, t in named_tensors(fresh)
             if t.requires_grad and not _shared(t, params)}
    report = {"extra_params": ct_path_param_count(fresh), "added_shapes": added,
              "L": new_cfg.L_eff}
    return new_cfg, fresh, report


def _shared(t: Tensor, params) -> bool:
    return any(t is s for _, s in named_tensors(params))


def stage_resolutions(spec: VariantSpec, input_size: int | None = None) -> list[int]:
    return [spec.stage_resolution(i, input_size) for i in range(4)]


def macs_per_image(spec: VariantSpec, input_size: int | None = None) -> int:
    """Total MACs of one forward pass, counted on a shape-only model."""
    from .tensor import count_macs
    size = spec.input_size if input_size is None else input_size
    spec = dataclasses.replace(spec, input_size=size)
    model = build_variant(spec, meta=True)
    with count_macs() as c:
        forward(model, Tensor.meta((1, spec.in_chans, size, size), "f32"))
    return c.total


__all__ = ["StageSpec", "VariantSpec", "VARIANTS", "REPORTED_PARAMS_M", "get_variant",
           "StemParams", "ResBlockParams", "DownsamplerParams", "StageParams", "HeadParams",
           "Model", "stem", "res_block", "downsampler", "build_variant", "forward",
           "param_count", "plug_hat_into", "stage_resolutions", "macs_per_image"]
