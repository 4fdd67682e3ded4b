"""DeepNTL networks.

The model reconstructs a target-year VIIRS-like tile from

* the DMSP tiles of the reference and the target year, each passed through
  the same RCAN feature extractor ``f1`` (doubles height and width),
* the VIIRS tile of the reference year, passed through the ResNet ``f3``.

The two ``f1`` outputs are concatenated and fed to the ResNet ``hstar``,
which turns the DMSP annual difference into a VIIRS-feature difference.
``gstar`` takes ``[f3(viirs_ref), hstar(...)]`` and reconstructs the image.

Parameters live in a flat ``dict`` keyed by dotted paths such as
``"f1.rg0.rcab1.ca.down.weight"``; the key set and every shape follow from a
:class:`ModelConfig` alone.
"""
from __future__ import annotations

import struct
from dataclasses import asdict, dataclass
from typing import Dict

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import CheckpointError, ConfigError, ShapeError

Params = Dict[str, Tensor]

CHECKPOINT_MAGIC = b"NTLC"
CHECKPOINT_VERSION = 1
VARIANTS = ("deepntl", "linear")


@dataclass(frozen=True)
class ResNetConfig:
    inp: int
    mid: int
    out: int
    blocks: int


@dataclass(frozen=True)
class RCANConfig:
    dim: int
    groups: int
    blocks: int
    reduction: int


@dataclass(frozen=True)
class ModelConfig:
    """Tile size, fusion width ``c`` and per-module hyperparameters.

    ``variant="linear"`` selects the subtraction-based ablation, where
    ``gstar`` takes ``c`` input channels.  ``dmsp_scale`` and ``viirs_scale``
    divide raw DNs / radiances before they enter the network (and the output
    is multiplied back by ``viirs_scale``).
    """

    h: int
    w: int
    c: int
    f3: ResNetConfig
    hstar: ResNetConfig
    gstar: ResNetConfig
    f1: RCANConfig
    variant: str = "deepntl"
    dmsp_scale: float = 63.0
    viirs_scale: float = 496.0

    def __post_init__(self):
        self.validate()

    def validate(self):
        problems = []
        if self.variant not in VARIANTS:
            problems.append(f"variant must be one of {VARIANTS}")
        if min(self.h, self.w, self.c) < 1:
            problems.append("h, w and c must be positive")
        for name in ("f3", "hstar", "gstar"):
            rc = getattr(self, name)
            if min(rc.inp, rc.mid, rc.out, rc.blocks) < 1:
                problems.append(f"{name}: all sizes must be positive")
        if self.f3.inp != 1:
            problems.append("f3.inp must be 1")
        if self.f3.out != self.c:
            problems.append("f3.out must equal c")
        if self.variant == "deepntl":
            if self.hstar.inp != 2:
                problems.append("hstar.inp must be 2")
            if self.hstar.out != self.c:
                problems.append("hstar.out must equal c")
            if self.gstar.inp != 2 * self.c:
                problems.append("gstar.inp must equal 2c")
        elif self.gstar.inp != self.c:
            problems.append("gstar.inp must equal c for the linear variant")
        if self.gstar.out != 1:
            problems.append("gstar.out must be 1")
        f1 = self.f1
        if min(f1.dim, f1.groups, f1.blocks, f1.reduction) < 1:
            problems.append("f1: all sizes must be positive")
        elif f1.dim % f1.reduction:
            problems.append("f1.dim must be divisible by f1.reduction")
        if not (self.dmsp_scale > 0 and self.viirs_scale > 0):
            problems.append("input scales must be positive")
        if problems:
            raise ConfigError("invalid model config: " + "; ".join(problems))

    @classmethod
    def full(cls, h: int = 128, w: int = 128) -> "ModelConfig":
        """Full-size hyperparameters."""
        return cls(h, w, 32,
                   f3=ResNetConfig(1, 32, 32, 16),
                   hstar=ResNetConfig(2, 32, 32, 32),
                   gstar=ResNetConfig(64, 64, 1, 32),
                   f1=RCANConfig(64, 6, 6, 16))

    @classmethod
    def toy(cls, h: int = 4, w: int = 4, c: int = 2, dim: int = 4, groups: int = 1,
            blocks: int = 1, resblocks: int = 1, reduction: int = 2,
            variant: str = "deepntl") -> "ModelConfig":
        """Small configuration for tests and desk-scale training."""
        g_inp = 2 * c if variant == "deepntl" else c
        return cls(h, w, c,
                   f3=ResNetConfig(1, c, c, resblocks),
                   hstar=ResNetConfig(2, c, c, resblocks),
                   gstar=ResNetConfig(g_inp, g_inp, 1, resblocks),
                   f1=RCANConfig(dim, groups, blocks, reduction),
                   variant=variant)

    def as_dict(self) -> dict:
        return asdict(self)


# --------------------------------------------------------------------------
# parameter layout

@dataclass(frozen=True)
class _Slot:
    shape: tuple
    kind: str  # weight, bias, gamma, beta, mean, var
    fan_in: int = 0


def _conv(slots, key, cout, cin, k, bias=True):
    slots[f"{key}.weight"] = _Slot((cout, cin, k, k), "weight", cin * k * k)
    if bias:
        slots[f"{key}.bias"] = _Slot((cout,), "bias")


def _norm(slots, key, c):
    slots[f"{key}.gamma"] = _Slot((c,), "gamma")
    slots[f"{key}.beta"] = _Slot((c,), "beta")
    slots[f"{key}.running_mean"] = _Slot((c,), "mean")
    slots[f"{key}.running_var"] = _Slot((c,), "var")


def _resnet_slots(slots, prefix, rc: ResNetConfig):
    for s in range(rc.blocks):
        cin = rc.inp if s == 0 else rc.mid
        b = f"{prefix}.block{s}"
        _conv(slots, f"{b}.conv1", rc.mid, cin, 3, bias=False)
        _norm(slots, f"{b}.norm1", rc.mid)
        _conv(slots, f"{b}.conv2", rc.mid, rc.mid, 3, bias=False)
        _norm(slots, f"{b}.norm2", rc.mid)
        if s == 0 and rc.inp != rc.mid:
            _conv(slots, f"{b}.skip", rc.mid, rc.inp, 3)
    if rc.inp != rc.mid:
        _conv(slots, f"{prefix}.long_skip", rc.mid, rc.inp, 3)
    _conv(slots, f"{prefix}.tail", rc.out, rc.mid, 3, bias=False)
    _norm(slots, f"{prefix}.tail_norm", rc.out)


def _rcan_slots(slots, prefix, rc: RCANConfig):
    d = rc.dim
    _conv(slots, f"{prefix}.shallow", d, 1, 3)
    for g in range(rc.groups):
        for b in range(rc.blocks):
            k = f"{prefix}.rg{g}.rcab{b}"
            _conv(slots, f"{k}.conv", d, d, 3)
            _conv(slots, f"{k}.ca.down", d // rc.reduction, d, 1)
            _conv(slots, f"{k}.ca.up", d, d // rc.reduction, 1)
        _conv(slots, f"{prefix}.rg{g}.conv", d, d, 3)
    _conv(slots, f"{prefix}.body", d, d, 3)
    _conv(slots, f"{prefix}.upscale", 4 * d, d, 3)
    _conv(slots, f"{prefix}.recon", 1, d, 3)


def param_layout(cfg: ModelConfig) -> dict[str, _Slot]:
    """Ordered mapping from parameter key to shape and role."""
    slots: dict[str, _Slot] = {}
    _rcan_slots(slots, "f1", cfg.f1)
    _resnet_slots(slots, "f3", cfg.f3)
    if cfg.variant == "deepntl":
        _resnet_slots(slots, "hstar", cfg.hstar)
    else:
        _conv(slots, "h", cfg.c, 1, 1)
    _resnet_slots(slots, "gstar", cfg.gstar)
    return slots


def init_params(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> Params:
    """Conv weights uniform in +-1/sqrt(fan_in); biases and BN shifts 0,
    BN scales and running variances 1."""
    rng = np.random.default_rng(seed)
    params: Params = {}
    for key, slot in param_layout(cfg).items():
        if slot.kind == "weight":
            bound = 1.0 / np.sqrt(slot.fan_in)
            data = rng.uniform(-bound, bound, size=slot.shape)
        elif slot.kind in ("gamma", "var"):
            data = np.ones(slot.shape)
        else:
            data = np.zeros(slot.shape)
        params[key] = Tensor(data.astype(dtype), requires_grad=slot.kind not in ("mean", "var"))
    return params


def trainable(params: Params) -> dict[str, Tensor]:
    return {k: t for k, t in params.items() if t.requires_grad}


def params_astype(params: Params, dtype) -> Params:
    return {k: Tensor(t.data.astype(dtype), requires_grad=t.requires_grad)
            for k, t in params.items()}


def copy_params(params: Params) -> Params:
    return {k: Tensor(t.data.copy(), requires_grad=t.requires_grad) for k, t in params.items()}


# --------------------------------------------------------------------------
# building blocks

def _conv_apply(x, p, key, pad=1):
    return ad.conv2d(x, p[f"{key}.weight"], p.get(f"{key}.bias"), stride=1, pad=pad)


def _norm_apply(x, p, key, training):
    return ad.batch_norm(x, p[f"{key}.gamma"], p[f"{key}.beta"],
                         p[f"{key}.running_mean"].data, p[f"{key}.running_var"].data, training)


def resnet_forward(x: Tensor, p: Params, cfg: ResNetConfig, training: bool,
                   prefix: str = "resnet") -> Tensor:
    """Stacked residual blocks with a long skip, then Conv-Norm-ReLU to
    ``cfg.out`` channels.  Spatial size is preserved."""
    if x.ndim != 4 or x.shape[1] != cfg.inp:
        raise ShapeError(f"expected (N,{cfg.inp},H,W), got {x.shape}", prefix)
    first = x
    y = x
    for s in range(cfg.blocks):
        b = f"{prefix}.block{s}"
        z = ad.relu(_norm_apply(_conv_apply(y, p, f"{b}.conv1"), p, f"{b}.norm1", training))
        z = _norm_apply(_conv_apply(z, p, f"{b}.conv2"), p, f"{b}.norm2", training)
        skip = _conv_apply(y, p, f"{b}.skip") if f"{b}.skip.weight" in p else y
        y = ad.relu(ad.add(z, skip))
    long_skip = _conv_apply(first, p, f"{prefix}.long_skip") \
        if f"{prefix}.long_skip.weight" in p else first
    y = ad.add(y, long_skip)
    return ad.relu(_norm_apply(_conv_apply(y, p, f"{prefix}.tail"), p,
                               f"{prefix}.tail_norm", training))


def channel_attention(x: Tensor, p: Params, e: int, prefix: str = "ca") -> Tensor:
    """Gate each channel of ``x`` by a weight in (0, 1) computed from its
    global average through a ``dim -> dim/e -> dim`` bottleneck."""
    dim = x.shape[1]
    if dim % e:
        raise ShapeError(f"{dim} channels not divisible by reduction {e}", prefix)
    w = ad.global_avg_pool(x)
    w = ad.relu(_conv_apply(w, p, f"{prefix}.down", pad=0))
    w = ad.sigmoid(_conv_apply(w, p, f"{prefix}.up", pad=0))
    return ad.mul(x, w)


def rcan_forward(x: Tensor, p: Params, cfg: RCANConfig, training: bool = False,
                 prefix: str = "f1") -> Tensor:
    """Residual channel attention network; ``(N,1,h,w) -> (N,1,2h,2w)``."""
    if x.ndim != 4 or x.shape[1] != 1:
        raise ShapeError(f"expected (N,1,h,w), got {x.shape}", prefix)
    shallow = _conv_apply(x, p, f"{prefix}.shallow")
    y = shallow
    for g in range(cfg.groups):
        group_in = y
        for b in range(cfg.blocks):
            k = f"{prefix}.rg{g}.rcab{b}"
            y = ad.add(y, channel_attention(_conv_apply(y, p, f"{k}.conv"), p,
                                            cfg.reduction, f"{k}.ca"))
        y = ad.add(group_in, _conv_apply(y, p, f"{prefix}.rg{g}.conv"))
    y = ad.add(shallow, _conv_apply(y, p, f"{prefix}.body"))
    y = ad.pixel_shuffle(_conv_apply(y, p, f"{prefix}.upscale"), 2)
    return _conv_apply(y, p, f"{prefix}.recon")


def _check_inputs(dmsp_ref, dmsp_tgt, viirs_ref):
    for name, t in (("dmsp_ref", dmsp_ref), ("dmsp_tgt", dmsp_tgt), ("viirs_ref", viirs_ref)):
        if t.ndim != 4 or t.shape[1] != 1:
            raise ShapeError(f"{name} must be (N,1,H,W), got {t.shape}", "input")
    if dmsp_ref.shape != dmsp_tgt.shape:
        raise ShapeError(f"dmsp_ref {dmsp_ref.shape} != dmsp_tgt {dmsp_tgt.shape}", "input")
    n, _, h, w = dmsp_ref.shape
    if viirs_ref.shape != (n, 1, 2 * h, 2 * w):
        raise ShapeError(f"viirs_ref must be {(n, 1, 2 * h, 2 * w)}, got {viirs_ref.shape}",
                         "input")


def deepntl_forward(dmsp_ref: Tensor, dmsp_tgt: Tensor, viirs_ref: Tensor, p: Params,
                    cfg: ModelConfig, training: bool = False) -> Tensor:
    """Target-year VIIRS-like tile ``(N,1,2h,2w)``, nonnegative.

    Inputs are expected in model units (already divided by the config's
    scales); see :func:`to_model_units`.
    """
    if cfg.variant != "deepntl":
        raise ConfigError(f"config variant is {cfg.variant!r}, expected 'deepntl'")
    _check_inputs(dmsp_ref, dmsp_tgt, viirs_ref)
    f_ref = rcan_forward(dmsp_ref, p, cfg.f1, training, "f1")
    f_tgt = rcan_forward(dmsp_tgt, p, cfg.f1, training, "f1")
    diff = resnet_forward(ad.concat_channels(f_ref, f_tgt), p, cfg.hstar, training, "hstar")
    base = resnet_forward(viirs_ref, p, cfg.f3, training, "f3")
    out = resnet_forward(ad.concat_channels(base, diff), p, cfg.gstar, training, "gstar")
    return ad.relu(out)


def linear_prototype_forward(dmsp_ref: Tensor, dmsp_tgt: Tensor, viirs_ref: Tensor,
                             p: Params, cfg: ModelConfig, training: bool = False) -> Tensor:
    """Ablation with literal subtraction:
    ``gstar(f3(viirs_ref) - h(f1(dmsp_ref) - f1(dmsp_tgt)))``, ``h`` a 1x1 conv."""
    if cfg.variant != "linear":
        raise ConfigError(f"config variant is {cfg.variant!r}, expected 'linear'")
    _check_inputs(dmsp_ref, dmsp_tgt, viirs_ref)
    f_ref = rcan_forward(dmsp_ref, p, cfg.f1, training, "f1")
    f_tgt = rcan_forward(dmsp_tgt, p, cfg.f1, training, "f1")
    diff = _conv_apply(ad.sub(f_ref, f_tgt), p, "h", pad=0)
    base = resnet_forward(viirs_ref, p, cfg.f3, training, "f3")
    return ad.relu(resnet_forward(ad.sub(base, diff), p, cfg.gstar, training, "gstar"))


def forward(dmsp_ref, dmsp_tgt, viirs_ref, p: Params, cfg: ModelConfig,
            training: bool = False) -> Tensor:
    """Dispatch on ``cfg.variant``."""
    fn = deepntl_forward if cfg.variant == "deepntl" else linear_prototype_forward
    return fn(dmsp_ref, dmsp_tgt, viirs_ref, p, cfg, training)


def to_model_units(dmsp_ref, dmsp_tgt, viirs_ref, cfg: ModelConfig, dtype=np.float32):
    """Stack raw arrays ``(N,h,w)``/``(N,2h,2w)`` into scaled ``(N,1,...)`` tensors."""
    def prep(a, scale):
        a = np.asarray(a, dtype=np.float64) / scale
        return Tensor(a[:, None].astype(dtype))
    return (prep(dmsp_ref, cfg.dmsp_scale), prep(dmsp_tgt, cfg.dmsp_scale),
            prep(viirs_ref, cfg.viirs_scale))


# --------------------------------------------------------------------------
# checkpoints

_CFG_STRUCT = struct.Struct("<3I4I4I4I4IBdd")


def _pack_config(cfg: ModelConfig) -> bytes:
    return _CFG_STRUCT.pack(
        cfg.h, cfg.w, cfg.c,
        cfg.f3.inp, cfg.f3.mid, cfg.f3.out, cfg.f3.blocks,
        cfg.hstar.inp, cfg.hstar.mid, cfg.hstar.out, cfg.hstar.blocks,
        cfg.gstar.inp, cfg.gstar.mid, cfg.gstar.out, cfg.gstar.blocks,
        cfg.f1.dim, cfg.f1.groups, cfg.f1.blocks, cfg.f1.reduction,
        VARIANTS.index(cfg.variant), cfg.dmsp_scale, cfg.viirs_scale)


def _unpack_config(buf: bytes, offset: int) -> ModelConfig:
    v = _CFG_STRUCT.unpack_from(buf, offset)
    if v[19] >= len(VARIANTS):
        raise CheckpointError(f"unknown model variant code {v[19]}")
    try:
        return ModelConfig(v[0], v[1], v[2], ResNetConfig(*v[3:7]), ResNetConfig(*v[7:11]),
                           ResNetConfig(*v[11:15]), RCANConfig(*v[15:19]),
                           VARIANTS[v[19]], v[20], v[21])
    except ConfigError as exc:
        raise CheckpointError(f"checkpoint holds an invalid config: {exc}") from None


def save_checkpoint(p: Params, cfg: ModelConfig) -> bytes:
    """Serialise parameters (float32) together with their config."""
    _validate_params(p, cfg, CheckpointError)
    out = [CHECKPOINT_MAGIC, struct.pack("<H", CHECKPOINT_VERSION), _pack_config(cfg),
           struct.pack("<I", len(p))]
    for key, t in p.items():
        kb = key.encode("utf-8")
        out.append(struct.pack("<H", len(kb)) + kb + struct.pack("<B", t.ndim))
        out.append(struct.pack(f"<{t.ndim}I", *t.shape))
        out.append(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    return b"".join(out)


def load_checkpoint(payload: bytes) -> tuple[Params, ModelConfig]:
    buf = bytes(payload)
    if buf[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad magic {buf[:4]!r}, expected {CHECKPOINT_MAGIC!r}")
    try:
        (version,) = struct.unpack_from("<H", buf, 4)
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        off = 6
        cfg = _unpack_config(buf, off)
        off += _CFG_STRUCT.size
        (count,) = struct.unpack_from("<I", buf, off)
        off += 4
        layout = param_layout(cfg)
        params: Params = {}
        for _ in range(count):
            (klen,) = struct.unpack_from("<H", buf, off)
            off += 2
            if off + klen > len(buf):
                raise CheckpointError("truncated checkpoint (key)")
            key = buf[off:off + klen].decode("utf-8")
            off += klen
            (rank,) = struct.unpack_from("<B", buf, off)
            off += 1
            dims = struct.unpack_from(f"<{rank}I", buf, off)
            off += 4 * rank
            n = int(np.prod(dims)) if rank else 1
            if off + 4 * n > len(buf):
                raise CheckpointError(f"truncated checkpoint (payload of {key!r})")
            data = np.frombuffer(buf, dtype="<f4", count=n, offset=off).reshape(dims).copy()
            off += 4 * n
            slot = layout.get(key)
            if key in params:
                raise CheckpointError(f"duplicate parameter {key!r}")
            params[key] = Tensor(data.astype(np.float32),
                                 requires_grad=slot is not None and slot.kind not in ("mean", "var"))
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from None
    except UnicodeDecodeError:
        raise CheckpointError("corrupt parameter key") from None
    if off != len(buf):
        raise CheckpointError(f"{len(buf) - off} trailing bytes in checkpoint")
    _validate_params(params, cfg, CheckpointError)
    return params, cfg


def _validate_params(p: Params, cfg: ModelConfig, exc=ShapeError):
    layout = param_layout(cfg)
    missing = [k for k in layout if k not in p]
    extra = [k for k in p if k not in layout]
    if missing or extra:
        raise exc(f"parameters do not match config: missing {missing[:3]}, unexpected {extra[:3]}")
    for k, slot in layout.items():
        if p[k].shape != slot.shape:
            raise exc(f"parameter {k!r} has shape {p[k].shape}, config expects {slot.shape}")


def params_equal(a: Params, b: Params) -> bool:
    """Bit-exact equality of two parameter sets (keys, order, shapes, values)."""
    return list(a) == list(b) and all(
        a[k].shape == b[k].shape and a[k].data.tobytes() == b[k].data.tobytes() for k in a)
