"""Whole networks: U-Nets over the three block kinds, four down-sampling schemes.

The default configuration is the full model: SE-residual blocks, concatenated
skips, a single down-sampling in the first encoder block, encoder widths
32/40/48/56, and an output head that concatenates the raw input with the
up-sampled features before two 3x3x3 convs and a channel softmax.

Down-sampling scheme k strides down in the first k encoder blocks, each by 2
per axis; the decoder mirrors the encoder with one transposed-conv
up-sampling per down-sampling and symmetric widths. Down-sampling is a
stride-2 3x3x3 conv at the block entry (differentiable everywhere, keeps the
block count fixed); up-sampling is a stride-2 2x2x2 transposed conv (exact
inverse geometry).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, fields

import numpy as np

from .blocks import Conv3, MergeMode, SkipMerge, UpConv, make_block
from .metrics import LabelVolume
from .tensor import Tensor, channel_softmax, concat_channels, leaky_relu

__all__ = [
    "DOWN_FLAGS",
    "Network",
    "NetworkConfig",
    "build",
    "feature_map_shapes",
    "load_checkpoint",
    "predict_labels",
    "save_checkpoint",
]

# Which encoder blocks stride down, per scheme: scheme k halves resolution in
# the first k blocks, so cumulative reductions match (1/2), (1/4), ... layouts.
DOWN_FLAGS = {
    1: (True, False, False, False),
    2: (True, True, False, False),
    3: (True, True, True, False),
    4: (True, True, True, True),
}

_BLOCK_KINDS = ("plain", "residual", "se_residual")


@dataclass(frozen=True)
class NetworkConfig:
    """Declarative architecture description; build() turns it into parameters."""

    block_kind: str = "se_residual"
    merge: str = "concat"
    pool_scheme: int = 1
    encoder_channels: tuple = (32, 40, 48, 56)
    head_channels: int = 16
    num_classes: int = 10
    se_reduction: int = 4
    leaky_slope: float = 0.01

    def __post_init__(self):
        object.__setattr__(self, "encoder_channels", tuple(int(c) for c in self.encoder_channels))
        if self.block_kind not in _BLOCK_KINDS:
            raise ValueError(f"block_kind must be one of {_BLOCK_KINDS}, got {self.block_kind!r}")
        MergeMode(self.merge)
        if self.pool_scheme not in DOWN_FLAGS:
            raise ValueError(f"pool_scheme must be 1..4, got {self.pool_scheme}")
        if len(self.encoder_channels) != 4 or min(self.encoder_channels) < 1:
            raise ValueError(f"encoder_channels must be four positive ints, got {self.encoder_channels}")
        if self.head_channels < 1:
            raise ValueError(f"head_channels must be positive, got {self.head_channels}")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.se_reduction < 1:
            raise ValueError(f"se_reduction must be positive, got {self.se_reduction}")
        if not 0.0 < self.leaky_slope < 1.0:
            raise ValueError(f"leaky_slope must be in (0, 1), got {self.leaky_slope}")

    @property
    def max_reduction(self) -> int:
        return 2 ** sum(DOWN_FLAGS[self.pool_scheme])

    def to_dict(self) -> dict:
        return {
            "block_kind": self.block_kind,
            "merge": self.merge,
            "pool_scheme": self.pool_scheme,
            "encoder_channels": list(self.encoder_channels),
            "head_channels": self.head_channels,
            "num_classes": self.num_classes,
            "se_reduction": self.se_reduction,
            "leaky_slope": self.leaky_slope,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "NetworkConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown network config keys: {sorted(unknown)}")
        return cls(**doc)


def _check_divisible(spatial, divisor: int, scheme: int):
    for name, size in zip("SHW", spatial):
        if size % divisor:
            raise ValueError(
                f"input axis {name}={size} must be divisible by {divisor} "
                f"(pool scheme {scheme}); pad the volume explicitly"
            )


class Network:
    """An instantiated parameter graph; construct through build()."""

    def __init__(self, config: NetworkConfig, seed: int = 0):
        self.config = config
        rng = np.random.Generator(np.random.PCG64(int(seed)))
        widths = config.encoder_channels
        flags = DOWN_FLAGS[config.pool_scheme]
        kw = dict(slope=config.leaky_slope, reduction=config.se_reduction)

        self.encoder = []
        cin = 1
        for w, down in zip(widths, flags):
            self.encoder.append(
                make_block(config.block_kind, rng, cin, w, stride=2 if down else 1, **kw)
            )
            cin = w

        # Decoder stages run deepest-first; stage i rejoins encoder feature i.
        self.ups = []
        self.merges = []
        self.decoder = []
        cur = widths[3]
        for i in (2, 1, 0):
            self.ups.append(UpConv(rng, cur, cur) if flags[i + 1] else None)
            merge = SkipMerge(rng, MergeMode(config.merge), cur, widths[i])
            self.merges.append(merge)
            self.decoder.append(
                make_block(config.block_kind, rng, merge.out_channels, widths[i], **kw)
            )
            cur = widths[i]

        self.final_up = UpConv(rng, cur, cur) if flags[0] else None
        # The head always concatenates the raw input volume with the restored
        # features, regardless of the skip-merge mode used inside the decoder.
        self.head1 = Conv3(rng, 1 + cur, config.head_channels, 3)
        self.head2 = Conv3(rng, config.head_channels, config.num_classes, 3)

    # -- parameter bookkeeping ------------------------------------------------

    def parameters(self):
        """(name, tensor) pairs in deterministic build order."""
        out = []

        def grab(prefix, obj):
            if obj is None:
                return
            out.extend((f"{prefix}.{n}", p) for n, p in obj.parameters())

        for i, blk in enumerate(self.encoder):
            grab(f"enc{i + 1}", blk)
        for pos, i in enumerate((2, 1, 0)):
            grab(f"up{i + 1}", self.ups[pos])
            grab(f"merge{i + 1}", self.merges[pos])
            grab(f"dec{i + 1}", self.decoder[pos])
        grab("up_final", self.final_up)
        grab("head1", self.head1)
        grab("head2", self.head2)
        return out

    def param_tensors(self):
        return [p for _, p in self.parameters()]

    @property
    def parameter_count(self) -> int:
        return sum(p.size for _, p in self.parameters())

    def zero_grads(self):
        for _, p in self.parameters():
            p.zero_grad()

    # -- forward ----------------------------------------------------------------

    def forward_logits(self, volume: Tensor) -> Tensor:
        """Pre-softmax class scores, one channel per class, at input resolution."""
        if volume.ndim != 5 or volume.shape[1] != 1:
            raise ValueError(f"expected a [B,1,S,H,W] volume, got {volume.shape}")
        _check_divisible(volume.shape[2:], self.config.max_reduction, self.config.pool_scheme)

        feats = []
        x = volume
        for blk in self.encoder:
            x = blk(x)
            feats.append(x)
        for pos, i in enumerate((2, 1, 0)):
            if self.ups[pos] is not None:
                x = self.ups[pos](x)
            x = self.merges[pos](x, feats[i])
            x = self.decoder[pos](x)
        if self.final_up is not None:
            x = self.final_up(x)
        x = concat_channels(volume, x)
        x = leaky_relu(self.head1(x), self.config.leaky_slope)
        return self.head2(x)

    def forward(self, volume: Tensor) -> Tensor:
        """Per-voxel class probability maps (channel softmax of the logits)."""
        return channel_softmax(self.forward_logits(volume))

    def __call__(self, volume: Tensor) -> Tensor:
        return self.forward(volume)


def build(config: NetworkConfig, seed: int = 0) -> Network:
    """Deterministically instantiate a network: same (config, seed), same bits."""
    return Network(config, seed)


def predict_labels(probabilities: Tensor, spacing=(1.0, 1.0, 1.0)) -> LabelVolume:
    """Per-voxel argmax class IDs; ties resolve to the lowest class index."""
    p = probabilities.data if isinstance(probabilities, Tensor) else np.asarray(probabilities)
    if p.ndim != 5 or p.shape[0] != 1:
        raise ValueError(f"expected probabilities shaped [1,C,S,H,W], got {p.shape}")
    ids = p[0].argmax(axis=0).astype(np.uint8)
    return LabelVolume(ids, spacing=spacing, num_classes=p.shape[1])


def feature_map_shapes(config: NetworkConfig, input_dims) -> list:
    """Every block's output shape (name, channels, (S, H, W)) for a given input."""
    dims = tuple(int(d) for d in input_dims)
    if len(dims) != 3:
        raise ValueError(f"input_dims must be (S, H, W), got {input_dims}")
    _check_divisible(dims, config.max_reduction, config.pool_scheme)
    flags = DOWN_FLAGS[config.pool_scheme]
    widths = config.encoder_channels

    shapes = []
    cur = dims
    for i, (w, down) in enumerate(zip(widths, flags)):
        if down:
            cur = tuple(d // 2 for d in cur)
        shapes.append((f"enc{i + 1}", w, cur))
    for i in (2, 1, 0):
        if flags[i + 1]:
            cur = tuple(d * 2 for d in cur)
        shapes.append((f"dec{i + 1}", widths[i], cur))
    if flags[0]:
        cur = tuple(d * 2 for d in cur)
    shapes.append(("head", config.num_classes, cur))
    return shapes


# -- checkpoint container -----------------------------------------------------
#
# Flat binary layout, little-endian throughout:
#   magic "VSEG" | u16 version | u32 config-JSON length | config JSON (canonical)
#   then per parameter, in build order:
#   u16 name length | name bytes | u8 rank | u32 per dim | float64 payload

_MAGIC = b"VSEG"
_VERSION = 1


def _canonical_json(doc: dict) -> bytes:
    return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()


def save_checkpoint(net: Network, path):
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<H", _VERSION))
        cfg = _canonical_json(net.config.to_dict())
        fh.write(struct.pack("<I", len(cfg)))
        fh.write(cfg)
        for name, p in net.parameters():
            nb = name.encode()
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<B", p.ndim))
            fh.write(struct.pack(f"<{p.ndim}I", *p.shape))
            fh.write(p.data.astype("<f8", copy=False).tobytes())


def load_checkpoint(path) -> Network:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != _MAGIC:
        raise ValueError(f"{path}: not a network checkpoint (bad magic {raw[:4]!r})")
    (version,) = struct.unpack_from("<H", raw, 4)
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    (cfg_len,) = struct.unpack_from("<I", raw, 6)
    off = 10
    config = NetworkConfig.from_dict(json.loads(raw[off : off + cfg_len].decode()))
    off += cfg_len

    net = Network(config, seed=0)
    for name, p in net.parameters():
        (nlen,) = struct.unpack_from("<H", raw, off)
        off += 2
        got = raw[off : off + nlen].decode()
        off += nlen
        if got != name:
            raise ValueError(f"{path}: parameter order mismatch, expected {name}, found {got}")
        (rank,) = struct.unpack_from("<B", raw, off)
        off += 1
        dims = struct.unpack_from(f"<{rank}I", raw, off)
        off += 4 * rank
        if dims != p.shape:
            raise ValueError(f"{path}: {name} has shape {dims}, expected {p.shape}")
        n = int(np.prod(dims))
        p.data[...] = np.frombuffer(raw, dtype="<f8", count=n, offset=off).reshape(dims)
        off += 8 * n
    if off != len(raw):
        raise ValueError(f"{path}: {len(raw) - off} trailing bytes after parameters")
    return net
