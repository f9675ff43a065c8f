"""The pose estimator: patch tokenizer, encoder variants, query decoder and heads.

Variants:

* ``deit``  token self-attention encoder over patch tokens
* ``xcit``  cross-covariance attention + local patch interaction encoder
* ``conv-baseline``  strided depthwise-separable conv stack, 1x1 projection, unrolled to tokens
* ``vab``   deit backbone followed by an extra token-attention encoder-decoder stack
"""

from __future__ import annotations

import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .blocks import (MLP, DecoderLayer, EncoderLayer, GridShape, Init, LayerNorm, Linear,
                     Module)
from .matching import PredictionSet

VARIANTS = ("deit", "xcit", "conv-baseline", "vab")
CONV_STRIDE = 16


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    width: int = 192
    height: int = 256
    patch_size: int = 16
    d_model: int = 384
    n_heads: int = 6
    variant: str = "xcit"
    encoder_depth: int = 12
    decoder_depth: int = 6
    num_queries: int = 100
    num_joints: int = 17
    mlp_ratio: int = 4
    vab_depth: int = 3
    conv_channels: tuple[int, ...] = (32, 64, 128, 128)
    memory_pos: bool = True
    seed: int = 0

    def __post_init__(self):
        self.conv_channels = tuple(int(c) for c in self.conv_channels)

    def validate(self) -> "ModelConfig":
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.patch_size <= 0 or self.width % self.patch_size or self.height % self.patch_size:
            raise ConfigError(f"{self.width}x{self.height} is not divisible by patch size {self.patch_size}")
        if self.variant == "conv-baseline" and (self.width % CONV_STRIDE or self.height % CONV_STRIDE):
            raise ConfigError(f"conv baseline needs sizes divisible by {CONV_STRIDE}")
        if self.num_queries < self.num_joints:
            raise ConfigError("num_queries must be >= num_joints")
        if self.decoder_depth < 1:
            raise ConfigError("decoder_depth must be >= 1")
        if self.encoder_depth < 0 or self.vab_depth < 0:
            raise ConfigError("depths must be non-negative")
        if self.variant == "vab" and self.vab_depth < 1:
            raise ConfigError("vab_depth must be >= 1 for the vab variant")
        if self.n_heads <= 0 or self.d_model % self.n_heads:
            raise ConfigError(f"n_heads={self.n_heads} must divide d_model={self.d_model}")
        if len(self.conv_channels) != 4:
            raise ConfigError("conv_channels needs four stage widths")
        return self

    @property
    def grid(self) -> GridShape:
        if self.variant == "conv-baseline":
            return GridShape(self.height // CONV_STRIDE, self.width // CONV_STRIDE)
        return GridShape(self.height // self.patch_size, self.width // self.patch_size)

    @property
    def decoder_layers(self) -> int:
        """vab runs its own encoder-decoder stack of ``vab_depth`` layers each."""
        return self.vab_depth if self.variant == "vab" else self.decoder_depth

    @property
    def num_tokens(self) -> int:
        """Patch tokens N (memory holds N + 1 with the CLS token)."""
        return self.grid.tokens

    def to_items(self) -> dict[str, str]:
        out = {}
        for k, v in asdict(self).items():
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            out[k] = str(v)
        return out

    @classmethod
    def from_items(cls, items: dict[str, str]) -> "ModelConfig":
        kwargs = {}
        types = {f.name: f.type for f in fields(cls)}
        for key, raw in items.items():
            if key not in types:
                raise ConfigError(f"unknown model key {key!r}")
            kwargs[key] = parse_value(raw, getattr(cls(), key))
        return cls(**kwargs)


def parse_value(raw, default):
    """Parse a config string to the type of ``default``."""
    if not isinstance(raw, str):
        return raw
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            parts = [p for p in raw.replace(" ", "").split(",") if p]
            kind = type(default[0]) if default else float
            return tuple(kind(p) for p in parts)
    except ValueError:
        raise ConfigError(f"cannot parse {raw!r} as {type(default).__name__}") from None
    return raw


def patchify(image, patch_size: int) -> Tensor:
    """``(H, W, 3)`` or ``(B, H, W, 3)`` image to ``(B, N, 3 p^2)`` row-major patch tokens."""
    image = ad.as_tensor(image)
    if image.ndim == 3:
        image = ad.reshape(image, (1,) + image.shape)
    b, h, w, c = image.shape
    p = patch_size
    if h % p or w % p:
        raise ShapeError(f"image {w}x{h} is not divisible by patch size {p}")
    x = ad.reshape(image, (b, h // p, p, w // p, p, c))
    x = ad.transpose(x, (0, 1, 3, 2, 4, 5))
    return ad.reshape(x, (b, (h // p) * (w // p), p * p * c))


class PatchEmbed(Module):
    def __init__(self, cfg: ModelConfig, init: Init):
        self.patch_size = cfg.patch_size
        self.num_tokens = cfg.num_tokens
        self.proj = Linear(3 * cfg.patch_size ** 2, cfg.d_model, init)
        self.cls = init.normal((1, 1, cfg.d_model), 0.02)
        self.pos = init.normal((1, cfg.num_tokens + 1, cfg.d_model), 0.02)

    def __call__(self, tokens: Tensor) -> Tensor:
        b, n, _ = tokens.shape
        if n + 1 != self.pos.shape[1]:
            raise ShapeError(f"{n} tokens but the position embedding covers {self.pos.shape[1] - 1}")
        x = self.proj(tokens)
        cls = ad.add(Tensor(np.zeros((b, 1, 1)), dtype=x.dtype), self.cls)
        return ad.add(ad.concat([cls, x], axis=1), self.pos)


class TransformerEncoder(Module):
    def __init__(self, cfg: ModelConfig, init: Init, variant: str, depth: int):
        self.layers = [EncoderLayer(cfg.d_model, cfg.n_heads, init, variant, cfg.mlp_ratio)
                       for _ in range(depth)]
        self.norm = LayerNorm(cfg.d_model, init)

    def __call__(self, x: Tensor, grid: GridShape) -> Tensor:
        for layer in self.layers:
            x = layer(x, grid=grid, has_cls=True)
        return self.norm(x)


class ConvEncoder(Module):
    """Four stride-2 stages (depthwise 3x3, pointwise, gelu), then a 1x1 projection to d."""

    def __init__(self, cfg: ModelConfig, init: Init):
        widths = (3,) + tuple(cfg.conv_channels)
        self.depthwise = [init.normal((3, 3, c), 1.0 / 3.0) for c in widths[:-1]]
        self.depthwise_bias = [init.zeros((c,)) for c in widths[:-1]]
        self.pointwise = [Linear(a, b, init) for a, b in zip(widths[:-1], widths[1:])]
        self.proj = Linear(widths[-1], cfg.d_model, init)
        self.cls = init.normal((1, 1, cfg.d_model), 0.02)
        self.pos = init.normal((1, cfg.num_tokens + 1, cfg.d_model), 0.02)

    def named_parameters(self, prefix=""):
        for i, (w, b) in enumerate(zip(self.depthwise, self.depthwise_bias)):
            yield f"{prefix}depthwise.{i}", w
            yield f"{prefix}depthwise_bias.{i}", b
        for i, layer in enumerate(self.pointwise):
            yield from layer.named_parameters(f"{prefix}pointwise.{i}.")
        yield from self.proj.named_parameters(f"{prefix}proj.")
        yield f"{prefix}cls", self.cls
        yield f"{prefix}pos", self.pos

    def features(self, image: Tensor) -> Tensor:
        """``(B, H/16 * W/16, d)`` projected feature tokens, before CLS and position."""
        x = image
        for w, b, pw in zip(self.depthwise, self.depthwise_bias, self.pointwise):
            x = ad.gelu(pw(ad.depthwise_conv2d(x, w, b, stride=2)))
        x = self.proj(x)
        bsz, h, wd, d = x.shape
        return ad.reshape(x, (bsz, h * wd, d))

    def __call__(self, image: Tensor) -> Tensor:
        tokens = self.features(image)
        b = tokens.shape[0]
        if tokens.shape[1] + 1 != self.pos.shape[1]:
            raise ShapeError("feature map size does not match the configured input size")
        cls = ad.add(Tensor(np.zeros((b, 1, 1)), dtype=tokens.dtype), self.cls)
        return ad.add(ad.concat([cls, tokens], axis=1), self.pos)


class PoseModel(Module):
    """Encoder-decoder pose estimator producing M (class logits, coordinates) pairs."""

    def __init__(self, config: ModelConfig, dtype=None):
        self.config = config.validate()
        cfg = config
        init = Init(np.random.default_rng(cfg.seed), dtype)
        self.dtype = init.dtype
        if cfg.variant == "conv-baseline":
            self.conv = ConvEncoder(cfg, init)
        else:
            self.embed = PatchEmbed(cfg, init)
            layer_kind = "channel" if cfg.variant == "xcit" else "token"
            self.encoder = TransformerEncoder(cfg, init, layer_kind, cfg.encoder_depth)
        if cfg.variant == "vab":
            self.vab_pos = init.normal((1, cfg.num_tokens + 1, cfg.d_model), 0.02)
            self.vab_encoder = TransformerEncoder(cfg, init, "token", cfg.vab_depth)
        self.query_pos = init.normal((cfg.num_queries, cfg.d_model), 1.0)
        self.decoder = [DecoderLayer(cfg.d_model, cfg.n_heads, init, cfg.mlp_ratio)
                        for _ in range(cfg.decoder_layers)]
        self.decoder_norm = LayerNorm(cfg.d_model, init)
        d = cfg.d_model
        self.class_head = MLP([d, d, d, cfg.num_joints + 1], init)
        self.coord_head = MLP([d, d, d, 2], init)

    # -- pieces ---------------------------------------------------------------
    def _image_tensor(self, images) -> Tensor:
        if not isinstance(images, Tensor):
            images = Tensor(np.asarray(images), dtype=self.dtype)
        if images.ndim == 3:
            images = ad.reshape(images, (1,) + images.shape)
        cfg = self.config
        if images.ndim != 4 or images.shape[1:] != (cfg.height, cfg.width, 3):
            raise ShapeError(f"expected images (B, {cfg.height}, {cfg.width}, 3), got {images.shape}")
        return images

    def embed_and_position(self, tokens: Tensor) -> Tensor:
        return self.embed(tokens)

    def encode(self, images) -> tuple[Tensor, Tensor | None]:
        """Encoder memory ``(B, N+1, d)`` and the position embedding used for its keys."""
        cfg = self.config
        images = self._image_tensor(images)
        if cfg.variant == "conv-baseline":
            memory, pos = self.conv(images), self.conv.pos
        else:
            x = self.embed(patchify(images, cfg.patch_size))
            memory, pos = self.encoder(x, cfg.grid), self.embed.pos
            if cfg.variant == "vab":
                memory = self.vab_encoder(ad.add(memory, self.vab_pos), cfg.grid)
                pos = self.vab_pos
        if memory.shape[1] != cfg.num_tokens + 1:
            raise ShapeError(f"memory has {memory.shape[1]} tokens, expected N+1={cfg.num_tokens + 1}")
        return memory, pos

    def decode_all(self, memory: Tensor, memory_pos: Tensor | None = None) -> list[tuple[Tensor, Tensor]]:
        """Head outputs after every decoder layer; the last entry is the model output."""
        cfg = self.config
        if memory.shape[1] != cfg.num_tokens + 1:
            raise ShapeError(f"memory has {memory.shape[1]} tokens, expected N+1={cfg.num_tokens + 1}")
        b = memory.shape[0]
        tgt = Tensor(np.zeros((b, cfg.num_queries, cfg.d_model)), dtype=memory.dtype)
        pos = memory_pos if cfg.memory_pos else None
        outputs = []
        for layer in self.decoder:
            tgt = layer(tgt, memory, self.query_pos, pos)
            outputs.append(tgt)
        return [self._heads(self.decoder_norm(h)) for h in outputs]

    def _heads(self, h: Tensor) -> tuple[Tensor, Tensor]:
        return self.class_head(h), ad.sigmoid(self.coord_head(h))

    def decode(self, memory: Tensor, memory_pos: Tensor | None = None) -> tuple[Tensor, Tensor]:
        cfg = self.config
        if memory.shape[1] != cfg.num_tokens + 1:
            raise ShapeError(f"memory has {memory.shape[1]} tokens, expected N+1={cfg.num_tokens + 1}")
        b = memory.shape[0]
        tgt = Tensor(np.zeros((b, cfg.num_queries, cfg.d_model)), dtype=memory.dtype)
        pos = memory_pos if cfg.memory_pos else None
        for layer in self.decoder:
            tgt = layer(tgt, memory, self.query_pos, pos)
        return self._heads(self.decoder_norm(tgt))

    def __call__(self, images) -> tuple[Tensor, Tensor]:
        """Class logits ``(B, M, K+1)`` and coordinates ``(B, M, 2)`` in (0, 1)."""
        memory, pos = self.encode(images)
        return self.decode(memory, pos)

    def predict(self, images) -> tuple[np.ndarray, np.ndarray]:
        with ad.no_grad():
            logits, coords = self(images)
        return logits.data, coords.data

    # -- parameters -----------------------------------------------------------
    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise CheckpointError(f"parameter names differ (missing {sorted(missing)[:3]}, "
                                  f"unexpected {sorted(extra)[:3]})")
        for name, p in params.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ShapeMismatch(f"{name}: checkpoint {arr.shape} vs model {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)

    def parameter_groups(self) -> dict[str, list[tuple[str, Tensor]]]:
        """Split parameters into the ``encoder`` (tokenizer + encoder) and ``decoder`` groups."""
        groups = {"encoder": [], "decoder": []}
        for name, p in self.named_parameters():
            root = name.split(".", 1)[0]
            groups["encoder" if root in ("embed", "encoder", "conv") else "decoder"].append((name, p))
        return groups

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def forward(image, model: PoseModel) -> PredictionSet:
    """Single-image prediction set: ``(M, K+1)`` logits and ``(M, 2)`` coordinates."""
    logits, coords = model(image)
    return PredictionSet(logits[0], coords[0])


# --- checkpoints ----------------------------------------------------------------

MAGIC = b"PEFCKPT\x00"
FORMAT_VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1, np.dtype(np.int64): 2}


class CheckpointError(ValueError):
    pass


class CorruptCheckpoint(CheckpointError):
    pass


class VersionMismatch(CheckpointError):
    pass


class ShapeMismatch(CheckpointError):
    pass


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict[str, np.ndarray]
    optimizer: dict[str, np.ndarray] | None = None
    epoch: int = 0
    extra: dict[str, str] = field(default_factory=dict)

    @classmethod
    def from_model(cls, model: PoseModel, optimizer=None, epoch: int = 0) -> "Checkpoint":
        return cls(model.config, model.state_dict(),
                   optimizer.state_arrays() if optimizer is not None else None, epoch)

    def build_model(self, dtype=None) -> PoseModel:
        model = PoseModel(self.config, dtype=dtype or next(iter(self.params.values())).dtype)
        model.load_state_dict(self.params)
        return model


def _write_str(fh, s: str) -> None:
    raw = s.encode("utf-8")
    fh.write(struct.pack("<I", len(raw)))
    fh.write(raw)


def _write_array(fh, name: str, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    if arr.dtype not in _CODES:
        raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
    _write_str(fh, name)
    fh.write(struct.pack("<BB", _CODES[arr.dtype], arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(np.ascontiguousarray(arr, dtype=_DTYPES[_CODES[arr.dtype]]).tobytes())


def save_checkpoint(path, checkpoint: Checkpoint) -> None:
    """Little-endian binary: magic, version, key=value config, epoch, named array records."""
    config_text = "\n".join(f"{k} = {v}" for k, v in checkpoint.config.to_items().items())
    extra_text = "\n".join(f"{k} = {v}" for k, v in checkpoint.extra.items())
    optim = checkpoint.optimizer or {}
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        _write_str(fh, config_text)
        _write_str(fh, extra_text)
        fh.write(struct.pack("<I", checkpoint.epoch))
        fh.write(struct.pack("<II", len(checkpoint.params), len(optim)))
        for name, arr in checkpoint.params.items():
            _write_array(fh, name, arr)
        for name, arr in optim.items():
            _write_array(fh, name, arr)
    tmp.replace(path)


class _Reader:
    def __init__(self, raw: bytes):
        self.raw, self.pos = raw, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CorruptCheckpoint("checkpoint is truncated")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self) -> str:
        (n,) = self.unpack("<I")
        try:
            return self.take(n).decode("utf-8")
        except UnicodeDecodeError:
            raise CorruptCheckpoint("bad string record") from None

    def array(self) -> tuple[str, np.ndarray]:
        name = self.string()
        code, ndim = self.unpack("<BB")
        if code not in _DTYPES:
            raise CorruptCheckpoint(f"{name}: unknown dtype code {code}")
        shape = self.unpack(f"<{ndim}I")
        dtype = _DTYPES[code]
        count = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(self.take(count * dtype.itemsize), dtype=dtype).reshape(shape)
        return name, data.astype(dtype.newbyteorder("="), copy=True)


def _parse_kv(text: str) -> dict[str, str]:
    out = {}
    for line in text.splitlines():
        if line.strip():
            key, _, value = line.partition("=")
            out[key.strip()] = value.strip()
    return out


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    r = _Reader(raw)
    try:
        if r.take(len(MAGIC)) != MAGIC:
            raise CorruptCheckpoint("bad magic; not a checkpoint")
    except CorruptCheckpoint:
        raise CorruptCheckpoint("corrupt header: bad or missing magic") from None
    (version,) = r.unpack("<I")
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"checkpoint version {version}, expected {FORMAT_VERSION}")
    try:
        config = ModelConfig.from_items(_parse_kv(r.string())).validate()
    except ConfigError as exc:
        raise CorruptCheckpoint(f"invalid embedded config: {exc}") from None
    extra = _parse_kv(r.string())
    (epoch,) = r.unpack("<I")
    n_params, n_optim = r.unpack("<II")
    params = dict(r.array() for _ in range(n_params))
    optim = dict(r.array() for _ in range(n_optim)) or None
    if r.pos != len(raw):
        raise CorruptCheckpoint("trailing bytes after the last record")
    # shapes must agree with what the embedded config builds
    dtype = next(iter(params.values())).dtype if params else np.float64
    with ad.no_grad():
        expected = {name: p.shape for name, p in PoseModel(config, dtype=dtype).named_parameters()}
    if set(expected) != set(params):
        raise ShapeMismatch("parameter names do not match the embedded config")
    for name, shape in expected.items():
        if params[name].shape != shape:
            raise ShapeMismatch(f"{name}: stored {params[name].shape}, config implies {shape}")
    return Checkpoint(config, params, optim, epoch, extra)
