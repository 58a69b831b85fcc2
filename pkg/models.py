"""
The text-free video inpainting Diffusion Transformer.

Three latent streams of the same (h, w, n) grid are patchified into 2x2x1 patches
and embedded to D dims each: the noisy latent x_t (8 channels), the masked-video
latent y (8 channels) and the folded mask m (4 channels). Their token sequences
are summed and run through pre-norm blocks (3D RoPE full self-attention + GELU
FFN) modulated by adaLN-Zero from the timestep only.

Token order is temporal-major, then patch row, then patch column:

    index = (t * (h/2) + row) * (w/2) + col
"""
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import NamedTuple, Union
import json
import logging
import math
import struct

import torch
import torch.nn as nn

import numerics
from mediaio import read_tensor, write_tensor
from utils import ShapeError, ValidationError, format_shape

logger = logging.getLogger(__name__)

PATCH = (2, 2, 1)
TIME_SCALE = 1000.0


class OutputMode(Enum):
    VELOCITY = "velocity"
    DOUBLE = "double" # head emits 2c channels, the second half is dropped


@dataclass(frozen=True)
class ModelConfig:
    num_blocks: int = 4
    num_heads: int = 4
    head_dim: int = 24
    ffn_ratio: int = 4
    patch: tuple[int, int, int] = PATCH
    latent_channels: int = 8
    mask_channels: int = 4
    freq_dim: int = 256
    cond_dim: int | None = None # width of the conditioning vector, None means embed_dim
    output_mode: OutputMode = OutputMode.VELOCITY
    rope_base: float = 10000.0

    @property
    def embed_dim(self) -> int:
        return self.num_heads * self.head_dim

    @property
    def cond(self) -> int:
        return self.cond_dim or self.embed_dim

    @property
    def out_channels(self) -> int:
        return self.latent_channels * (2 if self.output_mode is OutputMode.DOUBLE else 1)

    def validate(self) -> "ModelConfig":
        if self.num_blocks < 0 or self.num_heads < 1 or self.head_dim < 1 or self.ffn_ratio < 1:
            raise ValidationError(f"invalid model sizes in {self}")
        if tuple(self.patch) != PATCH:
            raise ValidationError(f"only {PATCH} patches are supported, got {self.patch}")
        if self.freq_dim % 2:
            raise ValidationError(f"freq_dim must be even, got {self.freq_dim}")
        rope_split(self.head_dim)
        return self

    def to_dict(self) -> dict:
        data = asdict(self)
        data["output_mode"] = self.output_mode.value
        data["patch"] = list(self.patch)
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ValidationError(f"unknown model config keys {sorted(unknown)}")
        data = dict(data)
        if "output_mode" in data:
            data["output_mode"] = OutputMode(data["output_mode"])
        if "patch" in data:
            data["patch"] = tuple(data["patch"])
        return cls(**data).validate()


PRESETS = {
    "desk": ModelConfig(num_blocks=4, num_heads=4, head_dim=24),
    "tiny": ModelConfig(num_blocks=2, num_heads=2, head_dim=24),
    "grad-check": ModelConfig(num_blocks=2, num_heads=2, head_dim=8, freq_dim=16),
    "full": ModelConfig(num_blocks=24, num_heads=16, head_dim=72, cond_dim=256),
}

def preset(name: str, **overrides) -> ModelConfig:
    try:
        cfg = PRESETS[name]
    except KeyError:
        raise ValidationError(f"unknown preset {name!r}, choose from {sorted(PRESETS)}") from None
    return replace(cfg, **overrides).validate()


#################################################################################
#                                   3D RoPE                                     #
#################################################################################

def rope_split(head_dim: int) -> tuple[int, int, int]:
    """
    Splits a head into (time, row, column) sections: time takes ceil(d/3) rounded
    up to even, rows and columns share the rest evenly, every section even.

    Raises:
        ValidationError: when no such split exists.
    """
    if head_dim % 2:
        raise ValidationError(f"head_dim must be even for rotary pairs, got {head_dim}")
    time = math.ceil(head_dim / 3)
    time += time % 2
    rest = head_dim - time
    if rest <= 0 or rest % 4:
        raise ValidationError(f"head_dim {head_dim} cannot be split across time, rows and columns")
    return time, rest // 2, rest // 2

def grid_positions(n: int, rows: int, cols: int, offset: tuple[int, int, int] = (0, 0, 0)) -> torch.Tensor:
    t, r, c = torch.meshgrid(torch.arange(n), torch.arange(rows), torch.arange(cols), indexing="ij")
    positions = torch.stack([t, r, c], dim=-1).reshape(-1, 3)
    return positions + torch.tensor(offset)


class RopeTable(NamedTuple):
    cos: torch.Tensor # L, head_dim / 2
    sin: torch.Tensor

def rope3d(positions: torch.Tensor, head_dim: int, base: float = 10000.0) -> RopeTable:
    """Rotation table for (L, 3) integer positions ordered (time, row, column)."""
    if positions.dim() != 2 or positions.shape[1] != 3:
        raise ShapeError(f"positions must be Lx3, got {format_shape(positions.shape)}")
    cos, sin = [], []
    for axis, size in enumerate(rope_split(head_dim)):
        half = size // 2
        inv_freq = 1.0 / (base ** (torch.arange(half, dtype=torch.float64) / half))
        angles = positions[:, axis, None].to(torch.float64) * inv_freq
        cos.append(torch.cos(angles))
        sin.append(torch.sin(angles))
    dtype = torch.get_default_dtype()
    return RopeTable(torch.cat(cos, dim=-1).to(dtype), torch.cat(sin, dim=-1).to(dtype))

def apply_rope(x: torch.Tensor, table: RopeTable) -> torch.Tensor:
    # rotates interleaved (even, odd) feature pairs
    x_even, x_odd = x[..., 0::2], x[..., 1::2]
    cos, sin = table.cos.to(x.dtype), table.sin.to(x.dtype)
    rotated = torch.stack([x_even * cos - x_odd * sin, x_even * sin + x_odd * cos], dim=-1)
    return rotated.flatten(-2)

def attention_logits(q: torch.Tensor, k: torch.Tensor, table: RopeTable) -> torch.Tensor:
    q, k = apply_rope(q, table), apply_rope(k, table)
    return numerics.matmul(q, numerics.transpose(k)) / math.sqrt(q.shape[-1])


#################################################################################
#                            Patches and token fusion                           #
#################################################################################

def patchify(x: torch.Tensor) -> torch.Tensor:
    """(B, h, w, n, C) -> (B, n*(h/2)*(w/2), 4C), each patch flattened as (row, col, channel)."""
    B, h, w, n, C = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"latent height and width must be even, got {h}x{w}")
    x = x.reshape(B, h // 2, 2, w // 2, 2, n, C).permute(0, 5, 1, 3, 2, 4, 6)
    return x.reshape(B, n * (h // 2) * (w // 2), 4 * C)

def unpatchify(tokens: torch.Tensor, grid: tuple[int, int, int], channels: int) -> torch.Tensor:
    """Exact inverse of `patchify` for a (n, h/2, w/2) grid."""
    n, rows, cols = grid
    B, L, width = tokens.shape
    if L != n * rows * cols:
        raise ShapeError(f"unpatchify: expected L={n * rows * cols} tokens for grid {grid}, got {L}")
    if width != 4 * channels:
        raise ShapeError(f"unpatchify: expected {4 * channels} values per token, got {width}")
    x = tokens.reshape(B, n, rows, cols, 2, 2, channels).permute(0, 2, 4, 3, 5, 1, 6)
    return x.reshape(B, 2 * rows, 2 * cols, n, channels)

def fuse_tokens(z: torch.Tensor, y: torch.Tensor, m: torch.Tensor) -> torch.Tensor:
    if not z.shape == y.shape == m.shape:
        raise ShapeError(f"fuse_tokens: {format_shape(z.shape)}, {format_shape(y.shape)}, {format_shape(m.shape)}")
    return z + y + m


class PatchEmbed(nn.Module):
    """One stream's 2x2x1 patch projection."""
    def __init__(self, channels: int, embed_dim: int):
        super().__init__()
        self.channels = channels
        self.proj = nn.Linear(4 * channels, embed_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.channels:
            raise ShapeError(f"embedder for {self.channels} channels got {format_shape(x.shape)}")
        return self.proj(patchify(x))


#################################################################################
#                        Timestep embedding and modulation                      #
#################################################################################

class TimestepEmbedder(nn.Module):
    """
    Embeds t in [0, 1] into the conditioning vector shared by every adaLN head.
    """
    def __init__(self, embed_dim: int, cond_dim: int, frequency_embedding_size: int = 256):
        super().__init__()
        self.mlp = nn.Sequential(
            nn.Linear(frequency_embedding_size, embed_dim, bias=True),
            nn.SiLU(),
            nn.Linear(embed_dim, cond_dim, bias=True),
        )
        self.frequency_embedding_size = frequency_embedding_size

    @staticmethod
    def timestep_embedding(t: torch.Tensor, dim: int, max_period: int = 10000) -> torch.Tensor:
        """
        Sinusoidal embedding of a 1-D tensor of (fractional) timesteps.

        Args:
            t (Tensor): (B,) timesteps, already scaled.
            dim (int): output width, even.
            max_period (int): controls the minimum frequency.

        Returns:
            Tensor: (B, dim) embedding, cosines first.
        """
        half = dim // 2
        freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
        args = t[:, None].to(torch.float64) * freqs[None]
        return torch.cat([torch.cos(args), torch.sin(args)], dim=-1).to(torch.get_default_dtype())

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        return self.mlp(self.timestep_embedding(t * TIME_SCALE, self.frequency_embedding_size))


class Modulation(NamedTuple):
    shift_att: torch.Tensor
    scale_att: torch.Tensor
    gate_att: torch.Tensor
    shift_ffn: torch.Tensor
    scale_ffn: torch.Tensor
    gate_ffn: torch.Tensor

def modulate(x: torch.Tensor, shift: torch.Tensor, scale: torch.Tensor) -> torch.Tensor:
    return x * (1 + scale.unsqueeze(1)) + shift.unsqueeze(1)


#################################################################################
#                                  Core blocks                                  #
#################################################################################

class Attention(nn.Module):
    def __init__(self, embed_dim: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.head_dim = embed_dim // num_heads
        self.qkv = nn.Linear(embed_dim, 3 * embed_dim)
        self.proj = nn.Linear(embed_dim, embed_dim)

    def forward(self, x: torch.Tensor, rope: RopeTable) -> torch.Tensor:
        B, L, D = x.shape
        qkv = self.qkv(x).reshape(B, L, 3, self.num_heads, self.head_dim).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2] # B, heads, L, head_dim
        weights = numerics.softmax(attention_logits(q, k, rope), axis=-1)
        out = numerics.matmul(weights, v).transpose(1, 2).reshape(B, L, D)
        return self.proj(out)


class FeedForward(nn.Module):
    def __init__(self, embed_dim: int, ratio: int):
        super().__init__()
        self.fc1 = nn.Linear(embed_dim, ratio * embed_dim)
        self.fc2 = nn.Linear(ratio * embed_dim, embed_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(numerics.gelu(self.fc1(x)))


class DiTBlock(nn.Module):
    """
    Pre-norm block with adaLN-Zero: no cross-attention, conditioning comes from
    the timestep alone.
    """
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        D = cfg.embed_dim
        self.attn = Attention(D, cfg.num_heads)
        self.ffn = FeedForward(D, cfg.ffn_ratio)
        self.adaLN_modulation = nn.Sequential(nn.SiLU(), nn.Linear(cfg.cond, 6 * D))

    def modulation(self, c: torch.Tensor) -> Modulation:
        return Modulation(*self.adaLN_modulation(c).chunk(6, dim=-1))

    def forward(self, x: torch.Tensor, mod: Modulation, rope: RopeTable) -> torch.Tensor:
        x = x + mod.gate_att.unsqueeze(1) * self.attn(modulate(numerics.layer_norm(x), mod.shift_att, mod.scale_att), rope)
        x = x + mod.gate_ffn.unsqueeze(1) * self.ffn(modulate(numerics.layer_norm(x), mod.shift_ffn, mod.scale_ffn))
        return x


class FinalLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        D = cfg.embed_dim
        self.adaLN_modulation = nn.Sequential(nn.SiLU(), nn.Linear(cfg.cond, 2 * D))
        self.linear = nn.Linear(D, 4 * cfg.out_channels)

    def forward(self, x: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
        shift, scale = self.adaLN_modulation(c).chunk(2, dim=-1)
        return self.linear(modulate(numerics.layer_norm(x), shift, scale))


class DiTPainter(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg.validate()
        D = cfg.embed_dim
        self.x_embedder = PatchEmbed(cfg.latent_channels, D) # noisy latent
        self.y_embedder = PatchEmbed(cfg.latent_channels, D) # masked-video latent
        self.m_embedder = PatchEmbed(cfg.mask_channels, D)
        self.t_embedder = TimestepEmbedder(D, cfg.cond, cfg.freq_dim)
        self.blocks = nn.ModuleList([DiTBlock(cfg) for _ in range(cfg.num_blocks)])
        self.final_layer = FinalLayer(cfg)
        self.initialize_weights()

    def initialize_weights(self):
        def _basic_init(module):
            if isinstance(module, nn.Linear):
                torch.nn.init.xavier_uniform_(module.weight)
                if module.bias is not None:
                    nn.init.constant_(module.bias, 0)
        self.apply(_basic_init)

        nn.init.normal_(self.t_embedder.mlp[0].weight, std=0.02)
        nn.init.normal_(self.t_embedder.mlp[2].weight, std=0.02)

        # zero-out adaLN heads: every block starts as the identity
        for block in self.blocks:
            nn.init.constant_(block.adaLN_modulation[-1].weight, 0)
            nn.init.constant_(block.adaLN_modulation[-1].bias, 0)

        nn.init.constant_(self.final_layer.adaLN_modulation[-1].weight, 0)
        nn.init.constant_(self.final_layer.adaLN_modulation[-1].bias, 0)
        nn.init.constant_(self.final_layer.linear.weight, 0)
        nn.init.constant_(self.final_layer.linear.bias, 0)

    def timestep_embed(self, t: torch.Tensor) -> tuple[torch.Tensor, list[Modulation]]:
        """Conditioning vector for t and the (shift, scale, gate) sets of every block."""
        c = self.t_embedder(t)
        return c, [block.modulation(c) for block in self.blocks]

    def embed(self, x_t: torch.Tensor, y: torch.Tensor, m: torch.Tensor) -> torch.Tensor:
        return fuse_tokens(self.x_embedder(x_t), self.y_embedder(y), self.m_embedder(m))

    def forward(self, x_t: torch.Tensor, y: torch.Tensor, m: torch.Tensor, t: Union[float, torch.Tensor]) -> torch.Tensor:
        """
        Velocity prediction u(x_t, y, m; theta).

        Args:
            x_t (Tensor): (B, h, w, n, c) or unbatched (h, w, n, c) noisy latent.
            y (Tensor): masked-video latent, same shape as x_t.
            m (Tensor): folded mask, (B, h, w, n, 4) or unbatched.
            t (float | Tensor): scalar or (B,) timesteps in [0, 1].

        Returns:
            Tensor: velocity with the shape of x_t.
        """
        unbatched = x_t.dim() == 4
        if unbatched:
            x_t, y, m = x_t.unsqueeze(0), y.unsqueeze(0), m.unsqueeze(0)
        if x_t.shape != y.shape or x_t.shape[:-1] != m.shape[:-1]:
            raise ShapeError(f"x_t {format_shape(x_t.shape)}, y {format_shape(y.shape)} and m {format_shape(m.shape)} disagree")
        B, h, w, n, _ = x_t.shape
        t = torch.as_tensor(t, dtype=x_t.dtype).reshape(-1).expand(B)

        tokens = self.embed(x_t, y, m)
        grid = (n, h // 2, w // 2)
        rope = rope3d(grid_positions(*grid), self.cfg.head_dim, self.cfg.rope_base)
        c, modulations = self.timestep_embed(t)
        for block, mod in zip(self.blocks, modulations):
            tokens = block(tokens, mod, rope)
        out = unpatchify(self.final_layer(tokens, c), grid, self.cfg.out_channels)
        out = out[..., :self.cfg.latent_channels]
        return out[0] if unbatched else out


def build_model(cfg: ModelConfig, seed: int | None = None) -> DiTPainter:
    if seed is None:
        return DiTPainter(cfg)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return DiTPainter(cfg)

def as_velocity_fn(model: DiTPainter):
    """Wraps a model as a gradient-free velocity(x, y, m, t) callable for the samplers."""
    @torch.no_grad()
    def velocity(x, y, m, t):
        return model(x.to(torch.get_default_dtype()), y, m, t)
    return velocity


def param_count(cfg: ModelConfig) -> int:
    """Parameter count from the layer manifest, without building the model."""
    cfg = cfg.validate()
    D, cond, hidden = cfg.embed_dim, cfg.cond, cfg.ffn_ratio * cfg.embed_dim
    linear = lambda fan_in, fan_out: fan_in * fan_out + fan_out
    embedders = 2 * linear(4 * cfg.latent_channels, D) + linear(4 * cfg.mask_channels, D)
    t_mlp = linear(cfg.freq_dim, D) + linear(D, cond)
    block = linear(D, 3 * D) + linear(D, D) + linear(D, hidden) + linear(hidden, D) + linear(cond, 6 * D)
    final = linear(cond, 2 * D) + linear(D, 4 * cfg.out_channels)
    return embedders + t_mlp + cfg.num_blocks * block + final


#################################################################################
#                                  Checkpoints                                  #
#################################################################################

CHECKPOINT_MAGIC = b"DTPC"
HEADER_KEYS = ("config", "params", "optimizer", "step", "stage", "optimizer_step")
CHECKPOINT_VERSION = 1

@dataclass
class Checkpoint:
    """
    Named parameters plus the config and counters needed to resume.

    File layout::

        b"DTPC" | u32 version | u32 header_len | JSON header | DTPT record per manifest entry

    The header holds `config`, `step`, `stage`, `params` ([name, shape] in
    order), `optimizer` (moment tensor names), `optimizer_step` and
    `window`, the latent length the model was last trained on.
    """
    config: ModelConfig
    params: dict[str, torch.Tensor]
    step: int = 0
    stage: int = 0
    optimizer: dict[str, torch.Tensor] = field(default_factory=dict)
    optimizer_step: int = 0
    window: int | None = None # latent length of the last training stage
    losses: list[float] = field(default_factory=list, repr=False) # in memory only

    @classmethod
    def from_model(cls, model: DiTPainter, **kwargs) -> "Checkpoint":
        params = {name: p.detach().clone() for name, p in model.named_parameters()}
        return cls(config=model.cfg, params=params, **kwargs)

    def build_model(self) -> DiTPainter:
        model = DiTPainter(self.config)
        expected = [name for name, _ in model.named_parameters()]
        missing = sorted(set(expected) - set(self.params))
        extra = sorted(set(self.params) - set(expected))
        if missing or extra:
            raise ValidationError(f"checkpoint does not fit its config: missing {missing[:3]}, unexpected {extra[:3]}")
        model.load_state_dict(self.params, strict=True)
        return model

    def save(self, path: Union[str, Path]):
        header = {
            "config": self.config.to_dict(),
            "step": self.step,
            "stage": self.stage,
            "params": [[name, list(t.shape)] for name, t in self.params.items()],
            "optimizer": list(self.optimizer),
            "optimizer_step": self.optimizer_step,
            "window": self.window,
        }
        raw = json.dumps(header).encode("utf-8")
        with open(path, "wb") as f:
            f.write(CHECKPOINT_MAGIC)
            f.write(struct.pack("<II", CHECKPOINT_VERSION, len(raw)))
            f.write(raw)
            for tensor in (*self.params.values(), *self.optimizer.values()):
                write_tensor(f, tensor)
        logger.debug(f"saved checkpoint step {self.step} to {path}")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "Checkpoint":
        with open(path, "rb") as f:
            magic = f.read(4)
            if magic != CHECKPOINT_MAGIC:
                raise ValidationError(f"{path}: bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
            head = f.read(8)
            if len(head) != 8:
                raise ValidationError(f"{path}: truncated checkpoint header")
            version, length = struct.unpack("<II", head)
            if version != CHECKPOINT_VERSION:
                raise ValidationError(f"{path}: unsupported checkpoint version {version}")
            try:
                header = json.loads(f.read(length).decode("utf-8"))
            except (UnicodeDecodeError, json.JSONDecodeError) as e:
                raise ValidationError(f"{path}: unreadable checkpoint header ({e})") from None
            missing = [key for key in HEADER_KEYS if not isinstance(header, dict) or key not in header]
            if missing:
                raise ValidationError(f"{path}: checkpoint header lacks {missing}")
            try:
                manifest = [(str(name), list(shape)) for name, shape in header["params"]]
                config = ModelConfig.from_dict(header["config"])
            except (TypeError, ValueError) as e:
                if isinstance(e, ValidationError):
                    raise
                raise ValidationError(f"{path}: malformed checkpoint header ({e})") from None

            names = [name for name, _ in manifest]
            if len(names) != len(set(names)):
                raise ValidationError(f"{path}: duplicate parameter names in manifest")
            params = {}
            for name, shape in manifest:
                tensor = read_tensor(f)
                if list(tensor.shape) != shape:
                    raise ValidationError(f"{path}: {name} has shape {format_shape(tensor.shape)}, manifest says {shape}")
                params[name] = tensor
            optimizer = {name: read_tensor(f) for name in header["optimizer"]}
        return cls(config=config, params=params, step=header["step"],
                   stage=header["stage"], optimizer=optimizer, optimizer_step=header["optimizer_step"],
                   window=header.get("window"))
