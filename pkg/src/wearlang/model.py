"""Sensor encoder, text encoder and multimodal decoder.

The sensor encoder is a ViT over 2D ``(feature, time)`` patches of the
normalized day. Both encoders are mean-pooled, projected and L2-normalized
into the shared embedding space. The decoder is a causally masked transformer
that cross-attends to every sensor encoder output token.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .data import N_CHANNELS, N_MINUTES
from .text import END, PAD, START, Vocabulary


@dataclass(frozen=True)
class ModelConfig:
    enc_layers: int = 2
    dec_layers: int = 2
    hidden_dim: int = 64
    heads: int = 4
    mlp_dim: int = 128
    patch: tuple[int, int] = (2, 60)
    embed_dim: int = 32
    vocab_size: int = 2048
    L_text: int = 64
    dropout: float = 0.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "patch", tuple(int(p) for p in self.patch))

    def validate(self) -> "ModelConfig":
        pf, pt = self.patch
        if pf <= 0 or pt <= 0 or N_CHANNELS % pf or N_MINUTES % pt:
            raise ValueError(f"patch {self.patch} does not tile a {N_CHANNELS}x{N_MINUTES} day")
        if self.hidden_dim % self.heads:
            raise ValueError(f"hidden_dim {self.hidden_dim} not divisible by heads {self.heads}")
        if self.dec_layers < 1:
            raise ValueError("dec_layers must be >= 1")
        if min(self.enc_layers, self.mlp_dim, self.embed_dim, self.L_text) < 1:
            raise ValueError("layer counts and widths must be positive")
        if self.vocab_size < 5:
            raise ValueError("vocab_size must cover the special tokens")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        return self

    @property
    def n_tokens(self) -> int:
        return n_patch_tokens(self.patch)

    def replace(self, **changes) -> "ModelConfig":
        return ModelConfig(**{**asdict(self), **changes})


def n_patch_tokens(patch: tuple[int, int]) -> int:
    pf, pt = patch
    return (N_CHANNELS // pf) * (N_MINUTES // pt)


# Size rows of the published model family; representable and validated, not trained here.
FAMILY = {
    "tiny": ModelConfig(),
    "S": ModelConfig(12, 3, 128, 16, 512, (2, 10), 128, 32000, 128),
    "B": ModelConfig(12, 3, 768, 12, 3072, (2, 10), 768, 32000, 128),
    "L": ModelConfig(24, 3, 1024, 16, 4096, (2, 10), 1024, 32000, 128),
    "XL": ModelConfig(40, 3, 1408, 16, 5632, (2, 10), 1408, 32000, 128),
}


def patchify(x: torch.Tensor, patch: tuple[int, int]) -> torch.Tensor:
    """``[..., 26, 1440]`` -> ``[..., n_tokens, pf*pt]``, row-major over (feature, time) blocks."""
    pf, pt = patch
    *lead, c, t = x.shape
    x = x.reshape(*lead, c // pf, pf, t // pt, pt)
    x = x.transpose(-3, -2)
    return x.reshape(*lead, (c // pf) * (t // pt), pf * pt)


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int, dropout: float = 0.0):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)
        self.dropout = dropout

    def forward(self, x: torch.Tensor, context: torch.Tensor | None = None,
                key_mask: torch.Tensor | None = None, causal: bool = False) -> torch.Tensor:
        context = x if context is None else context
        b, n, d = x.shape
        m = context.shape[1]
        h = self.heads
        q = self.q(x).view(b, n, h, d // h).transpose(1, 2)
        k = self.k(context).view(b, m, h, d // h).transpose(1, 2)
        v = self.v(context).view(b, m, h, d // h).transpose(1, 2)
        mask = None
        if key_mask is not None:
            mask = key_mask[:, None, None, :]
        if causal:
            tri = torch.ones(n, m, dtype=torch.bool, device=x.device).tril()
            mask = tri if mask is None else mask & tri
        y = F.scaled_dot_product_attention(
            q, k, v, attn_mask=mask, dropout_p=self.dropout if self.training else 0.0)
        return self.out(y.transpose(1, 2).reshape(b, n, d))


class Block(nn.Module):
    """Pre-LN transformer block; ``cross=True`` inserts cross-attention after self-attention."""

    def __init__(self, dim: int, heads: int, mlp_dim: int, dropout: float = 0.0,
                 cross: bool = False):
        super().__init__()
        self.ln1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads, dropout)
        self.cross = cross
        if cross:
            self.ln_x = nn.LayerNorm(dim)
            self.xattn = Attention(dim, heads, dropout)
        self.ln2 = nn.LayerNorm(dim)
        self.fc1 = nn.Linear(dim, mlp_dim)
        self.fc2 = nn.Linear(mlp_dim, dim)
        self.drop = nn.Dropout(dropout)

    def forward(self, x, key_mask=None, causal=False, memory=None):
        x = x + self.drop(self.attn(self.ln1(x), key_mask=key_mask, causal=causal))
        if self.cross:
            x = x + self.drop(self.xattn(self.ln_x(x), context=memory))
        return x + self.drop(self.fc2(F.gelu(self.fc1(self.ln2(x)))))


class SensorEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        pf, pt = cfg.patch
        self.patch = cfg.patch
        self.patch_proj = nn.Linear(pf * pt, cfg.hidden_dim)
        self.pos = nn.Parameter(torch.zeros(cfg.n_tokens, cfg.hidden_dim))
        self.blocks = nn.ModuleList(
            Block(cfg.hidden_dim, cfg.heads, cfg.mlp_dim, cfg.dropout)
            for _ in range(cfg.enc_layers))
        self.ln = nn.LayerNorm(cfg.hidden_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.patch_proj(patchify(x, self.patch)) + self.pos
        for blk in self.blocks:
            h = blk(h)
        return self.ln(h)


class TextEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.tok = nn.Embedding(cfg.vocab_size, cfg.hidden_dim)
        self.pos = nn.Parameter(torch.zeros(cfg.L_text, cfg.hidden_dim))
        self.blocks = nn.ModuleList(
            Block(cfg.hidden_dim, cfg.heads, cfg.mlp_dim, cfg.dropout)
            for _ in range(cfg.enc_layers))
        self.ln = nn.LayerNorm(cfg.hidden_dim)

    def forward(self, ids: torch.Tensor) -> torch.Tensor:
        mask = ids != PAD
        h = self.tok(ids) + self.pos[: ids.shape[1]]
        for blk in self.blocks:
            h = blk(h, key_mask=mask)
        return self.ln(h)


class Decoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.tok = nn.Embedding(cfg.vocab_size, cfg.hidden_dim)
        self.pos = nn.Parameter(torch.zeros(cfg.L_text, cfg.hidden_dim))
        self.blocks = nn.ModuleList(
            Block(cfg.hidden_dim, cfg.heads, cfg.mlp_dim, cfg.dropout, cross=True)
            for _ in range(cfg.dec_layers))
        self.ln = nn.LayerNorm(cfg.hidden_dim)
        self.head = nn.Linear(cfg.hidden_dim, cfg.vocab_size)

    def forward(self, memory: torch.Tensor, prefix: torch.Tensor) -> torch.Tensor:
        h = self.tok(prefix) + self.pos[: prefix.shape[1]]
        for blk in self.blocks:
            h = blk(h, causal=True, memory=memory)
        return self.head(self.ln(h))


class SensorTextModel(nn.Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg.validate()
        self.sensor_encoder = SensorEncoder(cfg)
        self.text_encoder = TextEncoder(cfg)
        self.decoder = Decoder(cfg)
        self.sensor_proj = nn.Linear(cfg.hidden_dim, cfg.embed_dim)
        self.text_proj = nn.Linear(cfg.hidden_dim, cfg.embed_dim)
        self.reset_parameters(seed)

    @torch.no_grad()
    def reset_parameters(self, seed: int) -> None:
        gen = torch.Generator().manual_seed(seed)
        for name, p in self.named_parameters():
            if name.endswith("bias"):
                p.zero_()
            elif ".ln" in name or name.startswith("ln") or ".ln_x" in name:
                p.fill_(1.0)
            else:
                p.copy_(_trunc_normal(p.shape, 0.02, gen).to(p.dtype))

    # Projection heads and the decoder are the parameter groups each loss
    # variant switches off; exposed for the gradient invariants.
    def group(self, name: str) -> dict[str, nn.Parameter]:
        prefixes = {"decoder": ("decoder.",), "projection": ("sensor_proj.", "text_proj.")}[name]
        return {n: p for n, p in self.named_parameters() if n.startswith(prefixes)}


def _trunc_normal(shape, std: float, gen: torch.Generator) -> torch.Tensor:
    t = torch.empty(shape, dtype=torch.float64)
    nn.init.trunc_normal_(t, std=std, a=-2 * std, b=2 * std, generator=gen)
    return t


def _check_finite(model: nn.Module, t: torch.Tensor, where: str) -> None:
    if not torch.isfinite(t).all():
        norms = {n: float(p.detach().norm()) for n, p in model.named_parameters()}
        worst = sorted(norms.items(), key=lambda kv: -kv[1] if math.isfinite(kv[1]) else -1e300)
        raise FloatingPointError(f"non-finite activation in {where}; largest parameter norms: "
                                 f"{worst[:5]}")


def encode_sensor(model: SensorTextModel, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Sensor tokens ``[B, n, hidden]`` and unit-norm embedding ``[B, embed]``."""
    tokens = model.sensor_encoder(x)
    _check_finite(model, tokens, "sensor encoder")
    s = F.normalize(model.sensor_proj(tokens.mean(dim=1)), dim=-1)
    return tokens, s


def pooled_text(model: SensorTextModel, ids: torch.Tensor) -> torch.Tensor:
    feats = model.text_encoder(ids)
    _check_finite(model, feats, "text encoder")
    mask = (ids != PAD).to(feats.dtype)[..., None]
    return feats, (feats * mask).sum(1) / mask.sum(1).clamp_min(1.0)


def encode_text(model: SensorTextModel, ids: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Text features ``[B, L, hidden]`` and unit-norm embedding from PAD-masked mean pooling."""
    feats, pooled = pooled_text(model, ids)
    return feats, F.normalize(model.text_proj(pooled), dim=-1)


def decode_multimodal(model: SensorTextModel, sensor_tokens: torch.Tensor,
                      prefix: torch.Tensor) -> torch.Tensor:
    if prefix.shape[1] > model.cfg.L_text:
        raise ValueError(f"prefix length {prefix.shape[1]} exceeds L_text={model.cfg.L_text}")
    logits = model.decoder(sensor_tokens, prefix)
    _check_finite(model, logits, "decoder")
    return logits


@torch.no_grad()
def generate_ids(model: SensorTextModel, sensor_tokens: torch.Tensor,
                 max_len: int) -> list[list[int]]:
    """Greedy decoding for a batch; each sequence starts at START, stops at END or ``max_len``."""
    b = sensor_tokens.shape[0]
    max_len = min(max_len, model.cfg.L_text)
    prefix = torch.full((b, 1), START, dtype=torch.long)
    done = torch.zeros(b, dtype=torch.bool)
    out: list[list[int]] = [[] for _ in range(b)]
    while prefix.shape[1] < max_len and not done.all():
        nxt = decode_multimodal(model, sensor_tokens, prefix)[:, -1].argmax(-1)
        for i in range(b):
            if not done[i]:
                if int(nxt[i]) == END:
                    done[i] = True
                else:
                    out[i].append(int(nxt[i]))
        prefix = torch.cat([prefix, nxt[:, None]], dim=1)
    return out


@torch.no_grad()
def generate_caption(model: SensorTextModel, vocab: Vocabulary, day: torch.Tensor | np.ndarray,
                     max_len: int) -> str:
    x = torch.as_tensor(np.asarray(day), dtype=_dtype(model))[None]
    tokens, _ = encode_sensor(model, x)
    return vocab.detokenize(generate_ids(model, tokens, max_len)[0])


def _dtype(model: nn.Module) -> torch.dtype:
    return next(model.parameters()).dtype


def grad(model: nn.Module, loss_closure: Callable[[], torch.Tensor]) -> dict[str, torch.Tensor]:
    """Exact gradients of a scalar closure w.r.t. every named parameter (zeros if unused)."""
    named = list(model.named_parameters())
    loss = loss_closure()
    if loss.dim() != 0:
        raise ValueError("loss closure must return a scalar")
    if not torch.isfinite(loss):
        raise FloatingPointError(f"non-finite loss {float(loss.detach())}")
    grads = torch.autograd.grad(loss, [p for _, p in named], allow_unused=True)
    return {n: torch.zeros_like(p) if g is None else g for (n, p), g in zip(named, grads)}


# --- checkpoints -------------------------------------------------------------

CKPT_MAGIC = b"SLMC"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _pack_tensors(tensors: dict[str, torch.Tensor]) -> bytes:
    parts = [struct.pack("<I", len(tensors))]
    for name, t in tensors.items():
        raw = name.encode("utf-8")
        arr = t.detach().cpu().to(torch.float32).numpy().astype("<f4")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes(order="C"))
    return b"".join(parts)


def _unpack_tensors(blob: bytes, off: int) -> tuple[dict[str, np.ndarray], int]:
    (count,) = struct.unpack_from("<I", blob, off)
    off += 4
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off:off + nlen].decode("utf-8")
        off += nlen
        (ndim,) = struct.unpack_from("<B", blob, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", blob, off)
        off += 4 * ndim
        n = int(np.prod(shape, dtype=np.int64))
        if off + 4 * n > len(blob):
            raise CheckpointError(f"truncated tensor {name!r}")
        out[name] = np.frombuffer(blob, dtype="<f4", count=n, offset=off).reshape(shape).copy()
        off += 4 * n
    return out, off


def config_block(cfg: ModelConfig) -> bytes:
    d = asdict(cfg)
    d["patch"] = list(cfg.patch)
    return json.dumps(d, sort_keys=True).encode("utf-8")


def save_checkpoint(model: SensorTextModel, path: str | Path) -> None:
    cfg = config_block(model.cfg)
    blob = (CKPT_MAGIC + struct.pack("<HI", CKPT_VERSION, len(cfg)) + cfg
            + _pack_tensors(dict(model.named_parameters())))
    Path(path).write_bytes(blob)


def read_checkpoint(path: str | Path) -> tuple[ModelConfig, dict[str, np.ndarray]]:
    blob = Path(path).read_bytes()
    if blob[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {blob[:4]!r}")
    try:
        version, clen = struct.unpack_from("<HI", blob, 4)
        if version != CKPT_VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        raw = json.loads(blob[10:10 + clen])
        names = {f.name for f in fields(ModelConfig)}
        if set(raw) != names:
            raise CheckpointError(f"{path}: config fields {sorted(raw)} != {sorted(names)}")
        cfg = ModelConfig(**raw)
        tensors, end = _unpack_tensors(blob, 10 + clen)
    except (struct.error, json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: malformed checkpoint ({exc})") from exc
    if end != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - end} trailing bytes")
    return cfg, tensors


def load_checkpoint(path: str | Path, expect: ModelConfig | None = None) -> SensorTextModel:
    cfg, tensors = read_checkpoint(path)
    if expect is not None and expect != cfg:
        raise CheckpointError(f"{path}: config mismatch: file {cfg} vs expected {expect}")
    model = SensorTextModel(cfg)
    load_tensors(model, tensors, str(path))
    return model


def load_tensors(model: nn.Module, tensors: dict[str, np.ndarray], where: str = "") -> None:
    params = dict(model.named_parameters())
    if set(params) != set(tensors):
        missing = sorted(set(params) - set(tensors))
        extra = sorted(set(tensors) - set(params))
        raise CheckpointError(f"{where}: tensor names differ (missing {missing}, extra {extra})")
    with torch.no_grad():
        for name, p in params.items():
            if tuple(p.shape) != tensors[name].shape:
                raise CheckpointError(
                    f"{where}: {name} has shape {tensors[name].shape}, expected {tuple(p.shape)}")
            p.copy_(torch.from_numpy(tensors[name]).to(p.dtype))
