"""Decoder-only causal transformer with instruct slots and source-index embeddings.

The first ``n_instruct`` absolute positions of every sequence read their input
vectors straight from the learnable instruct matrix ``P`` instead of the token
embedding. Every input vector also receives the index-embedding row of its
source. Attention is explicit softmax attention with rotary positions so that
weights can be captured and so that cached decoding follows the same kernel
path as a full forward pass; teacher-forced training may opt into the fused
library kernel instead.
"""

from __future__ import annotations

import math
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import InvalidArgument, NumericError, VersionError
from .sequence import INDEX_TABLE_SIZE, assign_index_embedding

DTYPES = {"float32": torch.float32, "float64": torch.float64}
CHECKPOINT_MAGIC = b"TKAR"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    n_image_tokens: int
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    max_seq_len: int = 1024
    n_instruct: int = 30
    index_table_size: int = INDEX_TABLE_SIZE
    distill_dim: int = 32
    dtype: str = "float32"
    rope_theta: float = 10000.0
    use_index_embedding: bool = True

    def __post_init__(self):
        if self.d_model < 2 or self.n_heads < 1 or self.d_model % self.n_heads:
            raise InvalidArgument(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if (self.d_model // self.n_heads) % 2:
            raise InvalidArgument("head dimension must be even for rotary embeddings")
        if self.vocab_size <= self.n_image_tokens or self.n_image_tokens < 2:
            raise InvalidArgument(f"vocab size {self.vocab_size} must exceed image tokens {self.n_image_tokens}")
        if self.n_instruct < 0 or self.n_layers < 1 or self.index_table_size < 1:
            raise InvalidArgument("n_instruct >= 0, n_layers >= 1, index_table_size >= 1 required")
        if self.max_seq_len < 1 or self.distill_dim < 1:
            raise InvalidArgument("max_seq_len and distill_dim must be positive")
        if self.dtype not in DTYPES:
            raise InvalidArgument(f"dtype must be one of {sorted(DTYPES)}, got {self.dtype!r}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def torch_dtype(self) -> torch.dtype:
        return DTYPES[self.dtype]

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TraceSpec:
    """Which attention rows to record: one query span against named key spans."""

    query: tuple[int, int]
    keys: dict[str, tuple[int, int]]


@dataclass
class AttentionTrace:
    """Raw softmax weights, ``weights[layer][key_name]`` of shape (B, H, Q, Kspan)."""

    query: tuple[int, int]
    keys: dict[str, tuple[int, int]]
    weights: list[dict[str, torch.Tensor]] = field(default_factory=list)

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def rows(self, layer: int, key: str) -> torch.Tensor:
        """Rows restricted to one key span and renormalized to sum to one."""
        if not 0 <= layer < self.n_layers:
            raise InvalidArgument(f"layer {layer} not recorded (have {self.n_layers})")
        if key not in self.keys:
            raise InvalidArgument(f"key span {key!r} not recorded")
        w = self.weights[layer][key]
        return w / w.sum(dim=-1, keepdim=True)

    def raw(self, layer: int, key: str) -> torch.Tensor:
        if not 0 <= layer < self.n_layers:
            raise InvalidArgument(f"layer {layer} not recorded (have {self.n_layers})")
        if key not in self.keys:
            raise InvalidArgument(f"key span {key!r} not recorded")
        return self.weights[layer][key]


class DecodeCache:
    """Per-layer key/value buffers for one generation stream (batch of B)."""

    def __init__(self, cfg: ModelConfig, batch: int):
        shape = (cfg.n_layers, batch, cfg.n_heads, cfg.max_seq_len, cfg.head_dim)
        self.k = torch.zeros(shape, dtype=cfg.torch_dtype)
        self.v = torch.zeros(shape, dtype=cfg.torch_dtype)
        self.length = 0
        self.capacity = cfg.max_seq_len

    def __len__(self) -> int:
        return self.length


def rotary(x: torch.Tensor, positions: torch.Tensor, theta: float) -> torch.Tensor:
    """Rotate (B, H, T, Dh) by absolute positions (B, T), half-split convention."""
    half = x.shape[-1] // 2
    inv_freq = theta ** (-torch.arange(half, dtype=torch.float64) / half)
    ang = positions.to(torch.float64)[..., None] * inv_freq
    cos = torch.cos(ang).to(x.dtype)[:, None]
    sin = torch.sin(ang).to(x.dtype)[:, None]
    x1, x2 = x[..., :half], x[..., half:]
    return torch.cat([x1 * cos - x2 * sin, x1 * sin + x2 * cos], dim=-1)


class Block(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.d_model
        dt = cfg.torch_dtype
        self.ln1_w = nn.Parameter(torch.ones(d, dtype=dt))
        self.ln1_b = nn.Parameter(torch.zeros(d, dtype=dt))
        self.w_qkv = nn.Parameter(torch.zeros(d, 3 * d, dtype=dt))
        self.w_o = nn.Parameter(torch.zeros(d, d, dtype=dt))
        self.ln2_w = nn.Parameter(torch.ones(d, dtype=dt))
        self.ln2_b = nn.Parameter(torch.zeros(d, dtype=dt))
        self.w_up = nn.Parameter(torch.zeros(d, 4 * d, dtype=dt))
        self.b_up = nn.Parameter(torch.zeros(4 * d, dtype=dt))
        self.w_down = nn.Parameter(torch.zeros(4 * d, d, dtype=dt))
        self.b_down = nn.Parameter(torch.zeros(d, dtype=dt))


class TokenARModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d, dt = cfg.d_model, cfg.torch_dtype
        self.tok_emb = nn.Parameter(torch.zeros(cfg.vocab_size, d, dtype=dt))
        self.index_emb = nn.Parameter(torch.zeros(cfg.index_table_size, d, dtype=dt))
        self.instruct = nn.Parameter(torch.zeros(cfg.n_instruct, d, dtype=dt))
        self.layers = nn.ModuleList(Block(cfg) for _ in range(cfg.n_layers))
        self.lnf_w = nn.Parameter(torch.ones(d, dtype=dt))
        self.lnf_b = nn.Parameter(torch.zeros(d, dtype=dt))
        self.head = nn.Parameter(torch.zeros(d, cfg.vocab_size, dtype=dt))
        self.distill_proj = nn.Parameter(torch.zeros(d, cfg.distill_dim, dtype=dt))

    # -- embedding -----------------------------------------------------------

    def embed(self, ids: torch.Tensor, index_ids: torch.Tensor, positions: torch.Tensor) -> torch.Tensor:
        x = self.tok_emb[ids]
        M = self.cfg.n_instruct
        if M:
            slot = positions < M
            if bool(slot.any()):
                x = torch.where(slot[..., None], self.instruct[positions.clamp(max=M - 1)], x)
        if self.cfg.use_index_embedding:
            x = x + assign_index_embedding(index_ids, self.index_emb)
        return x

    # -- attention -----------------------------------------------------------

    def _attend(self, q, k, v, q_pos, k_pos):
        scores = (q @ k.transpose(-1, -2)) / math.sqrt(self.cfg.head_dim)
        future = k_pos[:, None, None, :] > q_pos[:, None, :, None]
        scores = scores.masked_fill(future, float("-inf"))
        attn = torch.softmax(scores, dim=-1)
        return attn @ v, attn

    def _block(self, blk: Block, x, positions, layer, cache, trace, fused):
        cfg = self.cfg
        B, T, d = x.shape
        h = F.layer_norm(x, (d,), blk.ln1_w, blk.ln1_b)
        q, k, v = (h @ blk.w_qkv).split(d, dim=-1)
        shape = (B, T, cfg.n_heads, cfg.head_dim)
        q, k, v = (t.reshape(shape).transpose(1, 2) for t in (q, k, v))
        q = rotary(q, positions, cfg.rope_theta)
        k = rotary(k, positions, cfg.rope_theta)
        if cache is not None:
            start = cache.length
            cache.k[layer, :, :, start:start + T] = k
            cache.v[layer, :, :, start:start + T] = v
            k = cache.k[layer, :, :, : start + T]
            v = cache.v[layer, :, :, : start + T]
            k_pos = torch.arange(start + T).expand(B, -1)
        else:
            k_pos = positions
        if fused and cache is None and trace is None:
            # positions are 0..T-1 in every row on this path
            out = F.scaled_dot_product_attention(q, k, v, is_causal=True)
        else:
            out, attn = self._attend(q, k, v, positions, k_pos)
        if trace is not None:
            qs, qe = trace.query
            trace.weights[layer] = {
                name: attn[:, :, qs:qe, ks:ke].detach().clone() for name, (ks, ke) in trace.keys.items()
            }
        x = x + out.transpose(1, 2).reshape(B, T, d) @ blk.w_o
        h = F.layer_norm(x, (d,), blk.ln2_w, blk.ln2_b)
        x = x + F.gelu(h @ blk.w_up + blk.b_up) @ blk.w_down + blk.b_down
        return x

    def run(self, ids, index_ids, positions, cache: DecodeCache | None = None,
            trace: AttentionTrace | None = None, fused: bool = False) -> tuple[torch.Tensor, torch.Tensor]:
        """Hidden states after the final norm and logits, both (B, T, .).

        ``fused`` selects the library attention kernel; it requires positions
        ``0..T-1`` and is only taken without a cache or trace.
        """
        ids = torch.as_tensor(ids, dtype=torch.long)
        if ids.dim() == 1:
            ids = ids[None]
        B, T = ids.shape
        index_ids = torch.as_tensor(index_ids, dtype=torch.long).reshape(B, T)
        positions = torch.as_tensor(positions, dtype=torch.long)
        positions = positions.expand(B, T) if positions.dim() == 1 else positions.reshape(B, T)
        end = (cache.length if cache is not None else 0) + T
        if end > self.cfg.max_seq_len:
            raise InvalidArgument(f"sequence length {end} exceeds max_seq_len {self.cfg.max_seq_len}")
        if int(ids.min()) < 0 or int(ids.max()) >= self.cfg.vocab_size:
            raise InvalidArgument(f"token ids must lie in [0, {self.cfg.vocab_size})")
        if trace is not None:
            trace.weights = [None] * self.cfg.n_layers
        x = self.embed(ids, index_ids, positions)
        for i, blk in enumerate(self.layers):
            x = self._block(blk, x, positions, i, cache, trace, fused)
        if cache is not None:
            cache.length = end
        hidden = F.layer_norm(x, (self.cfg.d_model,), self.lnf_w, self.lnf_b)
        return hidden, hidden @ self.head


def init_params(cfg: ModelConfig, seed: int = 0) -> TokenARModel:
    """Seeded scaled-normal init; the instruct matrix P and index row 0 start at zero."""
    model = TokenARModel(cfg)
    gen = torch.Generator().manual_seed(int(seed))
    std = 0.02
    resid_std = std / math.sqrt(2 * cfg.n_layers)

    def normal_(p: torch.Tensor, s: float):
        with torch.no_grad():
            p.copy_(torch.randn(p.shape, generator=gen, dtype=torch.float64).to(p.dtype) * s)

    normal_(model.tok_emb, std)
    normal_(model.index_emb, std)
    with torch.no_grad():
        model.index_emb[0].zero_()
    for blk in model.layers:
        normal_(blk.w_qkv, std)
        normal_(blk.w_o, resid_std)
        normal_(blk.w_up, std)
        normal_(blk.w_down, resid_std)
    normal_(model.head, std)
    normal_(model.distill_proj, std)
    return model


# ---------------------------------------------------------------------------
# forward over a bundle, gradients, cached decoding


def forward(model: TokenARModel, batch: Mapping[str, torch.Tensor], trace: TraceSpec | None = None,
            fused: bool = False):
    """Teacher-forced pass over a stacked batch (see ``stack_bundles``).

    Returns logits over the predicted positions (B, S, V), the hidden features
    at those positions (B, S, d) and the attention trace if one was requested.
    """
    ids = batch["input_ids"]
    S = batch["target_ids"].shape[-1]
    rec = AttentionTrace(trace.query, dict(trace.keys)) if trace is not None else None
    T = ids.shape[-1]
    if fused and not torch.equal(batch["position_ids"][0], torch.arange(T)):
        fused = False
    hidden, logits = model.run(ids, batch["index_ids"], batch["position_ids"], trace=rec, fused=fused)
    sl = slice(T - S, T)
    return logits[:, sl], hidden[:, sl], rec


def gradients(model: TokenARModel, loss: torch.Tensor) -> OrderedDict[str, torch.Tensor]:
    """Reverse-mode gradients of a scalar loss for every named parameter."""
    if not torch.isfinite(loss).all():
        raise NumericError(f"non-finite loss {loss.item()}")
    names, params = zip(*model.named_parameters())
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    return OrderedDict(
        (n, g if g is not None else torch.zeros_like(p)) for n, p, g in zip(names, params, grads)
    )


@torch.no_grad()
def prefill(model: TokenARModel, ids, index_ids, positions=None) -> tuple[DecodeCache, torch.Tensor]:
    """Process a context in parallel; returns the cache and last-position logits (B, V)."""
    ids = torch.as_tensor(ids, dtype=torch.long)
    if ids.dim() == 1:
        ids = ids[None]
    B, T = ids.shape
    if T > model.cfg.max_seq_len:
        raise InvalidArgument(f"context length {T} exceeds max_seq_len {model.cfg.max_seq_len}")
    if positions is None:
        positions = torch.arange(T)
    cache = DecodeCache(model.cfg, B)
    _, logits = model.run(ids, index_ids, positions, cache=cache)
    return cache, logits[:, -1]


@torch.no_grad()
def decode_step(model: TokenARModel, cache: DecodeCache, last_token_id, index_id, position=None) -> torch.Tensor:
    """Append one token per stream to the cache and return next-token logits (B, V)."""
    if cache.length >= cache.capacity:
        raise InvalidArgument(f"decode cache full ({cache.capacity} positions)")
    tok = torch.as_tensor(last_token_id, dtype=torch.long).reshape(-1, 1)
    B = tok.shape[0]
    idx = torch.as_tensor(index_id, dtype=torch.long).expand(B).reshape(B, 1)
    pos = cache.length if position is None else position
    pos = torch.as_tensor(pos, dtype=torch.long).expand(B).reshape(B, 1)
    _, logits = model.run(tok, idx, pos, cache=cache)
    return logits[:, -1]


# ---------------------------------------------------------------------------
# checkpoint files


def save_checkpoint(model: TokenARModel, path: str | Path) -> None:
    """Write named tensors as row-major little-endian float32 after a TKAR header."""
    named = [(n, p.detach().to(torch.float32).cpu().numpy()) for n, p in model.named_parameters()]
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(named)))
        for name, arr in named:
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_checkpoint(path: str | Path) -> OrderedDict[str, np.ndarray]:
    path = Path(path)
    data = path.read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise VersionError(f"{path}: not a TKAR checkpoint")
    off = 4

    def take(fmt):
        nonlocal off
        vals = struct.unpack_from(fmt, data, off)
        off += struct.calcsize(fmt)
        return vals

    try:
        version, count = take("<II")
        if version != CHECKPOINT_VERSION:
            raise VersionError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
        tensors = OrderedDict()
        for _ in range(count):
            (nlen,) = take("<I")
            name = data[off:off + nlen].decode("utf-8")
            off += nlen
            (ndim,) = take("<I")
            shape = take(f"<{ndim}I")
            size = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(data, dtype="<f4", count=size, offset=off).reshape(shape)
            off += 4 * size
            tensors[name] = arr.copy()
    except (struct.error, ValueError) as exc:
        raise VersionError(f"{path}: truncated or corrupt checkpoint ({exc})") from exc
    return tensors


def load_checkpoint(path: str | Path, cfg: ModelConfig) -> TokenARModel:
    """Build a model for ``cfg`` and fill it from a checkpoint, checking every shape."""
    tensors = read_checkpoint(path)
    model = TokenARModel(cfg)
    expected = dict(model.named_parameters())
    if set(tensors) != set(expected):
        missing = sorted(set(expected) - set(tensors))
        extra = sorted(set(tensors) - set(expected))
        raise VersionError(f"checkpoint {path} does not match model config {cfg}: "
                           f"missing {missing}, unexpected {extra}")
    with torch.no_grad():
        for name, p in expected.items():
            arr = tensors[name]
            if tuple(arr.shape) != tuple(p.shape):
                raise VersionError(f"checkpoint {path} tensor {name} has shape {arr.shape}, "
                                   f"model config {cfg} expects {tuple(p.shape)}")
            p.copy_(torch.from_numpy(arr).to(p.dtype))
    return model
