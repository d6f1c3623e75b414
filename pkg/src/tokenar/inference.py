"""Conditional generation: prefill the conditioning prefix, then decode the span."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .errors import InvalidArgument
from .model import AttentionTrace, TokenARModel, TraceSpec, decode_step, prefill
from .sequence import SequenceLayout, build_training_sequence


@dataclass(frozen=True)
class GenerateConfig:
    mode: str = "greedy"  # or "sample"
    temperature: float = 1.0
    top_k: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("greedy", "sample"):
            raise InvalidArgument(f"decode mode must be 'greedy' or 'sample', got {self.mode!r}")
        if self.mode == "sample" and not self.temperature > 0:
            raise InvalidArgument(f"sampling needs temperature > 0, got {self.temperature}")
        if self.top_k is not None and self.top_k < 1:
            raise InvalidArgument(f"top_k must be >= 1, got {self.top_k}")


@dataclass
class GenerateResult:
    target: np.ndarray  # (B, rows, cols)
    span: np.ndarray  # (B, span_len)
    trace: AttentionTrace | None = None


def _choose(logits: torch.Tensor, n_image: int, gcfg: GenerateConfig, gen: torch.Generator | None):
    logits = logits.clone()
    logits[:, n_image:] = float("-inf")
    if gcfg.mode == "greedy":
        return logits.argmax(-1)
    logits = logits / gcfg.temperature
    if gcfg.top_k is not None and gcfg.top_k < n_image:
        kth = torch.topk(logits, gcfg.top_k, dim=-1).values[:, -1:]
        logits = logits.masked_fill(logits < kth, float("-inf"))
    probs = torch.softmax(logits.to(torch.float64), dim=-1)
    return torch.multinomial(probs, 1, generator=gen).squeeze(-1)


def default_trace_spec(layout: SequenceLayout) -> TraceSpec:
    """Queries are the rows that predict target tokens; keys cover every conditioning segment."""
    seg = layout.segments()
    t0, t1 = seg["target"]
    keys = {"prompt": seg["prompt"], "refs": seg["refs"], "background": seg["background"]}
    if layout.M:
        keys["instruct"] = seg["instruct"]
    return TraceSpec(query=(t0 - 1, t1 - 1), keys=keys)


@torch.no_grad()
def decode_span(model: TokenARModel, context_ids: torch.Tensor, context_index: torch.Tensor,
                span_index: np.ndarray, gcfg: GenerateConfig = GenerateConfig(),
                use_cache: bool = True) -> torch.Tensor:
    """Decode ``len(span_index)`` image tokens after a (B, C) context.

    ``use_cache=False`` recomputes the full sequence at every step with the same
    attention kernel; it exists to check the cached path.
    """
    B, C = context_ids.shape
    S = len(span_index)
    if C + S - 1 > model.cfg.max_seq_len:
        raise InvalidArgument(f"layout needs {C + S - 1} positions, model allows {model.cfg.max_seq_len}")
    K = model.cfg.n_image_tokens
    gen = torch.Generator().manual_seed(gcfg.seed) if gcfg.mode == "sample" else None
    out = torch.zeros(B, S, dtype=torch.long)
    span_idx = torch.as_tensor(span_index, dtype=torch.long)
    if use_cache:
        cache, logits = prefill(model, context_ids, context_index)
    else:
        ids, idx = context_ids, context_index
        logits = model.run(ids, idx, torch.arange(C))[1][:, -1]
    for i in range(S):
        tok = _choose(logits, K, gcfg, gen)
        out[:, i] = tok
        if i == S - 1:
            break
        if use_cache:
            logits = decode_step(model, cache, tok, span_idx[i], C + i)
        else:
            ids = torch.cat([ids, tok[:, None]], dim=1)
            idx = torch.cat([idx, span_idx[i].expand(B, 1)], dim=1)
            logits = model.run(ids, idx, torch.arange(ids.shape[1]))[1][:, -1]
    return out


def extract_target(span, layout: SequenceLayout, grid_shape: tuple[int, int] | None = None) -> np.ndarray:
    """Last n tokens of a decoded span as a token grid (works on (S,) or (B, S))."""
    span = np.asarray(span)
    if span.shape[-1] != layout.span_len:
        raise InvalidArgument(f"span length {span.shape[-1]} != layout span length {layout.span_len}")
    if grid_shape is None:
        side = int(round(np.sqrt(layout.n)))
        grid_shape = (side, layout.n // side)
    if grid_shape[0] * grid_shape[1] != layout.n:
        raise InvalidArgument(f"grid {grid_shape} does not hold {layout.n} tokens")
    return span[..., -layout.n:].reshape(*span.shape[:-1], *grid_shape)


@torch.no_grad()
def generate_batch(model: TokenARModel, samples: Sequence, layout: SequenceLayout,
                   gcfg: GenerateConfig = GenerateConfig(), capture: TraceSpec | bool | None = None,
                   use_cache: bool = True) -> GenerateResult:
    """Generate targets for several samples that share one layout.

    With ``capture`` set (True selects ``default_trace_spec``), the decoded
    sequence is re-run once with the explicit attention kernel to record the
    requested attention rows.
    """
    if layout.M != model.cfg.n_instruct:
        raise InvalidArgument(f"layout has {layout.M} instruct slots, model has {model.cfg.n_instruct}")
    bundles = [build_training_sequence(s, layout) for s in samples]
    C = layout.context_len
    context = torch.as_tensor(np.stack([b.context_ids for b in bundles]))
    index = torch.as_tensor(np.stack([b.index_ids for b in bundles]))
    span = decode_span(model, context, index[:, :C], layout.span_index_ids(), gcfg, use_cache)
    trace = None
    if capture:
        spec = default_trace_spec(layout) if capture is True else capture
        trace = AttentionTrace(spec.query, dict(spec.keys))
        ids = torch.cat([context, span[:, :-1]], dim=1)
        model.run(ids, index[:, :-1], torch.arange(ids.shape[1]), trace=trace)
    grid = samples[0].target_tokens.shape
    span_np = span.numpy()
    return GenerateResult(extract_target(span_np, layout, grid), span_np, trace)


def generate(model: TokenARModel, sample, layout: SequenceLayout, gcfg: GenerateConfig = GenerateConfig(),
             capture: TraceSpec | bool | None = None) -> tuple[np.ndarray, np.ndarray, AttentionTrace | None]:
    res = generate_batch(model, [sample], layout, gcfg, capture)
    return res.target[0], res.span[0], res.trace
