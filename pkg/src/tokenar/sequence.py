"""Token sequence layout for conditional generation.

A sequence is the conditioning prefix followed by the predicted span::

    [instruct x M | prompt | ref_1 .. ref_m | background] [predicted span]

With identity-token disentanglement (ITD) on, the predicted span re-emits every
reference image before the target, ``(m + 1) * n`` tokens; otherwise it is the
target alone. Every token carries a source-index id used for the additive
index embedding:

    0        instruct, prompt and other non-image tokens
    1..m     reference r (also for its re-emission in the predicted span)
    m + 1    background
    m + 2    target image
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, Sequence

import numpy as np
import torch

from .errors import InvalidArgument
from .vocab import PROMPT_LEN, Vocab, encode_prompt

if TYPE_CHECKING:
    from .scene_gen import SceneSample

MAX_SUBJECTS = 4
INDEX_TABLE_SIZE = MAX_SUBJECTS + 3

__all__ = [
    "MAX_SUBJECTS", "INDEX_TABLE_SIZE", "SequenceLayout", "SequenceBundle",
    "encode_prompt", "build_training_sequence", "assign_index_embedding", "stack_bundles",
]


@dataclass(frozen=True)
class SequenceLayout:
    m: int = 2
    n: int = 64
    M: int = 30
    prompt_len: int = PROMPT_LEN
    itd_enabled: bool = True

    def __post_init__(self):
        if not 1 <= self.m <= MAX_SUBJECTS:
            raise InvalidArgument(f"reference count m={self.m} outside [1, {MAX_SUBJECTS}]")
        if self.n < 1 or self.M < 0 or self.prompt_len < 0:
            raise InvalidArgument(f"invalid layout sizes n={self.n} M={self.M} prompt_len={self.prompt_len}")

    @property
    def context_len(self) -> int:
        return self.M + self.prompt_len + (self.m + 1) * self.n

    @property
    def span_len(self) -> int:
        return (self.m + 1) * self.n if self.itd_enabled else self.n

    @property
    def total_len(self) -> int:
        return self.context_len + self.span_len

    @property
    def target_index_id(self) -> int:
        return self.m + 2

    def segments(self) -> dict[str, tuple[int, int]]:
        """Half-open [start, end) offsets of every named segment."""
        out = {}
        pos = 0

        def add(name, length):
            nonlocal pos
            out[name] = (pos, pos + length)
            pos += length

        add("instruct", self.M)
        add("prompt", self.prompt_len)
        for r in range(self.m):
            add(f"ref{r + 1}", self.n)
        add("background", self.n)
        if self.itd_enabled:
            for r in range(self.m):
                add(f"echo{r + 1}", self.n)
        add("target", self.n)
        out["refs"] = (out["ref1"][0], out[f"ref{self.m}"][1])
        out["context"] = (0, self.context_len)
        out["span"] = (self.context_len, self.total_len)
        return out

    def span_index_ids(self) -> np.ndarray:
        ids = [np.full(self.n, r + 1) for r in range(self.m)] if self.itd_enabled else []
        ids.append(np.full(self.n, self.target_index_id))
        return np.concatenate(ids).astype(np.int64)


@dataclass
class SequenceBundle:
    context_ids: np.ndarray
    target_ids: np.ndarray
    index_ids: np.ndarray  # over context + predicted span
    position_ids: np.ndarray
    loss_mask: np.ndarray  # over predicted span
    layout: SequenceLayout

    @property
    def input_ids(self) -> np.ndarray:
        """Teacher-forced model input: context plus all but the last target."""
        return np.concatenate([self.context_ids, self.target_ids[:-1]])

    @property
    def input_index_ids(self) -> np.ndarray:
        return self.index_ids[:-1]

    @property
    def input_position_ids(self) -> np.ndarray:
        return self.position_ids[:-1]


def build_training_sequence(sample: "SceneSample", layout: SequenceLayout,
                            vocab: Vocab | None = None) -> SequenceBundle:
    if sample.n_refs != layout.m:
        raise InvalidArgument(f"layout expects m={layout.m} references, sample has {sample.n_refs}")
    n = int(sample.target_tokens.size)
    if n != layout.n:
        raise InvalidArgument(f"layout expects n={layout.n} tokens per image, sample has {n}")
    vocab = vocab or Vocab(sample.K)
    if len(sample.prompt) != layout.prompt_len:
        raise InvalidArgument(f"prompt length {len(sample.prompt)} != layout {layout.prompt_len}")

    refs = [np.asarray(r).ravel() for r in sample.ref_tokens]
    bg = np.asarray(sample.background_tokens).ravel()
    target = np.asarray(sample.target_tokens).ravel()

    context = np.concatenate([
        np.full(layout.M, vocab.pad_id),
        np.asarray(sample.prompt),
        *refs,
        bg,
    ]).astype(np.int64)
    span = np.concatenate([*refs, target] if layout.itd_enabled else [target]).astype(np.int64)

    context_index = np.concatenate([
        np.zeros(layout.M + layout.prompt_len),
        *[np.full(n, r + 1) for r in range(layout.m)],
        np.full(n, layout.m + 1),
    ]).astype(np.int64)
    index_ids = np.concatenate([context_index, layout.span_index_ids()])
    return SequenceBundle(
        context_ids=context,
        target_ids=span,
        index_ids=index_ids,
        position_ids=np.arange(layout.total_len, dtype=np.int64),
        loss_mask=np.ones(layout.span_len, dtype=bool),
        layout=layout,
    )


def assign_index_embedding(index_ids, index_table: torch.Tensor) -> torch.Tensor:
    """Row lookup: every token of one source receives the same table row."""
    ids = torch.as_tensor(np.asarray(index_ids) if not torch.is_tensor(index_ids) else index_ids,
                          dtype=torch.long)
    if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= index_table.shape[0]):
        raise InvalidArgument(f"index ids must lie in [0, {index_table.shape[0]})")
    return index_table[ids]


def stack_bundles(bundles: Sequence[SequenceBundle]) -> dict[str, torch.Tensor]:
    """Batch tensors for teacher-forced training; all bundles share one layout."""
    layouts = {b.layout for b in bundles}
    if len(layouts) != 1:
        raise InvalidArgument("bundles in a batch must share one layout")
    as_t = lambda key: torch.as_tensor(np.stack([getattr(b, key) for b in bundles]))
    return {
        "input_ids": as_t("input_ids"),
        "index_ids": as_t("input_index_ids"),
        "position_ids": as_t("input_position_ids"),
        "target_ids": as_t("target_ids"),
        "loss_mask": as_t("loss_mask"),
    }
