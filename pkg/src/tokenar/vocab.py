"""Token-id vocabulary: image tokens, prompt words, control ids.

Layout of the id space for a codebook of size K::

    [0, K)                     image tokens
    [K, K + n_classes)         subject class words
    [.., .. + n_relations)     relation words
    PAD                        placeholder for instruct slots
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import InvalidArgument

CLASSES = (
    "cat", "dog", "toy", "plushie", "person",
    "robot", "tortoise", "car", "bird", "teapot",
)

RELATIONS = (
    "left-of", "right-of", "above", "below", "hugging", "playing",
    "shaking", "overlapping", "behind", "riding", "surrounding",
)

PROMPT_LEN = 3


def _resolve(value: int | str, names: tuple[str, ...], kind: str) -> int:
    if isinstance(value, str):
        if value not in names:
            raise InvalidArgument(f"unknown {kind} {value!r}")
        return names.index(value)
    idx = int(value)
    if not 0 <= idx < len(names):
        raise InvalidArgument(f"{kind} id {idx} outside [0, {len(names)})")
    return idx


@dataclass(frozen=True)
class Vocab:
    K: int

    @property
    def class_base(self) -> int:
        return self.K

    @property
    def relation_base(self) -> int:
        return self.K + len(CLASSES)

    @property
    def pad_id(self) -> int:
        return self.relation_base + len(RELATIONS)

    @property
    def size(self) -> int:
        return self.pad_id + 1

    def class_id(self, value: int | str) -> int:
        return _resolve(value, CLASSES, "class")

    def relation_id(self, value: int | str) -> int:
        return _resolve(value, RELATIONS, "relation")

    def encode_prompt(self, class_a: int | str, relation: int | str, class_b: int | str) -> list[int]:
        return [
            self.class_base + self.class_id(class_a),
            self.relation_base + self.relation_id(relation),
            self.class_base + self.class_id(class_b),
        ]

    def decode_prompt(self, ids: list[int]) -> tuple[str, str, str]:
        a, r, b = (int(i) for i in ids)
        a -= self.class_base
        b -= self.class_base
        r -= self.relation_base
        if not (0 <= a < len(CLASSES) and 0 <= b < len(CLASSES) and 0 <= r < len(RELATIONS)):
            raise InvalidArgument(f"not a prompt encoding: {ids}")
        return CLASSES[a], RELATIONS[r], CLASSES[b]


def encode_prompt(class_a: int | str, relation: int | str, class_b: int | str, K: int = 64) -> list[int]:
    return Vocab(K).encode_prompt(class_a, relation, class_b)
