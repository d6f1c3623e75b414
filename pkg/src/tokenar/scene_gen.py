"""Procedural two-subject scenes with analytic masks, plus the similarity filter.

Scenes are composed directly at token resolution: every token cell is a solid
patch of one palette color, so quantizing a rendered scene recovers its token
grid exactly. Palette index ``BLANK`` (0) is reserved for reference-image
backdrops and for the blanked foreground of the background condition.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DatasetIOError, InvalidArgument
from .tokenizer import (
    DEFAULT_IMAGE_SIZE,
    DEFAULT_K,
    DEFAULT_PATCH,
    Codebook,
    build_codebook,
    dequantize,
    quantize,
    read_ppm,
    write_ppm,
)
from .vocab import CLASSES, RELATIONS, Vocab

BLANK = 0
SHAPES = ("square", "disc", "triangle")
MIN_GRID = 8
MANIFEST = "manifest.jsonl"
FORMAT_NAME = "tokenar-scenes"
FORMAT_VERSION = 1
TIE_TOL = 1e-12


@dataclass(frozen=True)
class SubjectSpec:
    class_id: int
    shape: str
    signature: tuple[int, ...]
    pose_seed: int

    def __post_init__(self):
        if not 0 <= self.class_id < len(CLASSES):
            raise InvalidArgument(f"class id {self.class_id} outside [0, {len(CLASSES)})")
        if self.shape not in SHAPES:
            raise InvalidArgument(f"unknown shape {self.shape!r}")
        if not 2 <= len(self.signature) <= 4 or len(set(self.signature)) != len(self.signature):
            raise InvalidArgument(f"signature must hold 2-4 distinct ids, got {self.signature}")
        object.__setattr__(self, "signature", tuple(int(s) for s in self.signature))

    def to_json(self) -> dict:
        return {
            "class_id": self.class_id,
            "shape": self.shape,
            "signature": list(self.signature),
            "pose_seed": self.pose_seed,
        }

    @classmethod
    def from_json(cls, d: dict) -> "SubjectSpec":
        return cls(int(d["class_id"]), str(d["shape"]), tuple(d["signature"]), int(d["pose_seed"]))


@dataclass
class SceneSample:
    ref_images: list[np.ndarray]
    background: np.ndarray
    target: np.ndarray
    masks: list[np.ndarray]
    relation_id: int
    prompt: list[int]
    subjects: list[SubjectSpec]
    ref_tokens: list[np.ndarray]
    background_tokens: np.ndarray
    target_tokens: np.ndarray
    poses: list[dict] = field(default_factory=list)
    bg_seed: int = 0
    K: int = DEFAULT_K

    @property
    def grid_shape(self) -> tuple[int, int]:
        return tuple(self.target_tokens.shape)

    @property
    def n_refs(self) -> int:
        return len(self.ref_tokens)

    def equals(self, other: "SceneSample") -> bool:
        arrays = lambda s: [*s.ref_images, s.background, s.target, *s.masks,
                            *s.ref_tokens, s.background_tokens, s.target_tokens]
        return (
            self.relation_id == other.relation_id
            and list(self.prompt) == list(other.prompt)
            and self.subjects == other.subjects
            and self.poses == other.poses
            and self.bg_seed == other.bg_seed
            and self.K == other.K
            and all(a.shape == b.shape and np.array_equal(a, b)
                    for a, b in zip(arrays(self), arrays(other)))
        )


# ---------------------------------------------------------------------------
# sprites and placement


def sprite_mask(shape: str, size: int) -> np.ndarray:
    r, c = np.mgrid[0:size, 0:size]
    if shape == "square":
        return np.ones((size, size), dtype=bool)
    if shape == "disc":
        mid = (size - 1) / 2
        return (r - mid) ** 2 + (c - mid) ** 2 <= (size / 2 - 0.25) ** 2
    if shape == "triangle":
        return c <= r
    raise InvalidArgument(f"unknown shape {shape!r}")


def _pattern(signature: Sequence[int], rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    sig = np.asarray(signature, dtype=np.int64)
    return sig[(rows + 2 * cols) % len(sig)]


def sprite_colors(subject: SubjectSpec, size: int) -> np.ndarray:
    r, c = np.mgrid[0:size, 0:size]
    return _pattern(subject.signature, r, c)


def _subject_size(subject: SubjectSpec) -> int:
    return 3 + int(np.random.default_rng(subject.pose_seed).integers(0, 2))


def _subject_rotation(subject: SubjectSpec) -> int:
    return int(np.random.default_rng([subject.pose_seed, 1]).integers(0, 4))


def _jitter_rate(subject: SubjectSpec, max_jitter: float) -> float:
    return float(np.random.default_rng([subject.pose_seed, 2]).uniform(0.0, max_jitter))


def ref_offset(size: int, grid: int) -> tuple[int, int]:
    o = (grid - size) // 2
    return o, o


def _arrange(relation: int, sa: int, sb: int, G: int, rng: np.random.Generator):
    """Top-left corners (A, B) for a relation; boxes are disjoint unless occluding."""
    ri = lambda lo, hi: int(rng.integers(lo, hi + 1))
    half = G // 2
    name = RELATIONS[relation]
    if name in ("left-of", "right-of"):
        a = (ri(0, G - sa), ri(0, half - sa))
        b = (ri(0, G - sb), ri(half, G - sb))
        if name == "right-of":
            a = (a[0], G - sa - a[1])
            b = (b[0], G - sb - b[1])
        return a, b
    if name in ("above", "below"):
        a = (ri(0, half - sa), ri(0, G - sa))
        b = (ri(half, G - sb), ri(0, G - sb))
        if name == "below":
            a = (G - sa - a[0], a[1])
            b = (G - sb - b[0], b[1])
        return a, b
    if name == "hugging":
        ca = ri(0, G - sa - sb)
        return (ri(0, G - sa), ca), (ri(0, G - sb), ca + sa)
    if name == "riding":
        ra = ri(0, G - sa - sb)
        return (ra, ri(0, G - sa)), (ra + sa, ri(0, G - sb))
    if name == "playing":
        return (ri(0, half - sa), ri(0, half - sa)), (ri(half, G - sb), ri(half, G - sb))
    if name == "shaking":
        return (ri(half, G - sa), ri(0, half - sa)), (ri(0, half - sb), ri(half, G - sb))
    if name in ("overlapping", "behind"):
        front, back = (sa, sb) if name == "overlapping" else (sb, sa)
        lo = (ri(0, G - back - 2), ri(0, G - back - 2))
        shift = (ri(1, 2), ri(1, 2))
        hi = (min(lo[0] + shift[0], G - front), min(lo[1] + shift[1], G - front))
        return (hi, lo) if name == "overlapping" else (lo, hi)
    if name == "surrounding":
        return (ri(1, G - sa - 1), ri(1, G - sa - 1)), None
    raise InvalidArgument(f"relation id {relation} outside [0, {len(RELATIONS)})")


def _place(canvas_mask: np.ndarray, canvas_colors: np.ndarray, mask: np.ndarray,
           colors: np.ndarray, corner: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    full_mask = np.zeros_like(canvas_mask)
    full_colors = np.zeros_like(canvas_colors)
    r, c = corner
    s = mask.shape[0]
    full_mask[r:r + s, c:c + s] = mask
    full_colors[r:r + s, c:c + s] = colors
    return full_mask, full_colors


def _background_tokens(bg_seed: int, grid: int, pool: np.ndarray) -> np.ndarray:
    rng = np.random.default_rng(bg_seed)
    colors = rng.choice(pool, size=3, replace=False)
    r, c = np.mgrid[0:grid, 0:grid]
    kind = int(rng.integers(0, 4))
    if kind == 0:
        idx = (r // 2) % 2
    elif kind == 1:
        idx = (c // 2) % 2
    elif kind == 2:
        idx = ((r // 2) + (c // 2)) % 2
    else:
        idx = (r + c >= grid).astype(np.int64)
    tokens = colors[idx]
    horizon = int(rng.integers(grid // 2, grid))
    tokens[horizon:, :] = colors[2]
    return tokens


def compose_scene(
    subj_a: SubjectSpec,
    subj_b: SubjectSpec,
    relation_id: int,
    bg_seed: int,
    codebook: Codebook | None = None,
    patch: int = DEFAULT_PATCH,
    image_size: int = DEFAULT_IMAGE_SIZE,
    max_jitter: float = 0.25,
) -> SceneSample:
    """Render one scene; A is the first reference, B the second."""
    codebook = codebook or build_codebook(0, DEFAULT_K)
    K = codebook.K
    if set(subj_a.signature) & set(subj_b.signature):
        raise InvalidArgument("subject signatures overlap")
    if not 0 <= relation_id < len(RELATIONS):
        raise InvalidArgument(f"relation id {relation_id} outside [0, {len(RELATIONS)})")
    if image_size % patch:
        raise InvalidArgument(f"image size {image_size} not divisible by patch {patch}")
    G = image_size // patch
    if G < MIN_GRID:
        raise InvalidArgument(f"token grid {G} too small for two subjects (need >= {MIN_GRID})")
    used = set(subj_a.signature) | set(subj_b.signature)
    if BLANK in used or max(used) >= K:
        raise InvalidArgument(f"signature ids must lie in [1, {K})")
    pool = np.array([k for k in range(1, K) if k not in used])
    if len(pool) < 3:
        raise InvalidArgument(f"codebook of {K} entries leaves no background colors")

    subjects = [subj_a, subj_b]
    sizes = [_subject_size(s) for s in subjects]
    rots = [_subject_rotation(s) for s in subjects]
    rng = np.random.default_rng([bg_seed, relation_id, subj_a.pose_seed, subj_b.pose_seed])

    # references: canonical pose, centred on a blank backdrop
    ref_tokens = []
    for subj, s in zip(subjects, sizes):
        grid = np.full((G, G), BLANK, dtype=np.int64)
        r0, c0 = ref_offset(s, G)
        m = sprite_mask(subj.shape, s)
        grid[r0:r0 + s, c0:c0 + s][m] = sprite_colors(subj, s)[m]
        ref_tokens.append(grid)

    corner_a, corner_b = _arrange(relation_id, sizes[0], sizes[1], G, rng)
    for i, corner in enumerate((corner_a, corner_b)):
        if corner is not None and corner == ref_offset(sizes[i], G) and rots[i] == 0:
            rots[i] = 2

    zeros_b = np.zeros((G, G), dtype=bool)
    zeros_i = np.zeros((G, G), dtype=np.int64)
    layers = []
    poses = []
    for i, (subj, s, corner) in enumerate(zip(subjects, sizes, (corner_a, corner_b))):
        if corner is None:
            continue
        m = np.rot90(sprite_mask(subj.shape, s), rots[i])
        col = np.rot90(sprite_colors(subj, s), rots[i])
        layers.append(_place(zeros_b, zeros_i, m, col, corner))
        poses.append({"kind": "sprite", "row": corner[0], "col": corner[1], "rot": rots[i], "size": s})
    if corner_b is None:
        # surrounding: B becomes a one-cell ring around A's box
        (ra, ca), s = corner_a, sizes[0]
        ring = np.zeros((G, G), dtype=bool)
        ring[ra - 1:ra + s + 1, ca - 1:ca + s + 1] = True
        ring[ra:ra + s, ca:ca + s] = False
        r, c = np.mgrid[0:G, 0:G]
        layers.append((ring, np.where(ring, _pattern(subj_b.signature, r, c), 0)))
        poses.append({"kind": "ring", "row": ra - 1, "col": ca - 1, "rot": 0, "size": s + 2})

    (mask_a, col_a), (mask_b, col_b) = layers
    if RELATIONS[relation_id] == "behind":
        mask_a = mask_a & ~mask_b
    else:
        mask_b = mask_b & ~mask_a
    masks = [mask_a, mask_b]

    scene_bg = _background_tokens(bg_seed, G, pool)
    target = scene_bg.copy()
    for subj, m, col in zip(subjects, masks, (col_a, col_b)):
        cells = col.copy()
        rate = _jitter_rate(subj, max_jitter)
        jit = np.random.default_rng([subj.pose_seed, bg_seed, 3])
        flip = (jit.random((G, G)) < rate) & m
        sig = np.asarray(subj.signature)
        for rr, cc in zip(*np.nonzero(flip)):
            others = sig[sig != cells[rr, cc]]
            cells[rr, cc] = others[jit.integers(0, len(others))]
        target[m] = cells[m]
    background = scene_bg.copy()
    background[mask_a | mask_b] = BLANK

    vocab = Vocab(K)
    prompt = vocab.encode_prompt(subj_a.class_id, relation_id, subj_b.class_id)
    return SceneSample(
        ref_images=[dequantize(t, codebook, patch) for t in ref_tokens],
        background=dequantize(background, codebook, patch),
        target=dequantize(target, codebook, patch),
        masks=masks,
        relation_id=relation_id,
        prompt=prompt,
        subjects=subjects,
        ref_tokens=ref_tokens,
        background_tokens=background,
        target_tokens=target,
        poses=poses,
        bg_seed=bg_seed,
        K=K,
    )


def random_subject_pair(rng: np.random.Generator, K: int = DEFAULT_K) -> tuple[SubjectSpec, SubjectSpec]:
    na, nb = rng.integers(2, 5, size=2)
    sig = rng.choice(np.arange(1, K), size=na + nb, replace=False)
    ca, cb = rng.choice(len(CLASSES), size=2, replace=False)
    sa, sb = rng.integers(0, len(SHAPES), size=2)
    pa, pb = rng.integers(0, 2**31, size=2)
    return (
        SubjectSpec(int(ca), SHAPES[sa], tuple(int(x) for x in sig[:na]), int(pa)),
        SubjectSpec(int(cb), SHAPES[sb], tuple(int(x) for x in sig[na:]), int(pb)),
    )


def random_scene(rng: np.random.Generator, codebook: Codebook, **kw) -> SceneSample:
    a, b = random_subject_pair(rng, codebook.K)
    relation = int(rng.integers(0, len(RELATIONS)))
    return compose_scene(a, b, relation, int(rng.integers(0, 2**31)), codebook, **kw)


# ---------------------------------------------------------------------------
# features and the similarity filter


def region_histogram(tokens: np.ndarray, mask: np.ndarray, K: int = DEFAULT_K) -> np.ndarray:
    tokens = np.asarray(tokens)
    mask = np.asarray(mask, dtype=bool)
    if tokens.shape != mask.shape:
        raise InvalidArgument(f"mask shape {mask.shape} != token grid shape {tokens.shape}")
    counts = np.bincount(tokens[mask].ravel(), minlength=K).astype(np.float64)
    if len(counts) > K:
        raise InvalidArgument(f"token ids exceed histogram size {K}")
    total = counts.sum()
    return counts / total if total else counts


def similarity(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidArgument(f"feature dimensions differ: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    if np.array_equal(a, b):
        return 1.0
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def filter_scores(sample: SceneSample) -> tuple[float, float]:
    """Similarity of each subject's target region to its reference foreground."""
    scores = []
    for ref, mask in zip(sample.ref_tokens, sample.masks):
        fg = region_histogram(sample.target_tokens, mask, sample.K)
        rf = region_histogram(ref, ref != BLANK, sample.K)
        scores.append(similarity(fg, rf))
    return scores[0], scores[1]


def similarity_gate(scores: Iterable[float], delta: float) -> bool:
    # cosines of small-count histograms are spaced far wider than TIE_TOL, so the
    # tolerance only settles exact ties (e.g. a cosine of exactly 9/10 at delta 0.9)
    return min(scores) >= delta - TIE_TOL


def filter_sample(sample: SceneSample, delta: float = 0.8) -> bool:
    return similarity_gate(filter_scores(sample), delta)


# ---------------------------------------------------------------------------
# dataset files


def rle_encode(mask: np.ndarray) -> list[int]:
    """Run lengths over the row-major mask, starting with a (possibly empty) False run."""
    flat = np.asarray(mask, dtype=bool).ravel()
    runs, current, count = [], False, 0
    for v in flat:
        if v == current:
            count += 1
        else:
            runs.append(count)
            current, count = bool(v), 1
    runs.append(count)
    return runs


def rle_decode(runs: Sequence[int], shape: tuple[int, int]) -> np.ndarray:
    if any(int(r) < 0 for r in runs) or sum(runs) != shape[0] * shape[1]:
        raise InvalidArgument(f"run lengths do not cover a {shape} mask")
    values = np.zeros(len(runs), dtype=bool)
    values[1::2] = True
    return np.repeat(values, runs).reshape(shape)


def write_manifest(path: str | Path, header: dict, records: Sequence[dict]) -> None:
    header = {**header, "count": len(records)}
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header) + "\n")
        for rec in records:
            fh.write(json.dumps(rec) + "\n")


def read_manifest(path: str | Path) -> tuple[dict, list[dict]]:
    path = Path(path)
    if not path.is_file():
        raise DatasetIOError(f"{path}: manifest not found")
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    parsed = []
    for lineno, line in enumerate(lines, start=1):
        try:
            obj = json.loads(line)
            if not isinstance(obj, dict):
                raise ValueError("record is not an object")
        except ValueError as exc:
            raise DatasetIOError(f"{path}:{lineno}: corrupt manifest line ({exc})") from exc
        parsed.append(obj)
    if not parsed or parsed[0].get("format") != FORMAT_NAME:
        raise DatasetIOError(f"{path}:1: missing {FORMAT_NAME} header")
    header, records = parsed[0], parsed[1:]
    if header.get("version") != FORMAT_VERSION:
        raise DatasetIOError(f"{path}:1: unsupported format version {header.get('version')}")
    if header.get("count") != len(records):
        raise DatasetIOError(f"{path}: header count {header.get('count')} != {len(records)} records")
    return header, records


def write_dataset(samples: Sequence[SceneSample], directory: str | Path, codebook: Codebook,
                  patch: int = DEFAULT_PATCH, extra: dict | None = None) -> Path:
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    records = []
    for i, s in enumerate(samples):
        stem = f"{i:06d}"
        paths = {
            "ref_images": [f"images/{stem}_ref{j + 1}.ppm" for j in range(s.n_refs)],
            "background": f"images/{stem}_bg.ppm",
            "target": f"images/{stem}_target.ppm",
        }
        for rel, img in zip(paths["ref_images"], s.ref_images):
            write_ppm(directory / rel, img)
        write_ppm(directory / paths["background"], s.background)
        write_ppm(directory / paths["target"], s.target)
        records.append({
            "id": stem,
            **paths,
            "masks": [rle_encode(m) for m in s.masks],
            "relation_id": s.relation_id,
            "prompt": [int(p) for p in s.prompt],
            "subjects": [subj.to_json() for subj in s.subjects],
            "signatures": [list(subj.signature) for subj in s.subjects],
            "scores": list(filter_scores(s)),
            "poses": s.poses,
            "bg_seed": s.bg_seed,
        })
    header = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "K": codebook.K,
        "codebook_seed": codebook.seed,
        "patch": patch,
        "grid": list(samples[0].grid_shape) if samples else None,
        **(extra or {}),
    }
    write_manifest(directory / MANIFEST, header, records)
    return directory


def read_dataset(directory: str | Path) -> tuple[list[SceneSample], dict]:
    """Load samples and the manifest header; images are re-quantized on load."""
    directory = Path(directory)
    manifest = directory / MANIFEST
    header, records = read_manifest(manifest)
    codebook = build_codebook(int(header["codebook_seed"]), int(header["K"]))
    patch = int(header["patch"])
    samples = []
    for lineno, rec in enumerate(records, start=2):
        try:
            refs = [read_ppm(directory / p) for p in rec["ref_images"]]
            bg = read_ppm(directory / rec["background"])
            tgt = read_ppm(directory / rec["target"])
            grid = tuple(header["grid"])
            samples.append(SceneSample(
                ref_images=refs,
                background=bg,
                target=tgt,
                masks=[rle_decode(m, grid) for m in rec["masks"]],
                relation_id=int(rec["relation_id"]),
                prompt=[int(p) for p in rec["prompt"]],
                subjects=[SubjectSpec.from_json(d) for d in rec["subjects"]],
                ref_tokens=[quantize(r, codebook, patch) for r in refs],
                background_tokens=quantize(bg, codebook, patch),
                target_tokens=quantize(tgt, codebook, patch),
                poses=rec.get("poses", []),
                bg_seed=int(rec.get("bg_seed", 0)),
                K=codebook.K,
            ))
        except (KeyError, TypeError, InvalidArgument) as exc:
            raise DatasetIOError(f"{manifest}:{lineno}: malformed record ({exc})") from exc
    return samples, header
