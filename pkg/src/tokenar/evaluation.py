"""Metrics, attention analyses and the ablation harness."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np
import torch

from .errors import InvalidArgument
from .inference import GenerateConfig, generate_batch
from .model import AttentionTrace, ModelConfig, TokenARModel, init_params
from .tokenizer import DEFAULT_PATCH, Codebook, dequantize
from .training import TrainConfig, prepare, teacher_forced_metrics, train_loop
from .vocab import Vocab

log = logging.getLogger(__name__)

PSNR_CAP = 99.0
VARIANTS = ("full", "no-instruct", "no-ITD", "baseline")


def psnr(a: np.ndarray, b: np.ndarray, mask: np.ndarray | None = None) -> float:
    """PSNR in dB for [0, 1] images; ``mask`` (H, W) restricts the pixels compared."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidArgument(f"image shapes differ: {a.shape} vs {b.shape}")
    diff = (a - b) ** 2
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != a.shape[:2]:
            raise InvalidArgument(f"mask shape {mask.shape} != image shape {a.shape[:2]}")
        diff = diff[mask]
    if diff.size == 0:
        raise InvalidArgument("psnr over an empty pixel set")
    mse = float(diff.mean())
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def token_mask_to_pixels(mask: np.ndarray, patch: int = DEFAULT_PATCH) -> np.ndarray:
    return np.repeat(np.repeat(np.asarray(mask, dtype=bool), patch, axis=0), patch, axis=1)


def token_accuracy(pred: np.ndarray, truth: np.ndarray, mask: np.ndarray | None = None) -> float:
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise InvalidArgument(f"token grid shapes differ: {pred.shape} vs {truth.shape}")
    hit = pred == truth
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != pred.shape:
            raise InvalidArgument(f"mask shape {mask.shape} != grid shape {pred.shape}")
        hit = hit[mask]
    if hit.size == 0:
        raise InvalidArgument("token accuracy over an empty selection")
    return float(hit.mean())


def identity_confusion(pred: np.ndarray, sample) -> float:
    """Mean over subjects of the share of a subject's cells painted with the other's signature."""
    pred = np.asarray(pred)
    rates = []
    for i, mask in enumerate(sample.masks):
        if pred.shape != mask.shape:
            raise InvalidArgument(f"prediction shape {pred.shape} != mask shape {mask.shape}")
        if not mask.any():
            raise InvalidArgument(f"subject {i} has an empty mask")
        others = [s for j, subj in enumerate(sample.subjects) if j != i for s in subj.signature]
        rates.append(float(np.isin(pred[mask], others).mean()))
    return float(np.mean(rates))


def _entropy(rows: torch.Tensor) -> torch.Tensor:
    p = rows.to(torch.float64)
    return -(torch.where(p > 0, p * torch.log(p), torch.zeros_like(p))).sum(-1)


def attn_focus_entropy(trace: AttentionTrace, layer: int, key: str = "refs") -> float:
    """Mean Shannon entropy (nats) of the recorded rows over one key span."""
    return float(_entropy(trace.rows(layer, key)).mean())


def attention_profile(trace: AttentionTrace, layer: int, key: str) -> torch.Tensor:
    """Attention mass each query sends to a key span, normalized over queries: (B, H, Q)."""
    mass = trace.raw(layer, key).to(torch.float64).sum(-1)
    return mass / mass.sum(-1, keepdim=True)


def attn_prompt_similarity(trace: AttentionTrace, layer: int) -> float:
    """Mean L1 distance between the instruct-key and prompt-key query profiles (0 = identical)."""
    for key in ("instruct", "prompt"):
        if key not in trace.keys or trace.keys[key][1] <= trace.keys[key][0]:
            raise InvalidArgument(f"trace has no {key!r} key span")
    a = attention_profile(trace, layer, "instruct")
    b = attention_profile(trace, layer, "prompt")
    return float((a - b).abs().sum(-1).mean())


# ---------------------------------------------------------------------------
# evaluation over a dataset


@dataclass
class EvalReport:
    psnr_full: float
    psnr_background: float
    token_accuracy: float
    identity_confusion: float
    focus_entropy: list[float]
    prompt_divergence: list[float]
    sample_count: int
    eval_ce: float = float("nan")
    subject_accuracy: float = float("nan")

    def to_dict(self) -> dict:
        return asdict(self)

    def scalar_fields(self) -> dict[str, float]:
        d = {k: v for k, v in self.to_dict().items() if not isinstance(v, list)}
        for i, v in enumerate(self.focus_entropy):
            d[f"focus_entropy_L{i}"] = v
        for i, v in enumerate(self.prompt_divergence):
            d[f"prompt_divergence_L{i}"] = v
        return d


def score_predictions(preds: Sequence[np.ndarray], samples: Sequence, codebook: Codebook,
                      patch: int = DEFAULT_PATCH) -> dict:
    """Image and token metrics of predicted target grids against their samples."""
    psnr_f, psnr_b, acc, conf, subj = [], [], [], [], []
    for pred, s in zip(preds, samples):
        img = dequantize(pred, codebook, patch)
        fg = s.masks[0] | s.masks[1]
        psnr_f.append(psnr(img, s.target))
        if (~fg).any():
            psnr_b.append(psnr(img, s.target, token_mask_to_pixels(~fg, patch)))
        acc.append(token_accuracy(pred, s.target_tokens))
        subj.append(token_accuracy(pred, s.target_tokens, fg))
        conf.append(identity_confusion(pred, s))
    return {
        "psnr_full": float(np.mean(psnr_f)),
        "psnr_background": float(np.mean(psnr_b)) if psnr_b else PSNR_CAP,
        "token_accuracy": float(np.mean(acc)),
        "identity_confusion": float(np.mean(conf)),
        "subject_accuracy": float(np.mean(subj)),
        "sample_count": len(preds),
    }


def evaluate(model: TokenARModel, samples: Sequence, layout, codebook: Codebook, patch: int = DEFAULT_PATCH,
             gcfg: GenerateConfig = GenerateConfig(), batch_size: int = 25, train_cfg: TrainConfig | None = None,
             ) -> EvalReport:
    preds, entropies, divergences = [], [], []
    has_instruct = layout.M > 0
    for i in range(0, len(samples), batch_size):
        chunk = samples[i:i + batch_size]
        res = generate_batch(model, chunk, layout, gcfg, capture=True)
        preds.extend(res.target)
        w = len(chunk)
        entropies.append([w * attn_focus_entropy(res.trace, L) for L in range(res.trace.n_layers)])
        if has_instruct:
            divergences.append([w * attn_prompt_similarity(res.trace, L) for L in range(res.trace.n_layers)])
    scores = score_predictions(preds, samples, codebook, patch)
    n = len(samples)
    focus = (np.sum(entropies, axis=0) / n).tolist()
    div = (np.sum(divergences, axis=0) / n).tolist() if divergences else []
    cfg = train_cfg or TrainConfig(itd_enabled=layout.itd_enabled, n_instruct=layout.M,
                                   instruct_enabled=layout.M > 0)
    items = prepare(samples, layout, model.cfg.n_image_tokens, cfg, model.cfg.distill_dim, model.cfg.torch_dtype)
    tf = teacher_forced_metrics(model, items)
    return EvalReport(
        psnr_full=scores["psnr_full"],
        psnr_background=scores["psnr_background"],
        token_accuracy=scores["token_accuracy"],
        identity_confusion=scores["identity_confusion"],
        focus_entropy=focus,
        prompt_divergence=div,
        sample_count=n,
        eval_ce=tf["ce_target"],
        subject_accuracy=scores["subject_accuracy"],
    )


# ---------------------------------------------------------------------------
# ablation


def variant_config(base: TrainConfig, variant: str) -> tuple[TrainConfig, bool]:
    """Training config and index-embedding switch for one ablation variant."""
    if variant == "full":
        return replace(base, itd_enabled=True, instruct_enabled=True), True
    if variant == "no-instruct":
        return replace(base, itd_enabled=True, instruct_enabled=False), True
    if variant == "no-ITD":
        return replace(base, itd_enabled=False, instruct_enabled=True), True
    if variant == "baseline":
        return replace(base, itd_enabled=False, instruct_enabled=False), False
    raise InvalidArgument(f"unknown variant {variant!r}; choose from {VARIANTS}")


@dataclass
class AblationResult:
    runs: list[dict] = field(default_factory=list)  # one per (variant, seed)
    summary: list[dict] = field(default_factory=list)  # one per variant


def summarize_runs(runs: Sequence[dict], variants: Sequence[str]) -> list[dict]:
    rows = []
    for v in variants:
        mine = [r for r in runs if r["variant"] == v]
        row = {"variant": v, "seeds": len(mine)}
        keys = [k for k in mine[0] if k not in ("variant", "seed")]
        for k in keys:
            vals = np.array([r[k] for r in mine], dtype=np.float64)
            row[f"{k}_mean"] = float(vals.mean())
            row[f"{k}_min"] = float(vals.min())
            row[f"{k}_max"] = float(vals.max())
        rows.append(row)
    return rows


def run_ablation(train_samples: Sequence, eval_samples: Sequence, codebook: Codebook,
                 base_cfg: TrainConfig, model_kwargs: dict, variants: Sequence[str] = VARIANTS,
                 seeds: Sequence[int] = (0,), patch: int = DEFAULT_PATCH, m: int = 2,
                 gcfg: GenerateConfig = GenerateConfig(), progress=None) -> AblationResult:
    """Train every variant for every seed under the same step and batch budget, then evaluate."""
    if not seeds:
        raise InvalidArgument("ablation needs at least one seed")
    for v in variants:
        variant_config(base_cfg, v)
    K = codebook.K
    n = int(train_samples[0].target_tokens.size)
    result = AblationResult()
    for v in variants:
        for seed in seeds:
            cfg, use_index = variant_config(replace(base_cfg, seed=seed), v)
            layout = cfg.layout(m, n)
            mcfg = ModelConfig(vocab_size=Vocab(K).size, n_image_tokens=K, n_instruct=layout.M,
                               use_index_embedding=use_index, **model_kwargs)
            model = init_params(mcfg, seed)
            train_loop(train_samples, cfg, model, m=m)
            report = evaluate(model, eval_samples, layout, codebook, patch, gcfg, train_cfg=cfg)
            row = {"variant": v, "seed": seed, **report.scalar_fields()}
            result.runs.append(row)
            log.info("ablation %s seed=%d: %s", v, seed, row)
            if progress is not None:
                progress(row)
    result.summary = summarize_runs(result.runs, variants)
    return result
