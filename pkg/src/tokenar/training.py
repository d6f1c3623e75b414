"""Training objective, AdamW, instruct-token updates and the training loop."""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import torch

from .errors import InvalidArgument, NumericError
from .model import TokenARModel, forward, gradients, save_checkpoint
from .sequence import SequenceBundle, SequenceLayout, build_training_sequence, stack_bundles

log = logging.getLogger(__name__)

LOG_FIELDS = ("step", "ce", "distill", "total", "lr")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.05
    lambda_distill: float = 0.5
    batch_size: int = 8
    steps: int = 1000
    seed: int = 0
    itd_enabled: bool = True
    instruct_enabled: bool = True
    n_instruct: int = 30
    instruct_mode: str = "joint"  # or "standalone": plain SGD on P only, rest frozen
    teacher_seed: int = 1234
    checkpoint_every: int = 0

    def __post_init__(self):
        if not self.lr > 0:
            raise InvalidArgument(f"learning rate must be positive, got {self.lr}")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise InvalidArgument(f"betas must lie in (0, 1), got {self.beta1}, {self.beta2}")
        if self.lambda_distill < 0 or self.weight_decay < 0 or self.eps <= 0:
            raise InvalidArgument("lambda_distill and weight_decay must be >= 0, eps > 0")
        if self.batch_size < 1 or self.steps < 0 or self.n_instruct < 0 or self.checkpoint_every < 0:
            raise InvalidArgument("batch_size >= 1, steps >= 0, n_instruct >= 0 required")
        if self.instruct_mode not in ("joint", "standalone"):
            raise InvalidArgument(f"instruct_mode must be 'joint' or 'standalone', got {self.instruct_mode!r}")

    @property
    def instruct_count(self) -> int:
        return self.n_instruct if self.instruct_enabled else 0

    def layout(self, m: int = 2, n: int = 64) -> SequenceLayout:
        return SequenceLayout(m=m, n=n, M=self.instruct_count, itd_enabled=self.itd_enabled)


@dataclass
class OptState:
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)
    step: int = 0


# ---------------------------------------------------------------------------
# losses


def ce_loss(logits: torch.Tensor, target_ids: torch.Tensor, loss_mask: torch.Tensor):
    """Mean negative log-likelihood over masked positions, plus per-token values.

    Per-token values are returned for every position; masked-out ones are zero.
    Batched inputs pool all masked tokens before averaging.
    """
    if logits.shape[:-1] != target_ids.shape or target_ids.shape != loss_mask.shape:
        raise InvalidArgument(f"shape mismatch: logits {tuple(logits.shape)}, targets "
                              f"{tuple(target_ids.shape)}, mask {tuple(loss_mask.shape)}")
    weight = loss_mask.to(logits.dtype)
    count = weight.sum()
    if count.item() == 0:
        raise InvalidArgument("loss mask selects no positions")
    logp = torch.log_softmax(logits, dim=-1)
    nll = -logp.gather(-1, target_ids.long().unsqueeze(-1)).squeeze(-1)
    per_token = nll * weight
    return per_token.sum() / count, per_token


def teacher_projection(K: int, dim: int, seed: int, dtype=torch.float32) -> torch.Tensor:
    gen = torch.Generator().manual_seed(int(seed))
    return (torch.randn(K, dim, generator=gen, dtype=torch.float64) / np.sqrt(dim)).to(dtype)


def teacher_features(target_tokens, K: int, dim: int = 32, seed: int = 1234, dtype=torch.float32) -> torch.Tensor:
    """Frozen stand-in feature extractor for the distillation target.

    One-hot tokens are averaged over 2x2 token blocks and mapped through a fixed
    seeded random matrix; every token of a block receives its block's feature.
    Input (..., rows, cols) token grid, output (..., rows * cols, dim).
    """
    tokens = torch.as_tensor(np.asarray(target_tokens), dtype=torch.long)
    *lead, rows, cols = tokens.shape
    onehot = torch.nn.functional.one_hot(tokens, K).to(torch.float64)
    r = torch.arange(rows) // 2
    c = torch.arange(cols) // 2
    block = (r[:, None] * ((cols + 1) // 2) + c[None, :]).reshape(-1)
    n_blocks = ((rows + 1) // 2) * ((cols + 1) // 2)
    flat = onehot.reshape(*lead, rows * cols, K)
    sums = torch.zeros(*lead, n_blocks, K, dtype=torch.float64)
    sums.index_add_(len(lead), block, flat)
    counts = torch.bincount(block, minlength=n_blocks).to(torch.float64)
    pooled = sums / counts[:, None]
    feats = pooled @ teacher_projection(K, dim, seed, torch.float64)
    return feats.index_select(len(lead), block).to(dtype)


def distill_loss(hidden: torch.Tensor, projection: torch.Tensor, teacher: torch.Tensor) -> torch.Tensor:
    projected = hidden @ projection
    if projected.shape != teacher.shape:
        raise InvalidArgument(f"projected features {tuple(projected.shape)} != teacher {tuple(teacher.shape)}")
    return ((projected - teacher) ** 2).mean()


def total_loss(ce, distill, lambda_distill: float = 0.5):
    return ce + lambda_distill * distill


# ---------------------------------------------------------------------------
# parameter updates


@torch.no_grad()
def adamw_step(params: Mapping[str, torch.Tensor], grads: Mapping[str, torch.Tensor],
               state: OptState, cfg: TrainConfig) -> OptState:
    """In-place AdamW: decoupled decay first, then bias-corrected moment update."""
    for name, g in grads.items():
        if not torch.isfinite(g).all():
            raise NumericError(f"non-finite gradient for {name}")
    state.step += 1
    t = state.step
    bc1 = 1.0 - cfg.beta1**t
    bc2 = 1.0 - cfg.beta2**t
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise InvalidArgument(f"gradient shape {tuple(g.shape)} != parameter {name} {tuple(p.shape)}")
        if name not in state.m:
            state.m[name] = torch.zeros_like(p)
            state.v[name] = torch.zeros_like(p)
        m, v = state.m[name], state.v[name]
        p.mul_(1.0 - cfg.lr * cfg.weight_decay)
        m.mul_(cfg.beta1).add_(g, alpha=1.0 - cfg.beta1)
        v.mul_(cfg.beta2).addcmul_(g, g, value=1.0 - cfg.beta2)
        denom = (v / bc2).sqrt_().add_(cfg.eps)
        p.addcdiv_(m / bc1, denom, value=-cfg.lr)
    return state


@torch.no_grad()
def instruct_token_update(P: torch.Tensor, grad_P: torch.Tensor, lr: float) -> torch.Tensor:
    if P.shape != grad_P.shape:
        raise InvalidArgument(f"gradient shape {tuple(grad_P.shape)} != P {tuple(P.shape)}")
    return P - lr * grad_P


# ---------------------------------------------------------------------------
# loop


@dataclass
class PreparedSample:
    bundle: SequenceBundle
    teacher: torch.Tensor


def prepare(samples: Sequence, layout: SequenceLayout, K: int, cfg: TrainConfig, distill_dim: int,
            dtype=torch.float32) -> list[PreparedSample]:
    return [
        PreparedSample(
            build_training_sequence(s, layout),
            teacher_features(s.target_tokens, K, distill_dim, cfg.teacher_seed, dtype),
        )
        for s in samples
    ]


def batch_loss(model: TokenARModel, items: Sequence[PreparedSample], lambda_distill: float,
               fused: bool = True):
    batch = stack_bundles([it.bundle for it in items])
    logits, hidden, _ = forward(model, batch, fused=fused)
    ce, _ = ce_loss(logits, batch["target_ids"], batch["loss_mask"])
    n = items[0].bundle.layout.n
    teacher = torch.stack([it.teacher for it in items])
    dist = distill_loss(hidden[:, -n:], model.distill_proj, teacher)
    return total_loss(ce, dist, lambda_distill), ce, dist


def _write_log(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
        w.writeheader()
        for row in rows:
            w.writerow({k: (repr(row[k]) if isinstance(row[k], float) else row[k]) for k in LOG_FIELDS})


@dataclass
class TrainResult:
    history: list[dict]
    checkpoints: list[Path]
    opt_state: OptState


def train_loop(
    samples: Sequence,
    cfg: TrainConfig,
    model: TokenARModel,
    out_dir: str | Path | None = None,
    m: int = 2,
    callback: Callable[[int, dict], bool | None] | None = None,
) -> TrainResult:
    """Train ``model`` in place.

    Batches are drawn from a per-epoch permutation seeded by ``cfg.seed``.
    ``callback(step, row)`` runs after every step and may return True to stop
    early. When ``out_dir`` is given, ``train_log.csv`` and checkpoints
    (``step_XXXXXX.tkar`` at the configured interval, ``final.tkar`` at the end)
    are written there.
    """
    if not samples:
        raise InvalidArgument("training set is empty")
    n = int(samples[0].target_tokens.size)
    layout = cfg.layout(m, n)
    if model.cfg.n_instruct != layout.M:
        raise InvalidArgument(f"model has {model.cfg.n_instruct} instruct slots, training layout needs {layout.M}")
    if layout.total_len - 1 > model.cfg.max_seq_len:
        raise InvalidArgument(f"layout length {layout.total_len} exceeds model max_seq_len {model.cfg.max_seq_len}")
    K = model.cfg.n_image_tokens
    items = prepare(samples, layout, K, cfg, model.cfg.distill_dim, model.cfg.torch_dtype)

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    params = dict(model.named_parameters())
    if cfg.instruct_mode == "standalone":
        trainable = {"instruct"} if layout.M else set()
    else:
        trainable = set(params)
    state = OptState()
    rng = np.random.default_rng(cfg.seed)
    order: list[int] = []
    bs = min(cfg.batch_size, len(items))
    history: list[dict] = []
    checkpoints: list[Path] = []

    def checkpoint(name: str):
        if out is not None:
            path = out / name
            save_checkpoint(model, path)
            checkpoints.append(path)

    for step in range(1, cfg.steps + 1):
        if len(order) < bs:
            order.extend(rng.permutation(len(items)).tolist())
        picked, order = order[:bs], order[bs:]
        loss, ce, dist = batch_loss(model, [items[i] for i in picked], cfg.lambda_distill)
        grads = gradients(model, loss)
        grads = {k: g for k, g in grads.items() if k in trainable}
        if cfg.instruct_mode == "standalone":
            if "instruct" in grads:
                with torch.no_grad():
                    params["instruct"].copy_(instruct_token_update(params["instruct"], grads["instruct"], cfg.lr))
        else:
            adamw_step(params, grads, state, cfg)
        row = {"step": step, "ce": ce.item(), "distill": dist.item(), "total": loss.item(), "lr": cfg.lr}
        history.append(row)
        if not all(np.isfinite([row["ce"], row["distill"], row["total"]])):
            raise NumericError(f"non-finite loss at step {step}: {row}")
        if cfg.checkpoint_every and step % cfg.checkpoint_every == 0 and step != cfg.steps:
            checkpoint(f"step_{step:06d}.tkar")
        if callback is not None and callback(step, row):
            break
    checkpoint("final.tkar")
    if out is not None:
        _write_log(out / "train_log.csv", history)
    return TrainResult(history, checkpoints, state)


@torch.no_grad()
def teacher_forced_metrics(model: TokenARModel, items: Sequence[PreparedSample], batch_size: int = 16) -> dict:
    """Span CE, target-only CE and argmax accuracy under teacher forcing."""
    n = items[0].bundle.layout.n
    tot = {"ce": 0.0, "ce_target": 0.0, "correct": 0, "count": 0, "correct_target": 0, "count_target": 0}
    for i in range(0, len(items), batch_size):
        chunk = items[i:i + batch_size]
        batch = stack_bundles([it.bundle for it in chunk])
        logits, _, _ = forward(model, batch, fused=True)
        mask = batch["loss_mask"]
        _, per = ce_loss(logits, batch["target_ids"], mask)
        hit = (logits.argmax(-1) == batch["target_ids"]) & mask
        tot["ce"] += per.sum().item()
        tot["ce_target"] += per[:, -n:].sum().item()
        tot["correct"] += int(hit.sum())
        tot["count"] += int(mask.sum())
        tot["correct_target"] += int(hit[:, -n:].sum())
        tot["count_target"] += int(mask[:, -n:].sum())
    return {
        "ce": tot["ce"] / tot["count"],
        "ce_target": tot["ce_target"] / tot["count_target"],
        "accuracy": tot["correct"] / tot["count"],
        "accuracy_target": tot["correct_target"] / tot["count_target"],
    }


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
