"""Shared fixtures for the model and acceptance tests."""

from types import SimpleNamespace

import numpy as np
import torch

from tokenar.model import ModelConfig, forward, init_params
from tokenar.sequence import SequenceLayout, build_training_sequence, stack_bundles
from tokenar.training import ce_loss, distill_loss, teacher_features, total_loss
from tokenar.vocab import Vocab, encode_prompt


def tiny_sample(rng, K=16, m=2, rows=2, cols=2):
    """Scene-shaped record with random token grids (no images needed for sequencing)."""
    grid = lambda: rng.integers(1, K, (rows, cols))
    return SimpleNamespace(
        n_refs=m,
        K=K,
        ref_tokens=[grid() for _ in range(m)],
        background_tokens=grid(),
        target_tokens=grid(),
        prompt=encode_prompt(int(rng.integers(10)), int(rng.integers(11)), int(rng.integers(10)), K),
    )


def tiny_setup(dtype="float64", seed=0, K=16, d=16, layers=2, heads=2, M=3, m=2, n_side=2, batch=2,
               itd=True):
    rng = np.random.default_rng(seed)
    layout = SequenceLayout(m=m, n=n_side * n_side, M=M, itd_enabled=itd)
    cfg = ModelConfig(vocab_size=Vocab(K).size, n_image_tokens=K, d_model=d, n_layers=layers,
                      n_heads=heads, max_seq_len=layout.total_len, n_instruct=M, distill_dim=8, dtype=dtype)
    model = init_params(cfg, seed)
    samples = [tiny_sample(rng, K, m, n_side, n_side) for _ in range(batch)]
    batch_t = stack_bundles([build_training_sequence(s, layout) for s in samples])
    teacher = torch.stack([teacher_features(s.target_tokens, K, 8, 7, cfg.torch_dtype) for s in samples])
    return model, batch_t, teacher, layout


def objective(model, batch, teacher, lam=0.5):
    logits, hidden, _ = forward(model, batch)
    ce, _ = ce_loss(logits, batch["target_ids"], batch["loss_mask"])
    n = teacher.shape[1]
    return total_loss(ce, distill_loss(hidden[:, -n:], model.distill_proj, teacher), lam)


def perturb_zero_init(model, seed=1, scale=0.02):
    """Move P and index row 0 off their zero init so every tensor has generic gradients."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        model.instruct.copy_(torch.randn(model.instruct.shape, generator=gen, dtype=torch.float64) * scale)
        model.index_emb[0].copy_(torch.randn(model.cfg.d_model, generator=gen, dtype=torch.float64) * scale)


def to_dtype(model, dtype):
    cfg = ModelConfig(**{**model.cfg.to_dict(), "dtype": dtype})
    other = type(model)(cfg)
    with torch.no_grad():
        for (_, src), (_, dst) in zip(model.named_parameters(), other.named_parameters()):
            dst.copy_(src.to(dst.dtype))
    return other


def sample_coordinates(grads, per_tensor, rng):
    """Random coordinates from every tensor, drawn from entries with a nonzero gradient when possible."""
    coords = []
    for name, g in grads.items():
        flat = g.reshape(-1)
        live = torch.nonzero(flat != 0).reshape(-1).numpy()
        pool = live if len(live) else np.arange(flat.numel())
        pick = rng.choice(pool, size=min(per_tensor, len(pool)), replace=False)
        coords.extend((name, int(i)) for i in pick)
    return coords


def central_difference(model64, batch, teacher64, coords, h=3e-4):
    """Float64 five-point central differences of the objective at the given coordinates."""
    params = dict(model64.named_parameters())
    out = []
    with torch.no_grad():
        for name, i in coords:
            flat = params[name].view(-1)
            orig = flat[i].item()
            f = {}
            for k in (-2, -1, 1, 2):
                flat[i] = orig + k * h
                f[k] = objective(model64, batch, teacher64).item()
            flat[i] = orig
            out.append((f[-2] - 8 * f[-1] + 8 * f[1] - f[2]) / (12 * h))
    return np.array(out)


def relative_errors(analytic, numeric, floor=1e-5):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


# ---------------------------------------------------------------------------
# acceptance reporting: one line per criterion, printed in the terminal summary

ACCEPTANCE: dict[int, str] = {}


class criterion:
    """Context manager recording PASS/FAIL for one numbered acceptance criterion."""

    def __init__(self, number: int, title: str):
        self.number = number
        self.title = title
        self.details: list[str] = []

    def note(self, text: str) -> None:
        self.details.append(text)

    def __enter__(self):
        import time

        self.start = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc, tb):
        import time

        elapsed = time.perf_counter() - self.start
        status = "PASS" if exc_type is None else ("SKIP" if exc_type.__name__ == "Skipped" else "FAIL")
        detail = "; ".join(self.details)
        if exc is not None and status == "FAIL":
            detail = (detail + "; " if detail else "") + f"{exc_type.__name__}: {str(exc).splitlines()[0] if str(exc) else ''}"
        line = f"[{status}] criterion {self.number}: {self.title} ({elapsed:.1f}s)" + (f" -- {detail}" if detail else "")
        ACCEPTANCE[self.number] = line
        print(line, flush=True)
        return False
