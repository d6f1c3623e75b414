import numpy as np
import pytest
import torch

from helpers import (
    central_difference,
    objective,
    perturb_zero_init,
    relative_errors,
    sample_coordinates,
    tiny_setup,
    to_dtype,
)
from tokenar.errors import InvalidArgument, NumericError, VersionError
from tokenar.model import (
    AttentionTrace,
    ModelConfig,
    TraceSpec,
    decode_step,
    forward,
    gradients,
    load_checkpoint,
    prefill,
    read_checkpoint,
    save_checkpoint,
)
from tokenar.inference import decode_span, default_trace_spec


@pytest.fixture
def setup():
    return tiny_setup("float64")


def test_instruct_and_index_row_zero_init(setup):
    model = setup[0]
    assert not model.instruct.any()
    assert not model.index_emb[0].any()
    assert model.index_emb[1:].abs().sum() > 0


def test_init_is_deterministic():
    a = tiny_setup(seed=3)[0]
    b = tiny_setup(seed=3)[0]
    for (_, p), (_, q) in zip(a.named_parameters(), b.named_parameters()):
        assert torch.equal(p, q)


def test_config_validation():
    with pytest.raises(InvalidArgument):
        ModelConfig(vocab_size=86, n_image_tokens=64, d_model=30, n_heads=4)
    with pytest.raises(InvalidArgument):
        ModelConfig(vocab_size=64, n_image_tokens=64)
    with pytest.raises(InvalidArgument):
        ModelConfig(vocab_size=86, n_image_tokens=64, dtype="float16")


def test_logits_shape(setup):
    model, batch, _, layout = setup
    logits, hidden, _ = forward(model, batch)
    assert logits.shape == (2, layout.span_len, model.cfg.vocab_size)
    assert hidden.shape == (2, layout.span_len, model.cfg.d_model)


def test_causality(setup):
    model, batch, _, _ = setup
    ids = batch["input_ids"].clone()
    pos = batch["position_ids"]
    idx = batch["index_ids"]
    _, base = model.run(ids, idx, pos)
    t = 20
    ids[:, t:] = (ids[:, t:] + 1) % 16
    _, changed = model.run(ids, idx, pos)
    assert torch.equal(base[:, :t], changed[:, :t])
    assert not torch.allclose(base[:, t:], changed[:, t:])


def test_fused_matches_explicit(setup):
    model, batch, _, _ = setup
    a = forward(model, batch, fused=False)[0]
    b = forward(model, batch, fused=True)[0]
    assert torch.allclose(a, b, atol=1e-10)


def test_attention_rows_sum_to_one(setup):
    model, batch, _, layout = setup
    T = batch["input_ids"].shape[1]
    spec = TraceSpec(query=(0, T), keys={"all": (0, T)})
    _, _, trace = forward(model, batch, trace=spec)
    for layer in range(trace.n_layers):
        w = trace.raw(layer, "all")
        assert torch.allclose(w.sum(-1), torch.ones((), dtype=w.dtype), atol=1e-12)
        assert not torch.triu(w, diagonal=1).any()


def test_instruct_slots_ignore_token_ids(setup):
    model, batch, _, layout = setup
    perturb_zero_init(model)
    ids = batch["input_ids"].clone()
    base = forward(model, batch)[0]
    ids[:, :layout.M] = 0
    other = forward(model, {**batch, "input_ids": ids})[0]
    assert torch.equal(base, other)


def test_index_row_zero_is_neutral():
    model, batch, _, _ = tiny_setup("float64")
    off = to_dtype(model, "float64")
    off.cfg = ModelConfig(**{**model.cfg.to_dict(), "use_index_embedding": False})
    zero_ids = {**batch, "index_ids": torch.zeros_like(batch["index_ids"])}
    assert torch.equal(forward(model, zero_ids)[0], forward(off, batch)[0])


def test_gradients_cover_instruct_and_index(setup):
    model, batch, teacher, _ = setup
    grads = gradients(model, objective(model, batch, teacher))
    assert grads["instruct"].abs().sum() > 0
    assert grads["index_emb"][1:].abs().sum() > 0
    assert set(grads) == {n for n, _ in model.named_parameters()}


def test_gradients_reject_nonfinite(setup):
    model = setup[0]
    with pytest.raises(NumericError):
        gradients(model, torch.tensor(float("nan"), requires_grad=True))


@pytest.mark.parametrize("dtype,tol", [("float64", 1e-6), ("float32", 1e-3)])
def test_finite_difference_gradients(dtype, tol):
    model64, batch, teacher64, _ = tiny_setup("float64", seed=2)
    perturb_zero_init(model64)
    g64 = gradients(model64, objective(model64, batch, teacher64))
    coords = sample_coordinates(g64, 3, np.random.default_rng(0))
    numeric = central_difference(model64, batch, teacher64, coords)
    model = to_dtype(model64, dtype)
    grads = gradients(model, objective(model, batch, teacher64.to(model.cfg.torch_dtype)))
    analytic = [grads[n].reshape(-1)[i].item() for n, i in coords]
    assert relative_errors(analytic, numeric).max() < tol


@pytest.mark.parametrize("dtype,tol", [("float64", 1e-12), ("float32", 1e-5)])
def test_cached_logits_match_full_forward(dtype, tol):
    model, batch, _, layout = tiny_setup(dtype, seed=4)
    ids, idx, pos = batch["input_ids"], batch["index_ids"], batch["position_ids"]
    _, full = model.run(ids, idx, pos)
    C = layout.context_len
    cache, logits = prefill(model, ids[:, :C], idx[:, :C])
    assert torch.allclose(logits, full[:, C - 1], atol=tol, rtol=0)
    for t in range(C, ids.shape[1]):
        logits = decode_step(model, cache, ids[:, t], idx[0, t], t)
        assert torch.allclose(logits, full[:, t], atol=tol, rtol=0)
        assert torch.equal(logits.argmax(-1), full[:, t].argmax(-1))


def test_cached_decode_matches_recompute():
    model, batch, _, layout = tiny_setup("float32", seed=5)
    C = layout.context_len
    ctx, idx = batch["input_ids"][:, :C], batch["index_ids"][:, :C]
    span_idx = layout.span_index_ids()
    a = decode_span(model, ctx, idx, span_idx, use_cache=True)
    b = decode_span(model, ctx, idx, span_idx, use_cache=False)
    assert torch.equal(a, b)


def test_cache_capacity_enforced(setup):
    model, batch, _, layout = setup
    cache, _ = prefill(model, batch["input_ids"], batch["index_ids"])
    decode_step(model, cache, torch.zeros(2, dtype=torch.long), 0)
    with pytest.raises(InvalidArgument):
        decode_step(model, cache, torch.zeros(2, dtype=torch.long), 0)


def test_default_trace_spec_segments():
    from tokenar.sequence import SequenceLayout

    spec = default_trace_spec(SequenceLayout(M=30))
    seg = SequenceLayout(M=30).segments()
    assert spec.query == (seg["target"][0] - 1, seg["target"][1] - 1)
    assert spec.keys["instruct"] == (0, 30) and spec.keys["refs"] == seg["refs"]
    assert "instruct" not in default_trace_spec(SequenceLayout(M=0)).keys


def test_trace_accessors_validate():
    trace = AttentionTrace((0, 1), {"a": (0, 1)}, [{"a": torch.ones(1, 1, 1, 1)}])
    with pytest.raises(InvalidArgument):
        trace.rows(1, "a")
    with pytest.raises(InvalidArgument):
        trace.rows(0, "b")


def test_checkpoint_round_trip(tmp_path):
    model = tiny_setup("float32", seed=6)[0]
    path = tmp_path / "m.tkar"
    save_checkpoint(model, path)
    data = path.read_bytes()
    assert data[:4] == b"TKAR"
    loaded = load_checkpoint(path, model.cfg)
    for (n, p), (_, q) in zip(model.named_parameters(), loaded.named_parameters()):
        assert torch.equal(p, q), n
    assert list(read_checkpoint(path)) == [n for n, _ in model.named_parameters()]


def test_checkpoint_mismatch_names_both(tmp_path):
    model = tiny_setup("float32", seed=6)[0]
    path = tmp_path / "m.tkar"
    save_checkpoint(model, path)
    wrong = ModelConfig(**{**model.cfg.to_dict(), "d_model": 32})
    with pytest.raises(VersionError, match=r"m\.tkar.*d_model=32"):
        load_checkpoint(path, wrong)
    deeper = ModelConfig(**{**model.cfg.to_dict(), "n_layers": 3})
    with pytest.raises(VersionError, match="missing"):
        load_checkpoint(path, deeper)


def test_checkpoint_corruption(tmp_path):
    model = tiny_setup("float32")[0]
    path = tmp_path / "m.tkar"
    save_checkpoint(model, path)
    path.write_bytes(path.read_bytes()[:100])
    with pytest.raises(VersionError, match="truncated"):
        read_checkpoint(path)
    path.write_bytes(b"NOPE" + bytes(8))
    with pytest.raises(VersionError):
        read_checkpoint(path)
