import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tokenar.errors import DatasetIOError, InvalidArgument
from tokenar.tokenizer import build_codebook, dequantize, quantize, read_ppm, write_ppm


def brute_nearest(color, entries):
    best, best_d = 0, None
    for k, e in enumerate(entries):
        d = sum((float(color[c]) - float(e[c])) ** 2 for c in range(3))
        if best_d is None or d < best_d:
            best, best_d = k, d
    return best


@pytest.fixture(scope="module")
def cb():
    return build_codebook(0, 64)


def test_minimal_codebook():
    c = build_codebook(0, 2)
    assert c.K == 2
    assert not np.array_equal(c.entries[0], c.entries[1])


def test_codebook_rejects_small_k():
    with pytest.raises(InvalidArgument):
        build_codebook(0, 1)


def test_codebook_deterministic(cb):
    again = build_codebook(0, 64)
    assert again.entries.tobytes() == cb.entries.tobytes()


def test_codebook_seed_changes_palette(cb):
    other = build_codebook(1, 64)
    assert (other.entries != cb.entries).any()


def test_default_palette_is_full_lattice(cb):
    levels = {round(v * 255) for v in cb.entries.ravel()}
    assert levels == {0, 85, 170, 255}
    assert len({tuple(e) for e in cb.entries}) == 64


@given(st.integers(2, 300), st.integers(0, 5))
@settings(max_examples=40, deadline=None)
def test_codebook_entries_distinct_and_in_range(K, seed):
    c = build_codebook(seed, K)
    assert c.entries.shape == (K, 3)
    assert len({tuple(e) for e in c.entries}) == K
    assert c.entries.min() >= 0 and c.entries.max() <= 1


def test_quantize_exact_entry(cb):
    img = np.broadcast_to(cb.entries[0], (16, 16, 3)).copy()
    assert (quantize(img, cb) == 0).all()


def test_quantize_small_image_matches_bruteforce(cb):
    rng = np.random.default_rng(3)
    img = rng.random((8, 8, 3))
    tokens = quantize(img, cb, 4)
    assert tokens.shape == (2, 2)
    for r in range(2):
        for c in range(2):
            mean = img[4 * r:4 * r + 4, 4 * c:4 * c + 4].reshape(-1, 3).mean(axis=0)
            assert tokens[r, c] == brute_nearest(mean, cb.entries)


def test_desk_scale_token_count(cb):
    img = np.zeros((32, 32, 3))
    assert quantize(img, cb, 4).size == 64


def test_quantize_rejects_bad_dimensions(cb):
    with pytest.raises(InvalidArgument):
        quantize(np.zeros((10, 8, 3)), cb, 4)


def test_tie_breaks_to_lowest_index():
    two = build_codebook(0, 2)
    mid = (two.entries[0] + two.entries[1]) / 2
    d = ((two.entries - mid) ** 2).sum(axis=1)
    assert d[0] == d[1]
    assert quantize(np.broadcast_to(mid, (4, 4, 3)).copy(), two, 4)[0, 0] == 0


def test_dequantize_single_token(cb):
    img = dequantize(np.array([[3]]), cb, 4)
    assert img.shape == (4, 4, 3)
    assert (img == cb.entries[3]).all()


def test_dequantize_rejects_out_of_range(cb):
    with pytest.raises(InvalidArgument):
        dequantize(np.array([[64]]), cb, 4)


def test_round_trip_on_palette_images(cb):
    rng = np.random.default_rng(0)
    for _ in range(20):
        grid = rng.integers(0, 64, (8, 8))
        img = dequantize(grid, cb, 4)
        assert np.array_equal(dequantize(quantize(img, cb, 4), cb, 4), img)


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=30, deadline=None)
def test_requantize_is_identity(seed):
    cb = build_codebook(0, 64)
    grid = np.random.default_rng(seed).integers(0, 64, (8, 8))
    assert np.array_equal(quantize(dequantize(grid, cb, 4), cb, 4), grid)


def test_nearest_neighbor_matches_exhaustive_scan(cb):
    rng = np.random.default_rng(11)
    patches = rng.random((1000, 4, 4, 3))
    img = patches.reshape(1000 * 4, 4, 3)
    tokens = quantize(img, cb, 4).ravel()
    for k, p in enumerate(patches):
        assert tokens[k] == brute_nearest(p.reshape(-1, 3).mean(axis=0), cb.entries)


def test_ppm_round_trip(tmp_path, cb):
    grid = np.random.default_rng(1).integers(0, 64, (8, 8))
    img = dequantize(grid, cb, 4)
    write_ppm(tmp_path / "a.ppm", img)
    assert (tmp_path / "a.ppm").read_bytes()[:2] == b"P6"
    back = read_ppm(tmp_path / "a.ppm")
    assert np.array_equal(back, img)


def test_ppm_errors_name_path(tmp_path):
    bad = tmp_path / "bad.ppm"
    bad.write_bytes(b"P6\n4 4\n255\n\x00\x01")
    with pytest.raises(DatasetIOError, match="bad.ppm"):
        read_ppm(bad)
    with pytest.raises(DatasetIOError, match="missing.ppm"):
        read_ppm(tmp_path / "missing.ppm")
