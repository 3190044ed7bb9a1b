import numpy as np
import pytest

from pairzsl.rng import GOLDEN, RngState

_MASK = (1 << 64) - 1


def _reference_splitmix64_stream(seed, n):
    """Independent reference implementation with the published constants."""
    out = []
    state = seed & _MASK
    for _ in range(n):
        state = (state + 0x9E3779B97F4A7C15) & _MASK
        z = state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
        out.append(z ^ (z >> 31))
    return out


def test_matches_reference_splitmix64():
    rng = RngState(12345)
    assert [rng.next_u64() for _ in range(8)] == _reference_splitmix64_stream(12345, 8)


def test_equal_seeds_identical_streams():
    a = RngState(99)
    b = RngState(99)
    assert [a.next_u64() for _ in range(100)] == [b.next_u64() for _ in range(100)]
    assert np.array_equal(RngState(99).uniforms(50), RngState(99).uniforms(50))
    assert np.array_equal(RngState(99).normals(51), RngState(99).normals(51))
    assert np.array_equal(RngState(99).permutation(64), RngState(99).permutation(64))


def test_different_seeds_differ():
    assert RngState(1).next_u64() != RngState(2).next_u64()


def test_vectorized_matches_scalar_path():
    scalar = RngState(7)
    vector = RngState(7)
    expect = np.array([scalar.next_u64() for _ in range(200)], dtype=np.uint64)
    assert np.array_equal(vector.u64_array(200), expect)


def test_uniform_range_and_resolution():
    u = RngState(3).uniforms(10_000)
    assert (u >= 0.0).all() and (u < 1.0).all()
    assert u.std() > 0.25  # sanity: actually spread out


def test_normals_have_sane_moments():
    z = RngState(5).normals(20_000)
    assert abs(z.mean()) < 0.03
    assert abs(z.std() - 1.0) < 0.03


def test_permutation_is_a_permutation():
    p = RngState(11).permutation(1000)
    assert np.array_equal(np.sort(p), np.arange(1000))


def test_derive_is_deterministic_and_tag_sensitive():
    base = RngState(42)
    assert base.derive("a", 1).seed == RngState(42).derive("a", 1).seed
    assert base.derive("a").seed != base.derive("b").seed
    assert base.derive("a", 1).seed != base.derive("a", 2).seed


def test_derive_rejects_bad_tags():
    with pytest.raises(TypeError):
        RngState(0).derive(1.5)


def test_counter_positions_are_replayable():
    rng = RngState(8)
    rng.uniforms(17)
    marker = rng.counter
    tail = rng.uniforms(5)
    assert np.array_equal(RngState(8, counter=marker).uniforms(5), tail)


def test_randbelow_bounds():
    rng = RngState(13)
    draws = [rng.randbelow(7) for _ in range(500)]
    assert min(draws) >= 0 and max(draws) < 7


def test_golden_constant_is_the_published_one():
    assert GOLDEN == 0x9E3779B97F4A7C15
