import numpy as np
import pytest

from speechstate.rng import SplitMix64


def reference_splitmix(seed, n):
    """Scalar transcription of the generator with Python integers."""
    mask = (1 << 64) - 1
    state = seed & mask
    out = []
    for _ in range(n):
        state = (state + 0x9E3779B97F4A7C15) & mask
        z = state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & mask
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & mask
        out.append(z ^ (z >> 31))
    return out


def test_first_output_for_seed_zero():
    assert SplitMix64(0).next_int() == 0xE220A8397B1DCDAF


@pytest.mark.parametrize("seed", [0, 1, 2024, 2**63 + 5])
def test_vectorized_stream_matches_scalar_reference(seed):
    got = SplitMix64(seed).next_u64(50)
    assert [int(v) for v in got] == reference_splitmix(seed, 50)


def test_stream_continues_across_calls():
    a = SplitMix64(7)
    first = list(a.next_u64(3)) + list(a.next_u64(4))
    assert [int(v) for v in first] == [int(v) for v in SplitMix64(7).next_u64(7)]


def test_uniform_in_unit_interval():
    u = SplitMix64(3).uniform(10000)
    assert u.min() >= 0.0 and u.max() < 1.0
    assert abs(u.mean() - 0.5) < 0.01


def test_normal_moments():
    z = SplitMix64(4).normal(20000)
    assert abs(z.mean()) < 0.03
    assert abs(z.std() - 1.0) < 0.03


def test_permutation_is_a_permutation():
    p = SplitMix64(5).permutation(1000)
    assert sorted(p.tolist()) == list(range(1000))


def test_same_seed_same_draws_different_seed_differs():
    assert np.array_equal(SplitMix64(9).normal(100), SplitMix64(9).normal(100))
    assert not np.array_equal(SplitMix64(9).normal(100), SplitMix64(10).normal(100))


def test_spawned_children_are_distinct_and_reproducible():
    a, b = SplitMix64(1).spawn(), SplitMix64(1).spawn()
    assert np.array_equal(a.uniform(10), b.uniform(10))
    parent = SplitMix64(1)
    c1, c2 = parent.spawn(), parent.spawn()
    assert not np.array_equal(c1.uniform(10), c2.uniform(10))


def test_integers_range():
    v = SplitMix64(11).integers(3, 8, 5000)
    assert v.min() == 3 and v.max() == 7
