import numpy as np
import pytest

from biqa.rng import GAMMA, MASK64, SplitMix64, derive_seed, mix64, spawn


def test_mix64_known_values():
    # splitmix64 reference outputs for seed 0: mix64 applied to the
    # sequence seed + k*GAMMA, cross-checked against the published C code.
    stream = SplitMix64(0)
    expected = [
        0xE220A8397B1DCDAF,
        0x6E789E6AA1B965F4,
        0x06C45D188009454F,
    ]
    assert [stream.next_u64() for _ in range(3)] == expected


def test_mix64_masks_input():
    assert mix64(2**64 + 5) == mix64(5)
    assert 0 <= mix64(MASK64) <= MASK64


def test_counter_based_restart():
    a = SplitMix64(123)
    first = [a.next_u64() for _ in range(10)]
    b = SplitMix64(123)
    assert [b.next_u64() for _ in range(10)] == first


def test_block_matches_scalar():
    a = SplitMix64(99)
    b = SplitMix64(99)
    scalar = np.array([a.next_u64() for _ in range(257)], dtype=np.uint64)
    block = b.next_u64_block(257)
    assert np.array_equal(scalar, block)
    assert a.counter == b.counter == 257


def test_block_continues_stream():
    a = SplitMix64(7)
    a.next_u64_block(5)
    b = SplitMix64(7)
    for _ in range(5):
        b.next_u64()
    assert a.next_u64() == b.next_u64()


def test_uniform_range_and_determinism():
    u = SplitMix64(3).uniform_block(10_000)
    assert u.min() >= 0.0 and u.max() < 1.0
    assert abs(u.mean() - 0.5) < 0.02
    again = SplitMix64(3).uniform_block(10_000)
    assert np.array_equal(u, again)


def test_normal_block_matches_scalar():
    a = SplitMix64(11)
    b = SplitMix64(11)
    scalar = np.array([a.normal() for _ in range(100)])
    block = b.normal_block(100)
    assert np.allclose(scalar, block, rtol=0, atol=0)


def test_normal_block_moments():
    z = SplitMix64(5).normal_block(50_000)
    assert abs(z.mean()) < 0.02
    assert abs(z.std() - 1.0) < 0.02


def test_randbelow_bounds():
    rng = SplitMix64(1)
    draws = [rng.randbelow(7) for _ in range(1000)]
    assert min(draws) == 0 and max(draws) == 6
    with pytest.raises(ValueError):
        rng.randbelow(0)


def test_shuffle_is_permutation_and_deterministic():
    seq = list(range(50))
    rng = SplitMix64(17)
    rng.shuffle(seq)
    assert sorted(seq) == list(range(50))
    seq2 = list(range(50))
    SplitMix64(17).shuffle(seq2)
    assert seq == seq2
    assert seq != list(range(50))  # astronomically unlikely to be identity


def test_derive_seed_stable_and_label_sensitive():
    base = derive_seed(42, "data", "blurset")
    assert base == derive_seed(42, "data", "blurset")
    assert base != derive_seed(42, "data", "noiseset")
    assert base != derive_seed(43, "data", "blurset")
    assert derive_seed(0) != derive_seed(0, "")
    assert 0 <= base <= MASK64


def test_derive_seed_int_labels():
    assert derive_seed(1, 2, 3) == derive_seed(1, "2", "3")


def test_spawn_equivalent_to_derive():
    assert spawn(9, "x").next_u64() == SplitMix64(derive_seed(9, "x")).next_u64()


def test_gamma_is_odd():
    # an even increment would halve the period of the underlying Weyl sequence
    assert GAMMA % 2 == 1
