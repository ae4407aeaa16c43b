import numpy as np
import pytest
from hypothesis import given, strategies as st

from llga.bitstrings import (
    BitVector,
    ContractViolationError,
    RngStream,
    Target,
    as_generator,
    fitness,
    sample_uniform,
    substream,
)

bitlists = st.lists(st.integers(0, 1), min_size=1, max_size=64)


class TestBitVector:
    def test_rejects_non_binary_entries(self):
        with pytest.raises(ContractViolationError):
            BitVector([0, 1, 2])

    def test_rejects_empty_and_multidim(self):
        with pytest.raises(ContractViolationError):
            BitVector([])
        with pytest.raises(ContractViolationError):
            BitVector([[0, 1], [1, 0]])

    def test_bits_are_read_only(self):
        x = BitVector([0, 1, 0])
        with pytest.raises(ValueError):
            x.bits[0] = 1

    def test_constructor_copies_input(self):
        arr = np.array([0, 1, 1], dtype=np.uint8)
        x = BitVector(arr)
        arr[0] = 1
        assert x.bits[0] == 0

    def test_equality_and_hash(self):
        a = BitVector([1, 0, 1])
        b = BitVector([1, 0, 1])
        c = BitVector([1, 0, 0])
        assert a == b and hash(a) == hash(b)
        assert a != c
        assert a != "101"

    @given(bitlists)
    def test_xor_with_self_is_zero(self, bits):
        x = BitVector(bits)
        assert np.all((x ^ x).bits == 0)

    @given(bitlists, st.randoms(use_true_random=False))
    def test_xor_involution(self, bits, rnd):
        x = BitVector(bits)
        y = BitVector([rnd.randint(0, 1) for _ in bits])
        assert (x ^ y) ^ y == x

    @given(bitlists)
    def test_invert_flips_every_bit(self, bits):
        x = BitVector(bits)
        assert np.all(x.bits + (~x).bits == 1)

    def test_xor_length_mismatch(self):
        with pytest.raises(ContractViolationError):
            BitVector([1]) ^ BitVector([1, 0])


class TestFitness:
    def test_counts_agreements(self):
        target = Target(BitVector([1, 1, 0, 0]))
        assert fitness(BitVector([1, 0, 0, 1]), target) == 2
        assert fitness(target.z, target) == 4
        assert fitness(~target.z, target) == 0

    def test_all_ones_target(self):
        t = Target.all_ones(5)
        assert t.n == 5
        assert fitness(BitVector([1, 0, 1, 0, 1]), t) == 3

    def test_length_mismatch(self):
        with pytest.raises(ContractViolationError):
            fitness(BitVector([1, 0]), Target.all_ones(3))


class TestSampleUniform:
    def test_deterministic_per_stream(self):
        a = sample_uniform(32, RngStream(7, 1).generator())
        b = sample_uniform(32, RngStream(7, 1).generator())
        assert a == b

    def test_roughly_balanced(self):
        x = sample_uniform(10_000, RngStream(3).generator())
        ones = int(x.bits.sum())
        assert 4_700 <= ones <= 5_300

    def test_rejects_nonpositive_length(self):
        with pytest.raises(ContractViolationError):
            sample_uniform(0, RngStream(0).generator())


class TestRngStream:
    def test_replayable(self):
        s = RngStream(42, 5)
        assert s.generator().random(4).tolist() == s.generator().random(4).tolist()

    def test_distinct_streams_differ(self):
        a = RngStream(42, 0).generator().random(8)
        b = RngStream(42, 1).generator().random(8)
        c = RngStream(43, 0).generator().random(8)
        assert not np.array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_rejects_negative_ids(self):
        with pytest.raises(ContractViolationError):
            RngStream(-1)
        with pytest.raises(ContractViolationError):
            RngStream(0, -2)

    def test_substream_deterministic_and_distinct(self):
        s = RngStream(9, 2)
        a = substream(s, 1, 4).random(6)
        b = substream(s, 1, 4).random(6)
        c = substream(s, 1, 5).random(6)
        d = s.generator().random(6)
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)
        assert not np.array_equal(a, d)

    def test_as_generator_accepts_both(self):
        s = RngStream(11)
        assert isinstance(as_generator(s), np.random.Generator)
        g = np.random.default_rng(0)
        assert as_generator(g) is g
        with pytest.raises(ContractViolationError):
            as_generator(123)
