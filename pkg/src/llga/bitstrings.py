"""Bit strings, match-count fitness, and seeded random streams."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ContractViolationError(ValueError):
    """An argument broke a documented precondition."""


class BitVector:
    """Immutable fixed-length vector of {0,1}, backed by a read-only uint8 array."""

    __slots__ = ("_bits",)

    def __init__(self, bits) -> None:
        arr = np.array(bits, dtype=np.uint8, copy=True)
        if arr.ndim != 1 or arr.size < 1:
            raise ContractViolationError("bit vector must be 1-d with length >= 1")
        if np.any(arr > 1):
            raise ContractViolationError("bit vector entries must be 0 or 1")
        arr.setflags(write=False)
        self._bits = arr

    @property
    def bits(self) -> np.ndarray:
        return self._bits

    @property
    def n(self) -> int:
        return self._bits.size

    def __len__(self) -> int:
        return self._bits.size

    def __eq__(self, other) -> bool:
        if not isinstance(other, BitVector):
            return NotImplemented
        return self._bits.size == other._bits.size and bool(
            np.all(self._bits == other._bits)
        )

    def __hash__(self) -> int:
        return hash(self._bits.tobytes())

    def __xor__(self, other: "BitVector") -> "BitVector":
        if not isinstance(other, BitVector) or other.n != self.n:
            raise ContractViolationError("xor requires a BitVector of equal length")
        return BitVector(self._bits ^ other._bits)

    def __invert__(self) -> "BitVector":
        return BitVector(1 - self._bits)

    def __repr__(self) -> str:
        body = "".join(str(int(b)) for b in self._bits[:40])
        tail = "..." if self.n > 40 else ""
        return f"BitVector({body}{tail}, n={self.n})"


@dataclass(frozen=True)
class Target:
    """Hidden optimum; fitness counts agreements with z."""

    z: BitVector

    @classmethod
    def all_ones(cls, n: int) -> "Target":
        return cls(BitVector(np.ones(n, dtype=np.uint8)))

    @property
    def n(self) -> int:
        return self.z.n


def fitness(x: BitVector, target: Target) -> int:
    """Number of positions where x agrees with the target."""
    if x.n != target.n:
        raise ContractViolationError(
            f"length mismatch: point has n={x.n}, target has n={target.n}"
        )
    return int(np.count_nonzero(x.bits == target.z.bits))


def sample_uniform(n: int, rng: np.random.Generator) -> BitVector:
    """Uniform random point of length n."""
    if n < 1:
        raise ContractViolationError("n must be >= 1")
    return BitVector(rng.integers(0, 2, size=n, dtype=np.uint8))


@dataclass(frozen=True)
class RngStream:
    """Replayable random stream: same (master_seed, stream_index) gives the
    same draw sequence; distinct pairs give statistically independent streams.

    Streams are derived with numpy's SeedSequence, so reproducibility holds
    within this implementation (and across process/thread layouts), not
    bit-for-bit across numpy major versions.
    """

    master_seed: int
    stream_index: int = 0

    def __post_init__(self) -> None:
        if self.master_seed < 0 or self.stream_index < 0:
            raise ContractViolationError("seeds and stream indices must be >= 0")

    def generator(self) -> np.random.Generator:
        """Fresh generator positioned at the start of the stream."""
        return np.random.Generator(np.random.PCG64(self.seed_sequence()))

    def seed_sequence(self) -> np.random.SeedSequence:
        return np.random.SeedSequence(
            entropy=self.master_seed, spawn_key=(self.stream_index,)
        )


def substream(stream: RngStream, *path: int) -> np.random.Generator:
    """Generator for a named child of a stream (path = fixed integer tags).

    Children with distinct paths are independent of each other and of the
    parent stream's own generator.
    """
    ss = np.random.SeedSequence(
        entropy=stream.master_seed, spawn_key=(stream.stream_index, *path)
    )
    return np.random.Generator(np.random.PCG64(ss))


def as_generator(rng) -> np.random.Generator:
    """Accept either an RngStream or a live Generator."""
    if isinstance(rng, np.random.Generator):
        return rng
    if isinstance(rng, RngStream):
        return rng.generator()
    raise ContractViolationError(f"expected RngStream or Generator, got {type(rng)!r}")
