"""Binary sequences: representation, parsing, random generation, 16-bit tokenization.

Bit order is MSB-first everywhere: the first bit of a 16-bit group is the
most significant bit of its token, and the first bit of a nibble is the most
significant bit of its hex digit.
"""

from __future__ import annotations

import hashlib

import numpy as np

TOKEN_BITS = 16
VOCAB_SIZE = 1 << TOKEN_BITS
CORPUS_BIT_SIZES = (512, 1024, 2048)

_WHITESPACE = frozenset(b" \t\r\n\x0b\x0c")


class ParseError(ValueError):
    """Illegal character in a textual bit string; carries the 0-based offset."""

    def __init__(self, message: str, offset: int):
        super().__init__(message)
        self.offset = offset


class BitSequence:
    """Immutable ordered sequence of 0/1 symbols."""

    __slots__ = ("_bits",)

    def __init__(self, bits):
        arr = np.ascontiguousarray(bits, dtype=np.uint8)
        if arr.ndim != 1 or arr.size == 0:
            raise ValueError("bit sequence must be a non-empty 1-D array")
        if arr.max(initial=0) > 1:
            raise ValueError("bit sequence may only contain 0 and 1")
        arr.flags.writeable = False
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
        if not isinstance(other, BitSequence):
            return NotImplemented
        return self._bits.size == other._bits.size and bool(
            np.array_equal(self._bits, other._bits)
        )

    def __hash__(self) -> int:
        return hash(self._bits.tobytes())

    def __repr__(self) -> str:
        if self.n <= 32:
            body = "".join(str(b) for b in self._bits)
        else:
            head = "".join(str(b) for b in self._bits[:16])
            body = f"{head}... ({self.n} bits)"
        return f"BitSequence({body})"


class TokenSequence:
    """Sequence of integers in [0, 65535], one per 16 input bits."""

    __slots__ = ("_tokens",)

    def __init__(self, tokens):
        arr = np.ascontiguousarray(tokens, dtype=np.int64)
        if arr.ndim != 1 or arr.size == 0:
            raise ValueError("token sequence must be a non-empty 1-D array")
        if arr.min(initial=0) < 0 or arr.max(initial=0) >= VOCAB_SIZE:
            raise ValueError(f"tokens must lie in [0, {VOCAB_SIZE - 1}]")
        arr.flags.writeable = False
        self._tokens = arr

    @property
    def tokens(self) -> np.ndarray:
        return self._tokens

    @property
    def length(self) -> int:
        return self._tokens.size

    def __len__(self) -> int:
        return self._tokens.size

    def __eq__(self, other) -> bool:
        if not isinstance(other, TokenSequence):
            return NotImplemented
        return bool(np.array_equal(self._tokens, other._tokens))

    def __repr__(self) -> str:
        return f"TokenSequence(length={self.length})"


def _random_bit_matrix(count: int, bits: int, seed: int) -> np.ndarray:
    """Deterministic cryptographic bit matrix of shape (count, bits)."""
    material = b"rngaudit.generate_random:" + int(seed % 2**64).to_bytes(8, "little")
    digest = hashlib.shake_256(material).digest(count * bits // 8)
    flat = np.unpackbits(np.frombuffer(digest, dtype=np.uint8))
    return flat.reshape(count, bits)


def generate_random(count: int, bits: int, seed: int) -> list[BitSequence]:
    """`count` sequences of `bits` bits from a seeded SHAKE-256 stream.

    Deterministic for a given seed; `bits` must be a positive multiple of 16.
    """
    if count <= 0:
        raise ValueError(f"count must be positive, got {count}")
    if bits <= 0 or bits % TOKEN_BITS != 0:
        raise ValueError(f"bits must be a positive multiple of {TOKEN_BITS}, got {bits}")
    matrix = _random_bit_matrix(count, bits, seed)
    return [BitSequence(row) for row in matrix]


def tokenize(seq: BitSequence) -> TokenSequence:
    """Group bits 16 at a time, MSB first, into integers in [0, 65535]."""
    if seq.n % TOKEN_BITS != 0:
        raise ValueError(f"sequence length {seq.n} is not a multiple of {TOKEN_BITS}")
    return TokenSequence(tokenize_bits(seq.bits))


def tokenize_bits(bits: np.ndarray) -> np.ndarray:
    """Array version of :func:`tokenize`; accepts a 1-D or 2-D 0/1 array."""
    if bits.shape[-1] % TOKEN_BITS != 0:
        raise ValueError(f"bit count {bits.shape[-1]} is not a multiple of {TOKEN_BITS}")
    packed = np.packbits(np.asarray(bits, dtype=np.uint8), axis=-1)
    shape = packed.shape[:-1] + (packed.shape[-1] // 2, 2)
    pairs = packed.reshape(shape).astype(np.int64)
    return pairs[..., 0] * 256 + pairs[..., 1]


def detokenize(tokens: TokenSequence) -> BitSequence:
    """Inverse of :func:`tokenize`: expand each token back into 16 bits."""
    arr = tokens.tokens
    pairs = np.empty((arr.size, 2), dtype=np.uint8)
    pairs[:, 0] = arr >> 8
    pairs[:, 1] = arr & 0xFF
    return BitSequence(np.unpackbits(pairs.reshape(-1)))


def parse_text(text: str) -> BitSequence:
    """Parse a '0'/'1' string; whitespace is ignored, anything else rejected."""
    data = np.frombuffer(text.encode("ascii", errors="replace"), dtype=np.uint8)
    is_zero = data == ord("0")
    is_one = data == ord("1")
    is_space = np.isin(data, list(_WHITESPACE))
    bad = ~(is_zero | is_one | is_space)
    if bad.any():
        offset = int(np.argmax(bad))
        raise ParseError(f"illegal character {text[offset]!r} at offset {offset}", offset)
    bits = data[is_zero | is_one] - ord("0")
    if bits.size == 0:
        raise ValueError("no bits found in input text")
    return BitSequence(bits)


def to_text(seq: BitSequence) -> str:
    return "".join("1" if b else "0" for b in seq.bits)


def to_hex(seq: BitSequence) -> str:
    """Pack bits MSB-first per nibble into ceil(n/4) lowercase hex digits."""
    digits = -(-seq.n // 4)
    return np.packbits(seq.bits).tobytes().hex()[:digits]


def from_hex(hex_digits: str, n: int) -> BitSequence:
    """Unpack `n` bits from lowercase hex written MSB-first per nibble."""
    if n <= 0:
        raise ValueError(f"bit length must be positive, got {n}")
    digits = -(-n // 4)
    if len(hex_digits) != digits:
        raise ValueError(
            f"expected {digits} hex digits for {n} bits, got {len(hex_digits)}"
        )
    if hex_digits != hex_digits.lower():
        raise ValueError("hex input must be lowercase")
    padded = hex_digits + "0" * (len(hex_digits) % 2)
    try:
        raw = bytes.fromhex(padded)
    except ValueError as exc:
        raise ValueError(f"invalid hex input: {exc}") from None
    return BitSequence(np.unpackbits(np.frombuffer(raw, dtype=np.uint8))[:n])
