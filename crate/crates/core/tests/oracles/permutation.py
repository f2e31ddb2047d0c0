#!/usr/bin/env python3
"""Standalone reference for the keyed bit-permutation seed chain.

FNV-1a-64(key_bytes || u64_be(block_index)) -> SplitMix64 seed ->
Fisher-Yates (i = n-1 down to 1, j = next_u64() % (i + 1), swap(i, j)).

Writes tests/data/permutation_golden.txt: one hex line per vector.
"""
import sys

MASK = (1 << 64) - 1


def fnv1a64(data: bytes) -> int:
    h = 0xCBF29CE484222325
    for b in data:
        h ^= b
        h = (h * 0x100000001B3) & MASK
    return h


class SplitMix64:
    def __init__(self, seed: int):
        self.state = seed & MASK

    def next_u64(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & MASK
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK
        return z ^ (z >> 31)


def permutation(key: bytes, block_index: int, nbits: int):
    rng = SplitMix64(fnv1a64(key + block_index.to_bytes(8, "big")))
    perm = list(range(nbits))
    for i in range(nbits - 1, 0, -1):
        j = rng.next_u64() % (i + 1)
        perm[i], perm[j] = perm[j], perm[i]
    return perm


def get_bit(buf: bytes, i: int) -> int:
    return (buf[i // 8] >> (7 - i % 8)) & 1


def scramble(payload: bytes, key: bytes, block_index: int) -> bytes:
    n = 8 * len(payload)
    perm = permutation(key, block_index, n)
    out = bytearray(len(payload))
    for i in range(n):
        if get_bit(payload, perm[i]):
            out[i // 8] |= 0x80 >> (i % 8)
    return bytes(out)


def main():
    zero_key = bytes(32)
    seq_key = bytes(range(32))
    lines = []
    # 1. permutation of 8 bits, zero key, index 0 (as bytes, one per element)
    lines.append(bytes(permutation(zero_key, 0, 8)).hex())
    # 2. permutation of 16 bits, sequential key, index 3
    lines.append(bytes(permutation(seq_key, 3, 16)).hex())
    # 3. scramble of 0x0123456789abcdef under sequential key, index 7
    lines.append(scramble(bytes.fromhex("0123456789abcdef"), seq_key, 7).hex())
    # 4. scramble of 0x00000000000000ff (m=255, width=8) under zero key, index 0
    lines.append(scramble((255).to_bytes(8, "big"), zero_key, 0).hex())
    out = sys.argv[1] if len(sys.argv) > 1 else "../data/permutation_golden.txt"
    with open(out, "w") as f:
        f.write("\n".join(lines) + "\n")
    # reference values for the PRNG primitives, printed for the unit tests
    print("fnv1a64(b'') =", hex(fnv1a64(b"")))
    print("fnv1a64(b'a') =", hex(fnv1a64(b"a")))
    r = SplitMix64(0)
    print("splitmix64(0) first three =", [hex(r.next_u64()) for _ in range(3)])
    print("fnv(zero_key||0) =", hex(fnv1a64(zero_key + bytes(8))))
    for l in lines:
        print(l)


if __name__ == "__main__":
    main()
