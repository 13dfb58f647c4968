import functools
import hashlib
import os
import struct

SEED_MASK = 0xFFFFFFFFFFFFFFFF


@functools.cache
def _index_hash(indices: tuple[int, ...]) -> int:
    packed = struct.pack(f"<{len(indices)}q", *indices)
    return int.from_bytes(hashlib.blake2b(packed, digest_size=8).digest(), "little")


def derive_seed(seed: int, *indices: int) -> int:
    # seed xor hash(indices): stable across processes, independent per index tuple
    return (int(seed) ^ _index_hash(tuple(int(i) for i in indices))) & SEED_MASK


def default_jobs():
    return os.cpu_count() or 1


def format_param(param: float):
    return f"{param:.6g}"
