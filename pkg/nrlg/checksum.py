"""
Checksum utilities for run artifacts.

xxhash64 digests identify every file a run writes (recorded in the metadata
record) and derive the independent per-file seeds of a restore fan-out.
"""

from pathlib import Path
from typing import Dict, Iterable, Union

import xxhash


SEED_MASK = (1 << 64) - 1
CHUNK_SIZE = 1 << 16


def calculate_checksum(file_path: Union[str, Path]) -> str:
    """
    Calculate the xxhash64 digest of a file.

    Args:
        file_path: Path to the file

    Returns:
        Hex digest of the file

    Raises:
        FileNotFoundError: If file doesn't exist
    """
    file_path = Path(file_path)
    if not file_path.exists():
        raise FileNotFoundError(f"File not found: {file_path}")

    hash_obj = xxhash.xxh64()
    with open(file_path, "rb") as f:
        while chunk := f.read(CHUNK_SIZE):
            hash_obj.update(chunk)
    return hash_obj.hexdigest()


def checksum_artifacts(paths: Iterable[Union[str, Path]]) -> Dict[str, str]:
    """Map each existing artifact's file name to its digest."""
    return {Path(p).name: calculate_checksum(p) for p in paths if Path(p).exists()}


def derive_file_seed(seed: int, index: int) -> int:
    """
    Seed for the index-th file of a fan-out: ``seed XOR xxh64(str(index))``.

    Args:
        seed: Run seed (unsigned 64-bit)
        index: Zero-based file position in sorted order

    Returns:
        Unsigned 64-bit seed
    """
    return (int(seed) ^ xxhash.xxh64_intdigest(str(index).encode("ascii"))) & SEED_MASK
