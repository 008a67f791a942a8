"""Deterministic seed derivation: one master seed drives every stage.

Stage seeds are the first 8 bytes of blake2b over "<master>/<name>", so
adding a stage never perturbs the seeds of existing ones.
"""

from __future__ import annotations

import hashlib


def derive_seed(master_seed: int, name: str) -> int:
    digest = hashlib.blake2b(f"{master_seed}/{name}".encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "big")
