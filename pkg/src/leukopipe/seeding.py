"""Deterministic seed derivation.

One user-facing seed fans out to per-stage / per-item seeds through a keyed
hash, so stages stay independent and per-item work is reproducible no matter
how it is scheduled across workers.
"""

from __future__ import annotations

import hashlib

# torch.Generator.manual_seed rejects values >= 2**63
_SEED_MASK = (1 << 63) - 1


def derive_seed(base: int, *labels: object) -> int:
    """Derive a child seed from ``base`` and a sequence of labels.

    Pure function of its arguments; labels are separated unambiguously so
    ("ab", "c") and ("a", "bc") never collide.
    """
    h = hashlib.blake2b(digest_size=8)
    h.update(str(int(base)).encode())
    for label in labels:
        h.update(b"\x1f")
        h.update(str(label).encode())
    return int.from_bytes(h.digest(), "big") & _SEED_MASK
