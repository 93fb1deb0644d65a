"""Named, independent random substreams derived from one root seed.

Each component asks for a stream by name, so adding or removing a component
never perturbs the draws any other component sees.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _stream_key(name: str) -> int:
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


def named_stream(root_seed: int, name: str) -> np.random.Generator:
    """Deterministic generator for (root_seed, name), independent per name."""
    seq = np.random.SeedSequence([root_seed & 0xFFFFFFFFFFFFFFFF, _stream_key(name)])
    return np.random.Generator(np.random.PCG64(seq))
