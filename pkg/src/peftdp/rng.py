"""Named, independently seeded RNG streams derived from one master seed.

Every source of randomness in a run (init, data order, dropout, DP noise,
canary selection) draws from its own stream so that toggling one feature
(say, enabling DP noise) never perturbs the draws of another.
"""

import hashlib

import numpy as np

_STREAMS = ("init", "data-order", "dropout", "noise", "canary-selection", "synthetic")


def _stable_stream_key(name: str) -> int:
    # Python's hash() is salted per process; use sha256 for cross-run stability.
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def rng_stream(master_seed: int, name: str) -> np.random.Generator:
    """Return the generator for stream `name` under `master_seed`.

    The same (seed, name) pair always yields a generator producing the
    identical draw sequence; distinct names yield independent streams.
    """
    seq = np.random.SeedSequence([int(master_seed) & 0xFFFFFFFFFFFFFFFF, _stable_stream_key(name)])
    return np.random.default_rng(seq)
