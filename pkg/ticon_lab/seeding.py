"""Named random sub-streams derived from a single root seed.

A component asks for ``stream(root, 'maskplan', slide_id, 'iter7')`` and gets a
generator that depends only on the root seed and that name, so adding or
removing unrelated components never shifts its draws.
"""
import hashlib

import numpy as np


def derive_seed(root_seed, *names):
    """64-bit seed for the sub-stream ``names`` of ``root_seed``."""
    path = '/'.join(str(n) for n in names).encode('utf-8')
    digest = hashlib.blake2b(path, digest_size=8, key=(int(root_seed) % 2**64).to_bytes(8, 'little')).digest()
    return int.from_bytes(digest, 'little')


def stream(root_seed, *names):
    return np.random.Generator(np.random.PCG64(derive_seed(root_seed, *names)))
