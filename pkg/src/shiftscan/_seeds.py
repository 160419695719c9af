"""Labeled sub-seed derivation.

Every random draw in the pipeline descends from one global seed through a
named stream ("data", "poison", "train", ...), so streams stay independent
and adding a consumer never perturbs the others.  String labels are hashed
with crc32, which is stable across processes and platforms.
"""
import zlib

import numpy as np


def _as_int(label):
    if isinstance(label, (int, np.integer)):
        return int(label)
    return zlib.crc32(str(label).encode())


def seed_seq(root, *labels):
    return np.random.SeedSequence([int(root)] + [_as_int(l) for l in labels])


def make_rng(root, *labels):
    return np.random.default_rng(seed_seq(root, *labels))
