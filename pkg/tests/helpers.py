"""Shared fixtures-in-code for the test suite."""

import numpy as np

from rrt.data import ImageRecord, LocalDescriptor
from rrt.model import ModelConfig


def tiny_config(**overrides) -> ModelConfig:
    base = dict(
        L=4, d=8, h=2, d_h=4, layers=2, d_c=16, n_scales=3, d_g_raw=16,
    )
    base.update(overrides)
    return ModelConfig(**base)


def make_record(rng, rec_id, label, d_l, d_g, n_locals, n_scales, canvas=1024.0):
    """Unit-normalized random record."""
    locs = []
    for _ in range(n_locals):
        v = rng.standard_normal(d_l)
        v /= np.linalg.norm(v)
        locs.append(
            LocalDescriptor(
                v.astype(np.float32),
                float(rng.uniform(0, canvas)),
                float(rng.uniform(0, canvas)),
                int(rng.integers(0, n_scales)),
            )
        )
    g = rng.standard_normal(d_g)
    g /= np.linalg.norm(g)
    return ImageRecord(rec_id, label, g.astype(np.float32), locs)


def make_pair(rng, cfg, n_a=None, n_b=None):
    n_a = cfg.L if n_a is None else n_a
    n_b = cfg.L if n_b is None else n_b
    a = make_record(rng, 0, 0, cfg.d, cfg.d_g_raw, n_a, cfg.n_scales)
    b = make_record(rng, 1, 1, cfg.d, cfg.d_g_raw, n_b, cfg.n_scales)
    return a, b
