"""Tiny datasets and models shared by the training, CLI and acceptance tests."""

import numpy as np

from dsin.data import SyntheticSpec, generate_synthetic_dataset, split_by_subjects
from dsin.model import DSINModel, model_config_for

TINY_MODEL = dict(channels=(2, 3), hidden=6, extra_channels=(2,), fusion_hidden=4)


def tiny_dataset(n_labels=4, subjects=3, per_subject=40, seed=0, include_face=False, noise=0.1):
    pairs = {(0, 1): 0.7} if n_labels >= 2 else {}
    spec = SyntheticSpec.from_pairs(
        n_labels,
        pairs,
        [0.35] * n_labels,
        subjects=subjects,
        samples_per_subject=per_subject,
        face_size=32,
        patch_size=8,
        channels=1,
        include_face=include_face,
        glyph_noise=noise,
        seed=seed,
    )
    return generate_synthetic_dataset(spec)


def tiny_split(**kw):
    ds = tiny_dataset(**kw)
    subjects = sorted(set(ds.subjects))
    val, train = split_by_subjects(ds, subjects[:1])
    return train, val


def tiny_model(ds, seed=0, T=3, **kw):
    opts = dict(TINY_MODEL, T=T, seed=seed)
    opts.update(kw)
    return DSINModel(model_config_for(ds, **opts))


def snapshot_block(model, block):
    return {k: t.data.copy() for k, t in model.block_tensors(block).items()}


def blocks_equal(a, b):
    return a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)
