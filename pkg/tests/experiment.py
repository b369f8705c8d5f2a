"""Desk-scale ablation runs shared by the acceptance tests.

One run = synthetic data for a seed, a subject-exclusive split, and the five
training stages executed in order with per-stage budgets.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from dsin.data import SyntheticSpec, generate_synthetic_dataset, make_folds, split_by_subjects
from dsin.evaluation import f1_frame
from dsin.model import DSINModel, model_config_for
from dsin.training import TrainConfig, staged_train

N_LABELS = 6
PAIRS = {(0, 1): 0.75, (2, 3): 0.7, (4, 5): 0.7}
RATIOS = [0.3, 0.3, 0.25, 0.25, 0.2, 0.2]
GLYPH_NOISE = 0.4

MODEL = dict(channels=(4, 8, 8, 8), extra_channels=(4, 4), hidden=16, fusion_hidden=16)

# stage -> (lr, max epochs, patience); SI starts near zero and needs a long stage 4
PLAN = {1: (1e-2, 25, 10), 2: (1e-2, 80, 10), 3: (1e-2, 25, 5), 4: (1e-2, 300, 30), 5: (1e-3, 15, 4)}


def make_split(seed: int, noise: float = GLYPH_NOISE, pairs=PAIRS, ratios=RATIOS, include_face=True):
    spec = SyntheticSpec.from_pairs(
        len(ratios),
        pairs,
        ratios,
        glyph_noise=noise,
        glyph_contrast=0.3,
        subjects=6,
        samples_per_subject=300,
        face_size=64,
        patch_size=16,
        channels=1,
        include_face=include_face,
        seed=seed,
    )
    ds = generate_synthetic_dataset(spec)
    test_subjects = make_folds(ds, 3, seed)[0].subjects
    test, rest = split_by_subjects(ds, test_subjects)
    val, train = split_by_subjects(rest, sorted(set(rest.subjects))[:1])
    return train, val, test


def run_stage(model, train, val, stage: int, seed: int, T: int = 10, r: float = 5e-3, balancing=True, plan=PLAN):
    lr, epochs, patience = plan[stage]
    cfg = TrainConfig(
        stages=(stage,), lr=lr, max_epochs=epochs, patience=patience, T=T, r=r, seed=seed, balancing=balancing
    )
    return staged_train(model, train, val, cfg)


def macro(scores, labels, classes=None) -> float:
    f1 = f1_frame(scores, labels).f1s()
    return float(f1.mean() if classes is None else f1[list(classes)].mean())


@dataclass
class SeedRun:
    seed: int
    fusion: float
    si: float
    streams: list
    stage3: dict  # snapshot after stage 3
    chi_mean: float
    seconds: float
    data: tuple = field(repr=False, default=())
    bn: list = field(repr=False, default_factory=list)


def full_run(seed: int, T: int = 10) -> SeedRun:
    t0 = time.perf_counter()
    train, val, test = make_split(seed)
    model = DSINModel(model_config_for(train, T=T, seed=seed, **MODEL))
    for stage in (1, 2, 3):
        run_stage(model, train, val, stage, seed, T=T)
    stage3 = model.snapshot()
    bn = [s.bn_initialized() for s in model.streams]
    for stage in (4, 5):
        run_stage(model, train, val, stage, seed, T=T)
    pred = model.predict(test.streams, T=T)
    y = test.labels
    return SeedRun(
        seed=seed,
        fusion=macro(pred["f"], y),
        si=macro(pred["y_hat"], y),
        streams=[macro(p, y) for p in pred["p"]],
        stage3=stage3,
        chi_mean=float(pred["chi"][-1].mean()),
        seconds=time.perf_counter() - t0,
        data=(train, val, test),
        bn=bn,
    )


def chi_after_stage4(run: SeedRun, r: float, T: int = 10) -> float:
    """Final-iteration mean χ on test after retraining ω from the stage-3 snapshot with regulariser r."""
    train, val, test = run.data
    model = DSINModel(model_config_for(train, T=T, seed=run.seed, **MODEL))
    model.restore(run.stage3)
    for s, flag in zip(model.streams, run.bn):
        s.mark_bn_initialized(flag)
    model.trained_blocks = {"pi", "phi"}
    run_stage(model, train, val, 4, run.seed, T=T, r=r)
    return float(model.predict(test.streams, T=T)["chi"][-1].mean())


if __name__ == "__main__":
    import sys

    for seed in map(int, sys.argv[1:] or ["0"]):
        run = full_run(seed)
        print(
            f"seed {seed}: fusion {run.fusion:.4f} si {run.si:.4f} gain {100 * (run.si - run.fusion):+.2f} "
            f"best stream {max(run.streams):.4f} chi {run.chi_mean:.3f} {run.seconds:.0f}s",
            flush=True,
        )
