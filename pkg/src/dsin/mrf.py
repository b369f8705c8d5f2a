"""Pairwise binary Markov random field used to draw correlated label vectors.

The joint over ``y in {0,1}^N`` is ``P(y) ∝ exp(h·y + Σ_{i<j} J_ij y_i y_j)``.
Biases and couplings are fitted on the convex maximum-entropy dual so that
the exact (enumerated) first and second moments hit requested positive
ratios and Pearson correlations.  Labels tied by a correlation of ±1 are collapsed
onto one representative before fitting.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import optimize

MAX_ENUMERATED = 16
_PARAM_LIMIT = 30.0


class GenerationError(ValueError):
    pass


@dataclass
class PairwiseMRF:
    """Fitted model over the representative variables plus the tie map."""

    bias: np.ndarray  # (R,)
    coupling: np.ndarray  # (R, R) symmetric, zero diagonal
    rep_of: np.ndarray  # (N,) representative index of each label
    flip: np.ndarray  # (N,) bool, label = 1 - representative

    @property
    def n_labels(self) -> int:
        return len(self.rep_of)

    def expand(self, reps: np.ndarray) -> np.ndarray:
        y = reps[..., self.rep_of]
        return np.where(self.flip, 1 - y, y).astype(np.uint8)

    def exact_moments(self) -> tuple:
        states, probs = _enumerate(self.bias, self.coupling)
        full = self.expand(states).astype(np.float64)
        mean = probs @ full
        second = full.T @ (full * probs[:, None])
        return mean, second


def _enumerate(bias: np.ndarray, coupling: np.ndarray) -> tuple:
    R = len(bias)
    states = np.array(list(itertools.product((0, 1), repeat=R)), dtype=np.float64).reshape(-1, R)
    energy = states @ bias + 0.5 * ((states @ coupling) * states).sum(axis=1)
    energy -= energy.max()
    w = np.exp(energy)
    return states, w / w.sum()


def correlation_to_second_moment(ratios: np.ndarray, corr: np.ndarray) -> np.ndarray:
    sd = np.sqrt(ratios * (1 - ratios))
    return np.outer(ratios, ratios) + corr * np.outer(sd, sd)


def second_moment_to_correlation(mean: np.ndarray, second: np.ndarray) -> np.ndarray:
    sd = np.sqrt(np.clip(mean * (1 - mean), 0.0, None))
    cov = second - np.outer(mean, mean)
    with np.errstate(divide="ignore", invalid="ignore"):
        corr = np.where(np.outer(sd, sd) > 0, cov / np.outer(sd, sd), 0.0)
    np.fill_diagonal(corr, 1.0)
    return corr


def _tie_labels(ratios: np.ndarray, corr: np.ndarray, tol: float) -> tuple:
    N = len(ratios)
    parent = list(range(N))
    flip = [False] * N

    def find(i):
        f = False
        while parent[i] != i:
            f ^= flip[i]
            i = parent[i]
        return i, f

    for i in range(N):
        for j in range(i + 1, N):
            c = corr[i, j]
            if abs(c) < 1.0 - 1e-12:
                continue
            want_flip = c < 0
            ri, fi = find(i)
            rj, fj = find(j)
            if ri == rj:
                if (fi ^ fj) != want_flip:
                    raise GenerationError(f"contradictory ±1 correlations around labels {i} and {j}")
                continue
            parent[rj] = ri
            flip[rj] = fi ^ fj ^ want_flip
    roots, rep_flip = zip(*(find(i) for i in range(N)))
    uniq = sorted(set(roots))
    rep_of = np.array([uniq.index(r) for r in roots])
    rep_flip = np.array(rep_flip, dtype=bool)
    for i in range(N):
        root = roots[i]
        expect = 1 - ratios[root] if rep_flip[i] else ratios[root]
        if abs(expect - ratios[i]) > tol:
            raise GenerationError(
                f"label {i} is tied to label {root} by a ±1 correlation but its positive ratio "
                f"{ratios[i]:.4f} cannot match the implied {expect:.4f}"
            )
    return rep_of, rep_flip, [int(r) for r in uniq]


def fit_pairwise_mrf(
    ratios,
    corr,
    tol_ratio: float = 0.01,
    tol_corr: float = 0.02,
    max_iter: int = 5000,
) -> PairwiseMRF:
    """Fit biases/couplings to requested marginals and correlations."""
    ratios = np.asarray(ratios, dtype=np.float64)
    corr = np.asarray(corr, dtype=np.float64)
    N = len(ratios)
    if corr.shape != (N, N):
        raise GenerationError(f"correlation matrix shape {corr.shape} does not match {N} labels")
    if not np.allclose(corr, corr.T) or not np.allclose(np.diag(corr), 1.0) or np.abs(corr).max() > 1.0:
        raise GenerationError("correlation matrix must be symmetric, unit-diagonal and inside [-1, 1]")
    if np.any(ratios <= 0) or np.any(ratios >= 1):
        raise GenerationError("target positive ratios must lie strictly inside (0, 1)")

    rep_of, flip, roots = _tie_labels(ratios, corr, tol_ratio)
    R = len(roots)
    if R > MAX_ENUMERATED:
        raise GenerationError(f"{R} free labels exceed the exact-fitting limit of {MAX_ENUMERATED}")
    r_ratio = ratios[roots]
    r_corr = corr[np.ix_(roots, roots)]
    target_second = correlation_to_second_moment(r_ratio, r_corr)
    np.fill_diagonal(target_second, r_ratio)

    states = np.array(list(itertools.product((0, 1), repeat=R)), dtype=np.float64).reshape(-1, R)
    iu = np.triu_indices(R, k=1)
    features = np.concatenate([states, states[:, iu[0]] * states[:, iu[1]]], axis=1)
    target = np.concatenate([r_ratio, target_second[iu]])

    def dual(theta):
        # log-partition minus theta·target; convex, gradient = model moments - target
        energy = features @ theta
        top = energy.max()
        w = np.exp(energy - top)
        z = w.sum()
        moments = (w / z) @ features
        return top + np.log(z) - theta @ target, moments - target

    theta0 = np.concatenate([np.log(r_ratio / (1 - r_ratio)), np.zeros(len(iu[0]))])
    res = optimize.minimize(
        dual,
        theta0,
        jac=True,
        method="L-BFGS-B",
        bounds=[(-_PARAM_LIMIT, _PARAM_LIMIT)] * len(theta0),
        options={"maxiter": max_iter, "gtol": 1e-12, "ftol": 1e-15},
    )
    bias = res.x[:R].copy()
    coupling = np.zeros((R, R))
    coupling[iu] = res.x[R:]
    coupling = coupling + coupling.T

    model = PairwiseMRF(bias=bias, coupling=coupling, rep_of=rep_of, flip=flip)
    mean, second = model.exact_moments()
    achieved = second_moment_to_correlation(mean, second)
    ratio_err = np.abs(mean - ratios).max()
    corr_err = np.abs(achieved - corr).max()
    if ratio_err > tol_ratio or corr_err > tol_corr:
        raise GenerationError(
            "correlation structure is not realisable by a pairwise binary model: "
            f"requested ratios {np.round(ratios, 4).tolist()}, achieved {np.round(mean, 4).tolist()}; "
            f"max correlation error {corr_err:.4f} (achieved {np.round(achieved, 4).tolist()})"
        )
    return model


def gibbs_sample(
    model: PairwiseMRF,
    uniforms: np.ndarray,
    init: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Run independent Gibbs chains, one per row of ``uniforms``.

    ``uniforms`` has shape (M, sweeps + 1, R): slice 0 seeds the start state
    from the independent-marginal approximation, the rest drive the sweeps.
    Returns the expanded label matrix (M, N).
    """
    M, steps, R = uniforms.shape
    bias, coupling = model.bias, model.coupling
    if init is None:
        start = 1.0 / (1.0 + np.exp(-bias))
        state = (uniforms[:, 0, :] < start).astype(np.float64)
    else:
        state = init.astype(np.float64).copy()
    for s in range(1, steps):
        u = uniforms[:, s, :]
        for i in range(R):
            field = bias[i] + state @ coupling[:, i]
            p_on = 1.0 / (1.0 + np.exp(-field))
            state[:, i] = (u[:, i] < p_on).astype(np.float64)
    return model.expand(state.astype(np.uint8))
