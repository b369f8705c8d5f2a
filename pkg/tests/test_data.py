import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dsin.data import (
    BoundsError,
    CropSpec,
    Dataset,
    ManifestError,
    SyntheticSpec,
    compute_class_stats,
    crop_patches,
    generate_synthetic_dataset,
    load_manifest,
    make_folds,
    save_manifest,
    split_by_subjects,
)
from dsin.evaluation import au_correlation_matrix
from dsin.mrf import GenerationError, fit_pairwise_mrf, gibbs_sample


def small_spec(**kw):
    base = dict(
        n_labels=3,
        pairs={(0, 1): 0.6},
        positive_ratios=[0.3, 0.3, 0.4],
        subjects=3,
        samples_per_subject=10,
        face_size=32,
        patch_size=8,
        channels=1,
        seed=5,
    )
    base.update(kw)
    n, pairs, ratios = base.pop("n_labels"), base.pop("pairs"), base.pop("positive_ratios")
    return SyntheticSpec.from_pairs(n, pairs, ratios, **base)


# MRF fitting and sampling --------------------------------------------------------
def test_fit_hits_requested_moments():
    corr = np.eye(4)
    corr[0, 1] = corr[1, 0] = 0.7
    corr[2, 3] = corr[3, 2] = -0.3
    model = fit_pairwise_mrf([0.3, 0.4, 0.2, 0.5], corr)
    mean, second = model.exact_moments()
    np.testing.assert_allclose(mean, [0.3, 0.4, 0.2, 0.5], atol=1e-6)


def test_infeasible_correlation_reports_moments():
    # strong positive 0-1 and 1-2 but strongly negative 0-2 cannot coexist
    corr = np.array([[1, 0.9, -0.9], [0.9, 1, 0.9], [-0.9, 0.9, 1.0]])
    with pytest.raises(GenerationError, match="achieved"):
        fit_pairwise_mrf([0.5, 0.5, 0.5], corr)


def test_perfect_anticorrelation_tied():
    corr = np.array([[1.0, -1.0], [-1.0, 1.0]])
    model = fit_pairwise_mrf([0.4, 0.6], corr)
    y = gibbs_sample(model, np.random.default_rng(0).random((200, 101, 1)))
    assert (y[:, 0] != y[:, 1]).all()


def test_gibbs_matches_exact_moments():
    corr = np.eye(3)
    corr[0, 2] = corr[2, 0] = 0.5
    model = fit_pairwise_mrf([0.3, 0.5, 0.2], corr)
    y = gibbs_sample(model, np.random.default_rng(1).random((20000, 101, 3)))
    np.testing.assert_allclose(y.mean(axis=0), [0.3, 0.5, 0.2], atol=0.02)
    assert abs(au_correlation_matrix(y)[0, 2] - 0.5) < 0.03


# synthetic generator -------------------------------------------------------------
def test_perfect_correlation_forces_equality():
    spec = small_spec(n_labels=2, pairs={(0, 1): 1.0}, positive_ratios=[0.5, 0.5])
    ds = generate_synthetic_dataset(spec)
    assert (ds.labels[:, 0] == ds.labels[:, 1]).all()


def test_generator_deterministic(tmp_path):
    a = generate_synthetic_dataset(small_spec())
    b = generate_synthetic_dataset(small_spec())
    assert a.equals(b)
    save_manifest(a, tmp_path / "a")
    save_manifest(b, tmp_path / "b")
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    for rel in files:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


def test_independent_labels_frequency():
    spec = small_spec(n_labels=2, pairs={}, positive_ratios=[0.3, 0.3], subjects=4, samples_per_subject=500)
    ds = generate_synthetic_dataset(spec)
    assert len(ds) == 2000
    rho = ds.labels.mean(axis=0)
    assert ((rho >= 0.25) & (rho <= 0.35)).all()
    assert abs(au_correlation_matrix(ds.labels)[0, 1]) <= 0.1


def test_moment_match_property():
    pairs = {(0, 1): 0.7, (2, 3): 0.6, (1, 4): -0.2}
    ratios = [0.3, 0.25, 0.2, 0.35, 0.4]
    spec = small_spec(n_labels=5, pairs=pairs, positive_ratios=ratios, subjects=4, samples_per_subject=500)
    ds = generate_synthetic_dataset(spec)
    assert np.abs(ds.labels.mean(axis=0) - ratios).max() <= 0.05
    assert np.abs(au_correlation_matrix(ds.labels) - spec.correlations).max() <= 0.1


def test_geometry_and_value_range():
    ds = generate_synthetic_dataset(small_spec())
    assert ds.n_streams == 6 and ds.stream_names[-1] == "face"
    assert ds.geometry[:5] == [(8, 8, 1)] * 5 and ds.geometry[5] == (32, 32, 1)
    for s in ds.streams:
        assert s.min() >= 0 and s.max() <= 1
    assert sorted(set(ds.subjects)) == ["subj00", "subj01", "subj02"]


def test_without_face_stream():
    ds = generate_synthetic_dataset(small_spec(include_face=False))
    assert ds.n_streams == 5


@pytest.mark.parametrize(
    "kw",
    [
        dict(positive_ratios=[0.0, 0.3, 0.3]),
        dict(pairs={(0, 1): 1.5}),
        dict(burn_in=50),
    ],
)
def test_invalid_spec(kw):
    with pytest.raises(GenerationError):
        small_spec(**kw)


def test_glyph_present_only_when_active():
    # no noise: a label's glyph region is brighter exactly when the label is on
    spec = small_spec(glyph_noise=0.0, samples_per_subject=40)
    ds = generate_synthetic_dataset(spec)
    # label 2 lives alone in crop 2; backgrounds differ per subject, so compare within one
    patch = ds.streams[2].mean(axis=(1, 2, 3))
    subj = np.asarray(ds.subjects)
    for s in set(ds.subjects):
        on = patch[(subj == s) & (ds.labels[:, 2] == 1)]
        off = patch[(subj == s) & (ds.labels[:, 2] == 0)]
        if len(on) and len(off):
            assert on.min() > off.max()


# cropping ------------------------------------------------------------------------
def test_crop_marker_at_origin():
    face = np.zeros((224, 224, 3))
    face[0, 0] = 1.0
    patch = crop_patches(face, CropSpec([(28, 28)]))[0]
    assert patch.shape == (56, 56, 3)
    assert patch[0, 0, 0] == 1.0 and patch.sum() == 3.0


def test_crop_out_of_bounds_names_anchor():
    with pytest.raises(BoundsError, match=r"\(0, 0\)"):
        CropSpec([(0, 0)])


def test_crop_constant_and_copied():
    face = np.full((224, 224, 3), 0.25)
    patches = crop_patches(face, CropSpec.default())
    assert len(patches) == 5
    for p in patches:
        assert (p == 0.25).all()
    patches[0][:] = 9.0
    assert (face == 0.25).all()


# class statistics ------------------------------------------------------------------
def test_class_stats_examples():
    s = compute_class_stats([[1, 0], [1, 1], [0, 0], [1, 0]])
    np.testing.assert_allclose(s.ratio, [0.75, 0.25])
    y = np.array([[1, 1], [1, 0], [0, 0], [0, 0], [0, 0]] * 2)
    y[:, 0] = [1] * 5 + [0] * 5
    s = compute_class_stats(y)
    np.testing.assert_allclose(s.ratio, [0.5, 0.2])
    np.testing.assert_allclose(s.w_pos, [1.0, 4.0])
    assert (compute_class_stats(y, balancing=False).w_pos == 1).all()


def test_class_stats_missing_positives():
    with pytest.raises(ValueError, match="drop or merge"):
        compute_class_stats([[1, 0], [0, 0]])
    assert compute_class_stats([[1, 0], [0, 0]], balancing=False).w_pos.tolist() == [1.0, 1.0]


# folds -----------------------------------------------------------------------------
def test_folds_partition():
    subjects = [f"s{i}" for i in range(6) for _ in range(3)]
    folds = make_folds(subjects, 3, seed=1)
    assert [len(f.subjects) for f in folds] == [2, 2, 2]
    seen = [s for f in folds for s in f.subjects]
    assert sorted(seen) == sorted(set(subjects))
    idx = np.concatenate([f.indices for f in folds])
    assert sorted(idx.tolist()) == list(range(18))
    again = make_folds(subjects, 3, seed=1)
    assert [f.subjects for f in folds] == [f.subjects for f in again]


def test_folds_too_few_subjects():
    with pytest.raises(ValueError):
        make_folds(["a", "a"], 3)


@settings(max_examples=50)
@given(st.integers(1, 12), st.integers(1, 12), st.integers(0, 99))
def test_folds_balanced_and_exclusive(n_subj, k, seed):
    subjects = [f"p{i:02d}" for i in range(n_subj) for _ in range(2)]
    if k > n_subj:
        with pytest.raises(ValueError):
            make_folds(subjects, k, seed)
        return
    folds = make_folds(subjects, k, seed)
    sizes = [len(f.subjects) for f in folds]
    assert max(sizes) - min(sizes) <= 1
    for a in range(k):
        for b in range(a + 1, k):
            assert not set(folds[a].subjects) & set(folds[b].subjects)


def test_split_by_subjects():
    ds = generate_synthetic_dataset(small_spec())
    sel, rest = split_by_subjects(ds, ["subj01"])
    assert set(sel.subjects) == {"subj01"} and "subj01" not in rest.subjects
    assert len(sel) + len(rest) == len(ds)


# manifest --------------------------------------------------------------------------
def test_manifest_roundtrip(tmp_path):
    ds = generate_synthetic_dataset(small_spec())
    save_manifest(ds, tmp_path)
    back = load_manifest(tmp_path)
    assert back.equals(ds)
    assert back.stream_names == ds.stream_names


def test_manifest_short_label_row(tmp_path):
    ds = generate_synthetic_dataset(small_spec())
    save_manifest(ds, tmp_path)
    index = tmp_path / "index.tsv"
    lines = index.read_text().splitlines()
    fields = lines[3].split("\t")
    fields[2] = fields[2][:-1]
    lines[3] = "\t".join(fields)
    index.write_text("\n".join(lines) + "\n")
    with pytest.raises(ManifestError, match="row 4"):
        load_manifest(tmp_path)


def test_manifest_missing_patch_and_version(tmp_path):
    ds = generate_synthetic_dataset(small_spec())
    save_manifest(ds, tmp_path)
    (tmp_path / "patches" / f"{ds.ids[0]}_0.bin").unlink()
    with pytest.raises(ManifestError, match="missing patch file"):
        load_manifest(tmp_path)
    index = tmp_path / "index.tsv"
    index.write_text(index.read_text().replace("version=1", "version=7", 1))
    with pytest.raises(ManifestError, match="version 7"):
        load_manifest(tmp_path)


def test_manifest_empty(tmp_path):
    empty = Dataset(
        ids=[], subjects=[], labels=np.zeros((0, 12), dtype=np.uint8), streams=[np.zeros((0, 8, 8, 1))], n_labels=12
    )
    save_manifest(empty, tmp_path)
    back = load_manifest(tmp_path)
    assert len(back) == 0 and back.n_labels == 12


def test_manifest_missing_index(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_manifest(tmp_path / "nothing")
