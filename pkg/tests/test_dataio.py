import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from connbench.dataio import (MANIFEST_HEADER, CollinearityError, ConfigError, DataError, Dataset,
                              DegenerateSeriesError, GeneratorConfig, ParseError, Subject, compute_fc,
                              decile_bins, decode_mat64, devectorize_lower, encode_mat64,
                              fit_target_transform, generate_synthetic, load_dataset, read_mat64,
                              save_dataset, simulate_ts, stationary_fc, vectorize_lower, write_mat64,
                              zscore_ts)


def make_subjects(age, sex, y):
    return [Subject(f"s{i}", f"f{i}", float(a), int(s), np.eye(3), np.zeros((3, 4)), float(b))
            for i, (a, s, b) in enumerate(zip(age, sex, y))]


# ------------------------------------------------------------ preprocessing

def test_zscore_hand_value():
    np.testing.assert_allclose(zscore_ts([[1.0, 2.0, 3.0]]), [[-1.22474487, 0.0, 1.22474487]], atol=1e-8)


@given(arrays(np.float64, (3, 6), elements=st.floats(-100, 100)))
def test_zscore_idempotent(x):
    if (x.std(axis=1) < 1e-3).any():
        return
    z = zscore_ts(x)
    np.testing.assert_allclose(zscore_ts(z), z, atol=1e-9)


def test_zscore_constant_row_names_region():
    with pytest.raises(DegenerateSeriesError, match="region 1"):
        zscore_ts([[1.0, 2.0, 3.0], [4.0, 4.0, 4.0]])


def test_fc_identical_and_negated_rows():
    r = np.array([0.3, -1.0, 2.0, 0.5])
    fc = compute_fc(np.stack([r, r, -r]))
    assert fc[0, 1] == pytest.approx(1.0) and fc[0, 2] == pytest.approx(-1.0)


def test_fc_matches_textbook_formula(rng):
    x = rng.normal(size=(5, 50))
    cov = np.cov(x, bias=True)
    sd = np.sqrt(np.diag(cov))
    np.testing.assert_allclose(compute_fc(x), cov / np.outer(sd, sd), atol=1e-12)


def test_vectorize_lower_order():
    fc = np.array([[1, 0, 0], [0.1, 1, 0], [0.2, 0.3, 1.0]])
    fc = np.tril(fc) + np.tril(fc, -1).T
    np.testing.assert_array_equal(vectorize_lower(fc), [0.1, 0.2, 0.3])
    assert vectorize_lower(np.eye(2)).shape == (1,)


@given(st.integers(2, 9).flatmap(lambda n: arrays(np.float64, n * (n - 1) // 2, elements=st.floats(-1, 1))))
def test_vectorize_roundtrip(vec):
    back = devectorize_lower(vec)
    np.testing.assert_array_equal(back, back.T)
    np.testing.assert_array_equal(vectorize_lower(back), vec)


def test_decile_bins_balanced(rng):
    counts = np.bincount(decile_bins(rng.normal(size=1000)), minlength=10)
    assert counts.min() == counts.max() == 100


# --------------------------------------------------------- target transform

def test_residuals_orthogonal_to_covariates(rng):
    age, sex, y = rng.uniform(22, 36, 50), rng.integers(0, 2, 50), rng.normal(size=50)
    tt = fit_target_transform(make_subjects(age, sex, y))
    res = tt.residualize(age, sex, y)
    for col in (np.ones(50), age, sex):
        assert abs(res @ col) <= 1e-9 * max(1.0, np.abs(col).sum())


def test_uncorrelated_targets_keep_their_shape(rng):
    # covariates balanced and orthogonal to y by construction
    age = np.tile([25.0, 30.0], 20)
    sex = np.repeat([0, 1], 20)
    y = np.tile([1.0, 1.0, -1.0, -1.0], 10) + 5.0
    tt = fit_target_transform(make_subjects(age, sex, y))
    np.testing.assert_allclose(tt.coef[1:], 0.0, atol=1e-12)
    np.testing.assert_allclose(tt.residualize(age, sex, y), y - y.mean(), atol=1e-12)


def test_exact_covariate_target_has_zero_variance():
    age = np.arange(22.0, 32.0)
    sex = np.array([0, 1] * 5)
    with pytest.raises(DataError, match="zero variance"):
        fit_target_transform(make_subjects(age, sex, 2 * age))


def test_collinear_design_raises():
    with pytest.raises(CollinearityError):
        fit_target_transform(make_subjects([30.0] * 5, [1] * 5, [1.0, 2, 3, 4, 5]))


def test_apply_and_invert(rng):
    age, sex, y = rng.uniform(22, 36, 40), rng.integers(0, 2, 40), rng.normal(size=40)
    tt = fit_target_transform(make_subjects(age, sex, y))
    z = tt.apply(age, sex, y)
    assert abs(z.mean()) < 1e-12 and z.std() == pytest.approx(1.0)
    np.testing.assert_allclose(tt.invert_standardization(z), tt.residualize(age, sex, y), atol=1e-12)


def test_test_subject_uses_training_coefficients(rng):
    age, sex, y = rng.uniform(22, 36, 40), rng.integers(0, 2, 40), rng.normal(size=40)
    tt = fit_target_transform(make_subjects(age, sex, y))
    a, s, b = 29.0, 1, 0.7
    expected = (b - (tt.coef[0] + tt.coef[1] * a + tt.coef[2] * s) - tt.mean) / tt.std
    assert tt.apply([a], [s], [b])[0] == pytest.approx(expected, abs=1e-12)


# --------------------------------------------------------------- generator

def test_generator_deterministic():
    cfg = GeneratorConfig(n_subjects=20, n_families=10, n_regions=6, seed=3, modality="task_wm")
    assert generate_synthetic(cfg) == generate_synthetic(cfg)


def test_modalities_share_subjects():
    a = generate_synthetic(GeneratorConfig(n_subjects=20, n_families=10, n_regions=6, modality="rest"))
    b = generate_synthetic(GeneratorConfig(n_subjects=20, n_families=10, n_regions=6, modality="task_wm"))
    assert a.ids == b.ids
    for s, t in zip(a.subjects, b.subjects):
        assert s.family_id == t.family_id and s.age == t.age
        np.testing.assert_array_equal(s.sc, t.sc)


def test_unstable_rho_is_config_error():
    with pytest.raises(ConfigError) as err:
        GeneratorConfig(rho=1.2).resolved()
    assert err.value.key == "rho"


def test_noiseless_behavior_is_linear_in_true_fc():
    cfg = GeneratorConfig(n_subjects=60, n_families=30, n_regions=6, snr=math.inf, seed=2)
    ds = generate_synthetic(cfg)
    feats = np.array([vectorize_lower(stationary_fc(s.sc, cfg.rho)) for s in ds.subjects])
    y = np.array([s.behavior for s in ds.subjects])
    design = np.column_stack([np.ones(len(y)), feats])
    coef, *_ = np.linalg.lstsq(design, y, rcond=None)
    np.testing.assert_allclose(design @ coef, y, atol=1e-8)


def test_independent_timepoints_decorrelate():
    sc = np.ones((6, 6)) - np.eye(6)
    ts = simulate_ts(np.random.default_rng(0), sc, 0.0, 4096)
    off = vectorize_lower(compute_fc(ts))
    assert abs(off.mean()) <= 3 / math.sqrt(4096)


def test_family_sizes_between_one_and_four():
    ds = generate_synthetic(GeneratorConfig(n_subjects=90, n_families=30, n_regions=5))
    sizes = np.unique([s.family_id for s in ds.subjects], return_counts=True)[1]
    assert sizes.min() >= 1 and sizes.max() <= 4 and sizes.sum() == 90


# ---------------------------------------------------------------------- I/O

def test_mat64_layout():
    buf = encode_mat64(np.array([[1.0, 2.0]]))
    assert buf[:4] == b"CBM1" and buf[4:12] == (1).to_bytes(4, "little") + (2).to_bytes(4, "little")
    assert len(buf) == 12 + 16


@given(arrays(np.float64, st.tuples(st.integers(0, 4), st.integers(0, 4)), elements=st.floats(allow_nan=False)))
def test_mat64_roundtrip(a):
    back, end = decode_mat64(encode_mat64(a))
    np.testing.assert_array_equal(back, a)


def test_truncated_file_reports_byte_offset(tmp_path):
    f = tmp_path / "x.mat64"
    write_mat64(f, np.ones((3, 3)))
    f.write_bytes(f.read_bytes()[:40])
    with pytest.raises(ParseError, match="byte 40"):
        read_mat64(f)


def test_dataset_roundtrip(tmp_path, small_dataset):
    save_dataset(small_dataset, tmp_path / "d")
    assert load_dataset(tmp_path / "d") == small_dataset
    text = (tmp_path / "d" / "manifest.csv").read_bytes()
    assert b"\r" not in text and text.startswith(",".join(MANIFEST_HEADER).encode())


def test_manifest_shape_mismatch_names_subject(tmp_path, small_dataset):
    save_dataset(small_dataset, tmp_path / "d")
    sid = small_dataset.subjects[3].id
    write_mat64(tmp_path / "d" / "sc" / f"{sid}.mat64", np.ones((7, 7)))
    with pytest.raises(DataError, match=sid):
        load_dataset(tmp_path / "d")


def test_missing_file_is_reported(tmp_path, small_dataset):
    save_dataset(small_dataset, tmp_path / "d")
    (tmp_path / "d" / "ts" / f"{small_dataset.subjects[0].id}.mat64").unlink()
    with pytest.raises(DataError, match="missing"):
        load_dataset(tmp_path / "d")


def test_duplicate_ids_rejected(small_dataset):
    subs = small_dataset.subjects[:3] + small_dataset.subjects[:1]
    with pytest.raises(DataError, match="duplicate"):
        Dataset(subjects=subs, modality="rest")
