import hashlib

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gfca.datasets import (DomainDataset, FewShotProtocol, SyntheticDomainConfig, load_features,
                           make_few_shot_split, one_hot, oversample_balanced, save_features,
                           synthesize_domain_pair)
from gfca.errors import DataError, LoadError, ParameterError, ProtocolError
from gfca.numerics import make_rng


def _blobs(counts, d=3, seed=0):
    rng = np.random.default_rng(seed)
    y = np.concatenate([np.full(n, k) for k, n in enumerate(counts)])
    return DomainDataset(rng.normal(size=(y.size, d)) + y[:, None], y, len(counts), "source")


def test_dataset_validation():
    with pytest.raises(DataError):
        DomainDataset(np.array([[np.nan, 1.0]]), None, 2)
    with pytest.raises(DataError):
        DomainDataset(np.zeros((2, 2)), [0, 5], 2)
    ds = _blobs([2, 2])
    with pytest.raises(ValueError):
        ds.features[0, 0] = 1.0


def test_csv_parse_examples(tmp_path):
    p = tmp_path / "a.csv"
    p.write_text("label,f0,f1\n0,1.5,2\n1,-3,4e-1\n")
    ds = load_features(p)
    assert ds.features.shape == (2, 2) and list(ds.labels) == [0, 1]
    np.testing.assert_array_equal(ds.features, [[1.5, 2], [-3, 0.4]])
    q = tmp_path / "t.csv"
    q.write_text("f0,f1\n1,2\n3,4\n")
    assert load_features(q).labels is None


def test_load_errors_name_rows(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("label,f0,f1\n0,1,2\n1,oops,3\n")
    with pytest.raises(LoadError, match="row 1"):
        load_features(p)
    p.write_text("label,f0,f1\n0,1,2\n1,2\n")
    with pytest.raises(LoadError, match="row 1"):
        load_features(p)
    p.write_text("label,f0\n0,1\n3,2\n")
    with pytest.raises(LoadError, match="row 1: unknown class id 3"):
        load_features(p, class_count=2)
    with pytest.raises(LoadError):
        load_features(tmp_path / "missing.csv")
    (tmp_path / "x.gfcf").write_bytes(b"GFC")
    with pytest.raises(LoadError):
        load_features(tmp_path / "x.gfcf")


@pytest.mark.parametrize("suffix", ["gfcf", "csv"])
@pytest.mark.parametrize("labeled", [True, False])
def test_round_trip_bit_identical(tmp_path, suffix, labeled):
    rng = np.random.default_rng(7)
    ds = DomainDataset(rng.normal(size=(13, 5)) * 1e3, rng.integers(0, 4, 13) if labeled else None, 4)
    back = load_features(save_features(ds, tmp_path / f"d.{suffix}"), class_count=4)
    assert back.features.tobytes() == ds.features.tobytes()
    if labeled:
        np.testing.assert_array_equal(back.labels, ds.labels)
    else:
        assert back.labels is None


def test_few_shot_split_examples():
    src = _blobs([5, 5, 5, 5])
    tr, ho = make_few_shot_split(src, FewShotProtocol.from_few_shot([2, 3], 4, 1, seed=3))
    assert list(tr.class_counts()) == [5, 5, 1, 1]
    assert list(ho.class_counts()) == [0, 0, 4, 4]
    tr, ho = make_few_shot_split(src, FewShotProtocol.from_few_shot([2], 4, 5))
    assert ho.n == 0 and tr.n == 20
    with pytest.raises(ProtocolError):
        make_few_shot_split(src, FewShotProtocol.from_few_shot([2], 4, 6))


@given(st.integers(0, 10_000), st.integers(1, 4))
def test_few_shot_split_partition_and_determinism(seed, m):
    src = _blobs([6, 5, 7], seed=seed % 7)
    prot = FewShotProtocol.from_few_shot([1, 2], 3, m, seed=seed)
    tr, ho = make_few_shot_split(src, prot)
    tr2, _ = make_few_shot_split(src, prot)
    assert tr.features.tobytes() == tr2.features.tobytes()
    for k in (1, 2):
        orig = sorted(map(tuple, src.features[src.labels == k]))
        got = sorted(map(tuple, np.vstack([tr.features[tr.labels == k], ho.features[ho.labels == k]])))
        assert orig == got
        assert (tr.labels == k).sum() == m


def test_protocol_invariants():
    with pytest.raises(ProtocolError):
        FewShotProtocol((0, 1), (1, 2), 1)
    with pytest.raises(ProtocolError):
        FewShotProtocol((0,), (1,), 0)
    p = FewShotProtocol.from_few_shot([3], 5, 2)
    assert p.normal_classes == (0, 1, 2, 4) and p.class_count == 5


def test_oversample_counts_and_membership():
    src = _blobs([10, 3])
    out = oversample_balanced(src, make_rng(0))
    assert list(out.class_counts()) == [10, 10]
    rows = {(tuple(r), int(y)) for r, y in zip(src.features, src.labels)}
    assert all((tuple(r), int(y)) in rows for r, y in zip(out.features, out.labels))
    bal = _blobs([4, 4])
    same = oversample_balanced(bal, make_rng(1))
    assert sorted(map(tuple, same.features)) == sorted(map(tuple, bal.features))
    with pytest.raises(ParameterError):
        oversample_balanced(bal.unlabeled(), make_rng(1))


def test_one_hot():
    np.testing.assert_array_equal(one_hot(0, 3), [1, 0, 0])
    np.testing.assert_array_equal(one_hot(2, 3), [0, 0, 1])
    assert all(one_hot(k, 5).sum() == 1 for k in range(5))
    with pytest.raises(ParameterError):
        one_hot(3, 3)


def _digest(ds):
    return hashlib.sha256(ds.features.tobytes() + ds.labels.tobytes()).hexdigest()


def test_synthetic_translation_and_determinism():
    cfg = SyntheticDomainConfig(class_count=4, feature_dim=6, noise_std=0.1, rotation_deg=(0.0,),
                                translation=tuple([10.0] + [0.0] * 5), samples_per_class=20, seed=5)
    pair = synthesize_domain_pair(cfg)
    np.testing.assert_allclose(pair.truth.target_means, pair.truth.source_means + np.array([10.0, 0, 0, 0, 0, 0]))
    again = synthesize_domain_pair(cfg)
    assert _digest(pair.source) == _digest(again.source)
    assert _digest(pair.target) == _digest(again.target)
    other = synthesize_domain_pair(SyntheticDomainConfig(class_count=4, feature_dim=6, seed=6))
    assert _digest(other.source) != _digest(pair.source)


def test_synthetic_identity_transform_centroids_close():
    cfg = SyntheticDomainConfig(class_count=3, feature_dim=4, noise_std=0.5, rotation_deg=(0.0,),
                                samples_per_class=400, seed=1)
    pair = synthesize_domain_pair(cfg)
    for k in range(3):
        gap = pair.source.features[pair.source.labels == k].mean(0) - pair.target.features[pair.target.labels == k].mean(0)
        assert np.abs(gap).max() < 5 * 0.5 * np.sqrt(2 / 400)


def test_synthetic_rotation_is_orthogonal_and_applied():
    cfg = SyntheticDomainConfig(class_count=3, feature_dim=5, rotation_deg=(30.0, 45.0), translation=1.0)
    r = cfg.rotation_matrix()
    np.testing.assert_allclose(r @ r.T, np.eye(5), atol=1e-14)
    assert r[0, 0] == pytest.approx(np.cos(np.pi / 6)) and r[2, 2] == pytest.approx(np.cos(np.pi / 4))
    pair = synthesize_domain_pair(cfg)
    np.testing.assert_allclose(pair.truth.target_means,
                               pair.truth.source_means @ r.T + cfg.translation_vector())
    with pytest.raises(ParameterError):
        SyntheticDomainConfig(feature_dim=1)
    with pytest.raises(ParameterError):
        SyntheticDomainConfig(noise_std=0.0)
