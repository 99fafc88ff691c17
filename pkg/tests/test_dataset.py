import numpy as np
import pytest

from ivdistill.dataset import (
    DataValidationError,
    load_csv,
    make_dataset,
    split_by_instrument,
)


@pytest.fixture()
def toy_csv(tmp_path):
    path = tmp_path / "toy.csv"
    path.write_text(
        "y,d,x1,z\n"
        "1.5,1,0.2,0\n"
        "0.3,0,-1.0,1\n"
        "2.2,1,0.5,1\n"
        "-0.4,0,0.1,0\n"
    )
    return path


def test_load_csv_roundtrip(toy_csv):
    ds = load_csv(toy_csv, {"y": "y", "d": "d", "z": "z", "x": ["x1"]})
    assert ds.n == 4
    assert ds.n_levels == 2
    assert ds.k_x == 1
    np.testing.assert_allclose(ds.y, [1.5, 0.3, 2.2, -0.4])


def test_load_csv_rejects_nonbinary_treatment(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("y,d,x1,z\n1,0,0.1,0\n2,2,0.3,1\n3,1,0.2,1\n")
    with pytest.raises(DataValidationError, match="rows \\[1\\]"):
        load_csv(path, {"y": "y", "d": "d", "z": "z", "x": ["x1"]})


def test_load_csv_weighted_counts(tmp_path):
    path = tmp_path / "weighted.csv"
    path.write_text(
        "y,d,x1,z,w\n"
        "1,1,0.0,1,1\n"
        "2,0,0.1,1,1\n"
        "3,1,0.2,1,2\n"
        "4,0,0.3,0,4\n"
    )
    ds = load_csv(path, {"y": "y", "d": "d", "z": "z", "x": ["x1"], "weight": "w"})
    # weighted tally by hand: z=1 weights 1+1+2 = 4, z=0 weight 4
    views = {v.level: v for v in split_by_instrument(ds)}
    assert views[1].n1 == pytest.approx(4.0)
    assert views[1].lam_hat == pytest.approx(0.5)


def test_load_csv_listwise_deletion(tmp_path):
    path = tmp_path / "missing.csv"
    path.write_text("y,d,x1,z\n1,1,0.1,0\n,0,0.2,1\n3,0,0.3,1\n4,1,0.4,0\n")
    with pytest.warns(UserWarning, match="dropped 1 rows"):
        ds = load_csv(path, {"y": "y", "d": "d", "z": "z", "x": ["x1"]})
    assert ds.n == 3


def test_split_balanced():
    ds = make_dataset(
        y=np.arange(6.0),
        d=[0, 1, 0, 1, 0, 1],
        x=np.zeros((6, 1)) + np.arange(6)[:, None],
        z=[0, 0, 0, 1, 1, 1],
    )
    views = split_by_instrument(ds)
    assert [len(v.indices) for v in views] == [3, 3]
    assert views[0].lam_hat == pytest.approx(0.5)
    assert views[1].lam_hat == pytest.approx(0.5)


def test_single_level_warns_but_loads():
    with pytest.warns(UserWarning, match="single level"):
        ds = make_dataset(y=[1.0, 2.0], d=[0, 1], x=[[0.1], [0.2]], z=[0, 0])
    views = split_by_instrument(ds)
    assert len(views) == 1
    assert ds.n_levels == 1


def test_validation_errors():
    with pytest.raises(DataValidationError, match="positive"):
        make_dataset(y=[1.0, 2.0], d=[0, 1], x=[[1.0], [2.0]], z=[0, 1], weight=[1.0, 0.0])
    with pytest.raises(DataValidationError, match="at least 2"):
        make_dataset(y=[1.0], d=[1], x=[[1.0]], z=[0])
    with pytest.raises(DataValidationError, match="non-finite"):
        make_dataset(y=[1.0, np.nan], d=[0, 1], x=[[1.0], [2.0]], z=[0, 1])
    with pytest.raises(DataValidationError, match="integer-coded"):
        make_dataset(y=[1.0, 2.0], d=[0, 1], x=[[1.0], [2.0]], z=[0.5, 1])


def test_levels_recoded_ascending():
    ds = make_dataset(y=[1.0, 2.0, 3.0], d=[0, 1, 1], x=[[0.0], [1.0], [2.0]], z=[7, 2, 7])
    np.testing.assert_array_equal(ds.z_levels, [2, 7])
    np.testing.assert_array_equal(ds.z, [1, 0, 1])


def test_partition_property_random():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n = int(rng.integers(2, 40))
        k_levels = int(rng.integers(1, 4))
        z = rng.integers(0, k_levels, n)
        import warnings

        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            ds = make_dataset(
                y=rng.normal(size=n),
                d=rng.integers(0, 2, n),
                x=rng.normal(size=(n, 2)),
                z=z,
                weight=rng.uniform(0.5, 2.0, n),
            )
        views = split_by_instrument(ds)
        combined = np.concatenate([v.indices for v in views])
        assert np.array_equal(np.sort(combined), np.arange(n))
        for v in views:
            if 0 < v.n1 < ds.total_weight():
                assert 0.0 < v.lam_hat < 1.0
