import numpy as np
import pytest

import examples
from shm.nonlin.dataset import (
    DegenerateColumn,
    LayoutMismatch,
    Normalization,
    RecordTooShort,
    TooFewRepetitions,
    denormalize,
    largest_remainder,
    load_dataset,
    make_lagged,
    normalize,
    save_dataset,
    split,
)
from shm.nonlin.simulator import TimeSeriesRecord
from shm.nonlin.util import MalformedFile


def test_lag_alignment():
    r = examples.ramp_record(n=6, n_dof=2)
    D = make_lagged([r], lag=2, target_dof=1)
    assert D.inputs.shape == (4, 6)
    assert D.targets.shape == (4, 1)
    # row for t = 2: channels at t-1, then at t-2
    assert np.array_equal(D.inputs[0], [1, 101, 201, 0, 100, 200])
    assert D.targets[0, 0] == 102
    assert np.array_equal(D.targets[:, 0], [102, 103, 104, 105])
    assert D.column_labels == [
        ("base", 1), ("dof1", 1), ("dof2", 1), ("base", 2), ("dof1", 2), ("dof2", 2),
    ]

    D = make_lagged([r], lag=1, target_dof=(1, 2))
    assert D.target_dofs == (1, 2)
    assert np.array_equal(D.targets[0], [101, 201])


def test_dataset_size():
    r = TimeSeriesRecord(np.ones((8192, 4)), 1 / 320)
    D = make_lagged([r], lag=2, target_dof=3)
    assert D.inputs.shape == (8190, 8)
    assert (D.input_dim, D.output_dim) == (8, 1)


def test_constant_channels():
    r = TimeSeriesRecord(np.full((10, 3), 2.5), 0.01)
    D = make_lagged([r], lag=1, target_dof=2)
    assert np.all(D.inputs == 2.5) and np.all(D.targets == 2.5)


def test_records_are_windowed_separately():
    a = examples.ramp_record(n=5, repetition=0)
    b = TimeSeriesRecord(-examples.ramp_record(n=7).channels, 0.01, repetition=1)
    D = make_lagged([a, b], lag=2, target_dof=2)
    assert len(D) == 3 + 5
    assert np.array_equal(D.blocks, [0, 0, 0, 1, 1, 1, 1, 1])
    # first row of the second record only sees that record
    assert np.array_equal(D.inputs[3], -np.array([1, 101, 201, 0, 100, 200]))
    assert D.targets[3, 0] == -202


def test_bad_records():
    with pytest.raises(RecordTooShort):
        make_lagged([TimeSeriesRecord(np.ones((2, 4)), 0.01)], lag=2, target_dof=1)
    with pytest.raises(LayoutMismatch):
        make_lagged([examples.ramp_record(), TimeSeriesRecord(np.ones((6, 3)), 0.02)], 1, 1)
    with pytest.raises(LayoutMismatch):
        make_lagged([examples.ramp_record(), examples.ramp_record(n_dof=3)], 1, 1)
    with pytest.raises(ValueError):
        make_lagged([examples.ramp_record()], lag=0, target_dof=1)
    with pytest.raises(ValueError):
        make_lagged([examples.ramp_record(n_dof=2)], lag=1, target_dof=3)


def test_largest_remainder():
    assert largest_remainder([0.6, 0.2, 0.2], 5).tolist() == [3, 1, 1]
    assert largest_remainder([0.6, 0.2, 0.2], 10).tolist() == [6, 2, 2]
    assert largest_remainder([1 / 3] * 3, 4).sum() == 4
    assert largest_remainder([0.5, 0.25, 0.25], 3).tolist() == [1, 1, 1]


def test_split_by_repetition():
    D = split(make_lagged(examples.noise_records(k=5, n=50), 2, 1), seed=3)
    blocks = {name: set(D.blocks[D.rows(name)].tolist()) for name in D.split}
    assert [len(blocks[p]) for p in ("train", "validation", "test")] == [3, 1, 1]
    assert set.union(*blocks.values()) == set(range(5))
    assert not (blocks["train"] & blocks["validation"])
    assert not (blocks["train"] & blocks["test"])
    assert not (blocks["validation"] & blocks["test"])
    # every row is in exactly one part
    rows = np.sort(np.concatenate(list(D.split.values())))
    assert np.array_equal(rows, np.arange(len(D)))

    E = split(make_lagged(examples.noise_records(k=5, n=50), 2, 1), seed=3)
    assert all(np.array_equal(D.split[p], E.split[p]) for p in D.split)


def test_split_needs_enough_repetitions():
    D = make_lagged(examples.noise_records(k=5, n=50), 2, 1)
    with pytest.raises(TooFewRepetitions):
        split(D, fractions=(1, 0, 0))
    with pytest.raises(TooFewRepetitions):
        split(make_lagged(examples.noise_records(k=2, n=50), 2, 1))
    with pytest.raises(ValueError):
        split(D, fractions=(0.5, 0.2, 0.2))


def test_normalization():
    N = Normalization([5.0], [2.0], [0.0], [1.0])
    assert N.transform_inputs(np.array([9.0]))[0] == 2.0
    assert N.inverse_inputs(np.array([2.0]))[0] == 9.0

    D = examples.noise_dataset(lag=2, target_dof=1)
    X, Y = D.part("train")
    assert np.allclose(X.mean(axis=0), 0) and np.allclose(X.std(axis=0), 1)
    assert np.allclose(Y.mean(axis=0), 0) and np.allclose(Y.std(axis=0), 1)
    # validation and test use the training statistics
    assert not np.allclose(D.part("test")[0].mean(axis=0), 0, atol=1e-6)

    raw = denormalize(D)
    want = make_lagged(examples.noise_records(), 2, 1)
    assert np.allclose(raw.inputs, want.inputs) and raw.normalization is None

    with pytest.raises(ValueError):
        normalize(D)


def test_frozen_statistics():
    base = examples.noise_dataset(seed=0)
    other = split(make_lagged(examples.noise_records(seed=1), 2, 1), seed=1)
    D = normalize(other, stats=base.normalization)
    assert D.normalization == base.normalization
    assert np.allclose(D.inputs, (other.inputs - base.normalization.input_mean) / base.normalization.input_std)

    with pytest.raises(ValueError):
        normalize(split(make_lagged(examples.noise_records(seed=1), 3, 1)), stats=base.normalization)


def test_gradient_scale():
    N = Normalization([0, 0], [2.0, 4.0], [0], [8.0])
    assert np.array_equal(N.gradient_scale(), [[4.0, 2.0]])


def test_degenerate_column():
    records = examples.noise_records(k=5, n=50)
    records = [r.with_channels(np.column_stack([np.zeros(50), r.floors])) for r in records]
    with pytest.raises(DegenerateColumn) as e:
        normalize(split(make_lagged(records, 1, 1)))
    assert "base" in str(e.value)


def test_dataset_file(tmp_path):
    D = examples.noise_dataset()
    path = save_dataset(D, tmp_path / "dof1.npz")
    E = load_dataset(path)
    assert np.array_equal(E.inputs, D.inputs) and np.array_equal(E.targets, D.targets)
    assert E.normalization == D.normalization
    assert all(np.array_equal(E.split[p], D.split[p]) for p in D.split)
    assert (E.lag, E.n_channels, E.target_dofs, E.dt, E.state_label) == (
        D.lag, D.n_channels, D.target_dofs, D.dt, D.state_label,
    )

    (tmp_path / "junk.npz").write_bytes(b"not a zip container")
    with pytest.raises(MalformedFile):
        load_dataset(tmp_path / "junk.npz")


if __name__ == "__main__":
    from arsenal import testing_framework

    testing_framework(globals())
