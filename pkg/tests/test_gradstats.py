import numpy as np
import pandas as pd
import pytest
from scipy import stats as sps

import examples
from shm.nonlin.gradients import GradientSampleSet, gradient_field
from shm.nonlin.gradstats import (
    DegenerateSamples,
    Moment,
    StateMetricReport,
    detection_threshold,
    distribution_stats,
    kde,
    metric,
    metric_table,
    moments,
    replicate_metrics,
    report_from_gradients,
    show_reports,
    silverman_bandwidth,
    state_report,
    write_metric_table,
)
from shm.nonlin.neuralnet import MlpModel

labels = [("base", 1), ("dof1", 1)]


def test_moments_of_normal_samples():
    x = np.random.default_rng(0).standard_normal(100_000)
    std, skew, kurt = moments(x)
    assert std == pytest.approx(1, abs=0.02)
    assert abs(skew) < 0.03
    assert kurt == pytest.approx(3, abs=0.1)


def streaming_moments(xs):
    "Central moments by one-pass updates."
    n = mean = M2 = M3 = M4 = 0.0
    for x in xs:
        n1 = n
        n += 1
        delta = x - mean
        dn = delta / n
        term = delta * dn * n1
        mean += dn
        M4 += term * dn**2 * (n * n - 3 * n + 3) + 6 * dn**2 * M2 - 4 * dn * M3
        M3 += term * dn * (n - 2) - 3 * dn * M2
        M2 += term
    return np.sqrt(M2 / n), np.sqrt(n) * M3 / M2**1.5, n * M4 / M2**2


def test_moments_agree_with_scipy():
    x = np.random.default_rng(1).exponential(size=500)
    std, skew, kurt = moments(x)
    assert std == pytest.approx(np.std(x), rel=1e-10)
    assert skew == pytest.approx(sps.skew(x), rel=1e-10)
    assert kurt == pytest.approx(sps.kurtosis(x, fisher=False), rel=1e-10)
    assert (std, skew, kurt) == pytest.approx(streaming_moments(x), rel=1e-10)


def test_moments_edge_cases():
    std, skew, kurt = moments([-1, 1, -1, 1])
    assert (std, skew, kurt) == (1.0, 0.0, 1.0)

    std, skew, kurt = moments(np.full(10, 3.0))
    assert std == 0 and np.isnan(skew) and np.isnan(kurt)

    with pytest.raises(DegenerateSamples):
        moments([1.0, 2.0, 3.0])


def test_metric():
    rng = np.random.default_rng(2)
    g = GradientSampleSet(
        np.column_stack([rng.standard_normal(1000), 2 * rng.uniform(-1, 1, 1000)]), 1, "s", labels
    )
    s = distribution_stats(g)
    assert np.allclose(s.inverse_kurtosis, 1 / s.kurtosis)
    assert metric(g, Moment.STD) == pytest.approx(np.mean(s.std))
    assert metric(g) == pytest.approx(np.mean(1 / s.kurtosis))
    # uniform samples have kurtosis 9/5
    assert s.kurtosis[1] == pytest.approx(1.8, abs=0.1)
    assert list(s.to_frame().index) == ["base@1", "dof1@1"]

    flat = GradientSampleSet(np.column_stack([np.ones(10), np.arange(10.0)]), 1, "s", labels)
    assert metric(flat, Moment.STD) == pytest.approx(np.std(np.arange(10.0)) / 2)
    with pytest.raises(DegenerateSamples):
        metric(flat, Moment.INVERSE_KURTOSIS)


def test_silverman_bandwidth():
    x = np.random.default_rng(0).standard_normal(1000)
    assert silverman_bandwidth(x) == pytest.approx(0.226, abs=0.01)
    with pytest.raises(DegenerateSamples):
        silverman_bandwidth(np.zeros(5))


def test_kde():
    x = np.random.default_rng(3).standard_normal(300)
    c = kde(x, grid_size=257)
    assert len(c.grid) == 257
    assert c.grid[0] == pytest.approx(x.min() - 4 * c.bandwidth)
    assert c.integral() == pytest.approx(1, abs=1e-3)
    assert np.all(c.density >= 0)

    # brute-force kernel sum
    h = c.bandwidth
    want = np.array(
        [np.mean(np.exp(-0.5 * ((g - x) / h) ** 2)) / (h * np.sqrt(2 * np.pi)) for g in c.grid]
    )
    assert np.max(np.abs(c.density - want)) <= 1e-12

    frame = c.to_frame()
    assert list(frame.columns) == ["x", "density"]


def test_report():
    r = StateMetricReport(
        "gap",
        {
            1: {Moment.STD: 0.1, Moment.INVERSE_KURTOSIS: 0.30},
            2: {Moment.STD: 0.3, Moment.INVERSE_KURTOSIS: 0.32},
            3: {Moment.STD: 0.2, Moment.INVERSE_KURTOSIS: 0.45},
        },
        nmse={1: (0.1, 0.2, 0.3)},
    )
    assert r.floor_average() == pytest.approx((0.30 + 0.32 + 0.45) / 3)
    assert r.floor_average(Moment.STD) == pytest.approx(0.2)
    assert r.localization() == 3
    assert r.localization(Moment.STD) == 2
    text = str(r)
    assert text.startswith("gap") and "inverse_kurtosis" in text
    assert "<table>" in r._repr_html_()
    show_reports([r, r])

    T = metric_table([r])
    assert T.index.name == "state"
    assert T.loc["gap", "inverse_kurtosis_dof3"] == 0.45
    assert T.loc["gap", "std_mean"] == pytest.approx(0.2)
    assert T.loc["gap", "nmse_test_dof1"] == 0.3


def test_state_report():
    models, data = [], []
    for d in (1, 2, 3):
        D = examples.noise_dataset(target_dof=d)
        models.append(MlpModel.init(D.input_dim, 6, seed=d))
        data.append(D)
    r = state_report(models, data, part="test")
    assert r.state_label == "noise"
    assert r.target_dofs == (1, 2, 3)
    assert set(r.metrics[2]) == {Moment.STD, Moment.SKEWNESS, Moment.INVERSE_KURTOSIS}
    assert len(r.nmse[3]) == 3

    g = gradient_field(models[1], data[1], part="test")
    assert r.metrics[2][Moment.INVERSE_KURTOSIS] == pytest.approx(metric(g))

    same = report_from_gradients("noise", [gradient_field(m, D, part="test") for m, D in zip(models, data)])
    assert same.metrics == r.metrics


def test_metric_table_file(tmp_path):
    reports = [
        StateMetricReport(name, {1: {Moment.STD: v, Moment.INVERSE_KURTOSIS: 1 / 3 + v}})
        for name, v in [("baseline", 0.1), ("damaged", 0.2)]
    ]
    T = metric_table(reports)
    path = write_metric_table(T, tmp_path / "metrics.csv")
    back = pd.read_csv(path, index_col="state")
    assert list(back.index) == ["baseline", "damaged"]
    assert np.allclose(back.to_numpy(), T.to_numpy(), rtol=1e-9)


def test_threshold_from_replicates():
    rng = np.random.default_rng(4)
    samples = rng.standard_normal((400, 2))
    g1 = GradientSampleSet(samples, 1, "baseline", labels, blocks=np.repeat(np.arange(4), 100))
    g2 = GradientSampleSet(2 * samples, 2, "baseline", labels, blocks=np.repeat(np.arange(4), 100))
    R = replicate_metrics([g1, g2])
    assert list(R.index) == [0, 1, 2, 3]
    assert list(R.columns) == ["dof1", "dof2", "mean"]
    # kurtosis does not depend on scale
    assert np.allclose(R["dof1"], R["dof2"])
    assert R.loc[2, "dof1"] == pytest.approx(metric(g1.select(g1.blocks == 2)))

    t = detection_threshold(R, k=3.0)
    assert t["mean"] == pytest.approx(R["mean"].mean() + 3 * R["mean"].std(ddof=1))
    with pytest.raises(DegenerateSamples):
        detection_threshold(R.iloc[:1])


if __name__ == "__main__":
    from arsenal import testing_framework

    testing_framework(globals())
