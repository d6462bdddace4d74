"""
Distribution statistics of gradient samples.

The nonlinearity metrics are moment averages over the input columns of a
gradient sample set: mean standard deviation, mean skewness and mean inverse
(Pearson) kurtosis. The kernel density estimate is for display only; metrics
always come from the raw samples.
"""

import enum

import numpy as np
import pandas as pd
from scipy.integrate import trapezoid
from scipy.stats import iqr

from shm.nonlin.gradients import gradient_field
from shm.nonlin.neuralnet import part_nmse
from shm.nonlin.util import display_table, format_table, text_table

MIN_SAMPLES = 4
KDE_GRID_SIZE = 512


class DegenerateSamples(ArithmeticError):
    pass


class Moment(str, enum.Enum):
    STD = "std"
    SKEWNESS = "skewness"
    KURTOSIS = "kurtosis"
    INVERSE_KURTOSIS = "inverse_kurtosis"


# moments carried in reports and tables
REPORTED = (Moment.STD, Moment.SKEWNESS, Moment.INVERSE_KURTOSIS)


def moments(samples):
    """Population standard deviation, skewness `m3 / m2^1.5` and kurtosis `m4 / m2²`.

    Constant samples give a standard deviation of exactly 0 and NaN for the
    two higher moments, which are undefined.

    Raises:
        DegenerateSamples: With fewer than four samples
    """
    x = np.asarray(samples, dtype=float).ravel()
    if len(x) < MIN_SAMPLES:
        raise DegenerateSamples(f"need at least {MIN_SAMPLES} samples, got {len(x)}")
    if np.ptp(x) == 0:
        return 0.0, np.nan, np.nan
    d = x - x.mean()
    m2 = np.mean(d**2)
    if m2 == 0:
        return 0.0, np.nan, np.nan
    m3 = np.mean(d**3)
    m4 = np.mean(d**4)
    return float(np.sqrt(m2)), float(m3 / m2**1.5), float(m4 / m2**2)


def silverman_bandwidth(samples):
    "Rule-of-thumb Gaussian-kernel bandwidth `0.9 min(σ̂, IQR/1.34) n^(-1/5)`."
    x = np.asarray(samples, dtype=float).ravel()
    if len(x) < 2 or np.ptp(x) == 0:
        raise DegenerateSamples(f"cannot pick a bandwidth for {len(x)} samples with no spread")
    sigma = np.std(x, ddof=1)
    spread = iqr(x) / 1.34
    if spread > 0:
        sigma = min(sigma, spread)
    return 0.9 * sigma * len(x) ** -0.2


class KdeCurve:
    """Gaussian kernel density estimate on a uniform grid.

    Attributes:
        grid: Ascending abscissae
        density: Estimated density at `grid`
        bandwidth: Kernel standard deviation
    """

    __slots__ = ("grid", "density", "bandwidth")

    def __init__(self, grid, density, bandwidth):
        self.grid = np.asarray(grid, dtype=float)
        self.density = np.asarray(density, dtype=float)
        self.bandwidth = float(bandwidth)
        assert self.grid.shape == self.density.shape and self.bandwidth > 0

    def __repr__(self):
        return f"{__class__.__name__}({len(self.grid)} points, h={self.bandwidth:.4g})"

    def integral(self):
        return trapezoid(self.density, self.grid)

    def to_frame(self):
        return pd.DataFrame({"x": self.grid, "density": self.density})


def kde(samples, grid_size=KDE_GRID_SIZE, chunk=64):
    "Silverman-bandwidth Gaussian KDE over `[min - 4h, max + 4h]`."
    x = np.asarray(samples, dtype=float).ravel()
    h = silverman_bandwidth(x)
    grid = np.linspace(x.min() - 4 * h, x.max() + 4 * h, grid_size)
    density = np.empty(grid_size)
    for a in range(0, grid_size, chunk):
        z = (grid[a : a + chunk, None] - x[None, :]) / h
        density[a : a + chunk] = np.exp(-0.5 * z**2).sum(axis=1)
    density /= len(x) * h * np.sqrt(2 * np.pi)
    return KdeCurve(grid, density, h)


class DistributionStats:
    """Per-column moments of a gradient sample set.

    Attributes:
        column_labels: `(channel, lag)` per column
        std, skewness, kurtosis, inverse_kurtosis: Arrays, one entry per column
        n_samples: Rows the moments were computed from
    """

    __slots__ = ("column_labels", "std", "skewness", "kurtosis", "inverse_kurtosis", "n_samples")

    def __init__(self, column_labels, std, skewness, kurtosis, n_samples):
        self.column_labels = tuple(column_labels)
        self.std = np.asarray(std, dtype=float)
        self.skewness = np.asarray(skewness, dtype=float)
        self.kurtosis = np.asarray(kurtosis, dtype=float)
        self.inverse_kurtosis = 1 / self.kurtosis
        self.n_samples = int(n_samples)

    def __getitem__(self, moment):
        return getattr(self, Moment(moment).value)

    def to_frame(self):
        return pd.DataFrame(
            {m.value: self[m] for m in Moment},
            index=[f"{c}@{k}" for c, k in self.column_labels],
        )


def distribution_stats(grads):
    cols = [moments(grads.samples[:, j]) for j in range(grads.samples.shape[1])]
    std, skew, kurt = zip(*cols)
    return DistributionStats(grads.column_labels, std, skew, kurt, len(grads))


def metric(grads, moment=Moment.INVERSE_KURTOSIS):
    """Average of the selected moment over all input columns.

    Raises:
        DegenerateSamples: If the moment is undefined for some column
    """
    moment = Moment(moment)
    values = distribution_stats(grads)[moment]
    if not np.all(np.isfinite(values)):
        bad = [f"{c}@{k}" for (c, k), v in zip(grads.column_labels, values) if not np.isfinite(v)]
        raise DegenerateSamples(f"{moment.value} undefined for constant column(s) {bad} of {grads!r}")
    return float(np.mean(values))


class StateMetricReport:
    """Nonlinearity metrics of one state.

    Attributes:
        state_label: State the report describes
        target_dofs: Floors with a model
        metrics: `{dof: {Moment: value}}`
        nmse: `{dof: (train, validation, test)}` NMSE of the models, if known
    """

    __slots__ = ("state_label", "target_dofs", "metrics", "nmse")

    def __init__(self, state_label, metrics, nmse=None):
        self.state_label = state_label
        self.metrics = {int(d): {Moment(m): float(v) for m, v in ms.items()} for d, ms in metrics.items()}
        self.target_dofs = tuple(sorted(self.metrics))
        self.nmse = {} if nmse is None else {int(d): tuple(map(float, v)) for d, v in nmse.items()}
        assert all(np.isfinite(v) for ms in self.metrics.values() for v in ms.values())

    def __repr__(self):
        return f"{__class__.__name__}({self.state_label!r}, dofs={self.target_dofs})"

    def floor_average(self, moment=Moment.INVERSE_KURTOSIS):
        return float(np.mean([self.metrics[d][Moment(moment)] for d in self.target_dofs]))

    def per_dof(self, moment=Moment.INVERSE_KURTOSIS):
        return np.array([self.metrics[d][Moment(moment)] for d in self.target_dofs])

    def localization(self, moment=Moment.INVERSE_KURTOSIS):
        "Floor with the largest metric."
        return self.target_dofs[int(np.argmax(self.per_dof(moment)))]

    def _rows(self):
        moments_ = sorted({m for ms in self.metrics.values() for m in ms}, key=list(Moment).index)
        headings = ["moment"] + [f"dof{d}" for d in self.target_dofs] + ["average"]
        rows = [
            [m.value] + [self.metrics[d][m] for d in self.target_dofs] + [self.floor_average(m)]
            for m in moments_
        ]
        return rows, headings

    def __str__(self):
        rows, headings = self._rows()
        return f"{self.state_label}\n{text_table(rows, headings)}"

    def _repr_html_(self):
        rows, headings = self._rows()
        return f"<b>{self.state_label}</b>" + format_table(rows, headings)


def show_reports(reports):
    "Notebook view of several states side by side."
    return display_table([reports], headings=[r.state_label for r in reports])


def report_from_gradients(state_label, grads, nmse=None, moments_=REPORTED):
    "Assemble a `StateMetricReport` from one gradient sample set per floor."
    metrics = {g.target_dof: {m: metric(g, m) for m in moments_} for g in grads}
    return StateMetricReport(state_label, metrics, nmse)


def state_report(models, data, part=None, max_points=None, raw=False, moments_=REPORTED):
    """Metrics of one state from its per-floor models and datasets.

    Args:
        models: One trained `MlpModel` per floor
        data: Matching normalised, split `LaggedDataset` per floor
        part: Split part to take gradient samples from (all rows if None)
        max_points: Optional cap on evaluation points per floor
        raw: Take gradients in physical units
    """
    assert len(models) == len(data), (len(models), len(data))
    grads = [gradient_field(m, d, part=part, raw=raw, max_points=max_points) for m, d in zip(models, data)]
    nmse = {}
    for m, d in zip(models, data):
        if d.split is not None:
            nmse[d.target_dofs[0]] = tuple(part_nmse(m, d, p) for p in ("train", "validation", "test"))
    label = data[0].state_label if data else ""
    return report_from_gradients(label, grads, nmse, moments_)


def metric_table(reports):
    """One row per state: per-floor metrics, floor averages and NMSE.

    Columns are `<moment>_dof<d>`, `<moment>_mean` and `nmse_<part>_dof<d>`.
    """
    records = []
    for r in reports:
        row = {"state": r.state_label}
        for m in sorted({m for ms in r.metrics.values() for m in ms}, key=list(Moment).index):
            for d in r.target_dofs:
                row[f"{m.value}_dof{d}"] = r.metrics[d][m]
            row[f"{m.value}_mean"] = r.floor_average(m)
        for d, triple in sorted(r.nmse.items()):
            for p, v in zip(("train", "validation", "test"), triple):
                row[f"nmse_{p}_dof{d}"] = v
        records.append(row)
    return pd.DataFrame.from_records(records).set_index("state")


def write_metric_table(table, path):
    table.to_csv(path, float_format="%.10e")
    return path


def replicate_metrics(grads, moment=Moment.INVERSE_KURTOSIS):
    """Metric of every repetition block separately.

    Args:
        grads: One `GradientSampleSet` per floor, sharing their block indices
        moment: Which metric

    Returns:
        DataFrame indexed by block with one column per floor and their mean
    """
    records = {}
    for g in grads:
        for b, part in g.by_block().items():
            records.setdefault(b, {})[f"dof{g.target_dof}"] = metric(part, moment)
    df = pd.DataFrame.from_dict(records, orient="index").sort_index()
    df.index.name = "block"
    df["mean"] = df.mean(axis=1)
    return df


def detection_threshold(replicates, k=3.0):
    """`mean + k σ` of per-replicate values (sample standard deviation).

    Returns:
        Threshold per column of `replicates`
    """
    if len(replicates) < 2:
        raise DegenerateSamples(f"need at least 2 replicates for a threshold, got {len(replicates)}")
    return replicates.mean() + k * replicates.std(ddof=1)
