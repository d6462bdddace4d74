"""
Supervised one-step-ahead datasets built from acceleration records.

Row `t` of a dataset maps the lagged accelerations of every channel (base
included, as the forcing of the floors above it) to the acceleration of the
target floor(s) at `t`. Input columns are ordered lag-major:

    [ch_0(t-1), ..., ch_C(t-1), ch_0(t-2), ..., ch_C(t-l)]
"""

import zipfile

import numpy as np

from shm.nonlin.util import MalformedFile

DATASET_VERSION = "lagged-dataset/1"

PARTS = ("train", "validation", "test")


class RecordTooShort(ValueError):
    pass


class LayoutMismatch(ValueError):
    pass


class TooFewRepetitions(ValueError):
    pass


class DegenerateColumn(ArithmeticError):
    pass


class Normalization:
    """Per-column affine scaling learned from a training part.

    Attributes:
        input_mean, input_std: Arrays of length `input_dim`
        target_mean, target_std: Arrays of length `output_dim`
    """

    __slots__ = ("input_mean", "input_std", "target_mean", "target_std")

    def __init__(self, input_mean, input_std, target_mean, target_std):
        self.input_mean = np.asarray(input_mean, dtype=float)
        self.input_std = np.asarray(input_std, dtype=float)
        self.target_mean = np.asarray(target_mean, dtype=float)
        self.target_std = np.asarray(target_std, dtype=float)

    def __repr__(self):
        return f"{__class__.__name__}(inputs={len(self.input_mean)}, targets={len(self.target_mean)})"

    def __eq__(self, other):
        return isinstance(other, Normalization) and all(
            np.array_equal(getattr(self, k), getattr(other, k)) for k in self.__slots__
        )

    def transform_inputs(self, X):
        return (X - self.input_mean) / self.input_std

    def transform_targets(self, Y):
        return (Y - self.target_mean) / self.target_std

    def inverse_inputs(self, X):
        return X * self.input_std + self.input_mean

    def inverse_targets(self, Y):
        return Y * self.target_std + self.target_mean

    def gradient_scale(self):
        "Chain-rule factor (output × input) turning normalised gradients into raw ones."
        return self.target_std[:, None] / self.input_std[None, :]

    def to_dict(self):
        return {k: getattr(self, k).tolist() for k in self.__slots__}

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: d[k] for k in cls.__slots__})


class LaggedDataset:
    """Lagged input/target pairs with repetition bookkeeping.

    Attributes:
        inputs: Array (rows, lag × n_channels)
        targets: Array (rows, number of target DOFs)
        lag: Number of past time steps per input
        n_channels: Channels per time step (base + floors)
        target_dofs: Floor indices (1-based) of the target columns
        blocks: Per-row index of the source record; a repetition block
        dt: Sampling interval of the source records
        state_label: State the records were taken in
        normalization: `Normalization` if the values are scaled, else None
        split: Dict part name → sorted row indices, or None
    """

    __slots__ = (
        "inputs",
        "targets",
        "lag",
        "n_channels",
        "target_dofs",
        "blocks",
        "dt",
        "state_label",
        "normalization",
        "split",
    )

    def __init__(
        self,
        inputs,
        targets,
        lag,
        n_channels,
        target_dofs,
        blocks,
        dt,
        state_label="",
        normalization=None,
        split=None,
    ):
        self.inputs = np.asarray(inputs, dtype=float)
        self.targets = np.asarray(targets, dtype=float)
        self.lag = int(lag)
        self.n_channels = int(n_channels)
        self.target_dofs = tuple(int(d) for d in target_dofs)
        self.blocks = np.asarray(blocks, dtype=int)
        self.dt = float(dt)
        self.state_label = state_label
        self.normalization = normalization
        self.split = split
        assert self.inputs.shape[1] == self.lag * self.n_channels, self.inputs.shape
        assert self.targets.shape == (len(self.inputs), len(self.target_dofs))
        assert self.blocks.shape == (len(self.inputs),)

    def __repr__(self):
        return (
            f"{__class__.__name__}({self.state_label!r}, {len(self)} rows, lag={self.lag}, "
            f"targets={self.target_dofs}, normalized={self.normalization is not None})"
        )

    def __len__(self):
        return len(self.inputs)

    @property
    def input_dim(self):
        return self.inputs.shape[1]

    @property
    def output_dim(self):
        return self.targets.shape[1]

    @property
    def channel_names(self):
        return ["base"] + [f"dof{i}" for i in range(1, self.n_channels)]

    @property
    def column_labels(self):
        "(channel, lag) pair of every input column."
        return [(c, k) for k in range(1, self.lag + 1) for c in self.channel_names]

    def replace(self, **changes):
        kw = {k: getattr(self, k) for k in self.__slots__}
        kw.update(changes)
        return LaggedDataset(**kw)

    def rows(self, part=None):
        "Row indices of a split part, or of every row when `part` is None."
        if part is None:
            return np.arange(len(self))
        if self.split is None:
            raise ValueError(f"dataset has no split; cannot select part {part!r}")
        return self.split[part]

    def part(self, name=None):
        "`(inputs, targets)` of a split part."
        r = self.rows(name)
        return self.inputs[r], self.targets[r]


def make_lagged(records, lag, target_dof):
    """Window acceleration records into a one-step-ahead dataset.

    Every record is windowed independently, so no sample straddles two
    records, and contributes `len(record) - lag` rows.

    Args:
        records: Sequence of `TimeSeriesRecord` sharing channel layout and dt
        lag: Number of past steps per input (>= 1)
        target_dof: Floor index (1-based), or a sequence of them for a
            multi-output dataset

    Raises:
        RecordTooShort: If a record has no more than `lag` samples
        LayoutMismatch: If the records differ in channel count or dt
    """
    if lag < 1:
        raise ValueError(f"lag must be >= 1, got {lag}")
    records = list(records)
    if not records:
        raise ValueError("no records to window")
    first = records[0]
    C = first.channels.shape[1]
    for r in records[1:]:
        if r.channels.shape[1] != C or r.dt != first.dt:
            raise LayoutMismatch(
                f"{r!r} has {r.channels.shape[1]} channels at dt={r.dt}, "
                f"expected {C} channels at dt={first.dt}"
            )
    target_dofs = (target_dof,) if np.isscalar(target_dof) else tuple(target_dof)
    for d in target_dofs:
        if not 1 <= d <= C - 1:
            raise ValueError(f"target DOF {d} is not a floor of a {C - 1}-DOF record")

    X, Y, B = [], [], []
    for b, r in enumerate(records):
        T = len(r)
        if T <= lag:
            raise RecordTooShort(f"{r!r} has {T} samples; lag {lag} needs more than {lag}")
        X.append(np.hstack([r.channels[lag - k : T - k] for k in range(1, lag + 1)]))
        Y.append(r.channels[lag:, list(target_dofs)])
        B.append(np.full(T - lag, b))

    return LaggedDataset(
        np.vstack(X),
        np.vstack(Y),
        lag,
        C,
        target_dofs,
        np.concatenate(B),
        first.dt,
        state_label=first.state_label,
    )


def largest_remainder(fractions, n):
    "Apportion `n` items to `fractions` by the largest-remainder rule."
    raw = np.asarray(fractions, dtype=float) * n
    counts = np.floor(raw + 1e-9).astype(int)
    extra = n - counts.sum()
    if extra > 0:
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:extra]] += 1
    return counts


def split(dataset, fractions=(0.6, 0.2, 0.2), seed=0):
    """Partition the rows into train/validation/test by whole repetitions.

    Repetition blocks are shuffled with `seed` and dealt out in contiguous
    runs sized by the largest-remainder rule.

    Raises:
        TooFewRepetitions: If a part would receive no repetition
    """
    f = np.asarray(fractions, dtype=float)
    if f.shape != (3,) or np.any(f < 0) or abs(f.sum() - 1) > 1e-9:
        raise ValueError(f"fractions must be three non-negative numbers summing to 1, got {fractions}")
    blocks = np.unique(dataset.blocks)
    counts = largest_remainder(f, len(blocks))
    if counts.min() == 0:
        raise TooFewRepetitions(
            f"{len(blocks)} repetitions split as {dict(zip(PARTS, counts.tolist()))} "
            f"for fractions {tuple(fractions)}; every part needs at least one"
        )
    order = np.random.default_rng(seed).permutation(blocks)
    edges = np.concatenate([[0], np.cumsum(counts)])
    parts = {}
    for name, a, b in zip(PARTS, edges[:-1], edges[1:]):
        parts[name] = np.flatnonzero(np.isin(dataset.blocks, order[a:b]))
    return dataset.replace(split=parts)


def _check_columns(values, labels, what):
    std = values.std(axis=0)
    bad = np.flatnonzero((np.ptp(values, axis=0) == 0) | (std == 0))
    if len(bad):
        raise DegenerateColumn(
            f"zero training variance in {what} column(s) {[labels[i] for i in bad]}"
        )
    return values.mean(axis=0), std


def normalize(dataset, stats=None):
    """Scale every column to `(x - mean_train) / std_train`.

    Args:
        dataset: A split, unnormalised `LaggedDataset`
        stats: Optional `Normalization` to reuse (e.g. frozen baseline
            statistics); computed from the training part when omitted

    Raises:
        DegenerateColumn: If a training column has zero variance
    """
    if dataset.normalization is not None:
        raise ValueError(f"{dataset!r} is already normalised")
    if stats is None:
        train = dataset.rows("train")
        if len(train) == 0:
            raise ValueError("the training part is empty")
        mx, sx = _check_columns(dataset.inputs[train], dataset.column_labels, "input")
        my, sy = _check_columns(
            dataset.targets[train], [f"dof{d}" for d in dataset.target_dofs], "target"
        )
        stats = Normalization(mx, sx, my, sy)
    elif len(stats.input_mean) != dataset.input_dim or len(stats.target_mean) != dataset.output_dim:
        raise ValueError(
            f"statistics for {len(stats.input_mean)} → {len(stats.target_mean)} columns "
            f"do not fit {dataset!r}"
        )
    return dataset.replace(
        inputs=stats.transform_inputs(dataset.inputs),
        targets=stats.transform_targets(dataset.targets),
        normalization=stats,
    )


def denormalize(dataset):
    "Undo `normalize`."
    stats = dataset.normalization
    if stats is None:
        return dataset
    return dataset.replace(
        inputs=stats.inverse_inputs(dataset.inputs),
        targets=stats.inverse_targets(dataset.targets),
        normalization=None,
    )


def save_dataset(dataset, path):
    "Persist to a `.npz` container tagged with `DATASET_VERSION`."
    arrays = dict(
        version=np.array(DATASET_VERSION),
        inputs=dataset.inputs,
        targets=dataset.targets,
        lag=np.array(dataset.lag),
        n_channels=np.array(dataset.n_channels),
        target_dofs=np.array(dataset.target_dofs),
        blocks=dataset.blocks,
        dt=np.array(dataset.dt),
        state_label=np.array(dataset.state_label),
    )
    if dataset.normalization is not None:
        for k in Normalization.__slots__:
            arrays[f"norm_{k}"] = getattr(dataset.normalization, k)
    if dataset.split is not None:
        for name in PARTS:
            arrays[f"split_{name}"] = dataset.split[name]
    with open(path, "wb") as f:
        np.savez(f, **arrays)
    return path


def load_dataset(path):
    "Inverse of `save_dataset`."
    try:
        with np.load(path, allow_pickle=False) as z:
            a = {k: z[k] for k in z.files}
    except (zipfile.BadZipFile, ValueError, OSError, EOFError) as e:
        raise MalformedFile(path, f"unreadable container ({e})") from e
    version = str(a.get("version"))
    if version != DATASET_VERSION:
        raise MalformedFile(path, f"dataset version {version!r}, expected {DATASET_VERSION!r}")
    try:
        normalization = None
        if "norm_input_mean" in a:
            normalization = Normalization(*(a[f"norm_{k}"] for k in Normalization.__slots__))
        parts = None
        if "split_train" in a:
            parts = {name: a[f"split_{name}"] for name in PARTS}
        return LaggedDataset(
            a["inputs"],
            a["targets"],
            int(a["lag"]),
            int(a["n_channels"]),
            a["target_dofs"].tolist(),
            a["blocks"],
            float(a["dt"]),
            state_label=str(a["state_label"]),
            normalization=normalization,
            split=parts,
        )
    except KeyError as e:
        raise MalformedFile(path, "missing array", f"key {e}") from e
