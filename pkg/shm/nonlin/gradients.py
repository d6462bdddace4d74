"""
Input gradients of a trained network, evaluated over a dataset.

For `y = W_out tanh(W_hidden x + b_hidden) + b_out` the Jacobian at `x` is

    ∂y/∂x = W_out · diag(1 - tanh²(W_hidden x + b_hidden)) · W_hidden,

one row per output and one column per lagged input `(channel, lag)`. A model
that is linear in its inputs has the same Jacobian everywhere; the spread of
the gradient samples over a dataset is what the nonlinearity metrics measure.
"""

from pathlib import Path

import numpy as np
import pandas as pd
from arsenal import Integerizer

from shm.nonlin.neuralnet import DimensionMismatch, MlpModel, _check_input, forward
from shm.nonlin.util import MalformedFile, read_json, write_json

GRADIENTS_VERSION = "gradient-samples/1"


class GradientSampleSet:
    """Gradient of one model output at many evaluation points.

    Attributes:
        samples: Array (points, input_dim)
        target_dof: Floor whose acceleration the output predicts
        state_label: State of the evaluation data
        column_labels: `(channel, lag)` of every column
        blocks: Repetition index of every row
        raw: Whether the values are in physical units (otherwise normalised)
    """

    __slots__ = ("samples", "target_dof", "state_label", "column_labels", "blocks", "raw", "columns")

    def __init__(self, samples, target_dof, state_label, column_labels, blocks=None, raw=False):
        self.samples = np.asarray(samples, dtype=float)
        self.target_dof = int(target_dof)
        self.state_label = state_label
        self.column_labels = tuple((str(c), int(k)) for c, k in column_labels)
        self.blocks = (
            np.zeros(len(self.samples), dtype=int) if blocks is None else np.asarray(blocks, dtype=int)
        )
        self.raw = bool(raw)
        self.columns = Integerizer()
        for label in self.column_labels:
            self.columns.add(label)
        assert self.samples.ndim == 2 and self.samples.shape[1] == len(self.column_labels)
        assert len(self.columns) == len(self.column_labels), "duplicate column labels"
        assert self.blocks.shape == (len(self.samples),)
        if not np.all(np.isfinite(self.samples)):
            raise ArithmeticError("non-finite gradient samples")

    def __repr__(self):
        return (
            f"{__class__.__name__}({self.state_label!r}, dof{self.target_dof}, "
            f"{len(self)} points × {self.samples.shape[1]} inputs)"
        )

    def __len__(self):
        return len(self.samples)

    @property
    def header(self):
        return [f"{c}@{k}" for c, k in self.column_labels]

    def column(self, channel, lag):
        "Samples of the derivative with respect to `channel` at `lag`."
        label = (channel, lag)
        if label not in self.column_labels:
            raise KeyError(label)
        return self.samples[:, self.columns(label)]

    def select(self, rows):
        return GradientSampleSet(
            self.samples[rows],
            self.target_dof,
            self.state_label,
            self.column_labels,
            blocks=self.blocks[rows],
            raw=self.raw,
        )

    def by_block(self):
        "Split into one sample set per repetition block."
        return {int(b): self.select(self.blocks == b) for b in np.unique(self.blocks)}


def input_gradient(model, input):
    """Analytic input gradient at a single point.

    Returns:
        A vector for a single-output model, else an (outputs × inputs) matrix
    """
    x = _check_input(model, input)
    if x.ndim != 1:
        raise DimensionMismatch(f"input_gradient takes one input vector, got shape {x.shape}")
    slope = 1 - np.tanh(model.weights_hidden @ x + model.bias_hidden) ** 2
    J = (model.weights_out * slope) @ model.weights_hidden
    return J[0] if model.output_dim == 1 else J


def fd_gradient(f, input, step=1e-4):
    """Central finite-difference gradient of `f` at `input`.

    Args:
        f: An `MlpModel` or any callable of one vector
        input: Evaluation point
        step: Difference step `h > 0`
    """
    if not step > 0:
        raise ValueError(f"step must be > 0, got {step}")
    if isinstance(f, MlpModel):
        model = f
        f = lambda x: forward(model, x)  # noqa: E731
    x = np.asarray(input, dtype=float)
    columns = []
    for j in range(len(x)):
        e = np.zeros_like(x)
        e[j] = step
        columns.append((np.asarray(f(x + e), dtype=float) - np.asarray(f(x - e), dtype=float)) / (2 * step))
    J = np.stack(columns, axis=-1)
    if J.ndim == 2 and J.shape[0] == 1:
        return J[0]
    return J


def _subsample(rows, max_points):
    if max_points is None or len(rows) <= max_points:
        return rows
    if max_points < 1:
        raise ValueError(f"max_points must be >= 1, got {max_points}")
    return rows[np.unique(np.linspace(0, len(rows) - 1, max_points).round().astype(int))]


def gradient_field(model, data, part=None, raw=False, max_points=None, output=0):
    """Input gradient of one model output at every row of a dataset.

    Args:
        model: Trained `MlpModel`
        data: `LaggedDataset` the model was fitted to (same scaling)
        part: Split part to evaluate on; all rows when None
        raw: Convert to physical units with the dataset's normalisation
        max_points: Evenly thin the evaluation points down to this many
        output: Which model output to differentiate

    Returns:
        `GradientSampleSet` whose rows follow the dataset's row order
    """
    if model.input_dim != data.input_dim or model.output_dim != data.output_dim:
        raise DimensionMismatch(f"{model!r} does not fit {data!r}")
    if not 0 <= output < model.output_dim:
        raise DimensionMismatch(f"output {output} of a {model.output_dim}-output model")
    rows = _subsample(data.rows(part), max_points)
    slope = 1 - np.tanh(data.inputs[rows] @ model.weights_hidden.T + model.bias_hidden) ** 2
    G = (slope * model.weights_out[output]) @ model.weights_hidden
    if raw and data.normalization is not None:
        G = G * data.normalization.gradient_scale()[output]
    return GradientSampleSet(
        G,
        data.target_dofs[output],
        data.state_label,
        data.column_labels,
        blocks=data.blocks[rows],
        raw=raw or data.normalization is None,
    )


def save_gradients(grads, path):
    "Write a sample set as delimited text (one column per `channel@lag`) plus a JSON sidecar."
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    df = pd.DataFrame(grads.samples, columns=grads.header)
    df.insert(0, "block", grads.blocks)
    df.to_csv(path, index=False, float_format="%.17g")
    write_json(
        path.with_suffix(".json"),
        dict(
            version=GRADIENTS_VERSION,
            target_dof=grads.target_dof,
            state_label=grads.state_label,
            column_labels=[list(x) for x in grads.column_labels],
            raw=grads.raw,
        ),
    )
    return path


def load_gradients(path):
    "Inverse of `save_gradients`."
    path = Path(path)
    meta = read_json(path.with_suffix(".json"))
    if meta.get("version") != GRADIENTS_VERSION:
        raise MalformedFile(
            path, f"gradient set version {meta.get('version')!r}, expected {GRADIENTS_VERSION!r}"
        )
    try:
        df = pd.read_csv(path)
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise MalformedFile(path, str(e)) from e
    labels = [tuple(x) for x in meta["column_labels"]]
    want = ["block"] + [f"{c}@{k}" for c, k in labels]
    if list(df.columns) != want:
        raise MalformedFile(path, f"header {list(df.columns)}, expected {want}", "row 1")
    values = df[want[1:]].to_numpy(dtype=float)
    bad = np.flatnonzero(~np.all(np.isfinite(values), axis=1))
    if len(bad):
        raise MalformedFile(path, "non-finite or missing value", f"row {bad[0] + 2}")
    return GradientSampleSet(
        values,
        meta["target_dof"],
        meta["state_label"],
        labels,
        blocks=df["block"].to_numpy(dtype=int),
        raw=meta["raw"],
    )
