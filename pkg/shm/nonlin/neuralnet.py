"""
One-hidden-layer feedforward regression network in plain numpy.

The model is `y = W_out tanh(W_hidden x + b_hidden) + b_out`, trained by
mini-batch gradient descent with momentum on

    mean((ŷ - y)²) + l2_weight * (|W_hidden|² + |W_out|²)

with early stopping on the validation loss.
"""

from dataclasses import dataclass

import numpy as np
from arsenal import colors

from shm.nonlin.dataset import Normalization
from shm.nonlin.util import MalformedFile, read_json, write_json

MODEL_VERSION = "mlp-model/1"

# NMSE (%) under which a fit counts as good
FIT_CRITERION = 5.0


class DimensionMismatch(ValueError):
    pass


class NonFiniteLoss(ArithmeticError):
    pass


class DegenerateTargets(ArithmeticError):
    pass


class NMSEExceeded(UserWarning):
    pass


class MlpModel:
    """Parameters of a tanh-hidden, linear-output network.

    Attributes:
        weights_hidden: Array (hidden_dim, input_dim)
        bias_hidden: Array (hidden_dim,)
        weights_out: Array (output_dim, hidden_dim)
        bias_out: Array (output_dim,)
        l2_weight: Weight-decay coefficient the model was trained with
        normalization: `Normalization` of the data the model was fitted on
            (inputs and outputs of the model live in that scaled space), or None
    """

    __slots__ = (
        "weights_hidden",
        "bias_hidden",
        "weights_out",
        "bias_out",
        "l2_weight",
        "normalization",
    )

    hidden_activation = "tanh"
    output_activation = "linear"

    def __init__(
        self,
        weights_hidden,
        bias_hidden,
        weights_out,
        bias_out,
        l2_weight=1e-4,
        normalization=None,
    ):
        self.weights_hidden = np.array(weights_hidden, dtype=float, ndmin=2)
        self.bias_hidden = np.array(bias_hidden, dtype=float, ndmin=1)
        self.weights_out = np.array(weights_out, dtype=float, ndmin=2)
        self.bias_out = np.array(bias_out, dtype=float, ndmin=1)
        self.l2_weight = float(l2_weight)
        self.normalization = normalization
        H, D = self.weights_hidden.shape
        O = self.weights_out.shape[0]
        if self.bias_hidden.shape != (H,) or self.weights_out.shape != (O, H) or self.bias_out.shape != (O,):
            raise DimensionMismatch(
                f"inconsistent parameter shapes {self.weights_hidden.shape}, "
                f"{self.bias_hidden.shape}, {self.weights_out.shape}, {self.bias_out.shape}"
            )
        if not all(np.all(np.isfinite(p)) for p in self.params):
            raise ValueError("model parameters must be finite")
        if self.l2_weight < 0:
            raise ValueError(f"l2_weight must be >= 0, got {self.l2_weight}")

    def __repr__(self):
        return (
            f"{__class__.__name__}({self.input_dim}-{self.hidden_dim}-{self.output_dim}, "
            f"l2={self.l2_weight:g})"
        )

    @classmethod
    def init(cls, input_dim, hidden_dim=100, output_dim=1, l2_weight=1e-4, seed=0):
        "Scaled uniform initialisation, ±sqrt(6 / (fan_in + fan_out)) per layer, zero biases."
        rng = np.random.default_rng(seed)
        a = np.sqrt(6 / (input_dim + hidden_dim))
        b = np.sqrt(6 / (hidden_dim + output_dim))
        return cls(
            rng.uniform(-a, a, (hidden_dim, input_dim)),
            np.zeros(hidden_dim),
            rng.uniform(-b, b, (output_dim, hidden_dim)),
            np.zeros(output_dim),
            l2_weight=l2_weight,
        )

    @property
    def input_dim(self):
        return self.weights_hidden.shape[1]

    @property
    def hidden_dim(self):
        return self.weights_hidden.shape[0]

    @property
    def output_dim(self):
        return self.weights_out.shape[0]

    @property
    def params(self):
        return (self.weights_hidden, self.bias_hidden, self.weights_out, self.bias_out)

    def copy(self, **changes):
        kw = dict(
            l2_weight=self.l2_weight,
            normalization=self.normalization,
        )
        kw.update(changes)
        return MlpModel(*(p.copy() for p in self.params), **kw)

    def __call__(self, X):
        return predict(self, X)


def _check_input(model, x):
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != model.input_dim:
        raise DimensionMismatch(f"{model!r} expects {model.input_dim} inputs, got {x.shape[-1]}")
    return x


def predict(model, X):
    "Batched forward pass; rows of `X` are inputs."
    X = _check_input(model, X)
    return np.tanh(X @ model.weights_hidden.T + model.bias_hidden) @ model.weights_out.T + model.bias_out


def forward(model, input):
    "Network output for a single input vector."
    x = _check_input(model, input)
    if x.ndim != 1:
        raise DimensionMismatch(f"forward takes one input vector, got shape {x.shape}")
    return model.weights_out @ np.tanh(model.weights_hidden @ x + model.bias_hidden) + model.bias_out


def objective(model, X, Y, l2_weight):
    "Training objective: mean-square error plus weight decay."
    R = predict(model, X) - Y
    return np.mean(R**2) + l2_weight * (
        np.sum(model.weights_hidden**2) + np.sum(model.weights_out**2)
    )


def loss_and_grad(model, X, Y, l2_weight):
    """Objective and its gradient by backpropagation.

    Returns:
        `(loss, (dW_hidden, db_hidden, dW_out, db_out))`
    """
    W1, b1, W2, b2 = model.params
    H = np.tanh(X @ W1.T + b1)
    R = H @ W2.T + b2 - Y
    loss = np.mean(R**2) + l2_weight * (np.sum(W1**2) + np.sum(W2**2))
    dP = 2 * R / R.size
    gW2 = dP.T @ H + 2 * l2_weight * W2
    gb2 = dP.sum(axis=0)
    dZ = (dP @ W2) * (1 - H**2)
    gW1 = dZ.T @ X + 2 * l2_weight * W1
    gb1 = dZ.sum(axis=0)
    return loss, (gW1, gb1, gW2, gb2)


def nmse(predictions, targets):
    """Normalised mean-square error in percent.

    `100 * Σ(ŷ - y)² / (N σ_y²)` with the population variance of the
    targets; 100% is what predicting the mean achieves.

    Raises:
        DegenerateTargets: If the targets have zero variance
    """
    p = np.asarray(predictions, dtype=float).ravel()
    y = np.asarray(targets, dtype=float).ravel()
    if p.shape != y.shape or len(y) < 2:
        raise ValueError(f"need two equal-length vectors of >= 2 values, got {p.shape}, {y.shape}")
    var = np.var(y)
    if var == 0:
        raise DegenerateTargets("targets have zero variance")
    return 100 * np.mean((p - y) ** 2) / var


@dataclass(frozen=True)
class TrainConfig:
    max_epochs: int = 2000
    batch_size: int = 256
    learning_rate: float = 1e-3
    l2_weight: float = 1e-4
    patience: int = 50
    seed: int = 0
    momentum: float = 0.9

    def __post_init__(self):
        if self.max_epochs < 0:
            raise ValueError(f"max_epochs must be >= 0, got {self.max_epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.l2_weight < 0:
            raise ValueError(f"l2_weight must be >= 0, got {self.l2_weight}")
        if self.patience < 1 or (self.max_epochs > 0 and self.patience > self.max_epochs):
            raise ValueError(f"patience must lie in [1, max_epochs], got {self.patience}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")


class FitReport:
    """Outcome of a training run.

    Attributes:
        nmse_train, nmse_validation, nmse_test: NMSE (%) of the returned model,
            averaged over outputs
        epochs_run: Number of epochs performed
        best_epoch: Epoch of the returned snapshot (0 = initial parameters)
        loss_history: Per-epoch `(training objective, validation MSE)`
    """

    __slots__ = ("nmse_train", "nmse_validation", "nmse_test", "epochs_run", "best_epoch", "loss_history")

    def __init__(self, nmse_train, nmse_validation, nmse_test, epochs_run=0, best_epoch=0, loss_history=()):
        self.nmse_train = float(nmse_train)
        self.nmse_validation = float(nmse_validation)
        self.nmse_test = float(nmse_test)
        self.epochs_run = int(epochs_run)
        self.best_epoch = int(best_epoch)
        self.loss_history = [tuple(map(float, x)) for x in loss_history]

    def __repr__(self):
        return (
            f"{__class__.__name__}(train={self.nmse_train:.3f}%, "
            f"validation={self.nmse_validation:.3f}%, test={self.nmse_test:.3f}%, "
            f"epochs={self.epochs_run})"
        )

    @property
    def nmse(self):
        return (self.nmse_train, self.nmse_validation, self.nmse_test)

    def passes(self, criterion=FIT_CRITERION):
        return max(self.nmse) < criterion

    def to_dict(self):
        return {k: getattr(self, k) for k in self.__slots__}

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: d[k] for k in cls.__slots__})


def part_nmse(model, data, part):
    "NMSE (%) of `model` on a split part, averaged over outputs."
    X, Y = data.part(part)
    P = predict(model, X)
    return float(np.mean([nmse(P[:, o], Y[:, o]) for o in range(Y.shape[1])]))


def train(model, data, cfg, verbose=0):
    """Fit `model` to a normalised, split dataset.

    Training starts from the given parameters (which are not modified) and
    returns the snapshot with the lowest validation loss.

    Args:
        model: Initial `MlpModel`
        data: Normalised `LaggedDataset` with a train/validation/test split
        cfg: `TrainConfig`
        verbose: Print progress every `verbose` epochs (0 = silent)

    Returns:
        `(MlpModel, FitReport)`

    Raises:
        DimensionMismatch: If the model does not fit the dataset
        NonFiniteLoss: If the objective stops being finite
    """
    if data.normalization is None:
        raise ValueError(f"{data!r} must be normalised before training")
    if model.input_dim != data.input_dim or model.output_dim != data.output_dim:
        raise DimensionMismatch(f"{model!r} does not fit {data!r}")

    Xtr, Ytr = data.part("train")
    Xva, Yva = data.part("validation")
    rng = np.random.default_rng(cfg.seed)

    current = model.copy(l2_weight=cfg.l2_weight, normalization=data.normalization)
    params = current.params
    velocity = [np.zeros_like(p) for p in params]

    best = current.copy()
    best_val = np.mean((predict(current, Xva) - Yva) ** 2)
    best_epoch = 0
    history = []
    wait = 0
    epoch = 0
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(len(Xtr))
        for start in range(0, len(Xtr), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            loss, grads = loss_and_grad(current, Xtr[idx], Ytr[idx], cfg.l2_weight)
            if not np.isfinite(loss):
                raise NonFiniteLoss(f"epoch {epoch}: mini-batch loss is {loss}")
            for p, v, g in zip(params, velocity, grads):
                v *= cfg.momentum
                v -= cfg.learning_rate * g
                p += v

        train_loss = objective(current, Xtr, Ytr, cfg.l2_weight)
        val_loss = np.mean((predict(current, Xva) - Yva) ** 2)
        if not (np.isfinite(train_loss) and np.isfinite(val_loss)):
            raise NonFiniteLoss(f"epoch {epoch}: training loss {train_loss}, validation loss {val_loss}")
        history.append((train_loss, val_loss))

        if val_loss < best_val:
            best, best_val, best_epoch, wait = current.copy(), val_loss, epoch, 0
        else:
            wait += 1

        if verbose and epoch % verbose == 0:
            print(
                colors.light.blue % f"epoch {epoch:5d}",
                f"train {train_loss:.4e}  validation {val_loss:.4e}  best@{best_epoch}",
            )
        if wait >= cfg.patience:
            break

    report = FitReport(
        part_nmse(best, data, "train"),
        part_nmse(best, data, "validation"),
        part_nmse(best, data, "test"),
        epochs_run=epoch,
        best_epoch=best_epoch,
        loss_history=history,
    )
    return best, report


def recalibrate(baseline, data_new_state, cfg, verbose=0):
    """Retrain a baseline model on data from a new state, starting from its parameters.

    The new data must be normalised with the baseline statistics so that
    the model's input geometry is unchanged.
    """
    if baseline.normalization is not None and data_new_state.normalization != baseline.normalization:
        raise ValueError(
            f"{data_new_state!r} must be normalised with the baseline model's statistics"
        )
    return train(baseline, data_new_state, cfg, verbose=verbose)


def save_model(model, path, normalization_ref=None):
    """Write `model` as versioned JSON with full-precision parameters.

    Args:
        model: `MlpModel` to persist
        path: Destination file
        normalization_ref: Optional path of the dataset whose statistics the
            model uses, recorded for provenance
    """
    write_json(
        path,
        dict(
            version=MODEL_VERSION,
            input_dim=model.input_dim,
            hidden_dim=model.hidden_dim,
            output_dim=model.output_dim,
            hidden_activation=model.hidden_activation,
            output_activation=model.output_activation,
            l2_weight=model.l2_weight,
            normalization=None if model.normalization is None else model.normalization.to_dict(),
            normalization_ref=None if normalization_ref is None else str(normalization_ref),
            weights_hidden=model.weights_hidden.tolist(),
            bias_hidden=model.bias_hidden.tolist(),
            weights_out=model.weights_out.tolist(),
            bias_out=model.bias_out.tolist(),
        ),
    )
    return path


def load_model(path):
    "Inverse of `save_model`."
    d = read_json(path)
    if not isinstance(d, dict):
        raise MalformedFile(path, "expected a JSON object", "line 1")
    version = d.get("version")
    if version != MODEL_VERSION:
        raise MalformedFile(
            path, f"model version {version!r}, this library reads {MODEL_VERSION!r}", "key 'version'"
        )
    try:
        for tag, want in [
            ("hidden_activation", MlpModel.hidden_activation),
            ("output_activation", MlpModel.output_activation),
        ]:
            if d[tag] != want:
                raise MalformedFile(path, f"unsupported {tag} {d[tag]!r}", f"key {tag!r}")
        normalization = d["normalization"]
        model = MlpModel(
            d["weights_hidden"],
            d["bias_hidden"],
            d["weights_out"],
            d["bias_out"],
            l2_weight=d["l2_weight"],
            normalization=None if normalization is None else Normalization.from_dict(normalization),
        )
    except KeyError as e:
        raise MalformedFile(path, "missing field", f"key {e}") from e
    except (DimensionMismatch, ValueError, TypeError) as e:
        if isinstance(e, MalformedFile):
            raise
        raise MalformedFile(path, str(e), "parameter arrays") from e
    if (model.input_dim, model.hidden_dim, model.output_dim) != (d["input_dim"], d["hidden_dim"], d["output_dim"]):
        raise MalformedFile(path, "parameter shapes disagree with the declared dimensions", "key 'input_dim'")
    return model
