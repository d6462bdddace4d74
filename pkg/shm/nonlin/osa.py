import numpy as np

from shm.nonlin.dataset import make_lagged
from shm.nonlin.neuralnet import forward, nmse, predict


class OSAPredictor:
    """One-step-ahead model of a multi-channel acceleration record.

    An OSA model predicts the floor accelerations at time t from the measured
    channels at t-1 ... t-lag:

        ŷ_d(t) = f_d(z(t-1), ..., z(t-lag))

    with one network `f_d` per modelled floor `d`. Each network works in the
    scaled space of the dataset it was fitted to; the predictor maps records in
    and out of that space with the network's own `normalization`.

    Args:
        models: Dict floor → single-output `MlpModel`
        lag: Number of past samples each network reads
        n_channels: Channels per sample (base + floors)

    Attributes:
        models: Floor → model
        lag: Input lag
        n_channels: Channels per sample
    """

    def __init__(self, models, lag, n_channels):
        self.models = dict(sorted(models.items()))
        self.lag = lag
        self.n_channels = n_channels
        for d, m in self.models.items():
            assert 1 <= d < n_channels, d
            assert m.input_dim == lag * n_channels and m.output_dim == 1, m

    def __repr__(self):
        return f"{__class__.__name__}(dofs={list(self.models)}, lag={self.lag})"

    @property
    def target_dofs(self):
        return tuple(self.models)

    def __call__(self, record):
        """NMSE (%) of the one-step-ahead prediction of each modelled floor.

        Args:
            record: `TimeSeriesRecord`

        Returns:
            Dict floor → NMSE
        """
        P, Y = self.predict(record)
        return {d: nmse(P[:, i], Y[:, i]) for i, d in enumerate(self.models)}

    def _evaluate(self, model, X):
        N = model.normalization
        if N is None:
            return predict(model, X)[:, 0]
        return N.inverse_targets(predict(model, N.transform_inputs(X)))[:, 0]

    def predict_next(self, history):
        """Predicted floor accelerations following `history`.

        Args:
            history: Array (lag, n_channels), oldest sample first

        Returns:
            Vector with one prediction per modelled floor
        """
        history = np.asarray(history, dtype=float)
        assert history.shape == (self.lag, self.n_channels), history.shape
        x = history[::-1].ravel()
        out = []
        for m in self.models.values():
            N = m.normalization
            if N is None:
                out.append(forward(m, x)[0])
            else:
                out.append(N.inverse_targets(forward(m, N.transform_inputs(x)))[0])
        return np.array(out)

    def predict(self, record):
        """One-step-ahead predictions over a whole record.

        Returns:
            `(predictions, measured)`, both arrays (len(record) - lag, n_models)
        """
        data = make_lagged([record], self.lag, self.target_dofs)
        P = np.column_stack([self._evaluate(m, data.inputs) for m in self.models.values()])
        return P, data.targets

    def free_run(self, record):
        """Model-predicted output: feed the predictions back in place of the measured floors.

        The base channel, and any floor without a model, keeps its measured
        values; the first `lag` samples seed the recursion.

        Returns:
            `(predictions, measured)`, both arrays (len(record) - lag, n_models)
        """
        Z = np.array(record.channels, dtype=float)
        dofs = list(self.models)
        for t in range(self.lag, len(Z)):
            Z[t, dofs] = self.predict_next(Z[t - self.lag : t])
        return Z[self.lag :, dofs], record.channels[self.lag :, dofs]

    def free_run_nmse(self, record):
        P, Y = self.free_run(record)
        return {d: nmse(P[:, i], Y[:, i]) for i, d in enumerate(self.models)}
