"""
Synthetic shear-building simulator with an optional contact (bumper) or cubic spring.

The building is a chain of `n_dof` lumped floor masses joined by storey springs
and dashpots, standing on a base whose acceleration is the input. The state is
integrated in coordinates relative to the base,

    M ü + C u̇ + K u + f(u, u̇) = -M 1 a_g(t),

and the floor channels of a record are absolute accelerations ü + a_g, which
only depend on (u, u̇) and are evaluated from the equation of motion at the
sample instants.

Floors are numbered 1..n_dof; index 0 denotes the ground (base).
"""

import enum
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import pandas as pd

from shm.nonlin.util import MalformedFile, read_json, write_json

RECORD_VERSION = "timeseries-record/1"

# integration substeps per output sample
SUBSTEPS = 10

# abort when |u| exceeds this multiple of the static displacement scale
DIVERGENCE_FACTOR = 1e3


class IntegrationDiverged(ArithmeticError):
    """The integrated state left the admissible range (unstable parameters)."""


class NonlinearityKind(str, enum.Enum):
    BUMPER = "bumper"
    CUBIC = "cubic"


class ExcitationKind(str, enum.Enum):
    WHITE_NOISE_BASE = "white_noise_base"
    SINE_BASE = "sine_base"


@dataclass(frozen=True)
class NonlinearityConfig:
    """Nonlinear element attached between two DOFs.

    Args:
        kind: `NonlinearityKind.BUMPER` or `NonlinearityKind.CUBIC`
        location: Pair `(i, j)`; the force is driven by `u_i - u_j` and acts on
            `i` (and with opposite sign on `j` unless `j` is the ground, 0)
        gap: Initial clearance of the bumper in metres (may be `inf`)
        contact_stiffness: Bumper stiffness in N/m
        cubic_coefficient: Duffing coefficient in N/m³
    """

    kind: NonlinearityKind
    location: tuple
    gap: float = 0.0
    contact_stiffness: float = 0.0
    cubic_coefficient: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "kind", NonlinearityKind(self.kind))
        location = tuple(int(i) for i in self.location)
        object.__setattr__(self, "location", location)
        if len(location) != 2:
            raise ValueError(f"location must be a pair of DOF indices, got {location}")
        i, j = location
        if i == j or i < 0 or j < 0:
            raise ValueError(f"location indices must be distinct and >= 0, got {location}")
        if self.kind == NonlinearityKind.BUMPER:
            if not self.gap >= 0:
                raise ValueError(f"gap must be >= 0, got {self.gap}")
            if not self.contact_stiffness > 0:
                raise ValueError(
                    f"contact_stiffness must be > 0, got {self.contact_stiffness}"
                )
        elif not np.isfinite(self.cubic_coefficient):
            raise ValueError(f"cubic_coefficient must be finite, got {self.cubic_coefficient}")

    @classmethod
    def bumper(cls, gap, contact_stiffness, location=(3, 2)):
        return cls(NonlinearityKind.BUMPER, location, gap=gap, contact_stiffness=contact_stiffness)

    @classmethod
    def cubic(cls, coefficient, location=(1, 0)):
        return cls(NonlinearityKind.CUBIC, location, cubic_coefficient=coefficient)

    def check(self, n_dof):
        for i in self.location:
            if i > n_dof:
                raise ValueError(
                    f"nonlinearity location {self.location} refers to DOF {i} "
                    f"but the structure has {n_dof}"
                )


@dataclass(frozen=True)
class StructureConfig:
    """Lumped-mass shear building.

    Storey `s` (1-based) connects floor `s` to floor `s - 1`, floor 0 being the
    ground, so `stiffnesses[0]` and `damping[0]` belong to the first storey.
    """

    masses: tuple
    stiffnesses: tuple
    damping: tuple
    nonlinearity: NonlinearityConfig | None = None

    def __post_init__(self):
        for name in ("masses", "stiffnesses", "damping"):
            object.__setattr__(self, name, tuple(float(x) for x in getattr(self, name)))
        n = len(self.masses)
        if n < 1:
            raise ValueError("a structure needs at least one DOF")
        if len(self.stiffnesses) != n or len(self.damping) != n:
            raise ValueError(
                f"masses, stiffnesses and damping must have equal length, got "
                f"{n}, {len(self.stiffnesses)}, {len(self.damping)}"
            )
        if min(self.masses) <= 0:
            raise ValueError(f"masses must be > 0, got {self.masses}")
        if min(self.stiffnesses) <= 0:
            raise ValueError(f"stiffnesses must be > 0, got {self.stiffnesses}")
        if min(self.damping) < 0:
            raise ValueError(f"damping must be >= 0, got {self.damping}")
        if self.nonlinearity is not None:
            self.nonlinearity.check(n)

    @classmethod
    def shear_building(cls, n_dof=3, mass=5.0, stiffness=1.7e5, damping=50.0, nonlinearity=None):
        "Uniform building with identical floors and storeys."
        return cls((mass,) * n_dof, (stiffness,) * n_dof, (damping,) * n_dof, nonlinearity)

    @property
    def n_dof(self):
        return len(self.masses)

    def replace(self, **changes):
        return replace(self, **changes)

    @property
    def mass_matrix(self):
        return np.diag(self.masses)

    @property
    def stiffness_matrix(self):
        return _chain_matrix(self.stiffnesses)

    @property
    def damping_matrix(self):
        return _chain_matrix(self.damping)


def _chain_matrix(values):
    n = len(values)
    A = np.zeros((n, n))
    for s, k in enumerate(values):
        A[s, s] += k
        if s > 0:
            A[s - 1, s - 1] += k
            A[s, s - 1] -= k
            A[s - 1, s] -= k
    return A


@dataclass(frozen=True)
class ExcitationConfig:
    """Base acceleration input.

    Args:
        rms_amplitude: RMS base acceleration in m/s²
        seed: Seed of the white-noise generator
        duration: Length of the record in seconds
        sampling_frequency: Output sampling frequency in Hz
        kind: White-noise or sinusoidal base motion
        frequency: Sine frequency in Hz (`SINE_BASE` only)
    """

    rms_amplitude: float = 1.0
    seed: int = 0
    duration: float = 25.6
    sampling_frequency: float = 320.0
    kind: ExcitationKind = ExcitationKind.WHITE_NOISE_BASE
    frequency: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", ExcitationKind(self.kind))
        if not self.rms_amplitude > 0:
            raise ValueError(f"rms_amplitude must be > 0, got {self.rms_amplitude}")
        if not self.duration > 0:
            raise ValueError(f"duration must be > 0, got {self.duration}")
        if not self.sampling_frequency > 0:
            raise ValueError(f"sampling_frequency must be > 0, got {self.sampling_frequency}")
        if self.kind == ExcitationKind.SINE_BASE:
            if self.frequency is None or not 0 < self.frequency < self.sampling_frequency / 2:
                raise ValueError(
                    f"sine frequency must lie in (0, {self.sampling_frequency / 2}) Hz, "
                    f"got {self.frequency}"
                )

    @property
    def dt(self):
        return 1 / self.sampling_frequency

    @property
    def n_samples(self):
        return int(round(self.duration * self.sampling_frequency))

    def replace(self, **changes):
        return replace(self, **changes)

    def base_signal(self):
        "Base acceleration at the sample instants."
        if self.kind == ExcitationKind.SINE_BASE:
            t = np.arange(self.n_samples) * self.dt
            return self.rms_amplitude * np.sqrt(2) * np.sin(2 * np.pi * self.frequency * t)
        rng = np.random.default_rng(self.seed)
        return self.rms_amplitude * rng.standard_normal(self.n_samples)


class TimeSeriesRecord:
    """Multi-channel acceleration history.

    Column 0 is the base channel, columns 1..n_dof are the floors (m/s²).

    Attributes:
        channels: Array of shape (n_samples, n_dof + 1)
        dt: Seconds per sample
        state_label: Name of the structural state the record was taken in
        repetition: Index of the repetition within that state
        seed: Excitation seed, if known
    """

    __slots__ = ("channels", "dt", "state_label", "repetition", "seed")

    def __init__(self, channels, dt, state_label="", repetition=0, seed=None):
        channels = np.asarray(channels, dtype=float)
        if channels.ndim != 2 or channels.shape[1] < 2:
            raise ValueError(
                f"channels must be a (time, base + floors) matrix, got shape {channels.shape}"
            )
        if not dt > 0:
            raise ValueError(f"dt must be > 0, got {dt}")
        if not np.all(np.isfinite(channels)):
            raise ValueError("channels contain non-finite values")
        self.channels = channels
        self.dt = float(dt)
        self.state_label = state_label
        self.repetition = int(repetition)
        self.seed = seed

    def __repr__(self):
        return (
            f"{__class__.__name__}({self.state_label!r}, rep={self.repetition}, "
            f"{len(self)} samples, {self.n_dof} DOF)"
        )

    def __len__(self):
        return self.channels.shape[0]

    @property
    def n_dof(self):
        return self.channels.shape[1] - 1

    @property
    def channel_names(self):
        return ["base"] + [f"dof{i}" for i in range(1, self.n_dof + 1)]

    @property
    def base(self):
        return self.channels[:, 0]

    @property
    def floors(self):
        return self.channels[:, 1:]

    @property
    def time(self):
        return np.arange(len(self)) * self.dt

    def with_channels(self, channels):
        return TimeSeriesRecord(channels, self.dt, self.state_label, self.repetition, self.seed)


def nonlinear_force(relative_displacement, relative_velocity, cfg):
    """Force of the nonlinear element for a given relative motion.

    The bumper is one-sided and purely elastic: it only engages once the
    relative displacement exceeds the gap. Works elementwise on arrays.

    Args:
        relative_displacement: `u_i - u_j` in metres
        relative_velocity: `u̇_i - u̇_j` in m/s (unused by both elements)
        cfg: A `NonlinearityConfig`

    Returns:
        Force in Newtons acting on DOF `i`
    """
    d = np.asarray(relative_displacement, dtype=float)
    if cfg.kind == NonlinearityKind.BUMPER:
        # with an infinite gap `d - gap` is -inf and the force is exactly 0
        return cfg.contact_stiffness * np.maximum(0.0, d - cfg.gap)
    return cfg.cubic_coefficient * d**3


def restoring_force(u, v, cfg):
    "Nodal force vector(s) of the nonlinear element; `u`, `v` have shape (..., n_dof)."
    i, j = cfg.location
    d = u[..., i - 1] - (u[..., j - 1] if j else 0.0)
    dv = v[..., i - 1] - (v[..., j - 1] if j else 0.0)
    F = nonlinear_force(d, dv, cfg)
    f = np.zeros_like(u)
    f[..., i - 1] += F
    if j:
        f[..., j - 1] -= F
    return f


class _Dynamics:
    "Right-hand side of the first-order equations of motion."

    def __init__(self, structure):
        self.n = structure.n_dof
        self.inv_m = 1 / np.asarray(structure.masses)
        self.MK = self.inv_m[:, None] * structure.stiffness_matrix
        self.MC = self.inv_m[:, None] * structure.damping_matrix
        self.nl = structure.nonlinearity

    def absolute_acceleration(self, u, v):
        a = -(u @ self.MK.T) - (v @ self.MC.T)
        if self.nl is not None:
            a -= self.inv_m * restoring_force(u, v, self.nl)
        return a

    def __call__(self, x, ag):
        u = x[..., : self.n]
        v = x[..., self.n :]
        return np.concatenate((v, self.absolute_acceleration(u, v) - np.asarray(ag)[..., None]), axis=-1)


def integrate(structure, base_half, h, *, initial_state=None, sample_every=1, bound=np.inf):
    """Fixed-step 4th-order Runge-Kutta on the state `x = (u, u̇)`.

    Several independent runs of the same structure are integrated together
    when `base_half` has a second axis.

    Args:
        structure: A `StructureConfig`
        base_half: Base acceleration at every half substep, shape `(2 S + 1,)`
            or `(2 S + 1, runs)`; `2 S + 1` values drive `S` substeps
        h: Substep length in seconds
        initial_state: Optional initial `(u, u̇)` of length `2 n_dof`, shared
            by all runs or one row per run
        sample_every: Keep every `sample_every`-th substep state
        bound: Largest admissible |u| before `IntegrationDiverged` is raised;
            a scalar or one value per run

    Returns:
        Array of kept states, the initial state first, shape
        `(samples, 2 n_dof)` or `(samples, runs, 2 n_dof)`
    """
    f = _Dynamics(structure)
    n = structure.n_dof
    base_half = np.asarray(base_half, dtype=float)
    runs = base_half.shape[1:]
    n_steps = (len(base_half) - 1) // 2
    assert n_steps % sample_every == 0, (n_steps, sample_every)
    x = np.zeros(runs + (2 * n,))
    if initial_state is not None:
        x[...] = np.asarray(initial_state, dtype=float)
    out = np.empty((n_steps // sample_every + 1,) + x.shape)
    out[0] = x
    for s in range(n_steps):
        a0, a1, a2 = base_half[2 * s], base_half[2 * s + 1], base_half[2 * s + 2]
        k1 = f(x, a0)
        k2 = f(x + 0.5 * h * k1, a1)
        k3 = f(x + 0.5 * h * k2, a1)
        k4 = f(x + h * k3, a2)
        x = x + (h / 6) * (k1 + 2 * k2 + 2 * k3 + k4)
        if (s + 1) % sample_every == 0:
            bad = ~np.all(np.isfinite(x), axis=-1) | (np.max(np.abs(x[..., :n]), axis=-1) > bound)
            if np.any(bad):
                where = f" in run {int(np.flatnonzero(bad)[0])}" if runs else ""
                raise IntegrationDiverged(
                    f"state exceeded {np.max(bound):.3g} m{where} after {(s + 1) * h:.4g} s"
                )
            out[(s + 1) // sample_every] = x
    return out


def static_scale(structure, amplitude):
    "Peak floor displacement under a static base acceleration of `amplitude`."
    load = np.asarray(structure.masses) * amplitude
    return float(np.max(np.abs(np.linalg.solve(structure.stiffness_matrix, load))))


def mechanical_energy(structure, states):
    "Kinetic plus elastic energy of each state row (relative coordinates)."
    n = structure.n_dof
    u = states[..., :n]
    v = states[..., n:]
    E = 0.5 * np.einsum("...i,i,...i->...", v, np.asarray(structure.masses), v)
    E = E + 0.5 * np.einsum("...i,ij,...j->...", u, structure.stiffness_matrix, u)
    nl = structure.nonlinearity
    if nl is not None:
        i, j = nl.location
        d = u[..., i - 1] - (u[..., j - 1] if j else 0.0)
        if nl.kind == NonlinearityKind.BUMPER:
            E = E + 0.5 * nl.contact_stiffness * np.maximum(0.0, d - nl.gap) ** 2
        else:
            E = E + 0.25 * nl.cubic_coefficient * d**4
    return E


def _half_step_base(excitation, substeps, base_acceleration):
    n = excitation.n_samples
    dt = excitation.dt
    t = np.arange((n - 1) * substeps * 2 + 1) * (dt / substeps / 2)
    if base_acceleration is not None:
        samples = np.asarray(base_acceleration, dtype=float)
        if samples.shape != (n,):
            raise ValueError(f"base_acceleration must have shape ({n},), got {samples.shape}")
        return np.interp(t, np.arange(n) * dt, samples)
    if excitation.kind == ExcitationKind.SINE_BASE:
        A = excitation.rms_amplitude * np.sqrt(2)
        return A * np.sin(2 * np.pi * excitation.frequency * t)
    return np.interp(t, np.arange(n) * dt, excitation.base_signal())


def simulate(
    structure,
    excitation,
    *,
    base_acceleration=None,
    initial_state=None,
    substeps=SUBSTEPS,
    state_label="",
    repetition=0,
):
    """Simulate the base-excited building and record base plus floor accelerations.

    White-noise base samples are linearly interpolated between sample
    instants; a sine excitation is evaluated exactly at every RK4 stage.

    Args:
        structure: A `StructureConfig`
        excitation: An `ExcitationConfig`
        base_acceleration: Optional array of `excitation.n_samples` base
            accelerations replacing the generated signal (zeros give the
            equilibrium run)
        initial_state: Optional `(u, u̇)` at t = 0
        substeps: RK4 substeps per output sample
        state_label: Label stored on the record
        repetition: Repetition index stored on the record

    Returns:
        (TimeSeriesRecord): Channels `base, dof1, ..., dofN`

    Raises:
        IntegrationDiverged: If |u| exceeds `DIVERGENCE_FACTOR` times the
            static displacement scale
    """
    [record] = simulate_batch(
        structure,
        [excitation],
        base_accelerations=None if base_acceleration is None else [base_acceleration],
        initial_state=initial_state,
        substeps=substeps,
        state_label=state_label,
        repetitions=[repetition],
    )
    return record


def simulate_batch(
    structure,
    excitations,
    *,
    base_accelerations=None,
    initial_state=None,
    substeps=SUBSTEPS,
    state_label="",
    repetitions=None,
):
    """`simulate` for several excitations of one structure, integrated together.

    All excitations must share duration and sampling frequency.

    Returns:
        One `TimeSeriesRecord` per excitation, labelled with `repetitions`
        (default `0, 1, ...`)
    """
    excitations = list(excitations)
    assert excitations, "need at least one excitation"
    assert len({(e.n_samples, e.dt) for e in excitations}) == 1, "excitations differ in length or rate"
    if repetitions is None:
        repetitions = range(len(excitations))
    if base_accelerations is None:
        base_accelerations = [None] * len(excitations)
    base_half = np.column_stack(
        [_half_step_base(e, substeps, b) for e, b in zip(excitations, base_accelerations)]
    )
    n = structure.n_dof

    scale = np.array([static_scale(structure, float(np.max(np.abs(b), initial=0.0))) for b in base_half.T])
    if initial_state is not None:
        scale = np.maximum(scale, float(np.max(np.abs(np.asarray(initial_state)[:n]))))
    bound = np.where(scale > 0, DIVERGENCE_FACTOR * scale, np.inf)

    dt = excitations[0].dt
    states = integrate(
        structure,
        base_half,
        dt / substeps,
        initial_state=initial_state,
        sample_every=substeps,
        bound=bound,
    )
    floors = _Dynamics(structure).absolute_acceleration(states[..., :n], states[..., n:])
    base = base_half[:: 2 * substeps]
    return [
        TimeSeriesRecord(
            np.column_stack([base[:, k], floors[:, k]]),
            dt,
            state_label=state_label,
            repetition=rep,
            seed=e.seed,
        )
        for k, (e, rep) in enumerate(zip(excitations, repetitions))
    ]


def transmissibility(structure, omega):
    """Steady-state absolute floor acceleration per unit harmonic base acceleration.

    Only the linear part of the structure is used.

    Args:
        structure: A `StructureConfig`
        omega: Angular frequency in rad/s

    Returns:
        Complex array of length `n_dof`
    """
    M = structure.mass_matrix
    D = structure.stiffness_matrix - omega**2 * M + 1j * omega * structure.damping_matrix
    U = np.linalg.solve(D, -np.asarray(structure.masses, dtype=complex))
    return 1 - omega**2 * U


def add_measurement_noise(record, snr_db, seed):
    """Add zero-mean Gaussian sensor noise to every channel.

    The noise variance of each channel is its signal variance divided by
    `10 ** (snr_db / 10)`; `snr_db = inf` disables the noise.
    """
    if np.isposinf(snr_db):
        return record.with_channels(record.channels.copy())
    rng = np.random.default_rng(seed)
    noise_std = np.sqrt(record.channels.var(axis=0) / 10 ** (snr_db / 10))
    noise = rng.standard_normal(record.channels.shape) * noise_std
    return record.with_channels(record.channels + noise)


def save_record(record, path):
    """Write `record` as delimited text plus a JSON sidecar (`.json` next to it).

    Returns:
        The path of the delimited file
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    df = pd.DataFrame(record.channels, columns=record.channel_names)
    df.insert(0, "t", record.time)
    df.to_csv(path, index=False, float_format="%.17g")
    write_json(
        path.with_suffix(".json"),
        dict(
            version=RECORD_VERSION,
            dt=record.dt,
            n_dof=record.n_dof,
            state_label=record.state_label,
            repetition=record.repetition,
            seed=record.seed,
        ),
    )
    return path


def load_record(path):
    "Inverse of `save_record`."
    path = Path(path)
    meta = read_json(path.with_suffix(".json"))
    if meta.get("version") != RECORD_VERSION:
        raise MalformedFile(
            path, f"record version {meta.get('version')!r}, expected {RECORD_VERSION!r}"
        )
    missing = [k for k in ("dt", "n_dof", "state_label", "repetition") if k not in meta]
    if missing:
        raise MalformedFile(path.with_suffix(".json"), f"missing key(s) {missing}", f"key {missing[0]!r}")
    try:
        df = pd.read_csv(path)
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise MalformedFile(path, str(e)) from e
    want = ["t", "base"] + [f"dof{i}" for i in range(1, int(meta["n_dof"]) + 1)]
    if list(df.columns) != want:
        raise MalformedFile(path, f"header {list(df.columns)}, expected {want}", "row 1")
    values = df[want[1:]].to_numpy(dtype=float)
    bad = np.flatnonzero(~np.all(np.isfinite(values), axis=1))
    if len(bad):
        raise MalformedFile(path, "non-finite or missing value", f"row {bad[0] + 2}")
    return TimeSeriesRecord(
        values,
        meta["dt"],
        state_label=meta["state_label"],
        repetition=meta["repetition"],
        seed=meta.get("seed"),
    )


def import_delimited(
    path,
    *,
    sampling_frequency=None,
    delimiter=",",
    time_column=True,
    header="infer",
    state_label="",
    repetition=0,
):
    """Read measured accelerations from an arbitrary delimited file.

    Columns must be ordered base first, then floors 1..n, optionally preceded
    by a time column from which the sampling interval is taken.

    Args:
        path: File to read
        sampling_frequency: Hz; required when there is no time column
        delimiter: Column separator
        time_column: Whether the first column holds time stamps in seconds
        header: Passed to `pandas.read_csv` (`None` for header-less files)
        state_label: Label for the record
        repetition: Repetition index for the record
    """
    try:
        df = pd.read_csv(path, sep=delimiter, header=header)
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise MalformedFile(path, str(e)) from e
    values = df.to_numpy(dtype=float)
    if time_column:
        t, values = values[:, 0], values[:, 1:]
        dt = float(np.median(np.diff(t)))
    elif sampling_frequency is not None:
        dt = 1 / sampling_frequency
    else:
        raise ValueError("sampling_frequency is required when there is no time column")
    bad = np.flatnonzero(~np.all(np.isfinite(values), axis=1))
    if len(bad):
        raise MalformedFile(path, "non-finite or missing value", f"data row {bad[0] + 1}")
    return TimeSeriesRecord(values, dt, state_label=state_label, repetition=repetition)
