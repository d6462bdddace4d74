"""
Experiment files.

An experiment is described by a YAML file; see `configs/three_storey.yaml`
for a complete example. Every key is checked: unknown keys, wrong types and
inconsistent values raise `ConfigError` naming the dotted field path and the
line it came from.
"""

import hashlib
import json
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import yaml
from frozendict import frozendict

from shm.nonlin.dataset import PARTS, largest_remainder
from shm.nonlin.neuralnet import TrainConfig
from shm.nonlin.simulator import ExcitationConfig, NonlinearityConfig, StructureConfig


class ConfigError(ValueError):
    """Invalid experiment file.

    Attributes:
        field: Dotted path of the offending field (``"states[3].gap"``)
        line: 1-based line number in the file, or None
    """

    def __init__(self, field, message, line=None, source=None):
        self.field = field
        self.message = message
        self.line = line
        self.source = source
        where = f"{source}:" if source else ""
        where += f"{line}: " if line else " " if source else ""
        super().__init__(f"{where}{field}: {message}")


@dataclass(frozen=True)
class StateSpec:
    """One structural state of the roster.

    Attributes:
        name: Unique label, also a directory name
        baseline: Whether this is the reference state
        stiffness_scale: Storey → stiffness factor (storey i joins floors i-1 and i)
        added_mass: Floor → extra mass in kg
        gap: Bumper gap in metres, or None for no bumper
    """

    name: str
    baseline: bool = False
    stiffness_scale: frozendict = field(default_factory=frozendict)
    added_mass: frozendict = field(default_factory=frozendict)
    gap: float = None

    @property
    def is_bumper(self):
        return self.gap is not None

    def structure(self, base, bumper):
        "`StructureConfig` of this state derived from the undamaged `base`."
        stiffnesses = list(base.stiffnesses)
        for i, s in self.stiffness_scale.items():
            stiffnesses[i - 1] *= s
        masses = list(base.masses)
        for i, m in self.added_mass.items():
            masses[i - 1] += m
        nonlinearity = None
        if self.gap is not None:
            nonlinearity = NonlinearityConfig.bumper(
                self.gap, bumper.contact_stiffness, location=bumper.location
            )
        return base.replace(
            masses=tuple(masses), stiffnesses=tuple(stiffnesses), nonlinearity=nonlinearity
        )


@dataclass(frozen=True)
class BumperSettings:
    location: tuple = (3, 2)
    contact_stiffness: float = 1e6


@dataclass(frozen=True)
class AnalysisConfig:
    """Gradient analysis settings.

    Attributes:
        part: Split part to draw gradient samples from; None for every row
        max_points: Optional cap on evaluation points per floor
        raw: Gradients in physical instead of normalised units
        kde: `(state, floor)` pairs to write density curves for
        threshold_sigma: Multiple of the baseline replicate spread that flags a state
    """

    part: str = None
    max_points: int = None
    raw: bool = False
    kde: tuple = ()
    threshold_sigma: float = 3.0


@dataclass(frozen=True)
class ExperimentConfig:
    structure: StructureConfig
    excitation: ExcitationConfig
    states: tuple
    bumper: BumperSettings = BumperSettings()
    repetitions: int = 5
    noise_snr_db: float = np.inf
    lags: tuple = (1, 2, 3, 4)
    hidden_dim: int = 100
    train: TrainConfig = TrainConfig()
    split: tuple = (0.6, 0.2, 0.2)
    seed: int = 0
    workers: int = 1
    output_dir: Path = Path("runs/experiment")
    analysis: AnalysisConfig = AnalysisConfig()
    recalibrate: TrainConfig = None

    def __post_init__(self):
        baselines = [s.name for s in self.states if s.baseline]
        if len(baselines) != 1:
            raise ConfigError("states", f"exactly one baseline state required, got {baselines}")
        names = [s.name for s in self.states]
        if len(set(names)) != len(names):
            raise ConfigError("states", f"duplicate state names in {names}")
        gaps = [s.gap for s in self.states if s.gap is not None]
        if any(b >= a for a, b in zip(gaps, gaps[1:])):
            raise ConfigError("states", f"bumper gaps must be strictly decreasing, got {gaps}")
        n = self.structure.n_dof
        for i, s in enumerate(self.states):
            for k in list(s.stiffness_scale) + list(s.added_mass):
                if not 1 <= k <= n:
                    raise ConfigError(f"states[{i}]", f"index {k} outside 1..{n}")
        for state, dof in self.analysis.kde:
            if state not in names or not 1 <= dof <= n:
                raise ConfigError("analysis.kde", f"unknown state/floor pair ({state!r}, {dof})")

    @property
    def baseline(self):
        return next(s for s in self.states if s.baseline)

    @property
    def recalibration(self):
        "Training settings of the per-state recalibration; those of `train` unless given."
        return self.train if self.recalibrate is None else self.recalibrate

    @property
    def dofs(self):
        return tuple(range(1, self.structure.n_dof + 1))

    def state(self, name):
        for s in self.states:
            if s.name == name:
                return s
        raise KeyError(name)

    def derive_seed(self, *keys):
        """Seed for one task, a function of the master seed and the task's keys.

        String keys are folded in by CRC-32 so seeds do not depend on the
        order of the roster.
        """
        words = [self.seed] + [zlib.crc32(k.encode()) if isinstance(k, str) else int(k) for k in keys]
        return int(np.random.SeedSequence(words).generate_state(1)[0])

    def to_dict(self):
        d = asdict(self)
        d["output_dir"] = str(self.output_dir)
        d["states"] = [
            dict(asdict(s), stiffness_scale=dict(s.stiffness_scale), added_mass=dict(s.added_mass))
            for s in self.states
        ]
        return _jsonable(d)

    def hash(self):
        "SHA-256 of the canonical JSON form, output directory excluded; independent of key order."
        d = self.to_dict()
        del d["output_dir"]
        text = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if hasattr(x, "value") and isinstance(x, str):  # str-valued enums
        return x.value
    if isinstance(x, float) and not np.isfinite(x):
        return repr(x)
    return x


def _node_lines(node, path, out):
    out.setdefault(path, node.start_mark.line + 1)
    if isinstance(node, yaml.MappingNode):
        for k, v in node.value:
            p = f"{path}.{k.value}" if path else str(k.value)
            out[p] = k.start_mark.line + 1
            _node_lines(v, p, out)
    elif isinstance(node, yaml.SequenceNode):
        for i, v in enumerate(node.value):
            _node_lines(v, f"{path}[{i}]", out)


class _Section:
    "Typed access to one mapping of the file; `done()` rejects leftover keys."

    def __init__(self, data, path, reader):
        self.path = path
        self.reader = reader
        if data is None:
            data = {}
        if not isinstance(data, dict):
            reader.fail(path, f"expected a mapping, got {type(data).__name__}")
        self.data = dict(data)

    def _p(self, key):
        return f"{self.path}.{key}" if self.path else key

    def has(self, key):
        return key in self.data

    def get(self, key, kind, default):
        "Typed value of `key`; `default` when absent or null."
        value = self.data.pop(key, None)
        if value is None:
            return default
        return self.reader.coerce(value, kind, self._p(key))

    def section(self, key):
        return _Section(self.data.pop(key, None), self._p(key), self.reader)

    def sequence(self, key, default=()):
        value = self.data.pop(key, None)
        if value is None:
            return default
        if not isinstance(value, list):
            self.reader.fail(self._p(key), f"expected a list, got {type(value).__name__}")
        return value

    def done(self):
        for key in self.data:
            self.reader.fail(self._p(key), "unknown key")


class _Reader:
    def __init__(self, lines, source):
        self.lines = lines
        self.source = source

    def line(self, path):
        "Line of `path`, or of its closest ancestor present in the file."
        while path not in self.lines and path:
            cut = max(path.rfind("."), path.rfind("["))
            path = path[: max(cut, 0)]
        return self.lines.get(path)

    def fail(self, path, message):
        raise ConfigError(path, message, self.line(path), self.source)

    def build(self, path, fn, *args, **kwargs):
        "Call a constructor, reporting its ValueError against `path`."
        try:
            return fn(*args, **kwargs)
        except ConfigError:
            raise
        except ValueError as e:
            self.fail(path, str(e))

    def coerce(self, value, kind, path):
        if kind is float:
            if isinstance(value, str):
                try:
                    return float(value)
                except ValueError:
                    pass
            if isinstance(value, (int, float)) and not isinstance(value, bool):
                return float(value)
        elif kind is int:
            if isinstance(value, int) and not isinstance(value, bool):
                return value
        elif kind is bool:
            if isinstance(value, bool):
                return value
        elif kind is str:
            if isinstance(value, str):
                return value
        else:
            raise AssertionError(kind)
        self.fail(path, f"expected {kind.__name__}, got {value!r}")


def _index_map(reader, value, path, kind=float):
    if value is None:
        return frozendict()
    if not isinstance(value, dict):
        reader.fail(path, f"expected a mapping of index → value, got {value!r}")
    out = {}
    for k, v in value.items():
        if not isinstance(k, int) or isinstance(k, bool):
            reader.fail(f"{path}.{k}", "keys must be integer indices")
        out[k] = reader.coerce(v, kind, f"{path}.{k}")
    return frozendict(sorted(out.items()))


def _train_section(r, t, defaults):
    cfg = r.build(
        t.path,
        TrainConfig,
        max_epochs=t.get("max_epochs", int, defaults.max_epochs),
        batch_size=t.get("batch_size", int, defaults.batch_size),
        learning_rate=t.get("learning_rate", float, defaults.learning_rate),
        l2_weight=t.get("l2_weight", float, defaults.l2_weight),
        patience=t.get("patience", int, defaults.patience),
        momentum=t.get("momentum", float, defaults.momentum),
    )
    t.done()
    return cfg


def parse_config(text, source=None):
    """Build an `ExperimentConfig` from YAML text.

    Raises:
        ConfigError: Naming the field and line of the first problem found
    """
    try:
        node = yaml.compose(text)
        data = yaml.safe_load(text)
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        raise ConfigError("<file>", str(e), None if mark is None else mark.line + 1, source) from e
    lines = {}
    if node is not None:
        _node_lines(node, "", lines)
    r = _Reader(lines, source)
    top = _Section(data, "", r)

    s = top.section("structure")
    masses = s.sequence("masses", None)
    stiffnesses = s.sequence("stiffnesses", None)
    # one value for every storey or a per-storey list
    damping = s.data.pop("damping", None)
    if damping is None:
        damping = 50.0
    uniform_damping = 50.0 if isinstance(damping, list) else r.coerce(damping, float, "structure.damping")
    n_dof = s.get("n_dof", int, 3)
    structure = r.build(
        "structure",
        StructureConfig.shear_building,
        n_dof=n_dof,
        mass=s.get("mass", float, 5.0),
        stiffness=s.get("stiffness", float, 1.7e5),
        damping=uniform_damping,
    )
    changes = {}
    if masses is not None:
        changes["masses"] = tuple(r.coerce(m, float, f"structure.masses[{i}]") for i, m in enumerate(masses))
    if stiffnesses is not None:
        changes["stiffnesses"] = tuple(
            r.coerce(k, float, f"structure.stiffnesses[{i}]") for i, k in enumerate(stiffnesses)
        )
    if isinstance(damping, list):
        changes["damping"] = tuple(r.coerce(c, float, f"structure.damping[{i}]") for i, c in enumerate(damping))
    if changes:
        structure = r.build("structure", structure.replace, **changes)
    s.done()

    e = top.section("excitation")
    excitation = r.build(
        "excitation",
        ExcitationConfig,
        rms_amplitude=e.get("rms_amplitude", float, 1.0),
        duration=e.get("duration", float, 25.6),
        sampling_frequency=e.get("sampling_frequency", float, 320.0),
    )
    e.done()

    b = top.section("bumper")
    location = b.sequence("location", (3, 2))
    location = tuple(r.coerce(x, int, f"bumper.location[{i}]") for i, x in enumerate(location))
    bumper = BumperSettings(location, b.get("contact_stiffness", float, 1e6))
    b.done()
    r.build(
        "bumper.location",
        lambda: NonlinearityConfig.bumper(1.0, bumper.contact_stiffness, location).check(structure.n_dof),
    )

    states = []
    for i, item in enumerate(top.sequence("states")):
        path = f"states[{i}]"
        st = _Section(item, path, r)
        if not st.has("name"):
            r.fail(path, "missing key 'name'")
        name = st.get("name", str, None)
        gap = st.get("gap", float, None)
        if gap is not None and not gap > 0:
            r.fail(f"{path}.gap", f"must be > 0, got {gap}")
        spec = StateSpec(
            name,
            baseline=st.get("baseline", bool, False),
            stiffness_scale=_index_map(r, st.data.pop("stiffness_scale", None), f"{path}.stiffness_scale"),
            added_mass=_index_map(r, st.data.pop("added_mass", None), f"{path}.added_mass"),
            gap=gap,
        )
        for k in list(spec.stiffness_scale) + list(spec.added_mass):
            if not 1 <= k <= structure.n_dof:
                r.fail(path, f"index {k} outside 1..{structure.n_dof}")
        st.done()
        states.append(spec)

    train = _train_section(r, top.section("train"), TrainConfig())
    recalibrate = None
    if top.has("recalibrate"):
        recalibrate = _train_section(r, top.section("recalibrate"), train)

    a = top.section("analysis")
    part = a.get("part", str, None)
    if part not in (None, "train", "validation", "test"):
        r.fail("analysis.part", f"unknown split part {part!r}")
    max_points = a.get("max_points", int, None)
    if max_points is not None and max_points < 1:
        r.fail("analysis.max_points", f"must be >= 1, got {max_points}")
    kde = []
    for i, pair in enumerate(a.sequence("kde")):
        if not (isinstance(pair, list) and len(pair) == 2):
            r.fail(f"analysis.kde[{i}]", f"expected [state, floor], got {pair!r}")
        kde.append((r.coerce(pair[0], str, f"analysis.kde[{i}]"), r.coerce(pair[1], int, f"analysis.kde[{i}]")))
    analysis = AnalysisConfig(
        part=part,
        max_points=max_points,
        raw=a.get("raw", bool, False),
        kde=tuple(kde),
        threshold_sigma=a.get("threshold_sigma", float, 3.0),
    )
    a.done()

    lags = tuple(r.coerce(x, int, f"lags[{i}]") for i, x in enumerate(top.sequence("lags", (1, 2, 3, 4))))
    if not lags or min(lags) < 1:
        r.fail("lags", f"lags must be positive integers, got {list(lags)}")
    split = tuple(r.coerce(x, float, f"split[{i}]") for i, x in enumerate(top.sequence("split", (0.6, 0.2, 0.2))))
    if len(split) != 3 or min(split) < 0 or abs(sum(split) - 1) > 1e-9:
        r.fail("split", f"expected three non-negative fractions summing to 1, got {list(split)}")
    repetitions = top.get("repetitions", int, 5)
    if repetitions < 1:
        r.fail("repetitions", f"must be >= 1, got {repetitions}")
    counts = largest_remainder(split, repetitions)
    if counts.min() == 0:
        r.fail(
            "repetitions",
            f"{repetitions} repetitions split as {dict(zip(PARTS, counts.tolist()))} by {list(split)}; "
            "every part needs at least one",
        )
    hidden_dim = top.get("hidden_dim", int, 100)
    if hidden_dim < 1:
        r.fail("hidden_dim", f"must be >= 1, got {hidden_dim}")
    workers = top.get("workers", int, 1)
    if workers < 1:
        r.fail("workers", f"must be >= 1, got {workers}")

    kw = dict(
        structure=structure,
        excitation=excitation,
        states=tuple(states),
        bumper=bumper,
        repetitions=repetitions,
        noise_snr_db=top.get("noise_snr_db", float, np.inf),
        lags=lags,
        hidden_dim=hidden_dim,
        train=train,
        split=split,
        seed=top.get("seed", int, 0),
        workers=workers,
        output_dir=Path(top.get("output_dir", str, "runs/experiment")),
        analysis=analysis,
        recalibrate=recalibrate,
    )
    top.done()
    try:
        return ExperimentConfig(**kw)
    except ConfigError as err:
        r.fail(err.field, err.message)


def load_config(path):
    path = Path(path)
    return parse_config(path.read_text(encoding="utf-8"), source=str(path))
