"""
Pipeline stages.

Each command reads the experiment config, continues the run manifest in the
output directory and records what it wrote:

    simulate        records/<state>/rep<r>.csv
    train-baseline  datasets/, models/baseline/, baseline/lag_search.csv, baseline/osa.csv
    analyze         models/<state>/, gradients/<state>/, kde/, analysis/, plots/
    report          reads analysis/metrics.csv and the thresholds in the manifest
"""

import dataclasses
import warnings
from concurrent.futures import ThreadPoolExecutor
from functools import partial
from pathlib import Path

import numpy as np
import pandas as pd
from arsenal import colors

from shm.nonlin.dataset import make_lagged, normalize, save_dataset, split
from shm.nonlin.gradients import gradient_field, save_gradients
from shm.nonlin.gradstats import (
    Moment,
    detection_threshold,
    distribution_stats,
    kde,
    metric_table,
    replicate_metrics,
    report_from_gradients,
    write_metric_table,
)
from shm.nonlin.neuralnet import (
    FIT_CRITERION,
    MlpModel,
    NMSEExceeded,
    load_model,
    part_nmse,
    recalibrate,
    save_model,
    train,
)
from shm.nonlin.osa import OSAPredictor
from shm.nonlin.pipeline import plots
from shm.nonlin.pipeline.config import ConfigError
from shm.nonlin.pipeline.manifest import MalformedManifest, load_manifest, open_manifest
from shm.nonlin.simulator import (
    IntegrationDiverged,
    add_measurement_noise,
    load_record,
    save_record,
    simulate_batch,
)
from shm.nonlin.util import text_table, write_json

SIMULATE = "simulate"
TRAIN_BASELINE = "train-baseline"
ANALYZE = "analyze"

# moments the detection rule and the figures use
DETECTION_MOMENTS = (Moment.STD, Moment.INVERSE_KURTOSIS)

FLOAT_FORMAT = "%.10e"


def _root(cfg, out):
    return Path(out) if out is not None else Path(cfg.output_dir)


def _header(verbose, text):
    if verbose:
        print(colors.yellow % f"== {text}")


def _excitation_seed(cfg, rep):
    # base signals depend on the repetition only, never on the state
    return cfg.derive_seed("excitation", rep)


def _simulate_state(cfg, root, state):
    structure = state.structure(cfg.structure, cfg.bumper)
    excitations = [cfg.excitation.replace(seed=_excitation_seed(cfg, rep)) for rep in range(cfg.repetitions)]
    try:
        records = simulate_batch(structure, excitations, state_label=state.name)
    except IntegrationDiverged as e:
        raise IntegrationDiverged(f"state {state.name!r}: {e}") from e
    paths = []
    for rep, record in enumerate(records):
        if np.isfinite(cfg.noise_snr_db):
            record = add_measurement_noise(
                record, cfg.noise_snr_db, cfg.derive_seed("noise", state.name, rep)
            )
        paths.append(save_record(record, root / "records" / state.name / f"rep{rep}.csv"))
    return paths


def cmd_simulate(cfg, out=None, states=None, verbose=1):
    """Simulate every (state, repetition) of the roster.

    Args:
        cfg: `ExperimentConfig`
        out: Run directory (defaults to `cfg.output_dir`)
        states: Optional subset of state names
        verbose: Print progress

    Returns:
        The updated `RunManifest`
    """
    root = _root(cfg, out)
    manifest = open_manifest(root, cfg.hash())
    selected = _select(cfg, states, include_baseline=False)
    _header(verbose, f"simulating {len(selected)} states × {cfg.repetitions} repetitions")
    with ThreadPoolExecutor(cfg.workers) as pool:
        results = list(pool.map(partial(_simulate_state, cfg, root), selected))
    for state, paths in zip(selected, results):
        manifest.add(SIMULATE, state.name, paths)
        for rep in range(cfg.repetitions):
            manifest.seeds[f"excitation/{state.name}/{rep}"] = _excitation_seed(cfg, rep)
        if verbose:
            print(colors.light.blue % state.name, f"{len(paths)} records")
    manifest.results[SIMULATE] = dict(
        repetitions=cfg.repetitions,
        n_samples=cfg.excitation.n_samples,
        dt=cfg.excitation.dt,
    )
    manifest.stamp(SIMULATE)
    manifest.save()
    return manifest


def _select(cfg, names, include_baseline):
    if names is None:
        return list(cfg.states)
    known = {s.name for s in cfg.states}
    for n in names:
        if n not in known:
            raise ConfigError("--states", f"unknown state {n!r}; the roster has {sorted(known)}")
    return [s for s in cfg.states if s.name in names or (include_baseline and s.baseline)]


def load_records(manifest, state):
    "Records of `state` listed in the manifest."
    try:
        paths = manifest.get(SIMULATE, state)
    except FileNotFoundError:
        raise FileNotFoundError(f"no records for state {state!r} in {manifest.root}; run simulate first") from None
    return [load_record(p) for p in paths]


def prepare(cfg, records, lag, dof, state, stats=None):
    "Windowed, split and normalised dataset of one floor of one state."
    data = make_lagged(records, lag, dof)
    data = split(data, cfg.split, seed=cfg.derive_seed("split", state))
    return normalize(data, stats)


def _train_config(cfg, *keys):
    return dataclasses.replace(cfg.train, seed=cfg.derive_seed(*keys))


def fit_baseline(cfg, data, lag, dof):
    model = MlpModel.init(
        data.input_dim,
        cfg.hidden_dim,
        data.output_dim,
        l2_weight=cfg.train.l2_weight,
        seed=cfg.derive_seed("init", lag, dof),
    )
    return train(model, data, _train_config(cfg, "train", lag, dof))


def _check_fit(manifest, stage, label, report):
    if report.passes(FIT_CRITERION):
        return
    message = (
        f"{label}: NMSE train/validation/test "
        f"{report.nmse_train:.2f}/{report.nmse_validation:.2f}/{report.nmse_test:.2f}% "
        f"is not below {FIT_CRITERION}%"
    )
    warnings.warn(message, NMSEExceeded, stacklevel=2)
    manifest.warn(stage, message)


def cmd_train_baseline(cfg, out=None, verbose=1):
    """Pick the lag on the baseline state and train one model per floor.

    Every lag of `cfg.lags` is tried for every floor; the lag with the lowest
    mean validation NMSE is kept for all later stages.

    Returns:
        The updated `RunManifest`
    """
    root = _root(cfg, out)
    manifest = open_manifest(root, cfg.hash())
    base = cfg.baseline
    records = load_records(manifest, base.name)

    _header(verbose, f"lag search on {base.name!r} over {list(cfg.lags)}")
    fits = {}
    rows = []
    for lag in cfg.lags:
        for dof in cfg.dofs:
            data = prepare(cfg, records, lag, dof, base.name)
            model, report = fit_baseline(cfg, data, lag, dof)
            fits[lag, dof] = (data, model, report)
            rows.append(
                dict(
                    lag=lag,
                    dof=dof,
                    nmse_train=report.nmse_train,
                    nmse_validation=report.nmse_validation,
                    nmse_test=report.nmse_test,
                    epochs=report.epochs_run,
                )
            )
            if verbose:
                print(colors.light.blue % f"lag {lag} dof{dof}", report)
    table = pd.DataFrame(rows)
    by_lag = table.groupby("lag")["nmse_validation"].mean()
    lag = int(by_lag.idxmin())
    lag_path = root / "baseline" / "lag_search.csv"
    lag_path.parent.mkdir(parents=True, exist_ok=True)
    table.to_csv(lag_path, index=False, float_format=FLOAT_FORMAT)
    manifest.add(TRAIN_BASELINE, "lag_search", lag_path)
    if verbose:
        print(colors.yellow % f"== lag {lag} chosen")
        print(text_table(list(by_lag.items()), ["lag", "mean validation NMSE"]))

    models = {}
    for dof in cfg.dofs:
        data, model, report = fits[lag, dof]
        models[dof] = model
        data_path = save_dataset(data, _mkdir(root / "datasets" / base.name) / f"dof{dof}.npz")
        model_path = save_model(model, _mkdir(root / "models" / base.name) / f"dof{dof}.json",
                                normalization_ref=manifest.relative(data_path))
        fit_path = root / "models" / base.name / f"dof{dof}.fit.json"
        write_json(fit_path, report.to_dict())
        manifest.add(TRAIN_BASELINE, f"dataset_dof{dof}", data_path)
        manifest.add(TRAIN_BASELINE, f"model_dof{dof}", model_path)
        manifest.add(TRAIN_BASELINE, f"fit_dof{dof}", fit_path)
        manifest.seeds[f"init/{lag}/{dof}"] = cfg.derive_seed("init", lag, dof)
        manifest.seeds[f"train/{lag}/{dof}"] = cfg.derive_seed("train", lag, dof)
        _check_fit(manifest, TRAIN_BASELINE, f"baseline dof{dof}", report)
    manifest.seeds[f"split/{base.name}"] = cfg.derive_seed("split", base.name)

    osa_path = _evaluate_osa(root, records, models, lag, fits[lag, cfg.dofs[0]][0], verbose)
    manifest.add(TRAIN_BASELINE, "osa", osa_path)

    manifest.results[TRAIN_BASELINE] = dict(
        lag=lag,
        validation_nmse_by_lag={str(k): float(v) for k, v in by_lag.items()},
    )
    manifest.stamp(TRAIN_BASELINE)
    manifest.save()
    return manifest


def _mkdir(path):
    path.mkdir(parents=True, exist_ok=True)
    return path


def _evaluate_osa(root, records, models, lag, data, verbose):
    "Per-record one-step-ahead and free-run NMSE on the test repetitions."
    predictor = OSAPredictor(models, lag, data.n_channels)
    rows = []
    for b in np.unique(data.blocks[data.rows("test")]):
        record = records[b]
        osa = predictor(record)
        free = predictor.free_run_nmse(record)
        for d in predictor.target_dofs:
            rows.append(dict(repetition=record.repetition, dof=d, nmse_osa=osa[d], nmse_free_run=free[d]))
    table = pd.DataFrame(rows)
    path = root / "baseline" / "osa.csv"
    table.to_csv(path, index=False, float_format=FLOAT_FORMAT)
    if verbose:
        print(colors.light.blue % "test repetitions", "mean OSA NMSE", f"{table.nmse_osa.mean():.3f}%",
              "mean free-run NMSE", f"{table.nmse_free_run.mean():.3f}%")
    return path


class StateAnalysis:
    "Everything `analyze` computed for one state."

    def __init__(self, state, report, grads, fits, paths, replicate_grads=None):
        self.state = state
        self.report = report
        self.grads = grads
        self.fits = fits
        self.paths = paths
        # every repetition block, whatever part the metrics use
        self.replicate_grads = grads if replicate_grads is None else replicate_grads


def _analyze_state(cfg, root, records, baseline_models, lag, max_points, state):
    grads, nmse, fits, paths, everywhere = {}, {}, {}, {}, {}
    for d, base_model in baseline_models.items():
        data = prepare(cfg, records, lag, d, state.name, stats=base_model.normalization)
        if state.baseline:
            model = base_model
            nmse[d] = tuple(part_nmse(model, data, p) for p in ("train", "validation", "test"))
        else:
            cfg_d = dataclasses.replace(cfg.recalibration, seed=cfg.derive_seed("recalibrate", state.name, d))
            model, report = recalibrate(base_model, data, cfg_d)
            fits[d] = report
            nmse[d] = report.nmse
            paths[f"model_dof{d}"] = save_model(model, _mkdir(root / "models" / state.name) / f"dof{d}.json")
            paths[f"fit_dof{d}"] = write_json(root / "models" / state.name / f"dof{d}.fit.json", report.to_dict())
        g = gradient_field(model, data, part=cfg.analysis.part, raw=cfg.analysis.raw, max_points=max_points)
        paths[f"gradients_dof{d}"] = save_gradients(g, root / "gradients" / state.name / f"dof{d}.csv")
        grads[d] = g
        if state.baseline:
            everywhere[d] = g if cfg.analysis.part is None else gradient_field(
                model, data, raw=cfg.analysis.raw, max_points=max_points
            )
    report = report_from_gradients(state.name, list(grads.values()), nmse)
    return StateAnalysis(state, report, grads, fits, paths, everywhere or None)


def detections(table, thresholds, baseline):
    """Detection flags and localisation per state.

    A state is flagged when its floor-averaged metric exceeds the baseline
    threshold; the localisation candidate is the floor with the largest
    inverse-kurtosis metric. The baseline state is the reference and is
    never flagged.

    Args:
        table: Metric table indexed by state
        thresholds: `{moment value: {"mean": threshold, ...}}`
        baseline: Name of the baseline state
    """
    ik = Moment.INVERSE_KURTOSIS.value
    dof_columns = [c for c in table.columns if c.startswith(f"{ik}_dof")]
    rows = []
    for state, row in table.iterrows():
        out = {"state": state}
        for m in DETECTION_MOMENTS:
            out[f"{m.value}_mean"] = row[f"{m.value}_mean"]
            out[f"{m.value}_threshold"] = thresholds[m.value]["mean"]
            out[f"{m.value}_detected"] = state != baseline and bool(
                row[f"{m.value}_mean"] > thresholds[m.value]["mean"]
            )
        out["detected"] = out[f"{ik}_detected"]
        best = max(dof_columns, key=lambda c: row[c])
        out["localization"] = best.removeprefix(f"{ik}_") if out["detected"] else "-"
        rows.append(out)
    return pd.DataFrame(rows).set_index("state")


def cmd_analyze(cfg, out=None, states=None, max_points=None, verbose=1):
    """Recalibrate, take gradient samples and compute the metrics of every state.

    Args:
        cfg: `ExperimentConfig`
        out: Run directory
        states: Optional subset of state names (the baseline is always included)
        max_points: Cap on gradient evaluation points per floor, overriding
            `cfg.analysis.max_points`
        verbose: Print progress

    Returns:
        The updated `RunManifest`
    """
    root = _root(cfg, out)
    manifest = open_manifest(root, cfg.hash())
    baseline_models = {d: load_model(manifest.get(TRAIN_BASELINE, f"model_dof{d}")) for d in cfg.dofs}
    lag = manifest.results[TRAIN_BASELINE]["lag"]
    if max_points is None:
        max_points = cfg.analysis.max_points
    selected = _select(cfg, states, include_baseline=True)
    base = cfg.baseline

    _header(verbose, f"analysing {len(selected)} states at lag {lag}")

    def run(state):
        return _analyze_state(cfg, root, load_records(manifest, state.name), baseline_models, lag, max_points, state)

    with ThreadPoolExecutor(cfg.workers) as pool:
        results = list(pool.map(run, selected))

    for r in results:
        for key, path in r.paths.items():
            manifest.add(ANALYZE, f"{r.state.name}/{key}", path)
        for d, report in r.fits.items():
            manifest.seeds[f"recalibrate/{r.state.name}/{d}"] = cfg.derive_seed("recalibrate", r.state.name, d)
            _check_fit(manifest, ANALYZE, f"{r.state.name} dof{d}", report)
        manifest.seeds[f"split/{r.state.name}"] = cfg.derive_seed("split", r.state.name)
        if verbose:
            ik = r.report.floor_average(Moment.INVERSE_KURTOSIS)
            sd = r.report.floor_average(Moment.STD)
            print(colors.light.blue % r.state.name, f"mean std {sd:.4g}  mean inverse kurtosis {ik:.4g}")

    analysis = _mkdir(root / "analysis")
    baseline_result = next(r for r in results if r.state.baseline)
    thresholds = {}
    for m in DETECTION_MOMENTS:
        replicates = replicate_metrics(list(baseline_result.replicate_grads.values()), m)
        path = analysis / f"baseline_replicates_{m.value}.csv"
        replicates.to_csv(path, float_format=FLOAT_FORMAT)
        manifest.add(ANALYZE, f"baseline_replicates_{m.value}", path)
        thr = detection_threshold(replicates, k=cfg.analysis.threshold_sigma)
        thresholds[m.value] = {str(k): float(v) for k, v in thr.items()}

    table = metric_table([r.report for r in results])
    table_path = write_metric_table(table, analysis / "metrics.csv")
    manifest.add(ANALYZE, "metrics", table_path)

    flags = detections(table, thresholds, base.name)
    summary = {
        state: dict(
            floor_average={m.value: float(table.loc[state, f"{m.value}_mean"]) for m in DETECTION_MOMENTS},
            detected=bool(flags.loc[state, "detected"]),
            localization=flags.loc[state, "localization"],
        )
        for state in table.index
    }
    summary_path = write_json(analysis / "summary.json", summary)
    manifest.add(ANALYZE, "summary", summary_path)

    manifest.add(ANALYZE, "kde", _write_kde(cfg, root, results))
    manifest.add(ANALYZE, "plots", _write_plots(cfg, root, table, thresholds, results))

    manifest.results[ANALYZE] = dict(
        baseline=base.name,
        states=[r.state.name for r in results],
        thresholds=thresholds,
        threshold_sigma=cfg.analysis.threshold_sigma,
    )
    manifest.stamp(ANALYZE)
    manifest.save()
    return manifest


def _write_kde(cfg, root, results):
    by_name = {r.state.name: r for r in results}
    paths = []
    for state, d in cfg.analysis.kde:
        if state not in by_name:
            continue
        g = by_name[state].grads[d]
        curves = {}
        for c, k in g.column_labels:
            curve = kde(g.column(c, k))
            curves[f"{c}@{k}"] = curve
            path = _mkdir(root / "kde" / state / f"dof{d}") / f"{c}@{k}.csv"
            curve.to_frame().to_csv(path, index=False, float_format=FLOAT_FORMAT)
            paths.append(path)
        paths.append(plots.kde_overlay(curves, root / "plots" / f"kde_{state}_dof{d}.svg", f"{state}, floor {d}"))
    return paths


def _write_plots(cfg, root, table, thresholds, results):
    paths = [
        plots.metric_lines(
            table, m, cfg.dofs, root / "plots" / f"metric_{m.value}.svg", threshold=thresholds[m.value]["mean"]
        )
        for m in DETECTION_MOMENTS
    ]
    stats = {r.state.name: {d: distribution_stats(g) for d, g in r.grads.items()} for r in results}
    paths.append(plots.std_heatmap(stats, root / "plots" / "gradient_std.svg"))
    return paths


def cmd_report(manifest_path, fmt="table"):
    """Render the metric table with detection flags and localisation.

    Args:
        manifest_path: Manifest file or run directory
        fmt: `"table"` for a fixed-width text table, `"csv"` for delimited text

    Raises:
        MalformedManifest: If the manifest is unreadable, lists a missing
            file or has no analysis results
    """
    manifest = load_manifest(manifest_path).check()
    try:
        table_path = manifest.get(ANALYZE, "metrics")
        results = manifest.results[ANALYZE]
        thresholds = results["thresholds"]
        baseline = results["baseline"]
        lag = manifest.results[TRAIN_BASELINE]["lag"]
    except (FileNotFoundError, KeyError) as e:
        raise MalformedManifest(f"{manifest.path}: no analysis results ({e})") from e
    table = pd.read_csv(table_path, index_col="state")
    flags = detections(table, thresholds, baseline)
    if fmt == "csv":
        return flags.to_csv(float_format=FLOAT_FORMAT)
    if fmt != "table":
        raise ValueError(f"unknown report format {fmt!r}")
    headings = ["state"] + list(flags.columns)
    rows = [[state] + [_cell(v) for v in row] for state, row in flags.iterrows()]
    sigma = results.get("threshold_sigma", 3.0)
    lines = [
        f"run {manifest.root}  (config {manifest.config_hash[:12]}, lag {lag})",
        f"thresholds: baseline mean + {sigma:g}σ over repetitions of {baseline!r}",
        "",
        text_table(rows, headings),
    ]
    if manifest.warnings:
        lines += ["", colors.red % "warnings:"] + [f"  [{w['stage']}] {w['message']}" for w in manifest.warnings]
    return "\n".join(lines)


def _cell(v):
    if isinstance(v, (bool, np.bool_)):
        return "yes" if v else "no"
    if isinstance(v, np.floating):
        return float(v)
    return v
