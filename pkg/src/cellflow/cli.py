"""The ``cellflow`` command line interface.

Subcommands cover the full pipeline: ``synth`` writes a synthetic
scenario, ``features`` materializes the feature matrix, ``train`` and
``eval`` fit and score models under the temporal protocol, the
``transfer-*`` commands run the cross-domain methods, and ``report``
renders a saved report as a table.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numerical failure. Outputs are deterministic: rerunning a command with
the same arguments and inputs reproduces every file byte for byte.
"""

from __future__ import annotations

import dataclasses
import json
import sys
from pathlib import Path

import click
import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # 3.10
    import tomli as tomllib

from .artifacts import load_model, save_model
from .datamodel import format_timestamp, load_dataset
from .errors import CellflowError, ConfigError, DataError, NumericalError
from .evaluation import (
    EvalReport,
    per_road_scores,
    r2_score,
    temporal_split,
    write_predictions,
    write_svg_chart,
)
from .experiments import run_da, run_kmm, run_temporal
from .features import (
    FeatureSpec,
    apply_standardization,
    build_features,
    standardize_columns,
    with_feature_set,
    write_feature_matrix,
)
from .lstm import make_windows, write_training_log
from .synth import load_scenario, preset_scenario, write_scenario
from .transfer import DaConfig, KmmConfig


def _write_manifest(out_dir, command, argv, seed, entries):
    doc = {"command": command, "argv": list(argv), "seed": seed}
    doc.update(entries)
    with open(Path(out_dir) / "manifest.json", "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _out_dir(path):
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _argv(ctx):
    return (ctx.obj or {}).get("argv", [])


def _parse_params(items):
    params = {}
    for item in items:
        if "=" not in item:
            raise click.UsageError(f"--param expects name=value, got {item!r}")
        name, _, raw = item.partition("=")
        name = name.strip()
        raw = raw.strip()
        if raw.lower() in ("true", "false"):
            value = raw.lower() == "true"
        elif raw.lower() in ("none", "null"):
            value = None
        else:
            try:
                value = int(raw)
            except ValueError:
                try:
                    value = float(raw)
                except ValueError:
                    value = raw
        params[name] = value
    return params


def _load_grid(path):
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read grid file {path}: {exc}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML in {path}: {exc}") from None
    grid = data.get("grid")
    if not isinstance(grid, dict) or not grid:
        raise ConfigError(f"{path} must define a non-empty [grid] table")
    for key, values in grid.items():
        if not isinstance(values, list) or not values:
            raise ConfigError(f"grid entry {key!r} must be a non-empty list")
    return grid


def _roads_option(value, name):
    roads = tuple(r.strip() for r in value.split(",") if r.strip())
    if not roads:
        raise click.UsageError(f"--{name} needs at least one road id")
    return roads


def _data_paths(data_dir):
    base = Path(data_dir)
    return base / "counters.csv", base / "sensors.csv", base / "roads.csv"


def _save_experiment(out, result, argv, command):
    result.report.save(out / "report.json")
    (out / "report.txt").write_text(result.report.to_table())
    write_predictions(out / "predictions.csv", result.eval_keys,
                      result.y_eval, result.y_pred)
    save_model(result.model, out / "model.json", result.feature_meta)
    if result.baseline_model is not None:
        save_model(result.baseline_model, out / "baseline_model.json",
                   result.feature_meta)
    if result.training_log:
        write_training_log(result.training_log, out / "training_log.csv")
    entries = {
        "counts": result.report.counts,
        "mean_r2": result.report.mean_r2,
        "r2_overall": result.report.r2_overall,
    }
    _write_manifest(out, command, argv, result.report.seed, entries)


@click.group(name="cellflow")
@click.pass_context
def cli(ctx):
    """Road traffic flow estimation from LTE radio-frequency counters."""
    ctx.ensure_object(dict)


@cli.command()
@click.option("--config", "config_path", type=click.Path(), default=None,
              help="Scenario TOML file.")
@click.option("--preset", type=str, default=None,
              help="Built-in scenario name (default, shifted).")
@click.option("--out", "out_path", type=click.Path(), required=True)
@click.option("--seed", type=int, default=None,
              help="Override the scenario seed.")
@click.option("--weeks", type=int, default=None,
              help="Override the scenario length.")
@click.pass_context
def synth(ctx, config_path, preset, out_path, seed, weeks):
    """Generate a synthetic scenario dataset."""
    if (config_path is None) == (preset is None):
        raise click.UsageError("provide exactly one of --config or --preset")
    if config_path is not None:
        cfg = load_scenario(config_path)
        if weeks is not None:
            cfg = dataclasses.replace(cfg, weeks=weeks)
    else:
        cfg = preset_scenario(preset, weeks=weeks)
    if seed is not None:
        cfg = dataclasses.replace(cfg, seed=seed)
    out = _out_dir(out_path)
    write_scenario(cfg, out)
    counters = sum(1 for _ in open(out / "counters.csv")) - 1
    sensors = sum(1 for _ in open(out / "sensors.csv")) - 1
    click.echo(
        f"wrote scenario with {len(cfg.roads)} roads, {cfg.n_intervals} "
        f"intervals: {counters} counter rows, {sensors} sensor rows"
    )


def _feature_options(fn):
    fn = click.option("--feature-set", type=click.Choice(["pl", "ta", "both"]),
                      default="both", show_default=True)(fn)
    fn = click.option("--time/--no-time", "use_time", default=True,
                      help="Include cyclic time features.")(fn)
    fn = click.option("--road/--no-road", "use_road", default=True,
                      help="Include road metadata features.")(fn)
    return fn


@cli.command()
@click.option("--data", "data_dir", type=click.Path(), required=True,
              help="Directory with counters.csv, sensors.csv, roads.csv.")
@click.option("--out", "out_path", type=click.Path(), required=True)
@_feature_options
@click.option("--standardize", is_flag=True, default=False)
@click.option("--fit-frac", type=float, default=None,
              help="Fit scaling stats on the first fraction of timestamps.")
@click.pass_context
def features(ctx, data_dir, out_path, feature_set, use_time, use_road,
             standardize, fit_frac):
    """Build and export the feature matrix."""
    ds = load_dataset(*_data_paths(data_dir))
    spec = with_feature_set(
        FeatureSpec(use_time=use_time, use_road=use_road), feature_set
    )
    fm = build_features(ds, spec)
    if standardize:
        fit_idx = None
        if fit_frac is not None:
            fit_idx, _ = temporal_split([k[1] for k in fm.keys], fit_frac)
        Z, mean, std = standardize_columns(fm.X, fit_idx)
        fm = dataclasses.replace(fm, X=Z, mean=mean, std=std)
    out = _out_dir(out_path)
    write_feature_matrix(fm, out / "features.csv", out / "feature_stats.json")
    _write_manifest(
        out, "features", _argv(ctx), None,
        {
            "rows": len(fm.keys),
            "columns": len(fm.columns),
            "dropped": ds.dropped,
            "feature_set": feature_set,
            "standardize": standardize,
        },
    )
    click.echo(
        f"wrote {len(fm.keys)} rows x {len(fm.columns)} feature columns "
        f"({ds.dropped} incomplete cells dropped)"
    )


@cli.command()
@click.option("--data", "data_dir", type=click.Path(), required=True)
@click.option("--out", "out_path", type=click.Path(), required=True)
@click.option("--model", "model_kind",
              type=click.Choice(["kr", "svr", "dt", "rf", "lstm"]),
              default="rf", show_default=True)
@click.option("--param", "params", multiple=True,
              help="Model hyperparameter, name=value. Repeatable.")
@click.option("--grid", "grid_path", type=click.Path(), default=None,
              help="TOML file with a [grid] table of candidate lists.")
@_feature_options
@click.option("--standardize/--no-standardize", "standardize", default=None,
              help="Default: on for kr/svr/lstm, off for trees.")
@click.option("--train-frac", type=float, default=0.8, show_default=True)
@click.option("--paper-protocol", is_flag=True, default=False,
              help="Validate grid candidates on the test period.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.pass_context
def train(ctx, data_dir, out_path, model_kind, params, grid_path, feature_set,
          use_time, use_road, standardize, train_frac, paper_protocol, seed):
    """Train a model under the temporal split and score the held-out weeks."""
    ds = load_dataset(*_data_paths(data_dir))
    grid = _load_grid(grid_path) if grid_path else None
    result = run_temporal(
        ds,
        model_kind=model_kind,
        model_params=_parse_params(params),
        feature_set=feature_set,
        use_time=use_time,
        use_road=use_road,
        standardize=standardize,
        train_frac=train_frac,
        grid=grid,
        paper_protocol=paper_protocol,
        seed=seed,
    )
    out = _out_dir(out_path)
    _save_experiment(out, result, _argv(ctx), "train")
    if result.grid is not None:
        with open(out / "grid_results.json", "w") as fh:
            json.dump(result.grid.table, fh, indent=2, sort_keys=True)
            fh.write("\n")
    click.echo(
        f"trained {model_kind} on {result.report.counts['train']} rows; "
        f"test R2 {result.report.r2_overall:.4f}"
    )


@cli.command("eval")
@click.option("--data", "data_dir", type=click.Path(), required=True)
@click.option("--model-file", type=click.Path(), required=True)
@click.option("--out", "out_path", type=click.Path(), required=True)
@click.option("--split", type=click.Choice(["test", "all"]), default="test",
              show_default=True,
              help="Score the held-out side of the temporal split, or all rows.")
@click.option("--train-frac", type=float, default=0.8, show_default=True)
@click.option("--svg", is_flag=True, default=False,
              help="Also write an actual-vs-predicted chart.")
@click.pass_context
def eval_cmd(ctx, data_dir, model_file, out_path, split, train_frac, svg):
    """Score a saved model on a dataset."""
    model, meta = load_model(model_file)
    if not meta:
        raise DataError(
            f"{model_file} carries no feature recipe; retrain with this package"
        )
    ds = load_dataset(*_data_paths(data_dir))
    spec = with_feature_set(
        FeatureSpec(use_time=meta["use_time"], use_road=meta["use_road"]),
        meta["feature_set"],
    )
    fm = build_features(ds, spec)
    if list(fm.columns) != list(meta["columns"]):
        raise DataError(
            "feature columns of the dataset do not match the model's recipe"
        )
    X = fm.X
    if meta["standardize"]:
        X = apply_standardization(
            X, np.asarray(meta["mean"]), np.asarray(meta["std"])
        )
    y, keys = fm.y, fm.keys
    if meta.get("window"):
        X, y, keys = make_windows(X, y, keys, int(meta["window"]))
    ts = [k[1] for k in keys]
    if split == "test":
        _, idx = temporal_split(ts, train_frac)
    else:
        idx = np.arange(len(keys))
    y_pred = model.predict(X[idx])
    eval_keys = tuple(keys[i] for i in idx)
    if hasattr(model, "get_params"):
        model_params = {
            k: (list(v) if isinstance(v, tuple) else v)
            for k, v in model.get_params().items()
        }
    else:
        model_params = {}
    report = EvalReport(
        experiment="eval",
        model_kind=_model_kind_name(model),
        model_params=model_params,
        split={"kind": "temporal" if split == "test" else "all",
               "train_frac": train_frac},
        seed=0,
        per_road=per_road_scores(eval_keys, y[idx], y_pred),
        r2_overall=r2_score(y[idx], y_pred),
        features={k: meta[k] for k in
                  ("feature_set", "use_time", "use_road", "standardize", "window")},
        counts={"eval": int(idx.size)},
    )
    out = _out_dir(out_path)
    report.save(out / "report.json")
    (out / "report.txt").write_text(report.to_table())
    write_predictions(out / "predictions.csv", eval_keys, y[idx], y_pred)
    if svg:
        write_svg_chart(out / "chart.svg", eval_keys, y[idx], y_pred)
    _write_manifest(out, "eval", _argv(ctx), None,
                    {"rows": int(idx.size), "r2_overall": report.r2_overall})
    click.echo(f"evaluated {idx.size} rows; R2 {report.r2_overall:.4f}")


def _model_kind_name(model):
    from .artifacts import _kind_of

    return _kind_of(model)


@cli.command("transfer-kmm")
@click.option("--data", "data_dir", type=click.Path(), required=True)
@click.option("--out", "out_path", type=click.Path(), required=True)
@click.option("--source", required=True, help="Comma-separated source road ids.")
@click.option("--target", required=True, help="Comma-separated target road ids.")
@click.option("--model", "model_kind",
              type=click.Choice(["kr", "svr", "dt", "rf"]),
              default="rf", show_default=True)
@click.option("--param", "params", multiple=True)
@click.option("--feature-set", type=click.Choice(["pl", "ta", "both"]),
              default="ta", show_default=True)
@click.option("--time/--no-time", "use_time", default=True)
@click.option("--road/--no-road", "use_road", default=False)
@click.option("--kmm-b", type=float, default=1000.0, show_default=True,
              help="Upper bound on each weight.")
@click.option("--kmm-eps", type=float, default=None,
              help="Weight-sum tolerance; default (sqrt(n)-1)/sqrt(n).")
@click.option("--kmm-gamma", type=float, default=None,
              help="Kernel bandwidth; default median heuristic.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.pass_context
def transfer_kmm(ctx, data_dir, out_path, source, target, model_kind, params,
                 feature_set, use_time, use_road, kmm_b, kmm_eps, kmm_gamma,
                 seed):
    """Instance-weighting transfer: fit a weighted model for target roads."""
    ds = load_dataset(*_data_paths(data_dir))
    result = run_kmm(
        ds,
        model_kind=model_kind,
        model_params=_parse_params(params),
        source_roads=_roads_option(source, "source"),
        target_roads=_roads_option(target, "target"),
        kmm_config=KmmConfig(B=kmm_b, eps=kmm_eps, gamma=kmm_gamma),
        feature_set=feature_set,
        use_time=use_time,
        use_road=use_road,
        seed=seed,
    )
    out = _out_dir(out_path)
    _save_experiment(out, result, _argv(ctx), "transfer-kmm")
    with open(out / "weights.csv", "w") as fh:
        fh.write("road_id,timestamp,weight\n")
        for (road_id, ts), w in zip(result.weight_keys, result.weights):
            fh.write(f"{road_id},{format_timestamp(ts)},{float(w)!r}\n")
    kmm_info = result.report.extras["kmm"]
    click.echo(
        f"kmm weights: mean {kmm_info['weight_mean']:.3f}, "
        f"max {kmm_info['weight_max']:.3f}; target mean R2 "
        f"{result.report.mean_r2:.4f} (baseline {result.report.baseline_mean_r2:.4f})"
    )


@cli.command("transfer-da")
@click.option("--data", "data_dir", type=click.Path(), required=True)
@click.option("--out", "out_path", type=click.Path(), required=True)
@click.option("--source", required=True)
@click.option("--target", required=True)
@click.option("--param", "params", multiple=True,
              help="Pretraining hyperparameter, name=value.")
@click.option("--feature-set", type=click.Choice(["pl", "ta", "both"]),
              default="ta", show_default=True)
@click.option("--time/--no-time", "use_time", default=True)
@click.option("--road/--no-road", "use_road", default=False)
@click.option("--lam", type=float, default=1.0, show_default=True,
              help="MMD penalty weight.")
@click.option("--da-epochs", type=int, default=50, show_default=True)
@click.option("--da-lr", type=float, default=0.001, show_default=True)
@click.option("--da-batch-size", type=int, default=32, show_default=True)
@click.option("--da-gamma", type=float, default=None)
@click.option("--adapt-mode", type=click.Choice(["append", "retrain_head"]),
              default="append", show_default=True)
@click.option("--da-layers", default="1,2", show_default=True,
              help="Comma-separated head layers to align; 3 is the output.")
@click.option("--restarts", type=int, default=1, show_default=True,
              help="Independent runs scored by the label-free objective.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.pass_context
def transfer_da(ctx, data_dir, out_path, source, target, params, feature_set,
                use_time, use_road, lam, da_epochs, da_lr, da_batch_size,
                da_gamma, adapt_mode, da_layers, restarts, seed):
    """Domain adaptation: adapt a pretrained sequence model to target roads."""
    ds = load_dataset(*_data_paths(data_dir))
    try:
        layers = tuple(int(tok) for tok in da_layers.split(",") if tok.strip())
    except ValueError:
        raise ConfigError(f"cannot parse --da-layers {da_layers!r}") from None
    result = run_da(
        ds,
        model_params=_parse_params(params),
        source_roads=_roads_option(source, "source"),
        target_roads=_roads_option(target, "target"),
        da_config=DaConfig(
            lam=lam,
            layers=layers,
            epochs=da_epochs,
            learning_rate=da_lr,
            batch_size=da_batch_size,
            gamma=da_gamma,
            adapt_mode=adapt_mode,
        ),
        feature_set=feature_set,
        use_time=use_time,
        use_road=use_road,
        seed=seed,
        restarts=restarts,
    )
    out = _out_dir(out_path)
    _save_experiment(out, result, _argv(ctx), "transfer-da")
    click.echo(
        f"adapted sequence model; target mean R2 {result.report.mean_r2:.4f} "
        f"(baseline {result.report.baseline_mean_r2:.4f})"
    )


@cli.command()
@click.option("--report", "report_path", type=click.Path(), required=True)
@click.option("--out", "out_path", type=click.Path(), default=None,
              help="Also write the table to a file.")
def report(report_path, out_path):
    """Render a saved report as an aligned text table."""
    rep = EvalReport.load(report_path)
    table = rep.to_table()
    if out_path:
        Path(out_path).write_text(table)
    click.echo(table, nl=False)


def main(argv=None):
    """Entry point with exit-code mapping."""
    args = list(sys.argv[1:] if argv is None else argv)
    try:
        cli.main(args=args, standalone_mode=False, obj={"argv": args})
        return 0
    except click.exceptions.Exit as exc:
        return int(exc.exit_code)
    except click.UsageError as exc:
        click.echo(f"error: {exc.format_message()}", err=True)
        return 1
    except click.ClickException as exc:
        exc.show()
        return 1
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return 1
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        return 1
    except DataError as exc:
        click.echo(f"data error: {exc}", err=True)
        return 2
    except NumericalError as exc:
        click.echo(f"numerical error: {exc}", err=True)
        return 3
    except CellflowError as exc:
        click.echo(f"error: {exc}", err=True)
        return 2
    except OSError as exc:
        click.echo(f"io error: {exc}", err=True)
        return 2


if __name__ == "__main__":
    sys.exit(main())
