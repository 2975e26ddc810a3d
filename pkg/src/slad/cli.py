"""Command-line interface: ``slad train|score|eval|ablate|theory|make-synthetic``.

Run options resolve per field with the precedence command-line flag, then
the JSON ``--config`` file (flat keys named after ``RunConfig`` fields),
then the built-in default. Exit codes are 0 on success, 2 on usage errors
(including bad config files) and 1 on runtime failures.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import click
import numpy as np
from click.core import ParameterSource

from slad import theory
from slad.data import DEFAULT_LABEL_COLUMN, Dataset, load_csv, make_synthetic, save_csv, split_protocol
from slad.errors import InvalidInputError, SladError
from slad.evaluation import (
    LossDistributionRecorder,
    MetricReport,
    run_experiment,
    summarize,
)
from slad.model import TrainConfig, load_model, save_model, score_batch, train

logger = logging.getLogger("slad")

ABLATIONS = {
    "zero_pad": {"transform_variant": "zero_pad"},
    "deep_mlp": {"transform_variant": "deep_mlp"},
    "no_weights": {"use_feature_weights": False},
    "ce": {"loss_variant": "ce"},
    "mse": {"loss_variant": "mse"},
}


@dataclass
class RunConfig:
    """Everything one invocation needs: model hyperparameters plus I/O."""

    train: TrainConfig = field(default_factory=TrainConfig)
    data: str | None = None
    label_column: str = DEFAULT_LABEL_COLUMN
    out: str | None = None
    summary: str | None = None
    loss_csv: str | None = None
    test_out: str | None = None
    contamination: float = 0.0
    deterministic: bool = True
    threads: int = 1

    @classmethod
    def field_names(cls) -> list[str]:
        io_fields = [f.name for f in fields(cls) if f.name != "train"]
        return TrainConfig.field_names() + io_fields

    def to_dict(self) -> dict:
        flat = asdict(self.train)
        flat.update({k: v for k, v in asdict(self).items() if k != "train"})
        return flat


def _coerce(name: str, value, default):
    """Check a config-file value against the type of its default."""
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise click.BadParameter(f"field {name!r} must be true or false", param_hint="--config")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise click.BadParameter(f"field {name!r} must be an integer", param_hint="--config")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise click.BadParameter(f"field {name!r} must be a number", param_hint="--config")
        return float(value)
    if value is not None and not isinstance(value, str):
        raise click.BadParameter(f"field {name!r} must be a string", param_hint="--config")
    return value


def read_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise click.BadParameter(f"cannot read {path}: {exc.strerror}", param_hint="--config")
    except json.JSONDecodeError as exc:
        raise click.BadParameter(
            f"{path} is not valid JSON (line {exc.lineno}, column {exc.colno})", param_hint="--config"
        )
    if not isinstance(raw, dict):
        raise click.BadParameter(f"{path} must hold a JSON object", param_hint="--config")
    unknown = sorted(set(raw) - set(RunConfig.field_names()))
    if unknown:
        raise click.BadParameter(f"unknown field(s) {', '.join(unknown)}", param_hint="--config")
    return raw


def resolve_run_config(ctx: click.Context, config_path: str | None = None) -> RunConfig:
    """Merge flags, config file and defaults for every known field."""
    from_file = read_config_file(config_path)
    defaults = RunConfig().to_dict()
    merged = {}
    for name, default in defaults.items():
        if name in ctx.params and ctx.get_parameter_source(name) not in (
            ParameterSource.DEFAULT,
            None,
        ):
            merged[name] = ctx.params[name]
        elif name in from_file:
            merged[name] = _coerce(name, from_file[name], default)
        elif name in ctx.params and ctx.params[name] is not None:
            merged[name] = ctx.params[name]
        else:
            merged[name] = default
    threads_from_flag = ctx.get_parameter_source("threads") not in (ParameterSource.DEFAULT, None)
    if not threads_from_flag and "threads" not in from_file:
        merged["threads"] = _threads(None)
    train_cfg = TrainConfig(**{k: merged.pop(k) for k in TrainConfig.field_names()})
    try:
        train_cfg.validate()
    except InvalidInputError as exc:
        raise click.UsageError(str(exc), ctx=ctx)
    run = RunConfig(train=train_cfg, **merged)
    if run.threads < 1:
        raise click.UsageError("threads must be >= 1", ctx=ctx)
    if run.deterministic and run.threads != 1:
        logger.info("deterministic mode: running single-threaded")
        run.threads = 1
    return run


def _train_options(func):
    """Attach one flag per TrainConfig field plus the config-file option."""
    d = TrainConfig()
    options = [
        click.option("--config", "config_path", type=click.Path(dir_okay=False), help="JSON run config."),
        click.option("--seed", type=int, default=d.seed, show_default=True),
        click.option("--c", "c", type=int, default=d.c, show_default=True, help="Subspaces per sample."),
        click.option("--r", "r", type=int, default=d.r, show_default=True, help="Samples per instance."),
        click.option("--h", "h", type=int, default=d.h, show_default=True, help="Representation dim."),
        click.option("--gamma", type=float, default=d.gamma, show_default=True),
        click.option("--delta", type=int, default=d.delta, show_default=True),
        click.option("--hidden-units", type=int, default=d.hidden_units, show_default=True),
        click.option("--lr", type=float, default=d.lr, show_default=True),
        click.option("--batch-size", type=int, default=d.batch_size, show_default=True),
        click.option("--epochs", type=int, default=d.epochs, show_default=True),
        click.option(
            "--loss-variant", type=click.Choice(["jsd", "mse", "ce"]), default=d.loss_variant, show_default=True
        ),
        click.option(
            "--transform-variant",
            type=click.Choice(["affine", "zero_pad", "deep_mlp"]),
            default=d.transform_variant,
            show_default=True,
        ),
        click.option(
            "--use-feature-weights/--no-feature-weights", default=d.use_feature_weights, show_default=True
        ),
        click.option("--resample-each-epoch/--no-resample-each-epoch", default=d.resample_each_epoch),
        click.option("--data", type=click.Path(dir_okay=False), help="Input CSV."),
        click.option("--label-column", default=DEFAULT_LABEL_COLUMN, show_default=True),
        click.option("--contamination", type=float, default=0.0, show_default=True),
        click.option("--deterministic/--no-deterministic", default=True, show_default=True),
        click.option("--threads", type=int, default=1, help="Scoring threads (env SLAD_THREADS)."),
    ]
    for opt in reversed(options):
        func = opt(func)
    return func


def _require(run: RunConfig, name: str, ctx: click.Context) -> str:
    value = getattr(run, name)
    if not value:
        raise click.UsageError(f"missing required value for {name!r} (flag or config file)", ctx=ctx)
    return value


def _emit_json(payload: dict, path: str | None = None) -> None:
    text = json.dumps(payload, indent=2, sort_keys=True)
    if path:
        Path(path).write_text(text + "\n", encoding="utf-8")
    click.echo(text)


def _load_labeled(path: str, label_column: str) -> Dataset:
    ds = load_csv(path, label_column)
    if ds.labels is None:
        raise InvalidInputError(f"{path} has no labels")
    return ds


def _load_any(path: str, label_column: str) -> Dataset:
    """Labeled if the label column exists, unlabeled otherwise."""
    with Path(path).open(encoding="utf-8") as fh:
        header = next(csv.reader(fh), [])
    return load_csv(path, label_column if label_column in header else None)


class SladGroup(click.Group):
    """Turns library errors into a one-line message and exit code 1."""

    def invoke(self, ctx: click.Context):
        try:
            return super().invoke(ctx)
        except SladError as exc:
            raise click.ClickException(f"{type(exc).__name__}: {exc}") from exc
        except (OSError, ArithmeticError) as exc:
            raise click.ClickException(str(exc)) from exc


@click.group(cls=SladGroup)
@click.option("-v", "--verbose", count=True, help="Repeat for more logging.")
def cli(verbose: int) -> None:
    """Scale-learning anomaly detection for tabular data."""
    level = logging.WARNING - 10 * min(verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


@cli.command("train")
@_train_options
@click.option("--out", type=click.Path(dir_okay=False), help="Model file to write.")
@click.option("--summary", type=click.Path(dir_okay=False), help="Also write the JSON summary here.")
@click.option("--loss-csv", type=click.Path(dir_okay=False), help="Per-epoch test loss quantiles.")
@click.option("--test-out", type=click.Path(dir_okay=False), help="Write the held-out test rows here.")
@click.option(
    "--protocol",
    type=click.Choice(["split", "all"]),
    default="split",
    show_default=True,
    help="With labels: train on half the inliers (split) or on every row (all).",
)
@click.pass_context
def train_cmd(ctx: click.Context, config_path, protocol, **_) -> None:
    """Train a model and write it with a JSON run summary."""
    run = resolve_run_config(ctx, config_path)
    data_path = _require(run, "data", ctx)
    out = _require(run, "out", ctx)
    ds = _load_any(data_path, run.label_column)
    test = None
    if ds.labels is not None and protocol == "split":
        split = split_protocol(ds, run.train.seed)
        train_ds, test = ds.subset(split.train), ds.subset(split.test)
    else:
        train_ds = Dataset(ds.features, None, ds.feature_names)
    if run.loss_csv and test is None:
        raise click.UsageError("--loss-csv needs labeled data and the split protocol", ctx=ctx)
    recorder = LossDistributionRecorder(test, seed=run.train.seed) if run.loss_csv else None
    model = train(train_ds, run.train, epoch_callback=recorder)
    save_model(model, out)
    if recorder is not None:
        recorder.write_csv(run.loss_csv)
    if test is not None and run.test_out:
        save_csv(test, run.test_out, run.label_column)
    payload = {
        "seed": run.train.seed,
        "epochs": run.train.epochs,
        "final_loss": model.history[-1],
        "loss_history": model.history,
        "n_train": train_ds.n,
        "n_features": train_ds.d,
        "model": str(out),
        "config": run.to_dict() | {"protocol": protocol},
    }
    if recorder is not None:
        payload["final_median_loss"] = {k: recorder.median(k) for k in recorder.last}
    _emit_json(payload, run.summary)


def _write_scores(scores: np.ndarray, out: str | None) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["index", "score"])
    for i, s in enumerate(scores):
        writer.writerow([i, repr(float(s))])
    if out:
        Path(out).write_text(buf.getvalue(), encoding="utf-8")
    else:
        click.echo(buf.getvalue(), nl=False)


def _threads(value: int | None) -> int:
    if value is not None:
        return value
    env = os.environ.get("SLAD_THREADS")
    if not env:
        return 1
    try:
        return int(env)
    except ValueError:
        raise click.BadParameter("SLAD_THREADS must be an integer", param_hint="SLAD_THREADS")


@cli.command("score")
@click.option("--model", "model_path", required=True, type=click.Path(dir_okay=False))
@click.option("--data", required=True, type=click.Path(dir_okay=False))
@click.option("--label-column", default=DEFAULT_LABEL_COLUMN, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--r-eval", type=int, default=None, help="Samples per instance (default: model's r).")
@click.option("--threads", type=int, default=None, help="Worker threads (env SLAD_THREADS, default 1).")
@click.option("--out", type=click.Path(dir_okay=False), help="CSV destination (default stdout).")
def score_cmd(model_path, data, label_column, seed, r_eval, threads, out) -> None:
    """Score every row of a CSV; writes ``index,score``."""
    model = load_model(model_path)
    ds = _load_any(data, label_column)
    if ds.d != model.d:
        raise InvalidInputError(
            f"{data} has {ds.d} feature columns, the model expects D={model.d}"
        )
    scores = score_batch(model, ds, seed=seed, r_eval=r_eval, threads=_threads(threads))
    _write_scores(scores, out)


def _read_scores(path: str) -> np.ndarray:
    with Path(path).open(encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if not rows or "score" not in rows[0]:
        raise InvalidInputError(f"{path} needs a 'score' column")
    try:
        return np.array([float(r["score"]) for r in rows])
    except ValueError as exc:
        raise InvalidInputError(f"{path}: {exc}") from exc


def _multi_seed(run: RunConfig, n_seeds: int, overrides: dict | None = None) -> dict:
    ds = _load_labeled(run.data, run.label_column)
    cfg = replace(run.train, **(overrides or {}))
    seeds = [run.train.seed + k for k in range(n_seeds)]
    reports = [
        run_experiment(ds, cfg, s, contamination=run.contamination, threads=run.threads).report
        for s in seeds
    ]
    return {"runs": [r.to_dict() for r in reports], "summary": summarize(reports)}


@cli.command("eval")
@_train_options
@click.option("--scores", type=click.Path(dir_okay=False), help="Scores CSV from `score`.")
@click.option("--model", "model_path", type=click.Path(dir_okay=False), help="Model to score --data with.")
@click.option("--seeds", type=int, default=None, help="Train and evaluate this many seeds.")
@click.option("--out", type=click.Path(dir_okay=False), help="Also write the JSON report here.")
@click.pass_context
def eval_cmd(ctx: click.Context, config_path, scores, model_path, seeds, out, **_) -> None:
    """AUC-ROC and AUC-PR from scores, from a model, or from fresh multi-seed runs."""
    run = resolve_run_config(ctx, config_path)
    data_path = _require(run, "data", ctx)
    chosen = sum(v is not None for v in (scores, model_path, seeds))
    if chosen != 1:
        raise click.UsageError("give exactly one of --scores, --model or --seeds", ctx=ctx)
    if seeds is not None:
        if seeds < 1:
            raise click.UsageError("--seeds must be >= 1", ctx=ctx)
        _emit_json(_multi_seed(run, seeds), out)
        return
    ds = _load_labeled(data_path, run.label_column)
    echo = {"data": data_path}
    if scores is not None:
        values = _read_scores(scores)
        echo["scores"] = scores
    else:
        model = load_model(model_path)
        values = score_batch(model, ds, seed=run.train.seed, threads=run.threads)
        echo |= {"model": model_path} | asdict(model.config)
    report = MetricReport.from_scores(values, ds.labels, run.train.seed, echo)
    _emit_json(report.to_dict(), out)


@cli.command("ablate")
@_train_options
@click.option("--variant", required=True, type=click.Choice(sorted(ABLATIONS)))
@click.option("--seeds", type=int, default=5, show_default=True)
@click.option("--paired/--no-paired", default=False, help="Also run the default model on the same seeds.")
@click.option("--out", type=click.Path(dir_okay=False), help="Also write the JSON report here.")
@click.pass_context
def ablate_cmd(ctx: click.Context, config_path, variant, seeds, paired, out, **_) -> None:
    """Run one ablated variant with the standard split protocol."""
    run = resolve_run_config(ctx, config_path)
    _require(run, "data", ctx)
    if seeds < 1:
        raise click.UsageError("--seeds must be >= 1", ctx=ctx)
    payload = {"variant": variant, "ablated": _multi_seed(run, seeds, ABLATIONS[variant])}
    if paired:
        payload["default"] = _multi_seed(run, seeds)
        a = payload["ablated"]["summary"]["auc_roc"]["values"]
        b = payload["default"]["summary"]["auc_roc"]["values"]
        payload["auc_roc_gap"] = float(np.mean(b) - np.mean(a))
    _emit_json(payload, out)


@cli.command("make-synthetic")
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@click.option("--n", type=int, default=2000, show_default=True)
@click.option("--outlier-fraction", type=float, default=0.05, show_default=True)
@click.option("--n-noise", type=int, default=8, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
def make_synthetic_cmd(out, n, outlier_fraction, n_noise, seed) -> None:
    """Write the seeded synthetic benchmark CSV (label column ``label``)."""
    if n < 2:
        raise click.UsageError("--n must be >= 2")
    ds = make_synthetic(n=n, outlier_fraction=outlier_fraction, n_noise=n_noise, seed=seed)
    save_csv(ds, out)
    click.echo(f"wrote {ds.n} rows ({int(ds.labels.sum())} anomalies) to {out}")


@cli.group("theory")
def theory_group() -> None:
    """Closed-form and simulated checks of the subspace and gradient analysis."""


def _unit_interval(ctx, param, value):
    if value is not None and not 0.0 < value <= 1.0:
        raise click.BadParameter("must lie in (0, 1]")
    return value


@theory_group.command("pr-u")
@click.option("--c", "c", type=click.IntRange(min=1), default=10, show_default=True)
@click.option("--alpha", type=float, default=0.5, show_default=True, callback=_unit_interval)
def pr_u_cmd(c, alpha) -> None:
    """Probability that at least one of c subspaces is useful."""
    value = theory.pr_U_useful(c, alpha)
    _emit_json({"c": c, "alpha": alpha, "pr_U_useful": value, "per_subspace_bound": theory.theorem2_bound(alpha)})


@theory_group.command("prob-curve")
@click.option("--alpha", type=float, default=0.5, show_default=True, callback=_unit_interval)
@click.option("--beta", type=float, default=0.5, show_default=True, callback=_unit_interval)
@click.option("--max-dim", type=click.IntRange(1, theory.MAX_CURVE_DIM), default=400, show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), help="CSV destination (default stdout).")
def prob_curve_cmd(alpha, beta, max_dim, out) -> None:
    """Usefulness probability against the number of features F."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["F", "G", "q", "alpha", "beta", "alpha_eff", "pr", "exact"])
    for p in theory.prob_curve(alpha, beta, max_dim):
        writer.writerow([p.F, p.G, p.q, p.alpha, p.beta, repr(p.alpha_eff), repr(p.pr), int(p.exact)])
    if out:
        Path(out).write_text(buf.getvalue(), encoding="utf-8")
    else:
        click.echo(buf.getvalue(), nl=False)


def mc_check_rows(n_queries: int, trials: int, seed: int, max_f: int = 50) -> list[dict]:
    """Closed form against the with-replacement simulation on random queries."""
    rng = np.random.default_rng(seed)
    rows = []
    for k in range(n_queries):
        F = int(rng.integers(1, max_f + 1))
        G = int(rng.integers(1, F + 1))
        q = int(rng.integers(1, G + 1))
        query = theory.SubspaceUsefulnessQuery(F, G, q)
        exact = theory.pr_subspace_useful(query)
        est = theory.pr_subspace_useful_mc(query, trials, np.random.default_rng([seed, k]))
        delta = abs(exact - est.mean)
        rows.append(
            {
                "F": F,
                "G": G,
                "q": q,
                "closed_form": exact,
                "monte_carlo": est.mean,
                "stderr": est.stderr,
                "delta": delta,
                "within_4se": bool(delta <= 4 * est.stderr + 1e-12),
            }
        )
    return rows


@theory_group.command("mc-check")
@click.option("--queries", type=click.IntRange(min=1), default=20, show_default=True)
@click.option("--trials", type=click.IntRange(min=theory.MIN_MC_TRIALS), default=200_000, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
def mc_check_cmd(queries, trials, seed) -> None:
    """Compare the closed form with Monte-Carlo estimates; exit 1 if any delta >= 0.005."""
    rows = mc_check_rows(queries, trials, seed)
    max_delta = max(r["delta"] for r in rows)
    ok = max_delta < 0.005
    _emit_json({"queries": rows, "max_delta": max_delta, "ok": ok})
    if not ok:
        raise click.ClickException(f"closed form and simulation differ by {max_delta:.5f}")


@theory_group.command("inlier-priority")
@click.option("--n-in", type=click.IntRange(min=1), default=100, show_default=True)
@click.option("--n-anom", type=click.IntRange(min=1), default=10, show_default=True)
@click.option("--trials", type=click.IntRange(min=1), default=1000, show_default=True)
@click.option("--u", "u", type=click.IntRange(min=1), default=32, show_default=True)
@click.option("--c", "c", type=click.IntRange(min=2), default=10, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--sweep", is_flag=True, help="Also fit the log-log slope over ratios 1, 2, 5, 10.")
def inlier_priority_cmd(n_in, n_anom, trials, u, c, seed, sweep) -> None:
    """Squared gradient norm of the inlier group over that of the anomaly group."""
    if n_in < n_anom:
        raise click.UsageError("--n-in must be >= --n-anom")
    cfg = theory.InlierPriorityConfig(u=u, c=c, n_inlier=n_in, n_anom=n_anom, trials=trials, seed=seed)
    payload = {"config": asdict(cfg), "result": asdict(theory.inlier_priority_experiment(cfg))}
    if sweep:
        _, fit = theory.inlier_priority_sweep(n_anom=n_anom, u=u, c=c, trials=trials, seed=seed)
        payload["sweep"] = asdict(fit)
    _emit_json(payload)


def main() -> None:
    cli(prog_name="slad")


if __name__ == "__main__":
    main()
