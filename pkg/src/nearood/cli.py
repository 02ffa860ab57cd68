"""Command-line interface: the whole pipeline behind one binary.

Subcommands: generate, train, fit, score, eval, project, density,
run-experiment. All commands read the same YAML config (every section
optional; defaults reproduce the shipped benchmark) and honor the global
--seed / --workspace / --quiet flags. Exit codes are a stable contract:
0 success, 2 config error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import functools
from dataclasses import replace
from pathlib import Path

import click
import numpy as np

from . import bench, experiment, gaussian, metrics, trainer, viz
from .errors import ConfigError, DataError, NearOodError, NumericalError
from .gaussian import OOD_LABEL
from .numerics import mix_seed

# Sub-stream for standalone `train` (fold training uses its own streams).
_STREAM_STANDALONE = 4

_TAGS = {"baseline": experiment.BASELINE_TAG, "smoothed": experiment.SMOOTHED_TAG}


class _CodedError(click.ClickException):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.exit_code = code


def _coded(exc: NearOodError) -> _CodedError:
    for cls, code in ((ConfigError, 2), (DataError, 3), (NumericalError, 4)):
        if isinstance(exc, cls):
            return _CodedError(str(exc), code)
    return _CodedError(str(exc), 1)


def _handle_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except NearOodError as exc:
            raise _coded(exc) from exc

    return wrapper


@click.group()
@click.option("--config", "config_path", type=click.Path(), default=None,
              help="YAML pipeline config; defaults apply when omitted.")
@click.option("--seed", type=int, default=None, help="Master seed (overrides config).")
@click.option("--workspace", type=click.Path(), default=None,
              help="Workspace directory (overrides config).")
@click.option("--quiet", is_flag=True, help="Suppress progress output.")
@click.pass_context
def cli(ctx, config_path, seed, workspace, quiet):
    """Distance-based near-OOD detection toolkit."""
    ctx.obj = {
        "config_path": config_path,
        "seed": seed,
        "workspace": workspace,
        "quiet": quiet,
    }


def _get_config(ctx) -> experiment.PipelineConfig:
    obj = ctx.obj
    if obj.get("_config") is None:
        if obj["config_path"] is not None:
            cfg = experiment.load_pipeline_config(obj["config_path"])
        else:
            cfg = experiment.PipelineConfig()
        if obj["seed"] is not None:
            cfg = replace(cfg, seed=obj["seed"])
        if obj["workspace"] is not None:
            cfg = replace(cfg, workspace=str(obj["workspace"]))
        obj["_config"] = cfg
    return obj["_config"]


def _say(ctx, message: str) -> None:
    if not ctx.obj["quiet"]:
        click.echo(message)


# ---------------------------------------------------------------------------
# Score files (the one delimited format owned by the CLI).
# ---------------------------------------------------------------------------

_SCORES_MAGIC = "nearood-scores 1"


def save_scores(path, labels, scores, accepted, method: str, threshold) -> None:
    out = ["# " + _SCORES_MAGIC]
    out.append(f"# method={method}")
    out.append("# threshold=" + ("none" if threshold is None else f"{threshold:.17g}"))
    out.append("row,label,score,accepted")
    for i, (label, score, ok) in enumerate(zip(labels, scores, accepted)):
        out.append(f"{i},{int(label)},{score:.17g},{int(ok)}")
    Path(path).write_text("\n".join(out) + "\n")


def load_scores(path):
    """Returns (labels, scores, accepted, method, threshold)."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"score file not found: {path}")
    lines = path.read_text().splitlines()
    if not lines or lines[0] != "# " + _SCORES_MAGIC:
        raise DataError(f"{path} is not a score file")
    header = {}
    labels, scores, accepted = [], [], []
    for line in lines[1:]:
        if line.startswith("#"):
            key, _, value = line[1:].strip().partition("=")
            header[key.strip()] = value
        elif line.startswith("row,") or not line.strip():
            continue
        else:
            _, label, score, ok = line.split(",")
            labels.append(int(label))
            scores.append(float(score))
            accepted.append(bool(int(ok)))
    threshold = header.get("threshold", "none")
    return (
        np.array(labels, dtype=np.int64),
        np.array(scores, dtype=np.float64),
        np.array(accepted, dtype=bool),
        header.get("method", ""),
        None if threshold == "none" else float(threshold),
    )


# ---------------------------------------------------------------------------
# Subcommands.
# ---------------------------------------------------------------------------


@cli.command()
@click.option("--out", type=click.Path(), default="dataset.csv", show_default=True)
@click.pass_context
@_handle_errors
def generate(ctx, out):
    """Generate the synthetic benchmark dataset and write it to a file."""
    cfg = _get_config(ctx)
    dataset = bench.generate(cfg.resolved_bench())
    bench.save_dataset(dataset, out)
    counts = np.bincount(
        dataset.labels[dataset.labels != OOD_LABEL], minlength=cfg.bench.class_count
    )
    for c, n in enumerate(counts):
        _say(ctx, f"class {c}: {n} rows")
    _say(ctx, f"OOD: {dataset.ood_indices().shape[0]} rows")
    _say(ctx, f"wrote {out}")


@cli.command()
@click.option("--dataset", "dataset_path", type=click.Path(), required=True)
@click.option("--model", "which", type=click.Choice(sorted(_TAGS)), default="baseline",
              show_default=True, help="Which training section of the config to use.")
@click.option("--out", type=click.Path(), required=True)
@click.pass_context
@_handle_errors
def train(ctx, dataset_path, which, out):
    """Train a classifier on all ID rows of a dataset file."""
    cfg = _get_config(ctx)
    dataset = bench.load_dataset(dataset_path)
    section = cfg.train_baseline if which == "baseline" else cfg.train_smoothed
    section = replace(section, seed=mix_seed(cfg.seed, _STREAM_STANDALONE))
    idx = dataset.id_indices()
    params = trainer.train(
        dataset.inputs[idx], dataset.labels[idx], cfg.bench.class_count, section
    )
    trainer.save_params(params, out)
    _say(ctx, f"trained {which} model (epsilon={section.epsilon}); wrote {out}")


@cli.command()
@click.option("--dataset", "dataset_path", type=click.Path(), required=True)
@click.option("--params", "params_path", type=click.Path(), required=True)
@click.option("--tag", type=click.Choice(sorted(_TAGS)), default="baseline",
              show_default=True, help="Provenance tag recorded in the model.")
@click.option("--save-features", type=click.Path(), default=None,
              help="Also write the extracted training features.")
@click.option("--out", type=click.Path(), required=True)
@click.pass_context
@_handle_errors
def fit(ctx, dataset_path, params_path, tag, save_features, out):
    """Extract ID features with a trained classifier and fit the detector."""
    cfg = _get_config(ctx)
    dataset = bench.load_dataset(dataset_path)
    params = trainer.load_params(params_path)
    idx = dataset.id_indices()
    feats = trainer.extract_features(
        params, dataset.inputs[idx], dataset.labels[idx],
        cfg.bench.class_count, _TAGS[tag],
    )
    model = gaussian.fit_gaussians(feats, fit_background_cov=cfg.detector.background_cov)
    gaussian.save_model(model, out)
    if save_features is not None:
        gaussian.save_features(feats, save_features)
        _say(ctx, f"wrote {save_features}")
    _say(ctx, f"fitted detector (lambda={model.shrinkage_lambda:g}); wrote {out}")


@cli.command()
@click.option("--model", "model_path", type=click.Path(), required=True)
@click.option("--features", "features_path", type=click.Path(), default=None,
              help="Feature file to score; alternative to --dataset + --params.")
@click.option("--dataset", "dataset_path", type=click.Path(), default=None)
@click.option("--params", "params_path", type=click.Path(), default=None)
@click.option("--method", type=click.Choice(["MD", "RMD"]), default="MD", show_default=True)
@click.option("--threshold", type=float, default=None,
              help="Accept rows with score >= threshold; omit to accept all.")
@click.option("--out", type=click.Path(), required=True)
@click.pass_context
@_handle_errors
def score(ctx, model_path, features_path, dataset_path, params_path, method, threshold, out):
    """Score a feature file (or dataset + classifier) under a fitted detector."""
    cfg = _get_config(ctx)
    model = gaussian.load_model(model_path)
    if features_path is not None:
        feats = gaussian.load_features(features_path)
    elif dataset_path is not None and params_path is not None:
        dataset = bench.load_dataset(dataset_path)
        params = trainer.load_params(params_path)
        feats = trainer.extract_features(
            params, dataset.inputs, dataset.labels, cfg.bench.class_count, ""
        )
    else:
        raise DataError("need --features or both --dataset and --params")
    if method == "MD":
        sv = gaussian.score_md(model, feats)
    else:
        sv = gaussian.score_rmd(model, feats, use_background_cov=cfg.detector.background_cov)
    accepted = (
        np.ones(sv.scores.shape[0], bool) if threshold is None else sv.scores >= threshold
    )
    save_scores(out, feats.labels, sv.scores, accepted, method, threshold)
    _say(ctx, f"scored {sv.scores.shape[0]} rows ({int(accepted.sum())} accepted); wrote {out}")


@cli.command("eval")
@click.option("--scores", "scores_path", type=click.Path(), required=True,
              help="Score file containing both ID rows and OOD-labeled rows.")
@click.option("--accuracy", type=float, default=None,
              help="Optional ID classification accuracy to record.")
@click.option("--out", type=click.Path(), required=True)
@click.pass_context
@_handle_errors
def eval_cmd(ctx, scores_path, accuracy, out):
    """Compute the metric suite from a score file and write a report."""
    cfg = _get_config(ctx)
    labels, scores, _, method, _ = load_scores(scores_path)
    is_ood = labels == OOD_LABEL
    report = metrics.evaluate_scores(
        scores[~is_ood], scores[is_ood],
        target_tpr=cfg.metrics.target_tpr, method=method, accuracy=accuracy,
    )
    metrics.save_report(report, out)
    _say(ctx, metrics.format_report_table([report]).rstrip("\n"))
    _say(ctx, f"wrote {out}")


@cli.command()
@click.option("--features", "features_path", type=click.Path(), required=True)
@click.option("--params", "params_path", type=click.Path(), default=None,
              help="Classifier whose head weight rows serve as templates.")
@click.option("--model", "model_path", type=click.Path(), default=None,
              help="Detector whose class means serve as templates (with --templates means).")
@click.option("--templates", type=click.Choice(["weights", "means"]), default="weights",
              show_default=True)
@click.option("--classes", default="0,1,2", show_default=True,
              help="Three comma-separated class indices.")
@click.option("--out", type=click.Path(), required=True)
@click.pass_context
@_handle_errors
def project(ctx, features_path, params_path, model_path, templates, classes, out):
    """Project activations of three classes onto their template plane."""
    feats = gaussian.load_features(features_path)
    try:
        class_filter = tuple(int(tok) for tok in classes.split(","))
    except ValueError as exc:
        raise ConfigError(f"--classes must be three integers: {exc}") from exc
    if len(class_filter) != 3:
        raise ConfigError("--classes must name exactly three classes")
    if templates == "weights":
        if params_path is None:
            raise DataError("--templates weights requires --params")
        rows = trainer.load_params(params_path).head_weights
    else:
        if model_path is None:
            raise DataError("--templates means requires --model")
        rows = gaussian.load_model(model_path).class_means
    template_vecs = tuple(rows[c] for c in class_filter)
    result = viz.project_to_weight_plane(feats, template_vecs, class_filter)
    viz.save_projection(result, out)
    _say(ctx, f"projected {result.coords.shape[0]} rows; wrote {out}")


@cli.command()
@click.option("--scores", "scores_path", type=click.Path(), required=True)
@click.option("--bins", type=int, default=None, help="Bin count (defaults to config).")
@click.option("--out", type=click.Path(), required=True)
@click.pass_context
@_handle_errors
def density(ctx, scores_path, bins, out):
    """Bin ID vs OOD score distributions from a score file."""
    cfg = _get_config(ctx)
    labels, scores, _, method, _ = load_scores(scores_path)
    series = viz.score_density(scores, labels == OOD_LABEL, bins or cfg.metrics.bins)
    viz.save_density(replace(series, method=method), out)
    _say(ctx, f"wrote {out}")


@cli.command("run-experiment")
@click.option("--dataset", "dataset_path", type=click.Path(), default=None,
              help="Reuse a generated dataset file instead of regenerating.")
@click.option("--parallel", is_flag=True, help="Run folds in parallel processes.")
@click.option("--out", "out_dir", type=click.Path(), default=None,
              help="Run directory (defaults to workspace/run_<hash>_seed<seed>).")
@click.pass_context
@_handle_errors
def run_experiment(ctx, dataset_path, parallel, out_dir):
    """Run the full cross-validated experiment and write all artifacts."""
    cfg = _get_config(ctx)
    dataset = bench.load_dataset(dataset_path) if dataset_path is not None else None
    run_dir = Path(out_dir) if out_dir is not None else experiment.default_run_dir(cfg)
    log = None if ctx.obj["quiet"] else (lambda m: click.echo(m))
    result = experiment.run_experiment(
        cfg, run_dir=run_dir, parallel=parallel, dataset=dataset, log=log
    )
    _say(ctx, "")
    _say(ctx, metrics.format_report_table(
        [result.aggregated[m] for m in result.aggregated]
    ).rstrip("\n"))
    for tag, acc in result.accuracy.items():
        _say(ctx, f"id_accuracy {tag}: {acc:.4f}")
    for tag, ratio in result.projection_ratios.items():
        _say(ctx, f"projection_separation {tag}: {ratio:.3f}")


def main():
    cli(prog_name="nearood")
