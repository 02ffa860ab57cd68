"""End-to-end experiment pipeline: generate, train, fit, score, evaluate.

One run = one dataset, k folds over the ID rows. Per fold, a baseline and
a label-smoothed classifier are trained on the ID training split (same
derived seed, so the runs are paired), Gaussians are fitted on the ID
training features, and the ID test split plus every OOD row is scored
under four method rows: MD and RMD on baseline features, MD-LS and RMD-LS
on label-smoothed features. Metrics are aggregated as the across-fold
mean. Everything derives deterministically from one master seed, so
serial and parallel fold execution produce identical bytes.
"""

from __future__ import annotations

import hashlib
import json
import shutil
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import yaml

from . import bench, gaussian, metrics, trainer, viz
from .errors import ConfigInvalid, DataError, NearOodError
from .gaussian import OOD_LABEL
from .numerics import mix_seed

METHODS = ("MD", "RMD", "MD-LS", "RMD-LS")

BASELINE_TAG = "baseline"
SMOOTHED_TAG = "label-smoothed"

# Pinned sub-stream indices hung off the master seed.
_STREAM_DATASET = 1
_STREAM_FOLDS = 2
_STREAM_TRAIN = 3


@dataclass(frozen=True)
class DetectorConfig:
    methods: tuple[str, ...] = METHODS
    background_cov: bool = False

    def __post_init__(self):
        object.__setattr__(self, "methods", tuple(self.methods))
        for m in self.methods:
            if m not in METHODS:
                raise ConfigInvalid(f"detector.methods: unknown method {m!r}")
        if not self.methods:
            raise ConfigInvalid("detector.methods: need at least one method")


@dataclass(frozen=True)
class MetricsConfig:
    target_tpr: float = 0.95
    bins: int = 40

    def __post_init__(self):
        object.__setattr__(self, "target_tpr", float(self.target_tpr))
        object.__setattr__(self, "bins", int(self.bins))
        if not 0.0 < self.target_tpr <= 1.0:
            raise ConfigInvalid("metrics.target_tpr must be in (0, 1]")
        if self.bins < 2:
            raise ConfigInvalid("metrics.bins must be at least 2")


@dataclass(frozen=True)
class PipelineConfig:
    """Everything one experiment run needs; see README for the YAML schema.

    Component seeds (dataset, fold shuffle, per-fold training) are derived
    from the single master seed, so the YAML sections carry no seeds of
    their own.
    """

    bench: bench.BenchConfig = field(default_factory=bench.BenchConfig)
    train_baseline: trainer.TrainConfig = field(
        default_factory=lambda: trainer.TrainConfig(epsilon=0.0)
    )
    train_smoothed: trainer.TrainConfig = field(
        default_factory=lambda: trainer.TrainConfig(epsilon=0.1)
    )
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    folds: int = 10
    seed: int = 0
    projection_classes: tuple[int, int, int] = (0, 1, 2)
    workspace: str = "runs"

    def __post_init__(self):
        object.__setattr__(
            self, "projection_classes", tuple(int(c) for c in self.projection_classes)
        )
        if self.folds < 2:
            raise ConfigInvalid("folds must be at least 2")
        if len(self.projection_classes) != 3 or len(set(self.projection_classes)) != 3:
            raise ConfigInvalid("projection_classes must be three distinct classes")
        for c in self.projection_classes:
            if not 0 <= c < self.bench.class_count:
                raise ConfigInvalid(f"projection_classes: class {c} out of range")

    def dataset_seed(self) -> int:
        return mix_seed(self.seed, _STREAM_DATASET)

    def fold_seed(self) -> int:
        return mix_seed(self.seed, _STREAM_FOLDS)

    def train_seed(self, fold_index: int) -> int:
        return mix_seed(mix_seed(self.seed, _STREAM_TRAIN), fold_index)

    def resolved_bench(self) -> bench.BenchConfig:
        """Bench config with the seed derived from the master seed."""
        return replace(self.bench, seed=self.dataset_seed())

    def to_dict(self) -> dict:
        d = asdict(self)
        d["bench"].pop("seed")  # derived, not part of the declared config
        for section in ("train_baseline", "train_smoothed"):
            d[section].pop("seed")
            d[section]["hidden_sizes"] = list(d[section]["hidden_sizes"])
        d["detector"]["methods"] = list(d["detector"]["methods"])
        d["projection_classes"] = list(d["projection_classes"])
        return d

    def config_hash(self) -> str:
        """Hash of the computational sections (master seed and paths excluded)."""
        d = self.to_dict()
        d.pop("seed")
        d.pop("workspace")
        blob = json.dumps(d, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


_SECTION_TYPES = {
    "bench": bench.BenchConfig,
    "train_baseline": trainer.TrainConfig,
    "train_smoothed": trainer.TrainConfig,
    "detector": DetectorConfig,
    "metrics": MetricsConfig,
}


def _section_from_dict(cls, data, section: str):
    if not isinstance(data, dict):
        raise ConfigInvalid(f"{section}: expected a mapping")
    allowed = {f.name for f in fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key == "seed" and cls in (bench.BenchConfig, trainer.TrainConfig):
            raise ConfigInvalid(
                f"{section}.seed: seeds are derived from the master seed; "
                "set the top-level seed instead"
            )
        if key not in allowed:
            raise ConfigInvalid(f"{section}.{key}: unknown field")
        kwargs[key] = tuple(value) if isinstance(value, list) else value
    try:
        return cls(**kwargs)
    except NearOodError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigInvalid(f"{section}: {exc}") from exc


def pipeline_config_from_dict(data: dict) -> PipelineConfig:
    """Strict parse: unknown fields are config errors naming the field."""
    if not isinstance(data, dict):
        raise ConfigInvalid("config root must be a mapping")
    top_allowed = {f.name for f in fields(PipelineConfig)}
    kwargs = {}
    for key, value in data.items():
        if key not in top_allowed:
            raise ConfigInvalid(f"{key}: unknown field")
        if key in _SECTION_TYPES:
            kwargs[key] = _section_from_dict(_SECTION_TYPES[key], value, key)
        elif key == "projection_classes":
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    try:
        return PipelineConfig(**kwargs)
    except NearOodError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigInvalid(str(exc)) from exc


def load_pipeline_config(path) -> PipelineConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigInvalid(f"config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigInvalid(f"cannot parse {path}: {exc}") from exc
    return pipeline_config_from_dict(data if data is not None else {})


def save_pipeline_config(cfg: PipelineConfig, path) -> None:
    d = cfg.to_dict()
    Path(path).write_text(yaml.safe_dump(d, sort_keys=True, default_flow_style=False))


# ---------------------------------------------------------------------------
# Per-fold work.
# ---------------------------------------------------------------------------


@dataclass
class _FoldOutput:
    fold_index: int
    # method row -> (id_scores, ood_scores)
    scores: dict
    # tag -> test-split accuracy of that classifier
    accuracy: dict
    # tag -> ProjectionResult (fold 0 only)
    projections: dict


def _method_rows(cfg: PipelineConfig) -> dict[str, tuple[str, str]]:
    """method row -> (feature tag, scorer)."""
    rows = {
        "MD": (BASELINE_TAG, "md"),
        "RMD": (BASELINE_TAG, "rmd"),
        "MD-LS": (SMOOTHED_TAG, "md"),
        "RMD-LS": (SMOOTHED_TAG, "rmd"),
    }
    return {m: rows[m] for m in METHODS if m in cfg.detector.methods}


def _needed_tags(cfg: PipelineConfig) -> list[str]:
    tags = []
    for tag, _ in _method_rows(cfg).values():
        if tag not in tags:
            tags.append(tag)
    return tags


def _run_fold(args) -> _FoldOutput:
    cfg, dataset, fold_index, train_idx, test_idx = args
    c = cfg.bench.class_count
    id_idx = dataset.id_indices()
    ood_idx = dataset.ood_indices()
    x_train = dataset.inputs[id_idx[train_idx]]
    y_train = dataset.labels[id_idx[train_idx]]
    x_test = dataset.inputs[id_idx[test_idx]]
    y_test = dataset.labels[id_idx[test_idx]]
    x_ood = dataset.inputs[ood_idx]
    ood_labels = np.full(x_ood.shape[0], OOD_LABEL, dtype=np.int64)

    seed = cfg.train_seed(fold_index)
    scores: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    accuracy: dict[str, float] = {}
    projections: dict[str, viz.ProjectionResult] = {}

    for tag in _needed_tags(cfg):
        section = cfg.train_baseline if tag == BASELINE_TAG else cfg.train_smoothed
        params = trainer.train(x_train, y_train, c, replace(section, seed=seed))
        feats_train = trainer.extract_features(params, x_train, y_train, c, tag)
        model = gaussian.fit_gaussians(
            feats_train, fit_background_cov=cfg.detector.background_cov
        )
        feats_test = trainer.extract_features(params, x_test, y_test, c, tag)
        feats_ood = trainer.extract_features(params, x_ood, ood_labels, c, tag)
        logits_test, _ = trainer.forward_batch(params, x_test)
        accuracy[tag] = metrics.id_accuracy(logits_test, y_test)

        for method, (row_tag, scorer) in _method_rows(cfg).items():
            if row_tag != tag:
                continue
            if scorer == "md":
                sv_id = gaussian.score_md(model, feats_test)
                sv_ood = gaussian.score_md(model, feats_ood)
            else:
                sv_id = gaussian.score_rmd(
                    model, feats_test, use_background_cov=cfg.detector.background_cov
                )
                sv_ood = gaussian.score_rmd(
                    model, feats_ood, use_background_cov=cfg.detector.background_cov
                )
            scores[method] = (sv_id.scores, sv_ood.scores)

        if fold_index == 0:
            templates = tuple(params.head_weights[c_] for c_ in cfg.projection_classes)
            projections[tag] = viz.project_to_weight_plane(
                feats_test, templates, cfg.projection_classes
            )
    return _FoldOutput(
        fold_index=fold_index, scores=scores, accuracy=accuracy, projections=projections
    )


# ---------------------------------------------------------------------------
# The full run.
# ---------------------------------------------------------------------------


@dataclass
class ExperimentResult:
    config: PipelineConfig
    run_dir: Path | None
    fold_reports: dict[str, list[metrics.EvalReport]]
    aggregated: dict[str, metrics.EvalReport]
    accuracy: dict[str, float]
    projection_ratios: dict[str, float]
    densities: dict[str, viz.DensitySeries]


def _fold_report(
    cfg: PipelineConfig, method: str, out: _FoldOutput
) -> metrics.EvalReport:
    tag, _ = _method_rows(cfg)[method]
    id_scores, ood_scores = out.scores[method]
    return metrics.evaluate_scores(
        id_scores,
        ood_scores,
        target_tpr=cfg.metrics.target_tpr,
        method=method,
        source_tag=tag,
        accuracy=out.accuracy[tag],
    )


def run_experiment(
    cfg: PipelineConfig,
    run_dir: Path | None = None,
    parallel: bool = False,
    dataset: bench.LabeledDataset | None = None,
    log=None,
) -> ExperimentResult:
    """Execute the whole pipeline; write reports and figure data under run_dir.

    ``run_dir=None`` keeps everything in memory (used by tests). A supplied
    ``dataset`` must echo the resolved bench config exactly; otherwise the
    dataset is generated from the derived seed. Per-fold report files are
    written as folds complete, so earlier folds survive a later failure.
    """
    say = log if log is not None else (lambda _msg: None)
    resolved = cfg.resolved_bench()
    if dataset is None:
        say(f"generating dataset (seed {resolved.seed})")
        dataset = bench.generate(resolved)
    elif dataset.config != resolved:
        raise ConfigInvalid(
            "supplied dataset does not echo the resolved bench config; "
            f"expected {resolved}, file carries {dataset.config}"
        )

    if run_dir is not None:
        run_dir = Path(run_dir)
        if run_dir.exists():
            shutil.rmtree(run_dir)  # always recompute; no cache reuse
        (run_dir / "reports").mkdir(parents=True)
        save_pipeline_config(cfg, run_dir / "config.yaml")
        bench.save_dataset(dataset, run_dir / "dataset.csv")

    n_id = dataset.id_indices().shape[0]
    folds = bench.kfold_split(n_id, cfg.folds, cfg.fold_seed())
    jobs = []
    for i, test_idx in enumerate(folds):
        train_idx = np.concatenate([folds[j] for j in range(cfg.folds) if j != i])
        jobs.append((cfg, dataset, i, train_idx, test_idx))

    method_rows = _method_rows(cfg)
    fold_reports: dict[str, list[metrics.EvalReport]] = {m: [] for m in method_rows}
    pooled: dict[str, list[tuple[np.ndarray, np.ndarray]]] = {m: [] for m in method_rows}
    accuracies: dict[str, list[float]] = {t: [] for t in _needed_tags(cfg)}
    projections: dict[str, viz.ProjectionResult] = {}

    def consume(out: _FoldOutput):
        say(f"fold {out.fold_index}: scored {len(out.scores)} method rows")
        for method in method_rows:
            report = _fold_report(cfg, method, out)
            fold_reports[method].append(report)
            pooled[method].append(out.scores[method])
            if run_dir is not None:
                metrics.save_report(
                    report, run_dir / "reports" / f"fold{out.fold_index:02d}_{method}.txt"
                )
        for tag, acc in out.accuracy.items():
            accuracies[tag].append(acc)
        projections.update(out.projections)

    if parallel:
        with ProcessPoolExecutor() as pool:
            for out in pool.map(_run_fold, jobs):
                consume(out)
    else:
        for job in jobs:
            try:
                consume(_run_fold(job))
            except NearOodError as exc:
                raise type(exc)(f"fold {job[2]}: {exc}") from exc

    aggregated = {m: metrics.aggregate_reports(fold_reports[m]) for m in method_rows}
    mean_accuracy = {t: float(np.mean(v)) for t, v in accuracies.items()}

    densities: dict[str, viz.DensitySeries] = {}
    for method in method_rows:
        id_all = np.concatenate([s for s, _ in pooled[method]])
        ood_all = np.concatenate([s for _, s in pooled[method]])
        series = viz.score_density(
            np.concatenate([id_all, ood_all]),
            np.concatenate([np.zeros(id_all.shape[0], bool), np.ones(ood_all.shape[0], bool)]),
            cfg.metrics.bins,
        )
        densities[method] = replace(series, method=method)

    ratios = {
        tag: viz.projection_separation_ratio(result)
        for tag, result in projections.items()
    }

    if run_dir is not None:
        for method, report in aggregated.items():
            metrics.save_report(report, run_dir / "reports" / f"aggregate_{method}.txt")
        (run_dir / "table1.txt").write_text(
            metrics.format_report_table([aggregated[m] for m in method_rows])
        )
        table2 = ["model            id_accuracy"]
        for tag in _needed_tags(cfg):
            table2.append(f"{tag:<16} {mean_accuracy[tag]:>11.4f}")
        (run_dir / "table2.txt").write_text("\n".join(table2) + "\n")
        for tag, result in projections.items():
            viz.save_projection(result, run_dir / f"projection_{tag}.csv")
        for method, series in densities.items():
            viz.save_density(series, run_dir / f"density_{method}.csv")
        _write_summary(run_dir / "summary.txt", cfg, aggregated, mean_accuracy, ratios)
        say(f"wrote {run_dir}")

    return ExperimentResult(
        config=cfg,
        run_dir=run_dir,
        fold_reports=fold_reports,
        aggregated=aggregated,
        accuracy=mean_accuracy,
        projection_ratios=ratios,
        densities=densities,
    )


def _write_summary(path, cfg, aggregated, mean_accuracy, ratios) -> None:
    lines = ["nearood-summary 1"]
    lines.append(f"config_hash {cfg.config_hash()}")
    lines.append(f"master_seed {cfg.seed}")
    lines.append(f"folds {cfg.folds}")
    for method, report in aggregated.items():
        lines.append(f"auroc {method} {report.auroc:.17g}")
    for tag, acc in mean_accuracy.items():
        lines.append(f"id_accuracy {tag} {acc:.17g}")
    for tag, ratio in ratios.items():
        lines.append(f"projection_separation {tag} {ratio:.17g}")
    Path(path).write_text("\n".join(lines) + "\n")


def default_run_dir(cfg: PipelineConfig, workspace: Path | None = None) -> Path:
    """workspace/run_<confighash>_seed<seed>; one directory per run."""
    base = Path(workspace) if workspace is not None else Path(cfg.workspace)
    return base / f"run_{cfg.config_hash()}_seed{cfg.seed}"
