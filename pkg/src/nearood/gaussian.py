"""Class-conditional Gaussian OOD detector on feature embeddings.

Fits one mean per class plus a single covariance pooled across classes
(normalized by N, not N - C), stored through its Cholesky factor, and
scores test rows by Mahalanobis distance (MD) or by the relative /
likelihood-ratio variant (RMD) that subtracts the distance to a global
background Gaussian. Higher scores mean "more in-distribution".
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    ConfigInvalid,
    ContainsOodRows,
    DataError,
    DimensionMismatch,
    EmptyClass,
    NotPositiveDefinite,
    UnknownClass,
)
from .numerics import CholeskyFactor, as_matrix, cholesky, whiten

# Sentinel label for rows whose true class is none of the C training classes.
OOD_LABEL = -1

# Multiples of trace(cov)/p tried in order until factorization succeeds.
SHRINKAGE_LADDER = (0.0, 1e-10, 1e-8, 1e-6, 1e-4)


@dataclass(frozen=True)
class FeatureSet:
    """N feature rows with integer class labels; OOD rows carry OOD_LABEL.

    ``source_tag`` records feature provenance (e.g. "baseline" vs
    "label-smoothed") and travels into fitted models and reports.
    """

    features: np.ndarray
    labels: np.ndarray
    class_count: int
    source_tag: str = ""

    def __post_init__(self):
        feats = as_matrix(self.features, "features")
        labels = np.array(self.labels, dtype=np.int64)
        if labels.ndim != 1:
            raise DataError("labels must be 1-D")
        if feats.shape[0] != labels.shape[0]:
            raise DimensionMismatch(
                f"{feats.shape[0]} feature rows vs {labels.shape[0]} labels"
            )
        if feats.shape[0] < 1:
            raise DataError("feature set must contain at least one row")
        if self.class_count < 1:
            raise DataError("class_count must be positive")
        bad = (labels != OOD_LABEL) & ((labels < 0) | (labels >= self.class_count))
        if np.any(bad):
            raise DataError(
                f"labels must be in 0..{self.class_count - 1} or OOD_LABEL, "
                f"found {labels[bad][0]}"
            )
        feats.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labels)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def has_ood_rows(self) -> bool:
        return bool(np.any(self.labels == OOD_LABEL))


@dataclass(frozen=True)
class GaussianOodModel:
    """Fitted detector: per-class means, global mean, shared covariance factor.

    ``shrinkage_lambda`` is 0 unless the raw pooled covariance failed to
    factor; the applied value is recorded so fitted artifacts are exactly
    reproducible. ``background_factor`` is only present when the model was
    fitted with a separately estimated background covariance (non-default
    RMD variant).
    """

    class_means: np.ndarray  # (C, p)
    global_mean: np.ndarray  # (p,)
    cov_factor: CholeskyFactor
    shrinkage_lambda: float
    class_counts: np.ndarray  # (C,)
    source_tag: str = ""
    background_factor: CholeskyFactor | None = None
    background_lambda: float = 0.0

    def __post_init__(self):
        means = as_matrix(self.class_means, "class_means")
        means.setflags(write=False)
        gmean = np.array(self.global_mean, dtype=np.float64)
        gmean.setflags(write=False)
        counts = np.array(self.class_counts, dtype=np.int64)
        counts.setflags(write=False)
        object.__setattr__(self, "class_means", means)
        object.__setattr__(self, "global_mean", gmean)
        object.__setattr__(self, "class_counts", counts)
        if means.shape[1] != self.cov_factor.dim or gmean.shape[0] != self.cov_factor.dim:
            raise DimensionMismatch("mean dimensions disagree with covariance factor")

    @property
    def class_count(self) -> int:
        return self.class_means.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.class_means.shape[1]


@dataclass(frozen=True)
class ScoreVector:
    """Per-sample OOD scores under one method; higher = more ID.

    For method "MD", scores[i] = -min_c per_class_distances[i, c].
    For method "RMD", per_class_distances holds the relative distances
    (class distance minus background distance) and the same identity holds.
    """

    method: str
    scores: np.ndarray
    per_class_distances: np.ndarray | None = None

    def __post_init__(self):
        if self.method not in ("MD", "RMD"):
            raise DataError(f"unknown scoring method {self.method!r}")
        scores = np.array(self.scores, dtype=np.float64)
        scores.setflags(write=False)
        object.__setattr__(self, "scores", scores)
        if self.per_class_distances is not None:
            d = as_matrix(self.per_class_distances, "per_class_distances")
            d.setflags(write=False)
            object.__setattr__(self, "per_class_distances", d)


def _factor_with_shrinkage(cov: np.ndarray) -> tuple[CholeskyFactor, float]:
    """Factor cov + lambda*I for the smallest lambda on the shrinkage ladder.

    The ladder is scaled by trace(cov)/p so the repair is scale-aware; a
    zero-trace covariance (all rows identical) falls back to absolute steps.
    """
    p = cov.shape[0]
    scale = float(np.trace(cov)) / p
    if scale <= 0.0:
        scale = 1.0
    last_exc: Exception | None = None
    for mult in SHRINKAGE_LADDER:
        lam = mult * scale
        try:
            return cholesky(cov + lam * np.eye(p)), lam
        except NotPositiveDefinite as exc:
            last_exc = exc
    raise NotPositiveDefinite(
        f"covariance not factorable even at lambda={SHRINKAGE_LADDER[-1] * scale:g}"
    ) from last_exc


def fit_gaussians(train: FeatureSet, fit_background_cov: bool = False) -> GaussianOodModel:
    """Fit per-class means and the pooled shared covariance.

    The covariance is the within-class scatter divided by N (total sample
    count). Every class in 0..C-1 must have at least 2 members and the set
    must contain no OOD rows. With ``fit_background_cov`` the model also
    carries a covariance fitted around the global mean, enabling the
    non-default RMD background variant.
    """
    if train.has_ood_rows():
        raise ContainsOodRows("training features contain OOD-labeled rows")
    z = train.features
    n, p = z.shape
    c = train.class_count
    counts = np.bincount(train.labels, minlength=c)
    if np.any(counts < 2):
        lacking = int(np.argmin(counts))
        raise EmptyClass(f"class {lacking} has {counts[lacking]} samples, need >= 2")

    # np.mean reduces pairwise over contiguous rows, which keeps the fit
    # permutation-stable to well below the 1e-12 contract.
    class_means = np.stack([z[train.labels == k].mean(axis=0) for k in range(c)])
    global_mean = z.mean(axis=0)

    centered = z - class_means[train.labels]
    cov = centered.T @ centered / n
    cov = 0.5 * (cov + cov.T)
    factor, lam = _factor_with_shrinkage(cov)

    background_factor = None
    background_lambda = 0.0
    if fit_background_cov:
        centered_g = z - global_mean
        cov_g = centered_g.T @ centered_g / n
        cov_g = 0.5 * (cov_g + cov_g.T)
        background_factor, background_lambda = _factor_with_shrinkage(cov_g)

    return GaussianOodModel(
        class_means=class_means,
        global_mean=global_mean,
        cov_factor=factor,
        shrinkage_lambda=lam,
        class_counts=counts,
        source_tag=train.source_tag,
        background_factor=background_factor,
        background_lambda=background_lambda,
    )


def mahalanobis(model: GaussianOodModel, z, class_index: int) -> float:
    """Squared Mahalanobis distance of one vector to one class mean.

    Evaluated as ||L^{-1}(z - mu_c)||^2 through a single triangular solve.
    """
    v = np.asarray(z, dtype=np.float64)
    if v.ndim != 1 or v.shape[0] != model.feature_dim:
        raise DimensionMismatch(
            f"expected vector of dim {model.feature_dim}, got shape {v.shape}"
        )
    if not 0 <= class_index < model.class_count:
        raise UnknownClass(f"class {class_index} not in 0..{model.class_count - 1}")
    w = whiten(model.cov_factor, (v - model.class_means[class_index])[:, None])
    return float(np.sum(w * w))


def _distance_matrix(model: GaussianOodModel, feats: np.ndarray) -> np.ndarray:
    """(N, C) squared Mahalanobis distances to every class mean."""
    dists = np.empty((feats.shape[0], model.class_count))
    for k in range(model.class_count):
        w = whiten(model.cov_factor, (feats - model.class_means[k]).T)
        dists[:, k] = np.sum(w * w, axis=0)
    return dists


def _global_distances(
    model: GaussianOodModel, feats: np.ndarray, use_background_cov: bool
) -> np.ndarray:
    if use_background_cov:
        if model.background_factor is None:
            raise ConfigInvalid(
                "model was fitted without a background covariance; "
                "refit with fit_background_cov=True"
            )
        factor = model.background_factor
    else:
        factor = model.cov_factor
    w = whiten(factor, (feats - model.global_mean).T)
    return np.sum(w * w, axis=0)


def _check_dims(model: GaussianOodModel, test: FeatureSet):
    if test.feature_dim != model.feature_dim:
        raise DimensionMismatch(
            f"model dim {model.feature_dim} != feature dim {test.feature_dim}"
        )


def score_md(model: GaussianOodModel, test: FeatureSet) -> ScoreVector:
    """Mahalanobis OOD scores: -min over classes of the squared distance."""
    _check_dims(model, test)
    dists = _distance_matrix(model, test.features)
    return ScoreVector(method="MD", scores=-dists.min(axis=1), per_class_distances=dists)


def score_rmd(
    model: GaussianOodModel, test: FeatureSet, use_background_cov: bool = False
) -> ScoreVector:
    """Relative-Mahalanobis scores: -min_c (MD_c - MD_global).

    The background Gaussian sits at the global mean and, by default,
    reuses the shared class covariance; ``use_background_cov`` switches to
    the separately fitted background covariance when the model carries one.
    """
    _check_dims(model, test)
    dists = _distance_matrix(model, test.features)
    rel = dists - _global_distances(model, test.features, use_background_cov)[:, None]
    return ScoreVector(method="RMD", scores=-rel.min(axis=1), per_class_distances=rel)


# ---------------------------------------------------------------------------
# Serialization. Plain text, hex floats (lossless), one logical item per line.
# ---------------------------------------------------------------------------

_MODEL_MAGIC = "nearood-gaussian-model 1"
_FEATURES_MAGIC = "nearood-features 1"


def _hex_row(values: np.ndarray) -> str:
    return " ".join(float(v).hex() for v in values)


def _parse_hex_row(text: str) -> np.ndarray:
    return np.array([float.fromhex(tok) for tok in text.split()], dtype=np.float64)


def save_model(model: GaussianOodModel, path) -> None:
    lines = [_MODEL_MAGIC]
    lines.append(f"feature_dim {model.feature_dim}")
    lines.append(f"class_count {model.class_count}")
    lines.append(f"source_tag {model.source_tag}")
    lines.append(f"shrinkage_lambda {float(model.shrinkage_lambda).hex()}")
    lines.append("class_counts " + " ".join(str(int(x)) for x in model.class_counts))
    lines.append("global_mean " + _hex_row(model.global_mean))
    for k in range(model.class_count):
        lines.append(f"class_mean {k} " + _hex_row(model.class_means[k]))
    for i in range(model.feature_dim):
        lines.append(f"cov_row {i} " + _hex_row(model.cov_factor.lower[i]))
    if model.background_factor is not None:
        lines.append(f"background_lambda {float(model.background_lambda).hex()}")
        for i in range(model.feature_dim):
            lines.append(f"background_row {i} " + _hex_row(model.background_factor.lower[i]))
    Path(path).write_text("\n".join(lines) + "\n")


def load_model(path) -> GaussianOodModel:
    path = Path(path)
    if not path.exists():
        raise DataError(f"model file not found: {path}")
    lines = path.read_text().splitlines()
    if not lines or lines[0] != _MODEL_MAGIC:
        raise DataError(f"{path} is not a gaussian model file")
    fields: dict[str, str] = {}
    class_means: dict[int, np.ndarray] = {}
    cov_rows: dict[int, np.ndarray] = {}
    background_rows: dict[int, np.ndarray] = {}
    for line in lines[1:]:
        if not line.strip():
            continue
        key, _, rest = line.partition(" ")
        if key in ("class_mean", "cov_row", "background_row"):
            idx_text, _, row_text = rest.partition(" ")
            row = _parse_hex_row(row_text)
            target = {"class_mean": class_means, "cov_row": cov_rows,
                      "background_row": background_rows}[key]
            target[int(idx_text)] = row
        else:
            fields[key] = rest
    try:
        p = int(fields["feature_dim"])
        c = int(fields["class_count"])
        means = np.stack([class_means[k] for k in range(c)])
        lower = np.stack([cov_rows[i] for i in range(p)])
        background_factor = None
        background_lambda = 0.0
        if background_rows:
            background_factor = CholeskyFactor(
                lower=np.stack([background_rows[i] for i in range(p)])
            )
            background_lambda = float.fromhex(fields["background_lambda"])
        return GaussianOodModel(
            class_means=means,
            global_mean=_parse_hex_row(fields["global_mean"]),
            cov_factor=CholeskyFactor(lower=lower),
            shrinkage_lambda=float.fromhex(fields["shrinkage_lambda"]),
            class_counts=np.array(fields["class_counts"].split(), dtype=np.int64),
            source_tag=fields.get("source_tag", ""),
            background_factor=background_factor,
            background_lambda=background_lambda,
        )
    except (KeyError, ValueError) as exc:
        raise DataError(f"malformed model file {path}: {exc}") from exc


def save_features(fs: FeatureSet, path) -> None:
    """Delimited text: header block, then one ``label,f0,...`` row per sample."""
    out = ["# " + _FEATURES_MAGIC]
    out.append(f"# feature_dim={fs.feature_dim}")
    out.append(f"# class_count={fs.class_count}")
    out.append(f"# source_tag={fs.source_tag}")
    out.append("label," + ",".join(f"f{j}" for j in range(fs.feature_dim)))
    for i in range(fs.n):
        row = ",".join(f"{v:.17g}" for v in fs.features[i])
        out.append(f"{int(fs.labels[i])},{row}")
    Path(path).write_text("\n".join(out) + "\n")


def load_features(path) -> FeatureSet:
    path = Path(path)
    if not path.exists():
        raise DataError(f"feature file not found: {path}")
    header: dict[str, str] = {}
    labels: list[int] = []
    rows: list[list[float]] = []
    lines = path.read_text().splitlines()
    if not lines or lines[0] != "# " + _FEATURES_MAGIC:
        raise DataError(f"{path} is not a feature file")
    for line in lines[1:]:
        if line.startswith("#"):
            key, _, value = line[1:].strip().partition("=")
            header[key.strip()] = value
        elif line.startswith("label,") or not line.strip():
            continue
        else:
            parts = line.split(",")
            labels.append(int(parts[0]))
            rows.append([float(tok) for tok in parts[1:]])
    try:
        return FeatureSet(
            features=np.array(rows, dtype=np.float64),
            labels=np.array(labels, dtype=np.int64),
            class_count=int(header["class_count"]),
            source_tag=header.get("source_tag", ""),
        )
    except (KeyError, ValueError) as exc:
        raise DataError(f"malformed feature file {path}: {exc}") from exc
