"""Plot-ready data for the two qualitative figures.

``project_to_weight_plane`` drops penultimate activations onto the plane
spanned by three class templates (last-layer weight rows by default) so
the cluster geometry can be plotted in 2-D. ``score_density`` bins ID and
OOD score distributions on shared uniform edges. Neither renders anything;
both emit delimited text for an external plotter.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations
from pathlib import Path

import numpy as np

from .errors import DataError, EmptyGroup, UnknownClass
from .gaussian import FeatureSet
from .numerics import as_vector, orthonormal_plane_basis


@dataclass(frozen=True)
class ProjectionResult:
    """Plane coordinates for samples of three classes plus the templates.

    The plane is anchored at the first template; ``coords[i]`` are the
    components of (activation - anchor) along the basis (u1, u2).
    """

    coords: np.ndarray  # (M, 2)
    labels: np.ndarray  # (M,)
    source_tag: str
    u1: np.ndarray
    u2: np.ndarray
    anchor: np.ndarray
    template_classes: tuple[int, int, int]
    template_coords: np.ndarray  # (3, 2)


@dataclass(frozen=True)
class DensitySeries:
    """Uniform-bin histogram masses for the ID and OOD score groups.

    ``degenerate`` marks the all-scores-equal case, emitted as a single
    collapsed bin with all mass instead of an error.
    """

    bin_edges: np.ndarray  # (bins + 1,)
    id_mass: np.ndarray
    ood_mass: np.ndarray
    method: str = ""
    degenerate: bool = False


def project_to_weight_plane(
    features: FeatureSet,
    templates: tuple,
    class_filter: tuple[int, int, int],
) -> ProjectionResult:
    """Project samples of three classes onto the plane through three templates.

    ``templates`` are the three anchor vectors (w_a, w_b, w_c); the basis
    comes from orthonormal_plane_basis, so DegeneratePlane propagates when
    they are collinear. The templates themselves are projected and returned
    as reference points.
    """
    if len(templates) != 3 or len(class_filter) != 3:
        raise DataError("need exactly three templates and three class indices")
    w_a, w_b, w_c = (as_vector(t, f"template {i}") for i, t in enumerate(templates))
    if not (w_a.shape == w_b.shape == w_c.shape == (features.feature_dim,)):
        raise DataError("templates must match the feature dimension")
    for c in class_filter:
        if not 0 <= c < features.class_count:
            raise UnknownClass(f"class {c} not in 0..{features.class_count - 1}")
        if not np.any(features.labels == c):
            raise UnknownClass(f"class {c} has no rows in this feature set")
    u1, u2 = orthonormal_plane_basis(w_a, w_b, w_c)

    mask = np.isin(features.labels, np.asarray(class_filter))
    rows = features.features[mask] - w_a
    coords = np.column_stack([rows @ u1, rows @ u2])
    template_rows = np.stack([w_a, w_b, w_c]) - w_a
    template_coords = np.column_stack([template_rows @ u1, template_rows @ u2])
    return ProjectionResult(
        coords=coords,
        labels=features.labels[mask],
        source_tag=features.source_tag,
        u1=u1,
        u2=u2,
        anchor=w_a,
        template_classes=tuple(int(c) for c in class_filter),
        template_coords=template_coords,
    )


def projection_separation_ratio(result: ProjectionResult) -> float:
    """Between-centroid distance over within-class spread, in the plane.

    Mean pairwise distance between the three projected class centroids,
    divided by the mean per-class RMS distance of samples to their
    centroid. Higher means tighter, better-separated clusters.
    """
    centroids = []
    spreads = []
    for c in result.template_classes:
        pts = result.coords[result.labels == c]
        centroid = pts.mean(axis=0)
        centroids.append(centroid)
        spreads.append(np.sqrt(np.mean(np.sum((pts - centroid) ** 2, axis=1))))
    between = np.mean([
        np.linalg.norm(a - b) for a, b in combinations(centroids, 2)
    ])
    within = float(np.mean(spreads))
    if within == 0.0:
        raise DataError("zero within-class spread; ratio undefined")
    return float(between) / within


def score_density(scores, is_ood, bins: int) -> DensitySeries:
    """Histogram ID and OOD scores on shared uniform edges spanning all scores.

    Bins are half-open with the last bin closed. Each group's masses sum
    to 1. All-equal scores yield a degenerate single-bin series.
    """
    s = np.asarray(scores, dtype=np.float64)
    flags = np.asarray(is_ood, dtype=bool)
    if s.ndim != 1 or s.shape != flags.shape:
        raise DataError("scores and is_ood flags must be aligned 1-D arrays")
    if not np.all(np.isfinite(s)):
        raise DataError("scores contain non-finite entries")
    if bins < 2:
        raise DataError(f"need at least 2 bins, got {bins}")
    id_scores = s[~flags]
    ood_scores = s[flags]
    if id_scores.size == 0 or ood_scores.size == 0:
        raise EmptyGroup("need at least one ID and one OOD score")
    lo, hi = float(s.min()), float(s.max())
    if lo == hi:
        return DensitySeries(
            bin_edges=np.array([lo, hi]),
            id_mass=np.array([1.0]),
            ood_mass=np.array([1.0]),
            degenerate=True,
        )
    edges = np.linspace(lo, hi, bins + 1)
    id_counts, _ = np.histogram(id_scores, bins=edges)
    ood_counts, _ = np.histogram(ood_scores, bins=edges)
    return DensitySeries(
        bin_edges=edges,
        id_mass=id_counts / id_counts.sum(),
        ood_mass=ood_counts / ood_counts.sum(),
    )


# ---------------------------------------------------------------------------
# Delimited-text export, formats documented in the README.
# ---------------------------------------------------------------------------

_PROJECTION_MAGIC = "nearood-projection 1"
_DENSITY_MAGIC = "nearood-density 1"


def save_projection(result: ProjectionResult, path) -> None:
    """Columns (class, source_tag, u, v); header block carries the basis.

    Template reference points are emitted as rows tagged "template".
    """
    out = ["# " + _PROJECTION_MAGIC]
    out.append("# anchor=" + " ".join(f"{v:.17g}" for v in result.anchor))
    out.append("# u1=" + " ".join(f"{v:.17g}" for v in result.u1))
    out.append("# u2=" + " ".join(f"{v:.17g}" for v in result.u2))
    out.append("class,source_tag,u,v")
    for c, (u, v) in zip(result.template_classes, result.template_coords):
        out.append(f"{c},template,{u:.17g},{v:.17g}")
    for label, (u, v) in zip(result.labels, result.coords):
        out.append(f"{int(label)},{result.source_tag},{u:.17g},{v:.17g}")
    Path(path).write_text("\n".join(out) + "\n")


def save_density(series: DensitySeries, path) -> None:
    """Columns (bin_left, bin_right, id_mass, ood_mass)."""
    out = ["# " + _DENSITY_MAGIC]
    out.append(f"# method={series.method}")
    out.append(f"# degenerate={'true' if series.degenerate else 'false'}")
    out.append("bin_left,bin_right,id_mass,ood_mass")
    for i in range(series.id_mass.shape[0]):
        out.append(
            f"{series.bin_edges[i]:.17g},{series.bin_edges[i + 1]:.17g},"
            f"{series.id_mass[i]:.17g},{series.ood_mass[i]:.17g}"
        )
    Path(path).write_text("\n".join(out) + "\n")
