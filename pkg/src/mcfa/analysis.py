"""Interpretation tooling: PCA projections, Mahalanobis class separation,
cosine nearest neighbors, and per-example diagnostics dumps comparing the
unaltered and altered vector spaces."""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError, DataError, ShapeError
from .model import ModelBundle, forward_report
from .numerics import Tensor


@dataclass
class ProjectionResult:
    """Top-k principal axes (orthonormal rows), the projected data, and the
    variance captured by each axis."""

    components: Tensor
    projected: Tensor
    explained_variance: np.ndarray
    explained_ratio: np.ndarray


@dataclass
class SeparationReport:
    """Mahalanobis distances per (view, class pair, space)."""

    rows: list[tuple[int, int, int, float, str]]  # view, class_a, class_b, distance, space


def pca_project(vectors, k: int) -> ProjectionResult:
    """Project mean-centered data onto its top-k covariance eigenvectors.

    Eigenpairs come from power iteration with deflation (tolerance 1e-10,
    max 10000 sweeps), re-orthogonalizing against found components each
    sweep. Sign convention: the largest-magnitude entry of each component
    is positive.
    """
    x = vectors.data if isinstance(vectors, Tensor) else np.asarray(vectors, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"pca input must be [n, d], got shape {x.shape}")
    n, d = x.shape
    if n < 2:
        raise DataError(f"pca needs at least 2 points, got {n}")
    if not 1 <= k <= min(n - 1, d):
        raise ConfigError(f"k must be in [1, {min(n - 1, d)}], got {k}")
    centered = x - x.mean(axis=0)
    cov = centered.T @ centered / (n - 1)
    total = float(np.trace(cov))
    if total <= 0.0:
        raise DataError("zero variance in all directions")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(1742)))
    components = np.zeros((k, d))
    eigenvalues = np.zeros(k)
    work = cov.copy()
    for c in range(k):
        b = rng.standard_normal(d)
        b -= components[:c].T @ (components[:c] @ b)
        norm = np.linalg.norm(b)
        b = b / norm if norm > 0 else np.eye(d)[c % d]
        for _ in range(10_000):
            nxt = work @ b
            nxt -= components[:c].T @ (components[:c] @ nxt)
            norm = np.linalg.norm(nxt)
            if norm < 1e-14:
                # exhausted the data's rank; fall back to any orthonormal completion
                nxt = _orthonormal_completion(components[:c], d, c)
                b = nxt
                break
            nxt /= norm
            if np.linalg.norm(nxt - b) < 1e-10:
                b = nxt
                break
            b = nxt
        top = int(np.argmax(np.abs(b)))
        if b[top] < 0:
            b = -b
        components[c] = b
        eigenvalues[c] = float(b @ cov @ b)
        work -= eigenvalues[c] * np.outer(b, b)
    return ProjectionResult(
        components=Tensor(components),
        projected=Tensor(centered @ components.T),
        explained_variance=eigenvalues,
        explained_ratio=eigenvalues / total,
    )


def _orthonormal_completion(found: np.ndarray, d: int, c: int) -> np.ndarray:
    for i in range(d):
        b = np.eye(d)[(c + i) % d]
        b -= found.T @ (found @ b)
        norm = np.linalg.norm(b)
        if norm > 1e-8:
            return b / norm
    raise DataError("could not complete an orthonormal basis")


def mahalanobis_between(a, b) -> float:
    """Distance between two cluster means under the pooled within-class
    covariance, ridged with eps*I where eps = 1e-6 * trace/d."""
    a = a.data if isinstance(a, Tensor) else np.asarray(a, dtype=np.float64)
    b = b.data if isinstance(b, Tensor) else np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"cluster shapes disagree: {a.shape} vs {b.shape}")
    d = a.shape[1]
    diff = a.mean(axis=0) - b.mean(axis=0)
    ca = np.cov(a, rowvar=False, ddof=1) if a.shape[0] > 1 else np.zeros((d, d))
    cb = np.cov(b, rowvar=False, ddof=1) if b.shape[0] > 1 else np.zeros((d, d))
    ca = np.atleast_2d(ca)
    cb = np.atleast_2d(cb)
    dof = max(a.shape[0] + b.shape[0] - 2, 1)
    pooled = ((a.shape[0] - 1) * ca + (b.shape[0] - 1) * cb) / dof
    ridge = 1e-6 * float(np.trace(pooled)) / d
    pooled = pooled + ridge * np.eye(d)
    try:
        solved = np.linalg.solve(pooled, diff)
    except np.linalg.LinAlgError as err:
        raise DataError(f"singular pooled covariance: {err}") from err
    q = float(diff @ solved)
    if not np.isfinite(q):
        raise DataError("singular pooled covariance")
    return float(np.sqrt(max(q, 0.0)))


def nearest_neighbors(query_index: int, vectors, k: int) -> tuple[list[int], list[float]]:
    """Top-k cosine neighbors of one row, excluding itself; ties resolve to
    the lower index. Zero-norm rows are excluded with a warning."""
    x = vectors.data if isinstance(vectors, Tensor) else np.asarray(vectors, dtype=np.float64)
    n = x.shape[0]
    if not 0 <= query_index < n:
        raise DataError(f"query index {query_index} out of range for {n} vectors")
    if k >= n:
        raise ConfigError(f"k must be < n={n}, got {k}")
    norms = np.linalg.norm(x, axis=1)
    if norms[query_index] == 0.0:
        raise DataError(f"query vector {query_index} has zero norm")
    zero = np.flatnonzero(norms == 0.0)
    if zero.size:
        warnings.warn(f"excluding zero-norm vectors {zero.tolist()}", stacklevel=2)
    sims = np.zeros(n)
    valid = norms > 0.0
    sims[valid] = (x[valid] @ x[query_index]) / (norms[valid] * norms[query_index])
    candidates = [i for i in range(n) if i != query_index and valid[i]]
    candidates.sort(key=lambda i: (-sims[i], i))
    top = candidates[:k]
    return top, [float(sims[i]) for i in top]


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise DataError("cosine similarity of a zero vector")
    return float(a @ b / (na * nb))


# ---------------------------------------------------------------------------
# Vector collection and CSV emission


def fmt(x: float) -> str:
    """Full-precision decimal that round-trips float64."""
    return repr(float(x))


def collect_spaces(bundle: ModelBundle, examples) -> dict[str, list[np.ndarray]]:
    """Per-view [n, d] matrices for the unaltered space and, in mcfa mode,
    the altered space."""
    unaltered = [[] for _ in range(bundle.n_views)]
    altered = [[] for _ in range(bundle.n_views)] if bundle.mode == "mcfa" else None
    for ex in examples:
        _, report = forward_report(bundle, ex)
        if report is not None:
            for v in range(bundle.n_views):
                unaltered[v].append(report.unaltered[v].data)
                altered[v].append(report.altered[v].data)
        else:
            from .model import _features

            feat, _ = _features(bundle, ex)
            d = bundle.encoder_dim
            for v in range(bundle.n_views):
                unaltered[v].append(feat.data[v * d : (v + 1) * d])
    spaces = {"unaltered": [np.stack(m) for m in unaltered]}
    if altered is not None:
        spaces["altered"] = [np.stack(m) for m in altered]
    return spaces


def separation_rows(bundle: ModelBundle, examples) -> SeparationReport:
    labels = np.array([ex.label for ex in examples])
    spaces = collect_spaces(bundle, examples)
    rows = []
    classes = sorted(set(int(c) for c in labels))
    for space in sorted(spaces):
        for view in range(bundle.n_views):
            mat = spaces[space][view]
            for i, ca in enumerate(classes):
                for cb in classes[i + 1 :]:
                    dist = mahalanobis_between(mat[labels == ca], mat[labels == cb])
                    rows.append((view, ca, cb, dist, space))
    return SeparationReport(rows=rows)


def write_separation_csv(report: SeparationReport, path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["view", "class_a", "class_b", "mahalanobis", "space"])
        for view, ca, cb, dist, space in report.rows:
            w.writerow([view, ca, cb, fmt(dist), space])


def write_projection_csv(bundle: ModelBundle, examples, k: int, path: str, space: str) -> None:
    """Plot-ready per-view PCA projections: index,label,view,pc1..pck."""
    spaces = collect_spaces(bundle, examples)
    if space not in spaces:
        raise ConfigError(f"space {space!r} not available for mode {bundle.mode}")
    labels = [ex.label for ex in examples]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "label", "view"] + [f"pc{i + 1}" for i in range(k)])
        for view in range(bundle.n_views):
            proj = pca_project(spaces[space][view], k).projected.data
            for i, lab in enumerate(labels):
                w.writerow([i, lab, view] + [fmt(v) for v in proj[i]])


def write_neighbors_csv(bundle: ModelBundle, examples, k: int, path: str) -> None:
    spaces = collect_spaces(bundle, examples)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["view", "space", "query", "rank", "neighbor", "similarity"])
        for space in sorted(spaces):
            for view in range(bundle.n_views):
                mat = spaces[space][view]
                for q in range(mat.shape[0]):
                    if np.linalg.norm(mat[q]) == 0.0:
                        continue
                    idx, sims = nearest_neighbors(q, mat, k)
                    for rank, (i, s) in enumerate(zip(idx, sims), start=1):
                        w.writerow([view, space, q, rank, i, fmt(s)])


def dump_diagnostics(bundle: ModelBundle, examples, out_path: str) -> str:
    """Per-(example, view) fixing diagnostics plus a companion vectors CSV.

    The main CSV holds self usability, mean gate, and the attention row;
    the companion `<stem>_vectors.csv` holds the full unaltered and
    altered vectors so every number can be recomputed. Rows are ordered by
    example index, then view index.
    """
    if bundle.mode != "mcfa":
        raise ConfigError(f"diagnostics need an mcfa-mode model, got mode {bundle.mode!r}")
    out_path = str(out_path)
    stem = out_path[: -len(".csv")] if out_path.endswith(".csv") else out_path
    vec_path = f"{stem}_vectors.csv"
    n_views = bundle.n_views
    with open(out_path, "w", encoding="utf-8", newline="") as fh, open(
        vec_path, "w", encoding="utf-8", newline=""
    ) as vfh:
        w = csv.writer(fh)
        vw = csv.writer(vfh)
        w.writerow(
            ["example", "view", "label", "self_usability", "mean_gate"]
            + [f"att_{j}" for j in range(n_views)]
        )
        vw.writerow(["example", "view", "space"] + [f"v{j}" for j in range(bundle.encoder_dim)])
        for i, ex in enumerate(examples):
            _, report = forward_report(bundle, ex)
            for v in range(n_views):
                att = report.attention_rows[v].data
                w.writerow(
                    [i, v, ex.label, fmt(report.self_usability[v].item()),
                     fmt(float(report.gates[v].data.mean()))]
                    + [fmt(x) for x in att]
                )
                vw.writerow([i, v, "unaltered"] + [fmt(x) for x in report.unaltered[v].data])
                vw.writerow([i, v, "altered"] + [fmt(x) for x in report.altered[v].data])
    return vec_path
