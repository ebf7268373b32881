"""Loss-landscape planes over parameter trajectories, and a perturbation
sharpness metric.

The PCA plane is fitted with the Gram-matrix method: for S snapshots of P
parameters only the S x S inner-product matrix is decomposed, so no P x P
array is ever formed.
"""
from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .data import Dataset
from .nn import NetworkSpec, ParamVector
from .trainer import dataset_loss

MAX_SNAPSHOTS = 200


class LandscapeError(ValueError):
    pass


@dataclass(frozen=True)
class PcaPlane:
    origin: ParamVector
    basis: tuple  # two unit vectors, shape (P,)
    explained: tuple  # variance fractions of the two directions
    total_variance: float  # mean squared distance of the fitted snapshots to the origin
    count: int  # snapshots used in the fit


def thin(items: list, limit: int = MAX_SNAPSHOTS) -> list:
    """Keep at most ``limit`` items at a uniform stride; first and last are kept."""
    if len(items) <= limit:
        return list(items)
    idx = np.unique(np.rint(np.linspace(0, len(items) - 1, limit)).astype(int))
    return [items[i] for i in idx]


def _sign_fix(b: np.ndarray) -> np.ndarray:
    return -b if b[np.argmax(np.abs(b))] < 0 else b


def pca_plane(snapshots, limit: int = MAX_SNAPSHOTS) -> PcaPlane:
    """Top-2 principal plane of a set of parameter vectors.

    ``snapshots`` is a list of ParamVectors or anything with ``vectors()``
    (a SnapshotLog).
    """
    vecs = snapshots.vectors() if hasattr(snapshots, "vectors") else list(snapshots)
    if len(vecs) < 3:
        raise LandscapeError(f"need at least 3 snapshots for a PCA plane, got {len(vecs)}")
    nn.check_same_layout(vecs)
    layout = vecs[0].layout
    vecs = thin(vecs, limit)
    X = np.stack([v.values for v in vecs])
    mean = X.mean(axis=0)
    Xc = X - mean
    gram = Xc @ Xc.T
    lam, U = np.linalg.eigh(gram)
    order = np.argsort(lam)[::-1]
    lam, U = np.clip(lam[order], 0.0, None), U[:, order]
    total = float(lam.sum())
    if total == 0.0 or lam[1] <= 1e-12 * lam[0]:
        raise LandscapeError("snapshots span fewer than 2 directions (rank < 2); "
                             "record more snapshots or snapshots from more than one model")
    basis = tuple(_sign_fix(Xc.T @ U[:, k] / math.sqrt(lam[k])) for k in range(2))
    return PcaPlane(ParamVector(mean, layout), basis, (float(lam[0] / total), float(lam[1] / total)),
                    total / len(vecs), len(vecs))


def project(plane: PcaPlane, params: ParamVector) -> tuple[float, float, float]:
    """Plane coordinates (u, v) of ``params`` and its distance to the plane."""
    nn.check_same_layout([plane.origin, params])
    d = params.values - plane.origin.values
    u, v = float(d @ plane.basis[0]), float(d @ plane.basis[1])
    residual = float(np.linalg.norm(d - u * plane.basis[0] - v * plane.basis[1]))
    return u, v, residual


def point_on_plane(plane: PcaPlane, u: float, v: float) -> ParamVector:
    return plane.origin.like(plane.origin.values + u * plane.basis[0] + v * plane.basis[1])


# ---------------------------------------------------------------------------
# loss grids


@dataclass
class LossGrid:
    plane: PcaPlane
    us: np.ndarray  # (G,)
    vs: np.ndarray  # (G,)
    losses: np.ndarray  # (G, G); losses[i, j] is at (us[i], vs[j]); NaN where flagged
    flagged: np.ndarray  # (G, G) bool, non-finite loss
    dataset: str = ""
    spec_digest: str = ""

    @property
    def resolution(self) -> int:
        return len(self.us)

    def cells(self):
        """(u, v, loss) in row-major order."""
        for i, u in enumerate(self.us):
            for j, v in enumerate(self.vs):
                yield float(u), float(v), float(self.losses[i, j])


def auto_extents(points, margin: float = 0.1) -> tuple[float, float, float, float]:
    """Bounding box of (u, v) points grown by ``margin`` of its span per side."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    span = hi - lo
    span = np.where(span > 0, span, np.maximum(np.abs(hi), 1.0))
    lo, hi = lo - margin * span, hi + margin * span
    return float(lo[0]), float(hi[0]), float(lo[1]), float(hi[1])


def grid_values(us, vs, fn, workers: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Evaluate ``fn(u, v)`` on the product grid. Cells are independent, so
    they may run on a thread pool; results are placed by cell index."""
    cells = [(i, j) for i in range(len(us)) for j in range(len(vs))]
    out = np.empty((len(us), len(vs)))

    def one(cell):
        i, j = cell
        with np.errstate(all="ignore"):
            return fn(float(us[i]), float(vs[j]))

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            values = list(pool.map(one, cells))
    else:
        values = [one(c) for c in cells]
    for (i, j), val in zip(cells, values):
        out[i, j] = val
    flagged = ~np.isfinite(out)
    out[flagged] = np.nan
    return out, flagged


def eval_loss_grid(plane: PcaPlane, extents, resolution: int, spec: NetworkSpec, dataset: Dataset,
                   batch_size: int = 1024, workers: int = 1) -> LossGrid:
    """Mean training cross-entropy (no augmentation) at every grid point."""
    if resolution < 2:
        raise LandscapeError(f"grid resolution must be >= 2, got {resolution}")
    umin, umax, vmin, vmax = extents
    us = np.linspace(umin, umax, resolution)
    vs = np.linspace(vmin, vmax, resolution)
    fn = lambda u, v: dataset_loss(spec, point_on_plane(plane, u, v), dataset, batch_size)
    losses, flagged = grid_values(us, vs, fn, workers)
    return LossGrid(plane, us, vs, losses, flagged, dataset.meta.get("source", dataset.split), spec.digest())


# ---------------------------------------------------------------------------
# sharpness


@dataclass
class SharpnessReport:
    center: str
    sigma: float
    samples: int
    baseline_loss: float
    increases: np.ndarray = field(repr=False, default=None)

    @property
    def mean_increase(self) -> float:
        return float(np.mean(self.increases))

    @property
    def max_increase(self) -> float:
        return float(np.max(self.increases))


def perturbation_increases(loss_fn, theta: np.ndarray, sigma: float, k: int, seed: int):
    """Loss change at ``theta + sigma * d`` for ``k`` random unit directions."""
    if sigma < 0 or k < 1:
        raise ValueError(f"need sigma >= 0 and k >= 1, got sigma={sigma}, k={k}")
    rng = np.random.default_rng(seed)
    base = loss_fn(theta)
    inc = np.empty(k)
    for i in range(k):
        d = rng.standard_normal(theta.shape)
        d /= np.linalg.norm(d)
        inc[i] = loss_fn(theta + sigma * d) - base
    return base, inc


def relative_sigma(params: ParamVector, scale: float = 0.05) -> float:
    """``scale * ||theta|| / sqrt(P)``: a radius proportional to the typical
    parameter magnitude."""
    return scale * float(np.linalg.norm(params.values)) / math.sqrt(len(params))


def sharpness(params: ParamVector, spec: NetworkSpec, dataset: Dataset, sigma: float, k: int, seed: int,
              center: str = "") -> SharpnessReport:
    loss = lambda theta: dataset_loss(spec, params.like(theta), dataset)
    base, inc = perturbation_increases(loss, params.values, sigma, k, seed)
    return SharpnessReport(center, sigma, k, base, inc)


# ---------------------------------------------------------------------------
# export


def project_trajectories(plane: PcaPlane, trajectories: dict) -> list[tuple[str, int, float, float, float]]:
    """``trajectories`` maps a model tag to [(batch, ParamVector), ...]."""
    rows = []
    for tag, traj in trajectories.items():
        for batch, params in traj:
            rows.append((tag, int(batch), *project(plane, params)))
    return rows


def write_grid_csv(grid: LossGrid, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["u", "v", "loss"])
        for u, v, loss in grid.cells():
            w.writerow([f"{u:.17g}", f"{v:.17g}", f"{loss:.17g}"])


def read_grid_csv(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Inverse of :func:`write_grid_csv`: (us, vs, losses)."""
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if rows[0] != ["u", "v", "loss"]:
        raise ValueError(f"{path}: header must be u,v,loss")
    data = np.array([[float(x) for x in r] for r in rows[1:]])
    us = np.unique(data[:, 0])
    vs = np.unique(data[:, 1])
    return us, vs, data[:, 2].reshape(len(us), len(vs))


def write_trajectories_csv(rows, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["model", "batch", "u", "v", "residual"])
        for tag, batch, u, v, r in rows:
            w.writerow([tag, batch, f"{u:.17g}", f"{v:.17g}", f"{r:.17g}"])


def export_landscape(grid: LossGrid, trajectories: dict, out_dir, stem: str = "landscape") -> dict:
    """Write ``<stem>.csv``, ``<stem>-trajectories.csv``, ``<stem>.svg`` and
    ``<stem>.png`` into ``out_dir``; returns the paths by kind."""
    from .plotting import plot_landscape

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = project_trajectories(grid.plane, trajectories)
    paths = {"grid": out / f"{stem}.csv", "trajectories": out / f"{stem}-trajectories.csv",
             "svg": out / f"{stem}.svg", "png": out / f"{stem}.png"}
    write_grid_csv(grid, paths["grid"])
    write_trajectories_csv(rows, paths["trajectories"])
    plot_landscape(grid, rows, [paths["svg"], paths["png"]])
    return paths
