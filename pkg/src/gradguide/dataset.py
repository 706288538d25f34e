"""Synthetic pre-training data, empirical statistics and subspace adherence."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .io import atomic_write_text

__all__ = [
    "SubspaceBasis",
    "Dataset",
    "GaussianDist",
    "random_basis",
    "generate_subspace",
    "generate_gaussian",
    "empirical_stats",
    "psd_sqrt",
    "off_support_ratio",
    "mean_off_support_ratio",
    "save_dataset",
    "load_dataset",
]

_ORTHO_TOL = 1e-10
_SYM_TOL = 1e-10


@dataclass(frozen=True)
class SubspaceBasis:
    """``D x d`` matrix ``A`` with orthonormal columns."""

    A: np.ndarray

    def __post_init__(self):
        A = np.array(self.A, dtype=float)
        if A.ndim != 2:
            raise ValueError("basis must be a 2-D array")
        D, d = A.shape
        if d > D:
            raise ValueError(f"latent dimension d={d} exceeds ambient D={D}")
        err = np.linalg.norm(A.T @ A - np.eye(d))
        if err > _ORTHO_TOL:
            raise ValueError(f"columns are not orthonormal (|A^T A - I|_F = {err:.3g})")
        A.setflags(write=False)
        object.__setattr__(self, "A", A)

    @property
    def D(self) -> int:
        return self.A.shape[0]

    @property
    def d(self) -> int:
        return self.A.shape[1]

    def projector(self) -> np.ndarray:
        return self.A @ self.A.T

    def project(self, x: np.ndarray) -> np.ndarray:
        """On-support part ``A A^T x`` (rows of a batch are projected independently)."""
        return (np.asarray(x) @ self.A) @ self.A.T

    def orthogonal(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return x - self.project(x)


@dataclass(frozen=True)
class GaussianDist:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.array(self.mean, dtype=float).reshape(-1)
        cov = np.array(self.cov, dtype=float)
        if cov.shape != (mean.size, mean.size):
            raise ValueError(f"cov shape {cov.shape} does not match mean of size {mean.size}")
        asym = np.max(np.abs(cov - cov.T)) if cov.size else 0.0
        if asym > _SYM_TOL * max(1.0, np.max(np.abs(cov))):
            raise ValueError(f"covariance is not symmetric (max asymmetry {asym:.3g})")
        cov = 0.5 * (cov + cov.T)
        if cov.size and np.linalg.eigvalsh(cov)[0] < -_SYM_TOL * max(1.0, np.max(np.abs(cov))):
            raise ValueError("covariance has a negative eigenvalue")
        mean.setflags(write=False)
        cov.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def dim(self) -> int:
        return self.mean.size


@dataclass(frozen=True)
class Dataset:
    samples: np.ndarray
    basis: SubspaceBasis | None = None
    seed: int | None = None

    def __post_init__(self):
        x = np.array(self.samples, dtype=float)
        if x.ndim == 1:
            x = x[None, :]
        if x.ndim != 2 or x.shape[0] < 1:
            raise ValueError("samples must be an (n, D) array with n >= 1")
        if self.basis is not None and self.basis.D != x.shape[1]:
            raise ValueError("basis and samples disagree on the ambient dimension")
        x.setflags(write=False)
        object.__setattr__(self, "samples", x)

    @property
    def n(self) -> int:
        return self.samples.shape[0]

    @property
    def D(self) -> int:
        return self.samples.shape[1]


def random_basis(D: int, d: int, seed: int) -> SubspaceBasis:
    """Orthonormal basis from the QR factorisation of a seeded Gaussian matrix.

    Columns are sign-flipped so that ``diag(R) > 0``; the same seed always gives
    the same basis.
    """
    rng = np.random.default_rng(seed)
    Q, R = np.linalg.qr(rng.standard_normal((D, d)))
    signs = np.sign(np.diag(R))
    signs[signs == 0] = 1.0
    return SubspaceBasis(Q * signs)


def generate_subspace(
    basis: SubspaceBasis,
    n: int,
    seed: int,
    latent_mean: np.ndarray | None = None,
    latent_cov: np.ndarray | None = None,
) -> Dataset:
    """Draw ``x = A u`` with ``u ~ N(0, I_d)`` or ``N(latent_mean, latent_cov)``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    u = rng.standard_normal((n, basis.d))
    if latent_cov is not None:
        u = u @ np.linalg.cholesky(np.asarray(latent_cov, dtype=float)).T
    if latent_mean is not None:
        u = u + np.asarray(latent_mean, dtype=float)
    return Dataset(u @ basis.A.T, basis=basis, seed=seed)


def generate_gaussian(dist: GaussianDist, n: int, seed: int) -> Dataset:
    rng = np.random.default_rng(seed)
    root = psd_sqrt(dist.cov)
    return Dataset(dist.mean + rng.standard_normal((n, dist.dim)) @ root.T, seed=seed)


def psd_sqrt(cov: np.ndarray, rtol: float = 1e-12) -> np.ndarray:
    """``R`` with ``R R^T = cov``; eigenvalues below ``rtol * max`` count as zero."""
    w, V = np.linalg.eigh(cov)
    top = float(np.max(np.abs(w))) if w.size else 0.0
    w = np.where(w < rtol * top, 0.0, w)
    return V * np.sqrt(w)


def empirical_stats(data: Dataset | np.ndarray, weights: np.ndarray | None = None) -> GaussianDist:
    """Mean and 1/n-normalised covariance (weighted when ``weights`` is given)."""
    x = data.samples if isinstance(data, Dataset) else np.atleast_2d(np.asarray(data, dtype=float))
    if weights is None:
        w = np.full(x.shape[0], 1.0 / x.shape[0])
    else:
        w = np.asarray(weights, dtype=float)
        if w.shape != (x.shape[0],) or np.any(w <= 0):
            raise ValueError("weights must be positive, one per sample")
        w = w / w.sum()
    mean = w @ x
    xc = x - mean
    cov = (xc * w[:, None]).T @ xc
    return GaussianDist(mean, 0.5 * (cov + cov.T))


def off_support_ratio(x: np.ndarray, basis: SubspaceBasis) -> float | np.ndarray:
    """``|(I - AA^T) x| / |AA^T x|``; +inf when ``x`` is orthogonal to the span.

    A 2-D input is treated as a batch of rows and returns one ratio per row.
    """
    x = np.asarray(x, dtype=float)
    batch = np.atleast_2d(x)
    on = basis.project(batch)
    off_norm = np.linalg.norm(batch - on, axis=1)
    on_norm = np.linalg.norm(on, axis=1)
    if np.any((off_norm == 0) & (on_norm == 0)):
        raise ValueError("off-support ratio is undefined at x = 0")
    with np.errstate(divide="ignore"):
        r = np.where(on_norm > 0, off_norm / np.where(on_norm > 0, on_norm, 1.0), np.inf)
    return float(r[0]) if x.ndim == 1 else r


def mean_off_support_ratio(samples: np.ndarray, basis: SubspaceBasis) -> float:
    """Batch aggregate: the mean of per-sample ratios."""
    return float(np.mean(off_support_ratio(np.atleast_2d(samples), basis)))


def save_dataset(path: str | Path, data: Dataset, meta: dict | None = None) -> None:
    """Text format: a ``#`` comment line holding a JSON header, a column-name
    row, then one sample per row.

    ``meta`` entries (for example a config hash) are merged into the header.
    The basis, when present, goes to ``<path>.basis`` in the same format.
    """
    path = Path(path)
    header = {"n": data.n, "D": data.D, "d": data.basis.d if data.basis else None, "seed": data.seed}
    header.update(meta or {})
    _write_matrix(path, data.samples, header)
    if data.basis is not None:
        _write_matrix(path.with_name(path.name + ".basis"), data.basis.A, {"D": data.D, "d": data.basis.d})


def load_dataset(path: str | Path) -> Dataset:
    path = Path(path)
    header, samples = _read_matrix(path)
    if samples.shape != (header["n"], header["D"]):
        raise ValueError(f"{path}: header says {header['n']}x{header['D']}, found {samples.shape}")
    basis = None
    bpath = path.with_name(path.name + ".basis")
    if header.get("d") is not None:
        if not bpath.exists():
            raise FileNotFoundError(f"dataset header names a basis but {bpath} is missing")
        basis = SubspaceBasis(_read_matrix(bpath)[1].reshape(header["D"], header["d"]))
    return Dataset(samples, basis=basis, seed=header.get("seed"))


def _write_matrix(path: Path, mat: np.ndarray, header: dict) -> None:
    mat = np.atleast_2d(mat)
    lines = ["# " + json.dumps(header, sort_keys=True)]
    lines.append(",".join(f"x{j}" for j in range(mat.shape[1])))
    lines += [",".join(repr(float(v)) for v in row) for row in mat]
    atomic_write_text(path, "\n".join(lines) + "\n")


def _read_matrix(path: Path) -> tuple[dict, np.ndarray]:
    with open(path, encoding="utf-8") as fh:
        first = fh.readline()
        if not first.startswith("#"):
            raise ValueError(f"{path}: missing header line")
        header = json.loads(first[1:])
        fh.readline()  # column names
        rows = [[float(v) for v in line.split(",")] for line in fh if line.strip()]
    return header, np.array(rows, dtype=float).reshape(len(rows), -1)
