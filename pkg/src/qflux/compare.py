"""Binned densities, distances between them, and coverage reports."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateInput, IncompatibleBinning, InvalidParameter


@dataclass(frozen=True)
class BinnedDensity:
    """Masses on bins; ``edges`` are times or patch-group indices."""

    edges: np.ndarray
    masses: np.ndarray
    errors: np.ndarray | None = None
    normalized: bool = False
    signed: bool = False  # allow negative masses (signed crossings, net flux)

    def __post_init__(self):
        edges = np.asarray(self.edges, dtype=float)
        masses = np.asarray(self.masses, dtype=float)
        if edges.ndim != 1 or edges.size != masses.size + 1:
            raise InvalidParameter("need len(edges) == len(masses) + 1")
        if np.any(np.diff(edges) <= 0):
            raise InvalidParameter("bin edges must be strictly increasing")
        if not self.signed and np.any(masses < 0):
            raise InvalidParameter("bin masses must be >= 0")
        if self.normalized and abs(masses.sum() - 1) > 1e-12:
            raise InvalidParameter(f"normalized density sums to {masses.sum()!r}")
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "masses", masses)
        if self.errors is not None:
            errors = np.asarray(self.errors, dtype=float)
            if errors.shape != masses.shape:
                raise InvalidParameter("errors must match masses")
            object.__setattr__(self, "errors", errors)

    @property
    def total(self) -> float:
        return float(self.masses.sum())


def group_edges(n: int) -> np.ndarray:
    """Edges -0.5, 0.5, ..., n - 0.5 for a density over n patch groups."""
    return np.arange(n + 1) - 0.5


def normalize(d: BinnedDensity) -> BinnedDensity:
    tot = d.total
    if not tot > 0:
        raise DegenerateInput("cannot normalize a density with zero total mass")
    m = d.masses / tot
    m = m / m.sum()
    err = None if d.errors is None else d.errors / tot
    return BinnedDensity(d.edges, m, err, normalized=abs(m.sum() - 1) <= 1e-12, signed=d.signed)


def _check(a: BinnedDensity, b: BinnedDensity):
    if a.edges.shape != b.edges.shape or not np.array_equal(a.edges, b.edges):
        raise IncompatibleBinning("densities have different bin edges")


def l1_distance(a: BinnedDensity, b: BinnedDensity) -> float:
    _check(a, b)
    return float(np.abs(a.masses - b.masses).sum())


def ks_distance(a: BinnedDensity, b: BinnedDensity) -> float:
    _check(a, b)
    return float(np.abs(np.cumsum(a.masses - b.masses)).max(initial=0.0))


@dataclass
class CoverageReport:
    fraction: float
    k: float
    z: np.ndarray
    outliers: list = field(default_factory=list)  # bin indices with |z| > k

    @property
    def count(self) -> int:
        return self.z.size


def z_scores(empirical: BinnedDensity, predicted: BinnedDensity) -> np.ndarray:
    _check(empirical, predicted)
    if empirical.errors is None:
        raise InvalidParameter("empirical density needs per-bin errors")
    diff = empirical.masses - predicted.masses
    with np.errstate(divide="ignore", invalid="ignore"):
        z = diff / empirical.errors
    return np.where(diff == 0, 0.0, z)


def coverage_report(empirical: BinnedDensity, predicted: BinnedDensity, k: float = 3.0, mask=None) -> CoverageReport:
    """Fraction of bins where the prediction lies within k standard errors.

    ``mask`` restricts the report to a subset of bins.
    """
    z = z_scores(empirical, predicted)
    idx = np.arange(z.size)
    if mask is not None:
        idx = idx[np.asarray(mask, dtype=bool)]
    if idx.size == 0:
        raise DegenerateInput("coverage over an empty set of bins")
    inside = np.abs(z[idx]) <= k
    return CoverageReport(float(inside.mean()), k, z, [int(i) for i in idx[~inside]])


def write_report(path, empirical: BinnedDensity, predicted: BinnedDensity):
    """CSV ``bin_lo,bin_hi,empirical,stderr,predicted,z_score``."""
    z = z_scores(empirical, predicted)
    errs = empirical.errors
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("bin_lo,bin_hi,empirical,stderr,predicted,z_score\n")
        for i in range(z.size):
            row = (empirical.edges[i], empirical.edges[i + 1], empirical.masses[i], errs[i], predicted.masses[i], z[i])
            fh.write(",".join(fmt(v) for v in row) + "\n")


def fmt(v) -> str:
    """17 significant digits."""
    return f"{float(v):.17g}"
