"""
Conditional densities of continuous exposure summaries by equal-mass binning.

Each exposure component is discretized at equal-mass quantiles. Bin membership
is modeled by one pooled discrete-hazard logistic regression,

    h_j(x) = P(bin = j | bin >= j, x),   j = 0 .. nbins-2,

fit on the bin-index expansion of the data (one row per unit per bin it
"survives" into). The density of a value in bin b is

    prod_{j<b} (1 - h_j) * h_b / width_b     (h_{nbins-1} = 1)

and is 0 outside the fitted range. Several components factorize left to
right: component k conditions on the covariates and on components 0..k-1.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy import sparse, special

from src.errors import EstimationError
from src.logistic import ETA_CLIP, LogisticFit, fit_logistic

logger = logging.getLogger(__name__)

MAX_PER_BIN = 50


def equal_mass_cuts(values, max_per_bin: int = MAX_PER_BIN, n_bins: int | None = None) -> np.ndarray:
    """
    Cut points at equal-mass quantiles of `values`; n_bins defaults to
    ceil(len(values) / max_per_bin). Tied quantiles are merged, so the result
    may hold fewer bins than requested.
    """
    x = np.asarray(values, dtype=float)
    x = x[~np.isnan(x)]
    if x.size == 0:
        raise EstimationError("cannot bin an empty or all-missing column")
    if n_bins is None:
        if max_per_bin < 1:
            raise EstimationError(f"max_per_bin must be positive, got {max_per_bin}")
        n_bins = math.ceil(x.size / max_per_bin)
    cuts = np.unique(np.quantile(x, np.linspace(0.0, 1.0, n_bins + 1)))
    if cuts.size < 3:
        raise EstimationError(f"fewer than 2 bins after merging tied quantiles (cuts {cuts.tolist()})")
    if cuts.size < n_bins + 1:
        logger.debug("merged tied quantiles: %d bins instead of %d", cuts.size - 1, n_bins)
    return cuts


def assign_bins(values, cuts: np.ndarray) -> np.ndarray:
    """0-based bin index per value; -1 for values outside [cuts[0], cuts[-1]] or missing."""
    x = np.asarray(values, dtype=float)
    b = np.searchsorted(cuts, x, side="right") - 1
    b = np.minimum(b, cuts.size - 2)
    outside = np.isnan(x) | (x < cuts[0]) | (x > cuts[-1])
    b[outside] = -1
    return b


def _expand(bins: np.ndarray, n_bins: int):
    """Rows (unit index, hazard index j, indicator bin == j) of the pooled hazard data."""
    last = np.minimum(bins, n_bins - 2)
    counts = last + 1
    units = np.repeat(np.arange(bins.size), counts)
    starts = np.repeat(np.cumsum(counts) - counts, counts)
    hazard = np.arange(units.size) - starts
    event = (hazard == bins[units]).astype(float)
    return units, hazard, event


def _hazard_design(hazard: np.ndarray, covariates: np.ndarray, n_bins: int):
    dummies = sparse.csr_matrix(
        (np.ones(hazard.size), (np.arange(hazard.size), hazard)), shape=(hazard.size, n_bins - 1)
    )
    if covariates.shape[1] == 0:
        return dummies
    return sparse.hstack([dummies, sparse.csr_matrix(covariates)], format="csr")


@dataclasses.dataclass
class ComponentDensity:
    name: str
    conditioning: Tuple[str, ...]
    cuts: np.ndarray
    fit: LogisticFit

    @property
    def n_bins(self) -> int:
        return self.cuts.size - 1

    @property
    def widths(self) -> np.ndarray:
        return np.diff(self.cuts)

    def hazards(self, covariates: np.ndarray) -> np.ndarray:
        """n x (nbins-1) matrix of h_j for each unit's covariate row."""
        nb = self.n_bins
        if self.fit.constant is not None:
            return np.full((covariates.shape[0], nb - 1), self.fit.constant)
        coef = self.fit.coef
        eta = coef[: nb - 1][None, :] + (covariates @ coef[nb - 1 :])[:, None]
        return special.expit(np.clip(eta, -ETA_CLIP, ETA_CLIP))

    def bin_probabilities(self, covariates: np.ndarray) -> np.ndarray:
        """n x nbins matrix of P(bin = b | covariates); rows sum to 1."""
        h = self.hazards(covariates)
        n = h.shape[0]
        survive = np.hstack([np.ones((n, 1)), np.cumprod(1.0 - h, axis=1)])
        events = np.hstack([h, np.ones((n, 1))])
        return survive * events

    def density(self, values, covariates: np.ndarray) -> np.ndarray:
        bins = assign_bins(values, self.cuts)
        probs = self.bin_probabilities(covariates)
        out = np.zeros(bins.size)
        inside = bins >= 0
        rows = np.flatnonzero(inside)
        out[inside] = probs[rows, bins[inside]] / self.widths[bins[inside]]
        return out


@dataclasses.dataclass
class BinnedDensityModel:
    components: List[ComponentDensity]
    covariates: Tuple[str, ...]
    max_per_bin: int = MAX_PER_BIN
    method: str = "equal.mass"

    @property
    def cuts(self) -> Dict[str, np.ndarray]:
        return {c.name: c.cuts for c in self.components}

    def density(self, data: Mapping[str, np.ndarray]) -> np.ndarray:
        """Joint conditional density of the exposure components for every unit of `data`."""
        out = None
        for comp in self.components:
            cov = _covariate_matrix(data, comp.conditioning)
            d = comp.density(_column(data, comp.name), cov)
            out = d if out is None else out * d
        return out

    def iterations(self) -> Dict[str, int]:
        return {c.name: c.fit.iterations for c in self.components}


def _column(data, name: str) -> np.ndarray:
    try:
        return np.asarray(data[name], dtype=float)
    except KeyError:
        raise EstimationError(f"density model needs column {name!r}") from None


def _covariate_matrix(data, names: Sequence[str]) -> np.ndarray:
    if not names:
        n = len(next(iter(data.values()))) if isinstance(data, Mapping) else data.n
        return np.empty((n, 0))
    return np.column_stack([_column(data, c) for c in names])


def fit_component(
    name: str,
    values: np.ndarray,
    conditioning: Sequence[str],
    covariates: np.ndarray,
    cuts: np.ndarray,
) -> ComponentDensity:
    bins = assign_bins(values, cuts)
    if (bins < 0).any():
        raise EstimationError(f"{name}: {int((bins < 0).sum())} values fall outside the bin range")
    n_bins = cuts.size - 1
    units, hazard, event = _expand(bins, n_bins)
    design = _hazard_design(hazard, covariates[units], n_bins)
    fit = fit_logistic(design, event)
    if not fit.converged:
        logger.warning("hazard model for %s did not converge (max |score| %.3g)", name, fit.max_score)
    logger.debug("%s: %d bins, %d hazard rows, %d IRLS iterations", name, n_bins, units.size, fit.iterations)
    return ComponentDensity(name, tuple(conditioning), cuts, fit)


def fit_binned_density(
    data,
    exposures: Sequence[str],
    covariates: Sequence[str],
    max_per_bin: int = MAX_PER_BIN,
    cuts: Optional[Mapping[str, np.ndarray]] = None,
) -> BinnedDensityModel:
    """
    Fit the factorized density of `exposures` given `covariates`. `cuts`
    supplies fixed cut points per component (the IPW estimator shares them
    between its observed and intervened fits); otherwise they are equal-mass
    quantiles of each observed component.
    """
    if not exposures:
        raise EstimationError("density model needs at least one exposure component")
    first = _column(data, exposures[0])
    n = first.size
    if cuts is None and n < 2 * max_per_bin:
        raise EstimationError(f"need n >= 2*max_per_bin = {2 * max_per_bin} units to bin, got {n}")
    components: List[ComponentDensity] = []
    for k, name in enumerate(exposures):
        values = _column(data, name)
        if np.isnan(values).any():
            raise EstimationError(f"exposure component {name!r} has missing values")
        conditioning = tuple(covariates) + tuple(exposures[:k])
        comp_cuts = cuts[name] if cuts is not None and name in cuts else equal_mass_cuts(values, max_per_bin)
        cov = _covariate_matrix(data, conditioning)
        components.append(fit_component(name, values, conditioning, cov, np.asarray(comp_cuts, dtype=float)))
    return BinnedDensityModel(components, tuple(covariates), max_per_bin)
