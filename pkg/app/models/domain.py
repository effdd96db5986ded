from dataclasses import dataclass, field, replace
from typing import Any, Dict, FrozenSet, Iterator, List, Optional, Tuple

import numpy as np
from scipy import sparse
from scipy.special import expit, logit

from app.core.exceptions import StructuralError


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.array(array, copy=True)
    array.setflags(write=False)
    return array


@dataclass(frozen=True)
class CarSpectral:
    """Eigen-decomposition of D^{-1/2} W D^{-1/2}, assembled block-wise per connected component"""
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    log_det_D: float
    sqrt_degrees: np.ndarray

    @property
    def field_basis(self) -> np.ndarray:
        """S = D^{-1/2} U, so that S diag(1/(1 - lam*gamma)) S^T = (D - lam W)^{-1}"""
        return self.eigenvectors / self.sqrt_degrees[:, None]

    @property
    def field_basis_inverse(self) -> np.ndarray:
        return self.eigenvectors.T * self.sqrt_degrees[None, :]


@dataclass(frozen=True)
class ArealGraph:
    section_ids: Tuple[str, ...]
    edges: FrozenSet[Tuple[int, int]]
    degrees: np.ndarray
    group_index: np.ndarray
    group_names: Tuple[str, ...]
    component_labels: np.ndarray
    adjacency: sparse.csr_matrix
    spectral: CarSpectral

    @property
    def n_sections(self) -> int:
        return len(self.section_ids)

    @property
    def n_groups(self) -> int:
        return len(self.group_names)

    @property
    def n_components(self) -> int:
        return int(self.component_labels.max()) + 1 if len(self.component_labels) else 0

    @property
    def group_of(self) -> Dict[str, str]:
        return {sid: self.group_names[g] for sid, g in zip(self.section_ids, self.group_index)}

    def index_of(self, section_id: str) -> int:
        try:
            return self.section_ids.index(str(section_id))
        except ValueError:
            raise KeyError(f"Unknown section id {section_id}")

    def group_members(self, group: int) -> np.ndarray:
        return np.flatnonzero(self.group_index == group)

    def group_indicator(self) -> np.ndarray:
        """G x K one-hot matrix mapping sections to their tributary"""
        indicator = np.zeros((self.n_groups, self.n_sections))
        indicator[self.group_index, np.arange(self.n_sections)] = 1.0
        return indicator


@dataclass(frozen=True)
class Dataset:
    """Section-year lattice; arrays are indexed [section, year(, covariate)]"""
    graph: ArealGraph
    years: np.ndarray
    counts: np.ndarray
    observed: np.ndarray
    tow_distance: np.ndarray
    covariates: np.ndarray
    covariate_names: Tuple[str, ...]
    preprocessing: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        K, T = self.graph.n_sections, len(self.years)
        for name in ("counts", "observed", "tow_distance"):
            if getattr(self, name).shape != (K, T):
                raise StructuralError(f"Dataset.{name} must have shape ({K}, {T})")
        if self.covariates.shape != (K, T, len(self.covariate_names)):
            raise StructuralError(f"Dataset.covariates must have shape ({K}, {T}, {len(self.covariate_names)})")
        if T > 1 and np.any(np.diff(self.years) != 1):
            raise StructuralError("Dataset years must be contiguous")
        obs = self.observed
        if np.any(~np.isfinite(self.counts[obs])) or np.any(self.counts[obs] < 0):
            raise StructuralError("Observed cells need finite non-negative counts")
        if np.any(~np.isfinite(self.log_offset[obs])):
            raise StructuralError("Observed cells need a finite log offset")
        if np.any(~np.isfinite(self.covariates[obs])):
            raise StructuralError("Observed cells need finite covariates")
        if np.any(~np.isnan(self.counts[~obs])):
            raise StructuralError("Unobserved cells carry no count")
        for name in ("years", "counts", "observed", "tow_distance", "covariates"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))

    @property
    def log_offset(self) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(self.tow_distance > 0, np.log(self.tow_distance), np.nan)

    @property
    def n_sections(self) -> int:
        return self.graph.n_sections

    @property
    def n_years(self) -> int:
        return len(self.years)

    @property
    def n_covariates(self) -> int:
        return len(self.covariate_names)

    @property
    def n_observed(self) -> int:
        return int(self.observed.sum())

    @property
    def coefficient_names(self) -> Tuple[str, ...]:
        return ("intercept",) + tuple(self.covariate_names)

    def covariate_index(self, name: str) -> int:
        try:
            return self.covariate_names.index(name)
        except ValueError:
            raise KeyError(f"Covariate '{name}' is not part of this dataset")

    def year_index(self, year: int) -> int:
        hits = np.flatnonzero(self.years == year)
        if not len(hits):
            raise KeyError(f"Year {year} not in dataset ({self.years[0]}..{self.years[-1]})")
        return int(hits[0])

    def through_year(self, year: int) -> "Dataset":
        """Dataset truncated to years <= `year`"""
        stop = self.year_index(year) + 1
        return replace(
            self,
            years=self.years[:stop],
            counts=self.counts[:, :stop],
            observed=self.observed[:, :stop],
            tow_distance=self.tow_distance[:, :stop],
            covariates=self.covariates[:, :stop],
        )

    def year_slice(self, year: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """(covariates K x p, log offsets K, counts K, observed K) for one calendar year"""
        t = self.year_index(year)
        return (
            self.covariates[:, t, :],
            self.log_offset[:, t],
            self.counts[:, t],
            self.observed[:, t],
        )


@dataclass(frozen=True)
class Parameters:
    """Constrained-scale model unknowns; fields absent from a variant stay None"""
    beta: np.ndarray
    sigma2_theta: Optional[float] = None
    sigma2_phi: Optional[float] = None
    sigma2_eta: Optional[float] = None
    lam: Optional[float] = None
    rho: Optional[float] = None
    P: Optional[float] = None
    r: Optional[np.ndarray] = None
    theta: Optional[np.ndarray] = None
    phi: Optional[np.ndarray] = None
    eta: Optional[np.ndarray] = None

    @property
    def rho_g(self) -> Optional[np.ndarray]:
        if self.P is None or self.r is None:
            return None
        return expit(logit(self.P) + np.asarray(self.r))


@dataclass
class PosteriorDraws:
    """Per-chain constrained draws; `layout` maps columns back to Parameters"""
    variant: Any
    layout: Any
    chains: List[np.ndarray]
    stats: List[Dict[str, np.ndarray]]
    seeds: List[int]

    def __post_init__(self):
        widths = {chain.shape[1] for chain in self.chains}
        lengths = {chain.shape[0] for chain in self.chains}
        if len(widths) > 1 or len(lengths) > 1:
            raise StructuralError("All chains must have the same number of draws and parameters")

    @property
    def names(self) -> List[str]:
        return list(self.layout.constrained_names)

    @property
    def n_chains(self) -> int:
        return len(self.chains)

    @property
    def n_draws(self) -> int:
        return self.chains[0].shape[0] if self.chains else 0

    @property
    def n_total(self) -> int:
        return self.n_chains * self.n_draws

    def column(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise KeyError(f"Parameter '{name}' not in posterior draws")

    def chain_matrix(self, name: str) -> np.ndarray:
        j = self.column(name)
        return np.stack([chain[:, j] for chain in self.chains])

    def pooled(self, name: str) -> np.ndarray:
        return self.chain_matrix(name).reshape(-1)

    def pooled_matrix(self) -> np.ndarray:
        return np.concatenate(self.chains, axis=0)

    def parameters_at(self, index: int) -> Parameters:
        chain, draw = divmod(index, self.n_draws)
        return self.layout.unflatten(self.chains[chain][draw])

    def iter_parameters(self, indices: Optional[np.ndarray] = None) -> Iterator[Parameters]:
        if indices is None:
            indices = np.arange(self.n_total)
        for index in indices:
            yield self.parameters_at(int(index))

    def stat(self, name: str) -> np.ndarray:
        return np.stack([s[name] for s in self.stats])

    @property
    def n_divergent(self) -> int:
        if not self.stats:
            return 0
        return int(self.stat("divergent").sum())


BASE_COVARIATES = ("turbidity", "seagrass", "marsh", "marsh_x_turbidity", "predator", "management")


def covariate_names_for(group_names: List[str]) -> Tuple[str, ...]:
    """Habitat, predator and management terms, then one dummy per non-baseline tributary"""
    return BASE_COVARIATES + tuple(name.lower() for name in group_names[1:])
