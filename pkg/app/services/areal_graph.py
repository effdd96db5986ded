"""
Areal adjacency structure and proper-CAR precision algebra.

The precision of a proper CAR field is Q = (D - lam W) / sigma2 with binary W and
D = diag(number of neighbours). With gamma_i the eigenvalues of D^{-1/2} W D^{-1/2},

    log det(D - lam W) = log det D + sum_i log(1 - lam * gamma_i)

which is O(K) per evaluation once the spectrum is cached at graph build time.
"""
import logging
from typing import Dict, Hashable, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy import linalg, sparse
from scipy.sparse.csgraph import connected_components
from scipy.sparse.linalg import splu, spsolve_triangular

from app.core.exceptions import DomainError, GraphValidationError
from app.models.domain import ArealGraph, CarSpectral


logger = logging.getLogger(__name__)

SPECTRAL_TOLERANCE = 1e-10


def _check_lambda(lam: float) -> None:
    if not np.isfinite(lam) or lam < 0.0 or lam >= 1.0:
        raise DomainError(f"lambda must lie in [0, 1), got {lam}")


def _check_sigma2(sigma2: float) -> None:
    if not np.isfinite(sigma2) or sigma2 <= 0.0:
        raise DomainError(f"sigma2 must be positive, got {sigma2}")


def _spectral_decomposition(adjacency: sparse.csr_matrix, degrees: np.ndarray,
                            labels: np.ndarray) -> CarSpectral:
    K = len(degrees)
    sqrt_deg = np.sqrt(degrees.astype(float))
    eigenvalues = np.empty(K)
    eigenvectors = np.zeros((K, K))
    dense = adjacency.toarray()
    column = 0
    for component in range(int(labels.max()) + 1):
        members = np.flatnonzero(labels == component)
        block = dense[np.ix_(members, members)]
        scaled = block / np.outer(sqrt_deg[members], sqrt_deg[members])
        values, vectors = linalg.eigh(scaled)
        if abs(values.max() - 1.0) > SPECTRAL_TOLERANCE:
            raise GraphValidationError(
                f"Component {component} has leading eigenvalue {values.max():.12f}, expected 1"
            )
        cols = slice(column, column + len(members))
        eigenvalues[cols] = values
        eigenvectors[np.ix_(members, np.arange(cols.start, cols.stop))] = vectors
        column += len(members)
    return CarSpectral(
        eigenvalues=eigenvalues,
        eigenvectors=eigenvectors,
        log_det_D=float(np.log(degrees.astype(float)).sum()),
        sqrt_degrees=sqrt_deg,
    )


def build_graph(section_ids: Sequence[Hashable],
                edges: Iterable[Tuple[Hashable, Hashable]],
                group_labels: Mapping[Hashable, str],
                group_order: Optional[Sequence[str]] = None) -> ArealGraph:
    """
    Validate an areal partition and precompute its CAR spectrum.

    Section ids are compared as strings. Groups are numbered in `group_order` when
    given, otherwise in order of first appearance along `section_ids`.
    """
    ids = [str(s) for s in section_ids]
    if not ids:
        raise GraphValidationError("A graph needs at least one section")
    if len(set(ids)) != len(ids):
        duplicated = sorted({s for s in ids if ids.count(s) > 1})
        raise GraphValidationError(f"Duplicate section ids: {', '.join(duplicated)}")
    index: Dict[str, int] = {sid: i for i, sid in enumerate(ids)}

    edge_set = set()
    for a, b in edges:
        a, b = str(a), str(b)
        for end in (a, b):
            if end not in index:
                raise GraphValidationError(f"Edge ({a}, {b}) references unknown section '{end}'")
        if a == b:
            raise GraphValidationError(f"Self-loop on section '{a}'")
        pair = tuple(sorted((index[a], index[b])))
        if pair in edge_set:
            raise GraphValidationError(f"Duplicate edge ({a}, {b})")
        edge_set.add(pair)

    K = len(ids)
    rows = [i for i, j in edge_set] + [j for i, j in edge_set]
    cols = [j for i, j in edge_set] + [i for i, j in edge_set]
    adjacency = sparse.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(K, K))
    degrees = np.asarray(adjacency.sum(axis=1)).ravel().astype(int)

    isolated = [ids[i] for i in np.flatnonzero(degrees == 0)]
    if isolated:
        raise GraphValidationError(f"Isolated sections (no neighbours): {', '.join(isolated)}")

    labels_by_id = {str(k): str(v) for k, v in group_labels.items()}
    unlabeled = [sid for sid in ids if sid not in labels_by_id]
    if unlabeled:
        raise GraphValidationError(f"Sections without a group label: {', '.join(unlabeled)}")
    if group_order is None:
        group_names: List[str] = []
        for sid in ids:
            if labels_by_id[sid] not in group_names:
                group_names.append(labels_by_id[sid])
    else:
        group_names = [str(g) for g in group_order]
        unknown = sorted({labels_by_id[sid] for sid in ids} - set(group_names))
        if unknown:
            raise GraphValidationError(f"Group labels missing from group order: {', '.join(unknown)}")
    group_index = np.array([group_names.index(labels_by_id[sid]) for sid in ids], dtype=int)

    crossing = [(ids[i], ids[j]) for i, j in sorted(edge_set) if group_index[i] != group_index[j]]
    if crossing:
        logger.warning(f"{len(crossing)} edge(s) cross group boundaries, e.g. {crossing[0]}")

    _, labels = connected_components(adjacency, directed=False)
    spectral = _spectral_decomposition(adjacency, degrees, labels)

    graph = ArealGraph(
        section_ids=tuple(ids),
        edges=frozenset(edge_set),
        degrees=_readonly(degrees),
        group_index=_readonly(group_index),
        group_names=tuple(group_names),
        component_labels=_readonly(labels),
        adjacency=adjacency,
        spectral=spectral,
    )
    logger.debug(f"Built graph: {K} sections, {len(edge_set)} edges, {graph.n_components} components, "
                 f"{len(group_names)} groups")
    return graph


def _readonly(array: np.ndarray) -> np.ndarray:
    array = np.asarray(array)
    array.setflags(write=False)
    return array


def chain_graph(group_sizes: Sequence[int], group_names: Sequence[str]) -> ArealGraph:
    """One path graph per tributary; ids are 1..K numbered upriver within each chain"""
    ids, edges, labels = [], [], {}
    start = 1
    for size, name in zip(group_sizes, group_names):
        members = [str(start + i) for i in range(size)]
        ids.extend(members)
        edges.extend(zip(members[:-1], members[1:]))
        labels.update({m: name for m in members})
        start += size
    return build_graph(ids, edges, labels, group_order=list(group_names))


def car_precision(graph: ArealGraph, lam: float, sigma2: float) -> sparse.csc_matrix:
    """Q = (D - lam W) / sigma2 as a sparse symmetric matrix"""
    _check_lambda(lam)
    _check_sigma2(sigma2)
    D = sparse.diags(graph.degrees.astype(float))
    return ((D - lam * graph.adjacency) / sigma2).tocsc()


def log_det_precision(graph: ArealGraph, lam: float, spectral: Optional[CarSpectral] = None) -> float:
    """log det(D - lam W) from the cached spectrum"""
    _check_lambda(lam)
    spectral = spectral or graph.spectral
    return float(spectral.log_det_D + np.log1p(-lam * spectral.eigenvalues).sum())


def log_det_precision_grad(graph: ArealGraph, lam: float, spectral: Optional[CarSpectral] = None) -> float:
    _check_lambda(lam)
    gamma = (spectral or graph.spectral).eigenvalues
    return float(-(gamma / (1.0 - lam * gamma)).sum())


def _sparse_cholesky(Q: sparse.csc_matrix) -> sparse.csr_matrix:
    """Lower factor C with Q = C C^T, from an unpivoted sparse LU of the SPD matrix Q"""
    K = Q.shape[0]
    lu = splu(Q, permc_spec="NATURAL", diag_pivot_thresh=0.0, options={"SymmetricMode": True})
    identity = np.arange(K)
    if not (np.array_equal(lu.perm_r, identity) and np.array_equal(lu.perm_c, identity)):
        raise DomainError("CAR precision could not be factored without pivoting")
    pivots = lu.U.diagonal()
    if np.any(pivots <= 0.0):
        raise DomainError("CAR precision is not positive definite")
    # Q = L diag(pivots) L^T with unit-diagonal L
    return (lu.L @ sparse.diags(np.sqrt(pivots))).tocsr()


def sample_car(graph: ArealGraph, lam: float, sigma2: float, rng: np.random.Generator) -> np.ndarray:
    """Exact draw from MVN(0, sigma2 (D - lam W)^{-1}): solve C^T x = z with Q = C C^T"""
    Q = car_precision(graph, lam, sigma2)
    lower = _sparse_cholesky(Q)
    z = rng.standard_normal(graph.n_sections)
    return spsolve_triangular(lower.T.tocsr(), z, lower=False)
