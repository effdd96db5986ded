"""Convergence and sampler-health diagnostics over multi-chain draws."""
import logging
import warnings
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from app.core.exceptions import DiagnosticUnavailableError, InsufficientDrawsError
from app.models.domain import PosteriorDraws
from app.models.schemas import RhatRow


logger = logging.getLogger(__name__)

CONVERGENCE_THRESHOLD = 1.01


class DegenerateRhatWarning(UserWarning):
    """Zero within-chain variance; R-hat reported as +inf"""


def _split_chains(chains: np.ndarray) -> np.ndarray:
    """(m, n) -> (2m, n // 2); the middle draw is dropped for odd n"""
    m, n = chains.shape
    half = n // 2
    return np.vstack([chains[:, :half], chains[:, n - half:]])


def split_rhat_array(chains: np.ndarray) -> float:
    chains = np.asarray(chains, float)
    if chains.ndim != 2:
        raise ValueError("chains must be a 2-d array (n_chains, n_draws)")
    m, n = chains.shape
    if m < 2:
        raise DiagnosticUnavailableError("Split R-hat needs at least two chains")
    if n < 4:
        raise InsufficientDrawsError(f"Split R-hat needs at least 4 draws per chain, got {n}")
    halves = _split_chains(chains)
    n_half = halves.shape[1]
    W = halves.var(axis=1, ddof=1).mean()
    B = n_half * halves.mean(axis=1).var(ddof=1)
    if not W > 0:
        warnings.warn("Within-chain variance is zero; R-hat is undefined", DegenerateRhatWarning)
        return float("inf")
    var_hat = (n_half - 1) / n_half * W + B / n_half
    return float(np.sqrt(var_hat / W))


def split_rhat(draws: PosteriorDraws, parameter: str) -> float:
    """Split R-hat of one named parameter; +inf (with a warning) when degenerate"""
    return split_rhat_array(draws.chain_matrix(parameter))


def rhat_table(draws: PosteriorDraws, parameters: Optional[Sequence[str]] = None) -> List[RhatRow]:
    rows = []
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", DegenerateRhatWarning)
        for name in parameters or draws.names:
            before = len(caught)
            value = split_rhat(draws, name)
            rows.append(RhatRow(parameter=name, rhat=value, degenerate=len(caught) > before))
    degenerate = [row.parameter for row in rows if row.degenerate]
    if degenerate:
        logger.warning(f"Degenerate R-hat (constant draws) for {len(degenerate)} parameter(s), e.g. {degenerate[0]}")
    return rows


def _autocovariance(x: np.ndarray) -> np.ndarray:
    n = len(x)
    centered = x - x.mean()
    size = 1 << (2 * n - 1).bit_length()
    spectrum = np.fft.rfft(centered, n=size)
    acov = np.fft.irfft(spectrum * np.conjugate(spectrum), n=size)[:n]
    return acov / n


def effective_sample_size(chains: np.ndarray) -> float:
    """Multi-chain ESS with Geyer's initial monotone positive sequence"""
    chains = np.asarray(chains, float)
    m, n = chains.shape
    if n < 4:
        raise InsufficientDrawsError(f"ESS needs at least 4 draws per chain, got {n}")
    acov = np.stack([_autocovariance(chain) for chain in chains])
    chain_var = acov[:, 0] * n / (n - 1.0)
    mean_var = chain_var.mean()
    var_plus = mean_var * (n - 1.0) / n
    if m > 1:
        var_plus += chains.mean(axis=1).var(ddof=1)
    if not var_plus > 0:
        return float("nan")

    rho = 1.0 - (mean_var - acov.mean(axis=0)) / var_plus
    rho[0] = 1.0
    # Sum consecutive pairs while they stay positive, enforcing monotonicity
    pair_sums = []
    t = 0
    while t + 1 < n:
        pair = rho[t] + rho[t + 1]
        if pair < 0:
            break
        pair_sums.append(pair)
        t += 2
    pair_sums = np.minimum.accumulate(np.asarray(pair_sums)) if pair_sums else np.array([1.0])
    tau = -1.0 + 2.0 * pair_sums.sum()
    tau = max(tau, 1.0 / np.log10(m * n))
    return float(m * n / tau)


def bfmi(energy: np.ndarray) -> float:
    """Energy Bayesian fraction of missing information for one chain"""
    energy = np.asarray(energy, float)
    denominator = ((energy - energy.mean()) ** 2).sum()
    if not denominator > 0:
        return float("nan")
    return float((np.diff(energy) ** 2).sum() / denominator)


def sampler_report(draws: PosteriorDraws, max_tree_depth: int,
                   parameters: Optional[Sequence[str]] = None) -> Dict[str, Any]:
    """Diagnostics block written into run manifests"""
    report: Dict[str, Any] = {
        "n_chains": draws.n_chains,
        "n_draws": draws.n_draws,
        "divergent": int(draws.n_divergent),
    }
    if draws.stats:
        report["mean_accept_stat"] = float(draws.stat("accept_stat").mean())
        report["treedepth_saturated"] = int((draws.stat("treedepth") >= max_tree_depth).sum())
        report["e_bfmi"] = [bfmi(energy) for energy in draws.stat("energy")]
    if draws.n_chains >= 2 and draws.n_draws >= 4:
        rows = rhat_table(draws, parameters)
        finite = [row.rhat for row in rows if np.isfinite(row.rhat)]
        report["max_rhat"] = max(finite) if finite else None
        report["rhat"] = {row.parameter: row.rhat for row in rows}
        report["degenerate_rhat"] = [row.parameter for row in rows if row.degenerate]
        not_converged = [row.parameter for row in rows if not row.degenerate and row.rhat >= CONVERGENCE_THRESHOLD]
        report["not_converged"] = not_converged
        if not_converged:
            logger.warning(f"{len(not_converged)} parameter(s) with R-hat >= {CONVERGENCE_THRESHOLD}")
    else:
        report["rhat"] = None
        logger.warning("R-hat unavailable: fewer than two chains")
    return report
