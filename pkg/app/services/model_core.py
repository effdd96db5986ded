"""
Joint log-densities of the five areal count models.

    Y_kt ~ Poisson(mu_kt),  ln mu_kt = x_kt . beta + O_kt + (random effect)

    M1   theta_k             iid N(0, sigma2_theta)
    M2   Phi_k               CAR: MVN(0, sigma2_phi (D - lam W)^{-1})
    M3a  Phi_k + eta_t       CAR + AR(1) over years, rho
    M3b  Phi_k + eta_gt      CAR + tributary AR(1), logit(rho_g) = logit(P) + r_g, sum_g r_g = 0
    M4   Phi_kt              Phi_1 ~ CAR, Phi_t | Phi_{t-1} ~ MVN(rho Phi_{t-1}, CAR covariance)

Poisson log-factorial terms are dropped: they are constant in the parameters, so
adding one to a count Y_kt changes the log joint by exactly ln mu_kt.

Random effects are handled as "processes": a rows x cols field whose columns follow
F_1 = V_1, F_t = rho F_{t-1} + V_t, with innovations V either CAR-distributed (rows
are sections) or iid normal. Models differ only in which processes they carry and
how the fields are added to the linear predictor.
"""
import logging
from collections import namedtuple
from dataclasses import replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import stats
from scipy.special import expit, gammaln, logit

from app.core.exceptions import StructuralError, DataValidationError
from app.models.domain import ArealGraph, Dataset, Parameters
from app.models.schemas import ModelSpec, ModelVariant, Parameterization, PriorConfig
from app.services.areal_graph import sample_car


logger = logging.getLogger(__name__)

LOG_2PI = float(np.log(2.0 * np.pi))

_Process = namedtuple("_Process", ["name", "kind", "rows", "cols", "variance", "rho"])


def _variance_names(variant: ModelVariant) -> List[str]:
    return {
        ModelVariant.M1: ["sigma2_theta"],
        ModelVariant.M2: ["sigma2_phi"],
        ModelVariant.M3A: ["sigma2_phi", "sigma2_eta"],
        ModelVariant.M3B: ["sigma2_phi", "sigma2_eta"],
        ModelVariant.M4: ["sigma2_phi"],
    }[variant]


def _unit_names(variant: ModelVariant) -> List[str]:
    return {
        ModelVariant.M1: [],
        ModelVariant.M2: ["lambda"],
        ModelVariant.M3A: ["lambda", "rho"],
        ModelVariant.M3B: ["lambda", "P"],
        ModelVariant.M4: ["lambda", "rho"],
    }[variant]


def _processes(variant: ModelVariant, K: int, T: int, G: int) -> List[_Process]:
    if variant == ModelVariant.M1:
        return [_Process("theta", "iid", K, 1, "sigma2_theta", None)]
    if variant == ModelVariant.M2:
        return [_Process("phi", "car", K, 1, "sigma2_phi", None)]
    if variant == ModelVariant.M3A:
        return [_Process("phi", "car", K, 1, "sigma2_phi", None),
                _Process("eta", "iid", 1, T, "sigma2_eta", "rho")]
    if variant == ModelVariant.M3B:
        return [_Process("phi", "car", K, 1, "sigma2_phi", None),
                _Process("eta", "iid", G, T, "sigma2_eta", "rho_g")]
    return [_Process("phi", "car", K, T, "sigma2_phi", "rho")]


class ParameterLayout:
    """
    Column layout of one variant on both scales.

    Unconstrained blocks: beta, log variances, logit of lambda/rho/P, the G-1 free
    tributary offsets (M3b) and the random-effect blocks (fields when centered,
    standardized innovations when non-centered). Constrained names are the columns
    of persisted draws.
    """

    def __init__(self, variant: ModelVariant, coefficient_names: Sequence[str],
                 n_sections: int, n_years: int, n_groups: int,
                 parameterization: Parameterization = Parameterization.NONCENTERED):
        self.variant = ModelVariant(variant)
        self.coefficient_names = tuple(coefficient_names)
        self.n_beta = len(self.coefficient_names)
        self.K, self.T, self.G = n_sections, n_years, n_groups
        self.parameterization = Parameterization(parameterization)
        self.variance_names = _variance_names(self.variant)
        self.unit_names = _unit_names(self.variant)
        self.processes = _processes(self.variant, self.K, self.T, self.G)

        sizes = [("beta", self.n_beta)]
        sizes += [(f"log_{name}", 1) for name in self.variance_names]
        sizes += [(f"logit_{name}", 1) for name in self.unit_names]
        if self.variant == ModelVariant.M3B:
            sizes.append(("r_free", self.G - 1))
        sizes += [(proc.name, proc.rows * proc.cols) for proc in self.processes]
        self.blocks: Dict[str, slice] = {}
        start = 0
        for name, size in sizes:
            self.blocks[name] = slice(start, start + size)
            start += size
        self.dim = start
        self.constrained_names = self._constrained_names()

    def _constrained_names(self) -> List[str]:
        names = [f"beta_{c}" for c in self.coefficient_names]
        names += list(self.variance_names)
        names += list(self.unit_names)
        if self.variant == ModelVariant.M3B:
            names += [f"r[{g + 1}]" for g in range(self.G)]
            names += [f"rho_g[{g + 1}]" for g in range(self.G)]
        for proc in self.processes:
            names += self._field_names(proc)
        return names

    def _field_names(self, proc: _Process) -> List[str]:
        if proc.name == "eta" and proc.rows == 1:
            return [f"eta[{t + 1}]" for t in range(proc.cols)]
        if proc.cols == 1:
            return [f"{proc.name}[{k + 1}]" for k in range(proc.rows)]
        return [f"{proc.name}[{i + 1},{t + 1}]" for i in range(proc.rows) for t in range(proc.cols)]

    def field_shape(self, name: str) -> Tuple[int, ...]:
        for proc in self.processes:
            if proc.name == name:
                if proc.name == "eta" and proc.rows == 1:
                    return (proc.cols,)
                if proc.cols == 1:
                    return (proc.rows,)
                return (proc.rows, proc.cols)
        raise KeyError(name)

    def flatten(self, params: Parameters) -> np.ndarray:
        parts = [np.asarray(params.beta, float)]
        parts += [np.array([getattr(params, name)], float) for name in self.variance_names]
        for name in self.unit_names:
            value = params.lam if name == "lambda" else getattr(params, name)
            parts.append(np.array([value], float))
        if self.variant == ModelVariant.M3B:
            parts += [np.asarray(params.r, float), np.asarray(params.rho_g, float)]
        for proc in self.processes:
            parts.append(np.asarray(getattr(params, proc.name), float).ravel())
        return np.concatenate(parts)

    def unflatten(self, row: np.ndarray) -> Parameters:
        row = np.asarray(row, float)
        values = {"beta": row[:self.n_beta].copy()}
        pos = self.n_beta
        for name in self.variance_names:
            values[name] = float(row[pos])
            pos += 1
        for name in self.unit_names:
            values["lam" if name == "lambda" else name] = float(row[pos])
            pos += 1
        if self.variant == ModelVariant.M3B:
            values["r"] = row[pos:pos + self.G].copy()
            pos += 2 * self.G
        for proc in self.processes:
            size = proc.rows * proc.cols
            values[proc.name] = row[pos:pos + size].reshape(self.field_shape(proc.name)).copy()
            pos += size
        return Parameters(**values)


def _rho_rows(rho, rows: int) -> np.ndarray:
    if rho is None:
        return np.zeros(rows)
    return np.broadcast_to(np.atleast_1d(np.asarray(rho, float)).ravel(), (rows,)).copy()


def _innovations(F: np.ndarray, rho: np.ndarray) -> np.ndarray:
    E = F.copy()
    if F.shape[1] > 1:
        E[:, 1:] -= rho[:, None] * F[:, :-1]
    return E


def _innovations_adjoint(dE: np.ndarray, rho: np.ndarray, F: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    dF = dE.copy()
    drho = np.zeros(F.shape[0])
    if F.shape[1] > 1:
        dF[:, :-1] -= rho[:, None] * dE[:, 1:]
        drho = -(dE[:, 1:] * F[:, :-1]).sum(axis=1)
    return dF, drho


def _accumulate(V: np.ndarray, rho: np.ndarray) -> np.ndarray:
    F = V.copy()
    for t in range(1, V.shape[1]):
        F[:, t] += rho * F[:, t - 1]
    return F


def _accumulate_adjoint(gF: np.ndarray, rho: np.ndarray, F: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    a = gF.copy()
    for t in range(gF.shape[1] - 2, -1, -1):
        a[:, t] += rho * a[:, t + 1]
    drho = np.zeros(F.shape[0])
    if F.shape[1] > 1:
        drho = (a[:, 1:] * F[:, :-1]).sum(axis=1)
    return a, drho


def _inv_gamma_logpdf(x: float, shape: float, scale: float) -> Tuple[float, float]:
    lp = shape * np.log(scale) - gammaln(shape) - (shape + 1.0) * np.log(x) - scale / x
    return float(lp), float(-(shape + 1.0) / x + scale / x ** 2)


def _log_jacobian_logit(u: float) -> float:
    return float(-np.logaddexp(0.0, -u) - np.logaddexp(0.0, u))


class LogPosterior:
    """
    Unnormalized log posterior of one variant on one dataset.

    `log_joint_terms` evaluates the centered density at constrained Parameters;
    `log_density_and_gradient` evaluates the sampling density on the unconstrained
    space of `layout` (including log-Jacobians) together with its exact gradient.
    """

    def __init__(self, spec: ModelSpec, dataset: Dataset):
        self.spec = spec
        self.dataset = dataset
        self.variant = ModelVariant(spec.variant)
        self.priors: PriorConfig = spec.priors
        graph = dataset.graph
        self.K, self.T, self.G = graph.n_sections, dataset.n_years, graph.n_groups
        self.layout = ParameterLayout(
            self.variant, dataset.coefficient_names, self.K, self.T, self.G, spec.parameterization
        )
        self.noncentered = self.layout.parameterization == Parameterization.NONCENTERED

        self.k_idx, self.t_idx = np.nonzero(dataset.observed)
        n = len(self.k_idx)
        self.X = np.column_stack([np.ones(n), dataset.covariates[self.k_idx, self.t_idx, :]]).reshape(
            n, self.layout.n_beta
        )
        self.y = dataset.counts[self.k_idx, self.t_idx].astype(float)
        self.offset = dataset.log_offset[self.k_idx, self.t_idx] + np.log(spec.rate_multiplier)

        spectral = graph.spectral
        self.degrees = graph.degrees.astype(float)
        self.W = graph.adjacency
        self.gamma = spectral.eigenvalues
        self.log_det_D = spectral.log_det_D
        self.S = spectral.field_basis
        self.S_inv = spectral.field_basis_inverse
        self.group_index = graph.group_index
        self.H = graph.group_indicator()

    # ------------------------------------------------------------------
    # Building blocks
    # ------------------------------------------------------------------

    def _assemble(self, fields: Dict[str, np.ndarray]) -> np.ndarray:
        K, T = self.K, self.T
        if self.variant == ModelVariant.M1:
            return np.repeat(fields["theta"], T, axis=1)
        if self.variant == ModelVariant.M2:
            return np.repeat(fields["phi"], T, axis=1)
        if self.variant == ModelVariant.M3A:
            return fields["phi"] + fields["eta"]
        if self.variant == ModelVariant.M3B:
            return fields["phi"] + fields["eta"][self.group_index]
        return fields["phi"].reshape(K, T)

    def _disassemble(self, gR: np.ndarray) -> Dict[str, np.ndarray]:
        if self.variant == ModelVariant.M1:
            return {"theta": gR.sum(axis=1, keepdims=True)}
        if self.variant == ModelVariant.M2:
            return {"phi": gR.sum(axis=1, keepdims=True)}
        if self.variant == ModelVariant.M3A:
            return {"phi": gR.sum(axis=1, keepdims=True), "eta": gR.sum(axis=0, keepdims=True)}
        if self.variant == ModelVariant.M3B:
            return {"phi": gR.sum(axis=1, keepdims=True), "eta": self.H @ gR}
        return {"phi": gR}

    def _likelihood(self, beta: np.ndarray, R: np.ndarray) -> Tuple[float, np.ndarray, np.ndarray]:
        log_mu = self.X @ beta + self.offset + R[self.k_idx, self.t_idx]
        mu = np.exp(log_mu)
        lp = float(self.y @ log_mu - mu.sum())
        residual = self.y - mu
        gR = np.zeros((self.K, self.T))
        gR[self.k_idx, self.t_idx] = residual
        return lp, self.X.T @ residual, gR

    def _fixed_prior(self, beta: np.ndarray) -> Tuple[float, np.ndarray]:
        v = self.priors.beta_variance
        lp = -0.5 * len(beta) * (LOG_2PI + np.log(v)) - 0.5 * float(beta @ beta) / v
        return float(lp), -beta / v

    def _r_prior(self, r_free: np.ndarray) -> Tuple[float, np.ndarray]:
        v = self.priors.r_variance
        lp = -0.5 * len(r_free) * (LOG_2PI + np.log(v)) - 0.5 * float(r_free @ r_free) / v
        return float(lp), -r_free / v

    def _car_logpdf(self, F: np.ndarray, lam: float, sigma2: float, rho: np.ndarray):
        K, n = F.shape
        E = _innovations(F, rho)
        WE = self.W @ E
        QE = self.degrees[:, None] * E - lam * WE
        quad = float((E * QE).sum())
        wquad = float((E * WE).sum())
        log_det = self.log_det_D + float(np.log1p(-lam * self.gamma).sum())
        lp = n * (-0.5 * K * (LOG_2PI + np.log(sigma2)) + 0.5 * log_det) - 0.5 * quad / sigma2
        dF, drho = _innovations_adjoint(-QE / sigma2, rho, F)
        dsigma2 = -0.5 * n * K / sigma2 + 0.5 * quad / sigma2 ** 2
        dlam = -0.5 * n * float((self.gamma / (1.0 - lam * self.gamma)).sum()) + 0.5 * wquad / sigma2
        return float(lp), dF, dsigma2, dlam, drho

    @staticmethod
    def _iid_logpdf(F: np.ndarray, sigma2: float, rho: np.ndarray):
        rows, n = F.shape
        E = _innovations(F, rho)
        ss = float((E * E).sum())
        lp = -0.5 * rows * n * (LOG_2PI + np.log(sigma2)) - 0.5 * ss / sigma2
        dF, drho = _innovations_adjoint(-E / sigma2, rho, F)
        dsigma2 = -0.5 * rows * n / sigma2 + 0.5 * ss / sigma2 ** 2
        return float(lp), dF, dsigma2, drho

    def _car_scales(self, lam: float) -> np.ndarray:
        return 1.0 / np.sqrt(1.0 - lam * self.gamma)

    def _innovations_from_standard(self, proc: _Process, Z: np.ndarray, lam: float, sigma2: float) -> np.ndarray:
        if proc.kind == "car":
            return np.sqrt(sigma2) * (self.S @ (self._car_scales(lam)[:, None] * Z))
        return np.sqrt(sigma2) * Z

    def _standard_from_innovations(self, proc: _Process, V: np.ndarray, lam: float, sigma2: float) -> np.ndarray:
        if proc.kind == "car":
            return (self.S_inv @ V) / (np.sqrt(sigma2) * self._car_scales(lam)[:, None])
        return V / np.sqrt(sigma2)

    def _standard_adjoint(self, proc: _Process, gV: np.ndarray, Z: np.ndarray, V: np.ndarray,
                          lam: float, sigma2: float) -> Tuple[np.ndarray, float, float]:
        """Gradients of a loss with d loss / dV = gV w.r.t. Z, sigma2 and lambda"""
        dsigma2 = float((gV * V).sum()) / (2.0 * sigma2)
        if proc.kind == "car":
            sigma = np.sqrt(sigma2)
            scale = self._car_scales(lam)
            projected = self.S.T @ gV
            gZ = sigma * scale[:, None] * projected
            dscale = 0.5 * self.gamma * scale ** 3
            dlam = sigma * float((projected * dscale[:, None] * Z).sum())
            return gZ, dsigma2, dlam
        return np.sqrt(sigma2) * gV, dsigma2, 0.0

    # ------------------------------------------------------------------
    # Unconstrained space
    # ------------------------------------------------------------------

    def _unpack_hyper(self, u: np.ndarray) -> Tuple[Dict[str, float], float]:
        blocks = self.layout.blocks
        hyper: Dict[str, float] = {}
        log_jacobian = 0.0
        for name in self.layout.variance_names:
            value = float(u[blocks[f"log_{name}"]][0])
            hyper[name] = float(np.exp(value))
            log_jacobian += value
        for name in self.layout.unit_names:
            value = float(u[blocks[f"logit_{name}"]][0])
            hyper[name] = float(expit(value))
            log_jacobian += _log_jacobian_logit(value)
        return hyper, log_jacobian

    def _rho_for(self, proc: _Process, hyper: Dict[str, float], rho_g: Optional[np.ndarray]) -> np.ndarray:
        if proc.rho == "rho":
            return _rho_rows(hyper["rho"], proc.rows)
        if proc.rho == "rho_g":
            return np.asarray(rho_g, float)
        return _rho_rows(None, proc.rows)

    def _tributary_offsets(self, u: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        blocks = self.layout.blocks
        r_free = u[blocks["r_free"]]
        r = np.append(r_free, -r_free.sum())
        rho_g = expit(u[blocks["logit_P"]][0] + r)
        return r_free, r, rho_g

    def constrain(self, u: np.ndarray) -> Parameters:
        u = np.asarray(u, float)
        blocks = self.layout.blocks
        hyper, _ = self._unpack_hyper(u)
        rho_g = None
        values = {"beta": u[blocks["beta"]].copy()}
        if self.variant == ModelVariant.M3B:
            _, r, rho_g = self._tributary_offsets(u)
            values["r"] = r
        for proc in self.layout.processes:
            block = u[blocks[proc.name]].reshape(proc.rows, proc.cols)
            if self.noncentered:
                V = self._innovations_from_standard(proc, block, hyper.get("lambda", 0.0), hyper[proc.variance])
                F = _accumulate(V, self._rho_for(proc, hyper, rho_g))
            else:
                F = block.copy()
            values[proc.name] = F.reshape(self.layout.field_shape(proc.name))
        for name in self.layout.variance_names:
            values[name] = hyper[name]
        for name in self.layout.unit_names:
            values["lam" if name == "lambda" else name] = hyper[name]
        return Parameters(**values)

    def unconstrain(self, params: Parameters) -> np.ndarray:
        self.check_structure(params)
        blocks = self.layout.blocks
        u = np.zeros(self.layout.dim)
        u[blocks["beta"]] = params.beta
        hyper: Dict[str, float] = {}
        for name in self.layout.variance_names:
            hyper[name] = float(getattr(params, name))
            u[blocks[f"log_{name}"]] = np.log(hyper[name])
        for name in self.layout.unit_names:
            hyper[name] = float(params.lam if name == "lambda" else getattr(params, name))
            u[blocks[f"logit_{name}"]] = logit(hyper[name])
        rho_g = None
        if self.variant == ModelVariant.M3B:
            u[blocks["r_free"]] = np.asarray(params.r, float)[:-1]
            rho_g = params.rho_g
        for proc in self.layout.processes:
            F = np.asarray(getattr(params, proc.name), float).reshape(proc.rows, proc.cols)
            if self.noncentered:
                V = _innovations(F, self._rho_for(proc, hyper, rho_g))
                block = self._standard_from_innovations(proc, V, hyper.get("lambda", 0.0), hyper[proc.variance])
            else:
                block = F
            u[blocks[proc.name]] = block.ravel()
        return u

    def log_density(self, u: np.ndarray) -> float:
        return self.log_density_and_gradient(u)[0]

    def log_density_and_gradient(self, u: np.ndarray) -> Tuple[float, np.ndarray]:
        u = np.asarray(u, float)
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            lp, grad = self._evaluate(u)
        if not np.isfinite(lp) or not np.all(np.isfinite(grad)):
            return -np.inf, np.zeros_like(u)
        return lp, grad

    __call__ = log_density_and_gradient

    def _evaluate(self, u: np.ndarray) -> Tuple[float, np.ndarray]:
        layout, blocks = self.layout, self.layout.blocks
        grad = np.zeros(layout.dim)
        hyper, lp = self._unpack_hyper(u)
        g_hyper = {name: 0.0 for name in hyper}
        lam = hyper.get("lambda", 0.0)

        r_free = rho_g = None
        g_rho_g = None
        if self.variant == ModelVariant.M3B:
            r_free, _, rho_g = self._tributary_offsets(u)
            g_rho_g = np.zeros(self.G)

        blocks_by_process, fields, innovations = {}, {}, {}
        for proc in layout.processes:
            block = u[blocks[proc.name]].reshape(proc.rows, proc.cols)
            blocks_by_process[proc.name] = block
            if self.noncentered:
                V = self._innovations_from_standard(proc, block, lam, hyper[proc.variance])
                innovations[proc.name] = V
                fields[proc.name] = _accumulate(V, self._rho_for(proc, hyper, rho_g))
            else:
                fields[proc.name] = block

        beta = u[blocks["beta"]]
        lp_lik, g_beta, gR = self._likelihood(beta, self._assemble(fields))
        lp_beta, g_beta_prior = self._fixed_prior(beta)
        lp += lp_lik + lp_beta
        grad[blocks["beta"]] = g_beta + g_beta_prior
        g_fields = self._disassemble(gR)

        for proc in layout.processes:
            F, block = fields[proc.name], blocks_by_process[proc.name]
            rho = self._rho_for(proc, hyper, rho_g)
            sigma2 = hyper[proc.variance]
            if self.noncentered:
                gV, drho = _accumulate_adjoint(g_fields[proc.name], rho, F)
                gZ, dsigma2, dlam = self._standard_adjoint(proc, gV, block, innovations[proc.name], lam, sigma2)
                lp += -0.5 * float((block * block).sum()) - 0.5 * block.size * LOG_2PI
                grad[blocks[proc.name]] = (gZ - block).ravel()
            else:
                if proc.kind == "car":
                    lp_re, dF, dsigma2, dlam, drho = self._car_logpdf(F, lam, sigma2, rho)
                else:
                    lp_re, dF, dsigma2, drho = self._iid_logpdf(F, sigma2, rho)
                    dlam = 0.0
                lp += lp_re
                grad[blocks[proc.name]] = (g_fields[proc.name] + dF).ravel()
            g_hyper[proc.variance] += dsigma2
            if proc.kind == "car":
                g_hyper["lambda"] += dlam
            if proc.rho == "rho":
                g_hyper["rho"] += float(drho.sum())
            elif proc.rho == "rho_g":
                g_rho_g += drho

        for name in layout.variance_names:
            lp_ig, d_ig = _inv_gamma_logpdf(hyper[name], self.priors.inv_gamma_shape, self.priors.inv_gamma_scale)
            lp += lp_ig
            grad[blocks[f"log_{name}"]] = (g_hyper[name] + d_ig) * hyper[name] + 1.0
        for name in layout.unit_names:
            x = hyper[name]
            grad[blocks[f"logit_{name}"]] = g_hyper[name] * x * (1.0 - x) + (1.0 - 2.0 * x)

        if self.variant == ModelVariant.M3B:
            lp_r, g_r = self._r_prior(r_free)
            lp += lp_r
            a = g_rho_g * rho_g * (1.0 - rho_g)
            grad[blocks["logit_P"]] += a.sum()
            grad[blocks["r_free"]] = a[:-1] - a[-1] + g_r
        return lp, grad

    def initial_point(self, rng: np.random.Generator, jitter: float = 0.5) -> np.ndarray:
        """Prior medians on the unconstrained scale plus uniform jitter"""
        u = np.zeros(self.layout.dim)
        median = stats.invgamma.median(self.priors.inv_gamma_shape, scale=self.priors.inv_gamma_scale)
        for name in self.layout.variance_names:
            u[self.layout.blocks[f"log_{name}"]] = np.log(median)
        return u + rng.uniform(-jitter, jitter, size=self.layout.dim)

    # ------------------------------------------------------------------
    # Constrained space
    # ------------------------------------------------------------------

    def check_structure(self, params: Parameters) -> None:
        if np.shape(params.beta) != (self.layout.n_beta,):
            raise StructuralError(f"beta must have length {self.layout.n_beta}, got shape {np.shape(params.beta)}")
        for name in self.layout.variance_names:
            if getattr(params, name) is None:
                raise StructuralError(f"Model {self.variant.value} requires {name}")
        for name in self.layout.unit_names:
            if (params.lam if name == "lambda" else getattr(params, name)) is None:
                raise StructuralError(f"Model {self.variant.value} requires {name}")
        if self.variant == ModelVariant.M3B and np.shape(params.r) != (self.G,):
            raise StructuralError(f"Model 3b requires r of length {self.G}")
        for proc in self.layout.processes:
            value = getattr(params, proc.name)
            expected = self.layout.field_shape(proc.name)
            if value is None or np.shape(value) != expected:
                raise StructuralError(
                    f"Model {self.variant.value} requires {proc.name} with shape {expected}, got "
                    f"{None if value is None else np.shape(value)}"
                )

    def _in_domain(self, params: Parameters) -> bool:
        for name in self.layout.variance_names:
            value = getattr(params, name)
            if not np.isfinite(value) or value <= 0:
                return False
        for name in self.layout.unit_names:
            value = params.lam if name == "lambda" else getattr(params, name)
            upper_open = name == "P"
            if not np.isfinite(value) or value < 0 or value >= 1 or (upper_open and value <= 0):
                return False
        if self.variant == ModelVariant.M3B:
            r = np.asarray(params.r, float)
            if not np.all(np.isfinite(r)) or abs(r.sum()) > 1e-12 * max(1.0, np.abs(r).max()):
                return False
        return True

    def log_joint_terms(self, params: Parameters) -> Dict[str, float]:
        self.check_structure(params)
        terms = {"likelihood": 0.0, "fixed_effects": 0.0, "hyperpriors": 0.0, "random_effects": 0.0}
        if not self._in_domain(params):
            terms["hyperpriors"] = -np.inf
            return terms
        hyper = {name: float(getattr(params, name)) for name in self.layout.variance_names}
        lam = float(params.lam) if params.lam is not None else 0.0
        if params.rho is not None:
            hyper["rho"] = float(params.rho)
        rho_g = params.rho_g if self.variant == ModelVariant.M3B else None
        fields = {
            proc.name: np.asarray(getattr(params, proc.name), float).reshape(proc.rows, proc.cols)
            for proc in self.layout.processes
        }
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            beta = np.asarray(params.beta, float)
            terms["likelihood"] = self._likelihood(beta, self._assemble(fields))[0]
            terms["fixed_effects"] = self._fixed_prior(beta)[0]
            for proc in self.layout.processes:
                rho = self._rho_for(proc, hyper, rho_g)
                if proc.kind == "car":
                    terms["random_effects"] += self._car_logpdf(fields[proc.name], lam, hyper[proc.variance], rho)[0]
                else:
                    terms["random_effects"] += self._iid_logpdf(fields[proc.name], hyper[proc.variance], rho)[0]
            for name in self.layout.variance_names:
                terms["hyperpriors"] += _inv_gamma_logpdf(
                    hyper[name], self.priors.inv_gamma_shape, self.priors.inv_gamma_scale
                )[0]
            if self.variant == ModelVariant.M3B:
                terms["hyperpriors"] += self._r_prior(np.asarray(params.r, float)[:-1])[0]
        for key, value in terms.items():
            if not np.isfinite(value):
                terms[key] = -np.inf
        return terms

    def log_joint(self, params: Parameters) -> float:
        return float(sum(self.log_joint_terms(params).values()))


# ----------------------------------------------------------------------
# Module-level operations
# ----------------------------------------------------------------------

def random_effect_grid(params: Parameters, n_sections: int, n_years: int,
                       group_index: Optional[np.ndarray] = None) -> np.ndarray:
    """K x T random-effect contribution to ln mu for whichever effects `params` carries"""
    K, T = n_sections, n_years
    R = np.zeros((K, T))
    if params.theta is not None:
        theta = np.asarray(params.theta, float)
        if theta.shape != (K,):
            raise StructuralError(f"theta must have shape ({K},)")
        R += theta[:, None]
    if params.phi is not None:
        phi = np.asarray(params.phi, float)
        if phi.shape == (K,):
            R += phi[:, None]
        elif phi.shape == (K, T):
            R += phi
        else:
            raise StructuralError(f"phi must have shape ({K},) or ({K}, {T}), got {phi.shape}")
    if params.eta is not None:
        eta = np.asarray(params.eta, float)
        if eta.shape == (T,):
            R += eta[None, :]
        elif eta.ndim == 2 and eta.shape[1] == T and group_index is not None:
            R += eta[np.asarray(group_index)]
        else:
            raise StructuralError(f"eta must have shape ({T},) or (G, {T}), got {eta.shape}")
    return R


def linear_predictor_grid(params: Parameters, dataset: Dataset) -> np.ndarray:
    """K x T ln mu; NaN where covariates or offsets are missing"""
    beta = np.asarray(params.beta, float)
    if beta.shape != (dataset.n_covariates + 1,):
        raise StructuralError(f"beta must have length {dataset.n_covariates + 1}")
    R = random_effect_grid(params, dataset.n_sections, dataset.n_years, dataset.graph.group_index)
    return beta[0] + dataset.covariates @ beta[1:] + dataset.log_offset + R


def linear_predictor(params: Parameters, dataset: Dataset, k: int, t: int) -> float:
    """ln mu for section index k and year index t (both zero-based)"""
    beta = np.asarray(params.beta, float)
    if beta.shape != (dataset.n_covariates + 1,):
        raise StructuralError(f"beta must have length {dataset.n_covariates + 1}")
    x = dataset.covariates[k, t]
    offset = dataset.log_offset[k, t]
    if not np.all(np.isfinite(x)) or not np.isfinite(offset):
        raise DataValidationError(
            f"Section {dataset.graph.section_ids[k]} in {dataset.years[t]} has no covariates/offset"
        )
    R = random_effect_grid(params, dataset.n_sections, dataset.n_years, dataset.graph.group_index)
    return float(beta[0] + x @ beta[1:] + offset + R[k, t])


def log_joint_terms(params: Parameters, dataset: Dataset, spec: ModelSpec) -> Dict[str, float]:
    return LogPosterior(spec, dataset).log_joint_terms(params)


def log_joint(params: Parameters, dataset: Dataset, spec: ModelSpec) -> float:
    """Log-likelihood + log-priors + log-hyperpriors; -inf outside the parameter domain"""
    return LogPosterior(spec, dataset).log_joint(params)


def log_joint_grad(uparams: np.ndarray, dataset: Dataset, spec: ModelSpec) -> np.ndarray:
    """Gradient of the unconstrained sampling density (log-Jacobians included)"""
    return LogPosterior(spec, dataset).log_density_and_gradient(uparams)[1]


def draw_random_effects(variant: ModelVariant, params: Parameters, graph: ArealGraph, n_years: int,
                        rng: np.random.Generator) -> Parameters:
    """Draw the random-effect fields of `variant` given the hyperparameters in `params`"""
    variant = ModelVariant(variant)
    K, T, G = graph.n_sections, n_years, graph.n_groups

    def ar_series(rows: int, rho: np.ndarray, sigma2: float) -> np.ndarray:
        V = np.sqrt(sigma2) * rng.standard_normal((rows, T))
        return _accumulate(V, rho)

    if variant == ModelVariant.M1:
        return replace(params, theta=rng.normal(0.0, np.sqrt(params.sigma2_theta), size=K))
    if variant == ModelVariant.M2:
        return replace(params, phi=sample_car(graph, params.lam, params.sigma2_phi, rng))
    if variant == ModelVariant.M3A:
        phi = sample_car(graph, params.lam, params.sigma2_phi, rng)
        eta = ar_series(1, np.array([params.rho]), params.sigma2_eta)[0]
        return replace(params, phi=phi, eta=eta)
    if variant == ModelVariant.M3B:
        if np.shape(params.r) != (G,):
            raise StructuralError(f"Model 3b requires r of length {G}")
        phi = sample_car(graph, params.lam, params.sigma2_phi, rng)
        return replace(params, phi=phi, eta=ar_series(G, params.rho_g, params.sigma2_eta))
    phi = np.empty((K, T))
    for t in range(T):
        innovation = sample_car(graph, params.lam, params.sigma2_phi, rng)
        phi[:, t] = innovation if t == 0 else params.rho * phi[:, t - 1] + innovation
    return replace(params, phi=phi)


def sample_hyperparameters(spec: ModelSpec, n_groups: int, rng: np.random.Generator, n_beta: int) -> Parameters:
    variant = ModelVariant(spec.variant)
    priors = spec.priors
    values = {"beta": rng.normal(0.0, np.sqrt(priors.beta_variance), size=n_beta)}
    for name in _variance_names(variant):
        values[name] = float(priors.inv_gamma_scale / rng.gamma(priors.inv_gamma_shape))
    for name in _unit_names(variant):
        values["lam" if name == "lambda" else name] = float(rng.uniform())
    if variant == ModelVariant.M3B:
        r_free = rng.normal(0.0, np.sqrt(priors.r_variance), size=n_groups - 1)
        values["r"] = np.append(r_free, -r_free.sum())
    return Parameters(**values)


def sample_prior(spec: ModelSpec, graph: ArealGraph, n_years: int, rng: np.random.Generator,
                 n_beta: int) -> Parameters:
    """One draw of every unknown from the full prior, r constrained to sum to zero"""
    hyper = sample_hyperparameters(spec, graph.n_groups, rng, n_beta)
    return draw_random_effects(spec.variant, hyper, graph, n_years, rng)


def prior_rho_marginal(n_draws: int, r_sd: float, rng: np.random.Generator) -> np.ndarray:
    """Draws of rho_g = expit(logit(P) + r_g) with P ~ U(0,1) and r_g ~ N(0, r_sd^2)"""
    P = rng.uniform(size=n_draws)
    r = rng.normal(0.0, r_sd, size=n_draws)
    return expit(logit(P) + r)
