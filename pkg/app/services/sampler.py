"""
No-U-Turn sampling of the model posteriors.

Multinomial NUTS with a diagonal Euclidean metric, the generalized U-turn
criterion (including the checks across merged sub-trajectories), dual-averaging
step-size adaptation and windowed metric adaptation during warm-up. Chains run
independently through `ChainRunner`, which schedules them on a process pool,
a thread pool or serially.
"""
import asyncio
import logging
from concurrent.futures import Executor, ProcessPoolExecutor, ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from app.core.exceptions import SamplerError
from app.models.domain import Dataset, PosteriorDraws
from app.models.schemas import ChainExecutor, ModelSpec, SamplerConfig
from app.services.model_core import LogPosterior


logger = logging.getLogger(__name__)

# Energy error beyond which a trajectory is flagged divergent
MAX_DELTA_H = 1000.0

STAT_NAMES = ("lp", "accept_stat", "stepsize", "treedepth", "n_leapfrog", "divergent", "energy")

Target = Callable[[np.ndarray], Tuple[float, np.ndarray]]


@dataclass
class _State:
    theta: np.ndarray
    p: np.ndarray
    p_sharp: np.ndarray
    grad: np.ndarray
    lp: float


@dataclass
class _Tree:
    beg: _State
    end: _State
    proposal: _State
    log_sum_weight: float
    rho: np.ndarray
    n_leapfrog: int
    sum_accept: float
    valid: bool
    divergent: bool


def _no_uturn(p_sharp_a: np.ndarray, p_sharp_b: np.ndarray, rho: np.ndarray) -> bool:
    return float(p_sharp_a @ rho) > 0 and float(p_sharp_b @ rho) > 0


def _persists(first_far: _State, first_near: _State, first_rho: np.ndarray,
              second: _Tree) -> bool:
    """U-turn checks when `second` is appended next to `first_near`"""
    rho = first_rho + second.rho
    if not _no_uturn(first_far.p_sharp, second.end.p_sharp, rho):
        return False
    if not _no_uturn(first_far.p_sharp, second.beg.p_sharp, first_rho + second.beg.p):
        return False
    return _no_uturn(first_near.p_sharp, second.end.p_sharp, second.rho + first_near.p)


class DualAveraging:
    """Nesterov dual averaging of log step size towards a target acceptance statistic"""

    def __init__(self, step_size: float, target_accept: float,
                 gamma: float = 0.05, t0: float = 10.0, kappa: float = 0.75):
        self.target_accept = target_accept
        self.gamma = gamma
        self.t0 = t0
        self.kappa = kappa
        self.restart(step_size)

    def restart(self, step_size: float) -> None:
        self.mu = np.log(10.0 * step_size)
        self.counter = 0
        self.s_bar = 0.0
        self.x_bar = 0.0

    def update(self, accept_stat: float) -> float:
        self.counter += 1
        accept_stat = min(1.0, accept_stat)
        eta = 1.0 / (self.counter + self.t0)
        self.s_bar = (1.0 - eta) * self.s_bar + eta * (self.target_accept - accept_stat)
        x = self.mu - self.s_bar * np.sqrt(self.counter) / self.gamma
        x_eta = self.counter ** (-self.kappa)
        self.x_bar = (1.0 - x_eta) * self.x_bar + x_eta * x
        return float(np.exp(x))

    def final_step_size(self) -> float:
        return float(np.exp(self.x_bar))


class WelfordVariance:
    def __init__(self, dim: int):
        self.dim = dim
        self.reset()

    def reset(self) -> None:
        self.n = 0
        self.mean = np.zeros(self.dim)
        self.m2 = np.zeros(self.dim)

    def add_sample(self, x: np.ndarray) -> None:
        self.n += 1
        delta = x - self.mean
        self.mean += delta / self.n
        self.m2 += delta * (x - self.mean)

    def regularized_variance(self) -> np.ndarray:
        n = self.n
        if n < 2:
            return np.ones(self.dim)
        variance = self.m2 / (n - 1.0)
        return (n / (n + 5.0)) * variance + 1e-3 * (5.0 / (n + 5.0))


class WindowedAdaptation:
    """
    Warm-up schedule: a fast initial buffer, doubling slow windows that estimate the
    metric, and a fast terminal buffer. Windows shrink proportionally for short warm-ups.
    """

    def __init__(self, n_warmup: int, init_buffer: int = 75, term_buffer: int = 50, base_window: int = 25):
        self.n_warmup = n_warmup
        self.adapt_metric = n_warmup >= 20
        if not self.adapt_metric:
            logger.warning(f"{n_warmup} warm-up iterations are too few for metric adaptation; adapting step size only")
        elif init_buffer + term_buffer + base_window > n_warmup:
            init_buffer = int(0.15 * n_warmup)
            term_buffer = int(0.1 * n_warmup)
            base_window = n_warmup - (init_buffer + term_buffer)
            logger.info(f"Short warm-up: adaptation windows rescaled to {init_buffer}/{base_window}/{term_buffer}")
        self.init_buffer = init_buffer
        self.term_buffer = term_buffer
        self.window_size = base_window
        self.next_window_end = init_buffer + base_window - 1
        self.counter = 0

    def in_slow_window(self) -> bool:
        return (
            self.adapt_metric
            and self.init_buffer <= self.counter < self.n_warmup - self.term_buffer
        )

    def at_window_end(self) -> bool:
        return self.adapt_metric and self.counter == self.next_window_end and self.counter != self.n_warmup

    def compute_next_window(self) -> None:
        last = self.n_warmup - self.term_buffer - 1
        if self.next_window_end == last:
            return
        self.window_size *= 2
        self.next_window_end = self.counter + self.window_size
        if self.next_window_end != last and self.next_window_end + 2 * self.window_size >= self.n_warmup - self.term_buffer:
            self.next_window_end = last


class NutsKernel:
    def __init__(self, target: Target, dim: int, max_tree_depth: int = 10):
        self.target = target
        self.dim = dim
        self.max_tree_depth = max_tree_depth
        self.inv_metric = np.ones(dim)
        self.step_size = 1.0

    def _state(self, theta: np.ndarray, p: np.ndarray, lp: float, grad: np.ndarray) -> _State:
        return _State(theta=theta, p=p, p_sharp=self.inv_metric * p, grad=grad, lp=lp)

    def _hamiltonian(self, state: _State) -> float:
        H = -state.lp + 0.5 * float(state.p @ state.p_sharp)
        return np.inf if np.isnan(H) else H

    def _sample_momentum(self, rng: np.random.Generator) -> np.ndarray:
        return rng.standard_normal(self.dim) / np.sqrt(self.inv_metric)

    def _leapfrog(self, state: _State, step: float) -> _State:
        p = state.p + 0.5 * step * state.grad
        theta = state.theta + step * self.inv_metric * p
        lp, grad = self.target(theta)
        p = p + 0.5 * step * grad
        return self._state(theta, p, lp, grad)

    def find_reasonable_step_size(self, theta: np.ndarray, lp: float, grad: np.ndarray,
                                  rng: np.random.Generator) -> float:
        """Double or halve the step until one leapfrog crosses an acceptance of 0.8"""
        threshold = np.log(0.8)
        direction = 0
        for _ in range(100):
            start = self._state(theta, self._sample_momentum(rng), lp, grad)
            moved = self._leapfrog(start, self.step_size)
            delta_H = self._hamiltonian(start) - self._hamiltonian(moved)
            if direction == 0:
                direction = 1 if delta_H > threshold else -1
            elif (direction == 1 and not delta_H > threshold) or (direction == -1 and not delta_H < threshold):
                break
            self.step_size = self.step_size * 2.0 if direction == 1 else self.step_size / 2.0
            if self.step_size > 1e7:
                raise SamplerError("Posterior is improper; step size search diverged")
            if self.step_size < 1e-12:
                raise SamplerError("No acceptable step size found; the initial point is numerically unstable")
        return self.step_size

    def _build_tree(self, state: _State, depth: int, direction: int, H0: float,
                    rng: np.random.Generator) -> _Tree:
        if depth == 0:
            new = self._leapfrog(state, direction * self.step_size)
            H = self._hamiltonian(new)
            divergent = bool(H - H0 > MAX_DELTA_H)
            log_weight = H0 - H
            return _Tree(
                beg=new, end=new, proposal=new, log_sum_weight=log_weight, rho=new.p.copy(),
                n_leapfrog=1, sum_accept=float(np.exp(min(0.0, log_weight))),
                valid=not divergent, divergent=divergent,
            )

        init = self._build_tree(state, depth - 1, direction, H0, rng)
        if not init.valid:
            return init
        final = self._build_tree(init.end, depth - 1, direction, H0, rng)
        n_leapfrog = init.n_leapfrog + final.n_leapfrog
        sum_accept = init.sum_accept + final.sum_accept
        if not final.valid:
            final.n_leapfrog, final.sum_accept = n_leapfrog, sum_accept
            return final

        log_sum_weight = np.logaddexp(init.log_sum_weight, final.log_sum_weight)
        if np.log(rng.uniform()) < final.log_sum_weight - log_sum_weight:
            proposal = final.proposal
        else:
            proposal = init.proposal
        return _Tree(
            beg=init.beg, end=final.end, proposal=proposal, log_sum_weight=log_sum_weight,
            rho=init.rho + final.rho, n_leapfrog=n_leapfrog, sum_accept=sum_accept,
            valid=_persists(init.beg, init.end, init.rho, final), divergent=False,
        )

    def transition(self, theta: np.ndarray, lp: float, grad: np.ndarray,
                   rng: np.random.Generator) -> Tuple[_State, Dict[str, float]]:
        start = self._state(theta, self._sample_momentum(rng), lp, grad)
        H0 = self._hamiltonian(start)
        left = right = proposal = start
        rho = start.p.copy()
        log_sum_weight = 0.0
        depth, n_leapfrog, sum_accept, divergent = 0, 0, 0.0, False

        while depth < self.max_tree_depth:
            direction = 1 if rng.uniform() < 0.5 else -1
            near, far = (right, left) if direction > 0 else (left, right)
            tree = self._build_tree(near, depth, direction, H0, rng)
            depth += 1
            n_leapfrog += tree.n_leapfrog
            sum_accept += tree.sum_accept
            if not tree.valid:
                divergent = tree.divergent
                break
            if tree.log_sum_weight > log_sum_weight or rng.uniform() < np.exp(tree.log_sum_weight - log_sum_weight):
                proposal = tree.proposal
            persist = _persists(far, near, rho, tree)
            log_sum_weight = np.logaddexp(log_sum_weight, tree.log_sum_weight)
            rho = rho + tree.rho
            if direction > 0:
                right = tree.end
            else:
                left = tree.end
            if not persist:
                break

        stats = {
            "lp": proposal.lp,
            "accept_stat": sum_accept / max(n_leapfrog, 1),
            "stepsize": self.step_size,
            "treedepth": depth,
            "n_leapfrog": n_leapfrog,
            "divergent": int(divergent),
            "energy": self._hamiltonian(proposal),
        }
        return proposal, stats


def sample_chain(target: Target, initial: np.ndarray, config: SamplerConfig,
                 rng: np.random.Generator, label: str = "chain") -> Tuple[np.ndarray, Dict[str, np.ndarray]]:
    """
    Run warm-up and sampling for one chain of an arbitrary differentiable target.

    Returns the retained unconstrained draws (sampling_iters x dim) and the per-draw
    sampler statistics.
    """
    theta = np.asarray(initial, float).copy()
    dim = len(theta)
    lp, grad = target(theta)
    if not np.isfinite(lp):
        raise SamplerError(f"{label}: log density is not finite at the initial point")

    kernel = NutsKernel(target, dim, config.max_tree_depth)
    kernel.find_reasonable_step_size(theta, lp, grad, rng)
    adaptation = DualAveraging(kernel.step_size, config.target_accept)
    windows = WindowedAdaptation(
        config.warmup_iters, config.adapt_init_buffer, config.adapt_term_buffer, config.adapt_base_window
    )
    estimator = WelfordVariance(dim)

    warmup_divergent = 0
    for i in range(config.warmup_iters):
        state, stats = kernel.transition(theta, lp, grad, rng)
        theta, lp, grad = state.theta, state.lp, state.grad
        warmup_divergent += stats["divergent"]
        kernel.step_size = adaptation.update(stats["accept_stat"])
        if windows.in_slow_window():
            estimator.add_sample(theta)
        if windows.at_window_end():
            windows.compute_next_window()
            kernel.inv_metric = estimator.regularized_variance()
            estimator.reset()
            kernel.find_reasonable_step_size(theta, lp, grad, rng)
            adaptation.restart(kernel.step_size)
            logger.debug(f"{label}: metric updated at warm-up iteration {i + 1}")
        windows.counter += 1
    kernel.step_size = adaptation.final_step_size()
    logger.info(
        f"{label}: warm-up done, step size {kernel.step_size:.4g}, {warmup_divergent} divergent warm-up transitions"
    )

    draws = np.empty((config.sampling_iters, dim))
    stats_out = {name: np.empty(config.sampling_iters) for name in STAT_NAMES}
    report_every = max(1, config.sampling_iters // 10)
    for i in range(config.sampling_iters):
        state, stats = kernel.transition(theta, lp, grad, rng)
        theta, lp, grad = state.theta, state.lp, state.grad
        draws[i] = theta
        for name in STAT_NAMES:
            stats_out[name][i] = stats[name]
        if (i + 1) % report_every == 0:
            logger.debug(f"{label}: {i + 1}/{config.sampling_iters} draws")
    return draws, stats_out


def chain_seeds(seed: int, n_chains: int) -> List[int]:
    """Independent per-chain seeds spawned deterministically from one master seed"""
    children = np.random.SeedSequence(seed).spawn(n_chains)
    return [int(child.generate_state(1, dtype=np.uint32)[0]) for child in children]


def find_initial_point(posterior: LogPosterior, config: SamplerConfig, rng: np.random.Generator) -> np.ndarray:
    for attempt in range(config.init_retries):
        u = posterior.initial_point(rng, config.init_jitter)
        lp, grad = posterior.log_density_and_gradient(u)
        if np.isfinite(lp) and np.all(np.isfinite(grad)):
            return u
    raise SamplerError(f"No finite initial point after {config.init_retries} attempts")


def run_chain(spec: ModelSpec, dataset: Dataset, config: SamplerConfig,
              chain_seed: int) -> Tuple[np.ndarray, Dict[str, np.ndarray], int]:
    """One chain on the constrained scale: (draws x constrained columns, stats, seed)"""
    rng = np.random.default_rng(chain_seed)
    posterior = LogPosterior(spec, dataset)
    initial = find_initial_point(posterior, config, rng)
    label = f"model {spec.variant.value} seed {chain_seed}"
    draws, stats = sample_chain(posterior, initial, config, rng, label=label)
    layout = posterior.layout
    constrained = np.stack([layout.flatten(posterior.constrain(u)) for u in draws])
    return constrained, stats, chain_seed


class ChainRunner:
    """Schedules independent chains and collects them into PosteriorDraws"""

    def __init__(self, config: SamplerConfig):
        self.config = config
        self._executor: Optional[Executor] = None

    async def initialize(self):
        executor = ChainExecutor(self.config.executor)
        workers = self.config.max_workers or self.config.n_chains
        if executor == ChainExecutor.PROCESS:
            self._executor = ProcessPoolExecutor(max_workers=workers)
        elif executor == ChainExecutor.THREAD:
            self._executor = ThreadPoolExecutor(max_workers=workers)
        logger.info(f"Chain runner ready ({executor.value}, {self.config.n_chains} chains)")

    async def run(self, spec: ModelSpec, dataset: Dataset) -> PosteriorDraws:
        seeds = chain_seeds(self.config.seed, self.config.n_chains)
        logger.info(
            f"Sampling model {spec.variant.value}: {self.config.n_chains} chains x "
            f"({self.config.warmup_iters} warm-up + {self.config.sampling_iters} draws)"
        )
        if self._executor is None:
            results = []
            for seed in seeds:
                try:
                    results.append(run_chain(spec, dataset, self.config, seed))
                except Exception as e:
                    results.append(e)
        else:
            loop = asyncio.get_running_loop()
            tasks = [
                loop.run_in_executor(self._executor, run_chain, spec, dataset, self.config, seed)
                for seed in seeds
            ]
            results = await asyncio.gather(*tasks, return_exceptions=True)

        completed = [r for r in results if not isinstance(r, BaseException)]
        failed = [(seed, r) for seed, r in zip(seeds, results) if isinstance(r, BaseException)]
        if failed:
            for seed, error in failed:
                logger.error(f"Chain with seed {seed} failed: {error}")
            raise SamplerError(
                f"{len(failed)} of {len(seeds)} chains failed; first error: {failed[0][1]}",
                completed=completed,
            )

        layout = LogPosterior(spec, dataset).layout
        draws = PosteriorDraws(
            variant=spec.variant,
            layout=layout,
            chains=[r[0] for r in completed],
            stats=[r[1] for r in completed],
            seeds=[r[2] for r in completed],
        )
        if draws.n_divergent:
            logger.warning(f"Model {spec.variant.value}: {draws.n_divergent} divergent transitions after warm-up")
        return draws

    async def shutdown(self):
        if self._executor is not None:
            self._executor.shutdown(wait=True)
            self._executor = None
        logger.info("Chain runner shut down")


def run_inference(spec: ModelSpec, dataset: Dataset, config: SamplerConfig) -> PosteriorDraws:
    """Blocking entry point: sample all chains of one variant"""

    async def _run() -> PosteriorDraws:
        runner = ChainRunner(config)
        await runner.initialize()
        try:
            return await runner.run(spec, dataset)
        finally:
            await runner.shutdown()

    return asyncio.run(_run())
