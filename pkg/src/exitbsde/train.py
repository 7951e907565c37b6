"""Stochastic first-order minimisation of the empirical weighted loss over single-hidden-layer nets."""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .funclass import SingleHiddenLayerNet, c2_norm, dnorm_distance, from_dict, sup_error
from .loss import _two_point, batch_path_losses, weight_from_dict
from .problems import ProblemSpec, get_problem
from .rng import derive_seed
from .simulate import PathBatch, _check_h, matvec, simulate_batch

log = logging.getLogger(__name__)

GRADIENT_MODES = ("forward_sensitivity", "finite_difference")


class DivergenceError(ArithmeticError):
    pass


class GradientModeError(ValueError):
    pass


@dataclass
class TrainConfig:
    problem: str = "P1"
    width: int = 16
    h: float = 2.0**-4
    batch_paths: int = 256
    iterations: int = 2000
    learning_rate: float = 0.2
    decay: float = 0.99885  # multiplicative per iteration
    gradient_mode: str = "forward_sensitivity"
    fd_step: float = 1e-5
    seed: int = 0
    weight: dict = field(default_factory=lambda: {"type": "unit"})
    eval_every: int = 100
    x0: object = "uniform"
    init_scale: float = 1.0
    fixed_dataset: bool = False
    max_steps: int | None = None
    problem_options: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.batch_paths < 2:
            raise ValueError("batch_paths must be at least 2")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not 0 < self.decay <= 1:
            raise ValueError("decay must lie in (0, 1]")
        if not 1e-6 <= self.fd_step <= 1e-3:
            raise ValueError("fd_step must lie in [1e-6, 1e-3]")
        if self.gradient_mode not in GRADIENT_MODES:
            raise GradientModeError(f"gradient_mode must be one of {GRADIENT_MODES}")
        if self.width < 1 or self.iterations < 0 or self.eval_every < 1:
            raise ValueError("width >= 1, iterations >= 0 and eval_every >= 1 required")
        _check_h(self.h)

    def to_dict(self) -> dict:
        return asdict(self)


class Objective:
    """Empirical loss of a net as a function of its flat parameter vector."""

    def __init__(self, config: TrainConfig, problem: ProblemSpec | None = None):
        self.config = config
        self.problem = problem or get_problem(config.problem, **config.problem_options)
        self.weight = weight_from_dict(config.weight)
        self.dim = self.problem.dim
        self._cache: dict[int, tuple[PathBatch, np.ndarray]] = {}

    def net(self, params) -> SingleHiddenLayerNet:
        return SingleHiddenLayerNet.from_params(params, self.config.width, self.dim)

    def batch(self, iteration: int) -> tuple[PathBatch, np.ndarray]:
        """Paths for one iteration (simulation does not depend on the parameters)."""
        key = 0 if self.config.fixed_dataset else iteration
        if key not in self._cache:
            c = self.config
            b = simulate_batch(self.problem, c.x0, c.h, c.batch_paths, derive_seed(c.seed, f"train/{key}"),
                               c.max_steps)
            self._cache = {key: (b, self.weight.evaluate(b.tau_bar, b.exit_state))}
        return self._cache[key]

    def loss(self, params, iteration: int) -> float:
        params = np.asarray(params, dtype=np.float64)
        if not np.all(np.isfinite(params)):
            raise DivergenceError("non-finite parameters")
        b, psi = self.batch(iteration)
        with np.errstate(over="ignore", invalid="ignore"):
            pl = batch_path_losses(self.net(params), self.problem, b)
            val = float(np.mean(psi * (pl.boundary + pl.dynamical)))
        if not math.isfinite(val):
            raise DivergenceError(f"non-finite loss, |params| = {np.linalg.norm(params):.3e}")
        return val

    def gradient(self, params, iteration: int, mode: str | None = None) -> np.ndarray:
        mode = mode or self.config.gradient_mode
        if mode == "finite_difference":
            return self._fd_gradient(params, iteration)
        if mode != "forward_sensitivity":
            raise GradientModeError(f"unknown gradient mode {mode!r}")
        return self._analytic_gradient(np.asarray(params, dtype=np.float64), iteration)

    def _fd_gradient(self, params, iteration):
        params = np.asarray(params, dtype=np.float64)
        eps = self.config.fd_step
        g = np.empty_like(params)
        for i in range(len(params)):
            step = eps * max(1.0, abs(params[i]))
            p, m = params.copy(), params.copy()
            p[i] += step
            m[i] -= step
            g[i] = (self.loss(p, iteration) - self.loss(m, iteration)) / (2 * step)
        return g

    def _analytic_gradient(self, params, iteration):
        prob = self.problem
        net = self.net(params)
        b, psi = self.batch(iteration)
        n = len(b)
        h = b.h
        # boundary: 2 psi (U - g) dU at the exit state
        xe = b.exit_state
        res = np.where(b.exited, net._value(xe) - prob.boundary(xe), 0.0)
        grad = net.contract_sensitivities(xe, 2.0 * psi * res / n)
        if len(b.t_x) == 0:
            return grad
        x1, x2, dW = b.t_x, b.t_xn, b.t_dW
        v1, g1, H1 = net._eval(x1)
        mu = prob.drift(x1)
        sig = prob.diffusion(x1)
        ds = np.full(len(x1), h)
        S = _two_point(net, prob, x1, x2, ds, dW, snapshot=(v1, g1, H1, mu, sig))
        c = 2.0 * psi[b.t_path] * S / n
        z = np.einsum("nji,nj->ni", sig, g1)
        fy = prob.df_dy(x1, v1, z)
        fz = prob.df_dz(x1, v1, z)
        sdw = matvec(sig, dW)
        cv1 = c * (h * fy - 1.0)
        cg1 = c[:, None] * (h * matvec(sig, fz) - sdw)
        M = (-h * mu[:, :, None] * sdw[:, None, :] - 0.5 * sdw[:, :, None] * sdw[:, None, :]
             + 0.5 * h * np.einsum("nik,njk->nij", sig, sig))
        cH1 = c[:, None, None] * M
        grad = grad + net.contract_sensitivities(x2, c)
        grad = grad + net.contract_sensitivities(x1, cv1, cg1, cH1)
        return grad


@dataclass
class TrainResult:
    net: SingleHiddenLayerNet
    history: list[dict]
    status: str  # "completed" | "diverged"
    config: TrainConfig
    runtime_s: float = 0.0
    message: str = ""

    def write_history_csv(self, path) -> None:
        if not self.history:
            cols = ["iteration"]
        else:
            cols = list(self.history[0].keys())
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for row in self.history:
                w.writerow([repr(row[k]) if isinstance(row[k], float) else row[k] for k in cols])

    def checkpoint(self) -> dict:
        return {"net": self.net.to_dict(), "optimizer": {
            "kind": "sgd_geometric_decay", "iterations_done": self.history[-1]["iteration"] if self.history else 0,
            "learning_rate": self.config.learning_rate * self.config.decay ** self.iterations_done},
            "status": self.status, "config": self.config.to_dict()}

    @property
    def iterations_done(self) -> int:
        return int(self.history[-1]["iteration"]) if self.history else 0

    def save_checkpoint(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.checkpoint(), fh, indent=1, sort_keys=True)


def load_checkpoint(path) -> SingleHiddenLayerNet:
    with open(path) as fh:
        doc = json.load(fh)
    return from_dict(doc["net"] if "net" in doc else doc)


def initial_net(config: TrainConfig, dim: int) -> SingleHiddenLayerNet:
    rng = np.random.default_rng(derive_seed(config.seed, "train/init"))
    return SingleHiddenLayerNet.init_random(config.width, dim, rng, config.init_scale)


def empirical_loss(params, config: TrainConfig, iteration: int = 0) -> float:
    return Objective(config).loss(params, iteration)


def param_gradient(params, config: TrainConfig, iteration: int = 0) -> np.ndarray:
    return Objective(config).gradient(params, iteration)


def _record(obj: Objective, params, it, loss, gnorm, lr, exact) -> dict:
    row = {"iteration": it, "loss": loss, "grad_norm": gnorm, "learning_rate": lr}
    net = obj.net(params)
    if exact is not None:
        dom = obj.problem.domain
        row["dnorm_error"] = dnorm_distance(net, exact, dom, budget=256, refinement_levels=2).value
        row["sup_error"] = sup_error(net, exact, dom, n=1001)
    row["c2_norm"] = c2_norm(net, obj.problem.domain, budget=256)
    return row


def fit(config: TrainConfig, problem: ProblemSpec | None = None,
        init: SingleHiddenLayerNet | None = None) -> TrainResult:
    """Plain SGD with geometric step decay; fresh paths every iteration unless ``fixed_dataset``."""
    t0 = time.perf_counter()
    obj = Objective(config, problem)
    net0 = init or initial_net(config, obj.dim)
    params = net0.params()
    exact = obj.problem.exact_solution
    history: list[dict] = []
    lr = config.learning_rate
    status, message = "completed", ""
    for it in range(config.iterations):
        try:
            g = obj.gradient(params, it)
            if not np.all(np.isfinite(g)):
                raise DivergenceError(f"non-finite gradient, |params| = {np.linalg.norm(params):.3e}")
            if (it + 1) % config.eval_every == 0 or it == 0:
                loss = obj.loss(params, it)
                history.append(_record(obj, params, it, loss, float(np.linalg.norm(g)), lr, exact))
            params = params - lr * g
            lr *= config.decay
        except DivergenceError as exc:
            status, message = "diverged", str(exc)
            log.error("training diverged at iteration %d: %s", it, exc)
            break
    net = obj.net(params)
    if status == "completed" and config.iterations > 0:
        it = config.iterations
        loss = obj.loss(params, it)
        gnorm = float(np.linalg.norm(obj.gradient(params, it)))
        history.append(_record(obj, params, it, loss, gnorm, lr, exact))
    return TrainResult(net, history, status, config, time.perf_counter() - t0, message)


def window_monotonicity(history: list[dict], window: int = 200, key: str = "dnorm_error") -> list[dict]:
    """Flag windows where the tracked error increased (advisory only)."""
    rows = [r for r in history if key in r]
    flags = []
    for a, b in zip(rows, rows[1:]):
        if b["iteration"] - a["iteration"] >= window and b[key] > a[key]:
            flags.append({"from": a["iteration"], "to": b["iteration"], "increase": b[key] - a[key]})
    return flags
