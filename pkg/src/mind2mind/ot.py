"""Empirical measures and the distances used to certify transfer quality.

Ground metric is Euclidean throughout.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence, Union

import numpy as np

from . import kernels
from .nn import Network, predict

MAX_EXACT_PAIRS = 10**6
EXACT_TOL = 1e-10

Map = Union[Network, Sequence[Network], Callable[[np.ndarray], np.ndarray]]


class SolverError(RuntimeError):
    pass


class ConvergenceError(RuntimeError):
    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (residual {residual:.3e})")
        self.residual = residual


@dataclass(frozen=True, eq=False)
class EmpiricalMeasure:
    """Finitely supported probability measure ``sum_i w_i delta(x_i)``.

    Zero weights are allowed so that degenerate fixtures stay representable.
    """

    atoms: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        atoms = np.array(self.atoms, dtype=np.float64)
        if atoms.ndim == 1:
            atoms = atoms[:, None]
        weights = np.array(self.weights, dtype=np.float64).reshape(-1)
        if atoms.ndim != 2 or atoms.shape[0] < 1:
            raise ValueError("atoms must be a non-empty (n, d) array")
        if weights.shape != (atoms.shape[0],):
            raise ValueError("one weight per atom required")
        if (weights < 0).any() or not np.isfinite(weights).all():
            raise ValueError("weights must be finite and non-negative")
        if abs(weights.sum() - 1.0) > 1e-12:
            raise ValueError(f"weights sum to {weights.sum()!r}, not 1")
        if not np.isfinite(atoms).all():
            raise ValueError("atoms must be finite")
        atoms.setflags(write=False)
        weights.setflags(write=False)
        object.__setattr__(self, "atoms", atoms)
        object.__setattr__(self, "weights", weights)

    @classmethod
    def uniform(cls, atoms) -> "EmpiricalMeasure":
        atoms = np.asarray(atoms, dtype=np.float64)
        if atoms.ndim == 1:
            atoms = atoms[:, None]
        n = atoms.shape[0]
        return cls(atoms, np.full(n, 1.0 / n))

    @classmethod
    def dirac(cls, point) -> "EmpiricalMeasure":
        return cls(np.asarray(point, dtype=np.float64).reshape(1, -1), np.ones(1))

    @property
    def n(self) -> int:
        return self.atoms.shape[0]

    @property
    def dim(self) -> int:
        return self.atoms.shape[1]

    def subset(self, index) -> "EmpiricalMeasure":
        """Atoms ``index`` with renormalised weights."""
        w = self.weights[index]
        return EmpiricalMeasure(self.atoms[index], w / w.sum())

    def same_as(self, other: "EmpiricalMeasure") -> bool:
        return (self.atoms.shape == other.atoms.shape
                and np.array_equal(self.atoms, other.atoms)
                and np.array_equal(self.weights, other.weights))


@dataclass(frozen=True, eq=False)
class TransportPlan:
    gamma: np.ndarray
    source_weights: np.ndarray
    target_weights: np.ndarray

    def marginal_error(self) -> float:
        return float(max(np.abs(self.gamma.sum(axis=1) - self.source_weights).max(),
                         np.abs(self.gamma.sum(axis=0) - self.target_weights).max()))


@dataclass(frozen=True, eq=False)
class GaussianSummary:
    mean: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        cov = np.asarray(self.covariance, dtype=np.float64)
        if cov.shape != (self.mean.size, self.mean.size):
            raise ValueError("covariance shape does not match mean")
        if np.abs(cov - cov.T).max(initial=0.0) > 1e-10:
            raise ValueError("covariance is not symmetric")


def _check_dims(mu: EmpiricalMeasure, nu: EmpiricalMeasure):
    if mu.dim != nu.dim:
        raise ValueError(f"dimension mismatch: {mu.dim} vs {nu.dim}")


def ground_cost(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    return kernels.pairwise_distances(np.ascontiguousarray(x, dtype=np.float64),
                                      np.ascontiguousarray(y, dtype=np.float64))


def exact_w1(mu: EmpiricalMeasure, nu: EmpiricalMeasure,
             max_iter: int | None = None) -> tuple[float, TransportPlan]:
    """Exact W1 and an optimal plan via the transportation network simplex."""
    _check_dims(mu, nu)
    n, m = mu.n, nu.n
    if n * m > MAX_EXACT_PAIRS:
        raise SolverError(f"{n}x{m} exceeds the exact-solver cap; use sliced_w1")
    if mu.same_as(nu):
        return 0.0, TransportPlan(np.diag(mu.weights), mu.weights, nu.weights)
    cost = ground_cost(mu.atoms, nu.atoms)
    tol = EXACT_TOL * max(1.0, float(cost.max()))
    limit = max_iter if max_iter is not None else 50 * (n + m) * (n + m) + 1000
    rows, cols, flow, _, status = kernels.transport_simplex(
        mu.weights.copy(), nu.weights.copy(), cost, tol, limit)
    if status != kernels.OPTIMAL:
        raise SolverError("transport simplex hit its iteration limit")
    gamma = np.zeros((n, m))
    np.add.at(gamma, (rows, cols), flow)
    value = float(np.sum(flow * cost[rows, cols]))
    return max(value, 0.0), TransportPlan(gamma, mu.weights, nu.weights)


def w1_1d(mu: EmpiricalMeasure, nu: EmpiricalMeasure) -> float:
    """W1 on the line: integral of |F_mu - F_nu|."""
    if mu.dim != 1 or nu.dim != 1:
        raise ValueError("w1_1d needs one-dimensional measures")
    return _w1_line(mu.atoms[:, 0], mu.weights, nu.atoms[:, 0], nu.weights)


def _w1_line(x, wx, y, wy) -> float:
    return float(_w1_lines(x[:, None], wx, y[:, None], wy)[0])


def _w1_lines(px, wx, py, wy) -> np.ndarray:
    """Column-wise 1-d W1 between projected atoms ``px`` (n, k) and ``py`` (m, k)."""
    pts = np.concatenate([px, py], axis=0)
    signed = np.concatenate([wx, -wy])
    order = np.argsort(pts, axis=0, kind="stable")
    pts = np.take_along_axis(pts, order, axis=0)
    cdf_gap = np.cumsum(signed[order], axis=0)[:-1]
    return np.sum(np.abs(cdf_gap) * np.diff(pts, axis=0), axis=0)


def _directions(dim: int, n_projections: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    theta = rng.standard_normal((n_projections, dim))
    theta /= np.linalg.norm(theta, axis=1, keepdims=True)
    # theta and -theta give the same distance; fix the sign for reproducibility
    first = np.argmax(theta != 0.0, axis=1)
    flip = theta[np.arange(n_projections), first] < 0
    theta[flip] *= -1.0
    return theta


def sliced_w1(mu: EmpiricalMeasure, nu: EmpiricalMeasure, n_projections: int = 128,
              seed: int = 0, return_se: bool = False):
    """Mean of 1-d W1 over random unit directions (always <= exact W1).

    With ``return_se`` also returns the standard error of that mean.
    """
    _check_dims(mu, nu)
    if n_projections < 1:
        raise ValueError("n_projections must be >= 1")
    theta = _directions(mu.dim, n_projections, seed)
    px = mu.atoms @ theta.T
    py = nu.atoms @ theta.T
    vals = _w1_lines(px, mu.weights, py, nu.weights)
    est = float(vals.mean())
    if return_se:
        se = float(vals.std(ddof=1) / np.sqrt(n_projections)) if n_projections > 1 else float("inf")
        return est, se
    return est


def apply_map(f: Map, x: np.ndarray) -> np.ndarray:
    if isinstance(f, Network):
        return predict(f, x)
    if isinstance(f, (list, tuple)):
        for g in f:
            x = apply_map(g, x)
        return x
    return np.asarray(f(x), dtype=np.float64)


def pushforward(measure: EmpiricalMeasure, f: Map) -> EmpiricalMeasure:
    """``f`` applied atom-wise; networks run in eval mode, weights unchanged."""
    if isinstance(f, Network) and f.spec.input_width != measure.dim:
        raise ValueError(f"map expects dimension {f.spec.input_width}, measure has {measure.dim}")
    return EmpiricalMeasure(apply_map(f, measure.atoms), measure.weights)


# ------------------------------------------------------------ Lipschitz

def spectral_norm(w: np.ndarray, max_iter: int = 2000, tol: float = 1e-10,
                  seed: int = 0) -> float:
    """Largest singular value by power iteration on ``w.T @ w``."""
    w = np.asarray(w, dtype=np.float64)
    if not w.any():
        return 0.0
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(w.shape[1])
    v /= np.linalg.norm(v)
    sigma = 0.0
    for _ in range(max_iter):
        u = w @ v
        new_sigma = float(np.linalg.norm(u))
        if new_sigma == 0.0:
            # start vector in the null space; restart from a fresh direction
            v = rng.standard_normal(w.shape[1])
            v /= np.linalg.norm(v)
            continue
        v = w.T @ (u / new_sigma)
        v /= np.linalg.norm(v)
        if abs(new_sigma - sigma) <= tol * new_sigma:
            return new_sigma
        sigma = new_sigma
    residual = float(np.linalg.norm(w.T @ (w @ v) - sigma**2 * v))
    raise ConvergenceError("power iteration did not converge", residual)


def layer_operators(net: Network) -> list[np.ndarray]:
    """Linear part of every layer with eval-mode batch norm folded in."""
    ops = []
    for i in range(net.spec.n_layers):
        w = net.params[f"W{i}"]
        if net.spec.batch_norm[i]:
            scale = np.abs(net.params[f"gamma{i}"]) / np.sqrt(net.state[f"var{i}"] + 1e-5)
            w = w * scale[None, :]
        ops.append(w)
    return ops


def lipschitz_upper(net: Network | Sequence[Network], max_iter: int = 2000,
                    tol: float = 1e-10, fallback: str = "raise",
                    method: str = "power") -> float:
    """Product of layer spectral norms; a certified constant for the map.

    ``fallback="svd"`` replaces a non-converged power iteration with an
    exact SVD instead of raising :class:`ConvergenceError`.
    ``method="svd"`` skips power iteration altogether. Power iteration
    approaches each norm from below, so certificates that must not
    undershoot should use it.
    """
    if method not in ("power", "svd"):
        raise ValueError(f"unknown method {method!r}")
    nets = [net] if isinstance(net, Network) else list(net)
    total = 1.0
    for k, n in enumerate(nets):
        for i, w in enumerate(layer_operators(n)):
            if method == "svd":
                total *= float(np.linalg.svd(w, compute_uv=False)[0]) if w.any() else 0.0
                continue
            try:
                s = spectral_norm(w, max_iter, tol, seed=1000 * k + i)
            except ConvergenceError:
                if fallback != "svd":
                    raise
                s = float(np.linalg.svd(w, compute_uv=False)[0])
            total *= s
    return total


def lipschitz_lower(f: Map, samples: EmpiricalMeasure) -> float:
    """Largest observed ``|f(x) - f(y)| / |x - y|`` over sample pairs."""
    x = np.ascontiguousarray(samples.atoms)
    y = np.ascontiguousarray(apply_map(f, x))
    best = kernels.max_distance_ratio(x, y)
    if best < 0:
        raise ValueError("need at least two distinct atoms")
    return float(best)


# ------------------------------------------------------------- Gaussians

def fit_gaussian(measure: EmpiricalMeasure) -> GaussianSummary:
    if measure.n < 2:
        raise ValueError("fit_gaussian needs at least two atoms")
    w = measure.weights
    mean = w @ measure.atoms
    centred = measure.atoms - mean
    cov = (centred * w[:, None]).T @ centred
    cov = 0.5 * (cov + cov.T)
    return GaussianSummary(mean, cov)


def _psd_sqrt(a: np.ndarray, tol: float = 1e-8) -> np.ndarray:
    vals, vecs = np.linalg.eigh(0.5 * (a + a.T))
    if vals.min(initial=0.0) < -tol * max(1.0, abs(vals).max(initial=0.0)):
        raise ValueError(f"matrix is not positive semidefinite (eigenvalue {vals.min():.3e})")
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_gaussian_distance(a: GaussianSummary, b: GaussianSummary) -> float:
    """Frechet (W2) distance between two Gaussians."""
    if a.mean.shape != b.mean.shape:
        raise ValueError("dimension mismatch")
    if np.array_equal(a.mean, b.mean) and np.array_equal(a.covariance, b.covariance):
        _psd_sqrt(a.covariance)
        return 0.0
    root_a = _psd_sqrt(a.covariance)
    _psd_sqrt(b.covariance)  # PSD check
    cross = _psd_sqrt(root_a @ b.covariance @ root_a)
    d2 = (float(np.sum((a.mean - b.mean) ** 2)) + float(np.trace(a.covariance))
          + float(np.trace(b.covariance)) - 2.0 * float(np.trace(cross)))
    return float(np.sqrt(max(d2, 0.0)))
