"""Networked regularized least squares: assembly, direct solve, and bounds.

The problem couples per-node losses through a graph total-variation penalty:

    min over blocks w_1..w_n of  sum_i L_i(w_i) + alpha * GTV(w).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from gtvfed import graph as graphmod
from gtvfed.graph import EmpGraph, GraphError, degrees, gtv_value, laplacian, spectrum
from gtvfed.localmodel import CallableLoss, QuadLoss

SINGULAR_TOL = 1e-10


class SingularProblemError(ValueError):
    """The assembled quadratic has no unique minimizer."""


class StackedParams:
    """n parameter blocks of dimension d with a consistent flat view."""

    __slots__ = ("blocks",)

    def __init__(self, blocks):
        arr = np.asarray(blocks, dtype=float)
        if arr.ndim == 1:
            arr = arr.reshape(-1, 1)
        if arr.ndim != 2:
            raise ValueError(f"blocks must be 2-d (n, d), got shape {arr.shape}")
        self.blocks = arr

    @classmethod
    def from_flat(cls, flat, n: int, d: int) -> "StackedParams":
        flat = np.asarray(flat, dtype=float)
        if flat.shape != (n * d,):
            raise ValueError(f"flat vector has shape {flat.shape}, expected ({n * d},)")
        return cls(flat.reshape(n, d).copy())

    @classmethod
    def zeros(cls, n: int, d: int) -> "StackedParams":
        return cls(np.zeros((int(n), int(d))))

    @property
    def n(self) -> int:
        return self.blocks.shape[0]

    @property
    def d(self) -> int:
        return self.blocks.shape[1]

    @property
    def flat(self) -> np.ndarray:
        return self.blocks.reshape(-1)

    def copy(self) -> "StackedParams":
        return StackedParams(self.blocks.copy())

    def __repr__(self):
        return f"StackedParams(n={self.n}, d={self.d})"


@dataclass(frozen=True)
class EigSummaries:
    """Spectral summaries of the local losses used by the bounds.

    lam_max is the largest eigenvalue over the per-node Q matrices,
    lam_bar_min the smallest eigenvalue of their average, and
    rho = lam_bar_min / (4 lam_max).
    """

    lam_max: float
    lam_bar_min: float
    rho: float | None


@dataclass(frozen=True)
class EigBounds:
    """Two-sided estimate of the assembled quadratic's extreme eigenvalues.

    upper bounds lambda_max(Q); lower, when available, bounds
    lambda_min(Q) from below and requires a connected graph and a
    positive-definite average local loss.
    """

    upper: float
    lower: float | None
    summaries: EigSummaries


class GTVMinProblem:
    """A graph, one loss per node, a coupling strength, and a penalty kind."""

    __slots__ = ("graph", "losses", "alpha", "penalty", "d", "_nbr", "_deg")

    def __init__(self, graph: EmpGraph, losses, alpha: float, penalty: str = "sq_norm", d=None):
        if penalty not in graphmod.PENALTIES:
            raise ValueError(
                f"unknown penalty {penalty!r}; expected one of {graphmod.PENALTIES}"
            )
        losses = tuple(losses)
        if len(losses) != graph.n:
            raise ValueError(
                f"got {len(losses)} losses for a graph with {graph.n} nodes"
            )
        alpha = float(alpha)
        if alpha < 0.0:
            raise ValueError(f"coupling strength must be nonnegative, got {alpha}")
        dims = {loss.d for loss in losses if getattr(loss, "d", None) is not None}
        if d is not None:
            dims.add(int(d))
        if len(dims) > 1:
            raise ValueError(f"losses disagree on the block dimension: {sorted(dims)}")
        if not dims:
            raise ValueError("block dimension unknown; pass d explicitly")
        self.graph = graph
        self.losses = losses
        self.alpha = alpha
        self.penalty = penalty
        self.d = dims.pop()
        self._nbr = tuple(graph.neighbor_arrays(i) for i in range(graph.n))
        self._deg = np.array([w.sum() for _, w in self._nbr])

    @property
    def n(self) -> int:
        return self.graph.n

    def neighbor_arrays(self, i):
        return self._nbr[i]

    def is_quadratic(self) -> bool:
        return all(isinstance(loss, QuadLoss) for loss in self.losses)

    def as_blocks(self, params) -> np.ndarray:
        blocks = getattr(params, "blocks", params)
        arr = np.asarray(blocks, dtype=float)
        if arr.ndim == 1 and self.d == 1:
            arr = arr.reshape(-1, 1)
        if arr.shape != (self.n, self.d):
            raise ValueError(
                f"parameters have shape {arr.shape}, expected ({self.n}, {self.d})"
            )
        return arr


def objective(p: GTVMinProblem, params) -> float:
    """Sum of local losses plus alpha times the coupling penalty."""
    W = p.as_blocks(params)
    total = 0.0
    for i, loss in enumerate(p.losses):
        total += loss.value(W[i])
    return total + p.alpha * gtv_value(p.graph, W, p.penalty)


def _node_grad(loss, own, nbr_blocks, wts, alpha):
    # Shared kernel: every per-node gradient in the package funnels through
    # here so different call sites produce identical floating-point results.
    g = loss.gradient(own)
    if wts.shape[0]:
        g = g + (2.0 * alpha) * (wts @ (own - nbr_blocks))
    return g


def node_gradient(p: GTVMinProblem, i: int, params) -> np.ndarray:
    """Gradient of the objective in block i (sq_norm penalty)."""
    if p.penalty != "sq_norm":
        raise ValueError("node gradients are defined for the sq_norm penalty")
    W = p.as_blocks(params)
    ids, wts = p._nbr[i]
    return _node_grad(p.losses[i], W[i], W[ids], wts, p.alpha)


def batch_gradient_fn(p: GTVMinProblem):
    """Vectorized all-nodes gradient (n, d) -> (n, d) for quadratic losses.

    Returns None when a loss is not quadratic; callers then fall back to the
    per-node kernel.
    """
    if p.penalty != "sq_norm" or not p.is_quadratic():
        return None
    Qs = np.stack([loss.Q for loss in p.losses])
    qs = np.stack([loss.q for loss in p.losses])
    adj = p.graph.adjacency()
    deg = p._deg.reshape(-1, 1)
    alpha2 = 2.0 * p.alpha

    def grad(W):
        G = 2.0 * np.einsum("nij,nj->ni", Qs, W) + qs
        if alpha2 != 0.0:
            G = G + alpha2 * (deg * W - adj @ W)
        return G

    return grad


def flat_loss(p: GTVMinProblem) -> CallableLoss:
    """The networked objective as a single loss over the flat vector."""
    n, d = p.n, p.d
    batch = batch_gradient_fn(p)

    def value(wflat):
        return objective(p, wflat.reshape(n, d))

    if batch is not None:

        def gradient(wflat):
            return batch(wflat.reshape(n, d)).reshape(-1)

    else:

        def gradient(wflat):
            W = wflat.reshape(n, d)
            return np.concatenate([node_gradient(p, i, W) for i in range(n)])

    return CallableLoss(value, gradient, d=n * d)


def assemble(p: GTVMinProblem):
    """Dense (Q, q, c) of the full quadratic over the flat vector.

    Q = blockdiag(Q_i) + alpha * kron(L, I_d). Requires quadratic losses
    and the sq_norm penalty.
    """
    if p.penalty != "sq_norm":
        raise ValueError("only the sq_norm penalty assembles to a quadratic")
    if not p.is_quadratic():
        raise ValueError("assembly requires quadratic losses at every node")
    n, d = p.n, p.d
    Q = np.zeros((n * d, n * d))
    q = np.zeros(n * d)
    c = 0.0
    for i, loss in enumerate(p.losses):
        sl = slice(i * d, (i + 1) * d)
        Q[sl, sl] = loss.Q
        q[sl] = loss.q
        c += loss.c
    if p.alpha != 0.0:
        Q += p.alpha * np.kron(laplacian(p.graph), np.eye(d))
    return Q, q, c


def solve_direct(p: GTVMinProblem) -> StackedParams:
    """Unique minimizer of the assembled quadratic via Cholesky.

    Raises SingularProblemError when the quadratic is not positive definite
    (for example, a disconnected graph with underdetermined components).
    """
    Q, q, _ = assemble(p)
    lam1 = float(np.linalg.eigvalsh(Q)[0])
    if lam1 <= SINGULAR_TOL:
        raise SingularProblemError(
            f"assembled quadratic is singular or nearly so (lambda_min = {lam1:.3e}); "
            "the minimizer is not unique"
        )
    rhs = -q / 2.0
    cho = scipy.linalg.cho_factor(Q, lower=True)
    x = scipy.linalg.cho_solve(cho, rhs)
    # One refinement pass keeps the residual tiny even for stiff couplings.
    x = x + scipy.linalg.cho_solve(cho, rhs - Q @ x)
    resid = float(np.max(np.abs(2.0 * (Q @ x) + q)))
    if resid > 1e-8 * max(1.0, float(np.max(np.abs(rhs)))):
        raise SingularProblemError(
            f"direct solve residual {resid:.3e} is too large; "
            "the quadratic is badly conditioned"
        )
    return StackedParams(x.reshape(p.n, p.d))


def eig_summaries(p: GTVMinProblem) -> EigSummaries:
    if not p.is_quadratic():
        raise ValueError("eigenvalue summaries require quadratic losses")
    lam_max = max(
        (float(np.linalg.eigvalsh(loss.Q)[-1]) for loss in p.losses), default=0.0
    )
    mean_Q = sum(loss.Q for loss in p.losses) / p.n
    lam_bar_min = max(0.0, float(np.linalg.eigvalsh(mean_Q)[0]))
    rho = lam_bar_min / (4.0 * lam_max) if lam_max > 0.0 else None
    return EigSummaries(lam_max=lam_max, lam_bar_min=lam_bar_min, rho=rho)


def eig_bounds(p: GTVMinProblem) -> EigBounds:
    """Upper/lower estimates for the assembled quadratic's spectrum.

    upper = lam_max + 2 alpha d_max always holds. The lower bound
    (1/(1+rho^2)) min(lam2 alpha rho^2, lam_bar_min / 2) needs a connected
    graph and lam_bar_min > 0; otherwise lower is None.
    """
    s = eig_summaries(p)
    _, d_max = degrees(p.graph)
    upper = s.lam_max + 2.0 * p.alpha * d_max
    lower = None
    if s.rho is not None and s.lam_bar_min > 0.0 and p.n >= 2:
        lam2 = spectrum(p.graph).lam2
        if lam2 > 0.0:
            lower = (
                1.0
                / (1.0 + s.rho**2)
                * min(lam2 * p.alpha * s.rho**2, s.lam_bar_min / 2.0)
            )
    return EigBounds(upper=upper, lower=lower, summaries=s)


def variation_bound(p: GTVMinProblem, noise_sq_norms, sizes) -> float:
    """Bound on the squared deviation of the solution from consensus.

    For labels generated by one shared parameter vector plus per-node noise
    eps_i, the consensus deviations satisfy
    sum_i ||w_i - mean||^2 <= (1/(lam2 alpha)) sum_i ||eps_i||^2 / m_i.
    """
    noise_sq = [float(v) for v in noise_sq_norms]
    sizes = [int(m) for m in sizes]
    if len(noise_sq) != p.n or len(sizes) != p.n:
        raise ValueError("need one noise norm and one sample count per node")
    if any(m < 1 for m in sizes):
        raise ValueError("sample counts must be at least 1")
    if any(v < 0 for v in noise_sq):
        raise ValueError("squared noise norms must be nonnegative")
    if p.alpha <= 0.0:
        raise ValueError("bound requires a positive coupling strength")
    if p.n < 2:
        raise ValueError("bound needs at least 2 nodes")
    lam2 = spectrum(p.graph).lam2
    if lam2 <= 0.0:
        raise GraphError("bound requires a connected graph (lam2 > 0)")
    return sum(v / m for v, m in zip(noise_sq, sizes)) / (lam2 * p.alpha)


def clustered_bound(
    p: GTVMinProblem, cluster, noise_sq_norms, sizes, wbar_sq_norm, radius
) -> float:
    """Per-cluster consensus deviation bound under a clustered truth.

    cluster lists the node ids; noise_sq_norms and sizes align with
    sorted(cluster). wbar_sq_norm is ||w_bar_C||^2 for the cluster's shared
    parameter and radius bounds every block norm the cluster couples to.
    """
    nodes = sorted(set(int(v) for v in cluster))
    noise_sq = [float(v) for v in noise_sq_norms]
    sizes = [int(m) for m in sizes]
    if len(noise_sq) != len(nodes) or len(sizes) != len(nodes):
        raise ValueError("need one noise norm and one sample count per cluster node")
    if any(m < 1 for m in sizes):
        raise ValueError("sample counts must be at least 1")
    if p.alpha <= 0.0:
        raise ValueError("bound requires a positive coupling strength")
    sub, boundary = graphmod.induced(p.graph, nodes)
    if sub.n < 2:
        raise ValueError("cluster must contain at least 2 nodes")
    lam2 = spectrum(sub).lam2
    if lam2 <= 0.0:
        raise GraphError("cluster subgraph is disconnected (lam2 = 0)")
    wbar_sq_norm = float(wbar_sq_norm)
    radius = float(radius)
    inner = sum(v / m for v, m in zip(noise_sq, sizes))
    inner += p.alpha * boundary * 2.0 * (wbar_sq_norm + radius**2)
    return inner / (p.alpha * lam2)


def sensitivity_bound(p: GTVMinProblem, label_perturbations) -> float:
    """Bound on the squared solution shift caused by label perturbations.

    label_perturbations holds one vector per node (the change applied to the
    node's labels). Requires a connected graph and lam_bar_min > 0.
    """
    perts = [np.asarray(v, dtype=float).reshape(-1) for v in label_perturbations]
    if len(perts) != p.n:
        raise ValueError("need one label perturbation per node")
    s = eig_summaries(p)
    if s.rho is None or s.lam_bar_min <= 0.0:
        raise ValueError("bound requires a positive-definite average local loss")
    if p.n < 2:
        raise ValueError("bound needs at least 2 nodes")
    lam2 = spectrum(p.graph).lam2
    if lam2 <= 0.0:
        raise GraphError("bound requires a connected graph (lam2 > 0)")
    denom = min(lam2 * p.alpha * s.rho**2, s.lam_bar_min / 2.0)
    if denom <= 0.0:
        raise ValueError("bound degenerate: coupling or curvature vanishes")
    total_sq = sum(float(v @ v) for v in perts)
    return s.lam_max * (1.0 + s.rho**2) ** 2 / denom**2 * total_sq
