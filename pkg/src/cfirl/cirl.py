"""Max-margin projection loop recovering reward weights from batch data.

Each iteration sets ``w_k = mu_E - mu_bar_{k-1}``, finds the optimal policy
for ``R = w_k . phi``, estimates its feature expectations, and projects
``mu_E`` onto the segment from ``mu_bar_{k-1}`` to the new point.
"""

import time
from dataclasses import dataclass, field

import numpy as np

from .errors import CfirlError, InvalidArgument, InvalidState
from .mulearn import estimate_mu, expert_feature_expectations
from .policies import MixturePolicy
from .policyopt import optimize_policy
from .rng import derive_rng, derive_seed
from .tdlearn import TDHyper

DEGENERATE_TOL = 1e-12


class DegenerateDirection(InvalidState):
    category = "degenerate-direction"


def projection_step(mu_expert, mu_bar_prev, mu_k):
    """Project ``mu_expert`` onto the segment ``[mu_bar_prev, mu_k]``.

    Returns ``(mu_bar_new, margin, coefficient)``; the coefficient is the
    clamped position along the segment.
    """
    mu_expert, mu_bar_prev, mu_k = (np.asarray(v, dtype=np.float64) for v in (mu_expert, mu_bar_prev, mu_k))
    d = mu_k - mu_bar_prev
    dd = float(d @ d)
    if np.sqrt(dd) < DEGENERATE_TOL:
        raise DegenerateDirection("new feature expectations coincide with the projection anchor")
    coef = float(d @ (mu_expert - mu_bar_prev)) / dd
    coef = min(max(coef, 0.0), 1.0)
    mu_bar = mu_bar_prev + coef * d
    return mu_bar, float(np.linalg.norm(mu_expert - mu_bar)), coef


def l1_normalize(w):
    w = np.asarray(w, dtype=np.float64)
    s = np.abs(w).sum()
    return w / s if s > 0 else w.copy()


def project_simplex(v):
    """Euclidean projection onto the probability simplex."""
    v = np.asarray(v, dtype=np.float64)
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    k = np.arange(1, len(v) + 1)
    rho = np.nonzero(u - css / k > 0)[0][-1]
    return np.maximum(v - css[rho] / (rho + 1.0), 0.0)


@dataclass
class MixingPolicy:
    lambdas: np.ndarray
    achieved_mu: np.ndarray
    distance: float
    iterations: int


def mixing_policy(mu_expert, mus, tol=1e-8, max_iter=200000):
    """Closest point to ``mu_expert`` in the convex hull of ``mus``.

    Projected gradient on ``||M^T lam - mu_E||^2`` over the simplex, stopped
    once the projected-gradient step (the stationarity residual) is below
    ``tol``.
    """
    M = np.atleast_2d(np.asarray(mus, dtype=np.float64))
    if M.size == 0 or len(M) == 0:
        raise InvalidArgument("need at least one feature-expectation vector")
    mu_e = np.asarray(mu_expert, dtype=np.float64)
    # Repeated points (the loop often revisits a policy) share one weight.
    M, first, inverse = np.unique(M, axis=0, return_index=True, return_inverse=True)
    n = len(M)
    G = M @ M.T
    c = M @ mu_e
    L = max(2.0 * np.linalg.eigvalsh(G).max(), 1e-12)
    lam = np.full(n, 1.0 / n)
    it = 0
    for it in range(1, max_iter + 1):
        grad = 2.0 * (G @ lam - c)
        new = project_simplex(lam - grad / L)
        step = np.abs(new - lam).max()
        lam = new
        if step < tol:
            break
    mu = lam @ M
    full = np.zeros(len(inverse))
    full[first] = lam
    return MixingPolicy(full, mu, float(np.linalg.norm(mu_e - mu)), it)


@dataclass
class CirlIteration:
    k: int
    weights: np.ndarray  # w_k as handed to policy optimization (unnormalized)
    mu: np.ndarray
    mu_bar: np.ndarray
    margin: float
    distance: float  # ||mu_E - mu_k||
    seconds: float


@dataclass
class CirlResult:
    mu_expert: np.ndarray
    iterations: list
    policies: list
    status: str  # converged | max_iters | stalled
    selected: int
    mixing: MixingPolicy
    mu_nets: list = field(default_factory=list, repr=False)

    @property
    def selected_weights(self):
        return l1_normalize(self.iterations[self.selected].weights)

    @property
    def weights_history(self):
        return [it.weights for it in self.iterations]

    @property
    def mus(self):
        return [it.mu for it in self.iterations]

    @property
    def margins(self):
        return [it.margin for it in self.iterations[1:]]

    def mixture(self):
        return MixturePolicy(self.policies, self.mixing.lambdas)


def random_unit(seed, d):
    v = derive_rng(seed, "cirl.w0").normal(size=d)
    return v / np.linalg.norm(v)


def projection_loop(mu_expert, solve, w0, epsilon=0.001, max_iters=50, on_iteration=None):
    """The projection iteration with ``solve(k, w) -> (policy, mu, extra)`` as the inner problem.

    Returns ``(iterations, policies, extras, status)``.
    """
    if not epsilon > 0:
        raise InvalidArgument("epsilon must be positive")
    if max_iters < 0:
        raise InvalidArgument("max_iters must be nonnegative")
    mu_e = np.asarray(mu_expert, dtype=np.float64)
    t0 = time.time()
    w = np.asarray(w0, dtype=np.float64)
    pol, mu, extra = solve(0, w)
    mu_bar = np.asarray(mu, dtype=np.float64).copy()
    gap = float(np.linalg.norm(mu_e - mu_bar))
    its = [CirlIteration(0, w, mu_bar.copy(), mu_bar.copy(), gap, gap, time.time() - t0)]
    policies, extras = [pol], [extra]
    if on_iteration:
        on_iteration(its[-1])
    status = "max_iters"
    stalls = 0
    for k in range(1, max_iters + 1):
        t0 = time.time()
        w = mu_e - mu_bar
        pol, mu, extra = solve(k, w)
        mu = np.asarray(mu, dtype=np.float64)
        try:
            mu_bar_new, t, _ = projection_step(mu_e, mu_bar, mu)
            stalls = 0
        except DegenerateDirection:
            stalls += 1
            mu_bar_new, t = mu_bar, float(np.linalg.norm(mu_e - mu_bar))
        mu_bar = mu_bar_new
        its.append(CirlIteration(k, w, mu, mu_bar.copy(), t, float(np.linalg.norm(mu_e - mu)), time.time() - t0))
        policies.append(pol)
        extras.append(extra)
        if on_iteration:
            on_iteration(its[-1])
        if stalls >= 2:
            status = "stalled"
            break
        if t < epsilon:
            status = "converged"
            break
    return its, policies, extras, status


def run_cirl(dataset, fmap, gamma, epsilon=0.001, max_iters=50, q_hyper=TDHyper(), mu_hyper=TDHyper(), seed=0,
             table=None, on_iteration=None, mu_loss="squared"):
    """Projection-method IRL over counterfactual feature expectations."""
    if not epsilon > 0:
        raise InvalidArgument("epsilon must be positive")
    if max_iters < 0:
        raise InvalidArgument("max_iters must be nonnegative")
    cf = table if table is not None else fmap.table(dataset)
    mu_e = expert_feature_expectations(dataset, fmap, gamma, table=cf)

    def solve(k, w):
        try:
            pol = optimize_policy(w, dataset, fmap, gamma, q_hyper, seed=derive_seed(seed, "cirl.q", k), table=cf)
            mu, mnet = estimate_mu(pol, dataset, fmap, gamma, mu_hyper, seed=derive_seed(seed, "cirl.mu", k), table=cf,
                                   loss=mu_loss)
        except CfirlError as e:
            e.args = (f"CIRL iteration {k}: {e.args[0] if e.args else e}",) + tuple(e.args[1:])
            e.cirl_iteration = k
            raise
        return pol, mu, mnet

    its, policies, nets, status = projection_loop(mu_e, solve, random_unit(seed, len(mu_e)), epsilon, max_iters,
                                                  on_iteration)
    selected = int(np.argmin([it.distance for it in its]))
    mix = mixing_policy(mu_e, [it.mu for it in its])
    if status == "converged" and mix.distance > epsilon + 1e-9:
        # mu_bar lies in the hull of the visited points, so this means the QP stopped early.
        raise InvalidState(f"mixing distance {mix.distance:.3g} exceeds epsilon {epsilon:.3g} after convergence")
    return CirlResult(mu_e, its, policies, status, selected, mix, nets)


__all__ = [
    "projection_step",
    "mixing_policy",
    "run_cirl",
    "projection_loop",
    "MixingPolicy",
    "CirlResult",
    "CirlIteration",
    "DegenerateDirection",
    "l1_normalize",
    "project_simplex",
]
