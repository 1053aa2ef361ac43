"""Batch coordinate-ascent variational inference.

A sweep applies four phases per side (factors, memberships, sticks,
components), users first by default.  Every phase writes the exact
conditional maximizer of the bound in :mod:`hemf.elbo`, so the bound is
non-decreasing phase by phase.  Item-side updates reuse the user-side
kernels with the roles of the two sides swapped.
"""

from dataclasses import dataclass

import numpy as np

from .elbo import compute_elbo, stick_log_weight_terms
from .errors import HemfError, NotPositiveDefiniteError
from .model import (CommunityPosterior, FactorPosterior, MembershipPosterior,
                    StickPosterior, expected_logdet, init_state,
                    prior_mean_covariance)
from .special import pd_inverse_stack

OTHER_SIDE = {"users": "items", "items": "users"}


# ---------------------------------------------------------------------------
# Factor phase
# ---------------------------------------------------------------------------

def _prior_natural_params(side_state):
    """Mixture-prior precision (N,L,L) and linear term (N,L) per entity."""
    q = side_state.memberships
    prec = np.einsum("nd,dab->nab", q, side_state.exp_prec)
    pm = np.einsum("dab,db->da", side_state.exp_prec, side_state.comm_means)
    lin = q @ pm
    return prec, lin


def _likelihood_natural_params(state, ratings, side):
    """Rating-likelihood contributions to precision and linear term."""
    mine = state.side(side)
    other = state.side(OTHER_SIDE[side])
    N, L = mine.n_entities, mine.latent_dim
    prec = np.zeros((N, L, L))
    lin = np.zeros((N, L))
    if len(ratings):
        ent, oth = ratings.coords(side)
        np.add.at(prec, ent, other.second_moments[oth])
        np.add.at(lin, ent, ratings.values[:, None] * other.means[oth])
    inv_s2 = 1.0 / state.hyper.sigma2
    return prec * inv_s2, lin * inv_s2


def _solve_factors(prec, lin):
    try:
        np.linalg.cholesky(prec)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefiniteError("factor precision is not positive definite") from exc
    cov = np.linalg.inv(prec)
    cov = 0.5 * (cov + np.swapaxes(cov, -1, -2))
    means = np.einsum("nab,nb->na", cov, lin)
    seconds = cov + np.einsum("na,nb->nab", means, means)
    return means, seconds


def update_factor(entity, side, state, ratings):
    """Gaussian posterior for one factor vector given everything else."""
    mine = state.side(side)
    other = state.side(OTHER_SIDE[side])
    if not 0 <= entity < mine.n_entities:
        raise IndexError(f"{side} index {entity} out of range")
    q = mine.memberships[entity]
    prec = np.einsum("d,dab->ab", q, mine.exp_prec)
    lin = np.einsum("d,dab,db->a", q, mine.exp_prec, mine.comm_means)
    oth_idx, vals = (ratings.items_of(entity) if side == "users"
                     else ratings.users_of(entity))
    if len(oth_idx):
        inv_s2 = 1.0 / state.hyper.sigma2
        prec = prec + inv_s2 * other.second_moments[oth_idx].sum(axis=0)
        lin = lin + inv_s2 * (vals @ other.means[oth_idx])
    means, seconds = _solve_factors(prec[None], lin[None])
    return FactorPosterior(means[0], seconds[0])


def _factor_phase(state, ratings, side):
    mine = state.side(side)
    p_prec, p_lin = _prior_natural_params(mine)
    l_prec, l_lin = _likelihood_natural_params(state, ratings, side)
    means, seconds = _solve_factors(p_prec + l_prec, p_lin + l_lin)
    mine.means = means
    mine.second_moments = seconds
    mine.refresh_stats()


# ---------------------------------------------------------------------------
# Membership phase
# ---------------------------------------------------------------------------

def membership_log_scores(side_state):
    """Unnormalized log responsibilities gamma (N, D): expected Gaussian
    log-density term plus the stick-breaking term."""
    P = side_state.exp_prec
    cm = side_state.comm_means
    xi1 = -0.5 * (np.einsum("nab,dab->nd", side_state.second_moments, P)
                  - 2.0 * np.einsum("na,dab,db->nd", side_state.means, P, cm)
                  + np.einsum("dab,dab->d", P, side_state.comm_mean_outer)[None, :]
                  + side_state.exp_logdet[None, :])
    xi2 = stick_log_weight_terms(side_state.eta1, side_state.eta2)
    return xi1 + xi2[None, :]


def softmax_rows(scores):
    shifted = scores - scores.max(axis=1, keepdims=True)
    w = np.exp(shifted)
    return w / w.sum(axis=1, keepdims=True)


def update_membership(entity, side, state):
    """Responsibilities of one entity over the current components."""
    mine = state.side(side)
    if not 0 <= entity < mine.n_entities:
        raise IndexError(f"{side} index {entity} out of range")
    scores = membership_log_scores(mine)[entity:entity + 1]
    return MembershipPosterior(softmax_rows(scores)[0])


def _membership_phase(state, side):
    mine = state.side(side)
    mine.memberships = softmax_rows(membership_log_scores(mine))
    mine.refresh_stats()


# ---------------------------------------------------------------------------
# Stick phase
# ---------------------------------------------------------------------------

def stick_params_from_masses(masses, concentration):
    """Beta parameters from per-component membership masses rho."""
    tail = np.concatenate([np.cumsum(masses[::-1])[::-1][1:], [0.0]])
    return masses + 1.0, concentration + tail


def update_sticks(side, state):
    mine = state.side(side)
    rho = mine.memberships.sum(axis=0)
    eta1, eta2 = stick_params_from_masses(rho, state.concentration(side))
    return StickPosterior(eta1, eta2)


def _stick_phase(state, side):
    mine = state.side(side)
    rho = mine.memberships.sum(axis=0)
    mine.eta1, mine.eta2 = stick_params_from_masses(rho, state.concentration(side))


# ---------------------------------------------------------------------------
# Component phase
# ---------------------------------------------------------------------------

def community_arrays_from_stats(weight, wmean, wouter, hyper, base, cur_W,
                                cur_iota, mode):
    """Component posteriors from membership-weighted factor statistics.

    ``weight, wmean, wouter`` are sum q, sum q <a>, sum q <a a^T> per
    component.  The mean posterior uses the pre-update covariance cache
    ``cur_W / cur_iota``; the covariance scale then uses the fresh mean
    moments, which keeps the pair an exact sequential coordinate step.
    """
    lam = hyper.lambda0
    D = weight.shape[0]
    denom = (lam + weight)[:, None]
    if mode == "printed":
        means = (lam * wmean + base[None, :]) / denom
        coupling = 1.0 / lam
    elif mode == "conjugate":
        means = (lam * base[None, :] + wmean) / denom
        coupling = lam
    else:
        raise ValueError(f"unknown community_update mode: {mode}")
    V = np.stack([
        prior_mean_covariance(hyper, weight[d], cur_W[d], cur_iota[d], mode)
        for d in range(D)
    ])
    mean_outer = V + np.einsum("da,db->dab", means, means)
    cross = np.einsum("da,db->dab", means, wmean)
    scatter = (wouter - cross - np.swapaxes(cross, -1, -2)
               + weight[:, None, None] * mean_outer)
    base_cross = np.einsum("a,db->dab", base, means)
    prior_scatter = (mean_outer - base_cross - np.swapaxes(base_cross, -1, -2)
                     + np.outer(base, base)[None, :, :])
    W = scatter + coupling * prior_scatter + hyper.w0[None, :, :]
    W = 0.5 * (W + np.swapaxes(W, -1, -2))
    iota = hyper.iota0 + weight
    return means, mean_outer, W, iota


def update_community(d, side, state):
    """Posterior of one component from the current factors and memberships."""
    mine = state.side(side)
    if not 0 <= d < mine.n_components:
        raise IndexError(f"{side} component {d} out of range")
    q = mine.memberships[:, d]
    weight = np.array([q.sum()])
    wmean = (q @ mine.means)[None, :]
    wouter = np.einsum("n,nab->ab", q, mine.second_moments)[None]
    means, mean_outer, W, iota = community_arrays_from_stats(
        weight, wmean, wouter, state.hyper, state.base_mean(side),
        mine.comm_W[d][None], mine.comm_iota[d][None], state.community_update)
    exp_prec = pd_inverse_stack(W) * iota[:, None, None]
    exp_ld = expected_logdet(W, iota)
    return CommunityPosterior(means[0], mean_outer[0], W[0], float(iota[0]),
                              exp_prec[0], float(exp_ld[0]))


def _community_phase(state, side):
    mine = state.side(side)
    means, mean_outer, W, iota = community_arrays_from_stats(
        mine.stat_weight, mine.stat_mean, mine.stat_outer, state.hyper,
        state.base_mean(side), mine.comm_W, mine.comm_iota,
        state.community_update)
    mine.comm_means = means
    mine.comm_mean_outer = mean_outer
    mine.comm_W = W
    mine.comm_iota = iota
    mine.refresh_caches()


# ---------------------------------------------------------------------------
# Sweeps
# ---------------------------------------------------------------------------

_PHASES = (
    ("factors", lambda st, ratings, side: _factor_phase(st, ratings, side)),
    ("memberships", lambda st, ratings, side: _membership_phase(st, side)),
    ("sticks", lambda st, ratings, side: _stick_phase(st, side)),
    ("communities", lambda st, ratings, side: _community_phase(st, side)),
)


def sweep_phases(state, ratings, first_side="users"):
    """Yield ``(side, phase_name)`` after applying each phase in place.

    Exposed for phase-level instrumentation; :func:`run_sweep` is the
    value-semantic wrapper.
    """
    sides = (first_side, OTHER_SIDE[first_side])
    for side in sides:
        for name, fn in _PHASES:
            try:
                fn(state, ratings, side)
            except HemfError as exc:
                raise type(exc)(f"[{side}.{name}] {exc}") from exc
            yield side, name


def run_sweep(state, ratings, first_side="users"):
    """One full coordinate-ascent sweep; returns a new state with the
    post-sweep bound appended to its trace."""
    out = state.copy()
    for _ in sweep_phases(out, ratings, first_side):
        pass
    out.elbo_trace.append(compute_elbo(out, ratings))
    return out


@dataclass
class FitConfig:
    """Run options for :func:`fit_batch`."""

    d_init: int = 1
    k_init: int = 1
    seed: int = 0
    max_sweeps: int = 200
    tol: float = 1e-6
    community_update: str = "printed"
    evb: bool = False
    evb_every: int = 1
    evb_warmup: int = 5
    first_side: str = "users"
    on_sweep: object = None

    def __post_init__(self):
        if self.max_sweeps < 1:
            raise ValueError("max_sweeps must be >= 1")
        if not self.tol > 0:
            raise ValueError("tol must be positive")


def fit_batch(ratings, hyper, config=None, state=None):
    """Iterate sweeps until the relative bound change falls below tolerance.

    Non-convergence within ``max_sweeps`` is not an error; the returned
    state's ``converged`` flag reports it.  Pass ``state`` to continue from
    an existing configuration instead of a fresh seeded init.
    """
    config = config or FitConfig()
    if state is None:
        state = init_state(ratings, hyper, config.d_init, config.k_init,
                           config.seed, community_update=config.community_update)
    else:
        state = state.copy()
    if not state.elbo_trace:
        state.elbo_trace.append(compute_elbo(state, ratings))
    previous = state.elbo_trace[-1]
    state.converged = False
    for sweep in range(config.max_sweeps):
        state = run_sweep(state, ratings, first_side=config.first_side)
        # hyperparameter steps before the posteriors take shape destabilize
        # the mixture, hence the warmup
        if (config.evb and sweep + 1 > config.evb_warmup
                and (sweep + 1) % config.evb_every == 0):
            from .empirical import run_evb_pass
            state = run_evb_pass(state, ratings=ratings, mode="batch")
        current = state.elbo_trace[-1]
        if config.on_sweep is not None:
            config.on_sweep(state, sweep)
        if abs(current - previous) < config.tol * abs(current):
            state.converged = True
            break
        previous = current
    return state
