"""Evidence lower bound for the coupled mixture factorization model.

The bound is the expected log joint minus the entropy of the fully
factorized variational posterior.  The component-mean prior enters through
its scaled quadratic form only (the coupling to the component covariance is
retained only through ``lambda0``); with that convention every batch update
in :mod:`hemf.batch` is an exact coordinate-ascent step at ``lambda0 = 1``,
so the bound is non-decreasing phase by phase.
"""

import numpy as np
from scipy.special import betaln, multigammaln

from .errors import NonFiniteError
from .model import LOG2, LOG2PI, check_finite
from .special import digamma, pd_logdet_stack


def beta_expectations(eta1, eta2):
    """(E[ln v_d], E[ln(1 - v_d)]) under independent Beta(eta1, eta2)."""
    total = digamma(eta1 + eta2)
    return digamma(eta1) - total, digamma(eta2) - total


def stick_log_weight_terms(eta1, eta2):
    """Per-component E[ln pi_d] of the stick-breaking weights:
    E[ln v_d] + sum_{l<d} E[ln(1 - v_l)]."""
    elog_v, elog_1mv = beta_expectations(eta1, eta2)
    shifted = np.concatenate([[0.0], np.cumsum(elog_1mv)[:-1]])
    return elog_v + shifted


def _logdet_or_raise(stack, tag):
    try:
        return pd_logdet_stack(stack)
    except Exception as exc:
        raise NonFiniteError(f"degenerate covariance in {tag}") from exc


def _inv_wishart_entropy(logdet_W, iota, exp_logdet, L):
    elog_q = (0.5 * iota * logdet_W - 0.5 * iota * L * LOG2
              - multigammaln(0.5 * iota, L)
              - 0.5 * (iota + L + 1) * exp_logdet - 0.5 * iota * L)
    return -elog_q


def _side_terms(side, side_state, hyper, community_update, terms):
    q = side_state.memberships
    L = side_state.latent_dim
    D = side_state.n_components
    N = side_state.n_entities
    base = hyper.mu0 if side == "users" else hyper.nu0
    conc = hyper.alpha if side == "users" else hyper.beta
    P = side_state.exp_prec
    cm = side_state.comm_means
    mo = side_state.comm_mean_outer
    eld = side_state.exp_logdet

    # E[ln p(factors | assignments, components)]
    quad = (np.einsum("nab,dab->nd", side_state.second_moments, P)
            - 2.0 * np.einsum("na,dab,db->nd", side_state.means, P, cm)
            + np.einsum("dab,dab->d", P, mo)[None, :])
    terms[f"{side}.factor_prior"] = -0.5 * float(
        np.sum(q * (L * LOG2PI + eld[None, :] + quad)))

    # E[ln p(assignments | sticks)] and E[ln p(sticks | concentration)]
    log_pi = stick_log_weight_terms(side_state.eta1, side_state.eta2)
    rho = q.sum(axis=0)
    terms[f"{side}.membership_prior"] = float(rho @ log_pi)
    _, elog_1mv = beta_expectations(side_state.eta1, side_state.eta2)
    terms[f"{side}.stick_prior"] = float(
        D * np.log(conc) + (conc - 1.0) * np.sum(elog_1mv))

    # Component-mean prior: scaled quadratic coupling only.  The scale
    # convention follows the community-update mode: prior covariance
    # lambda0 * Sigma_d ("printed") or Sigma_d / lambda0 ("conjugate").
    smu = (mo - np.einsum("a,db->dab", base, cm)
           - np.einsum("da,b->dab", cm, base)
           + np.outer(base, base)[None, :, :])
    quad_mu = float(np.sum(np.einsum("dab,dab->d", P, smu)))
    if community_update == "conjugate":
        terms[f"{side}.mean_prior"] = -0.5 * (
            D * L * (LOG2PI - np.log(hyper.lambda0)) + hyper.lambda0 * quad_mu)
    else:
        terms[f"{side}.mean_prior"] = -0.5 * (
            D * L * (LOG2PI + np.log(hyper.lambda0)) + quad_mu / hyper.lambda0)

    # Component-covariance prior (inverse-Wishart).
    logdet_w0 = pd_logdet_stack(hyper.w0[None])[0]
    tr_w0 = np.einsum("ab,dab->d", hyper.w0, P)
    terms[f"{side}.cov_prior"] = float(np.sum(
        0.5 * hyper.iota0 * logdet_w0 - 0.5 * hyper.iota0 * L * LOG2
        - multigammaln(0.5 * hyper.iota0, L)
        - 0.5 * (hyper.iota0 + L + 1.0) * eld - 0.5 * tr_w0))

    # Entropies.
    covs = side_state.factor_covariances()
    terms[f"{side}.factor_entropy"] = float(
        0.5 * np.sum(_logdet_or_raise(covs, f"{side}.factor_entropy"))
        + N * 0.5 * L * (1.0 + LOG2PI))
    with np.errstate(divide="ignore", invalid="ignore"):
        qlogq = np.where(q > 0.0, q * np.log(np.maximum(q, 1e-300)), 0.0)
    terms[f"{side}.membership_entropy"] = -float(np.sum(qlogq))
    e1, e2 = side_state.eta1, side_state.eta2
    terms[f"{side}.stick_entropy"] = float(np.sum(
        betaln(e1, e2) - (e1 - 1.0) * digamma(e1) - (e2 - 1.0) * digamma(e2)
        + (e1 + e2 - 2.0) * digamma(e1 + e2)))
    mean_cov = mo - np.einsum("da,db->dab", cm, cm)
    terms[f"{side}.mean_entropy"] = float(
        0.5 * np.sum(_logdet_or_raise(mean_cov, f"{side}.mean_entropy"))
        + D * 0.5 * L * (1.0 + LOG2PI))
    logdet_W = _logdet_or_raise(side_state.comm_W, f"{side}.cov_entropy")
    terms[f"{side}.cov_entropy"] = float(np.sum(
        _inv_wishart_entropy(logdet_W, side_state.comm_iota, eld, L)))


def elbo_terms(state, ratings):
    """All bound terms by name; useful for phase-level instrumentation."""
    terms = {}
    sigma2 = state.hyper.sigma2
    n = len(ratings)
    if n:
        au = state.users
        bi = state.items
        u, i, r = ratings.users, ratings.items, ratings.values
        dots = np.einsum("el,el->e", au.means[u], bi.means[i])
        traces = np.einsum("eab,eab->e", au.second_moments[u], bi.second_moments[i])
        sq_err = float(np.sum(r * r - 2.0 * r * dots + traces))
        terms["likelihood"] = -0.5 * n * (LOG2PI + np.log(sigma2)) - 0.5 * sq_err / sigma2
    else:
        terms["likelihood"] = 0.0
    _side_terms("users", state.users, state.hyper, state.community_update, terms)
    _side_terms("items", state.items, state.hyper, state.community_update, terms)
    for tag, value in terms.items():
        check_finite(value, tag)
    return terms


def compute_elbo(state, ratings):
    """Evidence lower bound of the current variational configuration.

    Raises
    ------
    NonFiniteError
        If any term degenerates to NaN/Inf; the message names the term.
    """
    return float(sum(elbo_terms(state, ratings).values()))


def expected_squared_error(state, ratings):
    """sum over observed entries of
    E[(r - a^T b)^2] = r^2 - 2 r <a>.<b> + tr(<b b^T><a a^T>)."""
    if not len(ratings):
        return 0.0
    u, i, r = ratings.users, ratings.items, ratings.values
    dots = np.einsum("el,el->e", state.users.means[u], state.items.means[i])
    traces = np.einsum("eab,eab->e", state.users.second_moments[u],
                       state.items.second_moments[i])
    return float(np.sum(r * r - 2.0 * r * dots + traces))
