"""Streaming variational inference: incremental factor updates, component
spawning, delta-based global updates, and community merging.

Each chunk is folded into the state by treating the current posterior as the
prior for the new observations.  Global (stick/component) posteriors are
refreshed either from running sufficient statistics (``recomputed``, the
default, which reproduces one batch phase when the whole training set
arrives as a single chunk) or by the incremental recurrences
(``printed``).
"""

from dataclasses import dataclass, field, replace

import numpy as np

from .batch import (OTHER_SIDE, community_arrays_from_stats,
                    membership_log_scores, softmax_rows,
                    stick_params_from_masses, update_factor)
from .elbo import beta_expectations
from .errors import HemfError, NotPositiveDefiniteError
from .model import (FactorPosterior, MembershipPosterior, SparseRatings,
                    expected_logdet, prior_community_arrays,
                    prior_mean_covariance)
from .special import digamma, pd_inverse_stack


# ---------------------------------------------------------------------------
# Chunks
# ---------------------------------------------------------------------------

@dataclass
class RatingChunk:
    """One streaming batch of observations.

    ``prev_values[e]`` is NaN for brand-new entries and carries the replaced
    rating for revisions of earlier entries.
    """

    users: np.ndarray
    items: np.ndarray
    values: np.ndarray
    prev_values: np.ndarray = None

    def __post_init__(self):
        self.users = np.asarray(self.users, dtype=np.int64).reshape(-1)
        self.items = np.asarray(self.items, dtype=np.int64).reshape(-1)
        self.values = np.asarray(self.values, dtype=float).reshape(-1)
        if self.prev_values is None:
            self.prev_values = np.full(len(self.values), np.nan)
        else:
            self.prev_values = np.asarray(self.prev_values, dtype=float).reshape(-1)
        lengths = {len(self.users), len(self.items), len(self.values),
                   len(self.prev_values)}
        if len(lengths) != 1:
            raise ValueError("chunk arrays must have equal length")

    def __len__(self):
        return len(self.values)

    @property
    def is_revision(self):
        return np.isfinite(self.prev_values)

    @property
    def prior_values(self):
        """Map from revised (user, item) pairs to the replaced rating."""
        rev = self.is_revision
        return {(int(u), int(i)): float(p) for u, i, p in
                zip(self.users[rev], self.items[rev], self.prev_values[rev])}

    @classmethod
    def from_entries(cls, entries):
        """Build from ``(user, item, rating)`` or ``(user, item, rating, prev)``."""
        users, items, values, prevs = [], [], [], []
        for entry in entries:
            users.append(entry[0])
            items.append(entry[1])
            values.append(entry[2])
            prevs.append(entry[3] if len(entry) > 3 else np.nan)
        return cls(np.array(users, dtype=np.int64).reshape(-1),
                   np.array(items, dtype=np.int64).reshape(-1),
                   np.array(values, dtype=float).reshape(-1),
                   np.array(prevs, dtype=float).reshape(-1))


def apply_chunk(history, chunk, n_users=None, n_items=None):
    """Cumulative snapshot after a chunk: revisions replace earlier values,
    new entries are appended, index spaces grow as needed."""
    n_users = max(n_users or 0, history.n_users,
                  int(chunk.users.max()) + 1 if len(chunk) else 0)
    n_items = max(n_items or 0, history.n_items,
                  int(chunk.items.max()) + 1 if len(chunk) else 0)
    values = {}
    for u, i, v in zip(history.users, history.items, history.values):
        values[(int(u), int(i))] = float(v)
    for u, i, v in zip(chunk.users, chunk.items, chunk.values):
        values[(int(u), int(i))] = float(v)
    if values:
        uu, ii = zip(*values.keys())
        vv = list(values.values())
    else:
        uu, ii, vv = (), (), ()
    return SparseRatings(n_users, n_items, uu, ii, vv,
                         user_labels=history.user_labels,
                         item_labels=history.item_labels)


# ---------------------------------------------------------------------------
# Deltas
# ---------------------------------------------------------------------------

@dataclass
class SideDeltas:
    """Per-component update increments extracted from one chunk.

    ``theta1``..``theta3`` are membership-weighted factor-statistic diffs;
    ``theta4``..``theta6`` are component-mean diffs (zero until the global
    update computes new component means).  ``sum_mean_old``/``sum_mean_new``
    are the plain sums of touched factor means before/after the chunk, used
    by the incremental covariance recurrence.
    """

    theta1: np.ndarray
    theta2: np.ndarray
    theta3: np.ndarray
    theta4: np.ndarray
    theta5: np.ndarray
    theta6: np.ndarray
    sum_mean_old: np.ndarray = None
    sum_mean_new: np.ndarray = None

    @classmethod
    def zeros(cls, n_components, latent_dim):
        D, L = int(n_components), int(latent_dim)
        return cls(theta1=np.zeros(D), theta2=np.zeros((D, L)),
                   theta3=np.zeros((D, L, L)), theta4=np.zeros((D, L)),
                   theta5=np.zeros((D, L, L)), theta6=np.zeros((D, L, L)),
                   sum_mean_old=np.zeros(L), sum_mean_new=np.zeros(L))

    def is_zero(self):
        return (not np.any(self.theta1) and not np.any(self.theta2)
                and not np.any(self.theta3) and not np.any(self.theta4)
                and not np.any(self.theta5) and not np.any(self.theta6)
                and not np.any(self.sum_mean_old) and not np.any(self.sum_mean_new))


def _pad_columns(arr, width):
    """Zero-pad the second axis of a (N, D_old, ...) array up to ``width``."""
    if arr.shape[1] >= width:
        return arr
    pad = [(0, 0)] * arr.ndim
    pad[1] = (0, width - arr.shape[1])
    return np.pad(arr, pad)


def _pad_components(arr, count):
    """Zero-pad the leading (component) axis up to ``count``."""
    if arr.shape[0] >= count:
        return arr
    pad = [(0, 0)] * arr.ndim
    pad[0] = (0, count - arr.shape[0])
    return np.pad(arr, pad)


def _side_deltas(before_side, after_side, touched):
    """Deltas over the touched entities of one side.  Component-mean deltas
    (theta4..6) are plain diffs of the two states' component posteriors,
    padded with zeros if the component count grew."""
    D = after_side.n_components
    L = after_side.latent_dim
    out = SideDeltas.zeros(D, L)
    touched = np.asarray(sorted(touched), dtype=np.int64)
    if len(touched):
        q_new = after_side.memberships[touched]
        m_new = after_side.means[touched]
        s_new = after_side.second_moments[touched]
        # Entities unseen before the chunk contribute zero old statistics.
        old_n = before_side.n_entities
        sel = touched < old_n
        seen = touched[sel]
        q_old = np.zeros((len(touched), D))
        m_old = np.zeros((len(touched), L))
        s_old = np.zeros((len(touched), L, L))
        if len(seen):
            q_old[sel] = _pad_columns(before_side.memberships[seen], D)
            m_old[sel] = before_side.means[seen]
            s_old[sel] = before_side.second_moments[seen]
        out.theta1 = q_new.sum(axis=0) - q_old.sum(axis=0)
        out.theta2 = q_new.T @ m_new - q_old.T @ m_old
        out.theta3 = (np.einsum("nd,nab->dab", q_new, s_new)
                      - np.einsum("nd,nab->dab", q_old, s_old))
        out.sum_mean_old = m_old.sum(axis=0)
        out.sum_mean_new = m_new.sum(axis=0)
    before_cm = _pad_components(before_side.comm_means, D)
    before_mo = _pad_components(before_side.comm_mean_outer, D)
    out.theta4 = after_side.comm_means - before_cm
    out.theta5 = after_side.comm_mean_outer - before_mo
    out.theta6 = (np.einsum("da,b->dab", after_side.comm_means, out.sum_mean_new)
                  - np.einsum("da,b->dab", before_cm, out.sum_mean_old))
    return out


def accumulate_deltas(chunk, before, after):
    """Deltas for both sides between two states differing on the entities a
    chunk touches.  New entities enter with zero previous statistics; if the
    component count grew, the before-state is padded with zeros."""
    users = set(int(u) for u in chunk.users)
    items = set(int(i) for i in chunk.items)
    if after.users.n_components < before.users.n_components:
        raise HemfError("component count shrank between before and after states")
    return (_side_deltas(before.users, after.users, users),
            _side_deltas(before.items, after.items, items))


# ---------------------------------------------------------------------------
# Factor updates
# ---------------------------------------------------------------------------

def _chunk_sums_for_entity(entity, side, chunk, other_side):
    """Delta_1 (L,) and Delta_2 (L, L) for one touched entity."""
    ent, oth = (chunk.users, chunk.items) if side == "users" else (chunk.items, chunk.users)
    sel = ent == entity
    o = oth[sel]
    vals = chunk.values[sel]
    prev = chunk.prev_values[sel]
    rev = np.isfinite(prev)
    eff = np.where(rev, vals - prev, vals)
    d1 = eff @ other_side.means[o]
    new_items = o[~rev]
    L = other_side.latent_dim
    d2 = (other_side.second_moments[new_items].sum(axis=0)
          if len(new_items) else np.zeros((L, L)))
    return d1, d2


def rank_update(mean, cov, d1, d2, sigma2):
    """Fold new natural parameters (d1, d2 / sigma2) into a Gaussian."""
    L = len(mean)
    shifted = mean + cov @ d1 / sigma2
    gain = np.linalg.solve(sigma2 * np.eye(L) + d2 @ cov, d2)
    new_mean = shifted - cov @ (gain @ shifted)
    new_cov = cov - cov @ gain @ cov
    new_cov = 0.5 * (new_cov + new_cov.T)
    return new_mean, new_cov


def online_update_factor(entity, side, chunk, state):
    """Incremental Gaussian update of one factor posterior from a chunk.

    New ratings contribute their values and second moments; revisions
    contribute only the rating difference (the item's second moment is
    already inside the posterior precision).
    """
    mine = state.side(side)
    if not 0 <= entity < mine.n_entities:
        raise IndexError(f"{side} index {entity} out of range")
    other = state.side(OTHER_SIDE[side])
    d1, d2 = _chunk_sums_for_entity(entity, side, chunk, other)
    mean = mine.means[entity]
    cov = mine.second_moments[entity] - np.outer(mean, mean)
    try:
        new_mean, new_cov = rank_update(mean, cov, d1, d2, state.hyper.sigma2)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefiniteError(
            f"online factor solve failed for {side} entity {entity}") from exc
    return FactorPosterior(new_mean, new_cov + np.outer(new_mean, new_mean))


def _prior_only_posterior(side_state):
    """Mixture-prior-only factor posterior under a uniform membership."""
    D = side_state.n_components
    prec = side_state.exp_prec.mean(axis=0)
    lin = np.einsum("dab,db->a", side_state.exp_prec, side_state.comm_means) / D
    cov = np.linalg.inv(prec)
    cov = 0.5 * (cov + cov.T)
    mean = cov @ lin
    return mean, cov + np.outer(mean, mean)


def _extend_side(side_state, n_new):
    """Grow the entity arrays; fresh rows get the prior-only posterior and a
    uniform membership, so a subsequent incremental update equals the batch
    formula on chunk-local ratings."""
    if n_new <= 0:
        return
    D = side_state.n_components
    L = side_state.latent_dim
    mean, second = _prior_only_posterior(side_state)
    side_state.means = np.vstack([side_state.means, np.tile(mean, (n_new, 1))])
    side_state.second_moments = np.concatenate(
        [side_state.second_moments, np.tile(second, (n_new, 1, 1))])
    side_state.memberships = np.vstack(
        [side_state.memberships, np.full((n_new, D), 1.0 / D)])


# ---------------------------------------------------------------------------
# Membership + spawning
# ---------------------------------------------------------------------------

def candidate_log_scores(side_state, hyper, side, mode):
    """Log responsibility of a hypothetical fresh component for every
    entity, from the prior component statistics and a prior stick."""
    cm, cmo, W, iota, exp_prec, exp_ld = prior_community_arrays(hyper, side, 1, mode)
    P = exp_prec[0]
    m0 = cm[0]
    xi1 = -0.5 * (np.einsum("nab,ab->n", side_state.second_moments, P)
                  - 2.0 * (side_state.means @ (P @ m0))
                  + float(np.einsum("ab,ab->", P, cmo[0]))
                  + float(exp_ld[0]))
    conc = hyper.alpha if side == "users" else hyper.beta
    elog_v_new = digamma(1.0) - digamma(1.0 + conc)
    _, elog_1mv = beta_expectations(side_state.eta1, side_state.eta2)
    xi2 = elog_v_new + float(np.sum(elog_1mv))
    return xi1 + xi2


def append_prior_community(side_state, hyper, side, mode):
    """Grow the component set by one fresh prior component."""
    cm, cmo, W, iota, ep, eld = prior_community_arrays(hyper, side, 1, mode)
    L = side_state.latent_dim
    side_state.comm_means = np.vstack([side_state.comm_means, cm])
    side_state.comm_mean_outer = np.concatenate([side_state.comm_mean_outer, cmo])
    side_state.comm_W = np.concatenate([side_state.comm_W, W])
    side_state.comm_iota = np.concatenate([side_state.comm_iota, iota])
    side_state.exp_prec = np.concatenate([side_state.exp_prec, ep])
    side_state.exp_logdet = np.concatenate([side_state.exp_logdet, eld])
    conc = hyper.alpha if side == "users" else hyper.beta
    side_state.eta1 = np.concatenate([side_state.eta1, [1.0]])
    side_state.eta2 = np.concatenate([side_state.eta2, [float(conc)]])
    side_state.memberships = np.hstack(
        [side_state.memberships, np.zeros((side_state.memberships.shape[0], 1))])
    side_state.stat_weight = np.concatenate([side_state.stat_weight, [0.0]])
    side_state.stat_mean = np.vstack([side_state.stat_mean, np.zeros((1, L))])
    side_state.stat_outer = np.concatenate([side_state.stat_outer,
                                            np.zeros((1, L, L))])


def online_update_membership(entity, side, state, allow_spawn=True):
    """Responsibilities of one entity, possibly growing the component set.

    A fresh component is spawned when its log score beats the best existing
    one by more than ``ln(eps_spawn)``; the state's component set is grown
    in place in that case.  Returns the normalized weights over the
    resulting set and whether a spawn happened.
    """
    mine = state.side(side)
    if not 0 <= entity < mine.n_entities:
        raise IndexError(f"{side} index {entity} out of range")
    scores = membership_log_scores(mine)[entity]
    spawned = False
    if allow_spawn and np.isfinite(np.log(state.hyper.eps_spawn)):
        cand = candidate_log_scores(mine, state.hyper, side,
                                    state.community_update)[entity]
        if cand - scores.max() > np.log(state.hyper.eps_spawn):
            append_prior_community(mine, state.hyper, side, state.community_update)
            scores = np.concatenate([scores, [cand]])
            spawned = True
    weights = softmax_rows(scores[None])[0]
    return MembershipPosterior(weights), spawned


# ---------------------------------------------------------------------------
# Global updates
# ---------------------------------------------------------------------------

def _globals_recomputed(side_state, deltas, hyper, base, conc, mode):
    side_state.stat_weight = side_state.stat_weight + deltas.theta1
    side_state.stat_mean = side_state.stat_mean + deltas.theta2
    side_state.stat_outer = side_state.stat_outer + deltas.theta3
    side_state.eta1, side_state.eta2 = stick_params_from_masses(
        side_state.stat_weight, conc)
    means, mean_outer, W, iota = community_arrays_from_stats(
        side_state.stat_weight, side_state.stat_mean, side_state.stat_outer,
        hyper, base, side_state.comm_W, side_state.comm_iota, mode)
    side_state.comm_means = means
    side_state.comm_mean_outer = mean_outer
    side_state.comm_W = W
    side_state.comm_iota = iota
    side_state.refresh_caches()


def _globals_printed(side_state, deltas, hyper, base, conc, mode, n_entities):
    lam = hyper.lambda0
    t1 = deltas.theta1
    tail = np.concatenate([np.cumsum(t1[::-1])[::-1][1:], [0.0]])
    side_state.eta1 = side_state.eta1 + t1
    side_state.eta2 = side_state.eta2 + tail
    rho_new = side_state.stat_weight + t1
    side_state.stat_weight = rho_new
    side_state.stat_mean = side_state.stat_mean + deltas.theta2
    side_state.stat_outer = side_state.stat_outer + deltas.theta3

    old_means = side_state.comm_means
    old_outer = side_state.comm_mean_outer
    denom = (lam + rho_new)[:, None]
    new_means = old_means - (t1[:, None] * old_means - lam * deltas.theta2) / denom
    # Mean second moment from the pre-update covariance cache.
    V = np.stack([prior_mean_covariance(hyper, rho_new[d], side_state.comm_W[d],
                                        side_state.comm_iota[d], mode)
                  for d in range(len(rho_new))])
    new_outer = V + np.einsum("da,db->dab", new_means, new_means)

    theta4 = new_means - old_means
    theta5 = new_outer - old_outer
    theta6 = (np.einsum("da,b->dab", new_means, deltas.sum_mean_new)
              - np.einsum("da,b->dab", old_means, deltas.sum_mean_old))
    deltas.theta4, deltas.theta5, deltas.theta6 = theta4, theta5, theta6

    base_cross = np.einsum("a,db->dab", base, theta4)
    sym = lambda X: 0.5 * (X + np.swapaxes(X, -1, -2))
    W_new = (side_state.comm_W
             - (2.0 / lam) * sym(base_cross)
             - 2.0 * sym(theta6)
             + (n_entities + 1.0 / lam) * theta5
             + deltas.theta3)
    W_new = sym(W_new)
    side_state.comm_means = new_means
    side_state.comm_mean_outer = new_outer
    side_state.comm_W = W_new
    side_state.comm_iota = side_state.comm_iota + t1
    side_state.refresh_caches()


def online_update_globals(deltas, side, state, mode="recomputed"):
    """Fold one side's deltas into its stick and component posteriors.

    ``recomputed`` refreshes from the running sufficient statistics with the
    batch formulas; ``printed`` applies the incremental recurrences.
    All-zero deltas leave the state bit-for-bit unchanged.
    """
    out = state.copy()
    mine = out.side(side)
    if deltas.theta1.shape[0] != mine.n_components:
        raise HemfError("deltas are not dimensioned to the current component "
                        "count; pad the before-state with zeros")
    if deltas.is_zero():
        return out
    base = out.base_mean(side)
    conc = out.concentration(side)
    try:
        if mode == "recomputed":
            _globals_recomputed(mine, deltas, out.hyper, base, conc,
                                out.community_update)
        elif mode == "printed":
            _globals_printed(mine, deltas, out.hyper, base, conc,
                             out.community_update, mine.n_entities)
        else:
            raise ValueError(f"unknown online_globals mode: {mode}")
    except NotPositiveDefiniteError as exc:
        raise NotPositiveDefiniteError(f"[{side}.globals] {exc}") from exc
    return out


# ---------------------------------------------------------------------------
# Merging
# ---------------------------------------------------------------------------

def _gaussian_sym_kl(m1, c1, m2, c2):
    L = len(m1)
    i1 = np.linalg.inv(c1)
    i2 = np.linalg.inv(c2)
    diff = m1 - m2
    kl12 = 0.5 * (np.trace(i2 @ c1) + diff @ i2 @ diff - L
                  + np.linalg.slogdet(c2)[1] - np.linalg.slogdet(c1)[1])
    kl21 = 0.5 * (np.trace(i1 @ c2) + diff @ i1 @ diff - L
                  + np.linalg.slogdet(c1)[1] - np.linalg.slogdet(c2)[1])
    return 0.5 * (kl12 + kl21)


def community_divergence(side_state, a, b):
    """Symmetric KL between two components summarized as Gaussians with the
    posterior-mean covariance W / (iota - L - 1)."""
    L = side_state.latent_dim
    def cov(d):
        return side_state.comm_W[d] / max(side_state.comm_iota[d] - L - 1, 1e-8)
    return _gaussian_sym_kl(side_state.comm_means[a], cov(a),
                            side_state.comm_means[b], cov(b))


def _merge_pair(side_state, hyper, base, conc, mode, keep, drop):
    side_state.memberships[:, keep] += side_state.memberships[:, drop]
    side_state.memberships = np.delete(side_state.memberships, drop, axis=1)
    for name in ("stat_weight", "stat_mean", "stat_outer"):
        arr = getattr(side_state, name)
        arr[keep] = arr[keep] + arr[drop]
        setattr(side_state, name, np.delete(arr, drop, axis=0))
    for name in ("comm_means", "comm_mean_outer", "comm_W", "comm_iota",
                 "exp_prec", "exp_logdet"):
        setattr(side_state, name, np.delete(getattr(side_state, name), drop, axis=0))
    side_state.eta1 = np.delete(side_state.eta1, drop)
    side_state.eta2 = np.delete(side_state.eta2, drop)
    # Rebuild the merged component from its combined statistics; the
    # survivor's covariance is the cache source for the mean posterior.
    means, mean_outer, W, iota = community_arrays_from_stats(
        side_state.stat_weight[keep:keep + 1], side_state.stat_mean[keep:keep + 1],
        side_state.stat_outer[keep:keep + 1], hyper, base,
        side_state.comm_W[keep:keep + 1], side_state.comm_iota[keep:keep + 1], mode)
    side_state.comm_means[keep] = means[0]
    side_state.comm_mean_outer[keep] = mean_outer[0]
    side_state.comm_W[keep] = W[0]
    side_state.comm_iota[keep] = iota[0]
    side_state.eta1, side_state.eta2 = stick_params_from_masses(
        side_state.stat_weight, conc)
    side_state.refresh_caches()


def merge_communities(side, state):
    """Repeatedly merge the closest component pair while their divergence is
    below ``merge_tau``; total membership mass is conserved."""
    out = state.copy()
    mine = out.side(side)
    base = out.base_mean(side)
    conc = out.concentration(side)
    while mine.n_components >= 2:
        D = mine.n_components
        best = None
        for a in range(D):
            for b in range(a + 1, D):
                div = community_divergence(mine, a, b)
                if best is None or div < best[0]:
                    best = (div, a, b)
        if best is None or best[0] >= state.hyper.merge_tau:
            break
        _, a, b = best
        _merge_pair(mine, out.hyper, base, conc, out.community_update, a, b)
    return out


# ---------------------------------------------------------------------------
# Chunk processing
# ---------------------------------------------------------------------------

@dataclass
class OnlineConfig:
    """Run options for chunk processing and stream fitting.

    ``evb_sigma2`` picks the noise-variance estimator used when
    hyperparameter updates are interleaved: the incremental blend
    (``"online"``) or a recomputation over the accumulated history
    (``"batch"``, sturdier against a poorly predicting early state).
    ``evb_warmup`` delays the first hyperparameter pass by that many chunks.
    """

    online_globals: str = "recomputed"
    spawn: bool = True
    merge: bool = True
    propagation_sweeps: int = 0
    spawn_warmup: int = 0
    merge_warmup: int = 0
    evb: bool = False
    evb_every: int = 10
    evb_warmup: int = 30
    evb_sigma2: str = "online"

    def __post_init__(self):
        if self.online_globals not in ("recomputed", "printed"):
            raise ValueError("online_globals must be 'recomputed' or 'printed'")
        if self.propagation_sweeps < 0:
            raise ValueError("propagation_sweeps must be >= 0")
        if self.evb_sigma2 not in ("online", "batch"):
            raise ValueError("evb_sigma2 must be 'online' or 'batch'")


def _touched(chunk, side):
    arr = chunk.users if side == "users" else chunk.items
    return np.unique(arr)


def _update_factors_from_chunk(state, chunk, side):
    mine = state.side(side)
    other = state.side(OTHER_SIDE[side])
    for entity in _touched(chunk, side):
        d1, d2 = _chunk_sums_for_entity(int(entity), side, chunk, other)
        mean = mine.means[entity]
        cov = mine.second_moments[entity] - np.outer(mean, mean)
        try:
            new_mean, new_cov = rank_update(mean, cov, d1, d2, state.hyper.sigma2)
        except np.linalg.LinAlgError as exc:
            raise NotPositiveDefiniteError(
                f"online factor solve failed for {side} entity {entity}") from exc
        mine.means[entity] = new_mean
        mine.second_moments[entity] = new_cov + np.outer(new_mean, new_mean)


def _update_memberships_from_chunk(state, chunk, side, allow_spawn):
    mine = state.side(side)
    for entity in _touched(chunk, side):
        post, _ = online_update_membership(int(entity), side, state,
                                           allow_spawn=allow_spawn)
        # a spawn grows the matrix width; rows set earlier keep zero mass there
        padded = np.zeros(mine.memberships.shape[1])
        padded[:len(post.weights)] = post.weights
        mine.memberships[entity] = padded


def _neighborhood(history, touched_users, touched_items):
    """Entities linked to the touched ones through shared ratings."""
    users = set(int(u) for u in touched_users)
    items = set(int(i) for i in touched_items)
    for u in list(users):
        ii, _ = history.items_of(u)
        items.update(int(i) for i in ii)
    for i in list(items):
        uu, _ = history.users_of(i)
        users.update(int(u) for u in uu)
    return (np.array(sorted(users), dtype=np.int64),
            np.array(sorted(items), dtype=np.int64))


def _propagation_sweep(state, history, users_idx, items_idx, config):
    """One local batch-style refresh of a neighborhood, followed by a global
    refresh through the usual delta path."""
    before = state.copy()
    for side, idx in (("users", users_idx), ("items", items_idx)):
        mine = state.side(side)
        for entity in idx:
            post = update_factor(int(entity), side, state, history)
            mine.means[entity] = post.mean
            mine.second_moments[entity] = post.second_moment
        scores = membership_log_scores(mine)
        mine.memberships[idx] = softmax_rows(scores[idx])
    du = _side_deltas(before.users, state.users, set(int(u) for u in users_idx))
    di = _side_deltas(before.items, state.items, set(int(i) for i in items_idx))
    out = online_update_globals(du, "users", state, mode=config.online_globals)
    out = online_update_globals(di, "items", out, mode=config.online_globals)
    return out


def process_chunk(chunk, state, config=None, history=None):
    """Fold one chunk into the state: incremental factor updates for touched
    entities on both sides, membership refresh with optional spawning,
    delta-based global updates, an optional merge pass, and optional local
    propagation sweeps over the rating neighborhood (requires ``history``).
    """
    config = config or OnlineConfig()
    if len(chunk) == 0:
        return state.copy()
    out = state.copy()
    _extend_side(out.users, int(chunk.users.max()) + 1 - out.users.n_entities)
    _extend_side(out.items, int(chunk.items.max()) + 1 - out.items.n_entities)
    before = out.copy()

    try:
        _update_factors_from_chunk(out, chunk, "users")
        _update_factors_from_chunk(out, chunk, "items")
        _update_memberships_from_chunk(out, chunk, "users", config.spawn)
        _update_memberships_from_chunk(out, chunk, "items", config.spawn)
        du, di = accumulate_deltas(chunk, before, out)
        out = online_update_globals(du, "users", out, mode=config.online_globals)
        out = online_update_globals(di, "items", out, mode=config.online_globals)
        if config.merge:
            out = merge_communities("users", out)
            out = merge_communities("items", out)
        if config.propagation_sweeps > 0:
            if history is None:
                raise HemfError("propagation sweeps require the cumulative ratings")
            snapshot = apply_chunk(history, chunk,
                                   n_users=out.users.n_entities,
                                   n_items=out.items.n_entities)
            users_idx, items_idx = _neighborhood(
                snapshot, _touched(chunk, "users"), _touched(chunk, "items"))
            for _ in range(config.propagation_sweeps):
                out = _propagation_sweep(out, snapshot, users_idx, items_idx, config)
    except HemfError as exc:
        raise type(exc)(f"[chunk of {len(chunk)} entries] {exc}") from exc
    return out


def stream_fit(chunks, state, config=None, history=None, on_chunk=None):
    """Fold a sequence of chunks into the state.

    ``history`` (cumulative observed ratings before the stream) is kept up
    to date for propagation, revision bookkeeping and online noise-variance
    updates.  ``on_chunk(state, idx, history)`` is called after each chunk.
    """
    from .empirical import run_evb_pass

    config = config or OnlineConfig()
    if history is None:
        history = SparseRatings(state.users.n_entities, state.items.n_entities)
    for idx, chunk in enumerate(chunks):
        n_seen = len(history)
        chunk_config = config
        # freshly spawned components sit at the prior and would merge with
        # each other immediately; delaying merges (and optionally spawns)
        # lets overlapping components differentiate first
        if config.spawn and idx < config.spawn_warmup:
            chunk_config = replace(chunk_config, spawn=False)
        if config.merge and idx < config.merge_warmup:
            chunk_config = replace(chunk_config, merge=False)
        state = process_chunk(chunk, state, config=chunk_config, history=history)
        history = apply_chunk(history, chunk,
                              n_users=state.users.n_entities,
                              n_items=state.items.n_entities)
        if (config.evb and idx + 1 > config.evb_warmup
                and (idx + 1) % config.evb_every == 0):
            if config.evb_sigma2 == "batch":
                state = run_evb_pass(state, ratings=history, mode="batch")
            else:
                state = run_evb_pass(state, mode="online", chunk=chunk,
                                     n_seen=n_seen)
        if on_chunk is not None:
            on_chunk(state, idx, history)
    return state, history
