"""Core data model: ratings, variational state, prediction, generative sampling.

State layout
------------
Each side of the factorization (users, items) keeps its per-entity factor
posteriors, mixture memberships, stick-breaking Beta parameters and
component (community) posteriors in stacked dense arrays so that whole
inference phases vectorize.  Per-entity / per-component dataclass views are
available through accessor methods for callers that want one object.

All state objects are value-semantic: ``copy()`` yields an independent deep
copy, and read-only operations are safe on shared snapshots.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.stats

from .errors import NonFiniteError
from .special import digamma, pd_inverse_stack, pd_logdet_stack

LOG2 = np.log(2.0)
LOG2PI = np.log(2.0 * np.pi)

#: Variance of the seeded Gaussian used for fresh factor means, and the
#: isotropic covariance assigned to fresh factor posteriors.
INIT_FACTOR_VARIANCE = 0.1


def make_rng(seed):
    """Seeded counter-based generator (Philox) used everywhere randomness
    is needed; fixed algorithm so seeds reproduce across platforms."""
    return np.random.Generator(np.random.Philox(int(seed)))


# ---------------------------------------------------------------------------
# Hyperparameters
# ---------------------------------------------------------------------------

@dataclass
class Hyperparameters:
    """Scalar and matrix hyperparameters shared by both sides.

    ``lambda0`` scales the component-mean prior covariance (prior covariance
    of a community mean is ``lambda0 * Sigma_d``), ``w0``/``iota0``
    parameterize the inverse-Wishart prior on component covariances, and
    ``alpha``/``beta`` are the user/item stick-breaking concentrations.
    """

    mu0: np.ndarray
    nu0: np.ndarray
    w0: np.ndarray
    iota0: float
    lambda0: float = 1.0
    alpha: float = 1.0
    beta: float = 1.0
    sigma2: float = 1.0
    eps_spawn: float = 1e-3
    merge_tau: float = 0.1
    lr_alpha: float = 1e-3
    lr_iota: float = 1e-3

    def __post_init__(self):
        self.mu0 = np.asarray(self.mu0, dtype=float).copy()
        self.nu0 = np.asarray(self.nu0, dtype=float).copy()
        self.w0 = np.asarray(self.w0, dtype=float).copy()
        L = self.mu0.shape[0]
        if self.nu0.shape != (L,):
            raise ValueError("mu0 and nu0 must have the same length")
        if self.w0.shape != (L, L):
            raise ValueError("w0 must be an LxL matrix")
        if not self.iota0 > L - 1:
            raise ValueError("iota0 must exceed L - 1")
        for name in ("lambda0", "alpha", "beta", "sigma2", "eps_spawn", "merge_tau"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        for name in ("lr_alpha", "lr_iota"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    @property
    def latent_dim(self):
        return self.mu0.shape[0]

    @classmethod
    def default(cls, latent_dim, **overrides):
        """Neutral defaults: zero base means, identity Wishart scale,
        iota0 = L + 2 (smallest dof with a finite covariance mean)."""
        L = int(latent_dim)
        kwargs = dict(
            mu0=np.zeros(L),
            nu0=np.zeros(L),
            w0=np.eye(L),
            iota0=float(L + 2),
        )
        kwargs.update(overrides)
        return cls(**kwargs)

    def copy(self):
        return Hyperparameters(
            mu0=self.mu0.copy(), nu0=self.nu0.copy(), w0=self.w0.copy(),
            iota0=self.iota0, lambda0=self.lambda0, alpha=self.alpha,
            beta=self.beta, sigma2=self.sigma2, eps_spawn=self.eps_spawn,
            merge_tau=self.merge_tau, lr_alpha=self.lr_alpha, lr_iota=self.lr_iota,
        )

    def swapped_sides(self):
        """Hyperparameters for the transposed problem (users <-> items)."""
        out = self.copy()
        out.mu0, out.nu0 = out.nu0.copy(), out.mu0.copy()
        out.alpha, out.beta = out.beta, out.alpha
        return out


# ---------------------------------------------------------------------------
# Ratings
# ---------------------------------------------------------------------------

class SparseRatings:
    """Coordinate-list rating matrix with per-user / per-item adjacency.

    Parameters
    ----------
    n_users, n_items : int
        Sizes of the index spaces (rows may be empty).
    users, items : array_like of int
        Entry coordinates, 0-based.
    values : array_like of float
        Observed rating values.
    user_labels, item_labels : list of str, optional
        Original external ids, index-aligned, retained by the parser.
    """

    def __init__(self, n_users, n_items, users=(), items=(), values=(),
                 user_labels=None, item_labels=None):
        self.n_users = int(n_users)
        self.n_items = int(n_items)
        self.users = np.asarray(users, dtype=np.int64).reshape(-1).copy()
        self.items = np.asarray(items, dtype=np.int64).reshape(-1).copy()
        self.values = np.asarray(values, dtype=float).reshape(-1).copy()
        if not (len(self.users) == len(self.items) == len(self.values)):
            raise ValueError("coordinate arrays must have equal length")
        if len(self.users):
            if self.users.min() < 0 or self.users.max() >= self.n_users:
                raise ValueError("user index out of range")
            if self.items.min() < 0 or self.items.max() >= self.n_items:
                raise ValueError("item index out of range")
            keys = self.users * self.n_items + self.items
            if len(np.unique(keys)) != len(keys):
                raise ValueError("duplicate (user, item) pair in one snapshot")
        self.user_labels = list(user_labels) if user_labels is not None else None
        self.item_labels = list(item_labels) if item_labels is not None else None
        self._user_adj = None
        self._item_adj = None

    def __len__(self):
        return len(self.values)

    @classmethod
    def from_entries(cls, n_users, n_items, entries, **kw):
        if entries:
            u, i, v = zip(*entries)
        else:
            u, i, v = (), (), ()
        return cls(n_users, n_items, u, i, v, **kw)

    def _adjacency(self, by_user):
        key = self.users if by_user else self.items
        n = self.n_users if by_user else self.n_items
        order = np.argsort(key, kind="stable")
        ptr = np.zeros(n + 1, dtype=np.int64)
        np.add.at(ptr, key + 1, 1)
        ptr = np.cumsum(ptr)
        return order, ptr

    def items_of(self, user):
        """Item indices and values rated by ``user``."""
        if self._user_adj is None:
            self._user_adj = self._adjacency(by_user=True)
        order, ptr = self._user_adj
        sel = order[ptr[user]:ptr[user + 1]]
        return self.items[sel], self.values[sel]

    def users_of(self, item):
        """User indices and values that rated ``item``."""
        if self._item_adj is None:
            self._item_adj = self._adjacency(by_user=False)
        order, ptr = self._item_adj
        sel = order[ptr[item]:ptr[item + 1]]
        return self.users[sel], self.values[sel]

    def counts_per_user(self):
        out = np.zeros(self.n_users, dtype=np.int64)
        np.add.at(out, self.users, 1)
        return out

    def subset(self, mask):
        """New snapshot with the masked entries, same index spaces."""
        mask = np.asarray(mask, dtype=bool)
        return SparseRatings(self.n_users, self.n_items,
                             self.users[mask], self.items[mask], self.values[mask],
                             user_labels=self.user_labels, item_labels=self.item_labels)

    def transposed(self):
        return SparseRatings(self.n_items, self.n_users,
                             self.items, self.users, self.values,
                             user_labels=self.item_labels, item_labels=self.user_labels)

    def coords(self, side):
        """Entity/other coordinates as seen from one side."""
        if side == "users":
            return self.users, self.items
        if side == "items":
            return self.items, self.users
        raise ValueError("side must be 'users' or 'items'")


# ---------------------------------------------------------------------------
# Posterior views
# ---------------------------------------------------------------------------

@dataclass
class FactorPosterior:
    """Gaussian posterior over one factor vector: first and second moments."""

    mean: np.ndarray
    second_moment: np.ndarray

    @property
    def covariance(self):
        return self.second_moment - np.outer(self.mean, self.mean)


@dataclass
class MembershipPosterior:
    """Categorical posterior over the component assignment of one entity."""

    weights: np.ndarray


@dataclass
class StickPosterior:
    """Per-component Beta parameters of the stick-breaking weights."""

    eta1: np.ndarray
    eta2: np.ndarray


@dataclass
class CommunityPosterior:
    """Gaussian x inverse-Wishart posterior for one mixture component."""

    mean: np.ndarray
    mean_outer: np.ndarray
    W: np.ndarray
    iota: float
    exp_prec: np.ndarray
    exp_logdet: float

    @property
    def mean_covariance(self):
        return self.mean_outer - np.outer(self.mean, self.mean)


def expected_logdet(W, iota):
    """E[ln |Sigma|] under an inverse-Wishart with scale ``W`` (stacked ok)
    and degrees of freedom ``iota``."""
    W = np.asarray(W, dtype=float)
    iota = np.asarray(iota, dtype=float)
    L = W.shape[-1]
    i = np.arange(1, L + 1, dtype=float)
    psi_sum = np.sum(digamma(0.5 * (iota[..., None] + 1.0 - i)), axis=-1)
    return pd_logdet_stack(W) - psi_sum - L * LOG2


# ---------------------------------------------------------------------------
# SideState / ModelState
# ---------------------------------------------------------------------------

@dataclass
class SideState:
    """All variational quantities for one side of the factorization.

    Arrays (N entities, D components, L latent dims):

    - ``means`` (N, L), ``second_moments`` (N, L, L): factor posteriors
    - ``memberships`` (N, D): rows sum to one
    - ``eta1``, ``eta2`` (D,): stick Beta parameters
    - ``comm_means`` (D, L), ``comm_mean_outer`` (D, L, L): component means
    - ``comm_W`` (D, L, L), ``comm_iota`` (D,): component covariances
    - ``exp_prec`` (D, L, L), ``exp_logdet`` (D,): caches derived from W, iota
    - ``stat_weight`` (D,), ``stat_mean`` (D, L), ``stat_outer`` (D, L, L):
      running membership-weighted factor statistics
      (sum q, sum q<a>, sum q<a a^T>) kept for streaming updates and merging
    """

    means: np.ndarray
    second_moments: np.ndarray
    memberships: np.ndarray
    eta1: np.ndarray
    eta2: np.ndarray
    comm_means: np.ndarray
    comm_mean_outer: np.ndarray
    comm_W: np.ndarray
    comm_iota: np.ndarray
    exp_prec: np.ndarray
    exp_logdet: np.ndarray
    stat_weight: np.ndarray
    stat_mean: np.ndarray
    stat_outer: np.ndarray

    @property
    def n_entities(self):
        return self.means.shape[0]

    @property
    def n_components(self):
        return self.eta1.shape[0]

    @property
    def latent_dim(self):
        return self.means.shape[1]

    def factor(self, i):
        return FactorPosterior(self.means[i].copy(), self.second_moments[i].copy())

    def membership(self, i):
        return MembershipPosterior(self.memberships[i].copy())

    def sticks(self):
        return StickPosterior(self.eta1.copy(), self.eta2.copy())

    def community(self, d):
        return CommunityPosterior(
            self.comm_means[d].copy(), self.comm_mean_outer[d].copy(),
            self.comm_W[d].copy(), float(self.comm_iota[d]),
            self.exp_prec[d].copy(), float(self.exp_logdet[d]),
        )

    def factor_covariances(self):
        mm = np.einsum("na,nb->nab", self.means, self.means)
        return self.second_moments - mm

    def refresh_caches(self):
        """Recompute ``exp_prec``/``exp_logdet`` from (W, iota)."""
        self.exp_prec = pd_inverse_stack(self.comm_W) * self.comm_iota[:, None, None]
        self.exp_logdet = expected_logdet(self.comm_W, self.comm_iota)

    def refresh_stats(self):
        """Recompute the running statistics from memberships and factors."""
        self.stat_weight = self.memberships.sum(axis=0)
        self.stat_mean = self.memberships.T @ self.means
        self.stat_outer = np.einsum("nd,nab->dab", self.memberships, self.second_moments)

    def copy(self):
        return SideState(**{k: np.array(v, copy=True) for k, v in vars(self).items()})


@dataclass
class ModelState:
    """Full variational configuration: both sides plus hyperparameters.

    ``community_update`` selects the component-posterior update formulas:
    ``"printed"`` (default) or ``"conjugate"`` (standard normal-inverse-
    Wishart weighting of the base mean).  The two coincide at lambda0 = 1.
    """

    users: SideState
    items: SideState
    hyper: Hyperparameters
    elbo_trace: list = field(default_factory=list)
    community_update: str = "printed"
    converged: bool = False

    def side(self, name):
        if name == "users":
            return self.users
        if name == "items":
            return self.items
        raise ValueError("side must be 'users' or 'items'")

    def base_mean(self, name):
        return self.hyper.mu0 if name == "users" else self.hyper.nu0

    def concentration(self, name):
        return self.hyper.alpha if name == "users" else self.hyper.beta

    def copy(self):
        return ModelState(
            users=self.users.copy(), items=self.items.copy(),
            hyper=self.hyper.copy(), elbo_trace=list(self.elbo_trace),
            community_update=self.community_update, converged=self.converged,
        )


def prior_mean_covariance(hyper, weight, W, iota, mode):
    """Posterior covariance of a component mean at membership mass ``weight``."""
    base = W / iota
    if mode == "printed":
        return (hyper.lambda0 / (hyper.lambda0 + weight)) * base
    if mode == "conjugate":
        return base / (hyper.lambda0 + weight)
    raise ValueError(f"unknown community_update mode: {mode}")


def prior_community_arrays(hyper, side, n_components, mode):
    """Component posteriors at the prior, as stacked arrays."""
    L = hyper.latent_dim
    D = int(n_components)
    base = hyper.mu0 if side == "users" else hyper.nu0
    means = np.tile(base, (D, 1))
    V = prior_mean_covariance(hyper, 0.0, hyper.w0, hyper.iota0, mode)
    mean_outer = np.tile(V + np.outer(base, base), (D, 1, 1))
    W = np.tile(hyper.w0, (D, 1, 1))
    iota = np.full(D, float(hyper.iota0))
    exp_prec = pd_inverse_stack(W) * iota[:, None, None]
    exp_ld = expected_logdet(W, iota)
    return means, mean_outer, W, iota, exp_prec, exp_ld


def _init_side(rng, n_entities, n_components, hyper, side, mode):
    L = hyper.latent_dim
    N, D = int(n_entities), int(n_components)
    means = rng.normal(0.0, np.sqrt(INIT_FACTOR_VARIANCE), size=(N, L))
    eye = INIT_FACTOR_VARIANCE * np.eye(L)
    second = np.einsum("na,nb->nab", means, means) + eye
    memberships = np.full((N, D), 1.0 / D)
    eta1 = np.ones(D)
    conc = hyper.alpha if side == "users" else hyper.beta
    eta2 = np.full(D, float(conc))
    cm, cmo, W, iota, ep, eld = prior_community_arrays(hyper, side, D, mode)
    state = SideState(
        means=means, second_moments=second, memberships=memberships,
        eta1=eta1, eta2=eta2, comm_means=cm, comm_mean_outer=cmo,
        comm_W=W, comm_iota=iota, exp_prec=ep, exp_logdet=eld,
        stat_weight=np.zeros(D), stat_mean=np.zeros((D, L)),
        stat_outer=np.zeros((D, L, L)),
    )
    state.refresh_stats()
    return state


def init_state(ratings, hyper, d_init, k_init, seed, community_update="printed"):
    """Deterministic seeded initial state bound to a rating snapshot.

    Factor means are drawn from a zero-mean Gaussian with variance 0.1 and
    paired with isotropic 0.1 covariance; memberships are uniform; sticks and
    components sit at their priors.
    """
    if d_init < 1 or k_init < 1:
        raise ValueError("d_init and k_init must be >= 1")
    rng = make_rng(seed)
    users = _init_side(rng, ratings.n_users, d_init, hyper, "users", community_update)
    items = _init_side(rng, ratings.n_items, k_init, hyper, "items", community_update)
    return ModelState(users=users, items=items, hyper=hyper.copy(),
                      community_update=community_update)


# ---------------------------------------------------------------------------
# Prediction
# ---------------------------------------------------------------------------

def predict_entry(state, user, item, clamp=None):
    """Posterior-mean prediction <a_user> . <b_item>, optionally clamped."""
    if not 0 <= user < state.users.n_entities:
        raise IndexError(f"user index {user} out of range")
    if not 0 <= item < state.items.n_entities:
        raise IndexError(f"item index {item} out of range")
    value = float(state.users.means[user] @ state.items.means[item])
    if clamp is not None:
        lo, hi = clamp
        value = min(max(value, lo), hi)
    return value


def predict_pairs(state, users, items, clamp=None):
    """Vectorized :func:`predict_entry` over coordinate arrays."""
    users = np.asarray(users, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)
    if len(users) and (users.min() < 0 or users.max() >= state.users.n_entities):
        raise IndexError("user index out of range")
    if len(items) and (items.min() < 0 or items.max() >= state.items.n_entities):
        raise IndexError("item index out of range")
    out = np.einsum("el,el->e", state.users.means[users], state.items.means[items])
    if clamp is not None:
        out = np.clip(out, clamp[0], clamp[1])
    return out


# ---------------------------------------------------------------------------
# Generative sampling
# ---------------------------------------------------------------------------

@dataclass
class GroundTruth:
    """Latent variables retained by :func:`sample_from_model` for recovery tests."""

    user_labels: np.ndarray
    item_labels: np.ndarray
    user_weights: np.ndarray
    item_weights: np.ndarray
    user_factors: np.ndarray
    item_factors: np.ndarray


def _sample_stick_weights(rng, concentration, k):
    """Truncated stick-breaking weights; the last stick takes the remainder."""
    if k == 1:
        return np.ones(1)
    v = rng.beta(1.0, concentration, size=k - 1)
    w = np.empty(k)
    rest = 1.0
    for d in range(k - 1):
        w[d] = v[d] * rest
        rest *= 1.0 - v[d]
    w[k - 1] = rest
    return w


def _sample_side(rng, hyper, side, k_true, n):
    L = hyper.latent_dim
    conc = hyper.alpha if side == "users" else hyper.beta
    base = hyper.mu0 if side == "users" else hyper.nu0
    weights = _sample_stick_weights(rng, conc, k_true)
    covs = np.empty((k_true, L, L))
    means = np.empty((k_true, L))
    for d in range(k_true):
        covs[d] = scipy.stats.invwishart.rvs(df=hyper.iota0, scale=hyper.w0,
                                             random_state=rng).reshape(L, L)
        means[d] = rng.multivariate_normal(base, hyper.lambda0 * covs[d])
    labels = rng.choice(k_true, size=n, p=weights)
    factors = np.empty((n, L))
    for d in range(k_true):
        sel = labels == d
        if np.any(sel):
            factors[sel] = rng.multivariate_normal(means[d], covs[d], size=int(sel.sum()))
    return labels, weights, factors


def sample_from_model(hyper, d_true, k_true, n_users, n_items, density, seed):
    """Ancestral sample of the truncated stick-breaking generative model.

    Returns a :class:`SparseRatings` with ``round(density * n_users * n_items)``
    observed cells chosen uniformly without replacement, plus the latent
    ground truth.  Deterministic per seed.
    """
    if not 0.0 < density <= 1.0:
        raise ValueError("density must lie in (0, 1]")
    rng = make_rng(seed)
    user_labels, user_w, A = _sample_side(rng, hyper, "users", int(d_true), int(n_users))
    item_labels, item_w, B = _sample_side(rng, hyper, "items", int(k_true), int(n_items))
    total = n_users * n_items
    m = int(round(density * total))
    cells = rng.choice(total, size=m, replace=False)
    cells.sort()
    uu = cells // n_items
    ii = cells % n_items
    clean = np.einsum("el,el->e", A[uu], B[ii])
    vals = clean + rng.normal(0.0, np.sqrt(hyper.sigma2), size=m)
    ratings = SparseRatings(n_users, n_items, uu, ii, vals)
    truth = GroundTruth(user_labels, item_labels, user_w, item_w, A, B)
    return ratings, truth


def check_finite(value, tag):
    """Raise :class:`NonFiniteError` tagged with the offending term."""
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(f"non-finite value in {tag}")
    return value
