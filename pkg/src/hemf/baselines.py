"""Comparison systems: streaming SGD matrix factorization and the
single-community degenerate configuration of the main model."""

from dataclasses import dataclass, field

import numpy as np

from .batch import FitConfig, fit_batch
from .errors import DivergenceError
from .model import INIT_FACTOR_VARIANCE, make_rng

DIVERGENCE_GUARD = 1e6


@dataclass
class SgdModel:
    """Point-estimate factor matrices trained by per-entry gradient steps.

    The step size decays as ``lr0 / (1 + decay * t)`` where ``t`` counts
    processed entries.  New entities are initialized from a seeded Gaussian
    with variance 0.1.
    """

    user_factors: np.ndarray
    item_factors: np.ndarray
    lr0: float = 0.01
    decay: float = 1e-4
    reg: float = 0.02
    steps: int = 0
    seed: int = 0
    _rng: object = field(default=None, repr=False)

    def __post_init__(self):
        self.user_factors = np.asarray(self.user_factors, dtype=float)
        self.item_factors = np.asarray(self.item_factors, dtype=float)
        if self.lr0 < 0 or self.decay < 0 or self.reg < 0:
            raise ValueError("lr0, decay and reg must be non-negative")
        if self._rng is None:
            self._rng = make_rng(self.seed)

    @classmethod
    def init(cls, n_users, n_items, latent_dim, seed=0, **kw):
        rng = make_rng(seed)
        scale = np.sqrt(INIT_FACTOR_VARIANCE)
        return cls(user_factors=rng.normal(0.0, scale, (n_users, latent_dim)),
                   item_factors=rng.normal(0.0, scale, (n_items, latent_dim)),
                   seed=seed, _rng=rng, **kw)

    def copy(self):
        clone = SgdModel(self.user_factors.copy(), self.item_factors.copy(),
                         lr0=self.lr0, decay=self.decay, reg=self.reg,
                         steps=self.steps, seed=self.seed, _rng=self._rng)
        return clone

    def predict(self, users, items, clamp=None):
        out = np.einsum("el,el->e",
                        self.user_factors[np.asarray(users, dtype=np.int64)],
                        self.item_factors[np.asarray(items, dtype=np.int64)])
        if clamp is not None:
            out = np.clip(out, clamp[0], clamp[1])
        return out

    def _grow(self, n_users, n_items):
        scale = np.sqrt(INIT_FACTOR_VARIANCE)
        if n_users > len(self.user_factors):
            extra = self._rng.normal(0.0, scale,
                                     (n_users - len(self.user_factors),
                                      self.user_factors.shape[1]))
            self.user_factors = np.vstack([self.user_factors, extra])
        if n_items > len(self.item_factors):
            extra = self._rng.normal(0.0, scale,
                                     (n_items - len(self.item_factors),
                                      self.item_factors.shape[1]))
            self.item_factors = np.vstack([self.item_factors, extra])


def sgd_process_chunk(chunk, model):
    """One pass of per-entry gradient steps over a chunk.

    Both touched factor vectors step simultaneously from their pre-step
    values.  Raises :class:`DivergenceError` if a factor norm passes the
    guard.
    """
    out = model.copy()
    if len(chunk):
        out._grow(int(chunk.users.max()) + 1, int(chunk.items.max()) + 1)
    for u, i, r in zip(chunk.users, chunk.items, chunk.values):
        lr = out.lr0 / (1.0 + out.decay * out.steps)
        a = out.user_factors[u]
        b = out.item_factors[i]
        err = r - a @ b
        out.user_factors[u] = a + lr * (err * b - out.reg * a)
        out.item_factors[i] = b + lr * (err * a - out.reg * b)
        out.steps += 1
        if (np.linalg.norm(out.user_factors[u]) > DIVERGENCE_GUARD
                or np.linalg.norm(out.item_factors[i]) > DIVERGENCE_GUARD):
            raise DivergenceError(
                f"factor norm exceeded {DIVERGENCE_GUARD:g} at entry "
                f"({u}, {i})", entity=(int(u), int(i)))
    return out


def fit_sgd(ratings, latent_dim, epochs=10, seed=0, shuffle=True, **kw):
    """Train an :class:`SgdModel` with repeated passes over a snapshot."""
    from .online import RatingChunk

    model = SgdModel.init(ratings.n_users, ratings.n_items, latent_dim,
                          seed=seed, **kw)
    rng = make_rng(seed + 1)
    order = np.arange(len(ratings))
    for _ in range(int(epochs)):
        if shuffle:
            rng.shuffle(order)
        chunk = RatingChunk(ratings.users[order], ratings.items[order],
                            ratings.values[order])
        model = sgd_process_chunk(chunk, model)
    return model


def fit_bpmf(ratings, hyper, config=None):
    """Degenerate single-community fit: one user community, one item group.

    This is exactly :func:`hemf.batch.fit_batch` with both component counts
    pinned to one (batch inference never spawns or merges), so memberships
    stay at [1.0] throughout.
    """
    config = config or FitConfig()
    cfg = FitConfig(d_init=1, k_init=1, seed=config.seed,
                    max_sweeps=config.max_sweeps, tol=config.tol,
                    community_update=config.community_update,
                    evb=config.evb, evb_every=config.evb_every,
                    first_side=config.first_side, on_sweep=config.on_sweep)
    return fit_batch(ratings, hyper, cfg)
