"""Independent reference implementations used to check the package.

Everything here is written from the model equations directly, with plain
loops and no imports from the package's inference modules, so agreement is
meaningful.
"""

import numpy as np


def naive_rmse(predictions, values):
    """Two-pass textbook RMSE."""
    total = 0.0
    for p, v in zip(predictions, values):
        total += (p - v) ** 2
    return (total / len(values)) ** 0.5


def purity(hard_labels, true_labels):
    """Cluster purity: majority-true-label mass of each hard cluster."""
    hard_labels = np.asarray(hard_labels)
    true_labels = np.asarray(true_labels)
    correct = 0
    for c in np.unique(hard_labels):
        sel = true_labels[hard_labels == c]
        correct += np.bincount(sel).max()
    return correct / len(true_labels)


def factor_posterior_by_solve(prior_prec, prior_lin, others_second, others_mean,
                              values, sigma2):
    """Quadratic-form oracle for one factor update: accumulate the precision
    and linear term explicitly and solve."""
    L = prior_prec.shape[0]
    prec = prior_prec.copy()
    lin = prior_lin.copy()
    for s, m, r in zip(others_second, others_mean, values):
        prec = prec + s / sigma2
        lin = lin + r * m / sigma2
    cov = np.linalg.inv(prec)
    mean = np.linalg.solve(prec, lin)
    return mean, cov + np.outer(mean, mean)


class SingleCommunityVB:
    """Stand-alone variational fit of the one-community, one-group model.

    Mirrors the degenerate configuration with explicit per-entity loops:
    Gaussian factor updates against a single Gaussian prior per side whose
    (mean, covariance) posterior is refreshed from the factor moments.
    """

    def __init__(self, n_users, n_items, L, hyper, seed):
        self.L = L
        self.lam = hyper.lambda0
        self.mu0 = hyper.mu0.copy()
        self.nu0 = hyper.nu0.copy()
        self.w0 = hyper.w0.copy()
        self.iota0 = hyper.iota0
        self.sigma2 = hyper.sigma2
        rng = np.random.Generator(np.random.Philox(seed))
        self.a_mean = rng.normal(0.0, np.sqrt(0.1), size=(n_users, L))
        self.a_second = np.array([np.outer(m, m) + 0.1 * np.eye(L)
                                  for m in self.a_mean])
        self.b_mean = rng.normal(0.0, np.sqrt(0.1), size=(n_items, L))
        self.b_second = np.array([np.outer(m, m) + 0.1 * np.eye(L)
                                  for m in self.b_mean])
        self.u_comm = self._prior_community(self.mu0)
        self.i_comm = self._prior_community(self.nu0)

    def _prior_community(self, base):
        W = self.w0.copy()
        iota = self.iota0
        prec = iota * np.linalg.inv(W)
        mean_cov = W / iota
        return {"mean": base.copy(), "outer": mean_cov + np.outer(base, base),
                "W": W, "iota": iota, "prec": prec}

    def _update_factors(self, adjacency, comm, my_mean, my_second,
                        other_mean, other_second):
        for i, (idx, vals) in enumerate(adjacency):
            prec = comm["prec"].copy()
            lin = comm["prec"] @ comm["mean"]
            for j, r in zip(idx, vals):
                prec = prec + other_second[j] / self.sigma2
                lin = lin + r * other_mean[j] / self.sigma2
            cov = np.linalg.inv(prec)
            cov = 0.5 * (cov + cov.T)
            mean = cov @ lin
            my_mean[i] = mean
            my_second[i] = cov + np.outer(mean, mean)

    def _update_community(self, comm, base, means, seconds):
        n = len(means)
        s1 = means.sum(axis=0)
        m_new = (self.lam * s1 + base) / (self.lam + n)
        V = (self.lam / (self.lam + n)) * comm["W"] / comm["iota"]
        outer_new = V + np.outer(m_new, m_new)
        W = self.w0.copy()
        for i in range(n):
            W = W + (seconds[i] - np.outer(m_new, means[i])
                     - np.outer(means[i], m_new) + outer_new)
        W = W + (outer_new - np.outer(base, m_new) - np.outer(m_new, base)
                 + np.outer(base, base)) / self.lam
        W = 0.5 * (W + W.T)
        iota = self.iota0 + n
        comm.update({"mean": m_new, "outer": outer_new, "W": W, "iota": iota,
                     "prec": iota * np.linalg.inv(W)})

    def sweep(self, user_adjacency, item_adjacency):
        self._update_factors(user_adjacency, self.u_comm, self.a_mean,
                             self.a_second, self.b_mean, self.b_second)
        self._update_community(self.u_comm, self.mu0, self.a_mean, self.a_second)
        self._update_factors(item_adjacency, self.i_comm, self.b_mean,
                             self.b_second, self.a_mean, self.a_second)
        self._update_community(self.i_comm, self.nu0, self.b_mean, self.b_second)

    def predict(self, users, items):
        return np.array([self.a_mean[u] @ self.b_mean[i]
                         for u, i in zip(users, items)])


def adjacency_lists(ratings, side):
    """Per-entity (indices, values) lists from a rating snapshot."""
    n = ratings.n_users if side == "users" else ratings.n_items
    out = []
    for e in range(n):
        if side == "users":
            idx, vals = ratings.items_of(e)
        else:
            idx, vals = ratings.users_of(e)
        out.append((idx, vals))
    return out


def scalar_fixed_point(r, hyper, sweeps=50):
    """Scalar (L=1, one user, one item, one rating) coordinate iteration of
    the printed update formulas, all plain floats."""
    lam = hyper.lambda0
    mu0 = float(hyper.mu0[0])
    nu0 = float(hyper.nu0[0])
    w0 = float(hyper.w0[0, 0])
    iota0 = hyper.iota0
    s2 = hyper.sigma2
    rng = np.random.Generator(np.random.Philox(0))
    a = rng.normal(0.0, np.sqrt(0.1))
    a2 = a * a + 0.1
    b = rng.normal(0.0, np.sqrt(0.1))
    b2 = b * b + 0.1
    u = {"m": mu0, "o": w0 / iota0 + mu0 ** 2, "w": w0, "iota": iota0}
    v = {"m": nu0, "o": w0 / iota0 + nu0 ** 2, "w": w0, "iota": iota0}

    def community(comm, base, m, m2):
        mn = (lam * m + base) / (lam + 1.0)
        var = (lam / (lam + 1.0)) * comm["w"] / comm["iota"]
        on = var + mn * mn
        w = (m2 - 2.0 * mn * m + on) + (on - 2.0 * base * mn + base ** 2) / lam + w0
        comm.update({"m": mn, "o": on, "w": w, "iota": iota0 + 1.0})

    for _ in range(sweeps):
        prec = u["iota"] / u["w"] + b2 / s2
        a = (u["iota"] / u["w"] * u["m"] + r * b / s2) / prec
        a2 = 1.0 / prec + a * a
        community(u, mu0, a, a2)
        prec = v["iota"] / v["w"] + a2 / s2
        b = (v["iota"] / v["w"] * v["m"] + r * a / s2) / prec
        b2 = 1.0 / prec + b * b
        community(v, nu0, b, b2)
    return {"a": a, "a2": a2, "b": b, "b2": b2, "user_comm": u, "item_comm": v}


def central_difference(f, x, h):
    return (f(x + h) - f(x - h)) / (2.0 * h)
