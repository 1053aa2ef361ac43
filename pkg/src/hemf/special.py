"""Special functions and positive-definite matrix primitives.

Everything here is pure and reentrant; inputs are never mutated.
"""

import numpy as np

from .errors import NotPositiveDefiniteError

# psi(x) for x >= _ASYMPTOTIC_CUTOFF is evaluated by the asymptotic series;
# smaller arguments are shifted up by the recurrence psi(x) = psi(x+1) - 1/x.
_ASYMPTOTIC_CUTOFF = 10.0

# Coefficients of the asymptotic expansion
#   psi(x) ~ ln x - 1/(2x) - sum_n c_n / x^(2n),
# i.e. B_{2n}/(2n) for n = 1..7.  Truncation error at x = 10 is ~4e-17.
_ASYMPTOTIC_COEFFS = (
    1.0 / 12.0,
    -1.0 / 120.0,
    1.0 / 252.0,
    -1.0 / 240.0,
    1.0 / 132.0,
    -691.0 / 32760.0,
    1.0 / 12.0,
)


def digamma(x):
    """Digamma function psi(x) = d/dx ln Gamma(x).

    Parameters
    ----------
    x : float or array_like
        Strictly positive argument(s).

    Returns
    -------
    float or ndarray
        psi evaluated elementwise; scalar input gives a scalar.

    Raises
    ------
    ValueError
        If any element of ``x`` is <= 0.
    """
    arr = np.asarray(x, dtype=float)
    if arr.size and np.any(arr <= 0.0):
        raise ValueError("digamma is only defined for x > 0")
    scalar = arr.ndim == 0
    z = np.atleast_1d(arr).copy()

    # Upward recurrence: accumulate -1/z while z is below the cutoff.
    acc = np.zeros_like(z)
    below = z < _ASYMPTOTIC_CUTOFF
    while np.any(below):
        acc[below] -= 1.0 / z[below]
        z[below] += 1.0
        below = z < _ASYMPTOTIC_CUTOFF

    inv2 = 1.0 / (z * z)
    series = np.zeros_like(z)
    power = np.ones_like(z)
    for c in _ASYMPTOTIC_COEFFS:
        power *= inv2
        series += c * power
    out = acc + np.log(z) - 0.5 / z - series
    return float(out[0]) if scalar else out.reshape(arr.shape)


def multivariate_digamma(x, p):
    """Multivariate digamma psi_p(x) = sum_{i=1..p} psi(x + (1-i)/2).

    Parameters
    ----------
    x : float
        Argument; must satisfy ``x > (p - 1) / 2``.
    p : int
        Dimension, a positive integer.

    Raises
    ------
    ValueError
        If ``p < 1`` or ``x`` is outside the domain.
    """
    p = int(p)
    if p < 1:
        raise ValueError("dimension p must be a positive integer")
    if not x > (p - 1) / 2.0:
        raise ValueError(f"multivariate digamma requires x > (p-1)/2 = {(p - 1) / 2.0}")
    offsets = 0.5 * (1.0 - np.arange(1, p + 1, dtype=float))
    return float(np.sum(digamma(x + offsets)))


def _check_symmetric(m, tol=1e-12):
    m = np.asarray(m, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {m.shape}")
    scale = max(1.0, float(np.max(np.abs(m))))
    if np.max(np.abs(m - m.T)) > tol * scale:
        raise ValueError("matrix is not symmetric within tolerance")
    return m


def pd_inverse_logdet(m):
    """Inverse and log-determinant of a symmetric positive-definite matrix.

    Parameters
    ----------
    m : ndarray, shape (n, n)
        Symmetric positive-definite matrix.

    Returns
    -------
    inv : ndarray, shape (n, n)
        Symmetric inverse of ``m``.
    logdet : float
        ``ln |m|``.

    Raises
    ------
    NotPositiveDefiniteError
        If the Cholesky factorization fails.  No regularization is applied;
        callers own any jitter policy.
    """
    m = _check_symmetric(m)
    try:
        chol = np.linalg.cholesky(m)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefiniteError(
            f"Cholesky factorization failed for a {m.shape[0]}x{m.shape[0]} matrix"
        ) from exc
    logdet = 2.0 * float(np.sum(np.log(np.diagonal(chol))))
    inv = np.linalg.inv(m)
    inv = 0.5 * (inv + inv.T)
    return inv, logdet


def pd_logdet_stack(ms):
    """Log-determinants of a stack of SPD matrices, shape (..., n, n).

    Raises :class:`NotPositiveDefiniteError` if any slice fails to factor.
    """
    try:
        chols = np.linalg.cholesky(ms)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefiniteError("a matrix in the stack is not positive definite") from exc
    return 2.0 * np.sum(np.log(np.diagonal(chols, axis1=-2, axis2=-1)), axis=-1)


def pd_inverse_stack(ms):
    """Inverses of a stack of SPD matrices, PD-checked via Cholesky."""
    try:
        np.linalg.cholesky(ms)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefiniteError("a matrix in the stack is not positive definite") from exc
    inv = np.linalg.inv(ms)
    return 0.5 * (inv + np.swapaxes(inv, -1, -2))
