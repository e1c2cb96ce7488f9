"""Dense small-matrix kernels.

Provides the matrix exponential (scaling-and-squaring with a fixed
degree-13 diagonal rational approximant), its directional (Frechet)
derivative via the block-augmented exponential, and the stabilized
hold integral ``phi1(a, d) = (exp(a*d) - 1)/a``.

All routines operate on float64 ndarrays and accept an arbitrary number
of leading batch axes on the matrix arguments; the batch path shares one
scaling exponent (the per-batch maximum), which only adds squarings and
never costs accuracy.
"""

import numpy as np


class DimensionError(ValueError):
    """Operands have incompatible or non-square shapes."""


class DomainError(ValueError):
    """Input contains non-finite entries or lies outside the valid domain."""


# Degree-13 diagonal rational approximant coefficients and its 1-norm
# switching radius. With ||A||_1 <= theta13 the approximant is accurate
# to double-precision roundoff; larger inputs are halved s times first.
_B13 = (
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
)
_THETA13 = 5.371920351148152


def _as_square(M, name):
    M = np.asarray(M, dtype=float)
    if M.ndim < 2 or M.shape[-1] != M.shape[-2]:
        raise DimensionError(f"{name} must be square, got shape {M.shape}")
    if not np.all(np.isfinite(M)):
        raise DomainError(f"{name} contains non-finite entries")
    return M


def matrix_exp(M):
    """exp(M) for square M, batched over leading axes.

    Scaling and squaring: halve M until its 1-norm is below the degree-13
    switching radius, evaluate the rational approximant, then square back.
    exp(0) is the identity exactly.
    """
    M = _as_square(M, "matrix_exp input")
    n = M.shape[-1]
    norm1 = np.abs(M).sum(axis=-2).max(axis=-1) if M.size else 0.0
    top = float(np.max(norm1)) if np.ndim(norm1) else float(norm1)
    if top == 0.0:
        # exp(0) is the identity exactly; keeps the zero-coupling step
        # bit-identical to the plain diagonal hold step
        return np.broadcast_to(np.eye(n), M.shape).copy()
    s = 0 if top <= _THETA13 else int(np.ceil(np.log2(top / _THETA13)))
    A = M / (2.0**s) if s else M

    eye = np.broadcast_to(np.eye(n), A.shape)
    A2 = A @ A
    A4 = A2 @ A2
    A6 = A4 @ A2
    b = _B13
    U = A @ (
        A6 @ (b[13] * A6 + b[11] * A4 + b[9] * A2)
        + b[7] * A6
        + b[5] * A4
        + b[3] * A2
        + b[1] * eye
    )
    V = (
        A6 @ (b[12] * A6 + b[10] * A4 + b[8] * A2)
        + b[6] * A6
        + b[4] * A4
        + b[2] * A2
        + b[0] * eye
    )
    E = np.linalg.solve(V - U, V + U)
    for _ in range(s):
        E = E @ E
    return E


def matrix_exp_frechet(M, E):
    """Return (exp(M), L(M, E)) with L the directional derivative of exp.

    Uses the block identity  exp([[M, E], [0, M]]) = [[exp(M), L(M,E)],
    [0, exp(M)]], so the derivative is exact for the same approximant that
    produced exp(M). Batched over leading axes of M/E jointly.
    """
    M = _as_square(M, "matrix_exp_frechet M")
    E = _as_square(E, "matrix_exp_frechet E")
    if M.shape != E.shape:
        raise DimensionError(
            f"direction shape {E.shape} does not match matrix shape {M.shape}"
        )
    n = M.shape[-1]
    blk = np.zeros(M.shape[:-2] + (2 * n, 2 * n))
    blk[..., :n, :n] = M
    blk[..., :n, n:] = E
    blk[..., n:, n:] = M
    W = matrix_exp(blk)
    return W[..., :n, :n], W[..., :n, n:]


# Below |a*d| < _PHI1_SMALL the series for phi1 and its a-partial is exact
# to double precision with the retained terms; above it the closed forms
# are free of cancellation thanks to expm1.
_PHI1_SMALL = 1e-4


def phi1(a, delta):
    """Elementwise (exp(a*delta) - 1)/a with the continuous limit delta at a=0.

    Built on expm1 so there is no cancellation as a -> 0. Total on finite
    inputs; broadcasts like a normal binary ufunc.
    """
    a = np.asarray(a, dtype=float)
    delta = np.asarray(delta, dtype=float)
    x = a * delta
    safe_a = np.where(a == 0.0, 1.0, a)
    return np.where(a == 0.0, delta, np.expm1(x) / safe_a)


def phi1_partials(a, delta):
    """Partials (d phi1/d a, d phi1/d delta), elementwise.

    d/d delta = exp(a*delta) exactly; d/d a uses the series
    d^2/2 + a d^3/3 + a^2 d^4/8 near a*delta = 0 to avoid cancellation in
    (delta*exp(a*delta) - phi1)/a.
    """
    a = np.asarray(a, dtype=float)
    delta = np.asarray(delta, dtype=float)
    x = a * delta
    d_delta = np.exp(x)
    small = np.abs(x) < _PHI1_SMALL
    safe_a = np.where(small, 1.0, a)
    series = delta**2 / 2.0 + a * delta**3 / 3.0 + (a * delta**2) ** 2 / 8.0
    exact = (delta * np.exp(x) - phi1(a, delta)) / safe_a
    d_a = np.where(small, series, exact)
    return d_a, d_delta
