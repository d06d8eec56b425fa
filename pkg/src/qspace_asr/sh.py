"""Real even-order spherical harmonics on the unit sphere.

Basis evaluation, regularized least-squares coefficient fitting,
Laplace-Beltrami machinery (eigenvalue application, gradient-energy
penalty, heat-kernel smoothing) and numerically optimized equal-weight
quadrature designs.

Convention: real symmetric basis, even degrees only (the diffusion
signal is antipodally symmetric), orthonormal on S^2. Indexing is
ascending degree l, then ascending order m within each degree.
"""

from __future__ import annotations

from dataclasses import dataclass
from importlib import resources

import numpy as np

INV_TWO_SQRT_PI = 0.28209479177387814  # Y_00 = 1 / (2 sqrt(pi))


class SHError(ValueError):
    pass


class SHFitError(SHError):
    """Raised when the normal matrix of a coefficient fit is singular."""


@dataclass(frozen=True)
class SHIndexTable:
    """Deterministic (l, m) enumeration for a maximum even degree."""

    order: int
    entries: tuple[tuple[int, int], ...]

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def degrees(self) -> np.ndarray:
        return np.array([l for l, _ in self.entries])

    @property
    def orders(self) -> np.ndarray:
        return np.array([m for _, m in self.entries])

    def eigenvalues(self) -> np.ndarray:
        """Laplace-Beltrami eigenvalues -l(l+1), one per entry."""
        l = self.degrees
        return -(l * (l + 1)).astype(float)


@dataclass(frozen=True)
class SHBasis:
    """Basis matrix: rows = directions, columns = (l, m) entries."""

    values: np.ndarray
    order: int
    directions: np.ndarray

    @property
    def n_directions(self) -> int:
        return self.values.shape[0]

    @property
    def n_coeffs(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class SHCoefficients:
    """Coefficient vector(s); trailing axis indexed by sh_index_table(order)."""

    coeffs: np.ndarray
    order: int

    def __post_init__(self):
        n = n_coeffs(self.order)
        if self.coeffs.shape[-1] != n:
            raise SHError(
                f"coefficient axis has length {self.coeffs.shape[-1]}, "
                f"order {self.order} needs {n}"
            )
        if not np.all(np.isfinite(self.coeffs)):
            raise SHError("non-finite coefficients")


def n_coeffs(order: int) -> int:
    """Number of even-degree (l, m) pairs up to `order`: (L+1)(L+2)/2."""
    return (order + 1) * (order + 2) // 2


def max_even_order(n_directions: int, cap: int | None = 8) -> int:
    """Largest even order whose coefficient count fits `n_directions`."""
    order = 0
    while n_coeffs(order + 2) <= n_directions:
        order += 2
    if cap is not None:
        order = min(order, cap)
    return order


def sh_index_table(order: int) -> SHIndexTable:
    if order < 0 or order % 2 != 0:
        raise SHError(f"order must be even and non-negative, got {order}")
    entries = tuple((l, m) for l in range(0, order + 1, 2) for m in range(-l, l + 1))
    assert len(entries) == n_coeffs(order)
    return SHIndexTable(order=order, entries=entries)


def _normalized_legendre(order: int, x: np.ndarray) -> np.ndarray:
    """Associated Legendre functions P[l, m] with spherical normalization.

    Normalized so that the real basis assembled in `_basis_from_angles`
    is orthonormal on S^2; P[0, 0] = 1/(2 sqrt(pi)). Standard three-term
    recurrences, stable in double precision for the small orders used here.
    """
    x = np.asarray(x, dtype=np.float64)
    s = np.sqrt(np.clip(1.0 - x * x, 0.0, None))
    p = np.zeros((order + 1, order + 1) + x.shape)
    p[0, 0] = INV_TWO_SQRT_PI
    for m in range(1, order + 1):
        p[m, m] = np.sqrt((2 * m + 1) / (2.0 * m)) * s * p[m - 1, m - 1]
    for m in range(0, order):
        p[m + 1, m] = np.sqrt(2 * m + 3.0) * x * p[m, m]
    for m in range(0, order + 1):
        for l in range(m + 2, order + 1):
            a = np.sqrt((4.0 * l * l - 1.0) / (l * l - m * m))
            b = np.sqrt(((l - 1.0) ** 2 - m * m) / (4.0 * (l - 1.0) ** 2 - 1.0))
            p[l, m] = a * (x * p[l - 1, m] - b * p[l - 2, m])
    return p


def _basis_from_angles(theta: np.ndarray, phi: np.ndarray, order: int) -> np.ndarray:
    """Even-degree real SH basis evaluated at spherical angles."""
    table = sh_index_table(order)
    p = _normalized_legendre(order, np.cos(theta))
    cols = np.empty(theta.shape + (len(table),))
    sqrt2 = np.sqrt(2.0)
    for j, (l, m) in enumerate(table.entries):
        if m == 0:
            cols[..., j] = p[l, 0]
        elif m > 0:
            cols[..., j] = sqrt2 * p[l, m] * np.cos(m * phi)
        else:
            cols[..., j] = sqrt2 * p[l, -m] * np.sin(-m * phi)
    return cols


def dirs_to_angles(dirs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Polar angle theta = arccos(z) in [0, pi], azimuth phi = atan2(y, x)."""
    dirs = np.asarray(dirs, dtype=np.float64)
    theta = np.arccos(np.clip(dirs[..., 2], -1.0, 1.0))
    phi = np.arctan2(dirs[..., 1], dirs[..., 0])
    return theta, phi


def eval_sh_basis(dirs: np.ndarray, order: int) -> SHBasis:
    """Evaluate the even-degree orthonormal real SH basis at unit directions.

    dirs: (N, 3) unit vectors. Rows for u and -u are identical since only
    even degrees are present.
    """
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    if dirs.ndim != 2 or dirs.shape[1] != 3:
        raise SHError(f"directions must be (N, 3), got {dirs.shape}")
    norms = np.linalg.norm(dirs, axis=1)
    bad = np.abs(norms - 1.0) > 1e-9
    if np.any(bad):
        raise SHError(
            f"{bad.sum()} direction(s) are not unit length "
            f"(worst |norm-1| = {np.abs(norms - 1.0).max():.3e})"
        )
    theta, phi = dirs_to_angles(dirs)
    return SHBasis(values=_basis_from_angles(theta, phi, order), order=order,
                   directions=dirs)


def regularizer_diagonal(order: int) -> np.ndarray:
    """Diagonal of the quadratic high-frequency penalty: l(l+1) per entry."""
    return -sh_index_table(order).eigenvalues()


def fit_operator(basis: SHBasis, lambda_reg: float = 0.0) -> np.ndarray:
    """Closed-form fitting matrix A with coeffs = signal @ A.T.

    Solves argmin_c ||Y c - s||^2 + lambda * sum l(l+1) c^2, i.e.
    A = (Y^T Y + lambda * diag(l(l+1)))^-1 Y^T.
    """
    if lambda_reg < 0:
        raise SHError("lambda_reg must be non-negative")
    y = basis.values
    n_dirs, n_c = y.shape
    normal = y.T @ y + lambda_reg * np.diag(regularizer_diagonal(basis.order))
    if lambda_reg == 0.0 and n_dirs < n_c:
        raise SHFitError(
            f"unregularized order-{basis.order} fit needs at least {n_c} "
            f"directions, got {n_dirs}"
        )
    if np.linalg.cond(normal) > 1e12:
        raise SHFitError(
            f"singular normal matrix for order {basis.order} with {n_dirs} "
            f"directions (need >= {n_c} well-spread directions, or lambda_reg > 0)"
        )
    return np.linalg.solve(normal, y.T)


def fit_sh(signal: np.ndarray, basis: SHBasis, lambda_reg: float = 0.0) -> SHCoefficients:
    """Least-squares SH coefficients of per-direction signal values.

    signal: (..., N) with N matching the basis rows; batched along leading axes.
    """
    signal = np.asarray(signal, dtype=np.float64)
    if signal.shape[-1] != basis.n_directions:
        raise SHError(
            f"signal has {signal.shape[-1]} directions, basis has {basis.n_directions}"
        )
    a = fit_operator(basis, lambda_reg)
    return SHCoefficients(coeffs=signal @ a.T, order=basis.order)


def synth_from_sh(coeffs: SHCoefficients, basis: SHBasis) -> np.ndarray:
    """Project coefficients back to per-direction values: Y c."""
    if coeffs.coeffs.shape[-1] != basis.n_coeffs:
        raise SHError(
            f"{coeffs.coeffs.shape[-1]} coefficients vs basis with "
            f"{basis.n_coeffs} columns"
        )
    return coeffs.coeffs @ basis.values.T


def laplace_beltrami_apply(coeffs: SHCoefficients) -> SHCoefficients:
    """Apply the spherical Laplacian: scale each entry by -l(l+1)."""
    eig = sh_index_table(coeffs.order).eigenvalues()
    return SHCoefficients(coeffs=coeffs.coeffs * eig, order=coeffs.order)


def smoothness_energy(coeffs: SHCoefficients) -> np.ndarray:
    """Gradient energy on the sphere: 1/2 sum l(l+1) c_lm^2.

    Equals 1/2 * integral of |grad f|^2 over S^2 for the synthesized signal.
    Batched coefficients reduce over the trailing axis.
    """
    lam = regularizer_diagonal(coeffs.order)
    return 0.5 * np.sum(lam * coeffs.coeffs**2, axis=-1)


def heat_smooth(coeffs: SHCoefficients, tau: float) -> SHCoefficients:
    """Heat-kernel smoothing: c_lm -> exp(-l(l+1) tau) c_lm."""
    if tau < 0:
        raise SHError(f"tau must be non-negative, got {tau}")
    lam = regularizer_diagonal(coeffs.order)
    return SHCoefficients(coeffs=coeffs.coeffs * np.exp(-lam * tau), order=coeffs.order)


# ---------------------------------------------------------------------------
# Equal-weight quadrature designs
# ---------------------------------------------------------------------------

def design_residual(points: np.ndarray, strength: int) -> float:
    """Worst deviation of (4pi/N) Y^T Y from identity over the order strength/2 basis.

    Basis products reach degree `strength`, so this is zero exactly when the
    point set is an equal-weight design of that strength.
    """
    basis = eval_sh_basis(points, strength // 2)
    g = (4.0 * np.pi / points.shape[0]) * basis.values.T @ basis.values
    return float(np.abs(g - np.eye(g.shape[0])).max())


def build_spherical_design(n_points: int, strength: int, seed: int = 0,
                           max_iter: int = 4000) -> np.ndarray:
    """Numerically optimize an antipodal equal-weight quadrature design.

    Minimizes the sum over even degrees 2..strength of squared basis-column
    means (all vanish exactly for a design of that strength); odd degrees
    vanish by the built-in antipodal symmetry. Returns (n_points, 3) unit
    vectors, deterministic in `seed`.
    """
    from scipy.optimize import minimize

    if n_points % 2 != 0:
        raise SHError("n_points must be even (antipodal pairs)")
    if strength % 2 != 0:
        raise SHError("strength must be even")
    half = n_points // 2
    rng = np.random.default_rng(seed)
    u = rng.standard_normal((half, 3))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    theta, phi = dirs_to_angles(u)
    x0 = np.concatenate([theta, phi])
    h = 1e-6

    def col_means(th, ph):
        cols = _basis_from_angles(th, ph, strength)
        return cols[:, 1:].mean(axis=0)  # drop the constant column

    def objective_and_grad(x):
        th, ph = x[:half], x[half:]
        s = col_means(th, ph)
        val = float(s @ s)
        # d s_j / d th_i = (dY_j(x_i)/dth) / half, via central differences.
        yp = _basis_from_angles(th + h, ph, strength)[:, 1:]
        ym = _basis_from_angles(th - h, ph, strength)[:, 1:]
        g_th = ((yp - ym) / (2 * h)) @ s * (2.0 / half)
        yp = _basis_from_angles(th, ph + h, strength)[:, 1:]
        ym = _basis_from_angles(th, ph - h, strength)[:, 1:]
        g_ph = ((yp - ym) / (2 * h)) @ s * (2.0 / half)
        return val, np.concatenate([g_th, g_ph])

    res = minimize(objective_and_grad, x0, jac=True, method="L-BFGS-B",
                   options={"maxiter": max_iter, "ftol": 0.0, "gtol": 1e-14})
    th, ph = res.x[:half], res.x[half:]
    st = np.sin(th)
    pts = np.stack([st * np.cos(ph), st * np.sin(ph), np.cos(th)], axis=1)
    return np.concatenate([pts, -pts], axis=0)


def quadrature_design(n_points: int = 240) -> np.ndarray:
    """Packaged equal-weight spherical design (strength 16, antipodal)."""
    ref = resources.files("qspace_asr.data").joinpath(f"design{n_points}.npy")
    with resources.as_file(ref) as path:
        return np.load(path)
