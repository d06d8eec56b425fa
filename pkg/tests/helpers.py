"""Shared numerical oracles for the test suite.

Everything here is deliberately independent of the implementation paths
it checks: integrals are evaluated by quadrature and derivatives by
central differences.
"""

import numpy as np

from qspace_asr.sh import SHCoefficients, eval_sh_basis


def gauss_legendre_sphere(n_theta: int = 48, n_phi: int = 96):
    """Product quadrature on S^2: Gauss-Legendre in cos(theta), uniform phi.

    Exact for spherical polynomials of degree <= min(2*n_theta-1, n_phi-1).
    Returns (dirs (M, 3), weights (M,)) with weights summing to 4*pi.
    """
    x, w = np.polynomial.legendre.leggauss(n_theta)
    theta = np.arccos(x)
    phi = np.arange(n_phi) * 2 * np.pi / n_phi
    T, P = np.meshgrid(theta, phi, indexing="ij")
    W = np.repeat(w[:, None], n_phi, axis=1) * (2 * np.pi / n_phi)
    dirs = np.stack([np.sin(T) * np.cos(P), np.sin(T) * np.sin(P), np.cos(T)],
                    axis=-1)
    return dirs.reshape(-1, 3), W.reshape(-1)


def _dirs_from_angles(theta, phi):
    st = np.sin(theta)
    return np.stack([st * np.cos(phi), st * np.sin(phi), np.cos(theta)], axis=-1)


def synth_on_angles(coeffs: SHCoefficients, theta, phi) -> np.ndarray:
    dirs = _dirs_from_angles(theta, phi)
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    basis = eval_sh_basis(dirs.reshape(-1, 3), coeffs.order)
    return (basis.values @ coeffs.coeffs).reshape(np.shape(theta))


def quadrature_gradient_energy(coeffs: SHCoefficients, n_theta: int = 64,
                               n_phi: int = 128, h: float = 1e-6) -> float:
    """1/2 * integral of |grad_S2 f|^2 by quadrature + central differences.

    The tangent gradient in spherical coordinates is
    (df/dtheta, df/dphi / sin(theta)); Gauss-Legendre nodes avoid the poles.
    """
    x, w = np.polynomial.legendre.leggauss(n_theta)
    theta = np.arccos(x)
    phi = np.arange(n_phi) * 2 * np.pi / n_phi
    T, P = np.meshgrid(theta, phi, indexing="ij")
    W = np.repeat(w[:, None], n_phi, axis=1) * (2 * np.pi / n_phi)
    df_dt = (synth_on_angles(coeffs, T + h, P) -
             synth_on_angles(coeffs, T - h, P)) / (2 * h)
    df_dp = (synth_on_angles(coeffs, T, P + h) -
             synth_on_angles(coeffs, T, P - h)) / (2 * h)
    integrand = df_dt**2 + (df_dp / np.sin(T)) ** 2
    return float(0.5 * (integrand * W).sum())


def quadrature_l2(coeffs_a: SHCoefficients, coeffs_b: SHCoefficients,
                  n_theta: int = 48, n_phi: int = 96) -> float:
    """Integral of (f_a - f_b)^2 over the sphere by exact quadrature."""
    dirs, w = gauss_legendre_sphere(n_theta, n_phi)
    fa = eval_sh_basis(dirs, coeffs_a.order).values @ coeffs_a.coeffs
    fb = eval_sh_basis(dirs, coeffs_b.order).values @ coeffs_b.coeffs
    return float(((fa - fb) ** 2 * w).sum())
