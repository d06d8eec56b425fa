"""Synthetic ground truth for angular super-resolution experiments.

Multi-tensor diffusion signal slices, electrostatically spread gradient
schemes, angular subset selection and Rician noise. Stands in for real
acquisitions: every generator is a pure function of its seed.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np


class PhantomError(ValueError):
    pass


@dataclass(frozen=True)
class GradientTable:
    """Per-direction b-values (s/mm^2) and unit gradient directions."""

    bvals: np.ndarray
    bvecs: np.ndarray

    def __post_init__(self):
        bvals = np.asarray(self.bvals, dtype=np.float64)
        bvecs = np.asarray(self.bvecs, dtype=np.float64)
        object.__setattr__(self, "bvals", bvals)
        object.__setattr__(self, "bvecs", bvecs)
        if bvals.ndim != 1 or bvecs.shape != (bvals.shape[0], 3):
            raise PhantomError(
                f"bvals {bvals.shape} and bvecs {bvecs.shape} do not match"
            )
        if np.any(bvals < 0):
            raise PhantomError("negative b-value")
        dw = bvals > 0
        norms = np.linalg.norm(bvecs[dw], axis=1)
        if dw.any() and np.abs(norms - 1.0).max() > 1e-6:
            raise PhantomError("diffusion-weighted bvecs must be unit length")

    def __len__(self) -> int:
        return len(self.bvals)


@dataclass(frozen=True)
class AngularMask:
    """Observed / missing indicator over the direction axis."""

    observed: np.ndarray

    def __post_init__(self):
        obs = np.asarray(self.observed, dtype=bool)
        object.__setattr__(self, "observed", obs)
        if obs.ndim != 1:
            raise PhantomError("mask must be one-dimensional")

    @property
    def n_directions(self) -> int:
        return self.observed.shape[0]

    @property
    def n_observed(self) -> int:
        return int(self.observed.sum())

    @property
    def masked_ratio(self) -> float:
        return 1.0 - self.n_observed / self.n_directions

    @property
    def observed_indices(self) -> np.ndarray:
        return np.flatnonzero(self.observed)


@dataclass(frozen=True)
class DWIVolume:
    """Normalized diffusion-weighted slice stack, shape (H, W, N)."""

    data: np.ndarray
    table: GradientTable

    def __post_init__(self):
        data = np.asarray(self.data)
        object.__setattr__(self, "data", data)
        if data.ndim != 3 or data.shape[2] != len(self.table):
            raise PhantomError(
                f"data shape {data.shape} does not match table of "
                f"{len(self.table)} directions"
            )
        if not np.all(np.isfinite(data)):
            raise PhantomError("non-finite signal values")
        if np.any(data < 0):
            raise PhantomError("negative signal values (normalized data expected)")


@dataclass(frozen=True)
class TensorCompartment:
    """One diffusion tensor with its volume fraction."""

    fraction: float
    tensor: np.ndarray  # symmetric positive definite, 3x3, mm^2/s

    def __post_init__(self):
        t = np.asarray(self.tensor, dtype=np.float64)
        object.__setattr__(self, "tensor", t)
        if not (0.0 <= self.fraction <= 1.0):
            raise PhantomError(f"fraction {self.fraction} outside [0, 1]")
        if t.shape != (3, 3) or np.abs(t - t.T).max() > 1e-12:
            raise PhantomError("tensor must be symmetric 3x3")
        if np.linalg.eigvalsh(t).min() <= 0:
            raise PhantomError("tensor must be positive definite")


def antipodal_energy(dirs: np.ndarray) -> float:
    """Electrostatic energy with antipodal image charges.

    sum_{i<j} 1/|u_i - u_j| + 1/|u_i + u_j|; the scheme-quality objective
    minimized by both the generator and the subset selector.
    """
    dirs = np.asarray(dirs, dtype=np.float64)
    n = dirs.shape[0]
    if n < 2:
        return 0.0
    diff = np.linalg.norm(dirs[:, None, :] - dirs[None, :, :], axis=-1)
    summ = np.linalg.norm(dirs[:, None, :] + dirs[None, :, :], axis=-1)
    iu = np.triu_indices(n, k=1)
    return float((1.0 / diff[iu]).sum() + (1.0 / summ[iu]).sum())


def _energy_gradient(dirs: np.ndarray) -> np.ndarray:
    d = dirs[:, None, :] - dirs[None, :, :]
    s = dirs[:, None, :] + dirs[None, :, :]
    dn = np.linalg.norm(d, axis=-1)
    sn = np.linalg.norm(s, axis=-1)
    np.fill_diagonal(dn, np.inf)
    np.fill_diagonal(sn, np.inf)  # self +pair term is constant 1/2, no gradient
    g = -(d / dn[..., None] ** 3).sum(axis=1) - (s / sn[..., None] ** 3).sum(axis=1)
    return g


def generate_directions(n: int, seed: int = 0, n_iter: int = 800) -> np.ndarray:
    """Electrostatically spread unit directions, antipodally symmetric energy.

    Projected gradient descent with backtracking from a seeded random start;
    deterministic in (n, seed).
    """
    if n < 1:
        raise PhantomError("need at least one direction")
    rng = np.random.default_rng(seed)
    u = rng.standard_normal((n, 3))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    if n == 1:
        return u
    step = 0.05 / n
    energy = antipodal_energy(u)
    for _ in range(n_iter):
        g = _energy_gradient(u)
        g -= (g * u).sum(axis=1, keepdims=True) * u  # tangent projection
        for _ in range(30):
            cand = u - step * g
            cand /= np.linalg.norm(cand, axis=1, keepdims=True)
            cand_energy = antipodal_energy(cand)
            if cand_energy < energy:
                u, energy = cand, cand_energy
                step *= 1.2
                break
            step *= 0.5
        else:
            break
    return u


def min_pairwise_angle(dirs: np.ndarray) -> float:
    """Smallest axis-to-axis angle (degrees), antipodal pairs identified."""
    dirs = np.asarray(dirs, dtype=np.float64)
    dots = np.abs(dirs @ dirs.T)
    np.fill_diagonal(dots, 0.0)
    return float(np.degrees(np.arccos(np.clip(dots.max(), -1.0, 1.0))))


def _subset_energy(dirs: np.ndarray, idx: np.ndarray) -> float:
    return antipodal_energy(dirs[idx])


def _greedy_farthest(absdot: np.ndarray, start: int, n_in: int) -> list[int]:
    chosen = [start]
    while len(chosen) < n_in:
        # farthest point: minimize the worst |dot| against the chosen set
        worst = absdot[:, chosen].max(axis=1)
        worst[chosen] = np.inf
        chosen.append(int(np.argmin(worst)))
    return chosen


def _exchange_refine(dirs: np.ndarray, idx: np.ndarray) -> tuple[np.ndarray, float]:
    n, n_in = dirs.shape[0], len(idx)
    energy = _subset_energy(dirs, idx)
    improved = True
    while improved:
        improved = False
        outside = [i for i in range(n) if i not in set(idx.tolist())]
        for pos in range(n_in):
            best_swap, best_energy = None, energy
            for cand in outside:
                trial = idx.copy()
                trial[pos] = cand
                e = _subset_energy(dirs, trial)
                if e < best_energy - 1e-12:
                    best_swap, best_energy = cand, e
            if best_swap is not None:
                outside.remove(best_swap)
                outside.append(int(idx[pos]))
                idx[pos] = best_swap
                energy = best_energy
                improved = True
    return idx, energy


def subsample_directions(table: GradientTable, n_in: int) -> AngularMask:
    """Pick n_in well-spread directions out of a table.

    Minimizes the antipodal electrostatic energy over subsets: exact
    enumeration when the subset count is small, otherwise greedy
    farthest-point seeding (several deterministic starts) followed by
    pairwise-exchange refinement. Returns a mask with exactly n_in
    observed entries.
    """
    n = len(table)
    if n_in == 0:
        raise PhantomError("cannot subsample to zero directions")
    if n_in > n:
        raise PhantomError(f"n_in {n_in} exceeds table size {n}")
    if n_in == n:
        return AngularMask(observed=np.ones(n, dtype=bool))

    dirs = table.bvecs
    observed = np.zeros(n, dtype=bool)
    from math import comb
    if comb(n, n_in) <= 5000:
        best_idx, _ = best_subset_exhaustive(table, n_in)
        observed[best_idx] = True
        return AngularMask(observed=observed)

    absdot = np.abs(dirs @ dirs.T)
    starts = np.unique(np.linspace(0, n - 1, 12).astype(int))
    best_idx, best_energy = None, np.inf
    for start in starts:
        idx = np.array(sorted(_greedy_farthest(absdot, int(start), n_in)))
        idx, energy = _exchange_refine(dirs, idx)
        if energy < best_energy - 1e-12:
            best_idx, best_energy = idx, energy
    observed[best_idx] = True
    return AngularMask(observed=observed)


def best_subset_exhaustive(table: GradientTable, n_in: int) -> tuple[np.ndarray, float]:
    """Brute-force minimum-energy subset; oracle for small tables."""
    best_idx, best_e = None, np.inf
    for comb in itertools.combinations(range(len(table)), n_in):
        e = antipodal_energy(table.bvecs[list(comb)])
        if e < best_e:
            best_idx, best_e = np.array(comb), e
    return best_idx, best_e


def simulate_multitensor(fractions: np.ndarray, tensors: np.ndarray,
                         table: GradientTable) -> DWIVolume:
    """Multi-compartment Gaussian signal S = sum_k f_k exp(-b g^T D_k g).

    fractions: (H, W, K) summing to 1 per pixel; tensors: (H, W, K, 3, 3)
    symmetric positive definite. Signal is b0-normalized by construction.
    """
    fractions = np.asarray(fractions, dtype=np.float64)
    tensors = np.asarray(tensors, dtype=np.float64)
    if fractions.ndim != 3 or tensors.shape != fractions.shape + (3, 3):
        raise PhantomError(
            f"fractions {fractions.shape} / tensors {tensors.shape} mismatch"
        )
    if np.abs(fractions.sum(axis=-1) - 1.0).max() > 1e-9:
        raise PhantomError("per-pixel fractions must sum to 1")
    if np.abs(tensors - np.swapaxes(tensors, -1, -2)).max() > 1e-12:
        raise PhantomError("tensors must be symmetric")
    eigs = np.linalg.eigvalsh(tensors)
    if eigs.min() <= 0:
        raise PhantomError("tensors must be positive definite")
    g = table.bvecs
    # quadratic form g^T D g for every pixel/compartment/direction
    q = np.einsum("nd,hwkde,ne->hwkn", g, tensors, g, optimize=True)
    s = (fractions[..., None] * np.exp(-table.bvals * q)).sum(axis=2)
    return DWIVolume(data=s, table=table)


def add_rician_noise(volume: DWIVolume, sigma: float, seed: int = 0) -> DWIVolume:
    """Magnitude-MR noise: |s + n1 + i n2| with n1, n2 ~ N(0, sigma^2)."""
    if sigma < 0:
        raise PhantomError("sigma must be non-negative")
    if sigma == 0:
        return volume
    rng = np.random.default_rng(seed)
    n1 = rng.normal(0.0, sigma, size=volume.data.shape)
    n2 = rng.normal(0.0, sigma, size=volume.data.shape)
    noisy = np.sqrt((volume.data + n1) ** 2 + n2**2)
    return DWIVolume(data=noisy, table=volume.table)


# ---------------------------------------------------------------------------
# Slice phantoms: crossing fibers + isotropic compartment
# ---------------------------------------------------------------------------

AXIAL_DIFFUSIVITY = 1.7e-3
RADIAL_DIFFUSIVITY = 0.2e-3
CSF_DIFFUSIVITY = 3.0e-3


def _rotation_to(direction: np.ndarray) -> np.ndarray:
    """Rotation matrix whose first column is the given unit direction."""
    e1 = direction / np.linalg.norm(direction)
    helper = np.array([0.0, 0.0, 1.0]) if abs(e1[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    e2 = np.cross(e1, helper)
    e2 /= np.linalg.norm(e2)
    e3 = np.cross(e1, e2)
    return np.stack([e1, e2, e3], axis=1)


def fiber_tensor(direction: np.ndarray, axial: float = AXIAL_DIFFUSIVITY,
                 radial: float = RADIAL_DIFFUSIVITY) -> np.ndarray:
    """Prolate tensor with principal axis along `direction`."""
    r = _rotation_to(np.asarray(direction, dtype=np.float64))
    return r @ np.diag([axial, radial, radial]) @ r.T


def _prolate_field(directions: np.ndarray, axial: float, radial: float) -> np.ndarray:
    """(..., 3) unit directions -> (..., 3, 3) cylindrically symmetric tensors."""
    outer = np.einsum("...i,...j->...ij", directions, directions)
    return (axial - radial) * outer + radial * np.eye(3)


def make_crossing_slice(height: int, width: int, seed: int = 0,
                        csf_fraction_max: float = 0.2) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel compartments for one slice: two crossing fibers + CSF.

    Fiber orientations and crossing angle vary smoothly across the slice,
    with per-slice random global rotation and fraction fields. Returns
    (fractions (H, W, 3), tensors (H, W, 3, 3, 3)).
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.meshgrid(np.linspace(0, 1, height), np.linspace(0, 1, width),
                         indexing="ij")
    base = rng.uniform(0, np.pi)
    tilt = rng.uniform(-0.5, 0.5)
    # in-plane angle of fiber 1 rotates across x, crossing angle varies with y
    ang1 = base + np.pi * xx
    crossing = np.deg2rad(35.0 + 50.0 * yy)
    ang2 = ang1 + crossing
    phase = rng.uniform(0, 2 * np.pi, size=2)
    f1 = 0.45 + 0.15 * np.sin(2 * np.pi * xx + phase[0])
    csf = csf_fraction_max * 0.5 * (1 + np.sin(2 * np.pi * yy + phase[1]))
    f2 = 1.0 - f1 - csf

    fractions = np.stack([f1, f2, csf], axis=-1)
    z1 = np.sin(tilt)
    c1 = np.sqrt(1 - z1**2)
    d1 = np.stack([c1 * np.cos(ang1), c1 * np.sin(ang1),
                   np.full_like(ang1, z1)], axis=-1)
    d2 = np.stack([c1 * np.cos(ang2), c1 * np.sin(ang2),
                   np.full_like(ang2, -z1)], axis=-1)
    tensors = np.empty((height, width, 3, 3, 3))
    tensors[:, :, 0] = _prolate_field(d1, AXIAL_DIFFUSIVITY, RADIAL_DIFFUSIVITY)
    tensors[:, :, 1] = _prolate_field(d2, AXIAL_DIFFUSIVITY, RADIAL_DIFFUSIVITY)
    tensors[:, :, 2] = CSF_DIFFUSIVITY * np.eye(3)
    return fractions, tensors


@dataclass(frozen=True)
class PhantomSpec:
    """Geometry and protocol of a generated phantom set."""

    height: int = 32
    width: int = 32
    n_directions: int = 60
    bvalue: float = 1000.0
    noise_sigma: float = 0.02
    seed: int = 0
    scheme_seed: int = 7
    csf_fraction_max: float = 0.2


def make_gradient_table(n_directions: int, bvalue: float, seed: int = 7) -> GradientTable:
    dirs = generate_directions(n_directions, seed=seed)
    return GradientTable(bvals=np.full(n_directions, float(bvalue)), bvecs=dirs)


def make_slice_stack(spec: PhantomSpec, n_slices: int, table: GradientTable,
                     seed_offset: int = 0) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stack of noisy slices with their clean signals and tensor fields.

    Returns (noisy (S, H, W, N), clean (S, H, W, N), tensors (S, H, W, 3, 3, 3)).
    Per-slice RNG streams derive from (spec.seed, slice index), so parallel
    and serial generation agree bit for bit.
    """
    noisy = np.empty((n_slices, spec.height, spec.width, len(table)))
    clean = np.empty_like(noisy)
    tensor_fields = np.empty((n_slices, spec.height, spec.width, 3, 3, 3))
    for s in range(n_slices):
        slice_key = [spec.seed, seed_offset + s]
        slice_seed = int(np.random.default_rng(slice_key).integers(2**31))
        noise_seed = int(np.random.default_rng(slice_key + [1]).integers(2**31))
        frac, tens = make_crossing_slice(spec.height, spec.width, seed=slice_seed,
                                         csf_fraction_max=spec.csf_fraction_max)
        vol = simulate_multitensor(frac, tens, table)
        clean[s] = vol.data
        noisy[s] = add_rician_noise(vol, spec.noise_sigma, seed=noise_seed).data
        tensor_fields[s] = tens
    return noisy, clean, tensor_fields
