"""Ion-crystal model: equilibrium positions, local mode frequencies, Coulomb
couplings, and the derived interaction-rate quantities.

All quantities are SI internally; every frequency is an angular frequency
(rad/s).  The local mode of ion ``mu`` is its transverse oscillation with all
other ions clamped at equilibrium, so its squared frequency is the transverse
trap curvature minus the Coulomb softening from every neighbor.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from .constants import ATOMIC_MASS, K_COULOMB


class CrystalError(Exception):
    """Invalid crystal configuration or failed model construction."""


class EquilibriumError(CrystalError):
    """Equilibrium solver did not reach the force-balance tolerance."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class InstabilityError(CrystalError):
    """A local transverse frequency came out non-positive."""

    def __init__(self, message, ion_index):
        super().__init__(message)
        self.ion_index = ion_index


@dataclass(frozen=True)
class IonSpecies:
    """Ion species; ``mass`` in amu, ``charge`` in units of e."""

    mass: float = 171.0
    charge: int = 1

    def __post_init__(self):
        if self.mass <= 0:
            raise CrystalError(f"ion mass must be positive, got {self.mass}")
        if self.charge < 1:
            raise CrystalError(f"ion charge must be >= 1, got {self.charge}")

    @property
    def mass_kg(self) -> float:
        return self.mass * ATOMIC_MASS

    @property
    def coulomb(self) -> float:
        """Pair interaction prefactor k_c (Z e)^2 in J*m."""
        return K_COULOMB * self.charge**2


@dataclass(frozen=True)
class Chain1D:
    """Linear chain in a harmonic trap, driven on its transverse modes.

    Parameters
    ----------
    n_ions : number of ions.
    omega_axial : axial trap frequency (rad/s), sets the spacing.
    omega_transverse : transverse trap frequency (rad/s), sets the local modes.
    """

    n_ions: int
    omega_axial: float
    omega_transverse: float
    n_c: float = 2.0

    def __post_init__(self):
        if self.n_ions < 1:
            raise CrystalError("Chain1D needs n_ions >= 1")
        if self.omega_axial <= 0 or self.omega_transverse <= 0:
            raise CrystalError("trap frequencies must be positive")


@dataclass(frozen=True)
class UniformLattice:
    """Idealized lattice with uniform spacing and a given local frequency.

    Stands in for 2D crystals / microtrap arrays: only the spacing ``d``, the
    local frequency and the coordination number enter the downstream rate and
    infidelity estimates, so no equilibrium solving is attempted.
    """

    spacing: float
    omega_local: float
    n_c: float = 5.6
    n_sites: int = 2

    def __post_init__(self):
        if self.spacing <= 0:
            raise CrystalError("lattice spacing must be positive")
        if self.omega_local <= 0:
            raise CrystalError("local frequency must be positive")
        if self.n_c <= 0:
            raise CrystalError("coordination number must be positive")
        if self.n_sites < 1:
            raise CrystalError("n_sites must be >= 1")


@dataclass(frozen=True)
class CrystalConfig:
    geometry: Chain1D | UniformLattice
    species: IonSpecies = field(default_factory=IonSpecies)


@dataclass(frozen=True)
class CrystalModel:
    """Crystal data consumed by the gate design and simulation layers.

    ``coupling[mu, nu]`` is the magnitude of the transverse Coulomb curvature
    k_c e^2 / (m |x_mu - x_nu|^3) in rad^2/s^2 (zero diagonal).  The sign
    convention is fixed so that the nearest-neighbor pair rate
    ``omega_I = coupling / local frequency`` is positive and the conditional
    phase accumulated by two driven neighbors is positive.
    """

    positions: np.ndarray        # equilibrium coordinates (m)
    local_freqs: np.ndarray      # omega_mu (rad/s)
    coupling: np.ndarray         # omega^2_{mu,nu} (rad^2/s^2)
    omega_I: float               # nearest-neighbor interaction rate (rad/s)
    t_p: float                   # phonon propagation time (s)
    v_p: float                   # phonon propagation speed (m/s)
    n_c: float                   # lattice bath-coupling constant
    species: IonSpecies = field(default_factory=IonSpecies)

    @property
    def n_ions(self) -> int:
        return len(self.local_freqs)

    @property
    def nn_distance(self) -> float:
        gaps = np.diff(np.sort(self.positions))
        return float(gaps.min()) if len(gaps) else 0.0

    def to_dict(self) -> dict:
        return {
            "n_ions": self.n_ions,
            "positions_m": [float(x) for x in self.positions],
            "local_freqs_rad_s": [float(w) for w in self.local_freqs],
            "coupling_rad2_s2": [[float(c) for c in row] for row in self.coupling],
            "omega_I_rad_s": float(self.omega_I),
            "t_p_s": float(self.t_p),
            "v_p_m_s": float(self.v_p),
            "n_c": float(self.n_c),
            "species": {"mass_amu": self.species.mass, "charge": self.species.charge},
        }


# ---------------------------------------------------------------------------
# equilibrium positions


def _chain_length_scale(species: IonSpecies, omega_axial: float) -> float:
    """Dimensionless length unit l = (k_c e^2 / (m w_z^2))^(1/3)."""
    return (species.coulomb / (species.mass_kg * omega_axial**2)) ** (1.0 / 3.0)


def _dimensionless_gradient(u: np.ndarray) -> np.ndarray:
    du = u[:, None] - u[None, :]
    np.fill_diagonal(du, np.inf)
    return u - np.sum(np.sign(du) / du**2, axis=1)


def _dimensionless_hessian(u: np.ndarray) -> np.ndarray:
    du = u[:, None] - u[None, :]
    np.fill_diagonal(du, np.inf)
    off = -2.0 / np.abs(du) ** 3
    h = off.copy()
    np.fill_diagonal(h, 1.0 - off.sum(axis=1))
    return h


def _dimensionless_energy(u: np.ndarray) -> float:
    trap = 0.5 * float(np.sum(u**2))
    if len(u) < 2:
        return trap
    du = np.abs(u[:, None] - u[None, :])
    iu = np.triu_indices(len(u), k=1)
    return trap + float(np.sum(1.0 / du[iu]))


def equilibrium_positions(config: CrystalConfig, tol: float = 1e-12,
                          max_iter: int = 200) -> np.ndarray:
    """Equilibrium coordinates of a 1D chain (meters, sorted ascending).

    Minimizes the trap-plus-Coulomb potential.  ``tol`` bounds the residual
    force per ion relative to the characteristic force at the length scale of
    the problem (dimensionless gradient norm).  BFGS provides the seed and a
    damped Newton iteration polishes to the tolerance.
    """
    geom = config.geometry
    if not isinstance(geom, Chain1D):
        raise CrystalError("equilibrium_positions requires a Chain1D geometry")
    n = geom.n_ions
    scale = _chain_length_scale(config.species, geom.omega_axial)
    if n == 1:
        return np.zeros(1)

    # seed: empirical chain extent, then quasi-Newton once over
    extent = 2.018 * n**0.559
    u = np.linspace(-extent / 2.0, extent / 2.0, n)
    res = minimize(_dimensionless_energy, u, jac=_dimensionless_gradient,
                   method="BFGS", options={"gtol": 1e-8, "maxiter": 500})
    u = np.sort(res.x)

    for _ in range(max_iter):
        g = _dimensionless_gradient(u)
        if np.max(np.abs(g)) <= tol:
            break
        h = _dimensionless_hessian(u)
        step = np.linalg.solve(h, -g)
        # backtracking damping on the gradient norm
        lam, g0 = 1.0, np.max(np.abs(g))
        for _ in range(60):
            trial = u + lam * step
            if np.all(np.diff(trial) > 0) and np.max(np.abs(_dimensionless_gradient(trial))) < g0:
                break
            lam *= 0.5
        u = u + lam * step
    else:
        raise EquilibriumError(
            f"equilibrium solver did not converge after {max_iter} iterations "
            f"(dimensionless residual {np.max(np.abs(_dimensionless_gradient(u))):.3e})",
            residual=float(np.max(np.abs(_dimensionless_gradient(u)))),
        )
    return u * scale


# ---------------------------------------------------------------------------
# local frequencies and couplings


def local_frequencies(positions: np.ndarray, omega_transverse: float,
                      species: IonSpecies) -> np.ndarray:
    """Transverse local mode frequencies omega_mu (rad/s).

    omega_mu^2 = omega_t^2 - sum_{nu != mu} k_c e^2 / (m |x_mu - x_nu|^3):
    the transverse Coulomb curvature softens each local mode.
    """
    x = np.asarray(positions, dtype=float)
    if x.ndim != 1:
        raise CrystalError("positions must be a 1D array")
    if len(x) == 1:
        return np.array([omega_transverse])
    d = np.abs(x[:, None] - x[None, :])
    np.fill_diagonal(d, np.inf)
    w2 = omega_transverse**2 - np.sum(species.coulomb / (species.mass_kg * d**3), axis=1)
    if np.any(w2 <= 0):
        idx = int(np.argmin(w2))
        raise InstabilityError(
            f"crystal unstable: local frequency squared is {w2[idx]:.3e} rad^2/s^2 "
            f"for ion {idx}; raise the transverse trap frequency",
            ion_index=idx,
        )
    return np.sqrt(w2)


def coupling_matrix(positions: np.ndarray, species: IonSpecies) -> np.ndarray:
    """Coulomb coupling magnitudes omega^2_{mu,nu} = k_c e^2/(m |x_mu-x_nu|^3).

    Symmetric with zero diagonal.  Equals the magnitude of the mixed second
    derivative of the Coulomb energy with respect to transverse displacements.
    """
    x = np.asarray(positions, dtype=float)
    n = len(x)
    if n == 1:
        return np.zeros((1, 1))
    d = np.abs(x[:, None] - x[None, :])
    od = d[~np.eye(n, dtype=bool)]
    if np.any(od == 0):
        raise CrystalError("coincident ion positions")
    np.fill_diagonal(d, np.inf)
    return species.coulomb / (species.mass_kg * d**3)


def rates_from_spacing(species: IonSpecies, d: float, omega: float):
    """(omega_I, t_p, v_p) for a neighbor pair at spacing ``d`` and local
    frequency ``omega``.  omega_I is derived from t_p so that
    omega_I * omega * t_p^2 == 1 holds to machine precision."""
    if d <= 0 or omega <= 0:
        raise CrystalError("spacing and local frequency must be positive")
    t_p = np.sqrt(species.mass_kg * d**3 / species.coulomb)
    omega_I = 1.0 / (omega * t_p * t_p)
    v_p = d / t_p
    return float(omega_I), float(t_p), float(v_p)


def interaction_rate(model: CrystalModel):
    """(omega_I, t_p, v_p) of the fastest (nearest-neighbor) pair."""
    if model.n_ions < 2:
        raise CrystalError("interaction rate needs at least two ions")
    x = np.sort(model.positions)
    gaps = np.diff(x)
    k = int(np.argmin(gaps))
    omega_pair = float(np.sqrt(model.local_freqs[k] * model.local_freqs[k + 1]))
    return rates_from_spacing(model.species, float(gaps[k]), omega_pair)


# ---------------------------------------------------------------------------
# model builders


def build_model(config: CrystalConfig) -> CrystalModel:
    """Assemble the full CrystalModel for either geometry."""
    geom = config.geometry
    sp = config.species
    if isinstance(geom, Chain1D):
        pos = equilibrium_positions(config)
        freqs = local_frequencies(pos, geom.omega_transverse, sp)
        coup = coupling_matrix(pos, sp)
        n_c = geom.n_c
    elif isinstance(geom, UniformLattice):
        pos = np.arange(geom.n_sites, dtype=float) * geom.spacing
        freqs = np.full(geom.n_sites, geom.omega_local)
        coup = coupling_matrix(pos, sp) if geom.n_sites > 1 else np.zeros((1, 1))
        n_c = geom.n_c
    else:
        raise CrystalError(f"unsupported geometry {type(geom).__name__}")

    if len(pos) >= 2:
        model = CrystalModel(pos, freqs, coup, 0.0, 0.0, 0.0, n_c, sp)
        omega_I, t_p, v_p = interaction_rate(model)
    else:
        omega_I = t_p = v_p = 0.0
    return CrystalModel(pos, freqs, coup, omega_I, t_p, v_p, n_c, sp)


def model_from_rates(omega: float, omega_I: float, n_ions: int = 2,
                     n_c: float = 2.0) -> CrystalModel:
    """Synthetic equal-frequency model specified directly by its rates.

    Intended for desk-scale simulation in arbitrary consistent units: all
    local frequencies equal ``omega`` and the nearest-neighbor coupling is
    chosen so the pair rate equals ``omega_I``; farther pairs follow the
    1/|i-j|^3 falloff of a uniform chain.  Positions are site indices.
    """
    if n_ions < 1:
        raise CrystalError("n_ions must be >= 1")
    idx = np.arange(n_ions, dtype=float)
    sep = np.abs(idx[:, None] - idx[None, :])
    np.fill_diagonal(sep, np.inf)
    coup = omega * omega_I / sep**3
    t_p = 1.0 / np.sqrt(omega * omega_I) if omega_I > 0 else 0.0
    v_p = 1.0 / t_p if t_p > 0 else 0.0
    return CrystalModel(idx.copy(), np.full(n_ions, omega), coup,
                        float(omega_I), float(t_p), float(v_p), n_c)
