"""Quantum Hamiltonians of single devices and of the coupled system.

A device Hamiltonian has three pieces: a kinetic term from the inverse
capacitance matrix, Josephson cosines of the junction phases, and a
quadratic inductive term in which the secondary branch phases are fixed
linear combinations of the coordinates and of the external fluxes
(fluxoid constraints).

Coordinates split into two groups.  Combinations of junction phases that
leave every inductor phase unchanged see a purely periodic potential;
they are compact and get Fourier (charge) bases with integer charge and
zero offset.  The remaining combinations are taken to be the three loop
phases themselves; they are extended and get harmonic oscillator bases
built from normal modes of the kinetic form and the potential curvature
at the classical minimum.  A residual coordinate freedom is used to
cancel the kinetic cross terms between charge and oscillator momenta, so
every assembled matrix is real symmetric.  Josephson cosines are
represented exactly: integer charge shifts on the compact factors times
matrix exponentials of the phase displacement on the oscillator factors,
which preserves Hermiticity at any truncation.

Devices above a dimension threshold are diagonalized with a Lanczos
solver on the tensor structure (deterministic start vector); small ones
densely.  The coupled five-device system is treated hierarchically: each
device is diagonalized alone, a handful of low-energy states per device
is kept, and the mutual-inductance interaction is projected onto the
product of those low-energy bases.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse.linalg as spla

from .circuit_model import (
    DEVICE_ORDER,
    LOOPS,
    DeviceKind,
    DeviceSpec,
    FluxBias,
    SystemSpec,
    capacitance_matrix,
    interaction_energy_matrix,
    loop_index,
    _device_to_dict,
)
from .constants import (
    charging_coeff_ghz,
    inductive_energy_ghz,
    josephson_energy_ghz,
    phase_to_current_na,
)

# iterative solver above this dimension: full dense reduction costs D^3 and
# loses to Lanczos long before 4096 when only a handful of states is kept
DENSE_DIMENSION_LIMIT = 1100
EIGSH_TOL = 1e-10

DEFAULT_KEPT = {DeviceKind.QUBIT: 8, DeviceKind.COUPLER: 6}


class QuantizerError(RuntimeError):
    pass


@dataclass(frozen=True)
class BasisConfig:
    """Basis selection for one device.

    Parameters
    ----------
    dims : tuple of int
        Number of basis states per quantized degree of freedom, compact
        (charge) coordinates first, then oscillator modes by increasing
        frequency.  Charge dimensions must be odd (a symmetric window of
        integer charge states).
    kept_states : int
        Number of low-energy eigenstates retained for composition.
    kinds : tuple of str
        ``"fourier"`` or ``"oscillator"`` per degree of freedom.  If left
        empty it is derived from ``dims`` positions when the basis is
        bound to a device.
    """

    dims: tuple[int, ...]
    kept_states: int
    kinds: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "kinds", tuple(self.kinds))
        if any(d < 2 for d in self.dims):
            raise QuantizerError("basis dimensions must be >= 2")
        if self.kinds and len(self.kinds) != len(self.dims):
            raise QuantizerError("one basis kind per degree of freedom")
        if any(k not in ("oscillator", "fourier") for k in self.kinds):
            raise QuantizerError("basis kind must be 'oscillator' or 'fourier'")
        if not (2 <= self.kept_states <= int(np.prod(self.dims))):
            raise QuantizerError("kept_states must be in [2, prod(dims)]")

    @property
    def total_dim(self) -> int:
        return int(np.prod(self.dims))

    def grown(self, factor: float) -> "BasisConfig":
        dims = []
        for i, d in enumerate(self.dims):
            g = int(np.ceil(d * factor))
            if self.kinds and self.kinds[i] == "fourier" and g % 2 == 0:
                g += 1
            dims.append(g)
        return BasisConfig(tuple(dims), self.kept_states, self.kinds)


@dataclass(frozen=True)
class DeviceEigensystem:
    """Low-energy eigendata of one device at one bias point.

    ``phi`` maps loop name (``m``, ``s1``, ``s2``) to the matrix elements
    of the loop phase operator in the kept eigenbasis, offsets included.
    ``phi_prod`` holds matrix elements of ordered products of two loop
    phases, evaluated in the full basis before projection, so intra-device
    corrections from the coupled-system inductance matrix stay exact.
    ``current_main`` and ``current_sec`` are the circulating-current
    operators of the main and secondary loops, in nA.
    """

    energies: np.ndarray
    phi: dict[str, np.ndarray]
    phi_prod: dict[tuple[str, str], np.ndarray]
    current_main: np.ndarray
    current_sec: np.ndarray
    basis: BasisConfig
    bias: FluxBias

    @property
    def kept(self) -> int:
        return self.energies.size


# ---------------------------------------------------------------------------
# geometry of the two device kinds

_W_QUBIT = np.array(
    [
        [0.0, 0.0, 0.0, 0.0, 1.0],  # phi_m
        [1.0, -1.0, 0.0, -1.0, -1.0],  # phi_s1
        [1.0, -1.0, -1.0, 0.0, -1.0],  # phi_s2
    ]
)
_W_COUPLER = np.array(
    [
        [0.0, 0.0, 1.0],
        [-1.0, 0.0, -1.0],
        [0.0, -1.0, -1.0],
    ]
)

# generators of junction-phase translations that leave all inductor phases
# unchanged (null space of the constraint matrix over 2*pi integers); these
# directions see a purely periodic potential and are quantized compactly
_LATTICE = {
    DeviceKind.QUBIT: np.array(
        [[1.0, 0.0, 1.0, 1.0, 0.0], [0.0, 1.0, -1.0, -1.0, 0.0]]
    ),
    DeviceKind.COUPLER: np.zeros((0, 3)),
}


def _constraint_matrix(dev: DeviceSpec) -> np.ndarray:
    return _W_QUBIT if dev.kind is DeviceKind.QUBIT else _W_COUPLER


def _reduced_bias(bias: FluxBias) -> FluxBias:
    """Winding compensation: absorb integer flux quanta into 2*pi shifts.

    The device Hamiltonian at ``f_m + 1`` equals the one at ``f_m``
    translated by junction-phase shifts of 2*pi, so the spectrum is
    exactly periodic.  Assembly always uses the representative with
    ``f_m`` in (0, 1] and ``f_s`` in [-1, 1).
    """
    f_m = bias.f_m - np.round(bias.f_m - 0.5)
    f_s = (bias.f_s + 1.0) % 2.0 - 1.0
    return FluxBias(float(f_m), float(f_s))


def _constraint_offsets(dev: DeviceSpec, bias: FluxBias) -> np.ndarray:
    b = _reduced_bias(bias)
    if dev.kind is DeviceKind.QUBIT:
        return np.array(
            [
                0.0,
                -2.0 * np.pi * b.f_m - np.pi * b.f_s,
                -2.0 * np.pi * b.f_m + np.pi * b.f_s,
            ]
        )
    return np.array(
        [
            0.0,
            -2.0 * np.pi * b.f_m + np.pi * b.f_s,
            -2.0 * np.pi * b.f_m - np.pi * b.f_s,
        ]
    )


# ---------------------------------------------------------------------------
# device frame: coordinate split and mode construction


class _DeviceFrame:
    """Bias-independent quantization data for one device.

    Builds the coordinate transformation ``x = T (xi_c, xi_e)`` where the
    compact coordinates ``xi_c`` generate the junction-phase lattice and
    the extended coordinates ``xi_e`` are exactly the loop phases.  The
    extended columns are gauged so the transformed kinetic form has no
    charge-oscillator cross block.
    """

    def __init__(self, dev: DeviceSpec):
        self.dev = dev
        self.n_coords = dev.dof_count
        self.W = _constraint_matrix(dev)
        self.d_energy = np.array(
            [inductive_energy_ghz(l) for l in dev.loop_inductances]
        )
        self.ej = np.array(
            [josephson_energy_ghz(j.critical_current) for j in dev.junctions]
        )

        C = capacitance_matrix(dev)
        if np.linalg.eigvalsh(C)[0] <= 0:
            raise QuantizerError(
                "invalid capacitance network: matrix not positive definite"
            )
        # kinetic coefficient matrix, GHz: 4 e^2 C^-1 / h
        kin = charging_coeff_ghz(1.0) * np.linalg.inv(C)

        lattice = _LATTICE[dev.kind]
        self.n_compact = lattice.shape[0]
        Tc = 2.0 * np.pi * lattice.T
        Te0 = self.W.T @ np.linalg.inv(self.W @ self.W.T)
        if self.n_compact:
            T0 = np.hstack([Tc, Te0])
            kappa = np.linalg.inv(T0) @ kin @ np.linalg.inv(T0).T
            cc = kappa[: self.n_compact, : self.n_compact]
            ce = kappa[: self.n_compact, self.n_compact :]
            ee = kappa[self.n_compact :, self.n_compact :]
            B = np.linalg.solve(ee.T, ce.T).T  # ce @ ee^-1
            Te = Te0 + Tc @ B
            self.kin_cc = cc - B @ ee @ B.T
            # cross block vanishes by the gauge choice
            self.kin_ee = ee
        else:
            Te = Te0
            self.kin_cc = np.zeros((0, 0))
            Tinv = np.linalg.inv(Te)
            self.kin_ee = Tinv @ kin @ Tinv.T
        self.Tc = Tc
        self.Te = Te
        # junction-phase decomposition: gamma_k = m_int[k] . xi_c + te[k] . xi_e
        # (per 2*pi of compact coordinate the shift is an integer)
        self.m_int = np.round(Tc[: len(self.ej)] / (2.0 * np.pi)).astype(int)
        if self.n_compact and np.max(
            np.abs(Tc[: len(self.ej)] / (2.0 * np.pi) - self.m_int)
        ) > 1e-9:
            raise QuantizerError("compact lattice is not integer on junctions")
        self.te = Te[: len(self.ej)]
        self.kin_ee_chol = np.linalg.cholesky(self.kin_ee)

    def offsets(self, bias: FluxBias) -> np.ndarray:
        return _constraint_offsets(self.dev, bias)

    def potential(self, xi_c, xi_e, bias: FluxBias):
        """Classical potential at compact/extended coordinates, GHz."""
        w = self.offsets(bias)
        gamma = self.m_int @ (np.atleast_1d(xi_c) * 2.0 * np.pi) if self.n_compact else 0.0
        gamma = gamma + self.te @ xi_e
        return 0.5 * float(
            (xi_e + w) @ (self.d_energy * (xi_e + w))
        ) - float(np.sum(self.ej * np.cos(gamma)))


_PARITY_EXT = np.array([[-1.0, 0.0, 0.0], [0.0, 0.0, -1.0], [0.0, -1.0, 0.0]])


def _has_ext_parity(dev: DeviceSpec, bias: FluxBias) -> bool:
    """Reflection symmetry of the loop phases at the main-loop symmetry point.

    Holds when the reduced main flux is exactly 1/2 and the paired
    junctions are identical; maps (phi_m, phi_s1, phi_s2) to
    (-phi_m, -phi_s2, -phi_s1).
    """
    b = _reduced_bias(bias)
    if abs(b.f_m - 0.5) > 1e-12:
        return False
    j = dev.junctions
    pairs = [(0, 1)] if dev.kind is DeviceKind.COUPLER else [(0, 1), (2, 3)]
    return all(
        abs(j[a].critical_current - j[b_].critical_current) < 1e-9
        and abs(j[a].capacitance - j[b_].capacitance) < 1e-9
        for a, b_ in pairs
    )


def _classical_minima(
    frame: _DeviceFrame, bias: FluxBias, window: float = 50.0
) -> tuple[np.ndarray, np.ndarray]:
    """Low-lying minima of the classical potential.

    Returns compact coordinates (units of 2*pi, reduced to [0, 1)) and
    extended coordinates, one row per minimum, sorted by energy.
    """
    from scipy.optimize import minimize

    nc = frame.n_compact
    w = frame.offsets(bias)

    def split(z):
        return z[:nc], z[nc:]

    def V(z):
        xi_c, xi_e = split(z)
        return frame.potential(xi_c, xi_e, bias)

    def dV(z):
        xi_c, xi_e = split(z)
        gamma = frame.te @ xi_e
        if nc:
            gamma = gamma + frame.m_int @ (xi_c * 2.0 * np.pi)
        sin = frame.ej * np.sin(gamma)
        grad_e = frame.d_energy * (xi_e + w) + frame.te.T @ sin
        if nc:
            grad_c = 2.0 * np.pi * (frame.m_int.T @ sin)
            return np.concatenate([grad_c, grad_e])
        return grad_e

    xi_e0 = -w
    # junction phases explore their period via the compact torus when one
    # exists; devices without compact coordinates (couplers) explore the
    # junction range through the branch phases instead
    ext_offsets = [np.zeros(3)]
    for dm in (-0.6, 0.6):
        ext_offsets.append(np.array([dm, 0.0, 0.0]))
    if nc == 0:
        for d1 in (-2.4, 0.0, 2.4):
            for d2 in (-2.4, 0.0, 2.4):
                if d1 or d2:
                    ext_offsets.append(np.array([0.0, d1, d2]))
    if nc:
        grid = np.array(np.meshgrid(*([np.arange(3) / 3.0] * nc))).reshape(nc, -1).T
    else:
        grid = np.zeros((1, 0))
    starts = [
        np.concatenate([g, xi_e0 + d]) for g in grid for d in ext_offsets
    ]
    found: list[tuple[np.ndarray, np.ndarray, float]] = []
    for s in starts:
        res = minimize(V, s, jac=dV, method="BFGS")
        if np.linalg.norm(dV(res.x)) > 1e-5:
            continue
        xi_c, xi_e = split(res.x)
        xi_c = xi_c % 1.0 if nc else xi_c
        if not any(
            np.linalg.norm(xi_e - fe) < 1e-3
            and (not nc or np.linalg.norm((xi_c - fc + 0.5) % 1.0 - 0.5) < 1e-3)
            for fc, fe, _ in found
        ):
            found.append((xi_c, xi_e, float(res.fun)))
    if not found:
        found.append((np.zeros(nc), xi_e0, V(np.concatenate([np.zeros(nc), xi_e0]))))
    found.sort(key=lambda t: t[2])
    vmin = found[0][2]
    keep = [(c, e) for c, e, v in found if v - vmin < window]
    return (
        np.array([c for c, _ in keep]).reshape(len(keep), nc),
        np.array([e for _, e in keep]),
    )


class _ModeFrame:
    """Oscillator frame for the extended coordinates near one bias point.

    The center is the parity-symmetrized potential minimum (midpoint of
    nearly degenerate wells), the mode metric the potential Hessian at
    the global minimum, and modes with distant wells are stretched so the
    required dimension grows linearly instead of quadratically with the
    well displacement.  The frame is a basis choice only; the Hamiltonian
    is always assembled exactly in it.
    """

    DEGENERACY_WINDOW = 8.0  # GHz

    def __init__(self, dev: DeviceSpec, frame_bias: FluxBias):
        self.dev = dev
        self.frame_bias = frame_bias
        self.base = _device_frame(dev)
        frame = self.base
        minima_c, minima_e = _classical_minima(frame, frame_bias)
        self.minima_c, self.minima_e = minima_c, minima_e
        if (
            len(minima_e) >= 2
            and frame.potential(minima_c[1], minima_e[1], frame_bias)
            - frame.potential(minima_c[0], minima_e[0], frame_bias)
            < self.DEGENERACY_WINDOW
        ):
            center = 0.5 * (minima_e[0] + minima_e[1])
        else:
            center = minima_e[0].copy()
        if _has_ext_parity(dev, frame_bias):
            # the reflection acts on physical loop phases phi = xi + w
            w = frame.offsets(frame_bias)
            center = 0.5 * (center + _PARITY_EXT @ (center + w) - w)
        self.center = center

        gamma0 = frame.te @ minima_e[0]
        if frame.n_compact:
            gamma0 = gamma0 + frame.m_int @ (minima_c[0] * 2.0 * np.pi)
        curv = frame.ej * np.cos(gamma0)
        metric = np.diag(frame.d_energy) + frame.te.T @ np.diag(curv) @ frame.te
        if _has_ext_parity(dev, frame_bias):
            metric = 0.5 * (metric + _PARITY_EXT @ metric @ _PARITY_EXT.T)
        R = frame.kin_ee_chol
        lam, U = np.linalg.eigh(R.T @ metric @ R)
        if lam[0] <= 0:
            metric = np.diag(frame.d_energy) + frame.te.T @ np.diag(frame.ej) @ frame.te
            lam, U = np.linalg.eigh(R.T @ metric @ R)
        self.omega = np.sqrt(lam)
        Rinv = np.linalg.inv(R)
        s_inv0 = np.diag(lam**0.25) @ U.T @ Rinv
        disp0 = (
            np.max(np.abs(s_inv0 @ (minima_e - center).T), axis=1)
            if len(minima_e)
            else np.zeros(3)
        )
        beta = np.maximum(1.0, disp0 / 2.5)
        D = lam**-0.25 * np.sqrt(beta)
        self.S = R @ U @ np.diag(D)
        self.S_inv = np.diag(1.0 / D) @ U.T @ Rinv
        self.kin_coeff = np.sqrt(lam) / beta
        self.q_exact = self.S.T @ np.diag(frame.d_energy) @ self.S
        self._factor_cache: dict[tuple[int, ...], list[list[np.ndarray]]] = {}

    @property
    def n_compact(self) -> int:
        return self.base.n_compact

    def dof_kinds(self) -> tuple[str, ...]:
        return ("fourier",) * self.n_compact + ("oscillator",) * 3

    def bias_terms(self, bias: FluxBias):
        """Linear term and constant of the inductive quadratic, plus offsets."""
        frame = self.base
        w = frame.offsets(bias)
        shift = self.center + w
        g = self.S.T @ (frame.d_energy * shift)
        v0 = 0.5 * float(shift @ (frame.d_energy * shift))
        return g, v0, w

    def exp_factors(self, ext_dims: tuple[int, ...]) -> list[list[np.ndarray]]:
        """Per-junction oscillator factors expm(i (te S)[k, j] * y_j)."""
        if ext_dims not in self._factor_cache:
            coeff = self.base.te @ self.S
            factors = []
            for k in range(len(self.base.ej)):
                row = []
                for j, d in enumerate(ext_dims):
                    y = _y_matrix(d)
                    row.append(scipy.linalg.expm(1j * coeff[k, j] * y))
                factors.append(row)
            self._factor_cache[ext_dims] = factors
        return self._factor_cache[ext_dims]


_DEVICE_FRAME_CACHE: dict[str, _DeviceFrame] = {}
_MODE_FRAME_CACHE: dict[tuple, _ModeFrame] = {}


def _device_key(dev: DeviceSpec) -> str:
    return json.dumps(_device_to_dict(dev), sort_keys=True)


def _device_frame(dev: DeviceSpec) -> _DeviceFrame:
    key = _device_key(dev)
    if key not in _DEVICE_FRAME_CACHE:
        _DEVICE_FRAME_CACHE[key] = _DeviceFrame(dev)
    return _DEVICE_FRAME_CACHE[key]


def frame_bucket(bias: FluxBias) -> FluxBias:
    """Deterministic rounding of a bias used only to pick the frame center.

    Nearby biases share one oscillator frame, which keeps truncation
    errors common mode across small flux shifts (essential when
    extracting small energy differences) and lets sweeps reuse cached
    mode data.  The Hamiltonian itself always uses the exact bias.
    """
    b = _reduced_bias(bias)
    return FluxBias(np.round(b.f_m * 50) / 50, np.round(b.f_s * 50) / 50)


def _mode_frame(dev: DeviceSpec, frame_bias: FluxBias) -> _ModeFrame:
    key = (_device_key(dev), frame_bias.f_m, frame_bias.f_s)
    if key not in _MODE_FRAME_CACHE:
        _MODE_FRAME_CACHE[key] = _ModeFrame(dev, frame_bias)
    return _MODE_FRAME_CACHE[key]


def _y_matrix(d: int) -> np.ndarray:
    a = np.diag(np.sqrt(np.arange(1, d)), 1)
    return (a + a.T) / np.sqrt(2.0)


def _q2_matrix(d: int) -> np.ndarray:
    a = np.diag(np.sqrt(np.arange(1, d)), 1)
    ad = a.T
    return (ad @ a + a @ ad - ad @ ad - a @ a) / 2.0


def _charge_matrix(d: int) -> np.ndarray:
    q = (d - 1) // 2
    return np.diag(np.arange(-q, q + 1).astype(float))


def _shift_matrix(d: int, s: int) -> np.ndarray:
    return np.eye(d, k=-s)


# ---------------------------------------------------------------------------
# assembled device Hamiltonian


class DeviceHamiltonian:
    """Hamiltonian of one device at one bias, real symmetric.

    Exposes a dense matrix for small dimensions and a matrix-free
    ``LinearOperator`` for large ones, plus application of the loop-phase
    operators needed downstream.
    """

    def __init__(
        self,
        dev: DeviceSpec,
        bias: FluxBias,
        basis: BasisConfig,
        frame_bias: FluxBias | None = None,
    ):
        frame = _mode_frame(dev, frame_bias or frame_bucket(bias))
        base = frame.base
        nc = base.n_compact
        if len(basis.dims) != nc + 3:
            raise QuantizerError(
                f"basis needs {nc + 3} dimensions "
                f"({nc} charge + 3 oscillator), got {len(basis.dims)}"
            )
        if basis.kinds:
            expected = frame.dof_kinds()
            if tuple(basis.kinds) != expected:
                raise QuantizerError(
                    "basis kinds must match the device coordinate structure "
                    f"{expected}: compact junction combinations need the "
                    "fourier basis, inductively shunted coordinates the "
                    "oscillator basis"
                )
        if any(d % 2 == 0 for d in basis.dims[:nc]):
            raise QuantizerError("charge dimensions must be odd")
        self.dev = dev
        self.bias = bias
        self.basis = basis
        self.frame = frame
        self.dims = basis.dims
        self.total_dim = basis.total_dim
        self.n_compact = nc

        g, v0, w = frame.bias_terms(bias)
        self.v0 = v0
        self.offsets = w

        ext_dims = basis.dims[nc:]
        self._y = [_y_matrix(d) for d in ext_dims]
        self._q2 = [_q2_matrix(d) for d in ext_dims]
        self._n = [_charge_matrix(d) for d in basis.dims[:nc]]

        # single-factor blocks
        singles: list[np.ndarray | None] = [None] * (nc + 3)
        for i in range(nc):
            M = 0.5 * base.kin_cc[i, i] * (self._n[i] @ self._n[i])
            singles[i] = M
        Q = frame.q_exact
        for j in range(3):
            singles[nc + j] = (
                0.5 * frame.kin_coeff[j] * self._q2[j]
                + 0.5 * Q[j, j] * (self._y[j] @ self._y[j])
                + g[j] * self._y[j]
            )
        self._single = singles
        self._pairs = [
            (i, j, base.kin_cc[i, j])
            for i in range(nc)
            for j in range(i + 1, nc)
            if base.kin_cc[i, j] != 0.0
        ]
        self._pairs += [
            (nc + i, nc + j, Q[i, j])
            for i in range(3)
            for j in range(i + 1, 3)
            if Q[i, j] != 0.0
        ]
        self._pair_ops = {
            i: (self._n[i] if i < nc else self._y[i - nc])
            for i in set(a for a, _, _ in self._pairs)
            | set(b for _, b, _ in self._pairs)
        }

        factors = frame.exp_factors(ext_dims)
        gamma_const = base.te @ frame.center
        self._cos = []
        for k in range(len(dev.junctions)):
            shifts = [
                (i, _shift_matrix(basis.dims[i], int(base.m_int[k, i])))
                for i in range(nc)
                if base.m_int[k, i] != 0
            ]
            self._cos.append(
                (
                    -base.ej[k],
                    np.exp(1j * gamma_const[k]),
                    shifts,
                    factors[k],
                )
            )
        # with charge shifts the Hamiltonian is complex Hermitian (it still
        # commutes with conjugation composed with charge reflection, which
        # is used later to gauge all matrix elements real)
        self.is_complex = any(shifts for _, _, shifts, _ in self._cos)
        self.dtype = complex if self.is_complex else float

    # -- matrix-free application ------------------------------------------

    def _apply_axis(self, psi: np.ndarray, M: np.ndarray, axis: int) -> np.ndarray:
        out = np.tensordot(M, psi, axes=(1, axis))
        return np.moveaxis(out, 0, axis)

    def matvec(self, vec: np.ndarray) -> np.ndarray:
        # accepts a single vector or a matrix of column vectors
        psi = vec.reshape(self.dims + (-1,))
        out = (self.v0 * psi).astype(self.dtype)
        for i, M in enumerate(self._single):
            out = out + self._apply_axis(psi, M, i)
        for i, j, q in self._pairs:
            tmp = self._apply_axis(psi, self._pair_ops[i], i)
            out = out + q * self._apply_axis(tmp, self._pair_ops[j], j)
        for ej, z, shifts, row in self._cos:
            tmp = psi.astype(complex)
            for j, F in enumerate(row):
                tmp = self._apply_axis(tmp, F, self.n_compact + j)
            if not shifts:
                # all factors symmetric: the conjugate chain is the
                # elementwise conjugate, so cos psi = Re(z P psi)
                out = out + ej * (z * tmp).real
                continue
            fwd = tmp
            for i, Sm in shifts:
                fwd = self._apply_axis(fwd, Sm, i)
            bwd = psi.astype(complex)
            for j, F in enumerate(row):
                bwd = self._apply_axis(bwd, F.conj(), self.n_compact + j)
            for i, Sm in shifts:
                bwd = self._apply_axis(bwd, Sm.T, i)
            out = out + (0.5 * ej) * (z * fwd + np.conj(z) * bwd)
        return out.reshape(vec.shape)

    def apply_phase(self, vec: np.ndarray, loop: str) -> np.ndarray:
        """Apply the loop-phase operator (offset included) to a vector."""
        li = LOOPS.index(loop)
        const = self.offsets[li] + float(self.frame.center[li])
        coeffs = self.frame.S[li]
        psi = vec.reshape(self.dims + (-1,))
        out = const * psi
        for j, c in enumerate(coeffs):
            if c != 0.0:
                out = out + c * self._apply_axis(psi, self._y[j], self.n_compact + j)
        return out.reshape(vec.shape)

    # -- dense assembly -----------------------------------------------------

    def to_dense(self) -> np.ndarray:
        D = self.total_dim
        H = np.zeros((D, D), dtype=self.dtype)
        H[np.diag_indices(D)] += self.v0
        for i, M in enumerate(self._single):
            H += _kron_at(self.dims, {i: M})
        for i, j, q in self._pairs:
            H += q * _kron_at(
                self.dims, {i: self._pair_ops[i], j: self._pair_ops[j]}
            )
        for ej, z, shifts, row in self._cos:
            mats: dict[int, np.ndarray] = {i: Sm for i, Sm in shifts}
            mats.update({self.n_compact + j: F for j, F in enumerate(row)})
            P = z * _kron_at(self.dims, mats)
            if self.is_complex:
                H += (0.5 * ej) * (P + P.conj().T)
            else:
                H += ej * P.real
        asym = np.max(np.abs(H - H.conj().T))
        if asym > 1e-10 * max(1.0, np.max(np.abs(H))):
            raise QuantizerError(f"non-Hermitian assembly, asymmetry {asym:.2e}")
        return H

    def operator(self) -> spla.LinearOperator:
        return spla.LinearOperator(
            (self.total_dim, self.total_dim), matvec=self.matvec, dtype=self.dtype
        )


def _kron_at(dims: tuple[int, ...], mats: dict[int, np.ndarray]) -> np.ndarray:
    out = np.array([[1.0]])
    for i, d in enumerate(dims):
        M = mats.get(i)
        if M is None:
            M = np.eye(d)
        out = np.kron(out, M)
    return out


def default_kinds(dev: DeviceSpec) -> tuple[str, ...]:
    """Basis kinds imposed by the device coordinate structure."""
    nc = _device_frame(dev).n_compact
    return ("fourier",) * nc + ("oscillator",) * 3


def device_hamiltonian(
    dev: DeviceSpec,
    bias: FluxBias,
    basis: BasisConfig,
    frame_bias: FluxBias | None = None,
) -> np.ndarray:
    """Dense Hermitian device Hamiltonian in GHz.

    For dimensions above the dense limit use :class:`DeviceHamiltonian`
    directly to avoid materializing the matrix.
    """
    ham = DeviceHamiltonian(dev, bias, basis, frame_bias=frame_bias)
    if ham.total_dim > 16384:
        raise QuantizerError(
            f"dimension {ham.total_dim} too large to materialize; "
            "use DeviceHamiltonian.operator()"
        )
    return ham.to_dense()


def _fix_phases(vecs: np.ndarray) -> np.ndarray:
    idx = np.argmax(np.abs(vecs), axis=0)
    signs = np.sign(np.real(vecs[idx, np.arange(vecs.shape[1])]))
    signs[signs == 0] = 1.0
    return vecs * signs


def _realized(m: np.ndarray, scale: float) -> np.ndarray:
    """Drop a vanishing imaginary part, keeping complex if it is genuine."""
    if not np.iscomplexobj(m):
        return m
    if np.max(np.abs(m.imag)) <= 1e-8 * max(scale, 1.0):
        return np.ascontiguousarray(m.real)
    return m


def _theta_gauge(
    vecs: np.ndarray, dims: tuple[int, ...], n_compact: int
) -> np.ndarray:
    """Rotate eigenvector phases into the gauge where matrix elements of
    charge-reflection-invariant real operators are real.

    The Hamiltonian commutes with the antiunitary map (complex
    conjugation composed with charge reflection n -> -n), so every
    non-degenerate eigenvector equals its image up to a phase, which is
    split off here.
    """
    shaped = vecs.reshape(dims + (-1,))
    mirrored = shaped.conj()
    for axis in range(n_compact):
        mirrored = np.flip(mirrored, axis=axis)
    mirrored = mirrored.reshape(vecs.shape)
    out = np.empty_like(vecs)
    for j in range(vecs.shape[1]):
        p = np.vdot(vecs[:, j], mirrored[:, j])
        if abs(p) < 0.5:
            # degenerate pair mixed by the solver: leave as is
            out[:, j] = vecs[:, j]
            continue
        out[:, j] = vecs[:, j] * np.exp(0.5j * np.angle(p))
    return out


def diagonalize_device(
    dev: DeviceSpec,
    bias: FluxBias,
    basis: BasisConfig,
    frame_bias: FluxBias | None = None,
) -> DeviceEigensystem:
    """Lowest eigenstates of a device plus the operator blocks used downstream.

    Uses a dense solver for small bases and a Lanczos solver with a
    deterministic start vector otherwise.  Raises on non-convergence with
    the residual norm in the message.
    """
    ham = DeviceHamiltonian(dev, bias, basis, frame_bias=frame_bias)
    kept = basis.kept_states
    if ham.total_dim <= DENSE_DIMENSION_LIMIT:
        H = ham.to_dense()
        energies, vecs = scipy.linalg.eigh(H)
        energies, vecs = energies[:kept], vecs[:, :kept]
    else:
        op = ham.operator()
        v0 = np.full(ham.total_dim, 1.0 / np.sqrt(ham.total_dim))
        ncv = min(ham.total_dim - 1, max(2 * kept + 24, 40))
        try:
            energies, vecs = spla.eigsh(
                op, k=kept, which="SA", v0=v0, tol=EIGSH_TOL, ncv=ncv, maxiter=9000
            )
        except spla.ArpackNoConvergence as err:
            raise QuantizerError(
                f"device eigensolver did not converge: {err}"
            ) from err
        order = np.argsort(energies)
        energies, vecs = energies[order], vecs[:, order]
        residual = np.linalg.norm(
            ham.matvec(vecs[:, 0]) - energies[0] * vecs[:, 0]
        )
        if residual > 1e-6 * max(1.0, abs(energies[0])):
            raise QuantizerError(
                f"device eigensolver residual too large: {residual:.2e}"
            )
    if ham.is_complex:
        vecs = _theta_gauge(vecs, ham.dims, ham.n_compact)
    vecs = _fix_phases(vecs)

    phi_vecs = {loop: ham.apply_phase(vecs, loop) for loop in LOOPS}
    phi = {}
    for loop in LOOPS:
        m = vecs.conj().T @ phi_vecs[loop]
        m = 0.5 * (m + m.conj().T)
        phi[loop] = _realized(m, scale=np.max(np.abs(m)))
    phi_prod = {}
    for b1 in LOOPS:
        for b2 in LOOPS:
            m = phi_vecs[b1].conj().T @ phi_vecs[b2]
            phi_prod[(b1, b2)] = _realized(m, scale=np.max(np.abs(m)))

    lm, ls1, ls2 = dev.loop_inductances
    current_main = phase_to_current_na(lm) * phi["m"]
    current_sec = 0.5 * (
        phase_to_current_na(ls2) * phi["s2"] - phase_to_current_na(ls1) * phi["s1"]
    )
    return DeviceEigensystem(
        energies=energies,
        phi=phi,
        phi_prod=phi_prod,
        current_main=current_main,
        current_sec=current_sec,
        basis=basis,
        bias=bias,
    )


def basis_convergence_check(
    dev: DeviceSpec,
    bias: FluxBias,
    basis: BasisConfig,
    growth: float = 1.3,
    levels: int = 4,
    frame_bias: FluxBias | None = None,
) -> dict:
    """Re-diagonalize with every dimension scaled by ``growth``.

    Returns a report with the maximum relative change of the lowest
    ``levels`` energies (relative to ``max(|E|, 1 GHz)``) and the absolute
    ground-energy drift.
    """
    grown = basis.grown(growth)
    es_a = diagonalize_device(dev, bias, basis, frame_bias=frame_bias)
    es_b = diagonalize_device(dev, bias, grown, frame_bias=frame_bias)
    n = min(levels, es_a.kept, es_b.kept)
    ea, eb = es_a.energies[:n], es_b.energies[:n]
    rel = np.abs(ea - eb) / np.maximum(np.abs(eb), 1.0)
    return {
        "dims": basis.dims,
        "grown_dims": grown.dims,
        "levels": n,
        "max_rel_change": float(np.max(rel)),
        "ground_abs_change": float(abs(ea[0] - eb[0])),
    }


# ---------------------------------------------------------------------------
# automatic basis sizing


def suggest_basis(
    dev: DeviceSpec,
    bias: FluxBias,
    kept_states: int | None = None,
    target: float = 1e-4,
    levels: int = 8,
    max_rounds: int = 6,
    criterion: str = "levels",
) -> BasisConfig:
    """Adaptive basis: start from a displacement heuristic, grow to target.

    Starting oscillator dimensions cover the classical minima (coherent
    displacement plus tail) with extra room for soft modes; charge windows
    start at +/-5.  Dimensions grow geometrically until
    :func:`basis_convergence_check` passes.  With ``criterion="levels"``
    the test is the relative change of the lowest ``levels`` energies
    (< ``target``); with ``criterion="ground"`` it is the absolute
    ground-energy drift in GHz, appropriate when only ground-energy
    differences are consumed.
    """
    frame_bias_b = frame_bucket(bias)
    frame = _mode_frame(dev, frame_bias_b)
    kept = kept_states or DEFAULT_KEPT[dev.kind]
    disp = (
        np.max(np.abs(frame.S_inv @ (frame.minima_e - frame.center).T), axis=1)
        if len(frame.minima_e)
        else np.zeros(3)
    )
    occ = disp**2 / 2.0
    base = np.select(
        [frame.omega < 30, frame.omega < 100, frame.omega < 400],
        [10, 7, 5],
        default=4,
    )
    ext = np.clip(np.ceil(occ + 4.0 * np.sqrt(occ) + base), 4, 72)
    dims = (11,) * frame.n_compact + tuple(int(d) for d in ext)
    basis = BasisConfig(dims, kept, frame.dof_kinds())
    for _ in range(max_rounds):
        report = basis_convergence_check(
            dev, bias, basis, growth=1.3, levels=levels, frame_bias=frame_bias_b
        )
        metric = (
            report["max_rel_change"]
            if criterion == "levels"
            else report["ground_abs_change"]
        )
        if metric < target:
            return basis
        basis = basis.grown(1.3)
    raise QuantizerError(
        f"basis did not converge to {target} within {max_rounds} growth rounds"
    )


_BASIS_CACHE: dict[tuple, BasisConfig] = {}


def production_basis(
    dev: DeviceSpec,
    bias: FluxBias,
    kept_states: int | None = None,
    target: float = 1e-4,
    criterion: str = "levels",
) -> BasisConfig:
    """Adaptive basis for a device, cached per frame bucket.

    Sweeps and Monte Carlo loops reuse the basis determined at the nearest
    bucket point; the convergence guarantee transfers because the frame is
    shared and the flux shifts involved are small.
    """
    bucket = frame_bucket(bias)
    kept = kept_states or DEFAULT_KEPT[dev.kind]
    key = (_device_key(dev), bucket.f_m, bucket.f_s, kept, target, criterion)
    if key not in _BASIS_CACHE:
        _BASIS_CACHE[key] = suggest_basis(
            dev, bucket, kept_states=kept, target=target, criterion=criterion
        )
    return _BASIS_CACHE[key]


# ---------------------------------------------------------------------------
# composite system


@dataclass(frozen=True)
class CompositeEigensystem:
    """Low-energy eigendata of the coupled five-device system.

    Eigenvector coefficients live in the product basis of the kept device
    eigenstates; ``device_dims`` records the per-device kept counts in
    :data:`DEVICE_ORDER` order.
    """

    energies: np.ndarray
    vectors: np.ndarray
    device_dims: tuple[int, ...]
    labels: tuple[str, ...] = field(default=DEVICE_ORDER)

    @property
    def relative_energies(self) -> np.ndarray:
        return self.energies - self.energies[0]


class CompositeHamiltonian:
    """Coupled-system Hamiltonian projected on device eigenbases.

    The interaction is every term of the quadratic interaction-energy form
    expanded over device loop-phase operators, including the intra-device
    diagonal blocks (evaluated in the full device bases before
    projection).
    """

    def __init__(
        self,
        spec: SystemSpec,
        eigensystems: list[DeviceEigensystem],
        device_indices: tuple[int, ...] | None = None,
    ):
        devices = device_indices or tuple(range(5))
        if len(eigensystems) != len(devices):
            raise QuantizerError("one eigensystem per selected device")
        self.spec = spec
        self.device_indices = devices
        self.eigensystems = list(eigensystems)
        self.dims = tuple(es.kept for es in eigensystems)
        self.total_dim = int(np.prod(self.dims))

        G = interaction_energy_matrix(spec)
        # on-site part: device energies plus intra-device corrections
        self._site = []
        for a, es in zip(devices, eigensystems):
            block = np.diag(es.energies).astype(float)
            for b1 in range(3):
                for b2 in range(3):
                    g = G[loop_index(a, b1), loop_index(a, b2)]
                    if g != 0.0:
                        block = block + g * es.phi_prod[(LOOPS[b1], LOOPS[b2])]
            self._site.append(0.5 * (block + block.T))
        # cross-device terms
        self._cross = []
        for ia, a in enumerate(devices):
            for ib, b in enumerate(devices[ia + 1 :], start=ia + 1):
                for b1 in range(3):
                    for b2 in range(3):
                        g = G[loop_index(a, b1), loop_index(b, b2)]
                        if g != 0.0:
                            self._cross.append(
                                (
                                    ia,
                                    eigensystems[ia].phi[LOOPS[b1]],
                                    ib,
                                    eigensystems[ib].phi[LOOPS[b2]],
                                    2.0 * g,
                                )
                            )

    def _apply_axis(self, psi, M, axis):
        out = np.tensordot(M, psi, axes=(1, axis))
        return np.moveaxis(out, 0, axis)

    def matvec(self, vec: np.ndarray) -> np.ndarray:
        psi = vec.reshape(self.dims + (-1,))
        out = np.zeros_like(psi)
        for a, M in enumerate(self._site):
            out = out + self._apply_axis(psi, M, a)
        for a, Ma, b, Mb, g in self._cross:
            tmp = self._apply_axis(psi, Ma, a)
            out = out + g * self._apply_axis(tmp, Mb, b)
        return out.reshape(vec.shape)

    def operator(self) -> spla.LinearOperator:
        return spla.LinearOperator(
            (self.total_dim, self.total_dim), matvec=self.matvec, dtype=float
        )

    def to_dense(self) -> np.ndarray:
        H = np.zeros((self.total_dim, self.total_dim))
        for a, M in enumerate(self._site):
            H += _kron_at(self.dims, {a: M})
        for a, Ma, b, Mb, g in self._cross:
            H += g * _kron_at(self.dims, {a: Ma, b: Mb})
        return H


def composite_hamiltonian(
    spec: SystemSpec, eigensystems: list[DeviceEigensystem]
) -> CompositeHamiltonian:
    """Hierarchical coupled-system Hamiltonian over kept device states."""
    return CompositeHamiltonian(spec, eigensystems)


def diagonalize_composite(
    spec: SystemSpec,
    eigensystems: list[DeviceEigensystem],
    k: int = 16,
    device_indices: tuple[int, ...] | None = None,
) -> CompositeEigensystem:
    """Lowest ``k`` levels of the coupled system (at least 16)."""
    k = max(k, 16)
    comp = CompositeHamiltonian(spec, eigensystems, device_indices=device_indices)
    if comp.total_dim <= max(1024, 4 * k):
        H = comp.to_dense()
        energies, vecs = scipy.linalg.eigh(H)
        energies, vecs = energies[:k], vecs[:, :k]
    else:
        v0 = np.full(comp.total_dim, 1.0 / np.sqrt(comp.total_dim))
        ncv = min(comp.total_dim - 1, max(3 * k, 48))
        try:
            energies, vecs = spla.eigsh(
                comp.operator(),
                k=k,
                which="SA",
                v0=v0,
                tol=EIGSH_TOL,
                ncv=ncv,
                maxiter=10000,
            )
        except spla.ArpackNoConvergence as err:
            raise QuantizerError(
                f"composite eigensolver did not converge: {err}"
            ) from err
        order = np.argsort(energies)
        energies, vecs = energies[order], vecs[:, order]
    gram = vecs.T @ vecs
    if np.max(np.abs(gram - np.eye(len(energies)))) > 1e-8:
        raise QuantizerError("composite eigenvectors are not orthonormal to 1e-8")
    return CompositeEigensystem(
        energies=energies, vectors=_fix_phases(vecs), device_dims=comp.dims
    )
