"""Electrical model of the three-qubit, two-coupler circuit.

The system contains three capacitively shunted flux qubits (q1, q2, q3)
and two tunable rf-SQUID couplers (c1, c2).  Qubits 1 and 2 couple through
mutual inductances to the coupler main loops; qubit 3 couples to the two
branches of each coupler secondary loop.  This module owns the declarative
description of the devices plus the capacitance, inductance and
interaction-energy matrices consumed by the quantizer.

Matrix ordering convention (shared by all modules): loop coordinates are
ordered ``(q1, q2, q3, c1, c2) x (m, s1, s2)``, giving 15 loop entries.
"""

from __future__ import annotations

import dataclasses
import enum
import hashlib
import json
from dataclasses import dataclass

import numpy as np

from .constants import inductive_energy_ghz

SCHEMA_VERSION = 1

DEVICE_ORDER = ("q1", "q2", "q3", "c1", "c2")
LOOPS = ("m", "s1", "s2")

#: Orientation of the two secondary-loop branches as seen by qubit 3.
#: The branches are traversed in opposite directions around the secondary
#: loop, so a common flux from the qubit-3 main loop enters the two branch
#: loops antisymmetrically.  With this choice a positive qubit-3 current
#: shifts the coupler secondary bias by ``(M_s1 + M_s2) * I / Phi0``, i.e.
#: the sum of the branch mutuals acts on the secondary loop flux.
SECONDARY_BRANCH_SIGNS = (-1.0, 1.0)


class CircuitModelError(ValueError):
    """Invalid electrical description."""


class UnphysicalMutualsError(CircuitModelError):
    """Mutual inductances make the full inductance matrix non positive definite."""


class DeviceKind(str, enum.Enum):
    QUBIT = "csfq-qubit"
    COUPLER = "rf-squid-coupler"


_JUNCTION_COUNT = {DeviceKind.QUBIT: 4, DeviceKind.COUPLER: 2}


@dataclass(frozen=True)
class JunctionSpec:
    """A single Josephson junction.

    Parameters
    ----------
    critical_current : float
        Critical current, nA.  Must be positive.
    capacitance : float
        Intrinsic junction capacitance, fF.  Must be positive.
    """

    critical_current: float
    capacitance: float

    def __post_init__(self):
        if not (self.critical_current > 0):
            raise CircuitModelError("junction critical current must be > 0 nA")
        if not (self.capacitance > 0):
            raise CircuitModelError("junction capacitance must be > 0 fF")


@dataclass(frozen=True)
class DeviceSpec:
    """Electrical description of one qubit or one rf-SQUID coupler.

    A qubit has four junctions (two large ones in the main arm, two small
    ones forming the tunable secondary loop); a coupler has two junctions
    forming its secondary loop.  Each device has a main loop inductance and
    two secondary branch inductances.

    Parameters
    ----------
    kind : DeviceKind
    junctions : tuple of JunctionSpec
        Ordered junction list, 4 for a qubit and 2 for a coupler.
    shunt_capacitance : float
        Shunt capacitance across the secondary-loop terminals, fF.
    main_inductance : float
        Main loop inductance, pH.
    secondary_inductances : (float, float)
        Branch inductances of the secondary loop, pH.
    """

    kind: DeviceKind
    junctions: tuple[JunctionSpec, ...]
    shunt_capacitance: float
    main_inductance: float
    secondary_inductances: tuple[float, float]

    def __post_init__(self):
        kind = DeviceKind(self.kind)
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "junctions", tuple(self.junctions))
        object.__setattr__(
            self, "secondary_inductances", tuple(self.secondary_inductances)
        )
        if len(self.junctions) != _JUNCTION_COUNT[kind]:
            raise CircuitModelError(
                f"{kind.value} needs {_JUNCTION_COUNT[kind]} junctions, "
                f"got {len(self.junctions)}"
            )
        if not (self.main_inductance > 0) or not all(
            l > 0 for l in self.secondary_inductances
        ):
            raise CircuitModelError("all inductances must be > 0 pH")
        if self.shunt_capacitance < 0:
            raise CircuitModelError("shunt capacitance must be >= 0 fF")

    @property
    def dof_count(self) -> int:
        """Independent degrees of freedom: one per junction plus the main loop."""
        return len(self.junctions) + 1

    @property
    def loop_inductances(self) -> tuple[float, float, float]:
        """(L_m, L_s1, L_s2) in pH."""
        return (self.main_inductance, *self.secondary_inductances)


@dataclass(frozen=True)
class FluxBias:
    """External reduced fluxes of one device, in units of the flux quantum.

    ``f_m`` threads the main loop, ``f_s`` the secondary loop.  Values are
    stored exactly as given; use :meth:`canonical` for an explicit reduction
    to ``[-1, 1)``.  No reduction is ever applied implicitly.
    """

    f_m: float
    f_s: float

    def __post_init__(self):
        if not (np.isfinite(self.f_m) and np.isfinite(self.f_s)):
            raise CircuitModelError("flux biases must be finite")

    def canonical(self) -> "FluxBias":
        """Equivalent bias with both components reduced to [-1, 1)."""

        def red(f):
            return (f + 1.0) % 2.0 - 1.0

        return FluxBias(red(self.f_m), red(self.f_s))

    def shifted(self, df_m: float = 0.0, df_s: float = 0.0) -> "FluxBias":
        return FluxBias(self.f_m + df_m, self.f_s + df_s)


@dataclass(frozen=True)
class CouplingGraph:
    """Mutual inductances between qubits and couplers, signs explicit.

    Parameters
    ----------
    m_main : 2x2 nested tuple, pH
        ``m_main[i][j]`` couples the main loop of qubit ``i+1`` to the main
        loop of coupler ``j+1``.  The geometric twist in the main loop of
        coupler 2 is carried by the explicit sign of the ``(q1, c2)`` entry;
        there is no separate topology flag.
    m_sec : 2x2 nested tuple, pH
        ``m_sec[j][b]`` couples the main loop of qubit 3 to branch ``b``
        (0 = s1, 1 = s2) of the secondary loop of coupler ``j+1``.  The
        branch orientation convention is :data:`SECONDARY_BRANCH_SIGNS`.
    """

    m_main: tuple[tuple[float, float], tuple[float, float]]
    m_sec: tuple[tuple[float, float], tuple[float, float]]

    def __post_init__(self):
        object.__setattr__(self, "m_main", tuple(tuple(row) for row in self.m_main))
        object.__setattr__(self, "m_sec", tuple(tuple(row) for row in self.m_sec))
        if len(self.m_main) != 2 or any(len(r) != 2 for r in self.m_main):
            raise CircuitModelError("m_main must be 2x2 (qubit i, coupler j)")
        if len(self.m_sec) != 2 or any(len(r) != 2 for r in self.m_sec):
            raise CircuitModelError("m_sec must be 2x2 (coupler j, branch b)")


@dataclass(frozen=True)
class SystemSpec:
    """Complete electrical model: 3 qubits, 2 couplers, couplings, biases.

    ``biases`` holds one :class:`FluxBias` per device, ordered as
    :data:`DEVICE_ORDER`.
    """

    qubits: tuple[DeviceSpec, DeviceSpec, DeviceSpec]
    couplers: tuple[DeviceSpec, DeviceSpec]
    coupling: CouplingGraph
    biases: tuple[FluxBias, FluxBias, FluxBias, FluxBias, FluxBias]

    def __post_init__(self):
        object.__setattr__(self, "qubits", tuple(self.qubits))
        object.__setattr__(self, "couplers", tuple(self.couplers))
        object.__setattr__(self, "biases", tuple(self.biases))
        if len(self.qubits) != 3 or any(
            q.kind is not DeviceKind.QUBIT for q in self.qubits
        ):
            raise CircuitModelError("need exactly 3 qubit DeviceSpecs")
        if len(self.couplers) != 2 or any(
            c.kind is not DeviceKind.COUPLER for c in self.couplers
        ):
            raise CircuitModelError("need exactly 2 coupler DeviceSpecs")
        if len(self.biases) != 5:
            raise CircuitModelError("need one FluxBias per device (5 total)")
        # reject mutuals at or beyond the physical bound |M| < sqrt(L1*L2)
        for i in range(2):
            for j in range(2):
                bound = np.sqrt(
                    self.qubits[i].main_inductance * self.couplers[j].main_inductance
                )
                if abs(self.coupling.m_main[i][j]) >= bound:
                    raise UnphysicalMutualsError(
                        f"|m_main[{i}][{j}]| exceeds sqrt(L_q*L_c) = {bound:.1f} pH"
                    )
        for j in range(2):
            for b in range(2):
                bound = np.sqrt(
                    self.qubits[2].main_inductance
                    * self.couplers[j].secondary_inductances[b]
                )
                if abs(self.coupling.m_sec[j][b]) >= bound:
                    raise UnphysicalMutualsError(
                        f"|m_sec[{j}][{b}]| exceeds sqrt(L_q*L_s) = {bound:.1f} pH"
                    )

    @property
    def devices(self) -> tuple[DeviceSpec, ...]:
        return self.qubits + self.couplers

    def device(self, name: str) -> DeviceSpec:
        return self.devices[DEVICE_ORDER.index(name)]

    def bias(self, name: str) -> FluxBias:
        return self.biases[DEVICE_ORDER.index(name)]

    def with_bias(self, name: str, bias: FluxBias) -> "SystemSpec":
        """Copy of the spec with one device bias replaced."""
        idx = DEVICE_ORDER.index(name)
        biases = list(self.biases)
        biases[idx] = bias
        return dataclasses.replace(self, biases=tuple(biases))

    def with_biases(self, **named: FluxBias) -> "SystemSpec":
        spec = self
        for name, bias in named.items():
            spec = spec.with_bias(name, bias)
        return spec

    def with_device(self, name: str, dev: DeviceSpec) -> "SystemSpec":
        idx = DEVICE_ORDER.index(name)
        if name.startswith("q"):
            qubits = list(self.qubits)
            qubits[idx] = dev
            return dataclasses.replace(self, qubits=tuple(qubits))
        couplers = list(self.couplers)
        couplers[idx - 3] = dev
        return dataclasses.replace(self, couplers=tuple(couplers))


def default_system() -> SystemSpec:
    """The nominal parameter set: identical qubits and identical rf-SQUIDs.

    Qubit junctions are 221.0 nA / 4.5 fF (main arm) and 102.0 nA / 2.0 fF
    (secondary loop), with a 40 fF shunt, a 250 pH main loop and 10 pH
    branches.  Couplers have 600 nA / 12 fF junctions, a 10 fF shunt, a
    550 pH main loop and 85 pH branches.  Main-loop mutuals are 50 pH in
    magnitude and branch mutuals 25 pH; the sign of the (q1, c2) entry is
    reversed by the twist in the main loop of coupler 2.  Default biases
    put every device at its main-loop symmetry point, the qubits at zero
    secondary flux and the couplers at f_s = +/-0.3.
    """
    qubit = DeviceSpec(
        kind=DeviceKind.QUBIT,
        junctions=(
            JunctionSpec(221.0, 4.5),
            JunctionSpec(221.0, 4.5),
            JunctionSpec(102.0, 2.0),
            JunctionSpec(102.0, 2.0),
        ),
        shunt_capacitance=40.0,
        main_inductance=250.0,
        secondary_inductances=(10.0, 10.0),
    )
    coupler = DeviceSpec(
        kind=DeviceKind.COUPLER,
        junctions=(JunctionSpec(600.0, 12.0), JunctionSpec(600.0, 12.0)),
        shunt_capacitance=10.0,
        main_inductance=550.0,
        secondary_inductances=(85.0, 85.0),
    )
    coupling = CouplingGraph(
        m_main=((-50.0, 50.0), (-50.0, -50.0)),
        m_sec=((-25.0, -25.0), (-25.0, -25.0)),
    )
    biases = (
        FluxBias(0.5, 0.0),
        FluxBias(0.5, 0.0),
        FluxBias(0.5, 0.0),
        FluxBias(0.5, 0.3),
        FluxBias(0.5, -0.3),
    )
    return SystemSpec(
        qubits=(qubit, qubit, qubit),
        couplers=(coupler, coupler),
        coupling=coupling,
        biases=biases,
    )


def loop_index(device: int | str, loop: int | str) -> int:
    """Index of a loop coordinate in the 15-dimensional ordering."""
    d = DEVICE_ORDER.index(device) if isinstance(device, str) else device
    b = LOOPS.index(loop) if isinstance(loop, str) else loop
    return 3 * d + b


def inductance_matrices(spec: SystemSpec) -> tuple[np.ndarray, np.ndarray]:
    """Full and uncoupled inductance matrices of the 15 loop coordinates.

    Returns
    -------
    (L, L0) : ndarray, pH
        ``L`` carries device loop inductances on the diagonal and the
        mutual inductances off-diagonal; ``L0`` is ``L`` with every mutual
        zeroed.  Raises :class:`UnphysicalMutualsError` if ``L`` is not
        positive definite.
    """
    L0 = np.diag(
        [l for dev in spec.devices for l in dev.loop_inductances]
    ).astype(float)
    L = L0.copy()
    for i in range(2):
        for j in range(2):
            a, b = loop_index(i, "m"), loop_index(3 + j, "m")
            L[a, b] = L[b, a] = spec.coupling.m_main[i][j]
    q3 = loop_index("q3", "m")
    for j in range(2):
        for branch in range(2):
            b = loop_index(3 + j, 1 + branch)
            val = SECONDARY_BRANCH_SIGNS[branch] * spec.coupling.m_sec[j][branch]
            L[q3, b] = L[b, q3] = val
    try:
        np.linalg.cholesky(L)
    except np.linalg.LinAlgError:
        raise UnphysicalMutualsError(
            "unphysical mutuals: full inductance matrix is not positive definite"
        )
    return L, L0


def interaction_energy_matrix(spec: SystemSpec) -> np.ndarray:
    """Quadratic interaction-energy form over the 15 loop phases.

    Returns the symmetric matrix ``G`` such that the mutual-inductance
    interaction energy is ``phi^T G phi`` summed over all ordered pairs,
    i.e. ``G = (phi0^2/2) (L^-1 - L0^-1)`` expressed in GHz/rad^2.
    """
    L, L0 = inductance_matrices(spec)
    Linv = np.linalg.inv(L)
    L0inv = np.diag(1.0 / np.diag(L0))
    diff = Linv - L0inv
    # inductive_energy_ghz(1 pH) == phi0^2 / (1 pH) / h, so entries of
    # diff (1/pH) convert by the same factor
    G = 0.5 * inductive_energy_ghz(1.0) * diff
    return 0.5 * (G + G.T)


# velocity combination across the secondary-loop terminals; the shunt
# capacitor hangs across those terminals
_SHUNT_COMBINATION = {
    DeviceKind.QUBIT: np.array([1.0, -1.0, 0.0, 0.0, -1.0]),
    DeviceKind.COUPLER: np.array([0.0, 0.0, 1.0]),
}


def capacitance_matrix(dev: DeviceSpec) -> np.ndarray:
    """Capacitance matrix over the device coordinates (gamma_1..k, phi_m), fF.

    Each junction capacitance sits on its own junction-phase coordinate.
    The shunt capacitance connects the two terminals of the secondary loop,
    whose voltage is a fixed linear combination of the coordinate
    velocities (for a qubit ``d/dt (gamma_1 - gamma_2 - phi_m)``, for a
    coupler ``d/dt phi_m``), so it adds a rank-one block on that
    combination.  The result is positive semidefinite for any device and
    positive definite whenever the shunt capacitance is nonzero.
    """
    n = dev.dof_count
    C = np.zeros((n, n))
    for k, j in enumerate(dev.junctions):
        C[k, k] = j.capacitance
    u = _SHUNT_COMBINATION[dev.kind]
    C = C + dev.shunt_capacitance * np.outer(u, u)
    if np.linalg.eigvalsh(C)[0] < -1e-12:
        raise CircuitModelError("invalid capacitance network")
    return C


# ---------------------------------------------------------------------------
# serialization


def _junction_to_dict(j: JunctionSpec) -> dict:
    return {"critical_current": j.critical_current, "capacitance": j.capacitance}


def _device_to_dict(d: DeviceSpec) -> dict:
    return {
        "kind": d.kind.value,
        "junctions": [_junction_to_dict(j) for j in d.junctions],
        "shunt_capacitance": d.shunt_capacitance,
        "main_inductance": d.main_inductance,
        "secondary_inductances": list(d.secondary_inductances),
    }


def system_to_dict(spec: SystemSpec) -> dict:
    """JSON-ready description of a system.

    Units: currents nA, capacitances fF, inductances pH, fluxes in units
    of the flux quantum.  The schema version is embedded for forward
    compatibility.
    """
    return {
        "schema_version": SCHEMA_VERSION,
        "units": {
            "current": "nA",
            "capacitance": "fF",
            "inductance": "pH",
            "flux": "Phi0",
        },
        "qubits": [_device_to_dict(q) for q in spec.qubits],
        "couplers": [_device_to_dict(c) for c in spec.couplers],
        "coupling": {
            "m_main": [list(r) for r in spec.coupling.m_main],
            "m_sec": [list(r) for r in spec.coupling.m_sec],
        },
        "biases": {
            name: {"f_m": b.f_m, "f_s": b.f_s}
            for name, b in zip(DEVICE_ORDER, spec.biases)
        },
    }


def _device_from_dict(d: dict) -> DeviceSpec:
    return DeviceSpec(
        kind=DeviceKind(d["kind"]),
        junctions=tuple(
            JunctionSpec(j["critical_current"], j["capacitance"])
            for j in d["junctions"]
        ),
        shunt_capacitance=d["shunt_capacitance"],
        main_inductance=d["main_inductance"],
        secondary_inductances=tuple(d["secondary_inductances"]),
    )


def system_from_dict(data: dict) -> SystemSpec:
    version = data.get("schema_version")
    if version != SCHEMA_VERSION:
        raise CircuitModelError(f"unsupported schema version: {version!r}")
    return SystemSpec(
        qubits=tuple(_device_from_dict(q) for q in data["qubits"]),
        couplers=tuple(_device_from_dict(c) for c in data["couplers"]),
        coupling=CouplingGraph(
            m_main=tuple(tuple(r) for r in data["coupling"]["m_main"]),
            m_sec=tuple(tuple(r) for r in data["coupling"]["m_sec"]),
        ),
        biases=tuple(
            FluxBias(data["biases"][name]["f_m"], data["biases"][name]["f_s"])
            for name in DEVICE_ORDER
        ),
    )


def system_to_json(spec: SystemSpec) -> str:
    return json.dumps(system_to_dict(spec), indent=2, sort_keys=True)


def system_from_json(text: str) -> SystemSpec:
    return system_from_dict(json.loads(text))


def spec_hash(spec: SystemSpec) -> str:
    """Stable content hash of a system (used as a cache key component)."""
    canonical = json.dumps(system_to_dict(spec), sort_keys=True)
    return hashlib.sha256(canonical.encode()).hexdigest()[:16]
