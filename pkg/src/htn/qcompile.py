"""Compile arbitrary matrices into post-selected circuits and execute them
on an exact statevector simulator.

A matrix M (d x d, d a power of two) is realized as: apply V^dag from the
SVD M = U S V^dag, rotate one fresh ancilla by angle 2*arccos(s_k / r)
conditioned on each computational basis state k (r the largest singular
value), post-select the ancilla on |0>, then apply U.  Conditioned on all
post-selections succeeding, the output state is M psi / ||M psi|| and the
survival probability is ||M psi||^2 / r^2.

Two layouts are provided: a single shared ancilla (the control patterns are
mutually exclusive, so one ancilla serves every singular value) and a
deferred-measurement variant with one ancilla per singular value.  Gates are
either full-register dense unitaries or controlled Y-rotations; qubit 0 is
the most significant bit of the basis index.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DegenerateInputError,
    FullyPostSelectedError,
    InvalidArgumentError,
    ParseError,
    ShapeMismatchError,
)
from .tncore import asc128

MAX_QUBITS = 12
RETENTION_FLOOR = 1e-15


# ---------------------------------------------------------------------------
# Gate and circuit types


@dataclass(frozen=True)
class UnitaryGate:
    """Dense unitary on the full register."""

    matrix: np.ndarray

    def __post_init__(self):
        m = asc128(self.matrix)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise InvalidArgumentError(f"unitary must be square, got {m.shape}")
        object.__setattr__(self, "matrix", m)


@dataclass(frozen=True)
class ControlledRy:
    """Y-rotation on ``target`` applied when the control qubits match
    ``pattern`` (a bit string, one bit per control qubit, MSB first)."""

    angle: float
    controls: tuple
    pattern: str
    target: int

    def __post_init__(self):
        if len(self.controls) != len(self.pattern):
            raise InvalidArgumentError("one pattern bit per control qubit")
        if any(b not in "01" for b in self.pattern):
            raise InvalidArgumentError(f"bad control pattern {self.pattern!r}")


@dataclass(frozen=True)
class StateVector:
    """Pure state on n qubits; qubit 0 indexes the most significant bit."""

    n_qubits: int
    amplitudes: np.ndarray

    def __post_init__(self):
        amps = asc128(self.amplitudes).reshape(-1)
        if amps.shape[0] != 2**self.n_qubits:
            raise InvalidArgumentError(
                f"need {2**self.n_qubits} amplitudes, got {amps.shape[0]}"
            )
        nrm = np.linalg.norm(amps)
        if abs(nrm - 1.0) > 1e-12:
            raise InvalidArgumentError(f"state norm {nrm} is not 1")
        object.__setattr__(self, "amplitudes", amps)

    @classmethod
    def from_amplitudes(cls, amps):
        amps = asc128(amps).reshape(-1)
        n = int(round(math.log2(amps.shape[0])))
        return cls(n_qubits=n, amplitudes=amps / np.linalg.norm(amps))

    @classmethod
    def basis(cls, n_qubits, index):
        amps = np.zeros(2**n_qubits, dtype=np.complex128)
        amps[index] = 1.0
        return cls(n_qubits=n_qubits, amplitudes=amps)


@dataclass
class CompiledCircuit:
    """Gate list plus post-selection markers and the rescaling factor."""

    n_qubits: int
    n_system: int
    gates: list = field(default_factory=list)
    postselect: list = field(default_factory=list)
    rescale: float = 1.0

    def __post_init__(self):
        if self.n_qubits > MAX_QUBITS:
            raise InvalidArgumentError(
                f"{self.n_qubits} qubits exceeds the {MAX_QUBITS}-qubit cap"
            )
        if self.rescale <= 0.0:
            raise InvalidArgumentError("rescale factor must be positive")


# ---------------------------------------------------------------------------
# Compilation


def _embed_on_system(mat, n_system, n_total) -> np.ndarray:
    """Full-register matrix acting as ``mat`` on the leading system qubits."""
    return np.kron(asc128(mat), np.eye(2 ** (n_total - n_system)))


def compile_matrix(m, deferred=False) -> CompiledCircuit:
    """Post-selected circuit applying an arbitrary matrix up to rescaling.

    ``m`` must be d x d with d a power of two and not identically zero.
    With ``deferred`` each singular value rotates its own ancilla (deferred
    measurement); otherwise one shared ancilla serves all of them.
    """
    m = asc128(m)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise InvalidArgumentError(f"matrix must be square, got {m.shape}")
    d = m.shape[0]
    n_sys = int(round(math.log2(d)))
    if 2**n_sys != d:
        raise InvalidArgumentError(f"dimension {d} is not a power of two")
    if not np.any(m):
        raise DegenerateInputError("cannot compile the zero matrix")
    u, s, vh = np.linalg.svd(m)
    r = float(s[0])
    n_anc = d if deferred else 1
    n_total = n_sys + n_anc
    circ = CompiledCircuit(n_qubits=n_total, n_system=n_sys, rescale=r)
    circ.gates.append(UnitaryGate(_embed_on_system(vh, n_sys, n_total)))
    controls = tuple(range(n_sys))
    for k in range(d):
        angle = 2.0 * math.acos(min(s[k] / r, 1.0))
        target = n_sys + (k if deferred else 0)
        pattern = format(k, f"0{n_sys}b")
        circ.gates.append(
            ControlledRy(angle=angle, controls=controls, pattern=pattern, target=target)
        )
    circ.gates.append(UnitaryGate(_embed_on_system(u, n_sys, n_total)))
    circ.postselect = [(n_sys + a, 0) for a in range(n_anc)]
    return circ


# ---------------------------------------------------------------------------
# Simulation


def _apply_controlled_ry(amps, n, gate: ControlledRy) -> np.ndarray:
    idx = np.arange(amps.shape[0])
    mask = np.ones(amps.shape[0], dtype=bool)
    for qubit, want in zip(gate.controls, gate.pattern):
        bit = (idx >> (n - 1 - qubit)) & 1
        mask &= bit == int(want)
    tbit = (idx >> (n - 1 - gate.target)) & 1
    c, sn = math.cos(gate.angle / 2.0), math.sin(gate.angle / 2.0)
    out = amps.copy()
    lo = mask & (tbit == 0)
    hi = mask & (tbit == 1)
    flip = 1 << (n - 1 - gate.target)
    out[lo] = c * amps[lo] - sn * amps[idx[lo] | flip]
    out[hi] = sn * amps[idx[hi] & ~flip] + c * amps[hi]
    return out


def simulate(circuit: CompiledCircuit, state: StateVector):
    """Run the circuit and post-select.

    ``state`` covers the system register; ancillas start at |0>.  Returns
    (output StateVector on the full register with ancillas projected to 0,
    retention probability).  Raises FullyPostSelectedError when no weight
    survives.
    """
    if state.n_qubits != circuit.n_system:
        raise ShapeMismatchError(
            f"input covers {state.n_qubits} qubits, system register has "
            f"{circuit.n_system}"
        )
    n = circuit.n_qubits
    amps = state.amplitudes
    for _ in range(n - circuit.n_system):
        amps = np.kron(amps, np.array([1.0, 0.0], dtype=np.complex128))
    for gate in circuit.gates:
        if isinstance(gate, UnitaryGate):
            amps = gate.matrix @ amps
        else:
            amps = _apply_controlled_ry(amps, n, gate)
    idx = np.arange(amps.shape[0])
    keep = np.ones(amps.shape[0], dtype=bool)
    for qubit, want in circuit.postselect:
        bit = (idx >> (n - 1 - qubit)) & 1
        keep &= bit == want
    projected = np.where(keep, amps, 0.0)
    retention = float(np.linalg.norm(projected) ** 2)
    if retention < RETENTION_FLOOR:
        raise FullyPostSelectedError(
            f"retention {retention:.3e} below floor; every shot discarded"
        )
    out = StateVector(n_qubits=n, amplitudes=projected / math.sqrt(retention))
    return out, retention


def system_state(state: StateVector, n_system: int) -> np.ndarray:
    """Amplitudes of the leading system qubits when the rest are at |0>."""
    amps = state.amplitudes.reshape(2**n_system, -1)
    rest = amps[:, 1:]
    if rest.size and np.abs(rest).max() > 1e-12:
        raise InvalidArgumentError("ancilla register is not at |0>")
    return amps[:, 0].copy()


def apply_compiled(m, psi, deferred=False):
    """Compile ``m``, run it on ``psi``, and return (output system
    amplitudes, retention)."""
    circ = compile_matrix(m, deferred=deferred)
    out, retention = simulate(circ, StateVector.from_amplitudes(psi))
    return system_state(out, circ.n_system), retention


# ---------------------------------------------------------------------------
# The two-state separation demonstration


def _toffoli_circuit() -> CompiledCircuit:
    """Toffoli onto a fresh ancilla, post-select it at 0, then X on qubit 1
    to align the surviving branches with |00> and |11>."""
    ccx = np.eye(8, dtype=np.complex128)
    ccx[[6, 7]] = ccx[[7, 6]]
    x1 = np.kron(np.kron(np.eye(2), np.array([[0, 1], [1, 0]])), np.eye(2))
    circ = CompiledCircuit(n_qubits=3, n_system=2, rescale=1.0)
    circ.gates = [UnitaryGate(ccx), UnitaryGate(asc128(x1))]
    circ.postselect = [(2, 0)]
    return circ


def toffoli_separation_demo() -> dict:
    """Separate |+1> and |1+> exactly by discarding the overlapping branch.

    Returns per-input fidelities with the target basis states, retention
    probabilities, and the squared overlap of the raw inputs.
    """
    plus = np.array([1.0, 1.0]) / math.sqrt(2.0)
    one = np.array([0.0, 1.0])
    a = np.kron(plus, one)  # |+1>
    b = np.kron(one, plus)  # |1+>
    circ = _toffoli_circuit()
    report = {"overlap_squared": float(abs(np.vdot(a, b)) ** 2), "inputs": {}}
    for name, vec, target in (("+1", a, 0b00), ("1+", b, 0b11)):
        out, retention = simulate(circ, StateVector.from_amplitudes(vec))
        sys = system_state(out, 2)
        fidelity = float(abs(sys[target]) ** 2)
        report["inputs"][name] = {
            "target": format(target, "02b"),
            "fidelity": fidelity,
            "retention": retention,
        }
    return report


# ---------------------------------------------------------------------------
# Serialization: one gate per line
#   U <row-major entries as re,im pairs>
#   CRY <angle> <controls as q:bit,...> <target>
#   POST <qubit>


def serialize_circuit(circ: CompiledCircuit) -> str:
    lines = [
        f"QUBITS {circ.n_qubits} {circ.n_system}",
        f"RESCALE {float(circ.rescale)!r}",
    ]
    for gate in circ.gates:
        if isinstance(gate, UnitaryGate):
            flat = gate.matrix.reshape(-1)
            ent = " ".join(f"{float(z.real)!r},{float(z.imag)!r}" for z in flat)
            lines.append(f"U {ent}")
        else:
            ctrl = ",".join(
                f"{q}:{b}" for q, b in zip(gate.controls, gate.pattern)
            )
            lines.append(f"CRY {float(gate.angle)!r} {ctrl or '-'} {gate.target}")
    for qubit, want in circ.postselect:
        lines.append(f"POST {qubit}")
    return "\n".join(lines) + "\n"


def parse_circuit(text: str) -> CompiledCircuit:
    n_qubits = n_system = None
    rescale = 1.0
    gates = []
    postselect = []
    for ln, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        kind = parts[0]
        try:
            if kind == "QUBITS":
                n_qubits, n_system = int(parts[1]), int(parts[2])
            elif kind == "RESCALE":
                rescale = float(parts[1])
            elif kind == "U":
                vals = [complex(float(p.split(",")[0]), float(p.split(",")[1]))
                        for p in parts[1:]]
                d = int(round(math.sqrt(len(vals))))
                if d * d != len(vals):
                    raise ValueError(f"{len(vals)} entries is not a square count")
                gates.append(UnitaryGate(np.array(vals).reshape(d, d)))
            elif kind == "CRY":
                angle = float(parts[1])
                if parts[2] == "-":
                    controls, pattern = (), ""
                else:
                    pairs = [p.split(":") for p in parts[2].split(",")]
                    controls = tuple(int(q) for q, _ in pairs)
                    pattern = "".join(b for _, b in pairs)
                gates.append(ControlledRy(angle=angle, controls=controls,
                                          pattern=pattern, target=int(parts[3])))
            elif kind == "POST":
                postselect.append((int(parts[1]), 0))
            else:
                raise ValueError(f"unknown record {kind!r}")
        except (IndexError, ValueError) as exc:
            raise ParseError(str(exc), line=ln) from exc
    if n_qubits is None:
        raise ParseError("missing QUBITS header")
    circ = CompiledCircuit(n_qubits=n_qubits, n_system=n_system,
                           rescale=rescale)
    circ.gates = gates
    circ.postselect = postselect
    return circ
