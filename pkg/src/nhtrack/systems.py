"""Built-in benchmark systems: the nonholonomic particle and the Chaplygin
sleigh, both expressed in adapted coordinates."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import AdmissibleState, SystemModel

Array = np.ndarray


@dataclass(frozen=True)
class SleighParams:
    """Physical parameters of the Chaplygin sleigh.

    mass_m: body mass (kg), inertia_J: moment of inertia about the contact
    point axis (kg m^2), offset_a: distance from the contact point to the
    center of mass (m).  The quadratic coupling coefficient is
    eta = a sqrt(m) / (J + m a^2).
    """

    mass_m: float = 1.0
    inertia_J: float = 4.0
    offset_a: float = 0.2

    def __post_init__(self) -> None:
        if self.mass_m <= 0:
            raise ValueError(f"mass_m must be positive, got {self.mass_m}")
        if self.inertia_J <= 0:
            raise ValueError(f"inertia_J must be positive, got {self.inertia_J}")
        if self.offset_a < 0:
            raise ValueError(f"offset_a must be nonnegative, got {self.offset_a}")
        if self.inertia_J + self.mass_m * self.offset_a**2 <= 0:
            raise ValueError("J + m a^2 must be positive")

    @property
    def eta(self) -> float:
        return (
            self.offset_a
            * math.sqrt(self.mass_m)
            / (self.inertia_J + self.mass_m * self.offset_a**2)
        )


def particle_model() -> SystemModel:
    """Particle in R^3 subject to the nonholonomic constraint xdot + y zdot = 0.

    Adapted basis Y_1 = d/dy, Y_2 = -y d/dx + d/dz, so q = (x, y, z) and
    v = (v1, v2) with xdot = -y v2, ydot = v1, zdot = v2.  The constrained
    metric is diag(1, 1 + y^2); its only nonzero connection coefficient is
    Gamma^2_{12} = y / (1 + y^2), giving

        v1dot = u1,    v2dot = -(y / (1 + y^2)) v1 v2 + u2.

    Note the basis is orthogonal but not orthonormal (Y_2 has squared length
    1 + y^2), so the stored Gamma is the metric one, not the output of
    christoffel_from_structure on this frame's structure constants.
    """

    def rho(q: Array) -> Array:
        y = q[1]
        return np.array([[0.0, -y], [1.0, 0.0], [0.0, 1.0]])

    def rho_jac(q: Array) -> Array:
        jac = np.zeros((3, 2, 3))
        jac[0, 1, 1] = -1.0
        return jac

    def christoffel(q: Array) -> Array:
        y = q[1]
        gamma = np.zeros((2, 2, 2))
        gamma[1, 0, 1] = y / (1.0 + y * y)
        return gamma

    def christoffel_jac(q: Array) -> Array:
        y = q[1]
        jac = np.zeros((2, 2, 2, 3))
        jac[1, 0, 1, 1] = (1.0 - y * y) / (1.0 + y * y) ** 2
        return jac

    def metric_d(q: Array) -> Array:
        y = q[1]
        return np.array([[1.0, 0.0], [0.0, 1.0 + y * y]])

    def potential_grad(q: Array) -> Array:
        return np.zeros(2)

    def annihilator(q: Array) -> Array:
        y = q[1]
        return np.array([[1.0, 0.0, y]])

    return SystemModel(
        n=3,
        corank=1,
        rho=rho,
        rho_jac=rho_jac,
        christoffel=christoffel,
        metric_d=metric_d,
        potential_grad=potential_grad,
        annihilator=annihilator,
        angle_indices=frozenset(),
        name="particle",
        christoffel_jac=christoffel_jac,
    )


def particle_structure_constants(q: Array) -> Array:
    """Bracket structure constants of the particle's adapted frame:
    [Y_1, Y_2] = (y / (1 + y^2)) Y_2, layout C[c, a, b] = C^c_{ab}."""
    y = np.asarray(q, dtype=float)[1]
    c = np.zeros((2, 2, 2))
    c[1, 0, 1] = y / (1.0 + y * y)
    c[1, 1, 0] = -c[1, 0, 1]
    return c


def sleigh_model(params: SleighParams = SleighParams()) -> SystemModel:
    """Chaplygin sleigh in its orthonormal adapted frame.

    q = (x1, x2, theta); the knife-edge constraint is
    sin(theta) x1dot - cos(theta) x2dot = 0.  With s = sqrt(J + m a^2) the
    frame columns are e_1 = (0, 0, 1/s) and
    e_2 = (cos theta / sqrt(m), sin theta / sqrt(m), 0); the constrained
    metric in this frame is the identity and the dynamics read

        v1dot = -eta v1 v2 + u1,    v2dot = eta (v1)^2 + u2.

    The stored Gamma is the orthonormal-frame structure-constant output
    (Gamma^1_{12} = eta, Gamma^2_{11} = -eta), which contracts to exactly
    these equations.
    """
    eta = params.eta
    inv_s = 1.0 / math.sqrt(params.inertia_J + params.mass_m * params.offset_a**2)
    inv_sm = 1.0 / math.sqrt(params.mass_m)

    def rho(q: Array) -> Array:
        th = q[2]
        return np.array(
            [
                [0.0, math.cos(th) * inv_sm],
                [0.0, math.sin(th) * inv_sm],
                [inv_s, 0.0],
            ]
        )

    def rho_jac(q: Array) -> Array:
        th = q[2]
        jac = np.zeros((3, 2, 3))
        jac[0, 1, 2] = -math.sin(th) * inv_sm
        jac[1, 1, 2] = math.cos(th) * inv_sm
        return jac

    gamma_const = np.zeros((2, 2, 2))
    gamma_const[0, 0, 1] = eta
    gamma_const[1, 0, 0] = -eta

    def christoffel(q: Array) -> Array:
        return gamma_const.copy()

    def christoffel_jac(q: Array) -> Array:
        return np.zeros((2, 2, 2, 3))

    def metric_d(q: Array) -> Array:
        return np.eye(2)

    def potential_grad(q: Array) -> Array:
        return np.zeros(2)

    def annihilator(q: Array) -> Array:
        th = q[2]
        return np.array([[math.sin(th), -math.cos(th), 0.0]])

    return SystemModel(
        n=3,
        corank=1,
        rho=rho,
        rho_jac=rho_jac,
        christoffel=christoffel,
        metric_d=metric_d,
        potential_grad=potential_grad,
        annihilator=annihilator,
        angle_indices=frozenset({2}),
        name="sleigh",
        christoffel_jac=christoffel_jac,
    )


def sleigh_structure_constants(params: SleighParams) -> Array:
    """Structure constants of the sleigh frame: [e_1, e_2] = eta e_1,
    layout C[c, a, b] = C^c_{ab}.  Constant in q (the frame is of constant
    bracket type)."""
    c = np.zeros((2, 2, 2))
    c[0, 0, 1] = params.eta
    c[0, 1, 0] = -params.eta
    return c


def restricted_lagrangian(model: SystemModel, state: AdmissibleState) -> float:
    """Restricted Lagrangian l(q, v) = 1/2 v^T G_D(q) v.

    Both built-in systems are purely kinetic (no potential), so this equals
    the restricted energy.
    """
    g = model.metric_d(state.q)
    return 0.5 * float(state.v @ g @ state.v)


SLEIGH_PRESETS: dict[str, SleighParams] = {
    "paper-5.1": SleighParams(mass_m=1.0, inertia_J=4.0, offset_a=0.2),
}


def available_systems() -> list[str]:
    """Preset names accepted by resolve_system, for CLI listings."""
    names = ["particle"]
    names.extend(f"sleigh:{key}" for key in sorted(SLEIGH_PRESETS))
    names.append("sleigh:custom")
    return names


def resolve_system(
    name: str,
    *,
    mass_m: float | None = None,
    inertia_J: float | None = None,
    offset_a: float | None = None,
) -> SystemModel:
    """Resolve a system preset name into a SystemModel.

    Accepted names: "particle", "sleigh" (default parameters),
    "sleigh:<preset>" for a named parameter set, or "sleigh:custom" with all
    of mass_m, inertia_J, offset_a supplied.
    """
    if name == "particle":
        return particle_model()
    if name == "sleigh":
        return sleigh_model()
    if name.startswith("sleigh:"):
        key = name.split(":", 1)[1]
        if key == "custom":
            missing = [
                field
                for field, value in (
                    ("mass_m", mass_m),
                    ("inertia_J", inertia_J),
                    ("offset_a", offset_a),
                )
                if value is None
            ]
            if missing:
                raise ValueError(
                    f"sleigh:custom requires parameters {', '.join(missing)}"
                )
            return sleigh_model(
                SleighParams(mass_m=mass_m, inertia_J=inertia_J, offset_a=offset_a)
            )
        if key in SLEIGH_PRESETS:
            return sleigh_model(SLEIGH_PRESETS[key])
        raise ValueError(
            f"unknown sleigh preset {key!r}; known: {sorted(SLEIGH_PRESETS)}"
        )
    raise ValueError(f"unknown system {name!r}; known: {available_systems()}")
