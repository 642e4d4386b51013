"""Nonholonomic system models in adapted coordinates.

A system lives on a configuration space Q of dimension n with a rank n - m
constraint distribution D.  Admissible velocities are parameterized by
quasi-velocities v relative to a basis of vector fields spanning D, collected
in the n x (n-m) matrix rho(q):

    qdot^i = rho^i_A(q) v^A
    vdot^A = -Gamma^A_{BC}(q) v^B v^C - potential_grad^A(q) + u^A

The annihilator rows mu^a_i(q) span the constraint one-forms, so a velocity is
admissible iff annihilator(q) . qdot = 0.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

Array = np.ndarray


@dataclass(frozen=True)
class SystemModel:
    """Immutable description of a nonholonomic system in adapted coordinates.

    All callables are pure functions of the configuration q and safe to call
    concurrently.  Index conventions:

    - rho(q)[i, A] = rho^i_A
    - rho_jac(q)[i, A, j] = d rho^i_A / d q^j
    - christoffel(q)[A, B, C] = Gamma^A_{BC}, contracted as
      Gamma^A_{BC} v^B v^C in the dynamics
    - metric_d(q)[A, B] = (G_D)_{AB}, symmetric positive definite
    - potential_grad(q)[A] = (G_D)^{AB} rho^i_B dV/dq^i (zero for the
      built-in models, which carry no potential)
    - annihilator(q)[a, i] = mu^a_i
    - christoffel_jac, when provided, returns the exact Gamma derivative
      [A, B, C, j] = d Gamma^A_{BC} / d q^j; solvers that need it fall back
      to finite differences when it is None.
    """

    n: int
    corank: int
    rho: Callable[[Array], Array]
    rho_jac: Callable[[Array], Array]
    christoffel: Callable[[Array], Array]
    metric_d: Callable[[Array], Array]
    potential_grad: Callable[[Array], Array]
    annihilator: Callable[[Array], Array]
    angle_indices: frozenset[int] = field(default_factory=frozenset)
    name: str = "unnamed"
    christoffel_jac: Callable[[Array], Array] | None = None

    def __post_init__(self) -> None:
        if self.n <= 0:
            raise ValueError(f"SystemModel.n must be positive, got {self.n}")
        if not 0 < self.corank < self.n:
            raise ValueError(
                f"SystemModel.corank must lie in (0, n), got {self.corank}"
            )
        bad = [i for i in self.angle_indices if not 0 <= i < self.n]
        if bad:
            raise ValueError(f"SystemModel.angle_indices out of range: {bad}")

    @property
    def rank(self) -> int:
        """Rank of the distribution, n - m."""
        return self.n - self.corank


@dataclass(frozen=True)
class AdmissibleState:
    """A point of the constraint distribution: configuration q plus
    quasi-velocities v.  The induced configuration velocity is rho(q) v by
    construction, so every AdmissibleState lies on D."""

    q: Array
    v: Array

    def __post_init__(self) -> None:
        object.__setattr__(self, "q", np.asarray(self.q, dtype=float))
        object.__setattr__(self, "v", np.asarray(self.v, dtype=float))

    def as_vector(self) -> Array:
        return np.concatenate([self.q, self.v])

    @staticmethod
    def from_vector(y: Array, n: int) -> "AdmissibleState":
        y = np.asarray(y, dtype=float)
        return AdmissibleState(q=y[:n].copy(), v=y[n:].copy())


@dataclass(frozen=True)
class ControlVector:
    """Control inputs in quasi-velocity coordinates (fully actuated)."""

    u: Array

    def __post_init__(self) -> None:
        object.__setattr__(self, "u", np.asarray(self.u, dtype=float))


def _as_control(u: ControlVector | Array) -> Array:
    if isinstance(u, ControlVector):
        return u.u
    return np.asarray(u, dtype=float)


def _check_state(model: SystemModel, state: AdmissibleState) -> None:
    if state.q.shape != (model.n,):
        raise ValueError(
            f"state.q has shape {state.q.shape}, expected ({model.n},)"
        )
    if state.v.shape != (model.rank,):
        raise ValueError(
            f"state.v has shape {state.v.shape}, expected ({model.rank},)"
        )


def admissibility_velocity(model: SystemModel, state: AdmissibleState) -> Array:
    """Configuration velocity qdot = rho(q) v induced by a point of D."""
    _check_state(model, state)
    return model.rho(state.q) @ state.v


def dynamics_rhs(
    model: SystemModel,
    state: AdmissibleState,
    u: ControlVector | Array,
) -> tuple[Array, Array]:
    """Controlled equations of motion in adapted coordinates.

    Returns (qdot, vdot) with qdot = rho(q) v and
    vdot^A = -Gamma^A_{BC} v^B v^C - potential_grad^A + u^A.
    """
    _check_state(model, state)
    uu = _as_control(u)
    if uu.shape != (model.rank,):
        raise ValueError(f"u has shape {uu.shape}, expected ({model.rank},)")
    gamma = model.christoffel(state.q)
    qdot = model.rho(state.q) @ state.v
    vdot = (
        -np.einsum("abc,b,c->a", gamma, state.v, state.v)
        - model.potential_grad(state.q)
        + uu
    )
    return qdot, vdot


def constraint_residual(model: SystemModel, q: Array, qdot: Array) -> Array:
    """Constraint one-forms evaluated on a velocity: annihilator(q) . qdot.

    Zero exactly when qdot lies in the distribution at q.
    """
    q = np.asarray(q, dtype=float)
    qdot = np.asarray(qdot, dtype=float)
    return model.annihilator(q) @ qdot


def christoffel_from_structure(structure: Array) -> Array:
    """Connection coefficients from bracket structure constants.

    For a frame whose brackets have constant-coefficient expansion
    [e_A, e_B] = C^C_{AB} e_C with C antisymmetric in the lower indices,
    returns

        Gamma^C_{AB} = (C^B_{CA} + C^A_{CB} + C^C_{AB}) / 2.

    Input and output layout: array[X, Y, Z] = (.)^X_{YZ}.  The formula is the
    orthonormal-frame specialization; frames that are orthogonal but not
    orthonormal in the constrained metric fall outside its domain and must
    supply their Christoffel symbols directly.
    """
    s = np.asarray(structure, dtype=float)
    if s.ndim != 3 or len(set(s.shape)) != 1:
        raise ValueError(f"structure must be a cubic 3-d array, got {s.shape}")
    if not np.allclose(s, -np.transpose(s, (0, 2, 1)), atol=1e-12):
        raise ValueError("structure constants must satisfy C^C_AB = -C^C_BA")
    term_b_ca = np.einsum("bca->cab", s)
    term_a_cb = np.einsum("acb->cab", s)
    return 0.5 * (term_b_ca + term_a_cb + s)


def restricted_energy(model: SystemModel, state: AdmissibleState) -> float:
    """Kinetic energy of the constrained metric, (1/2) v^T G_D(q) v.

    The built-in models carry no potential, so this is the conserved energy
    of their uncontrolled flow.
    """
    _check_state(model, state)
    g = model.metric_d(state.q)
    return 0.5 * float(state.v @ g @ state.v)


def wrap_angle(x: Array | float) -> Array | float:
    """Wrap angle differences into (-pi, pi]."""
    return -np.mod(-np.asarray(x) + np.pi, 2.0 * np.pi) + np.pi


def state_difference(
    model: SystemModel, state: AdmissibleState, other: AdmissibleState
) -> tuple[Array, Array]:
    """Componentwise (q - q', v - v') with angle components wrapped
    into (-pi, pi]."""
    dq = state.q - other.q
    for i in model.angle_indices:
        dq[i] = wrap_angle(dq[i])
    return dq, state.v - other.v
