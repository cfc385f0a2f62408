"""
Variational integrator for the Herglotz principle on Q x R.

A discrete Lagrangian L_d(q0, q1, S0) approximates the action of one step. The discrete
Herglotz equations

    D1 L_d(q1, q2, S1) + (1 + DS L_d(q1, q2, S1)) D2 L_d(q0, q1, S0) = 0
    S1 = S0 + (q1 - q0) . D2 L_d(q0, q1, S0)

advance a pair of positions (q0, q1) and the entropy S0 to (q1, q2) and S1. The entropy
update follows the thermodynamic law Sdot = qdot . dL/dqdot, so for mechanical Lagrangians the
discrete momenta and entropies stay Legendre-related to the contact Hamiltonian flow.
"""
from dataclasses import dataclass
from typing import Callable, NamedTuple

import torch

from .contact import dot, join, split
from .errors import ConfigError
from .field import DTYPE, ContactPoint, as_tensor, finite_difference_gradient
from .newton import solve


@dataclass
class DiscreteLagrangian:
    """
    L_d and its partials, all batched: q0 and q1 are (..., n) and S0 is (...).
    D1 and D2 return (..., n), DS returns (...).
    """
    n: int
    h: float
    value: Callable
    D1: Callable
    D2: Callable
    DS: Callable
    name: str = 'L_d'


def discretize_lagrangian_midpoint(lag, h):
    "L_d(q0, q1, S0) = h L((q0 + q1)/2, (q1 - q0)/h, S0)"
    if not h > 0:
        raise ConfigError(f'step size h must be positive, got {h}')

    def point(q0, q1, S0):
        q0, q1, S0 = torch.broadcast_tensors(q0, q1, S0[..., None])
        return join((q0 + q1) / 2, (q1 - q0) / h, S0[..., 0])

    def value(q0, q1, S0):
        return h * lag(point(q0, q1, S0))

    def D1(q0, q1, S0):
        Lq, Lv, _ = lag.partials(point(q0, q1, S0))
        return h * Lq / 2 - Lv

    def D2(q0, q1, S0):
        Lq, Lv, _ = lag.partials(point(q0, q1, S0))
        return h * Lq / 2 + Lv

    def DS(q0, q1, S0):
        return h * lag.partials(point(q0, q1, S0))[2]

    return DiscreteLagrangian(lag.n, h, value, D1, D2, DS, name=f'midpoint[{lag.name}]')


def discrete_entropy(Ld, q0, q1, S0):
    return S0 + dot(q1 - q0, Ld.D2(q0, q1, S0))


def herglotz_residual(Ld, q0, q1, S0):
    S1 = discrete_entropy(Ld, q0, q1, S0)
    p1 = Ld.D2(q0, q1, S0)

    def residual(q2):
        prev = q1.expand_as(q2)
        entropy = S1.expand(q2.shape[:-1])
        return Ld.D1(prev, q2, entropy) + (1 + Ld.DS(prev, q2, entropy))[..., None] * p1
    return residual


def herglotz_solve(Ld, cfg, q0, q1, S0):
    "One step (q0, q1, S0) -> q2 of the discrete Herglotz equations, predicted by 2 q1 - q0."
    return solve(herglotz_residual(Ld, q0, q1, S0), 2 * q1 - q0, tol=cfg.newton_tol,
                 max_iters=cfg.max_newton_iters, fd_step=cfg.fd_jacobian_step)


def herglotz_step(Ld, cfg, q0, q1, S0):
    """Returns (q1, q2, S1)."""
    q0, q1, S0 = as_tensor(q0), as_tensor(q1), as_tensor(S0)
    q2 = herglotz_solve(Ld, cfg, q0, q1, S0).x
    return q1, q2, discrete_entropy(Ld, q0, q1, S0)


def herglotz_harmonic_closed_form(gamma, h, q0, q1, S0):
    "The step for L = qdot^2/2 - q^2/2 - gamma S in closed form."
    q2 = (gamma*h**3*q0 + gamma*h**3*q1 + 4*gamma*h*q0 - 4*gamma*h*q1
          - h**2*q0 - 2*h**2*q1 - 4*q0 + 8*q1) / (h**2 + 4)
    S1 = S0 + (q1 - q0)**2 / h - h * (q1**2 - q0**2) / 4
    return q1, q2, S1


def herglotz_harmonic_closed_form_step(gamma, cfg, q0, q1, S0):
    q0, q1, S0 = as_tensor(q0), as_tensor(q1), as_tensor(S0)
    return herglotz_harmonic_closed_form(gamma, cfg.h, q0, q1, S0)


class HerglotzCarry(NamedTuple):
    """
    Two consecutive positions and the entropy at the first. `at_prev` marks the starting carry,
    which is observed at q_prev rather than q_curr.
    """
    q_prev: torch.Tensor
    q_curr: torch.Tensor
    S_prev: torch.Tensor
    at_prev: bool


class HerglotzStepper:
    """
    Steps (q0, q1, S0) and reports contact states (q_k, p_k, S_k) with the discrete momenta

        p_0 = -D1 L_d(q0, q1, S0) / (1 + DS L_d(q0, q1, S0))
        p_k = D2 L_d(q_{k-1}, q_k, S_{k-1})

    so that the first reported step needs no solve.
    """

    def __init__(self, lag, config, H=None, discretization=discretize_lagrangian_midpoint):
        from .systems import hamiltonian_of_lagrangian

        self.lag = lag
        self.config = config
        self.n = lag.n
        self.Ld = discretization(lag, config.h)
        self.H = H if H is not None else hamiltonian_of_lagrangian(lag)

    def start(self, initial):
        q0, q1, S0 = split(as_tensor(initial))
        return HerglotzCarry(q0, q1, S0, True)

    def momentum(self, carry):
        q0, q1, S0, at_prev = carry
        if at_prev:
            return -self.Ld.D1(q0, q1, S0) / (1 + self.Ld.DS(q0, q1, S0))[..., None]
        return self.Ld.D2(q0, q1, S0)

    def observe(self, carry):
        q0, q1, S0, at_prev = carry
        p = self.momentum(carry)
        if at_prev:
            return join(q0, p, S0)
        return join(q1, p, S0 + dot(q1 - q0, p))

    def energy(self, x):
        return self.H(x).item()

    def advance(self, q0, q1, S0):
        result = herglotz_solve(self.Ld, self.config, q0, q1, S0)
        return (q1, result.x, discrete_entropy(self.Ld, q0, q1, S0)), result.iterations, result.residual

    def step(self, carry):
        if carry.at_prev:
            return carry._replace(at_prev=False), 0, 0.
        (q1, q2, S1), iterations, residual = self.advance(carry.q_prev, carry.q_curr, carry.S_prev)
        return HerglotzCarry(q1, q2, S1, False), iterations, residual


class HarmonicHerglotzStepper(HerglotzStepper):
    def __init__(self, gamma, config):
        from .systems import damped_oscillator, hamiltonian_of, lagrangian_of

        system = damped_oscillator(gamma)
        super().__init__(lagrangian_of(system), config, H=hamiltonian_of(system))
        self.gamma = gamma

    def advance(self, q0, q1, S0):
        _, q2, S1 = herglotz_harmonic_closed_form(self.gamma, self.config.h, q0, q1, S0[..., None])
        return (q1, q2, S1[..., 0]), 0, 0.


DISPLACED_OSCILLATOR = (0., 1., 0.) # q0, q1, S0 with h = gamma = 0.1


def test_closed_form_values():
    q1, q2, S1 = herglotz_harmonic_closed_form(0.1, 0.1, 0., 1., 0.)
    assert q1 == 1.
    assert abs(q2 - 7.9401 / 4.01) < 1e-12
    assert abs(S1 - 9.975) < 1e-12

    from .integrators import StepperConfig
    _, q2, S1 = herglotz_harmonic_closed_form_step(0.1, StepperConfig(h=0.1), [0.], [1.], 0.)
    assert abs(q2.item() - 7.9401 / 4.01) < 1e-12
    assert abs(S1.item() - 9.975) < 1e-12


def test_midpoint_partials():
    from .systems import damped_oscillator, lagrangian_of

    h, gamma = 0.1, 0.1
    Ld = discretize_lagrangian_midpoint(lagrangian_of(damped_oscillator(gamma)), h)
    q0, q1, S0 = torch.tensor([0.3], dtype=DTYPE), torch.tensor([-1.2], dtype=DTYPE), torch.tensor(2., dtype=DTYPE)
    assert torch.allclose(Ld.D2(q0, q1, S0), -h * (q0 + q1) / 4 + (q1 - q0) / h, rtol=1e-14)
    assert torch.allclose(Ld.D1(q0, q1, S0), -h * (q0 + q1) / 4 - (q1 - q0) / h, rtol=1e-14)
    assert abs(Ld.DS(q0, q1, S0).item() + h * gamma) < 1e-15


def test_partials_match_finite_differences(generator):
    from .field import random_points
    from .systems import quartic_lagrangian

    Ld = discretize_lagrangian_midpoint(quartic_lagrangian(gamma=0.2, coupling=0.3), 0.1)
    for q0, q1, S0 in random_points(20, 3, generator):
        y = torch.stack([q0, q1, S0])
        numeric = finite_difference_gradient(lambda z: Ld.value(z[..., :1], z[..., 1:2], z[..., 2]), y)
        q0, q1, S0 = q0.reshape(1), q1.reshape(1), S0
        exact = (Ld.D1(q0, q1, S0).item(), Ld.D2(q0, q1, S0).item(), Ld.DS(q0, q1, S0).item())
        for fd, partial in zip(numeric.tolist(), exact):
            assert abs(fd - partial) / max(abs(partial), 1.) < 1e-5


def test_generic_step_matches_closed_form():
    from .integrators import StepperConfig, integrate
    from .systems import damped_oscillator, hamiltonian_of, lagrangian_of

    cfg = StepperConfig(h=0.1)
    system = damped_oscillator(0.1)
    generic = integrate(HerglotzStepper(lagrangian_of(system), cfg, H=hamiltonian_of(system)), DISPLACED_OSCILLATOR, 1000)
    closed = integrate(HarmonicHerglotzStepper(0.1, cfg), DISPLACED_OSCILLATOR, 1000)
    assert (generic.stacked() - closed.stacked()).abs().max() < 1e-10
    assert max(generic.residuals) <= cfg.newton_tol


def test_first_rows():
    from .integrators import StepperConfig, integrate

    trajectory = integrate(HarmonicHerglotzStepper(0.1, StepperConfig(h=0.1)), DISPLACED_OSCILLATOR, 2)
    rows = trajectory.stacked()
    assert rows[0].tolist()[0] == 0. and rows[0].tolist()[2] == 0.
    # p0 = -D1 / (1 - h gamma) at (0, 1, 0)
    assert abs(rows[0, 1].item() - (1 / 0.1 + 0.1 / 4) / 0.99) < 1e-12
    assert rows[1, 0].item() == 1.
    assert abs(rows[1, 1].item() - (10 - 0.025)) < 1e-12
    assert abs(rows[1, 2].item() - 9.975) < 1e-12
    assert abs(rows[2, 0].item() - 7.9401 / 4.01) < 1e-12
    assert trajectory.iterations == [0, 0, 0]


def test_entropy_and_energy_over_long_runs():
    from .integrators import StepperConfig, integrate

    trajectory = integrate(HarmonicHerglotzStepper(0.1, StepperConfig(h=0.1)), DISPLACED_OSCILLATOR, 1000)
    S = trajectory.entropy
    # single steps may lose a little entropy, pairs of steps never do
    assert (S[2:] - S[:-2]).min() >= -1e-12
    assert trajectory.entropy_increments.min() > -1e-2
    H = torch.tensor(trajectory.energy)
    amplitude = lambda window: (window.max() - window.min()).item()
    assert amplitude(H[500:]) <= amplitude(H[:501])


def test_convergence_order():
    from .integrators import StepperConfig, convergence_order, damped_oscillator_exact

    gamma = 0.1
    exact = damped_oscillator_exact(gamma, (0., 10., 0.))
    order = convergence_order(lambda h: HarmonicHerglotzStepper(gamma, StepperConfig(h=h)),
                              lambda h: torch.tensor([0., exact(h)[0].item(), 0.], dtype=DTYPE),
                              [0.1, 0.05, 0.025, 0.0125], 10., exact)
    # the 1 - h gamma damping factor leaves a first order term that shows on this grid
    assert 1.5 <= order <= 2.5


def test_quartic_lagrangian_steps():
    from .integrators import StepperConfig, integrate
    from .systems import quartic_lagrangian

    cfg = StepperConfig(h=0.05)
    trajectory = integrate(HerglotzStepper(quartic_lagrangian(gamma=0.05), cfg), (0., 0.05, 0.), 200)
    assert max(trajectory.residuals) <= cfg.newton_tol
    assert trajectory.entropy[-1] > trajectory.entropy[0]
    H = torch.tensor(trajectory.energy)
    assert (H - H[0]).abs().max() <= 0.1 * H[0]


def test_observe_is_a_contact_point():
    from .integrators import StepperConfig

    stepper = HarmonicHerglotzStepper(0.1, StepperConfig(h=0.1))
    carry = stepper.start(DISPLACED_OSCILLATOR)
    assert carry.at_prev
    assert ContactPoint(stepper.observe(carry)).n == 1
    carry, iterations, _ = stepper.step(carry)
    assert not carry.at_prev and iterations == 0
    assert carry.q_curr.item() == 1.


if __name__ == '__main__':
    import pytest
    pytest.main(["--no-header", "-v", "-s", __file__])
