"""
Time steppers on (T*Q x R, Lambda) and the loop that drives them.

The discrete-gradient scheme solves

    (x1 - x0) / h = sharp_{(x0 + x1)/2} G(x0, x1)

for x1, where G is a discrete gradient of H. Skew-symmetry of Lambda gives H(x1) = H(x0)
up to the solver tolerance; for H quadratic in p the S increment is h p_mid . dH/dp >= 0.
"""
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .contact import evolution, sharp, split
from .errors import ConfigError, IntegrationFailure, ThermoError
from .field import DTYPE, ContactPoint, as_tensor
from .gradients import DiscreteGradientRule, discrete_gradient
from .newton import NewtonResult, solve


@dataclass
class StepperConfig:
    h: float = 0.1
    newton_tol: float = 1e-12
    max_newton_iters: int = 50
    fd_jacobian_step: float = 1e-7

    def __post_init__(self):
        if not self.h > 0:
            raise ConfigError(f'step size h must be positive, got {self.h}')
        if not self.newton_tol > 0:
            raise ConfigError(f'newton_tol must be positive, got {self.newton_tol}')
        if self.max_newton_iters < 1:
            raise ConfigError(f'max_newton_iters must be at least 1, got {self.max_newton_iters}')

    @classmethod
    def add_arguments(cls, parser):
        parser.add_argument('--h', type=float, default=None, help='step size (overrides the config file)')
        parser.add_argument('--newton_tol', type=float, default=cls.newton_tol, help='max-norm residual of implicit solves')
        parser.add_argument('--max_newton_iters', type=int, default=cls.max_newton_iters, help='Newton iterations before the fixed-point fallback')
        parser.add_argument('--fd_jacobian_step', type=float, default=cls.fd_jacobian_step, help='central difference step of Newton Jacobians')

    @classmethod
    def from_args(cls, args, h):
        return cls(h=h, newton_tol=args.newton_tol, max_newton_iters=args.max_newton_iters,
                   fd_jacobian_step=args.fd_jacobian_step)

    def state_dict(self):
        return asdict(self)


@dataclass
class Trajectory:
    n: int
    times: list = field(default_factory=list)
    states: list = field(default_factory=list) # (q, p, S) tensors of shape (2n+1,)
    energy: list = field(default_factory=list)
    iterations: list = field(default_factory=list)
    residuals: list = field(default_factory=list)

    def append(self, t, state, energy, iterations=0, residual=0.):
        if self.times and not t > self.times[-1]:
            raise ValueError(f'trajectory times must increase, got {t} after {self.times[-1]}')
        self.times.append(float(t))
        self.states.append(state)
        self.energy.append(float(energy))
        self.iterations.append(int(iterations))
        self.residuals.append(float(residual))

    def __len__(self):
        return len(self.times)

    def stacked(self):
        return torch.stack(self.states) if self.states else torch.empty(0, 2*self.n + 1, dtype=DTYPE)

    @property
    def entropy(self):
        return self.stacked()[:, -1]

    @property
    def entropy_increments(self):
        return torch.diff(self.entropy)

    def point(self, k):
        return ContactPoint(self.states[k])

    def header(self):
        suffix = (lambda i: f'_{i}') if self.n > 1 else (lambda i: '')
        return (['step', 't'] + [f'q{suffix(i+1)}' for i in range(self.n)] + [f'p{suffix(i+1)}' for i in range(self.n)]
                + ['S', 'H', 'dS'])

    def rows(self):
        "[step, t, q..., p..., S, H, dS] per recorded state, dS = 0 on the first row"
        rows = []
        for k, (t, state, H) in enumerate(zip(self.times, self.states, self.energy)):
            dS = 0. if k == 0 else (state[-1] - self.states[k-1][-1]).item()
            rows.append([k, t] + state.tolist() + [H, dS])
        return rows

    def summary(self):
        H0 = self.energy[0]
        increments = self.entropy_increments
        return {
            'steps': len(self) - 1,
            'max_abs_H_drift': max(abs(H - H0) for H in self.energy),
            'min_dS': increments.min().item() if len(increments) else 0.,
            'newton_iterations_max': max(self.iterations),
            'newton_iterations_mean': sum(self.iterations[1:]) / max(len(self) - 1, 1),
            'newton_residual_max': max(self.residuals),
        }

    def state_dict(self):
        return {
            'n': self.n,
            'times': list(self.times),
            'states': [state.tolist() for state in self.states],
            'energy': list(self.energy),
            'iterations': list(self.iterations),
            'residuals': list(self.residuals),
        }

    @classmethod
    def from_state_dict(cls, state_dict):
        return cls(n=state_dict['n'],
                   times=list(state_dict['times']),
                   states=[torch.tensor(state, dtype=DTYPE) for state in state_dict['states']],
                   energy=list(state_dict['energy']),
                   iterations=list(state_dict['iterations']),
                   residuals=list(state_dict['residuals']))


def dg_residual(H, rule, h, x0):
    def residual(x1):
        start = x0.expand_as(x1)
        return x1 - start - h * sharp((start + x1) / 2, discrete_gradient(rule, H, start, x1))
    return residual


def dg_solve(H, rule, cfg, x):
    "Implicit discrete-gradient step, predicted by explicit Euler."
    x = as_tensor(x)
    guess = x + cfg.h * evolution(H, x)
    return solve(dg_residual(H, rule, cfg.h, x), guess, tol=cfg.newton_tol,
                 max_iters=cfg.max_newton_iters, fd_step=cfg.fd_jacobian_step)


def dg_step(H, rule, cfg, x):
    return ContactPoint(dg_solve(H, rule, cfg, x).x)


def dg_harmonic_closed_form(gamma, h, x):
    q0, p0, S0 = x[..., 0], x[..., 1], x[..., 2]
    D = 2*gamma*h + h**2 + 4
    q1 = (2*gamma*h*q0 - h**2*q0 + 4*h*p0 + 4*q0) / D
    p1 = -(2*gamma*h*p0 + h**2*p0 + 4*h*q0 - 4*p0) / D
    S1 = S0 + 4*h*(2*p0 - h*q0)**2 / D**2
    return torch.stack([q1, p1, S1], dim=-1)


def dg_harmonic_closed_form_step(gamma, cfg, x):
    "Midpoint discrete-gradient step for H = p^2/2 + q^2/2 + gamma S in closed form."
    x = as_tensor(x)
    assert x.shape[-1] == 3, 'the closed form is for one degree of freedom'
    return ContactPoint(dg_harmonic_closed_form(gamma, cfg.h, x))


def euler_step(H, cfg, x):
    x = as_tensor(x)
    return ContactPoint(x + cfg.h * evolution(H, x))


class DiscreteGradientStepper:
    def __init__(self, H, rule, config):
        self.H = H
        self.rule = rule
        self.config = config
        self.n = H.n

    def start(self, initial):
        return as_tensor(initial)

    def observe(self, x):
        return x

    def energy(self, x):
        return self.H(x).item()

    def step(self, x):
        result = dg_solve(self.H, self.rule, self.config, x)
        return result.x, result.iterations, result.residual


class HarmonicDiscreteGradientStepper(DiscreteGradientStepper):
    def __init__(self, gamma, config):
        from .systems import damped_oscillator, hamiltonian_of
        super().__init__(hamiltonian_of(damped_oscillator(gamma)), DiscreteGradientRule('midpoint'), config)
        self.gamma = gamma

    def step(self, x):
        return dg_harmonic_closed_form(self.gamma, self.config.h, x), 0, 0.


class EulerStepper(DiscreteGradientStepper):
    "Explicit Euler on x' = E_H(x), a first order control."

    def __init__(self, H, config):
        super().__init__(H, None, config)

    def step(self, x):
        return x + self.config.h * evolution(self.H, x), 0, 0.


def integrate(stepper, initial, n_steps):
    """
    Runs `stepper` for n_steps from `initial`, a state (q, p, S) or for the Herglotz steppers
    a triple (q0, q1, S0). Failures carry the step index and everything recorded before it.
    """
    if n_steps < 0:
        raise ConfigError(f'n_steps must be nonnegative, got {n_steps}')
    h = stepper.config.h
    trajectory = Trajectory(n=stepper.n)
    carry = stepper.start(initial)
    state = stepper.observe(carry)
    trajectory.append(0., state, stepper.energy(state))
    for k in range(1, n_steps + 1):
        try:
            carry, iterations, residual = stepper.step(carry)
            state = stepper.observe(carry)
            ContactPoint(state)
        except ThermoError as e:
            raise IntegrationFailure(k, trajectory, e) from e
        trajectory.append(k * h, state, stepper.energy(state), iterations, residual)
    return trajectory


def convergence_errors(family, initial, h_list, t_end, exact):
    """
    Error in q at t_end for each step size. `family(h)` builds a stepper, `initial` is a state
    or a function of h, and `exact(t)` returns the reference state at time t.
    """
    errors = []
    for h in h_list:
        steps = round(t_end / h)
        if not math.isclose(steps * h, t_end, rel_tol=1e-9):
            raise ConfigError(f't_end = {t_end} is not a multiple of h = {h}')
        stepper = family(h)
        trajectory = integrate(stepper, initial(h) if callable(initial) else initial, steps)
        q, _, _ = split(trajectory.states[-1])
        q_exact, _, _ = split(as_tensor(exact(t_end)))
        errors.append((q - q_exact).abs().max().item())
    return errors


def convergence_order(family, initial, h_list, t_end, exact):
    "Least-squares slope of log error against log h."
    if len(h_list) < 3:
        raise ConfigError(f'need at least three step sizes, got {len(h_list)}')
    errors = convergence_errors(family, initial, h_list, t_end, exact)
    return float(np.polyfit(np.log(h_list), np.log(errors), 1)[0])


KICKED_OSCILLATOR = (0., 10., 0.) # q0, p0, S0 with h = gamma = 0.1


def test_closed_form_first_step():
    x1 = dg_harmonic_closed_form_step(0.1, StepperConfig(h=0.1), ContactPoint.of(*KICKED_OSCILLATOR))
    assert math.isclose(x1.q.item(), 4 / 4.03, rel_tol=1e-12)
    assert math.isclose(x1.p.item(), 39.7 / 4.03, rel_tol=1e-12)
    assert math.isclose(x1.S.item(), 160 / 16.2409, rel_tol=1e-12)
    assert abs(x1.S.item() - 9.8516707817916469) < 1e-12


def test_generic_step_matches_closed_form():
    from .systems import damped_oscillator, hamiltonian_of

    gamma, cfg = 0.1, StepperConfig(h=0.1)
    H = hamiltonian_of(damped_oscillator(gamma))
    x = as_tensor(ContactPoint.of(*KICKED_OSCILLATOR))
    for _ in range(20):
        generic = dg_step(H, DiscreteGradientRule('midpoint'), cfg, x).data
        closed = dg_harmonic_closed_form(gamma, cfg.h, x)
        assert (generic - closed).abs().max() < 1e-10
        x = closed


def test_closed_form_properties(generator):
    from .field import random_points
    from .systems import damped_oscillator, hamiltonian_of

    for gamma in (0., 0.1, 1.):
        H = hamiltonian_of(damped_oscillator(gamma))
        x0 = random_points(100, 3, generator, scale=10.)
        x1 = dg_harmonic_closed_form(gamma, 0.1, x0)
        assert ((H(x1) - H(x0)).abs() / H(x0).abs().clamp(min=1.)).max() < 1e-12
        assert (x1[:, 2] - x0[:, 2]).min() >= 0


def test_trivial_hamiltonian_does_not_move():
    from .field import polynomial

    H = polynomial(3, [((0, 0, 1), 0.1)], name='gamma S')
    x0 = ContactPoint.of(0.7, 0., 2.)
    assert dg_step(H, DiscreteGradientRule('midpoint'), StepperConfig(h=0.1), x0).tolist() == x0.tolist()


def test_energy_is_preserved_per_step(generator):
    from .field import random_points, random_polynomial

    cfg = StepperConfig(h=0.1)
    for kind in ('midpoint', 'mean-value', 'itoh-abe'):
        H = random_polynomial(3, 2, generator)
        for x0 in random_points(5, 3, generator):
            x1 = dg_step(H, DiscreteGradientRule(kind), cfg, x0).data
            assert abs(H(x1).item() - H(x0).item()) <= 10 * cfg.newton_tol


def test_long_run_of_closed_form():
    stepper = HarmonicDiscreteGradientStepper(0.1, StepperConfig(h=0.1))
    trajectory = integrate(stepper, ContactPoint.of(*KICKED_OSCILLATOR), 10_000)
    drift = torch.tensor(trajectory.energy) - 50.
    assert drift[:1001].abs().max() <= 1e-10
    assert drift.abs().max() <= 1e-9
    assert trajectory.entropy_increments.min() >= -1e-12
    assert trajectory.times[-1] == 10_000 * 0.1


def test_long_run_of_generic_step():
    from .systems import damped_oscillator, hamiltonian_of

    H = hamiltonian_of(damped_oscillator(0.1))
    stepper = DiscreteGradientStepper(H, DiscreteGradientRule('midpoint'), StepperConfig(h=0.1))
    trajectory = integrate(stepper, ContactPoint.of(*KICKED_OSCILLATOR), 10_000)
    summary = trajectory.summary()
    assert summary['steps'] == 10_000
    assert summary['max_abs_H_drift'] <= 1e-7
    assert summary['min_dS'] >= -1e-10
    assert summary['newton_residual_max'] <= 1e-10
    # the oscillation has died out and the energy went into entropy
    assert trajectory.entropy[-1] > 499.9


def test_zero_steps():
    stepper = HarmonicDiscreteGradientStepper(0.1, StepperConfig(h=0.1))
    trajectory = integrate(stepper, ContactPoint.of(*KICKED_OSCILLATOR), 0)
    assert len(trajectory) == 1 and trajectory.rows() == [[0, 0., 0., 10., 0., 50., 0.]]


def test_failure_keeps_partial_trajectory():
    import pytest
    from .errors import NonFiniteState
    from .systems import damped_oscillator, hamiltonian_of

    class Exploding(EulerStepper):
        def step(self, x):
            if len(self.seen) == 3:
                raise NonFiniteState('blew up')
            self.seen.append(x)
            return super().step(x)

    stepper = Exploding(hamiltonian_of(damped_oscillator(0.1)), StepperConfig(h=0.1))
    stepper.seen = []
    with pytest.raises(IntegrationFailure) as failure:
        integrate(stepper, ContactPoint.of(*KICKED_OSCILLATOR), 10)
    assert failure.value.step == 4
    assert len(failure.value.trajectory) == 4


def test_trajectory_rows_and_state_dict():
    stepper = HarmonicDiscreteGradientStepper(0.1, StepperConfig(h=0.1))
    trajectory = integrate(stepper, ContactPoint.of(*KICKED_OSCILLATOR), 3)
    assert trajectory.header() == ['step', 't', 'q', 'p', 'S', 'H', 'dS']
    rows = trajectory.rows()
    assert [row[0] for row in rows] == [0, 1, 2, 3]
    assert rows[1][4] == rows[1][6]
    restored = Trajectory.from_state_dict(trajectory.state_dict())
    assert restored.rows() == rows
    assert Trajectory(n=2).header()[2:6] == ['q_1', 'q_2', 'p_1', 'p_2']


def test_config_validation():
    import pytest

    with pytest.raises(ConfigError):
        StepperConfig(h=0.)
    with pytest.raises(ConfigError):
        StepperConfig(h=0.1, newton_tol=-1.)
    assert StepperConfig(h=0.05).state_dict() == {'h': 0.05, 'newton_tol': 1e-12, 'max_newton_iters': 50,
                                                   'fd_jacobian_step': 1e-7}


def damped_oscillator_exact(gamma, x0):
    "Closed-form (q, p) of qddot + gamma qdot + q = 0; S is not needed for q errors."
    q0, p0, _ = x0
    w = math.sqrt(1 - gamma**2 / 4)

    def exact(t):
        decay = math.exp(-gamma * t / 2)
        q = decay * (q0 * math.cos(w*t) + (p0 + gamma * q0 / 2) / w * math.sin(w*t))
        return torch.tensor([q, float('nan'), float('nan')], dtype=DTYPE)
    return exact


def test_convergence_orders():
    from .systems import damped_oscillator, hamiltonian_of

    gamma = 0.1
    H = hamiltonian_of(damped_oscillator(gamma))
    exact = damped_oscillator_exact(gamma, KICKED_OSCILLATOR)
    h_list = [0.1, 0.05, 0.025, 0.0125]

    order = convergence_order(lambda h: HarmonicDiscreteGradientStepper(gamma, StepperConfig(h=h)),
                              torch.tensor(KICKED_OSCILLATOR, dtype=DTYPE), h_list, 10., exact)
    assert 1.7 <= order <= 2.3
    order = convergence_order(lambda h: EulerStepper(H, StepperConfig(h=h)),
                              torch.tensor(KICKED_OSCILLATOR, dtype=DTYPE), h_list, 10., exact)
    assert 0.8 <= order <= 1.2


if __name__ == '__main__':
    import pytest
    pytest.main(["--no-header", "-v", "-s", __file__])
