"""
High-order adaptive solution of x' = E_H(x), used as the oracle for the structure-preserving steppers.
"""
import numpy as np
import torch
from scipy.integrate import solve_ivp

from .contact import evolution
from .errors import ConfigError, StepSizeUnderflow
from .field import as_tensor
from .integrators import Trajectory


def reference_solve(H, x0, t_end, rtol=1e-10, atol=1e-12):
    """
    Integrates E_H with the DOP853 pair on [0, t_end] and returns the dense output as a
    function t -> tensor (..., 2n+1) for t (or an array of t) in that interval.
    """
    if not (rtol > 0 and atol > 0):
        raise ConfigError(f'tolerances must be positive, got rtol={rtol}, atol={atol}')
    if t_end < 0:
        raise ConfigError(f't_end must be nonnegative, got {t_end}')
    x0 = as_tensor(x0)
    if t_end == 0:
        return lambda t: x0.expand(*np.shape(t), -1).clone()

    def rhs(t, y):
        return evolution(H, torch.from_numpy(y)).numpy()

    solution = solve_ivp(rhs, (0., t_end), x0.numpy(), method='DOP853', rtol=rtol, atol=atol, dense_output=True)
    if not solution.success:
        raise StepSizeUnderflow(f'reference solve stopped at t = {solution.t[-1]}: {solution.message}')
    return lambda t: torch.from_numpy(np.ascontiguousarray(solution.sol(t).T))


def reference_integrate(H, x0, t_end, rtol=1e-10, atol=1e-12, times=None):
    "Samples the reference solution at `times` (by default the two ends) into a Trajectory."
    times = [0., t_end] if times is None else list(times)
    if t_end == 0:
        times = [0.]
    dense = reference_solve(H, x0, t_end, rtol, atol)
    trajectory = Trajectory(n=H.n)
    states = dense(np.asarray(times, dtype=np.float64))
    for t, state in zip(times, states):
        trajectory.append(t, state, H(state).item())
    return trajectory


def test_energy_drift():
    from .systems import damped_oscillator, hamiltonian_of

    H = hamiltonian_of(damped_oscillator(0.1))
    trajectory = reference_integrate(H, (0., 10., 0.), 100., times=[0.1 * k for k in range(1001)])
    assert trajectory.summary()['max_abs_H_drift'] <= 1e-7


def test_undamped_oscillator():
    import math
    from .systems import damped_oscillator, hamiltonian_of

    H = hamiltonian_of(damped_oscillator(0.))
    trajectory = reference_integrate(H, (0., 10., 0.), math.pi)
    assert abs(trajectory.states[-1][0].item() - 10 * math.sin(math.pi)) < 1e-6
    assert abs(trajectory.states[-1][1].item() + 10) < 1e-6
    # S still records p^2 but never feeds back
    assert abs(trajectory.states[-1][2].item() - 50 * math.pi) < 1e-6


def test_entropy_never_decreases():
    from .systems import damped_oscillator, hamiltonian_of

    H = hamiltonian_of(damped_oscillator(0.1))
    trajectory = reference_integrate(H, (0., 10., 0.), 50., times=[0.1 * k for k in range(501)])
    assert trajectory.entropy_increments.min() >= -1e-9


def test_zero_horizon():
    from .systems import damped_oscillator, hamiltonian_of

    H = hamiltonian_of(damped_oscillator(0.1))
    trajectory = reference_integrate(H, (1., 2., 3.), 0.)
    assert len(trajectory) == 1 and trajectory.states[0].tolist() == [1., 2., 3.]


def test_tolerances_are_validated():
    import pytest
    from .systems import damped_oscillator, hamiltonian_of

    with pytest.raises(ConfigError):
        reference_integrate(hamiltonian_of(damped_oscillator(0.1)), (0., 1., 0.), 1., rtol=0.)


def test_steppers_converge_to_reference():
    from .gradients import DiscreteGradientRule
    from .integrators import DiscreteGradientStepper, StepperConfig, convergence_errors
    from .systems import damped_oscillator, hamiltonian_of

    H = hamiltonian_of(damped_oscillator(0.1))
    x0 = torch.tensor([0., 10., 0.], dtype=torch.float64)
    dense = reference_solve(H, x0, 10.)
    errors = convergence_errors(lambda h: DiscreteGradientStepper(H, DiscreteGradientRule('midpoint'), StepperConfig(h=h)),
                                x0, [0.1, 0.05, 0.025], 10., dense)
    assert errors[0] / errors[1] >= 3 and errors[1] / errors[2] >= 3


def test_generic_orders_against_reference():
    from .gradients import DiscreteGradientRule
    from .herglotz import HerglotzStepper
    from .integrators import DiscreteGradientStepper, StepperConfig, convergence_order
    from .systems import damped_oscillator, hamiltonian_of, lagrangian_of

    system = damped_oscillator(0.1)
    H, lag = hamiltonian_of(system), lagrangian_of(system)
    x0 = torch.tensor([0., 10., 0.], dtype=torch.float64)
    dense = reference_solve(H, x0, 10.)
    h_list = [0.1, 0.05, 0.025, 0.0125]

    order = convergence_order(lambda h: DiscreteGradientStepper(H, DiscreteGradientRule('midpoint'), StepperConfig(h=h)),
                              x0, h_list, 10., dense)
    assert 1.7 <= order <= 2.3
    order = convergence_order(lambda h: HerglotzStepper(lag, StepperConfig(h=h), H=H),
                              lambda h: torch.stack([x0[0], dense(h)[0], x0[2]]), h_list, 10., dense)
    assert 1.5 <= order <= 2.5


if __name__ == '__main__':
    import pytest
    pytest.main(["--no-header", "-v", "-s", __file__])
