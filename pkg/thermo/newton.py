import math
from dataclasses import dataclass

import torch

from .errors import NewtonDivergence
from .field import finite_difference_jacobian

EPS = torch.finfo(torch.float64).eps


@dataclass
class NewtonResult:
    x: torch.Tensor
    iterations: int
    residual: float
    method: str = 'newton'


def round_off_floor(residual, x, r, samples=8):
    """
    Largest change of the residual when x moves by a few ulps: the level below which
    its max-norm carries no information.
    """
    scale = 4 * EPS * x.abs().clamp(min=1.)
    signs = torch.tensor([(-1.) ** k * (k // 2 + 1) for k in range(samples)], dtype=x.dtype)
    shifted = x + signs.reshape(-1, *([1] * x.dim())) * scale
    return (residual(shifted) - r).abs().max().item()


def solve(residual, x0, tol=1e-12, max_iters=50, fd_step=1e-7, fixed_point_iters=100, damping=0.5):
    """
    Finds x with max|residual(x)| <= tol starting from x0.

    Newton steps use a central-difference Jacobian, which costs one batched call of
    `residual` on 2N perturbed copies of x, so `residual` must accept leading batch dimensions.
    A Newton run that stops improving is accepted at its round-off floor (method `round-off`)
    when the best residual is within four times that floor and below sqrt(eps) max(1, |x|).
    Otherwise the solve falls back to damped fixed-point iterations x <- x - damping * r(x),
    which converge whenever the residual is a small perturbation of the identity.
    """
    x = x0.clone()
    r = residual(x)
    error = r.abs().max().item()
    best = x, r, error
    iterations = 0
    stalled = 0
    while iterations < max_iters:
        if error <= tol:
            return NewtonResult(x, iterations, error)
        iterations += 1
        J = finite_difference_jacobian(residual, x, fd_step)
        try:
            step = torch.linalg.solve(J, r)
        except torch.linalg.LinAlgError:
            break
        trial = x - step
        trial_r = residual(trial)
        trial_error = trial_r.abs().max().item()
        if not math.isfinite(trial_error):
            break
        stalled = stalled + 1 if trial_error >= error else 0
        x, r, error = trial, trial_r, trial_error
        if error < best[2]:
            best = x, r, error
        if stalled >= 3:
            break

    x, r, error = best
    if error <= tol:
        return NewtonResult(x, iterations, error)
    if iterations and error <= math.sqrt(EPS) * max(1., x.abs().max().item()):
        if error <= 4 * round_off_floor(residual, x, r):
            return NewtonResult(x, iterations, error, method='round-off')

    for _ in range(fixed_point_iters):
        x = x - damping * r
        r = residual(x)
        error = r.abs().max().item()
        iterations += 1
        if error <= tol:
            return NewtonResult(x, iterations, error, method='fixed-point')
        if not math.isfinite(error):
            break
    raise NewtonDivergence('implicit solve did not converge', iterations, error)


def test_solves_linear_system_in_one_step():
    A = torch.tensor([[3., 1.], [1., 2.]], dtype=torch.float64)
    b = torch.tensor([1., -1.], dtype=torch.float64)
    result = solve(lambda x: (A @ x[..., None])[..., 0] - b, torch.zeros(2, dtype=torch.float64))
    assert result.iterations <= 2 and result.method == 'newton'
    assert torch.allclose(result.x, torch.linalg.solve(A, b), atol=1e-12)


def test_nonlinear_system():
    def residual(x):
        return torch.stack([x[..., 0] ** 2 + x[..., 1] ** 2 - 4, x[..., 0] - x[..., 1]], dim=-1)

    result = solve(residual, torch.tensor([1., 0.5], dtype=torch.float64))
    assert result.residual <= 1e-12
    assert torch.allclose(result.x, torch.full((2,), 2 ** 0.5, dtype=torch.float64))


def test_fixed_point_fallback():
    # with Newton disabled the damped iteration alone reaches the root
    result = solve(lambda x: x + 1e-3 * torch.sin(x), torch.tensor([0.3], dtype=torch.float64), max_iters=0)
    assert result.method == 'fixed-point'
    assert abs(result.x.item()) < 1e-12


def test_stall_at_round_off_floor_is_accepted():
    # a residual whose last digits are noise of size 1e-10 cannot reach tol = 1e-15
    def residual(x):
        return x - 1 + 1e-10 * torch.sin(1e15 * x)

    result = solve(residual, torch.tensor([0.3], dtype=torch.float64), tol=1e-15)
    assert result.method == 'round-off'
    assert 1e-15 < result.residual <= 1e-9
    assert abs(result.x.item() - 1) <= 1e-9


def test_divergence_is_reported():
    import pytest

    with pytest.raises(NewtonDivergence) as failure:
        solve(lambda x: x ** 2 + 1, torch.tensor([0.5], dtype=torch.float64), max_iters=5, fixed_point_iters=5)
    assert failure.value.iterations > 0


if __name__ == '__main__':
    import pytest
    pytest.main(["--no-header", "-v", "-s", __file__])
