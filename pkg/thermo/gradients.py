"""
Discrete gradients: two-point vectors G(x, x') with

    G(x, x') . (x' - x) = H(x') - H(x)    and    G(x, x) = grad H(x)

for a ScalarField H on R^N, evaluated on batches of pairs.
"""
from dataclasses import asdict, dataclass
from functools import lru_cache

import numpy as np
import torch

from .errors import ConfigError, DimensionMismatch, NonFiniteState
from .field import DTYPE, as_tensor

EPS = torch.finfo(DTYPE).eps

KINDS = ('mean-value', 'midpoint', 'itoh-abe')


@dataclass(frozen=True)
class DiscreteGradientRule:
    kind: str = 'midpoint'
    quadrature_nodes: int = 8 # mean-value only
    degeneracy_epsilon: float = 1e-12

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f'unknown discrete gradient {self.kind!r}, expected one of {", ".join(KINDS)}')
        if not 2 <= self.quadrature_nodes <= 64:
            raise ConfigError(f'quadrature_nodes must lie in [2, 64], got {self.quadrature_nodes}')
        if not self.degeneracy_epsilon > 0:
            raise ConfigError(f'degeneracy_epsilon must be positive, got {self.degeneracy_epsilon}')

    @classmethod
    def from_name(cls, name, **kwargs):
        return cls(kind=name.removeprefix('dg-'), **kwargs)

    def state_dict(self):
        return asdict(self)

    def __call__(self, H, x, xprime):
        return discrete_gradient(self, H, x, xprime)


@dataclass(frozen=True, eq=False)
class GradientPair:
    x: torch.Tensor
    xprime: torch.Tensor

    def __post_init__(self):
        x, xprime = as_tensor(self.x), as_tensor(self.xprime)
        if x.shape != xprime.shape:
            raise DimensionMismatch(f'pair of shapes {tuple(x.shape)} and {tuple(xprime.shape)}')
        if not (torch.isfinite(x).all() and torch.isfinite(xprime).all()):
            raise NonFiniteState(f'pair has non-finite components: {x.tolist()} {xprime.tolist()}')
        object.__setattr__(self, 'x', x)
        object.__setattr__(self, 'xprime', xprime)


@lru_cache(maxsize=None)
def gauss_legendre(nodes):
    "Nodes and weights on [0, 1]."
    xi, w = np.polynomial.legendre.leggauss(nodes)
    return torch.from_numpy((xi + 1) / 2), torch.from_numpy(w / 2)


def mean_value(H, x, xprime, nodes):
    xi, w = gauss_legendre(nodes)
    xi = xi[:, None]
    points = (1 - xi) * x[..., None, :] + xi * xprime[..., None, :] # (..., nodes, N)
    return (w[:, None] * H.gradient(points)).sum(dim=-2)


def midpoint(H, x, xprime, epsilon):
    """
    The midpoint gradient plus the multiple of d = x' - x that closes the energy gap.
    A gap within round-off of H is dropped: dividing it by |d|^2 only amplifies noise.
    """
    g = H.gradient((x + xprime) / 2)
    d = xprime - x
    norm2 = (d * d).sum(dim=-1)
    Hx, Hxprime, gd = H.value(x), H.value(xprime), (g * d).sum(dim=-1)
    gap = Hxprime - Hx - gd
    resolved = gap.abs() > 64 * EPS * (Hx.abs() + Hxprime.abs() + gd.abs())
    degenerate = (norm2.sqrt() < epsilon) | ~resolved
    correction = torch.where(degenerate, torch.zeros_like(gap), gap / torch.where(degenerate, torch.ones_like(norm2), norm2))
    return g + correction[..., None] * d


def itoh_abe(H, x, xprime, epsilon):
    """
    Component i is the divided difference of H between y_{i-1} and y_i, where y_i takes
    its first i coordinates from x' and the rest from x. Degenerate components fall back
    to dH/dx_i at y_{i-1}.
    """
    N = x.shape[-1]
    left = torch.tril(torch.ones(N + 1, N, dtype=DTYPE), diagonal=-1) # row i: first i coordinates from x'
    sweep = x[..., None, :] + left * (xprime - x)[..., None, :] # (..., N+1, N)
    values = H.value(sweep)
    d = xprime - x
    degenerate = d.abs() < epsilon
    divided = (values[..., 1:] - values[..., :-1]) / torch.where(degenerate, torch.ones_like(d), d)
    if not degenerate.any():
        return divided
    partial = torch.diagonal(H.gradient(sweep[..., :-1, :]), dim1=-2, dim2=-1)
    return torch.where(degenerate, partial, divided)


def discrete_gradient(rule, H, x, xprime):
    x, xprime = as_tensor(x), as_tensor(xprime)
    if x.shape[-1] != H.dim or xprime.shape[-1] != H.dim:
        raise DimensionMismatch(f'{H.name} lives on R^{H.dim}, got points with {x.shape[-1]} and {xprime.shape[-1]} components')
    match rule.kind:
        case 'mean-value':
            return mean_value(H, x, xprime, rule.quadrature_nodes)
        case 'midpoint':
            return midpoint(H, x, xprime, rule.degeneracy_epsilon)
        case 'itoh-abe':
            return itoh_abe(H, x, xprime, rule.degeneracy_epsilon)


@dataclass
class AxiomReport:
    energy_residual: float # max |G.(x'-x) - (H(x') - H(x))|
    energy_relative: float # the same divided by max(|H(x)| + |H(x')|, 1)
    consistency: list # max |G(x, x + eps d) - grad H(x)| for each eps in `scales`
    scales: list
    consistency_order: float
    tol: float

    @property
    def passed(self):
        converged = self.consistency[-1] <= self.tol or self.consistency_order >= 0.9
        return self.energy_residual <= self.tol and converged


def check_axioms(rule, H, pairs, tol=1e-11, scales=tuple(10 ** (-k / 2) for k in range(1, 9))):
    """
    Energy consistency over `pairs` and the x' -> x limit along each pair's direction
    at shrinking scales. The order is the least-squares slope of log error against log scale.
    """
    x = torch.stack([pair.x for pair in pairs])
    xprime = torch.stack([pair.xprime for pair in pairs])

    G = discrete_gradient(rule, H, x, xprime)
    Hx, Hxprime = H.value(x), H.value(xprime)
    gap = ((G * (xprime - x)).sum(dim=-1) - (Hxprime - Hx)).abs()
    energy = gap.max().item()
    relative = (gap / (Hx.abs() + Hxprime.abs()).clamp(min=1.)).max().item()

    d = xprime - x
    length = d.norm(dim=-1, keepdim=True)
    direction = torch.where(length > 0, d / length.clamp(min=1e-300), torch.ones_like(d) / d.shape[-1] ** 0.5)
    exact = H.gradient(x)
    consistency = []
    for eps in scales:
        approx = discrete_gradient(rule, H, x, x + eps * direction)
        consistency.append(((approx - exact).abs() / exact.abs().clamp(min=1.)).max().item())

    errors = np.array(consistency)
    usable = errors > 1e-13
    if usable.sum() >= 2:
        order = float(np.polyfit(np.log(np.array(scales)[usable]), np.log(errors[usable]), 1)[0])
    else:
        order = float('inf')
    return AxiomReport(energy_residual=energy, energy_relative=relative, consistency=consistency, scales=list(scales),
                       consistency_order=order, tol=tol)


def random_pairs(count, dim, generator, scale=1.):
    from .field import random_points
    return [GradientPair(x, xprime) for x, xprime in zip(random_points(count, dim, generator, scale),
                                                          random_points(count, dim, generator, scale))]


def smooth_hamiltonian():
    "1 - cos q + exp(p/3) + S^2/2 + q p S / 4, a non-polynomial test field"
    from .field import ScalarField

    def value(x):
        q, p, S = x[..., 0], x[..., 1], x[..., 2]
        return 1 - torch.cos(q) + torch.exp(p / 3) + S**2 / 2 + q * p * S / 4

    def gradient(x):
        q, p, S = x[..., 0], x[..., 1], x[..., 2]
        return torch.stack([torch.sin(q) + p * S / 4, torch.exp(p / 3) / 3 + q * S / 4, S + q * p / 4], dim=-1)

    return ScalarField(3, value, gradient, name='smooth')


def sample_hamiltonians(generator):
    from .field import random_polynomial
    from .systems import damped_oscillator, hamiltonian_of

    return [hamiltonian_of(damped_oscillator(0.1)), random_polynomial(5, 3, generator), random_polynomial(3, 4, generator)]


def test_examples():
    from .field import polynomial
    from .systems import damped_oscillator, hamiltonian_of

    H = hamiltonian_of(damped_oscillator(0.1))
    x = torch.tensor([0.3, -1., 2.], dtype=DTYPE)
    xprime = torch.tensor([1.1, 0.5, 2.7], dtype=DTYPE)
    G = discrete_gradient(DiscreteGradientRule('midpoint'), H, x, xprime)
    assert torch.allclose(G, H.grad((x + xprime) / 2), atol=1e-14)

    square = polynomial(1, [((2,), 1.)])
    G = discrete_gradient(DiscreteGradientRule('mean-value'), square, torch.zeros(1, dtype=DTYPE), torch.full((1,), 2., dtype=DTYPE))
    assert abs(G.item() - 2.) < 1e-14

    qp = polynomial(2, [((1, 1), 1.)])
    rule = DiscreteGradientRule('itoh-abe')
    zero, one = torch.zeros(2, dtype=DTYPE), torch.ones(2, dtype=DTYPE)
    assert discrete_gradient(rule, qp, zero, one).tolist() == [0., 1.]
    # the coordinate sweep makes the rule asymmetric
    assert discrete_gradient(rule, qp, one, zero).tolist() == [1., 0.]


def test_coincident_points_give_the_gradient(generator):
    from .field import random_points

    for H in sample_hamiltonians(generator) + [smooth_hamiltonian()]:
        x = random_points(50, H.dim, generator, scale=2.)
        for kind in KINDS:
            G = discrete_gradient(DiscreteGradientRule(kind), H, x, x)
            assert torch.allclose(G, H.grad(x), rtol=1e-14, atol=1e-13)


def test_energy_consistency(generator):
    for H in sample_hamiltonians(generator):
        pairs = random_pairs(1000, H.dim, generator, scale=2.)
        for kind in KINDS:
            report = check_axioms(DiscreteGradientRule(kind), H, pairs, tol=1e-11)
            assert report.passed, (H, kind, report)

    H = smooth_hamiltonian()
    pairs = random_pairs(1000, H.dim, generator, scale=2.)
    for kind in ('midpoint', 'itoh-abe'):
        report = check_axioms(DiscreteGradientRule(kind), H, pairs, tol=1e-12)
        assert report.passed, (kind, report)


def test_mean_value_exactness():
    from .field import polynomial

    # 10 Gauss nodes integrate degree 19 exactly; the gradient of a degree 20 polynomial has degree 19
    H = polynomial(1, [((20,), 1.), ((7,), -3.), ((1,), 2.)])
    pairs = [GradientPair(torch.tensor([a], dtype=DTYPE), torch.tensor([b], dtype=DTYPE))
             for a, b in [(0., 1.), (-0.5, 0.9), (0.2, -1.), (1.05, -0.3)]]
    report = check_axioms(DiscreteGradientRule('mean-value', quadrature_nodes=10), H, pairs, tol=1e-12)
    assert report.energy_residual <= 1e-12


def test_energy_residual_is_absolute():
    from .field import polynomial

    # two Gauss nodes average 6000 t^5 over [0, 1] to 5500 instead of 6000
    H = polynomial(1, [((6,), 1000.), ((0,), 1e6)])
    pair = GradientPair(torch.zeros(1, dtype=DTYPE), torch.ones(1, dtype=DTYPE))
    report = check_axioms(DiscreteGradientRule('mean-value', quadrature_nodes=2), H, [pair])
    assert abs(report.energy_residual - 1000 / 12) < 1e-8
    assert abs(report.energy_relative - 1000 / 12 / (2e6 + 1000)) < 1e-14
    assert not report.passed


def test_mean_value_improves_with_nodes(generator):
    H = smooth_hamiltonian()
    pairs = random_pairs(200, 3, generator, scale=3.)
    residuals = [check_axioms(DiscreteGradientRule('mean-value', quadrature_nodes=m), H, pairs).energy_residual
                 for m in (4, 8, 16)]
    assert residuals[1] <= 1.1 * residuals[0]
    assert residuals[2] <= 1.1 * residuals[1] + 1e-14


def test_consistency_order(generator):
    for H in sample_hamiltonians(generator)[:2] + [smooth_hamiltonian()]:
        pairs = random_pairs(50, H.dim, generator)
        for kind in KINDS:
            report = check_axioms(DiscreteGradientRule(kind), H, pairs)
            assert report.consistency_order >= 0.9, (kind, report)
            assert report.consistency[-1] < report.consistency[0]


def test_symmetry(generator):
    from .field import random_points

    for H in sample_hamiltonians(generator) + [smooth_hamiltonian()]:
        x = random_points(100, H.dim, generator)
        xprime = random_points(100, H.dim, generator)
        for kind in ('midpoint', 'mean-value'):
            rule = DiscreteGradientRule(kind)
            forward, backward = rule(H, x, xprime), rule(H, xprime, x)
            assert ((forward - backward).abs() / forward.abs().clamp(min=1.)).max() < 1e-13


def test_rule_validation():
    import pytest

    assert DiscreteGradientRule.from_name('dg-mean-value').kind == 'mean-value'
    assert DiscreteGradientRule.from_name('itoh-abe').state_dict() == {
        'kind': 'itoh-abe', 'quadrature_nodes': 8, 'degeneracy_epsilon': 1e-12}
    with pytest.raises(ConfigError):
        DiscreteGradientRule('average')
    with pytest.raises(ConfigError):
        DiscreteGradientRule('mean-value', quadrature_nodes=65)
    with pytest.raises(DimensionMismatch):
        GradientPair(torch.zeros(2), torch.zeros(3))


if __name__ == '__main__':
    import pytest
    pytest.main(["--no-header", "-v", "-s", __file__])
