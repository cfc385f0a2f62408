"""
Points, tangent vectors, covectors and scalar fields on R^{2n+1} in Darboux coordinates (q^i, p_i, S).

Everything is a float64 tensor laid out flat as (q_1..q_n, p_1..p_n, S), possibly with leading batch
dimensions, so that fields and brackets evaluate on many points at once.
"""
import itertools
from dataclasses import dataclass

import torch

from .errors import DimensionMismatch, NonFiniteState

DTYPE = torch.float64


def as_tensor(x):
    if isinstance(x, Darboux):
        return x.data
    return torch.as_tensor(x, dtype=DTYPE)


@dataclass(frozen=True, eq=False)
class Darboux:
    data: torch.Tensor

    def __post_init__(self):
        data = torch.as_tensor(self.data, dtype=DTYPE)
        if data.dim() == 0 or data.shape[-1] < 3 or data.shape[-1] % 2 == 0:
            raise DimensionMismatch(f'expected a trailing dimension 2n+1 >= 3, got shape {tuple(data.shape)}')
        if not torch.isfinite(data).all():
            raise NonFiniteState(f'{type(self).__name__} has non-finite components: {data.tolist()}')
        object.__setattr__(self, 'data', data)

    @classmethod
    def of(cls, first, second, last):
        first = torch.atleast_1d(torch.as_tensor(first, dtype=DTYPE))
        second = torch.atleast_1d(torch.as_tensor(second, dtype=DTYPE))
        last = torch.as_tensor(last, dtype=DTYPE).reshape(1)
        if first.dim() != 1 or first.shape != second.shape:
            raise DimensionMismatch(f'blocks of shape {tuple(first.shape)} and {tuple(second.shape)} do not pair up')
        return cls(torch.cat([first, second, last]))

    @property
    def n(self):
        return (self.data.shape[-1] - 1) // 2

    def blocks(self):
        n = self.n
        return self.data[..., :n], self.data[..., n:2*n], self.data[..., 2*n]

    def tolist(self):
        return self.data.tolist()

    def __repr__(self):
        a, b, c = self.blocks()
        return f'{type(self).__name__}({a.tolist()}, {b.tolist()}, {c.tolist()})'


class ContactPoint(Darboux):
    """A state (q, p, S) of T*Q x R."""

    @property
    def q(self):
        return self.blocks()[0]

    @property
    def p(self):
        return self.blocks()[1]

    @property
    def S(self):
        return self.blocks()[2]


class TangentVector(Darboux):
    @property
    def dq(self):
        return self.blocks()[0]

    @property
    def dp(self):
        return self.blocks()[1]

    @property
    def dS(self):
        return self.blocks()[2]


class CoVector(Darboux):
    @property
    def aq(self):
        return self.blocks()[0]

    @property
    def ap(self):
        return self.blocks()[1]

    @property
    def aS(self):
        return self.blocks()[2]


class ScalarField:
    """
    A smooth function on R^dim with its analytic gradient.

    `value` maps a tensor (..., dim) to (...) and `gradient` maps it to (..., dim).
    `hessian`, when known, maps it to (..., dim, dim); Lagrangians need it for their velocity blocks.
    On the contact phase space dim = 2n+1 and the gradient components are (df/dq, df/dp, df/dS).
    """

    def __init__(self, dim, value, gradient, name='f', hessian=None):
        self.dim = dim
        self.value = value
        self.gradient = gradient
        self.hessian = hessian
        self.name = name

    @property
    def n(self):
        assert self.dim % 2 == 1, 'not a field on a contact phase space'
        return (self.dim - 1) // 2

    def __call__(self, x):
        return self.value(as_tensor(x))

    def grad(self, x):
        return self.gradient(as_tensor(x))

    def differential(self, x):
        return CoVector(self.grad(x))

    def __repr__(self):
        return f'ScalarField({self.name}, dim={self.dim})'

    def _coerce(self, other):
        if isinstance(other, ScalarField):
            if other.dim != self.dim:
                raise DimensionMismatch(f'cannot combine fields on R^{self.dim} and R^{other.dim}')
            return other
        return constant(self.dim, float(other))

    def __add__(self, other):
        other = self._coerce(other)
        hessian = None
        if self.hessian and other.hessian:
            hessian = lambda x: self.hessian(x) + other.hessian(x)
        return ScalarField(self.dim,
                           lambda x: self.value(x) + other.value(x),
                           lambda x: self.gradient(x) + other.gradient(x),
                           name=f'({self.name} + {other.name})',
                           hessian=hessian)

    __radd__ = __add__

    def __neg__(self):
        return ScalarField(self.dim, lambda x: -self.value(x), lambda x: -self.gradient(x), name=f'-{self.name}',
                           hessian=self.hessian and (lambda x: -self.hessian(x)))

    def __sub__(self, other):
        return self + (-self._coerce(other))

    def __rsub__(self, other):
        return self._coerce(other) - self

    def __mul__(self, other):
        other = self._coerce(other)

        def hessian(x):
            df, dg = self.gradient(x), other.gradient(x)
            outer = df[..., :, None] * dg[..., None, :]
            return (self.hessian(x) * other.value(x)[..., None, None] + self.value(x)[..., None, None] * other.hessian(x)
                    + outer + outer.transpose(-1, -2))

        return ScalarField(self.dim,
                           lambda x: self.value(x) * other.value(x),
                           lambda x: self.gradient(x) * other.value(x)[..., None] + self.value(x)[..., None] * other.gradient(x),
                           name=f'{self.name}*{other.name}',
                           hessian=hessian if self.hessian and other.hessian else None)

    __rmul__ = __mul__


def zero_hessian(x):
    return torch.zeros(*x.shape, x.shape[-1], dtype=DTYPE)


def constant(dim, c):
    return ScalarField(dim,
                       lambda x: torch.full(x.shape[:-1], c, dtype=DTYPE),
                       lambda x: torch.zeros_like(x),
                       name=repr(c),
                       hessian=zero_hessian)


def coordinate(dim, index, name=None):
    def gradient(x):
        g = torch.zeros_like(x)
        g[..., index] = 1.
        return g
    return ScalarField(dim, lambda x: x[..., index].clone(), gradient, name=name or f'x{index}', hessian=zero_hessian)


def darboux_coordinate(n, block, i=0):
    """The coordinate function q^i, p_i or S on R^{2n+1}."""
    match block:
        case 'q':
            index = i
        case 'p':
            index = n + i
        case 'S':
            index = 2*n
        case _:
            raise ValueError(f'unknown coordinate block {block!r}, expected q, p or S')
    suffix = '' if block == 'S' or n == 1 else str(i + 1)
    return coordinate(2*n + 1, index, name=f'{block}{suffix}')


def polynomial(dim, terms, name='P'):
    """
    Sum of c * prod_k x_k^{e_k} over `terms`, an iterable of (exponents, c) with len(exponents) == dim.
    """
    terms = list(terms)
    exponents = torch.tensor([list(e) for e, _ in terms], dtype=DTYPE).reshape(-1, dim)
    coefficients = torch.tensor([float(c) for _, c in terms], dtype=DTYPE)
    lowered = (exponents - 1).clamp(min=0)

    def value(x):
        monomials = (x[..., None, :] ** exponents).prod(dim=-1) # (..., T)
        return monomials @ coefficients

    def gradient(x):
        powers = x[..., None, :] ** exponents # (..., T, dim)
        derivatives = exponents * x[..., None, :] ** lowered # (..., T, dim)
        columns = []
        for k in range(dim):
            others = torch.cat([powers[..., :k], powers[..., k+1:]], dim=-1).prod(dim=-1)
            columns.append((derivatives[..., k] * others) @ coefficients)
        return torch.stack(columns, dim=-1)

    # d^2/dx_k dx_l of each monomial is factors[k, l] * x^shifted[k, l]
    factors = torch.zeros(dim, dim, len(terms), dtype=DTYPE)
    shifted = exponents.expand(dim, dim, -1, -1).clone()
    for k in range(dim):
        for l in range(dim):
            factors[k, l] = exponents[:, k] * (exponents[:, l] - float(k == l))
            shifted[k, l, :, k] -= 1
            shifted[k, l, :, l] -= 1
    shifted = shifted.clamp(min=0)

    def hessian(x):
        monomials = (x[..., None, None, None, :] ** shifted).prod(dim=-1) # (..., dim, dim, T)
        return (factors * monomials) @ coefficients

    return ScalarField(dim, value, gradient, name=name, hessian=hessian)


def monomial_exponents(dim, degree):
    for d in range(degree + 1):
        for combination in itertools.combinations_with_replacement(range(dim), d):
            exponents = [0] * dim
            for k in combination:
                exponents[k] += 1
            yield tuple(exponents)


def random_polynomial(dim, degree, generator, name='P'):
    exponents = list(monomial_exponents(dim, degree))
    coefficients = torch.randn(len(exponents), generator=generator, dtype=DTYPE)
    return polynomial(dim, zip(exponents, coefficients.tolist()), name=name)


def random_points(count, dim, generator, scale=1.0):
    return scale * (2 * torch.rand(count, dim, generator=generator, dtype=DTYPE) - 1)


def finite_difference_gradient(value, x, step=1e-6):
    """Central differences of `value` at x (..., dim), batched over all coordinate directions at once."""
    x = as_tensor(x)
    shifts = step * torch.eye(x.shape[-1], dtype=DTYPE)
    forward = value(x[..., None, :] + shifts)
    backward = value(x[..., None, :] - shifts)
    return (forward - backward) / (2 * step)


def finite_difference_jacobian(fn, x, step=1e-6):
    "Central-difference Jacobian (..., out, in) of a map (..., in) -> (..., out), in one batched call."
    x = as_tensor(x)
    shifts = step * torch.eye(x.shape[-1], dtype=DTYPE)
    forward = fn(x[..., None, :] + shifts)
    backward = fn(x[..., None, :] - shifts)
    return ((forward - backward) / (2 * step)).transpose(-1, -2)


def numerical(dim, value, step=1e-5, name='f'):
    """A field whose gradient is taken by central differences; used to nest brackets in checks."""
    return ScalarField(dim, value, lambda x: finite_difference_gradient(value, x, step), name=name)


def gradient_error(field, x, step=1e-6):
    """Largest relative discrepancy between the analytic gradient and central differences."""
    x = as_tensor(x)
    exact = field.gradient(x)
    approx = finite_difference_gradient(field.value, x, step)
    return ((exact - approx).abs() / exact.abs().clamp(min=1.)).max().item()


def test_point_layout():
    x = ContactPoint.of([1., 2.], [3., 4.], 5.)
    assert x.n == 2
    assert x.q.tolist() == [1., 2.]
    assert x.p.tolist() == [3., 4.]
    assert x.S.item() == 5.

    v = TangentVector.of(0., 0., 1.)
    assert v.n == 1 and v.dS.item() == 1.


def test_point_rejects_bad_data():
    import pytest

    with pytest.raises(NonFiniteState):
        ContactPoint.of(float('nan'), 0., 0.)
    with pytest.raises(NonFiniteState):
        CoVector.of(0., float('inf'), 0.)
    with pytest.raises(DimensionMismatch):
        ContactPoint(torch.zeros(4))
    with pytest.raises(DimensionMismatch):
        ContactPoint.of([0., 1.], [0.], 0.)


def test_polynomial_value():
    # q^2 p + 3 S on R^3
    P = polynomial(3, [((2, 1, 0), 1.), ((0, 0, 1), 3.)])
    x = torch.tensor([2., -1., 0.5], dtype=DTYPE)
    assert P(x).item() == -4. + 1.5
    assert torch.equal(P.grad(x), torch.tensor([-4., 4., 3.], dtype=DTYPE))


def test_gradients_match_finite_differences(generator):
    for dim in (1, 3, 5):
        P = random_polynomial(dim, 3, generator)
        x = random_points(20, dim, generator)
        assert gradient_error(P, x) < 1e-5


def test_product_and_sum_rules(generator):
    f = random_polynomial(3, 2, generator)
    g = random_polynomial(3, 2, generator)
    x = random_points(20, 3, generator)
    assert gradient_error(f * g, x) < 1e-5
    assert gradient_error(f - 2 * g + 1, x) < 1e-5
    assert torch.allclose((f * g)(x), f(x) * g(x))


def test_hessians_match_finite_differences(generator):
    f = random_polynomial(3, 4, generator)
    g = random_polynomial(3, 2, generator)
    x = random_points(20, 3, generator)
    for field in (f, f * g - 3 * g, -f + darboux_coordinate(1, 'S')):
        approx = torch.stack([finite_difference_gradient(lambda y: field.gradient(y)[..., k], x) for k in range(3)], dim=-2)
        exact = field.hessian(x)
        assert ((exact - approx).abs() / exact.abs().clamp(min=1.)).max() < 1e-5
        assert torch.allclose(exact, exact.transpose(-1, -2))


def test_coordinates():
    n = 2
    x = ContactPoint.of([1., 2.], [3., 4.], 5.)
    assert darboux_coordinate(n, 'q', 1)(x).item() == 2.
    assert darboux_coordinate(n, 'p', 0)(x).item() == 3.
    assert darboux_coordinate(n, 'S')(x).item() == 5.
    assert darboux_coordinate(n, 'p', 1).grad(x).tolist() == [0., 0., 0., 1., 0.]


if __name__ == '__main__':
    import pytest
    pytest.main(["--no-header", "-v", "-s", __file__])
