"""
The canonical contact structure on R^{2n+1}: eta = dS - p_i dq^i, Reeb field R = d/dS,
the bivector Lambda = d/dp_i ^ (d/dq^i + p_i d/dS), the brackets built from it and
the Hamiltonian and evolution vector fields of a scalar field.

Module-level functions take raw tensors laid out as (q, p, S) with any leading batch
dimensions. ContactStructure wraps them with dimension checks and typed results.
"""
from dataclasses import dataclass

import torch

from .errors import DimensionMismatch, ReebDerivativeZero, SingularBasis
from .field import DTYPE, CoVector, TangentVector, as_tensor


def split(x):
    n = (x.shape[-1] - 1) // 2
    return x[..., :n], x[..., n:2*n], x[..., 2*n]


def join(a, b, c):
    return torch.cat([a, b, c[..., None]], dim=-1)


def dot(a, b):
    return (a * b).sum(dim=-1)


def eta(x, v):
    _, p, _ = split(x)
    vq, _, vS = split(v)
    return vS - dot(p, vq)


def eta_covector(x):
    _, p, S = split(x)
    return join(-p, torch.zeros_like(p), torch.ones_like(S))


def d_eta(v, w):
    vq, vp, _ = split(v)
    wq, wp, _ = split(w)
    return dot(vq, wp) - dot(vp, wq)


def interior_d_eta(v):
    "i_v d(eta) as a covector"
    vq, vp, vS = split(v)
    return join(-vp, vq, torch.zeros_like(vS))


def flat(x, v):
    "i_v d(eta) + eta(v) eta"
    _, p, _ = split(x)
    vq, vp, _ = split(v)
    e = eta(x, v)
    return join(-vp - e[..., None] * p, vq, e)


def bivector(x, a, b):
    _, p, _ = split(x)
    aq, ap, aS = split(a)
    bq, bp, bS = split(b)
    return dot(ap, bq + p * bS[..., None]) - dot(bp, aq + p * aS[..., None])


def sharp(x, a):
    "The vector with <b, sharp(a)> = Lambda(a, b) for every covector b."
    _, p, _ = split(x)
    aq, ap, aS = split(a)
    return join(ap, -(aq + p * aS[..., None]), dot(p, ap))


def evolution(f, x):
    return sharp(x, f.gradient(x))


def hamiltonian(f, x):
    v = evolution(f, x)
    v[..., -1] = v[..., -1] - f.value(x)
    return v


def liouville_field(x):
    _, p, S = split(x)
    return join(torch.zeros_like(p), p, torch.zeros_like(S))


def jacobi(f, g, x):
    df, dg = f.gradient(x), g.gradient(x)
    return bivector(x, df, dg) - f.value(x) * dg[..., -1] + g.value(x) * df[..., -1]


def cartan(f, g, x):
    return bivector(x, f.gradient(x), g.gradient(x))


def poisson_lambda0(f, g, x):
    fq, fp, _ = split(f.gradient(x))
    gq, gp, _ = split(g.gradient(x))
    return dot(fp, gq) - dot(fq, gp)


def delta(f, g, x):
    "{f,g}_Delta = g_S Delta(f) - f_S Delta(g), Delta = p_i d/dp_i"
    _, p, _ = split(x)
    _, fp, fS = split(f.gradient(x))
    _, gp, gS = split(g.gradient(x))
    return gS * dot(p, fp) - fS * dot(p, gp)


def lie_derivative(f, v, x):
    "df(v) at x"
    return dot(f.gradient(x), v)


@dataclass
class LevelSetReport:
    max_residual: float
    reeb_derivative: float
    tol: float

    @property
    def passed(self):
        return self.max_residual <= self.tol


@dataclass(frozen=True)
class ContactStructure:
    n: int

    def __post_init__(self):
        if self.n < 1:
            raise DimensionMismatch(f'contact phase space needs n >= 1, got {self.n}')

    @property
    def dim(self):
        return 2*self.n + 1

    def _check(self, *objects):
        tensors = []
        for obj in objects:
            t = as_tensor(obj)
            if t.shape[-1] != self.dim:
                raise DimensionMismatch(f'expected {self.dim} components for n={self.n}, got {t.shape[-1]}')
            tensors.append(t)
        return tensors

    def _check_field(self, *fields):
        for f in fields:
            if f.dim != self.dim:
                raise DimensionMismatch(f'{f.name} lives on R^{f.dim}, contact phase space is R^{self.dim}')

    def eta_at(self, x, v):
        x, v = self._check(x, v)
        return eta(x, v)

    def d_eta_at(self, x, v, w):
        x, v, w = self._check(x, v, w)
        return d_eta(v, w)

    def reeb(self):
        r = torch.zeros(self.dim, dtype=DTYPE)
        r[-1] = 1.
        return TangentVector(r)

    def flat(self, x, v):
        x, v = self._check(x, v)
        return CoVector(flat(x, v))

    def lambda_at(self, x, a, b):
        x, a, b = self._check(x, a, b)
        return bivector(x, a, b)

    def sharp_lambda(self, x, a):
        x, a = self._check(x, a)
        return TangentVector(sharp(x, a))

    def hamiltonian_field(self, f, x):
        self._check_field(f)
        x, = self._check(x)
        return TangentVector(hamiltonian(f, x))

    def evolution_field(self, f, x):
        self._check_field(f)
        x, = self._check(x)
        return TangentVector(evolution(f, x))

    def liouville(self, x):
        x, = self._check(x)
        return TangentVector(liouville_field(x))

    def jacobi_bracket(self, f, g, x):
        self._check_field(f, g)
        x, = self._check(x)
        return jacobi(f, g, x)

    def cartan_bracket(self, f, g, x):
        self._check_field(f, g)
        x, = self._check(x)
        return cartan(f, g, x)

    def poisson_lambda0_bracket(self, f, g, x):
        self._check_field(f, g)
        x, = self._check(x)
        return poisson_lambda0(f, g, x)

    def delta_bracket(self, f, g, x):
        self._check_field(f, g)
        x, = self._check(x)
        return delta(f, g, x)

    def lie_derivative(self, f, v, x):
        self._check_field(f)
        x, v = self._check(x, v)
        return lie_derivative(f, v, x)

    def flat_matrix(self, x):
        "Matrix of the flat map in the coordinate basis; column j is flat(e_j)."
        x, = self._check(x)
        basis = torch.eye(self.dim, dtype=DTYPE)
        rows = flat(x[..., None, :].expand(*x.shape[:-1], self.dim, self.dim), basis.expand(*x.shape[:-1], self.dim, self.dim))
        return rows.transpose(-1, -2)

    def sharp_flat(self, x, a):
        "Inverse of flat."
        x, a = self._check(x, a)
        return TangentVector(torch.linalg.solve(self.flat_matrix(x), a[..., None])[..., 0])

    def kernel_basis(self, covector):
        """
        Orthonormal basis of the 2n-dimensional kernel of a nonzero covector at a single point,
        returned as rows.
        """
        a, = self._check(covector)
        assert a.dim() == 1, 'kernel_basis works on a single covector'
        scale = a.abs().max()
        if not torch.isfinite(scale) or scale == 0:
            raise SingularBasis(f'covector {a.tolist()} has no 2n-dimensional kernel')
        Q, _ = torch.linalg.qr(a[:, None], mode='complete')
        basis = Q[:, 1:].T
        orthogonality = (basis @ basis.T - torch.eye(self.dim - 1, dtype=DTYPE)).abs().max()
        leakage = (basis @ (a / scale)).abs().max()
        if orthogonality > 1e-10 or leakage > 1e-10:
            raise SingularBasis(f'kernel extraction lost orthogonality ({orthogonality:.3e}) or leaked ({leakage:.3e})')
        return basis

    def verify_level_set_decomposition(self, f, x, tol=1e-10):
        """
        Pointwise check that on the level set of f through x, with v = E_f / R(f),
        i_v d(eta) restricted to ker df equals minus the restriction of eta.
        """
        self._check_field(f)
        x, = self._check(x)
        df = f.gradient(x)
        reeb_derivative = df[-1].item()
        if abs(reeb_derivative) < 1e-12:
            raise ReebDerivativeZero(f'R({f.name}) = {reeb_derivative:.3e} at {x.tolist()}')
        v = evolution(f, x) / reeb_derivative
        basis = self.kernel_basis(df)
        residuals = d_eta(v.expand_as(basis), basis) + eta(x.expand_as(basis), basis)
        return LevelSetReport(max_residual=residuals.abs().max().item(), reeb_derivative=reeb_derivative, tol=tol)


def test_eta_examples():
    import pytest
    from .field import ContactPoint

    cs = ContactStructure(1)
    assert cs.eta_at(ContactPoint.of(0., 3., 0.), TangentVector.of(1., 0., 0.)).item() == -3.
    assert cs.eta_at(ContactPoint.of(0.7, -2., 5.), cs.reeb()).item() == 1.
    assert cs.eta_at(ContactPoint.of(5., 0., 2.), TangentVector.of(1., 1., 0.)).item() == 0.

    with pytest.raises(DimensionMismatch):
        cs.eta_at(ContactPoint.of([0., 1.], [0., 1.], 0.), TangentVector.of(1., 0., 0.))


def test_d_eta_examples(generator):
    from .field import random_points

    cs = ContactStructure(1)
    x = torch.zeros(3, dtype=DTYPE)
    assert cs.d_eta_at(x, TangentVector.of(1., 0., 0.), TangentVector.of(0., 1., 0.)).item() == 1.
    assert cs.d_eta_at(x, cs.reeb(), TangentVector.of(0., 1., 0.)).item() == 0.

    v = random_points(10, 3, generator)
    assert (cs.d_eta_at(x, v, v) == 0).all()


def test_reeb_properties(generator):
    from .field import random_points

    for n in (1, 2, 3):
        cs = ContactStructure(n)
        R = cs.reeb().data
        assert R.tolist() == [0.] * (2*n) + [1.]
        x = random_points(50, cs.dim, generator, scale=3.)
        assert (cs.eta_at(x, R.expand_as(x)) == 1.).all()
        # i_R d(eta) vanishes identically
        assert (interior_d_eta(R) == 0).all()


def test_flat_examples(generator):
    from .field import ContactPoint, random_points

    cs = ContactStructure(1)
    x = ContactPoint.of(0.3, -1.7, 2.)
    assert cs.flat(x, cs.reeb()).tolist() == [1.7, 0., 1.]
    assert cs.flat(ContactPoint.of(0., 0., 0.), TangentVector.of(1., 0., 0.)).tolist() == [0., 1., 0.]

    for n in (1, 2, 3):
        cs = ContactStructure(n)
        x = random_points(100, cs.dim, generator, scale=3.)
        v = random_points(100, cs.dim, generator)
        assert torch.allclose(cs.sharp_flat(x, cs.flat(x, v)).data, v, atol=1e-12)


def test_flat_is_nondegenerate(generator):
    from .field import random_points

    for n in (1, 2, 3):
        cs = ContactStructure(n)
        x = random_points(100, cs.dim, generator, scale=3.)
        M = cs.flat_matrix(x)
        assert (torch.linalg.det(M).abs() > 1e-8).all()
        assert torch.isfinite(torch.linalg.cond(M)).all()


def test_lambda_examples(generator):
    from .field import ContactPoint, random_points

    cs = ContactStructure(1)
    x = ContactPoint.of(0.5, 2.5, -1.)
    dq, dp, dS = CoVector.of(1., 0., 0.), CoVector.of(0., 1., 0.), CoVector.of(0., 0., 1.)
    assert cs.lambda_at(x, dq, dp).item() == -1.
    assert cs.lambda_at(x, dp, dS).item() == 2.5

    a = random_points(10, 3, generator)
    assert (cs.lambda_at(random_points(10, 3, generator), a, a) == 0).all()

    assert cs.sharp_lambda(x, dS).tolist() == [0., -2.5, 0.]
    assert cs.sharp_lambda(x, dq).tolist() == [0., -1., 0.]


def test_sharp_pairing(generator):
    from .field import random_points

    for n in (1, 2, 3):
        cs = ContactStructure(n)
        x = random_points(20, cs.dim, generator, scale=3.)
        a = random_points(20, cs.dim, generator)
        basis = torch.eye(cs.dim, dtype=DTYPE)
        for b in basis:
            b = b.expand_as(a)
            pairing = dot(b, cs.sharp_lambda(x, a).data)
            assert (pairing - cs.lambda_at(x, a, b)).abs().max() < 1e-14


def damped_hamiltonian(gamma=0.1):
    from .field import polynomial
    return polynomial(3, [((0, 2, 0), 0.5), ((2, 0, 0), 0.5), ((0, 0, 1), gamma)], name='H')


def test_vector_field_examples(generator):
    from .field import ContactPoint, constant, random_points, random_polynomial

    cs = ContactStructure(1)
    H = damped_hamiltonian()
    x = ContactPoint.of(1., 2., 0.)
    assert torch.allclose(cs.hamiltonian_field(H, x).data, torch.tensor([2., -1.2, 1.5], dtype=DTYPE))
    assert torch.allclose(cs.evolution_field(H, x).data, torch.tensor([2., -1.2, 4.], dtype=DTYPE))
    assert cs.hamiltonian_field(constant(3, 2.), x).tolist() == [0., 0., -2.]

    f = random_polynomial(5, 3, generator)
    x = random_points(50, 5, generator, scale=2.)
    cs = ContactStructure(2)
    X, E = cs.hamiltonian_field(f, x).data, cs.evolution_field(f, x).data
    assert torch.allclose(X, E - f(x)[..., None] * cs.reeb().data)
    # E_f(f) = 0, X_f(f) = -f R(f)
    assert cs.lie_derivative(f, E, x).abs().max() < 1e-13 * f.grad(x).abs().max().clamp(min=1.) ** 2
    assert torch.allclose(cs.lie_derivative(f, X, x), -f(x) * f.grad(x)[..., -1], atol=1e-12)


def test_evolution_field_produces_no_entropy_at_rest():
    from .field import ContactPoint, polynomial

    cs = ContactStructure(1)
    f = polynomial(3, [((2, 0, 0), 1.), ((0, 2, 0), 3.), ((1, 1, 0), 1.)])
    assert cs.evolution_field(f, ContactPoint.of(0.4, 0., 7.)).dS.item() == 0.


def test_lie_derivative_of_eta(generator):
    """L_{E_f} eta = i_{E_f} d(eta) + d(eta(E_f)) = df - R(f) eta"""
    from .field import finite_difference_gradient, random_points, random_polynomial

    for n in (1, 2):
        cs = ContactStructure(n)
        f = random_polynomial(cs.dim, 3, generator)
        x = random_points(30, cs.dim, generator)
        eta_of_E = lambda y: eta(y, evolution(f, y))
        lhs = interior_d_eta(evolution(f, x)) + finite_difference_gradient(eta_of_E, x, step=1e-6)
        df = f.grad(x)
        rhs = df - df[..., -1:] * eta_covector(x)
        assert (lhs - rhs).abs().max() < 1e-5


def test_bracket_examples(generator):
    from .field import ContactPoint, darboux_coordinate, random_points, random_polynomial

    cs = ContactStructure(1)
    q, p, S = (darboux_coordinate(1, block) for block in 'qpS')
    x = ContactPoint.of(0.3, 1.7, -0.4)
    assert cs.jacobi_bracket(q, p, x).item() == -1.
    assert cs.jacobi_bracket(S, p, x).item() == 0.
    assert cs.cartan_bracket(q, p, x).item() == -1.
    assert cs.cartan_bracket(S, p, x).item() == -1.7
    assert cs.poisson_lambda0_bracket(q, p, x).item() == -1.

    f = random_polynomial(3, 3, generator)
    x = random_points(20, 3, generator)
    assert (cs.jacobi_bracket(f, f, x) == 0).all()
    assert (cs.delta_bracket(f, f, x) == 0).all()
    assert (cs.poisson_lambda0_bracket(S, f, x) == 0).all()


def test_delta_bracket_of_damped_oscillator(generator):
    from .field import darboux_coordinate, random_points

    gamma = 0.1
    cs = ContactStructure(1)
    H = damped_hamiltonian(gamma)
    p, S = darboux_coordinate(1, 'p'), darboux_coordinate(1, 'S')
    x = random_points(20, 3, generator, scale=5.)
    _, momentum, _ = split(x)
    assert torch.allclose(cs.delta_bracket(H, p, x), -gamma * momentum[..., 0])
    # entropy is produced at rate Delta(H) = p^2 >= 0
    assert torch.allclose(cs.delta_bracket(H, S, x), momentum[..., 0] ** 2)
    assert torch.allclose(cs.delta_bracket(S, H, x), -momentum[..., 0] ** 2)


def test_cartan_splits_into_poisson_and_delta(generator):
    from .field import random_points, random_polynomial

    for n in (1, 2, 3):
        cs = ContactStructure(n)
        f = random_polynomial(cs.dim, 3, generator)
        g = random_polynomial(cs.dim, 3, generator)
        x = random_points(50, cs.dim, generator)
        poisson, dissipative = cs.poisson_lambda0_bracket(f, g, x), cs.delta_bracket(f, g, x)
        scale = (poisson.abs() + dissipative.abs()).clamp(min=1.)
        assert ((cs.cartan_bracket(f, g, x) - poisson - dissipative).abs() / scale).max() < 1e-13


def test_jacobi_identity(generator):
    from .field import numerical, random_points, random_polynomial

    for n in (1, 2):
        cs = ContactStructure(n)
        f, g, h = (random_polynomial(cs.dim, 3, generator) for _ in range(3))
        x = random_points(20, cs.dim, generator)

        def nested(a, b, c):
            inner = numerical(cs.dim, lambda y: jacobi(b, c, y), step=1e-5)
            return jacobi(a, inner, x)

        terms = torch.stack([nested(f, g, h), nested(g, h, f), nested(h, f, g)])
        scale = terms.abs().max(dim=0).values.clamp(min=1.)
        assert (terms.sum(dim=0).abs() / scale).max() < 1e-4


def test_leibniz_rule_fails():
    from .field import darboux_coordinate

    cs = ContactStructure(1)
    f = darboux_coordinate(1, 'S')
    g = darboux_coordinate(1, 'q') + 2
    h = darboux_coordinate(1, 'p') + 3
    x = torch.zeros(3, dtype=DTYPE)
    defect = cs.jacobi_bracket(f, g * h, x) - g(x) * cs.jacobi_bracket(f, h, x) - h(x) * cs.jacobi_bracket(f, g, x)
    assert defect.item() == -6.


def test_level_set_decomposition(generator):
    import pytest
    from .field import ContactPoint, darboux_coordinate, random_points, random_polynomial

    cs = ContactStructure(1)
    H = damped_hamiltonian()
    for x in random_points(50, 3, generator, scale=5.):
        assert cs.verify_level_set_decomposition(H, x, tol=1e-12).passed

    S = darboux_coordinate(1, 'S')
    report = cs.verify_level_set_decomposition(S, ContactPoint.of(1., 2., 3.))
    assert report.passed and report.reeb_derivative == 1.

    cs = ContactStructure(2)
    f = 0.1 * random_polynomial(cs.dim, 2, generator) + 2 * darboux_coordinate(2, 'S')
    for x in random_points(20, cs.dim, generator):
        assert cs.verify_level_set_decomposition(f, x).passed

    cs = ContactStructure(1)
    with pytest.raises(ReebDerivativeZero):
        cs.verify_level_set_decomposition(damped_hamiltonian(0.), ContactPoint.of(1., 1., 0.))


if __name__ == '__main__':
    import pytest
    pytest.main(["--no-header", "-v", "-s", __file__])
