"""
Simple thermodynamical systems: mechanical variables (q, p) plus one entropy S.

The Hamiltonian side is H = 1/2 p^T g(q) p + V(q, S). The Lagrangian side works on
TQ x R with coordinates (q, qdot, S), where the Legendre transform maps onto (q, p, S).
"""
import torch

from .contact import dot, join, split
from .errors import ConfigError, NewtonDivergence, SingularHessian
from .field import DTYPE, ContactPoint, Darboux, ScalarField, as_tensor, polynomial


class TangentState(Darboux):
    """A state (q, qdot, S) of TQ x R."""

    @property
    def q(self):
        return self.blocks()[0]

    @property
    def qdot(self):
        return self.blocks()[1]

    @property
    def S(self):
        return self.blocks()[2]


class TQVector(Darboux):
    @property
    def dq(self):
        return self.blocks()[0]

    @property
    def dqdot(self):
        return self.blocks()[1]

    @property
    def dS(self):
        return self.blocks()[2]


class SimpleThermoSystem:
    """
    `inverse_metric` is either a constant symmetric n x n matrix or a map q (..., n) -> (..., n, n).
    A q-dependent metric needs `metric_derivative`, q -> (..., n, n, n) with dg^{ij}/dq^k last.
    `potential` is a ScalarField on R^{n+1} with coordinates (q, S).
    """

    def __init__(self, n, inverse_metric, potential, metric_derivative=None, name='system', samples=100):
        if potential.dim != n + 1:
            raise ConfigError(f'potential of {name} must live on (q, S) with {n+1} coordinates, got {potential.dim}')
        self.n = n
        self.potential = potential
        self.name = name
        if callable(inverse_metric):
            self.constant_metric = None
            self.inverse_metric = inverse_metric
        else:
            self.constant_metric = torch.as_tensor(inverse_metric, dtype=DTYPE).reshape(n, n)
            self.inverse_metric = lambda q: self.constant_metric.expand(*q.shape[:-1], n, n)
        self.metric_derivative = metric_derivative
        self.validate(samples)

    def validate(self, samples):
        q = 2 * torch.rand(samples, self.n, generator=torch.Generator().manual_seed(0), dtype=DTYPE) - 1
        g = self.inverse_metric(q)
        asymmetry = (g - g.transpose(-1, -2)).abs().max().item()
        if asymmetry > 1e-14:
            raise ConfigError(f'inverse metric of {self.name} is not symmetric (max asymmetry {asymmetry:.3e})')
        smallest = torch.linalg.eigvalsh(g).min().item()
        if smallest < -1e-12:
            raise ConfigError(f'inverse metric of {self.name} is not positive semi-definite (eigenvalue {smallest:.3e})')

    def __repr__(self):
        return f'{type(self).__name__}({self.name}, n={self.n})'


class LinearlyDampedSystem(SimpleThermoSystem):
    "H = |p|^2 / 2m + V(q) + gamma S"

    def __init__(self, mass, gamma, potential, name='linearly-damped'):
        if mass <= 0:
            raise ConfigError(f'mass must be positive, got {mass}')
        if gamma < 0:
            raise ConfigError(f'friction coefficient must be nonnegative, got {gamma}')
        self.mass = mass
        self.gamma = gamma
        self.mechanical_potential = potential
        n = potential.dim

        def hessian(y):
            h = torch.zeros(*y.shape, n + 1, dtype=DTYPE)
            h[..., :n, :n] = potential.hessian(y[..., :n])
            return h

        full = ScalarField(n + 1,
                           lambda y: potential.value(y[..., :n]) + gamma * y[..., n],
                           lambda y: torch.cat([potential.gradient(y[..., :n]), torch.full_like(y[..., n:], gamma)], dim=-1),
                           name=f'{potential.name} + {gamma}*S',
                           hessian=hessian if potential.hessian else None)
        super().__init__(n, torch.eye(n, dtype=DTYPE) / mass, full, name=name)


def damped_oscillator(gamma=0.1, mass=1.):
    "m qddot + gamma qdot + q = 0, H = p^2/2m + q^2/2 + gamma S"
    return LinearlyDampedSystem(mass, gamma, polynomial(1, [((2,), 0.5)], name='q^2/2'), name='damped-oscillator')


def hamiltonian_of(sys):
    n = sys.n

    def value(x):
        q, p, S = split(x)
        g = sys.inverse_metric(q)
        kinetic = 0.5 * dot(p, (g @ p[..., None])[..., 0])
        return kinetic + sys.potential.value(torch.cat([q, S[..., None]], dim=-1))

    def gradient(x):
        q, p, S = split(x)
        g = sys.inverse_metric(q)
        dV = sys.potential.gradient(torch.cat([q, S[..., None]], dim=-1))
        dH_dq = dV[..., :n]
        if sys.metric_derivative is not None:
            dg = sys.metric_derivative(q)
            dH_dq = dH_dq + 0.5 * torch.einsum('...i,...ijk,...j->...k', p, dg, p)
        return join(dH_dq, (g @ p[..., None])[..., 0], dV[..., n])

    return ScalarField(2*n + 1, value, gradient, name=f'H[{sys.name}]')


def entropy_production(sys, x):
    "Delta(H) = p^T g(q) p, the rate at which E_H produces entropy"
    q, p, _ = split(as_tensor(x))
    return dot(p, (sys.inverse_metric(q) @ p[..., None])[..., 0])


def friction_force(sys, q, qdot):
    "Linear friction -gamma qdot; q is accepted for position-dependent laws and unused here."
    return -sys.gamma * as_tensor(qdot)


def temperature(sys, x=None):
    return sys.gamma


class ContactLagrangian:
    """
    A Lagrangian L(q, qdot, S) given as a ScalarField on R^{2n+1} with an analytic hessian.
    """

    def __init__(self, field, name=None):
        if field.hessian is None:
            raise ConfigError(f'Lagrangian {field.name} needs second partials')
        self.field = field
        self.n = field.n
        self.name = name or field.name

    def __call__(self, y):
        return self.field(y)

    def partials(self, y):
        "(dL/dq, dL/dqdot, dL/dS)"
        return split(self.field.grad(y))

    def blocks(self, y):
        "W = d2L/dqdot dqdot, d2L/dqdot dq and d2L/dqdot dS"
        n = self.n
        h = self.field.hessian(as_tensor(y))
        return h[..., n:2*n, n:2*n], h[..., n:2*n, :n], h[..., n:2*n, 2*n]

    def velocity_hessian(self, y):
        W = self.blocks(y)[0]
        condition = torch.linalg.cond(W)
        if not (condition < 1e12).all():
            raise SingularHessian(f'{self.name} is not regular: cond(W) = {condition.max().item():.3e}')
        return W

    def __repr__(self):
        return f'ContactLagrangian({self.name}, n={self.n})'


def lagrangian_of(sys):
    "L = 1/2 qdot^T g^{-1} qdot - V(q, S) for a constant invertible metric"
    if sys.constant_metric is None:
        raise ConfigError(f'{sys.name} has a q-dependent metric, its Lagrangian is not built in')
    if sys.potential.hessian is None:
        raise ConfigError(f'{sys.name} has a potential without second partials')
    n = sys.n
    mass = torch.linalg.inv(sys.constant_metric)
    V = sys.potential

    def qS(y):
        q, _, S = split(y)
        return torch.cat([q, S[..., None]], dim=-1)

    def value(y):
        _, v, _ = split(y)
        return 0.5 * dot(v, (mass @ v[..., None])[..., 0]) - V.value(qS(y))

    def gradient(y):
        _, v, _ = split(y)
        dV = V.gradient(qS(y))
        return join(-dV[..., :n], (mass @ v[..., None])[..., 0], -dV[..., n])

    def hessian(y):
        hV = V.hessian(qS(y)) # (..., n+1, n+1) in (q, S)
        h = torch.zeros(*y.shape, 2*n + 1, dtype=DTYPE)
        h[..., :n, :n] = -hV[..., :n, :n]
        h[..., :n, 2*n] = -hV[..., :n, n]
        h[..., 2*n, :n] = -hV[..., n, :n]
        h[..., 2*n, 2*n] = -hV[..., n, n]
        h[..., n:2*n, n:2*n] = mass
        return h

    return ContactLagrangian(ScalarField(2*n + 1, value, gradient, name=f'L[{sys.name}]', hessian=hessian))


def legendre_transform(lag, y):
    "FL(q, qdot, S) = (q, dL/dqdot, S)"
    y = as_tensor(y)
    q, _, S = split(y)
    return ContactPoint(join(q, lag.partials(y)[1], S))


def legendre_jacobian(lag, y):
    n = lag.n
    y = as_tensor(y)
    J = torch.eye(2*n + 1, dtype=DTYPE).expand(*y.shape, 2*n + 1).clone()
    J[..., n:2*n, :] = lag.field.hessian(y)[..., n:2*n, :]
    return J


def inverse_legendre(lag, x, tol=1e-12, max_iters=50):
    """
    Solves dL/dqdot(q, qdot, S) = p for qdot by damped Newton, starting from W(q, 0, S)^{-1} p.
    """
    x = as_tensor(x)
    q, p, S = split(x)
    scale = p.abs().amax(dim=-1).clamp(min=1.)

    def state(v):
        return join(q, v, S)

    def residual(v):
        return lag.partials(state(v))[1] - p

    v = torch.linalg.solve(lag.velocity_hessian(state(torch.zeros_like(p))), p[..., None])[..., 0]
    r = residual(v)
    error = r.abs().amax(dim=-1)
    for iteration in range(max_iters):
        if (error <= tol * scale).all():
            return TangentState(state(v))
        step = torch.linalg.solve(lag.velocity_hessian(state(v)), r[..., None])[..., 0]
        alpha = torch.ones_like(error)
        for _ in range(10):
            trial = v - alpha[..., None] * step
            trial_r = residual(trial)
            trial_error = trial_r.abs().amax(dim=-1)
            worse = trial_error > error
            if not worse.any():
                break
            alpha = torch.where(worse, alpha / 2, alpha)
        v, r, error = trial, trial_r, trial_error
    if (error <= tol * scale).all():
        return TangentState(state(v))
    raise NewtonDivergence(f'Legendre inversion of {lag.name} did not converge', max_iters, error.max().item())


def hamiltonian_of_lagrangian(lag):
    "H = E_L o FL^{-1}, with dH = (-dL/dq, qdot, -dL/dS) at the preimage"

    def value(x):
        return lagrangian_energy(lag, inverse_legendre(lag, x))

    def gradient(x):
        y = inverse_legendre(lag, x).data
        Lq, _, LS = lag.partials(y)
        return join(-Lq, split(y)[1], -LS)

    return ScalarField(2*lag.n + 1, value, gradient, name=f'H[{lag.name}]')


def lagrangian_energy(lag, y):
    y = as_tensor(y)
    _, v, _ = split(y)
    return dot(v, lag.partials(y)[1]) - lag(y)


def eta_L_at(lag, y, w):
    "eta_L = dS - dL/dqdot^i dq^i"
    y, w = as_tensor(y), as_tensor(w)
    wq, _, wS = split(w)
    return wS - dot(lag.partials(y)[1], wq)


def eta_L_covector(lag, y):
    y = as_tensor(y)
    Lv = lag.partials(y)[1]
    return join(-Lv, torch.zeros_like(Lv), torch.ones_like(y[..., -1]))


def flat_L(lag, y, v):
    """
    i_v d(eta_L) + eta_L(v) eta_L. The derivative of the eta_L coefficients is read off the
    hessian of L: only the dq block, -dL/dqdot, varies.
    """
    y, v = as_tensor(y), as_tensor(v)
    n = lag.n
    M = torch.zeros(*y.shape, y.shape[-1], dtype=DTYPE)
    M[..., :n, :] = -lag.field.hessian(y)[..., n:2*n, :]
    interior = (M @ v[..., None])[..., 0] - (M.transpose(-1, -2) @ v[..., None])[..., 0]
    return interior + eta_L_at(lag, y, v)[..., None] * eta_L_covector(lag, y)


def reeb_L(lag, y):
    y = as_tensor(y)
    W = lag.velocity_hessian(y)
    _, _, mixed_S = lag.blocks(y)
    dqdot = -torch.linalg.solve(W, mixed_S[..., None])[..., 0]
    return TQVector(join(torch.zeros_like(dqdot), dqdot, torch.ones_like(y[..., -1])))


def herglotz_rhs(lag, y, law='thermodynamic'):
    """
    First-order form of the Herglotz equations
        W qddot = dL/dq - d2L/dqdot dq qdot - d2L/dqdot dS Sdot + dL/dqdot dL/dS

    with Sdot = qdot . dL/dqdot (`thermodynamic`, FL-related to E_H) or Sdot = L (`classic`).
    """
    y = as_tensor(y)
    _, v, _ = split(y)
    Lq, Lv, LS = lag.partials(y)
    W = lag.velocity_hessian(y)
    _, mixed_q, mixed_S = lag.blocks(y)
    match law:
        case 'thermodynamic':
            Sdot = dot(v, Lv)
        case 'classic':
            Sdot = lag(y)
        case _:
            raise ValueError(f'unknown entropy law {law!r}, expected thermodynamic or classic')
    force = Lq - (mixed_q @ v[..., None])[..., 0] - mixed_S * Sdot[..., None] + Lv * LS[..., None]
    qddot = torch.linalg.solve(W, force[..., None])[..., 0]
    return TQVector(join(v, qddot, Sdot))


def quartic_lagrangian(gamma=0.1, coupling=0.):
    "qdot^2/2 + qdot^4/12 - q^2/2 - gamma S + coupling qdot S, a regular non-quadratic Lagrangian"
    return ContactLagrangian(polynomial(3, [((0, 2, 0), 0.5), ((0, 4, 0), 1/12), ((2, 0, 0), -0.5),
                                            ((0, 0, 1), -gamma), ((0, 1, 1), coupling)], name='L4'))


def test_damped_oscillator_hamiltonian():
    H = hamiltonian_of(damped_oscillator(0.1))
    assert abs(H(ContactPoint.of(1., 2., 3.)).item() - 2.8) < 1e-15
    assert H(ContactPoint.of(1.5, 0., 2.)).item() == 1.125 + 0.2
    assert H.grad(ContactPoint.of(1., 2., 3.)).tolist() == [1., 2., 0.1]


def metric_2d():
    "g = diag(1 + q1^2, 2 + sin q2) with an x-dependent kinetic term"
    def inverse_metric(q):
        return torch.diag_embed(torch.stack([1 + q[..., 0]**2, 2 + torch.sin(q[..., 1])], dim=-1))

    def metric_derivative(q):
        dg = torch.zeros(*q.shape[:-1], 2, 2, 2, dtype=DTYPE)
        dg[..., 0, 0, 0] = 2 * q[..., 0]
        dg[..., 1, 1, 1] = torch.cos(q[..., 1])
        return dg

    V = polynomial(3, [((2, 0, 0), 1.), ((1, 1, 0), 0.3), ((0, 4, 0), 0.1), ((0, 0, 1), 0.5), ((1, 0, 1), 0.2)])
    return SimpleThermoSystem(2, inverse_metric, V, metric_derivative=metric_derivative, name='metric-2d')


def test_hamiltonian_gradients(generator):
    from .field import gradient_error, random_points

    for sys in (damped_oscillator(0.1), damped_oscillator(0.3, mass=2.), metric_2d()):
        H = hamiltonian_of(sys)
        assert gradient_error(H, random_points(20, 2*sys.n + 1, generator, scale=2.)) < 1e-5


def test_invalid_metrics_are_rejected():
    import pytest

    V = polynomial(3, [((2, 0, 0), 1.)])
    with pytest.raises(ConfigError):
        SimpleThermoSystem(2, [[1., 0.5], [0., 1.]], V)
    with pytest.raises(ConfigError):
        SimpleThermoSystem(2, [[1., 0.], [0., -1.]], V)
    with pytest.raises(ConfigError):
        damped_oscillator(-0.1)
    with pytest.raises(ConfigError):
        damped_oscillator(0.1, mass=0.)


def test_first_and_second_law(generator):
    from .contact import evolution, lie_derivative
    from .field import random_points

    for sys in (damped_oscillator(0.1), metric_2d()):
        H = hamiltonian_of(sys)
        x = random_points(100, 2*sys.n + 1, generator, scale=3.)
        E = evolution(H, x)
        scale = H.grad(x).abs().amax(dim=-1).clamp(min=1.) ** 2
        assert (lie_derivative(H, E, x).abs() / scale).max() < 1e-13
        production = entropy_production(sys, x)
        assert torch.allclose(E[..., -1], production)
        assert production.min() >= -1e-12


def test_single_generator_identities(generator):
    from .contact import delta, poisson_lambda0
    from .field import darboux_coordinate, random_points

    for sys in (damped_oscillator(0.1), metric_2d()):
        H = hamiltonian_of(sys)
        S = darboux_coordinate(sys.n, 'S')
        x = random_points(100, 2*sys.n + 1, generator, scale=3.)
        assert (poisson_lambda0(H, H, x) == 0).all()
        assert (delta(H, H, x) == 0).all()
        assert (poisson_lambda0(S, H, x) == 0).all()
        assert torch.allclose(delta(H, S, x), entropy_production(sys, x))
        assert delta(H, S, x).min() >= 0


def test_friction_and_temperature(generator):
    from .contact import evolution
    from .field import random_points

    sys = damped_oscillator(0.1)
    assert abs(friction_force(sys, 0., 2.).item() + 0.2) < 1e-16
    assert friction_force(sys, 7., 2.).item() == friction_force(sys, -3., 2.).item()
    assert friction_force(damped_oscillator(0.), 1., 2.).item() == 0.
    assert temperature(sys) == 0.1

    H = hamiltonian_of(sys)
    x = random_points(20, 3, generator, scale=5.)
    assert (H.grad(x)[..., -1] == temperature(sys, x)).all()
    # with m = 1, Sdot = -<F_fr, qdot> / T = qdot^2
    q, qdot = split(x)[:2]
    heat = -dot(friction_force(sys, q, qdot), qdot) / temperature(sys)
    assert torch.allclose(evolution(H, x)[..., -1], heat)


def test_legendre_transform(generator):
    from .field import random_points

    lag = lagrangian_of(damped_oscillator(0.1))
    assert legendre_transform(lag, TangentState.of(0., 1., 0.)).tolist() == [0., 1., 0.]
    heavy = lagrangian_of(damped_oscillator(0.1, mass=3.))
    assert torch.allclose(legendre_transform(heavy, TangentState.of(0.5, 2., 1.)).p, torch.tensor([6.], dtype=DTYPE))

    lag = quartic_lagrangian()
    y = random_points(20, 3, generator, scale=2.)
    recovered = inverse_legendre(lag, legendre_transform(lag, y))
    assert (recovered.data - y).abs().max() < 1e-10


def test_lagrangian_energy_matches_hamiltonian(generator):
    lag = lagrangian_of(damped_oscillator(0.1))
    assert lagrangian_energy(lag, TangentState.of(0., 1., 0.)).item() == 0.5

    H = hamiltonian_of(damped_oscillator(0.1))
    grid = torch.cartesian_prod(*[torch.linspace(-3, 3, 7, dtype=DTYPE)] * 3)
    assert (lagrangian_energy(lag, grid) - H(legendre_transform(lag, grid))).abs().max() < 1e-12

    # degree one in qdot has no energy
    linear = ContactLagrangian(polynomial(3, [((1, 1, 0), 2.), ((0, 2, 0), 0.)]))
    assert lagrangian_energy(linear, TangentState.of(0.3, -0.7, 1.)).abs().item() < 1e-15


def test_contact_form_on_tangent_side(generator):
    from .contact import eta
    from .field import finite_difference_jacobian, random_points

    lag = lagrangian_of(damped_oscillator(0.1))
    assert eta_L_at(lag, TangentState.of(0., 1., 0.), TQVector.of(1., 0., 0.)).item() == -1.
    assert eta_L_at(lag, TangentState.of(0., 1., 0.), TQVector.of(0., 0., 1.)).item() == 1.

    lag = quartic_lagrangian(coupling=0.3)
    y = random_points(20, 3, generator, scale=2.)
    w = random_points(20, 3, generator)
    x = legendre_transform(lag, y).data
    pushed = (legendre_jacobian(lag, y) @ w[..., None])[..., 0]
    assert (eta_L_at(lag, y, w) - eta(x, pushed)).abs().max() < 1e-12
    J = finite_difference_jacobian(lambda y: legendre_transform(lag, y).data, y)
    assert torch.allclose(J, legendre_jacobian(lag, y), atol=1e-8)


def test_reeb_on_tangent_side(generator):
    import pytest
    from .field import finite_difference_jacobian, random_points

    lag = lagrangian_of(damped_oscillator(0.1))
    assert reeb_L(lag, TangentState.of(0.3, 1., 2.)).tolist() == [0., 0., 1.]

    lag = quartic_lagrangian(coupling=0.3)
    for y in random_points(10, 3, generator, scale=2.):
        R = reeb_L(lag, y).data
        assert abs(eta_L_at(lag, y, R).item() - 1.) < 1e-15
        # i_R d(eta_L) = 0 with the exterior derivative of eta_L taken by finite differences
        alpha = lambda z: join(-lag.partials(z)[1], torch.zeros_like(z[..., :1]), torch.ones_like(z[..., -1]))
        J = finite_difference_jacobian(alpha, y)
        assert (J @ R - J.T @ R).abs().max() < 1e-5

    with pytest.raises(SingularHessian):
        reeb_L(ContactLagrangian(polynomial(3, [((0, 1, 0), 1.), ((2, 0, 0), 1.)])), TangentState.of(0., 1., 0.))


def test_flat_on_tangent_side(generator):
    from .field import finite_difference_jacobian, random_points

    lag = quartic_lagrangian(gamma=0.2, coupling=0.3)
    ys = random_points(10, 3, generator, scale=2.)
    vs = random_points(10, 3, generator)
    for y, v in zip(ys, vs):
        J = finite_difference_jacobian(lambda z: eta_L_covector(lag, z), y)
        expected = J @ v - J.T @ v + eta_L_at(lag, y, v) * eta_L_covector(lag, y)
        assert (flat_L(lag, y, v) - expected).abs().max() < 1e-6
        # the Reeb field is sent to eta_L
        assert (flat_L(lag, y, reeb_L(lag, y).data) - eta_L_covector(lag, y)).abs().max() < 1e-12

    # nondegenerate: the matrix of flat_L is invertible
    y = ys[0]
    matrix = torch.stack([flat_L(lag, y, e) for e in torch.eye(3, dtype=DTYPE)], dim=-1)
    assert abs(torch.linalg.det(matrix).item()) > 1e-6


def test_herglotz_rhs(generator):
    from .field import random_points

    gamma = 0.1
    lag = lagrangian_of(damped_oscillator(gamma))
    y = random_points(20, 3, generator, scale=3.)
    q, v, _ = split(y)
    expected = join(v, -q - gamma * v, v[..., 0] ** 2)
    assert torch.allclose(herglotz_rhs(lag, y).data, expected)
    assert herglotz_rhs(lag, TangentState.of(1., 0., 4.)).dS.item() == 0.

    for lag in (lagrangian_of(damped_oscillator(gamma)), quartic_lagrangian(coupling=0.3)):
        difference = herglotz_rhs(lag, y).data[..., -1] - herglotz_rhs(lag, y, law='classic').data[..., -1]
        assert torch.allclose(difference, lagrangian_energy(lag, y))


def test_herglotz_is_legendre_related_to_evolution(generator):
    from .contact import evolution
    from .field import finite_difference_jacobian, random_points

    pairs = [(lagrangian_of(damped_oscillator(0.1)), hamiltonian_of(damped_oscillator(0.1))),
             (quartic_lagrangian(), hamiltonian_of_lagrangian(quartic_lagrangian()))]
    for lag, H in pairs:
        y = random_points(20, 3, generator, scale=2.)
        J = finite_difference_jacobian(lambda z: legendre_transform(lag, z).data, y)
        pushed = (J @ herglotz_rhs(lag, y).data[..., None])[..., 0]
        E = evolution(H, legendre_transform(lag, y).data)
        assert ((pushed - E).abs() / E.abs().clamp(min=1.)).max() < 1e-8


if __name__ == '__main__':
    import pytest
    pytest.main(["--no-header", "-v", "-s", __file__])
