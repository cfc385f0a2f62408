"""
Invariant suites behind `thermoflow check`. Every check reports the largest residual it saw
against a tolerance; residuals of one-sided properties are shortfalls, zero when the property holds.
"""
import math
from dataclasses import dataclass

import torch

from .contact import ContactStructure, dot, eta, eta_covector, evolution, interior_d_eta, jacobi, split
from .errors import ThermoError
from .field import DTYPE, darboux_coordinate, finite_difference_gradient, numerical, random_points, random_polynomial

SUITES = ('geometry', 'gradients', 'systems', 'integrators')


@dataclass
class CheckResult:
    suite: str
    name: str
    max_residual: float
    tol: float

    @property
    def passed(self):
        return math.isfinite(self.max_residual) and self.max_residual <= self.tol

    def line(self):
        return f'{self.suite}/{self.name} max_residual={self.max_residual:.17g} {"PASS" if self.passed else "FAIL"}'


def largest(t):
    return float(torch.as_tensor(t, dtype=DTYPE).abs().max())


def relative(error, scale):
    return largest(torch.as_tensor(error).abs() / torch.as_tensor(scale).abs().clamp(min=1.))


def geometry(generator, structure=ContactStructure):
    for n in (1, 2):
        cs = structure(n)
        dim = cs.dim
        x = random_points(50, dim, generator, scale=3.)
        a, b = random_points(50, dim, generator), random_points(50, dim, generator)
        f, g, h = (random_polynomial(dim, 3, generator) for _ in range(3))
        R = cs.reeb().data.expand_as(x)
        tag = f'[n={n}]'

        yield f'eta_of_reeb{tag}', largest(cs.eta_at(x, R) - 1), 1e-15
        yield f'reeb_in_kernel{tag}', largest(cs.d_eta_at(x, R, a)), 1e-15

        lab, lba = cs.lambda_at(x, a, b), cs.lambda_at(x, b, a)
        yield f'lambda_skew{tag}', relative(lab + lba, lab), 1e-13

        sharp_a = cs.sharp_lambda(x, a).data
        pairing = max(largest(dot(e.expand_as(a), sharp_a) - cs.lambda_at(x, a, e.expand_as(a)))
                      for e in torch.eye(dim, dtype=DTYPE))
        yield f'sharp_pairing{tag}', pairing, 1e-13
        yield f'flat_inverse{tag}', largest(cs.sharp_flat(x, cs.flat(x, a)).data - a), 1e-10

        df, dg = f.grad(x), g.grad(x)
        cartan = cs.lambda_at(x, df, dg)
        poisson, dissipative = cs.poisson_lambda0_bracket(f, g, x), cs.delta_bracket(f, g, x)
        yield f'bracket_decomposition{tag}', relative(cartan - poisson - dissipative, poisson.abs() + dissipative.abs()), 1e-13

        fg, gf = cs.jacobi_bracket(f, g, x), cs.jacobi_bracket(g, f, x)
        yield f'jacobi_skew{tag}', relative(fg + gf, fg), 1e-13

        conserved = dot(df, cs.sharp_lambda(x, df).data)
        yield f'evolution_conserves{tag}', relative(conserved, df.abs().amax(dim=-1) ** 2), 1e-13

        S = darboux_coordinate(n, 'S')
        production = cs.lie_derivative(f, cs.liouville(x), x)
        yield f'delta_bracket_with_entropy{tag}', relative(cs.delta_bracket(f, S, x) - production, production), 1e-13

        y = x[:20] / 3
        eta_of_E = lambda z: eta(z, evolution(f, z))
        lhs = interior_d_eta(evolution(f, y)) + finite_difference_gradient(eta_of_E, y, step=1e-6)
        dfy = f.grad(y)
        yield f'lie_derivative_of_eta{tag}', largest(lhs - (dfy - dfy[..., -1:] * eta_covector(y))), 1e-5

        def nested(u, v, w):
            inner = numerical(dim, lambda z: jacobi(v, w, z), step=1e-5)
            return jacobi(u, inner, y)

        terms = torch.stack([nested(f, g, h), nested(g, h, f), nested(h, f, g)])
        yield f'jacobi_identity{tag}', relative(terms.sum(dim=0), terms.abs().max(dim=0).values), 1e-4

        level = 0.1 * random_polynomial(dim, 2, generator) + 2 * S
        yield f'level_set{tag}', max(cs.verify_level_set_decomposition(level, point).max_residual
                                     for point in random_points(50, dim, generator)), 1e-10

    cs = structure(1)
    q, p, S = (darboux_coordinate(1, block) for block in 'qpS')
    g, h = q + 2, p + 3
    origin = torch.zeros(3, dtype=DTYPE)
    defect = cs.jacobi_bracket(S, g * h, origin) - g(origin) * cs.jacobi_bracket(S, h, origin) - h(origin) * cs.jacobi_bracket(S, g, origin)
    yield 'leibniz_defect_witness', largest(defect + 6), 0.


def gradients(generator):
    from .gradients import KINDS, DiscreteGradientRule, check_axioms, discrete_gradient, random_pairs, sample_hamiltonians

    hamiltonians = sample_hamiltonians(generator)
    pairs = [random_pairs(1000, H.dim, generator) for H in hamiltonians]
    for kind in KINDS:
        rule = DiscreteGradientRule(kind)
        reports = [check_axioms(rule, H, ps) for H, ps in zip(hamiltonians, pairs)]
        yield f'energy[{kind}]', max(report.energy_residual for report in reports), 1e-11
        shortfall = max(0. if report.consistency[-1] <= report.tol else max(0., 0.9 - report.consistency_order)
                        for report in reports)
        yield f'consistency_order[{kind}]', shortfall, 0.
        coincident = 0.
        for H in hamiltonians:
            x = random_points(100, H.dim, generator)
            coincident = max(coincident, relative(discrete_gradient(rule, H, x, x) - H.grad(x), H.grad(x)))
        yield f'coincident_points[{kind}]', coincident, 1e-12


def systems(generator):
    from .contact import delta, poisson_lambda0
    from .systems import (damped_oscillator, entropy_production, hamiltonian_of, hamiltonian_of_lagrangian, herglotz_rhs,
                          inverse_legendre, lagrangian_energy, lagrangian_of, legendre_transform, metric_2d,
                          quartic_lagrangian)
    from .field import finite_difference_jacobian

    for sys in (damped_oscillator(0.1), metric_2d()):
        H = hamiltonian_of(sys)
        x = random_points(100, 2*sys.n + 1, generator, scale=3.)
        E = evolution(H, x)
        production = entropy_production(sys, x)
        S = darboux_coordinate(sys.n, 'S')
        yield f'first_law[{sys.name}]', relative(dot(H.grad(x), E), H.grad(x).abs().amax(dim=-1) ** 2), 1e-13
        yield f'entropy_production[{sys.name}]', relative(E[..., -1] - production, production), 1e-13
        yield f'second_law[{sys.name}]', max(0., -production.min().item()), 1e-12
        yield f'single_generator[{sys.name}]', max(largest(poisson_lambda0(H, H, x)), largest(delta(H, H, x)),
                                                  largest(poisson_lambda0(S, H, x))), 1e-15

    lag = quartic_lagrangian()
    y = random_points(20, 3, generator, scale=2.)
    yield 'inverse_legendre[L4]', largest(inverse_legendre(lag, legendre_transform(lag, y)).data - y), 1e-10

    lag, H = lagrangian_of(damped_oscillator(0.1)), hamiltonian_of(damped_oscillator(0.1))
    grid = torch.cartesian_prod(*[torch.linspace(-3, 3, 7, dtype=DTYPE)] * 3)
    yield 'energy_is_hamiltonian', largest(lagrangian_energy(lag, grid) - H(legendre_transform(lag, grid))), 1e-12

    pairs = [(lag, H), (quartic_lagrangian(), hamiltonian_of_lagrangian(quartic_lagrangian()))]
    for lag, H in pairs:
        y = random_points(20, 3, generator, scale=2.)
        J = finite_difference_jacobian(lambda z: legendre_transform(lag, z).data, y)
        pushed = (J @ herglotz_rhs(lag, y).data[..., None])[..., 0]
        E = evolution(H, legendre_transform(lag, y).data)
        yield f'legendre_related[{lag.name}]', relative(pushed - E, E), 1e-8
        difference = herglotz_rhs(lag, y).data[..., -1] - herglotz_rhs(lag, y, law='classic').data[..., -1]
        yield f'entropy_laws_differ_by_energy[{lag.name}]', relative(difference - lagrangian_energy(lag, y), difference), 1e-12


def integrators(generator):
    from .gradients import DiscreteGradientRule
    from .herglotz import HarmonicHerglotzStepper, HerglotzStepper, herglotz_harmonic_closed_form
    from .integrators import HarmonicDiscreteGradientStepper, StepperConfig, dg_harmonic_closed_form, dg_step, integrate
    from .reference import reference_integrate
    from .systems import damped_oscillator, hamiltonian_of, lagrangian_of

    cfg = StepperConfig(h=0.1)
    system = damped_oscillator(0.1)
    H = hamiltonian_of(system)
    x0 = torch.tensor([0., 10., 0.], dtype=DTYPE)

    expected = torch.tensor([4 / 4.03, 39.7 / 4.03, 160 / 16.2409], dtype=DTYPE)
    yield 'dg_closed_form_first_step', relative(dg_harmonic_closed_form(0.1, 0.1, x0) - expected, expected), 1e-12

    x, difference = x0, 0.
    for _ in range(20):
        closed = dg_harmonic_closed_form(0.1, 0.1, x)
        difference = max(difference, largest(dg_step(H, DiscreteGradientRule('midpoint'), cfg, x).data - closed))
        x = closed
    yield 'dg_generic_matches_closed_form', difference, 1e-10

    drift = 0.
    for kind in ('midpoint', 'mean-value', 'itoh-abe'):
        P = random_polynomial(3, 2, generator)
        for point in random_points(5, 3, generator):
            drift = max(drift, abs(P(dg_step(P, DiscreteGradientRule(kind), cfg, point).data).item() - P(point).item()))
    yield 'dg_energy_per_step', drift, 10 * cfg.newton_tol

    trajectory = integrate(HarmonicDiscreteGradientStepper(0.1, cfg), x0, 1000)
    summary = trajectory.summary()
    yield 'dg_energy_drift_1000_steps', summary['max_abs_H_drift'], 1e-10
    yield 'dg_entropy_monotone', max(0., -summary['min_dS']), 1e-12

    q1, q2, S1 = herglotz_harmonic_closed_form(0.1, 0.1, 0., 1., 0.)
    yield 'herglotz_closed_form', max(abs(q2 - 7.9401 / 4.01), abs(S1 - 9.975)), 1e-12

    initial = (0., 1., 0.)
    generic = integrate(HerglotzStepper(lagrangian_of(system), cfg, H=H), initial, 200)
    closed = integrate(HarmonicHerglotzStepper(0.1, cfg), initial, 1000)
    yield 'herglotz_generic_matches_closed_form', largest(generic.stacked() - closed.stacked()[:201]), 1e-10
    S = closed.entropy
    yield 'herglotz_entropy_over_two_steps', max(0., -(S[2:] - S[:-2]).min().item()), 1e-12
    energy = torch.tensor(closed.energy)
    amplitude = lambda window: (window.max() - window.min()).item()
    yield 'herglotz_energy_settles', max(0., amplitude(energy[500:]) - amplitude(energy[:501])), 0.

    reference = reference_integrate(H, x0, 20., times=[0.1 * k for k in range(201)])
    yield 'reference_energy_drift', reference.summary()['max_abs_H_drift'], 1e-7
    yield 'reference_entropy_monotone', max(0., -reference.entropy_increments.min().item()), 1e-9


def run_suite(suite, seed, structure=ContactStructure):
    "Results of one suite, each suite drawing from its own generator seeded with `seed`."
    generator = torch.Generator().manual_seed(seed)
    match suite:
        case 'geometry':
            checks = geometry(generator, structure)
        case 'gradients':
            checks = gradients(generator)
        case 'systems':
            checks = systems(generator)
        case 'integrators':
            checks = integrators(generator)
        case _:
            raise ValueError(f'unknown suite {suite!r}, expected one of {", ".join(SUITES)} or all')
    results = []
    try:
        for name, residual, tol in checks:
            results.append(CheckResult(suite, name, float(residual), tol))
    except ThermoError as e:
        results.append(CheckResult(suite, f'raised:{type(e).__name__}', math.inf, 0.))
    return results


def run(suite, seed, structure=ContactStructure):
    suites = SUITES if suite == 'all' else (suite,)
    return [result for name in suites for result in run_suite(name, seed, structure)]


@dataclass(frozen=True)
class FlippedLambda(ContactStructure):
    "Lambda with the sign of its second term flipped, for mutation tests."

    def lambda_at(self, x, a, b):
        x, a, b = self._check(x, a, b)
        _, p, _ = split(x)
        aq, ap, aS = split(a)
        bq, bp, bS = split(b)
        return dot(ap, bq + p * bS[..., None]) + dot(bp, aq + p * aS[..., None])


def test_geometry_suite(seed):
    results = run('geometry', seed)
    assert all(result.passed for result in results), [result.line() for result in results if not result.passed]
    assert len({result.name for result in results}) == len(results)


def test_gradients_suite(seed):
    results = run('gradients', seed)
    assert all(result.passed for result in results), [result.line() for result in results if not result.passed]


def test_systems_suite(seed):
    results = run('systems', seed)
    assert all(result.passed for result in results), [result.line() for result in results if not result.passed]


def test_integrators_suite(seed):
    results = run('integrators', seed)
    assert all(result.passed for result in results), [result.line() for result in results if not result.passed]


def test_broken_lambda_fails_geometry(seed):
    failed = {result.name for result in run('geometry', seed, structure=FlippedLambda) if not result.passed}
    assert 'lambda_skew[n=1]' in failed
    assert 'sharp_pairing[n=2]' in failed
    assert 'bracket_decomposition[n=1]' in failed


def test_reports_are_reproducible():
    lines = [result.line() for result in run('geometry', 7)]
    assert lines == [result.line() for result in run('geometry', 7)]
    assert lines[0].startswith('geometry/eta_of_reeb[n=1] max_residual=') and lines[0].endswith(' PASS')


def test_line_format():
    assert CheckResult('s', 'x', 0.1, 1.).line() == 's/x max_residual=0.10000000000000001 PASS'
    assert CheckResult('s', 'x', math.nan, 1.).line() == 's/x max_residual=nan FAIL'


if __name__ == '__main__':
    import pytest
    pytest.main(["--no-header", "-v", "-s", __file__])
