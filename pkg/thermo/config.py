"""
Experiment files: a JSON object naming a system, an integrator, a step size, a number of steps,
initial data and outputs, e.g.

    {
        "system": "damped-oscillator", "gamma": 0.1,
        "integrator": "dg-harmonic-exact", "h": 0.1, "steps": 1000,
        "initial": {"q": 0, "p": 10, "S": 0},
        "outputs": [{"csv": "oscillator.csv", "svg": "oscillator.svg", "quantities": ["q", "p", "S", "H"]}]
    }

Systems are "damped-oscillator" (V = q^2/2), "linearly-damped" (V(q) given by `potential`) or
an inline object {"n": .., "mass": .., "gamma": .., "potential": [...]} whose potential may also
depend on S. Potential terms are [i, j, c] for c q^i S^j, or [[i_1, .., i_n], j, c] when n > 1.
Herglotz integrators start from {"q0": .., "q1": .., "S0": ..}, all others from {"q": .., "p": .., "S": ..}.
"""
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import torch

from .errors import ConfigError
from .field import DTYPE, polynomial

HERGLOTZ = ('herglotz', 'herglotz-harmonic-exact')
INTEGRATORS = ('dg-midpoint', 'dg-mean-value', 'dg-itoh-abe', 'dg-harmonic-exact', *HERGLOTZ, 'reference', 'euler')
QUANTITIES = ('q', 'p', 'S', 'H', 'dS')


@dataclass
class Output:
    csv: str | None = None
    svg: str | None = None
    quantities: list = field(default_factory=lambda: ['q', 'p', 'S', 'H'])

    def __post_init__(self):
        unknown = [name for name in self.quantities if name not in QUANTITIES]
        if unknown:
            raise ConfigError(f'unknown quantities {unknown}, expected some of {list(QUANTITIES)}')


@dataclass
class ExperimentConfig:
    system: str | dict = 'damped-oscillator'
    gamma: float = 0.1
    mass: float = 1.
    potential: list = field(default_factory=lambda: [[2, 0, 0.5]])
    integrator: str = 'dg-midpoint'
    h: float = 0.1
    steps: int = 1000
    initial: dict = field(default_factory=lambda: {'q': 0., 'p': 10., 'S': 0.})
    seed: int = 42
    quadrature_nodes: int = 8
    rtol: float = 1e-10
    atol: float = 1e-12
    sweep: dict = field(default_factory=dict)
    outputs: list = field(default_factory=list)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f'unknown config keys {unknown}')
        d = dict(d)
        d['outputs'] = [output if isinstance(output, Output) else Output(**output) for output in d.get('outputs', [])]
        return cls(**d)

    @classmethod
    def load(cls, path):
        try:
            d = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f'cannot read {path}: {e}') from e
        if not isinstance(d, dict):
            raise ConfigError(f'{path} must hold a JSON object')
        return cls.from_dict(d)

    def override(self, **kwargs):
        "Replaces fields given as not-None keyword arguments, as CLI flags do."
        d = self.state_dict()
        d.update({key: value for key, value in kwargs.items() if value is not None})
        return type(self).from_dict(d)

    def validate(self, min_steps=1):
        if self.integrator not in INTEGRATORS:
            raise ConfigError(f'unknown integrator {self.integrator!r}, expected one of {", ".join(INTEGRATORS)}')
        if not self.h > 0:
            raise ConfigError(f'h must be positive, got {self.h}')
        if self.steps < min_steps:
            raise ConfigError(f'steps must be at least {min_steps}, got {self.steps}')
        expected = ('q0', 'q1', 'S0') if self.integrator in HERGLOTZ else ('q', 'p', 'S')
        if sorted(self.initial) != sorted(expected):
            raise ConfigError(f'{self.integrator} starts from {", ".join(expected)}, got {", ".join(self.initial) or "nothing"}')
        if self.integrator.endswith('harmonic-exact') and (self.system != 'damped-oscillator' or self.mass != 1):
            raise ConfigError(f'{self.integrator} is the closed form for the unit-mass damped oscillator')
        n = self.make_system().n
        dim = self.initial_state().shape[-1]
        if dim != 2*n + 1:
            raise ConfigError(f'initial state has {dim} components, the system needs {2*n + 1} (n = {n})')
        return self

    def make_system(self):
        from .systems import LinearlyDampedSystem, SimpleThermoSystem, damped_oscillator

        match self.system:
            case 'damped-oscillator':
                return damped_oscillator(self.gamma, self.mass)
            case 'linearly-damped':
                n, terms = potential_terms(self.potential)
                if any(j for _, j, _ in terms):
                    raise ConfigError('linearly-damped potentials depend on q only, use an inline system for S terms')
                V = polynomial(n, [(e, c) for e, _, c in terms], name='V')
                return LinearlyDampedSystem(self.mass, self.gamma, V)
            case {'potential': potential, **rest}:
                extra = sorted(set(rest) - {'n', 'mass', 'gamma', 'name'})
                if extra:
                    raise ConfigError(f'unknown inline system keys {extra}')
                n, terms = potential_terms(potential, rest.get('n'))
                mass, gamma = rest.get('mass', self.mass), rest.get('gamma', self.gamma)
                if mass <= 0:
                    raise ConfigError(f'mass must be positive, got {mass}')
                if gamma < 0:
                    raise ConfigError(f'gamma must be nonnegative, got {gamma}')
                V = polynomial(n + 1, [(tuple(e) + (j,), c) for e, j, c in terms] + [((0,) * n + (1,), gamma)], name='V')
                return SimpleThermoSystem(n, torch.eye(n, dtype=DTYPE) / mass, V, name=rest.get('name', 'inline'))
            case _:
                raise ConfigError(f'unknown system {self.system!r}, expected damped-oscillator, linearly-damped or an inline object')

    def initial_state(self):
        "(q, p, S) or (q0, q1, S0) flattened to a float64 tensor"
        first, second, last = ('q0', 'q1', 'S0') if self.integrator in HERGLOTZ else ('q', 'p', 'S')
        blocks = [torch.atleast_1d(torch.as_tensor(self.initial[key], dtype=DTYPE)) for key in (first, second)]
        if blocks[0].shape != blocks[1].shape or blocks[0].dim() != 1:
            raise ConfigError(f'{first} and {second} must have the same length')
        S = torch.as_tensor(self.initial[last], dtype=DTYPE).reshape(1)
        return torch.cat([*blocks, S])

    def sweep_grid(self):
        "[(h, gamma)] in grid order: h outer, gamma inner"
        hs = self.sweep.get('h', [self.h])
        gammas = self.sweep.get('gamma', [self.gamma])
        return [(h, gamma) for h in hs for gamma in gammas]

    def state_dict(self):
        return asdict(self)


def potential_terms(terms, n=None):
    "[(exponents of q, power of S, coefficient)] and the number of q coordinates"
    parsed = []
    for term in terms:
        match term:
            case [int(i), int(j), c]:
                parsed.append(((i,), j, float(c)))
            case [list(e), int(j), c] if all(isinstance(k, int) for k in e):
                parsed.append((tuple(e), j, float(c)))
            case _:
                raise ConfigError(f'potential term {term!r} is not [i, j, c] or [[i_1, .., i_n], j, c]')
    dims = {len(e) for e, _, _ in parsed}
    if n is not None:
        dims.add(n)
    if len(dims) != 1:
        raise ConfigError(f'potential terms disagree on the number of coordinates: {sorted(dims)}')
    n = dims.pop()
    if any(k < 0 for e, j, _ in parsed for k in (*e, j)):
        raise ConfigError('potential exponents must be nonnegative')
    return n, parsed


def make_hamiltonian(cfg):
    from .systems import hamiltonian_of
    return hamiltonian_of(cfg.make_system())


def make_stepper(cfg, step_config):
    "The stepper for every integrator but `reference`, which has no steps."
    from .gradients import DiscreteGradientRule
    from .herglotz import HarmonicHerglotzStepper, HerglotzStepper
    from .integrators import DiscreteGradientStepper, EulerStepper, HarmonicDiscreteGradientStepper
    from .systems import hamiltonian_of, lagrangian_of

    system = cfg.make_system()
    match cfg.integrator:
        case 'dg-midpoint' | 'dg-mean-value' | 'dg-itoh-abe':
            rule = DiscreteGradientRule.from_name(cfg.integrator, quadrature_nodes=cfg.quadrature_nodes)
            return DiscreteGradientStepper(hamiltonian_of(system), rule, step_config)
        case 'dg-harmonic-exact':
            return HarmonicDiscreteGradientStepper(cfg.gamma, step_config)
        case 'herglotz':
            return HerglotzStepper(lagrangian_of(system), step_config, H=hamiltonian_of(system))
        case 'herglotz-harmonic-exact':
            return HarmonicHerglotzStepper(cfg.gamma, step_config)
        case 'euler':
            return EulerStepper(hamiltonian_of(system), step_config)
        case _:
            raise ConfigError(f'{cfg.integrator} has no stepper')


def test_defaults_validate():
    cfg = ExperimentConfig().validate()
    assert cfg.initial_state().tolist() == [0., 10., 0.]
    assert cfg.make_system().name == 'damped-oscillator'


def test_load_and_override(tmp_path):
    path = tmp_path / 'herglotz.json'
    path.write_text(json.dumps({
        'system': 'damped-oscillator', 'gamma': 0.1, 'integrator': 'herglotz-harmonic-exact',
        'h': 0.1, 'steps': 1000, 'initial': {'q0': 0, 'q1': 1, 'S0': 0},
        'outputs': [{'csv': 'herglotz.csv', 'quantities': ['q', 'S']}],
    }))
    cfg = ExperimentConfig.load(path).validate()
    assert cfg.outputs[0].quantities == ['q', 'S']
    assert cfg.initial_state().tolist() == [0., 1., 0.]
    cfg = cfg.override(h=0.05, steps=None)
    assert cfg.h == 0.05 and cfg.steps == 1000 and isinstance(cfg.outputs[0], Output)


def test_rejects_bad_configs(tmp_path):
    import pytest

    bad = [
        dict(steps=0),
        dict(h=-0.1),
        dict(integrator='rk4'),
        dict(integrator='herglotz'),
        dict(integrator='dg-harmonic-exact', mass=2.),
        dict(system='pendulum'),
        dict(system='linearly-damped', potential=[[2, 1, 0.5]]),
        dict(system={'potential': [[2, 0, 0.5]], 'mass': 0.}),
        dict(system={'potential': [[2, 0, 0.5]], 'gamma': -0.1}),
        dict(initial={'q': [0., 1.], 'p': [1., 0.], 'S': 0.}),
        dict(integrator='herglotz', initial={'q0': [0., 1.], 'q1': [1., 0.], 'S0': 0.}),
        dict(potential=[[2, 0.5]], system='linearly-damped'),
        dict(colour='red'),
    ]
    for d in bad:
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict(d).validate()
    path = tmp_path / 'broken.json'
    path.write_text('{"h": ')
    with pytest.raises(ConfigError):
        ExperimentConfig.load(path)
    with pytest.raises(ConfigError):
        Output(quantities=['T'])


def test_inline_system_matches_damped_oscillator(generator):
    from .field import random_points
    from .systems import damped_oscillator, hamiltonian_of

    inline = ExperimentConfig(system={'mass': 2., 'gamma': 0.3, 'potential': [[2, 0, 0.5]]}).validate()
    H = hamiltonian_of(inline.make_system())
    expected = hamiltonian_of(damped_oscillator(0.3, mass=2.))
    x = random_points(10, 3, generator)
    assert torch.allclose(H(x), expected(x), rtol=1e-14)
    assert torch.allclose(H.grad(x), expected.grad(x), rtol=1e-14)


def test_multidimensional_potential():
    cfg = ExperimentConfig(system='linearly-damped', potential=[[[2, 0], 0, 0.5], [[0, 2], 0, 1.5]],
                           initial={'q': [1., 0.], 'p': [0., 1.], 'S': 0.}).validate()
    system = cfg.make_system()
    assert system.n == 2
    assert cfg.initial_state().tolist() == [1., 0., 0., 1., 0.]


def test_sweep_grid_order():
    cfg = ExperimentConfig(sweep={'h': [0.1, 0.01], 'gamma': [0., 0.1, 1.]})
    assert cfg.sweep_grid() == [(0.1, 0.), (0.1, 0.1), (0.1, 1.), (0.01, 0.), (0.01, 0.1), (0.01, 1.)]
    assert ExperimentConfig().sweep_grid() == [(0.1, 0.1)]


if __name__ == '__main__':
    import pytest
    pytest.main(["--no-header", "-v", "-s", __file__])
