"""
thermoflow runs structure-preserving integrators on simple thermodynamical systems.

    thermoflow simulate --config oscillator.json --out-csv oscillator.csv --out-svg oscillator.svg
    thermoflow compare --config oscillator.json --integrator dg-midpoint --out-csv errors.csv
    thermoflow check all --seed 42
    thermoflow sweep --config oscillator.json --h-grid 0.1 0.01 --gamma-grid 0 0.1 1

Exit status: 0 on success, 1 when an invariant check fails, 2 on usage or config errors,
3 when an integration fails numerically.
"""
import argparse
import csv
import sys
from contextlib import nullcontext
from concurrent.futures import ProcessPoolExecutor
from itertools import repeat
from pathlib import Path

import numpy as np
import torch
from rich.console import Console

from .config import HERGLOTZ, ExperimentConfig, Output, make_hamiltonian, make_stepper
from .errors import ConfigError, IntegrationFailure, NewtonDivergence, StepSizeUnderflow, ThermoError
from .integrators import StepperConfig, convergence_order, integrate

console = Console(stderr=True)


def log(*args, **kwargs):
    console.log(*args, **kwargs)


def fmt(value):
    return f'{value:.17g}' if isinstance(value, float) else str(value)


def write_csv(path, header, rows, failed_step=None):
    "Writes to `path`, or standard output when it is None."
    with (open(path, 'w', newline='') if path else nullcontext(sys.stdout)) as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(header)
        writer.writerows([fmt(value) for value in row] for row in rows)
        if failed_step is not None:
            f.write(f'# FAILED at step {failed_step}\n')


def run_experiment(cfg, step_config):
    "The trajectory of cfg.steps steps; `reference` samples the adaptive solution at the same times."
    if cfg.integrator == 'reference':
        from .reference import reference_integrate
        return reference_integrate(make_hamiltonian(cfg), cfg.initial_state(), cfg.steps * cfg.h, cfg.rtol, cfg.atol,
                                   times=[k * cfg.h for k in range(cfg.steps + 1)])
    return integrate(make_stepper(cfg, step_config), cfg.initial_state(), cfg.steps)


def run_or_partial(cfg, step_config):
    "(trajectory, failed step or None)"
    try:
        return run_experiment(cfg, step_config), None
    except IntegrationFailure as failure:
        log(f'[red]{failure}[/red]')
        return failure.trajectory, failure.step


def contact_initial_state(cfg, step_config):
    "(q, p, S) at t = 0, reconstructed through the discrete momentum for Herglotz initial data"
    if cfg.integrator in HERGLOTZ:
        stepper = make_stepper(cfg, step_config)
        return stepper.observe(stepper.start(cfg.initial_state()))
    return cfg.initial_state()


def outputs_of(cfg, args):
    if args.out_csv or args.out_svg:
        quantities = cfg.outputs[0].quantities if cfg.outputs else Output().quantities
        return [Output(csv=args.out_csv, svg=args.out_svg, quantities=quantities)]
    return cfg.outputs or [Output()]


def simulate(cfg, step_config, args):
    from .plot import plot_trajectory

    trajectory, failed_step = run_or_partial(cfg, step_config)
    for output in outputs_of(cfg, args):
        if output.csv or not output.svg:
            write_csv(output.csv, trajectory.header(), trajectory.rows(), failed_step)
        if output.svg:
            plot_trajectory(output.svg, trajectory, output.quantities, title=f'{cfg.integrator}, h = {cfg.h}')
    if failed_step is not None:
        return 3
    log(trajectory.summary())
    return 0


def compare(cfg, step_config, args):
    from .contact import split
    from .plot import plot_series
    from .reference import reference_solve

    trajectory, failed_step = run_or_partial(cfg, step_config)
    H = make_hamiltonian(cfg)
    dense = reference_solve(H, trajectory.states[0], cfg.steps * cfg.h, cfg.rtol, cfg.atol)
    exact = dense(np.asarray(trajectory.times, dtype=np.float64))
    states = trajectory.stacked()
    (q, p, S), (q_ref, p_ref, S_ref) = split(states), split(exact)
    H_ref = H(exact)
    errors = {
        'err_q': (q - q_ref).abs().amax(dim=-1).tolist(),
        'err_p': (p - p_ref).abs().amax(dim=-1).tolist(),
        'err_S': (S - S_ref).abs().tolist(),
        'err_H': (torch.tensor(trajectory.energy, dtype=H_ref.dtype) - H_ref).abs().tolist(),
    }
    rows = [[k, t, *(errors[name][k] for name in errors)] for k, t in enumerate(trajectory.times)]
    for output in outputs_of(cfg, args):
        if output.csv or not output.svg:
            write_csv(output.csv, ['step', 't', *errors], rows, failed_step)
        if output.svg:
            plot_series(output.svg, trajectory.times, errors, title=f'{cfg.integrator} against the reference solution')
    if args.energy_svg:
        steps = list(range(len(trajectory)))
        plot_series(args.energy_svg, steps, {'H': trajectory.energy, 'H_reference': H_ref.tolist()},
                    title=f'H along {cfg.integrator}', xlabel='step')
    if failed_step is not None:
        return 3
    log({name: max(values) for name, values in errors.items()})
    return 0


def order_estimate(cfg, step_config):
    "Convergence order at t_end = steps * h over h, h/2 and h/4 against the reference solution."
    from .contact import join, split
    from .reference import reference_solve

    H = make_hamiltonian(cfg)
    t_end = cfg.steps * cfg.h
    x0 = contact_initial_state(cfg, step_config)
    dense = reference_solve(H, x0, t_end, cfg.rtol, cfg.atol)

    def family(h):
        return make_stepper(cfg, StepperConfig(h=h, newton_tol=step_config.newton_tol,
                                               max_newton_iters=step_config.max_newton_iters,
                                               fd_jacobian_step=step_config.fd_jacobian_step))

    if cfg.integrator in HERGLOTZ:
        q0, _, S0 = split(x0)
        initial = lambda h: join(q0, split(dense(h))[0], S0)
    else:
        initial = x0
    return convergence_order(family, initial, [cfg.h, cfg.h / 2, cfg.h / 4], t_end, dense)


def sweep_cell(cfg, step_config, h, gamma, order):
    cell = cfg.override(h=h, gamma=gamma)
    step_config = StepperConfig(h=h, newton_tol=step_config.newton_tol, max_newton_iters=step_config.max_newton_iters,
                                fd_jacobian_step=step_config.fd_jacobian_step)
    try:
        cell.validate()
        summary = run_experiment(cell, step_config).summary()
        estimate = order_estimate(cell, step_config) if order and cell.integrator != 'reference' else ''
    except ThermoError as e:
        return [h, gamma, '', '', '', f'failed:{type(e).__name__}']
    return [h, gamma, summary['max_abs_H_drift'], summary['min_dS'], estimate, 'ok']


def sweep(cfg, step_config, args):
    grid = cfg.sweep_grid()
    if not grid:
        raise ConfigError('the sweep grid is empty')
    if len(grid) > 10_000:
        raise ConfigError(f'the sweep grid has {len(grid)} cells, at most 10000 are allowed')
    hs, gammas = zip(*grid)
    args_of = (repeat(cfg), repeat(step_config), hs, gammas, repeat(args.order))
    if args.workers > 1:
        with ProcessPoolExecutor(args.workers) as executor:
            rows = list(executor.map(sweep_cell, *args_of))
    else:
        rows = list(map(sweep_cell, *args_of))
    header = ['h', 'gamma', 'max_abs_H_drift', 'min_dS', 'order_estimate', 'status']
    for output in outputs_of(cfg, args):
        if output.csv or not output.svg:
            write_csv(output.csv, header, rows)
    failed = sum(row[-1] != 'ok' for row in rows)
    log(f'{len(rows) - failed} of {len(rows)} cells ok')
    return 3 if failed == len(rows) else 0


def check(args):
    from .check import run

    results = run(args.suite, args.seed)
    for result in results:
        print(result.line())
    failed = [result for result in results if not result.passed]
    if failed:
        log(f'[red]{len(failed)} of {len(results)} checks failed[/red]')
        return 1
    return 0


class Formatter(argparse.ArgumentDefaultsHelpFormatter,
                argparse.MetavarTypeHelpFormatter,
                argparse.RawDescriptionHelpFormatter):
    pass


def make_parser():
    from .check import SUITES
    from .config import INTEGRATORS

    parser = argparse.ArgumentParser(prog='thermoflow', description=__doc__, formatter_class=Formatter)
    commands = parser.add_subparsers(dest='command', required=True)

    def experiment(name, help):
        sub = commands.add_parser(name, help=help, formatter_class=Formatter)
        sub.add_argument('--config', type=Path, help="Experiment JSON file; flags below override its fields")
        sub.add_argument('--steps', type=int, default=None, help="Number of steps")
        sub.add_argument('--gamma', type=float, default=None, help="Friction coefficient")
        sub.add_argument('--seed', type=int, default=None, help="Random seed")
        sub.add_argument('--integrator', type=str, default=None, choices=INTEGRATORS, help="Integrator to run")
        sub.add_argument('--out-csv', type=str, default=None, help="CSV path (standard output when no output is configured)")
        sub.add_argument('--out-svg', type=str, default=None, help="SVG plot path")
        StepperConfig.add_arguments(sub)
        return sub

    experiment('simulate', 'integrate one trajectory and write its states')
    sub = experiment('compare', 'measure an integrator against the reference solution')
    sub.add_argument('--energy-svg', type=str, default=None, help="Also plot H of both solutions against the step")
    sub = experiment('sweep', 'summarize runs over a grid of step sizes and friction coefficients')
    sub.add_argument('--h-grid', type=float, nargs='*', default=None, help="Step sizes (overrides the config sweep)")
    sub.add_argument('--gamma-grid', type=float, nargs='*', default=None, help="Friction coefficients (overrides the config sweep)")
    sub.add_argument('--order', action='store_true', help="Estimate the convergence order of every cell")
    sub.add_argument('--workers', type=int, default=1, help="Cells to run in parallel processes")

    sub = commands.add_parser('check', help='run the invariant suites', formatter_class=Formatter)
    sub.add_argument('suite', type=str, nargs='?', default='all', choices=(*SUITES, 'all'), help="Suite to run")
    sub.add_argument('--seed', type=int, default=42, help="Random seed")
    return parser


def load_config(args):
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    cfg = cfg.override(h=args.h, steps=args.steps, gamma=args.gamma, seed=args.seed, integrator=args.integrator)
    if args.command == 'sweep':
        grid = dict(cfg.sweep)
        if args.h_grid is not None:
            grid['h'] = args.h_grid
        if args.gamma_grid is not None:
            grid['gamma'] = args.gamma_grid
        cfg = cfg.override(sweep=grid)
    return cfg.validate(min_steps=0 if args.command == 'compare' else 1)


def main(argv=None):
    args = make_parser().parse_args(argv)

    if args.command == 'check':
        torch.manual_seed(args.seed)
        return check(args)

    try:
        cfg = load_config(args)
        step_config = StepperConfig.from_args(args, cfg.h)
        torch.manual_seed(cfg.seed)
        match args.command:
            case 'simulate':
                return simulate(cfg, step_config, args)
            case 'compare':
                return compare(cfg, step_config, args)
            case 'sweep':
                return sweep(cfg, step_config, args)
    except ConfigError as e:
        log(f'[red]config error:[/red] {e}')
        return 2
    except (NewtonDivergence, StepSizeUnderflow) as e:
        log(f'[red]numerical failure:[/red] {e}')
        return 3


def write_config(path, **kwargs):
    import json
    path.write_text(json.dumps(kwargs))
    return str(path)


KICKED_OSCILLATOR = dict(system='damped-oscillator', gamma=0.1, integrator='dg-harmonic-exact', h=0.1, steps=1000,
            initial={'q': 0, 'p': 10, 'S': 0})
DISPLACED_OSCILLATOR = dict(system='damped-oscillator', gamma=0.1, integrator='herglotz-harmonic-exact', h=0.1, steps=1000,
            initial={'q0': 0, 'q1': 1, 'S0': 0})


def read_rows(path):
    lines = Path(path).read_text().splitlines()
    return lines[0].split(','), [line.split(',') for line in lines[1:] if not line.startswith('#')], lines


def test_simulate_energy_preserving(tmp_path):
    config = write_config(tmp_path / 'oscillator.json', **KICKED_OSCILLATOR)
    out = tmp_path / 'oscillator.csv'
    assert main(['simulate', '--config', config, '--out-csv', str(out), '--out-svg', str(tmp_path / 'oscillator.svg')]) == 0
    header, rows, _ = read_rows(out)
    assert header == ['step', 't', 'q', 'p', 'S', 'H', 'dS']
    assert len(rows) == 1001
    q, p, S = (float(value) for value in rows[1][2:5])
    assert abs(q - 4 / 4.03) < 1e-15 and abs(p - 39.7 / 4.03) < 1e-14 and abs(S - 160 / 16.2409) < 1e-14
    assert (tmp_path / 'oscillator.svg').exists()

    again = tmp_path / 'again.csv'
    assert main(['simulate', '--config', config, '--out-csv', str(again)]) == 0
    assert out.read_bytes() == again.read_bytes()


def test_simulate_herglotz(tmp_path):
    config = write_config(tmp_path / 'herglotz.json', **DISPLACED_OSCILLATOR)
    out = tmp_path / 'herglotz.csv'
    assert main(['simulate', '--config', config, '--out-csv', str(out), '--steps', '5']) == 0
    _, rows, _ = read_rows(out)
    assert abs(float(rows[2][2]) - 7.9401 / 4.01) < 1e-12
    assert abs(float(rows[1][4]) - 9.975) < 1e-12


def test_config_errors_exit_2(tmp_path):
    config = write_config(tmp_path / 'oscillator.json', **KICKED_OSCILLATOR)
    assert main(['simulate', '--config', config, '--steps', '0']) == 2
    assert main(['simulate', '--config', config, '--integrator', 'herglotz']) == 2
    assert main(['simulate', '--config', str(tmp_path / 'missing.json')]) == 2
    wrong_size = write_config(tmp_path / 'wide.json', **{**KICKED_OSCILLATOR, 'integrator': 'dg-midpoint',
                                                        'initial': {'q': [0, 1], 'p': [1, 0], 'S': 0}})
    assert main(['simulate', '--config', wrong_size]) == 2


def test_integration_failure_keeps_partial_csv(tmp_path):
    config = write_config(tmp_path / 'blowup.json', system='linearly-damped', potential=[[4, 0, 1.]], gamma=0.1,
                          integrator='euler', h=1., steps=100, initial={'q': 10, 'p': 0, 'S': 0})
    out = tmp_path / 'blowup.csv'
    assert main(['simulate', '--config', config, '--out-csv', str(out)]) == 3
    _, rows, lines = read_rows(out)
    assert lines[-1].startswith('# FAILED at step ')
    failed_step = int(lines[-1].rsplit(' ', 1)[1])
    assert len(rows) == failed_step


def test_compare(tmp_path):
    config = write_config(tmp_path / 'oscillator.json', **{**KICKED_OSCILLATOR, 'integrator': 'dg-midpoint', 'steps': 100})
    out = tmp_path / 'errors.csv'
    assert main(['compare', '--config', config, '--out-csv', str(out), '--energy-svg', str(tmp_path / 'H.svg')]) == 0
    header, rows, _ = read_rows(out)
    assert header == ['step', 't', 'err_q', 'err_p', 'err_S', 'err_H']
    assert max(float(row[5]) for row in rows) <= 1e-7
    assert all(np.isfinite([float(value) for value in row]).all() for row in rows)
    assert (tmp_path / 'H.svg').exists()

    zero = tmp_path / 'zero.csv'
    assert main(['compare', '--config', config, '--out-csv', str(zero), '--steps', '0']) == 0
    _, rows, _ = read_rows(zero)
    assert rows == [['0', '0', '0', '0', '0', '0']]


def test_compare_error_shrinks_with_h(tmp_path):
    config = write_config(tmp_path / 'oscillator.json', **{**KICKED_OSCILLATOR, 'integrator': 'dg-midpoint'})
    coarse, fine = tmp_path / 'coarse.csv', tmp_path / 'fine.csv'
    assert main(['compare', '--config', config, '--out-csv', str(coarse), '--h', '0.1', '--steps', '100']) == 0
    assert main(['compare', '--config', config, '--out-csv', str(fine), '--h', '0.05', '--steps', '200']) == 0
    assert 2 * float(read_rows(fine)[1][-1][2]) <= float(read_rows(coarse)[1][-1][2])


def test_check(capsys):
    assert main(['check', 'geometry', '--seed', '42']) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines and all(line.startswith('geometry/') and line.endswith(' PASS') for line in lines)


def test_sweep(tmp_path):
    config = write_config(tmp_path / 'sweep.json', **{**KICKED_OSCILLATOR, 'integrator': 'dg-midpoint', 'steps': 50})
    out = tmp_path / 'sweep.csv'
    assert main(['sweep', '--config', config, '--out-csv', str(out),
                 '--h-grid', '0.1', '0.01', '--gamma-grid', '0', '0.1', '1']) == 0
    header, rows, _ = read_rows(out)
    assert header == ['h', 'gamma', 'max_abs_H_drift', 'min_dS', 'order_estimate', 'status']
    assert [(float(row[0]), float(row[1])) for row in rows] == [(0.1, 0.), (0.1, 0.1), (0.1, 1.), (0.01, 0.), (0.01, 0.1), (0.01, 1.)]
    assert all(row[-1] == 'ok' and float(row[3]) >= -1e-10 for row in rows)

    at_rest = tmp_path / 'rest.csv'
    rest = write_config(tmp_path / 'rest.json', **{**KICKED_OSCILLATOR, 'integrator': 'dg-midpoint', 'steps': 20,
                                                  'initial': {'q': 0, 'p': 0, 'S': 1}})
    assert main(['sweep', '--config', rest, '--out-csv', str(at_rest), '--gamma-grid', '0']) == 0
    _, rows, _ = read_rows(at_rest)
    assert float(rows[0][2]) == 0. and float(rows[0][3]) == 0.

    assert main(['sweep', '--config', config, '--h-grid']) == 2


def test_sweep_order_estimate(tmp_path):
    config = write_config(tmp_path / 'sweep.json', **{**KICKED_OSCILLATOR, 'steps': 100})
    out = tmp_path / 'order.csv'
    assert main(['sweep', '--config', config, '--out-csv', str(out), '--order']) == 0
    _, rows, _ = read_rows(out)
    assert 1.7 <= float(rows[0][4]) <= 2.3


if __name__ == '__main__':
    sys.exit(main())
