"""
Static SVG line plots of trajectories. Each series is drawn on its own axes against t and tagged
with the group id `series-<name>`; files are byte-identical for identical data.
"""
import matplotlib
from matplotlib.figure import Figure

SVG_STYLE = {
    'svg.hashsalt': 'thermoflow',
    'svg.fonttype': 'none',
    'path.simplify': False,
}


def trajectory_series(trajectory, quantities):
    "name -> list of values for q, p (one series per coordinate when n > 1), S, H and dS"
    n = trajectory.n
    rows = trajectory.rows()
    header = trajectory.header()
    columns = {name: [row[k] for row in rows] for k, name in enumerate(header)}
    series = {}
    for quantity in quantities:
        match quantity:
            case 'q' | 'p' if n > 1:
                series.update({f'{quantity}_{i+1}': columns[f'{quantity}_{i+1}'] for i in range(n)})
            case _:
                series[quantity] = columns[quantity]
    return columns['t'], series


def plot_series(path, t, series, title='', xlabel='t'):
    with matplotlib.rc_context(SVG_STYLE):
        fig = Figure(figsize=(8, 2 + 1.6 * len(series)), layout='constrained')
        axes = fig.subplots(len(series), 1, sharex=True, squeeze=False)[:, 0]
        for ax, (name, values) in zip(axes, series.items()):
            line, = ax.plot(t, values, linewidth=1, label=name)
            line.set_gid(f'series-{name}')
            ax.set_ylabel(name)
            ax.grid(True, linewidth=0.3)
        axes[0].set_title(title)
        axes[-1].set_xlabel(xlabel)
        fig.savefig(path, format='svg', metadata={'Date': None})


def plot_trajectory(path, trajectory, quantities, title=''):
    t, series = trajectory_series(trajectory, quantities)
    plot_series(path, t, series, title=title)


def test_one_line_per_quantity(tmp_path):
    import xml.etree.ElementTree as ET
    from .config import ExperimentConfig, make_stepper
    from .integrators import StepperConfig, integrate

    cfg = ExperimentConfig(integrator='dg-harmonic-exact')
    trajectory = integrate(make_stepper(cfg, StepperConfig(h=cfg.h)), cfg.initial_state(), 100)
    first, second = tmp_path / 'a.svg', tmp_path / 'b.svg'
    plot_trajectory(first, trajectory, ['q', 'S', 'H'], title='damped oscillator')
    plot_trajectory(second, trajectory, ['q', 'S', 'H'], title='damped oscillator')
    assert first.read_bytes() == second.read_bytes()

    ids = [element.get('id') for element in ET.parse(first).iter() if (element.get('id') or '').startswith('series-')]
    assert ids == ['series-q', 'series-S', 'series-H']


def test_series_of_two_dimensional_trajectory():
    import torch
    from .integrators import Trajectory

    trajectory = Trajectory(n=2)
    trajectory.append(0., torch.tensor([1., 2., 3., 4., 5.], dtype=torch.float64), 1.)
    trajectory.append(0.5, torch.tensor([1., 2., 3., 4., 6.], dtype=torch.float64), 1.)
    t, series = trajectory_series(trajectory, ['q', 'dS'])
    assert t == [0., 0.5]
    assert series == {'q_1': [1., 1.], 'q_2': [2., 2.], 'dS': [0., 1.]}


if __name__ == '__main__':
    import pytest
    pytest.main(["--no-header", "-v", "-s", __file__])
