import os

import matplotlib

matplotlib.use('Agg')

from matplotlib import pyplot as plt


"""
    plotter.py

    Renders FROC curves (sensitivity against average false positives per
    image) to a self-contained SVG. Curves are drawn as step functions;
    the +inf threshold point sits at the origin of the FP axis and is
    dropped on a log axis.
"""

COLORS = {'image': 'royalblue', 'exam': 'purple'}

# Fixed salt keeps the SVG element ids, and so the file bytes, reproducible.
plt.rcParams['svg.hashsalt'] = 'lesiondet'


def plot_froc(curves: list, path: str, log_x: bool = False, title: str = 'FROC') -> None:
    """ Plots the curves and writes the figure as SVG.

    :param curves: FrocCurves to draw
    :param path: destination .svg file
    :param log_x: use a logarithmic FP/image axis
    :param title: figure title
    """
    fig, ax = plt.subplots(figsize=(6, 4.5))

    for curve in curves:
        points = sorted(curve.points, key=lambda p: (p.fp_per_image, p.sensitivity))
        if log_x:
            points = [p for p in points if p.fp_per_image > 0]

        if not points:
            continue

        ax.step([p.fp_per_image for p in points], [p.sensitivity for p in points], where='post',
                color=COLORS.get(curve.kind, 'black'), label=f'{curve.kind}-based')

    if log_x:
        ax.set_xscale('log')

    ax.set_ylim(0.0, 1.02)
    ax.set_xlabel('False positives per image')
    ax.set_ylabel('Sensitivity')
    ax.set_title(title)
    ax.grid(True, which='both', alpha=0.3)

    if ax.get_legend_handles_labels()[0]:
        ax.legend(loc='lower right')

    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    fig.savefig(path, format='svg', metadata={'Date': None})
    plt.close(fig)
