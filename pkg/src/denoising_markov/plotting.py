"""SVG figures of sample snapshots.

Uses matplotlib's Agg backend with a fixed SVG hash salt and no date
metadata, so identical inputs give byte-identical files.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

FIGSIZE = (4.0, 4.0)
POINT_SIZE = 2.0
POINT_COLOR = "#1f4e79"
BAR_COLOR = "#7a1f3d"
HIST_BINS = 60

STYLE = {
    "svg.hashsalt": "denoising-markov",
    "svg.fonttype": "none",
    "font.size": 9,
    "axes.linewidth": 0.6,
}


def _finish(fig, ax, title, path):
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def snapshot_svg(path, states, title, kind="continuous", bounds=None, n_states=None):
    """Write one snapshot to ``path``.

    ``kind`` selects the view: ``"torus"`` scatters on the unit square,
    ``"continuous"`` scatters 2-D samples or histograms 1-D ones, and
    ``"discrete"`` shows state frequencies as bars.
    """
    path = Path(path)
    states = np.asarray(states)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=FIGSIZE)
        if kind == "discrete":
            counts = np.bincount(states.astype(int).ravel(), minlength=n_states or 0)
            ax.bar(np.arange(counts.size), counts / max(counts.sum(), 1), color=BAR_COLOR, width=0.8)
            ax.set_xlabel("state index")
            ax.set_ylabel("frequency")
        elif states.ndim == 1 or states.shape[1] == 1:
            ax.hist(states.ravel(), bins=HIST_BINS, range=bounds, density=True, color=POINT_COLOR)
            ax.set_xlabel("x")
            ax.set_ylabel("density")
        else:
            ax.scatter(states[:, 0], states[:, 1], s=POINT_SIZE, c=POINT_COLOR, linewidths=0)
            if kind == "torus":
                ax.set_xlim(0.0, 1.0)
                ax.set_ylim(0.0, 1.0)
            elif bounds is not None:
                ax.set_xlim(*bounds)
                ax.set_ylim(*bounds)
            ax.set_aspect("equal")
            ax.set_xlabel("$x_1$")
            ax.set_ylabel("$x_2$")
        _finish(fig, ax, title, path)
    return path
