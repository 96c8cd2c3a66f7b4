"""Static SVG figures: 2D reprojection next to a 3D view.

Ground truth is drawn in blue, predictions in yellow and per-point errors as
red segments. Visible 2D annotations are drawn as stars; occluded ones are
not drawn at all. Artists carry SVG ids (``set_gid``) so the output can be
inspected programmatically.
"""

from __future__ import annotations

import io

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.collections import LineCollection  # noqa: E402

from .metrics import FLIP  # noqa: E402

GT_COLOR = "#1f4fd8"
PRED_COLOR = "#f2c400"
ERR_COLOR = "#d62020"


def _align(pred, gt):
    """Centre, rescale and optionally depth-flip ``pred`` onto ``gt`` (the MPJPE convention)."""
    p = pred - pred.mean(axis=0)
    g = gt - gt.mean(axis=0)
    best = None
    for cand in (p, p * FLIP):
        pp = float(np.sum(cand * cand))
        c = cand * (float(np.sum(cand * g)) / pp) if pp > 0 else cand
        err = np.linalg.norm(c - g)
        if best is None or err < best[0]:
            best = (err, c)
    return best[1] + gt.mean(axis=0)


def render(pred3d, pred2d=None, gt3d=None, points2d=None, vis=None, title=None):
    """Build the figure and return it (caller closes it)."""
    pred3d = np.asarray(pred3d, dtype=np.float64)
    fig = plt.figure(figsize=(9, 4.5))
    ax2 = fig.add_subplot(1, 2, 1)
    ax3 = fig.add_subplot(1, 2, 2, projection="3d")
    ax2.set_title("2D reprojection")
    ax3.set_title("3D")

    if pred2d is not None:
        pred2d = np.asarray(pred2d, dtype=np.float64)
        ax2.scatter(pred2d[:, 0], pred2d[:, 1], c=PRED_COLOR, s=18, edgecolors="k",
                    linewidths=0.3, zorder=3).set_gid("pred-2d")
    if points2d is not None:
        points2d = np.asarray(points2d, dtype=np.float64)
        shown = np.ones(len(points2d), bool) if vis is None else np.asarray(vis) > 0
        stars = ax2.scatter(points2d[shown, 0], points2d[shown, 1], marker="*", c=GT_COLOR,
                            s=60, zorder=2)
        stars.set_gid("visible-stars")
        if pred2d is not None and np.any(shown):
            segs = np.stack([points2d[shown], pred2d[shown]], axis=1)
            lc = LineCollection(segs, colors=ERR_COLOR, linewidths=1.0, zorder=1)
            lc.set_gid("error-2d")
            ax2.add_collection(lc)
    ax2.set_aspect("equal", adjustable="datalim")
    ax2.invert_yaxis()

    shown3d = pred3d
    if gt3d is not None:
        gt3d = np.asarray(gt3d, dtype=np.float64)
        shown3d = _align(pred3d, gt3d)
        ax3.scatter(gt3d[:, 0], gt3d[:, 1], gt3d[:, 2], c=GT_COLOR, s=16).set_gid("gt-3d")
        for i, (a, b) in enumerate(zip(gt3d, shown3d)):
            line, = ax3.plot(*np.stack([a, b]).T, color=ERR_COLOR, linewidth=0.8)
            line.set_gid(f"error-3d-{i}")
    ax3.scatter(shown3d[:, 0], shown3d[:, 1], shown3d[:, 2], c=PRED_COLOR, s=16,
                edgecolors="k", linewidths=0.3).set_gid("pred-3d")
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    return fig


def to_svg(fig) -> str:
    buf = io.StringIO()
    fig.savefig(buf, format="svg")
    return buf.getvalue()


def save_svg(path, **kwargs) -> None:
    fig = render(**kwargs)
    try:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(to_svg(fig))
    finally:
        plt.close(fig)
