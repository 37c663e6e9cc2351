"""
Reporting - 结果导出
Trajectory CSV and the four SVG panels of a simulation run.

Both outputs are deterministic: fixed float format in the CSV, no date
and a fixed hash salt in the SVG.
"""
import logging
from pathlib import Path
from typing import Dict, List

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402

from backend.app.services.simulator import SimResult  # noqa: E402

logger = logging.getLogger(__name__)

CSV_NAME = "trajectories.csv"
PANELS = ("inputs", "spacing", "position", "velocity")
# plotted every this many samples
_PLOT_STRIDE = 10


def to_frame(r: SimResult) -> pd.DataFrame:
    """Columns: t, then y_k, v_k, z_k, u_k per vehicle (no z for the leader)."""
    cols: Dict[str, np.ndarray] = {"t": r.t}
    for k in range(r.n + 1):
        cols[f"y{k}"] = r.y[k]
        cols[f"v{k}"] = r.v[k]
        if k >= 1:
            cols[f"z{k}"] = r.z[k - 1]
        cols[f"u{k}"] = r.u[k]
    return pd.DataFrame(cols)


def write_csv(r: SimResult, out_dir: Path) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / CSV_NAME
    to_frame(r).to_csv(path, index=False, float_format="%.9g", lineterminator="\n")
    logger.info(f"wrote {path}")
    return path


def _panel(ax, t: np.ndarray, rows: np.ndarray, labels: List[str], ylabel: str):
    for row, label in zip(rows, labels):
        ax.plot(t, row, linewidth=0.9, label=label)
    ax.set_xlabel("t (s)")
    ax.set_ylabel(ylabel)
    ax.grid(True, linewidth=0.3)
    ax.legend(loc="upper right", fontsize="small", ncol=2)


def write_svg_panels(r: SimResult, out_dir: Path) -> List[Path]:
    """
    inputs: leader acceleration u0 and the disturbances w_k that are not zero;
    spacing: z_1..z_n; position: y_0..y_n; velocity: v_0..v_n.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    s = slice(None, None, _PLOT_STRIDE)
    t = r.t[s]
    active = [k for k in range(r.n + 1) if np.any(r.w[k])]
    data = {
        "inputs": (np.vstack([r.u[0:1, s]] + [r.w[k:k + 1, s] for k in active]),
                   ["u0"] + [f"w{k}" for k in active], "m/s²"),
        "spacing": (r.z[:, s], [f"z{k}" for k in range(1, r.n + 1)], "spacing error (m)"),
        "position": (r.y[:, s], [f"y{k}" for k in range(r.n + 1)], "position (m)"),
        "velocity": (r.v[:, s], [f"v{k}" for k in range(r.n + 1)], "velocity (m/s)"),
    }
    paths = []
    with plt.rc_context({"svg.hashsalt": "platoon", "svg.fonttype": "none"}):
        for name in PANELS:
            rows, labels, ylabel = data[name]
            fig, ax = plt.subplots(figsize=(8, 3.5))
            _panel(ax, t, rows, labels, ylabel)
            path = out_dir / f"{name}.svg"
            fig.savefig(path, format="svg", metadata={"Date": None}, bbox_inches="tight")
            plt.close(fig)
            paths.append(path)
    logger.info(f"wrote {len(paths)} panels to {out_dir}")
    return paths
