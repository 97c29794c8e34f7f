"""Static report bundle: learning-curve and projection SVGs plus the CSVs behind them."""

from __future__ import annotations

import io
import re
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .experiment import RunRecord, aggregate_curves  # noqa: E402
from .probe import ProbeReport  # noqa: E402

RAMP = "viridis"  # dark purple for the lowest reward through to light yellow for the highest


class ReportError(ValueError):
    pass


def luminance(rgb: np.ndarray) -> np.ndarray:
    """Relative luminance of sRGB colours in [0, 1], shape (..., 3)."""
    rgb = np.asarray(rgb, np.float64)[..., :3]
    lin = np.where(rgb <= 0.04045, rgb / 12.92, ((rgb + 0.055) / 1.055) ** 2.4)
    return lin @ np.array([0.2126, 0.7152, 0.0722])


def reward_colors(rewards: np.ndarray) -> np.ndarray:
    """RGBA per point; higher reward never gets a darker colour."""
    r = np.asarray(rewards, np.float64)
    lo, hi = (float(r.min()), float(r.max())) if len(r) else (0.0, 1.0)
    t = np.zeros_like(r) if hi == lo else (r - lo) / (hi - lo)
    return matplotlib.colormaps[RAMP](t)


def _svg_bytes(fig) -> bytes:
    buf = io.BytesIO()
    fig.savefig(buf, format="svg")
    plt.close(fig)
    return buf.getvalue()


def _slug(text: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]+", "_", text)


def learning_curve_files(records: list[RunRecord]) -> dict[str, bytes]:
    curves = aggregate_curves(records)
    if not curves:
        raise ReportError("no completed runs to plot")
    tasks = sorted({cond.rsplit("-", 1)[0] for cond in curves})
    files = {}
    for task in tasks:
        conds = sorted(c for c in curves if c.rsplit("-", 1)[0] == task)
        fig, ax = plt.subplots(figsize=(6, 4))
        n = max(len(curves[c].mean) for c in conds)
        table = np.full((n, 1 + 2 * len(conds)), np.nan)
        table[:, 0] = np.arange(1, n + 1)
        for j, cond in enumerate(conds):
            c = curves[cond]
            x = np.arange(1, len(c.mean) + 1)  # metrics count episodes from 1
            label = f"{cond.rsplit('-', 1)[1]} (n={c.runs})"
            line, = ax.plot(x, c.mean, lw=2, label=label)
            ax.fill_between(x, c.mean - c.std, c.mean + c.std, color=line.get_color(), alpha=0.25, lw=0)
            table[:len(c.mean), 1 + 2 * j] = c.mean
            table[:len(c.mean), 2 + 2 * j] = c.std
        ax.set_xlabel("episode")
        ax.set_ylabel("success rate (windowed)")
        ax.set_ylim(-0.02, 1.02)
        ax.set_title(task)
        ax.legend(loc="upper left")
        fig.tight_layout()
        files[f"learning_{task}.svg"] = _svg_bytes(fig)
        header = "episode," + ",".join(f"{c}_mean,{c}_std" for c in conds)
        files[f"learning_{task}.csv"] = _csv_bytes(header, table, int_cols=1)
    return files


def _csv_bytes(header: str, table: np.ndarray, int_cols: int = 0) -> bytes:
    lines = [header]
    for row in table:
        cells = [str(int(v)) for v in row[:int_cols]]
        cells += ["" if np.isnan(v) else repr(float(v)) for v in row[int_cols:]]
        lines.append(",".join(cells))
    return ("\n".join(lines) + "\n").encode()


def report_stem(report: ProbeReport, index: int) -> str:
    m = report.meta
    parts = [str(m.get("condition", "probe"))]
    if "seed" in m:
        parts.append(f"s{m['seed']}")
    if "init" in m:
        parts.append(str(m["init"]))
    if "snapshot_episode" in m:
        parts.append(f"ep{m['snapshot_episode']}")
    if len(parts) == 1:
        parts.append(str(index))
    return _slug("_".join(parts))


def projection_svg(report: ProbeReport, title: str = "") -> bytes:
    Y, rewards = report.projected, report.activations.rewards
    colors = reward_colors(rewards)
    order = np.argsort(rewards, kind="stable")  # light points drawn last
    fig, axes = plt.subplots(1, 3, figsize=(11, 3.6))
    for ax, (i, j) in zip(axes, ((0, 1), (0, 2), (1, 2))):
        ax.scatter(Y[order, i], Y[order, j], c=colors[order], s=14, edgecolors="none")
        ax.set_xlabel(f"PC{i + 1}")
        ax.set_ylabel(f"PC{j + 1}")
    lo, hi = (float(rewards.min()), float(rewards.max())) if len(rewards) else (0.0, 1.0)
    sm = plt.cm.ScalarMappable(cmap=RAMP, norm=matplotlib.colors.Normalize(lo, hi if hi > lo else lo + 1))
    fig.colorbar(sm, ax=axes, label="reward", shrink=0.9)
    flag = " (collapsed)" if report.collapsed else ""
    fig.suptitle(f"{title}  organization {report.score:.3f}{flag}")
    return _svg_bytes(fig)


def projection_files(reports: list[ProbeReport]) -> dict[str, bytes]:
    files = {}
    rows = ["name,condition,snapshot_episode,init,organization_score,collapsed,n_points,flags"]
    for idx, rep in enumerate(reports):
        stem = report_stem(rep, idx)
        files[f"projection_{stem}.svg"] = projection_svg(rep, stem)
        table = np.column_stack([rep.projected, rep.activations.rewards])
        files[f"projection_{stem}.csv"] = _csv_bytes("pc1,pc2,pc3,reward", table)
        m = rep.meta
        rows.append(",".join([stem, str(m.get("condition", "")), str(m.get("snapshot_episode", "")),
                              str(m.get("init", "")), repr(float(rep.score)), str(int(rep.collapsed)),
                              str(len(rep.projected)), ";".join(sorted(rep.activations.flags))]))
    if reports:
        files["probe_scores.csv"] = ("\n".join(rows) + "\n").encode()
    return files


def render_report(records: list[RunRecord], reports: list[ProbeReport] | None = None,
                  out_dir="out/reports") -> list[Path]:
    """Write the bundle; nothing is written unless every file renders."""
    if not records:
        raise ReportError("no run records given")
    files = learning_curve_files(records)
    files.update(projection_files(list(reports or [])))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for name, blob in sorted(files.items()):
        path = out / name
        path.write_bytes(blob)
        written.append(path)
    return written
