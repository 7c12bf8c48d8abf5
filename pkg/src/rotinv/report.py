"""Figures as data plus static SVG.

Every figure is rendered from the same numbers that go to its sibling CSV, and
CSV floats are written with ``repr`` so that reading the CSV back and
rendering again reproduces the SVG byte for byte.
"""

from __future__ import annotations

import colorsys
import csv
import math
from dataclasses import dataclass
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from .evalharness import RocCurve
from .groupact import AngleSampler, rotate_image
from .ingest import RawDataset
from .models import VAE

TAB10 = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
         "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"]


class ReportError(ValueError):
    pass


@dataclass
class ScatterSheet:
    z: np.ndarray           # (n, 2)
    labels: np.ndarray      # (n,)
    theta: np.ndarray       # (n,) angle applied before embedding, [0, 2 pi)
    model: str = ""
    domain: str = ""

    def __len__(self) -> int:
        return len(self.theta)


def latent_scatter(model: VAE, ds: RawDataset, sampler: AngleSampler, n: int, seed: int = 0,
                   domain: str = "") -> ScatterSheet:
    """Rotate ``n`` seeded samples by sampled angles and record their 2-D codes."""
    if model.cfg.latent_dim != 2:
        raise ReportError(f"latent scatter needs latent_dim 2, model has {model.cfg.latent_dim}")
    if n > len(ds):
        raise ReportError(f"asked for {n} points from a dataset of {len(ds)}")
    idx = np.random.Generator(np.random.PCG64(seed)).permutation(len(ds))[:n]
    theta = sampler.angles(n)
    if n == 0:
        return ScatterSheet(np.zeros((0, 2)), ds.labels[:0], theta, model.kind, domain)
    poses = np.stack([np.cos(theta), np.sin(theta)], axis=1).astype(ds.images.dtype)
    z = model.embed(rotate_image(ds.images[idx], poses))
    return ScatterSheet(z.astype(np.float64), ds.labels[idx], theta, model.kind, domain)


# -- diagnostics -------------------------------------------------------------------------

def circular_linear_correlation(theta, x) -> float:
    """Mardia's circular-linear correlation between angles and one linear variable, in [0, 1]."""
    theta = np.asarray(theta, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if len(theta) < 3 or np.std(x) == 0:
        return 0.0
    c, s = np.cos(theta), np.sin(theta)
    rxc = np.corrcoef(x, c)[0, 1]
    rxs = np.corrcoef(x, s)[0, 1]
    rcs = np.corrcoef(c, s)[0, 1]
    r2 = (rxc ** 2 + rxs ** 2 - 2 * rxc * rxs * rcs) / (1 - rcs ** 2)
    return float(math.sqrt(min(max(r2, 0.0), 1.0)))


def angle_correlation(sheet: ScatterSheet) -> float:
    """Largest circular-linear correlation between theta and either code coordinate."""
    if len(sheet) < 3:
        return 0.0
    return max(circular_linear_correlation(sheet.theta, sheet.z[:, k]) for k in range(sheet.z.shape[1]))


def class_silhouette(sheet: ScatterSheet) -> float:
    from sklearn.metrics import silhouette_score

    labels = np.asarray([str(v) for v in sheet.labels.tolist()])
    if len(set(labels.tolist())) < 2 or len(labels) <= len(set(labels.tolist())):
        return 0.0
    return float(silhouette_score(sheet.z, labels))


def sheet_stats(sheet: ScatterSheet) -> dict:
    return {"model": sheet.model, "domain": sheet.domain, "n": len(sheet),
            "angle_correlation": angle_correlation(sheet), "silhouette": class_silhouette(sheet)}


# -- CSV ------------------------------------------------------------------------------------

def write_scatter_csv(sheet: ScatterSheet, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["z1", "z2", "label", "theta"])
        for (a, b), lab, th in zip(sheet.z.tolist(), sheet.labels.tolist(), sheet.theta.tolist()):
            w.writerow([repr(a), repr(b), lab, repr(th)])


def read_scatter_csv(path, model: str = "", domain: str = "") -> ScatterSheet:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    z = np.array([[float(r["z1"]), float(r["z2"])] for r in rows]).reshape(-1, 2)
    labels = [r["label"] for r in rows]
    if labels and all(lab.lstrip("-").isdigit() for lab in labels):
        labels = [int(lab) for lab in labels]
    return ScatterSheet(z, np.array(labels), np.array([float(r["theta"]) for r in rows]), model, domain)


def write_sweep_csv(series, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["n_train_classes", "auc", "model"])
        for n, auc, model in series:
            w.writerow([int(n), repr(float(auc)), model])


def read_sweep_csv(path) -> list[tuple[int, float, str]]:
    with open(path, newline="") as f:
        return [(int(r["n_train_classes"]), float(r["auc"]), r["model"]) for r in csv.DictReader(f)]


# -- SVG ------------------------------------------------------------------------------------

W, H = 480, 400
ML, MR, MT, MB = 60, 130, 30, 50     # plot margins; the right margin holds the legend


def _f(v: float) -> str:
    return f"{v:.2f}"


class _Axes:
    def __init__(self, xlim, ylim):
        self.x0, self.x1 = xlim
        self.y0, self.y1 = ylim
        if self.x1 == self.x0:
            self.x0, self.x1 = self.x0 - 1, self.x1 + 1
        if self.y1 == self.y0:
            self.y0, self.y1 = self.y0 - 1, self.y1 + 1

    def px(self, x):
        return ML + (x - self.x0) / (self.x1 - self.x0) * (W - ML - MR)

    def py(self, y):
        return H - MB - (y - self.y0) / (self.y1 - self.y0) * (H - MT - MB)


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    return [lo + (hi - lo) * k / (n - 1) for k in range(n)]


def _frame(ax: _Axes, title: str, xlabel: str, ylabel: str) -> list[str]:
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" '
           f'font-family="sans-serif" font-size="11">',
           f'<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>',
           f'<text x="{_f((ML + W - MR) / 2)}" y="18" text-anchor="middle" font-size="13">{escape(title)}</text>',
           f'<rect x="{ML}" y="{MT}" width="{W - ML - MR}" height="{H - MT - MB}" fill="none" stroke="black"/>']
    for t in _ticks(ax.x0, ax.x1):
        x = _f(ax.px(t))
        out.append(f'<line x1="{x}" y1="{H - MB}" x2="{x}" y2="{H - MB + 4}" stroke="black"/>')
        out.append(f'<text x="{x}" y="{H - MB + 15}" text-anchor="middle">{t:.3g}</text>')
    for t in _ticks(ax.y0, ax.y1):
        y = _f(ax.py(t))
        out.append(f'<line x1="{ML - 4}" y1="{y}" x2="{ML}" y2="{y}" stroke="black"/>')
        out.append(f'<text x="{ML - 6}" y="{y}" text-anchor="end" dominant-baseline="middle">{t:.3g}</text>')
    out.append(f'<text x="{_f((ML + W - MR) / 2)}" y="{H - 12}" text-anchor="middle">{escape(xlabel)}</text>')
    out.append(f'<text x="14" y="{_f((MT + H - MB) / 2)}" text-anchor="middle" '
               f'transform="rotate(-90 14 {_f((MT + H - MB) / 2)})">{escape(ylabel)}</text>')
    return out


def _legend(entries: list[tuple[str, str]]) -> list[str]:
    out = []
    for k, (label, color) in enumerate(entries):
        y = MT + 10 + 16 * k
        out.append(f'<rect x="{W - MR + 10}" y="{y - 5}" width="10" height="10" fill="{color}"/>')
        out.append(f'<text x="{W - MR + 25}" y="{y}" dominant-baseline="middle">{escape(label)}</text>')
    return out


def _trapezoid(fpr, tpr) -> float:
    fpr, tpr = np.asarray(fpr), np.asarray(tpr)
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1])) / 2)


def render_roc(curves: list[tuple[str, RocCurve]], title: str = "ROC") -> str:
    if not curves:
        raise ReportError("no curves to render")
    ax = _Axes((0.0, 1.0), (0.0, 1.0))
    out = _frame(ax, title, "false positive rate", "true positive rate")
    out.append(f'<line x1="{_f(ax.px(0))}" y1="{_f(ax.py(0))}" x2="{_f(ax.px(1))}" y2="{_f(ax.py(1))}" '
               f'stroke="#999" stroke-dasharray="4 3"/>')
    legend = []
    for k, (name, roc) in enumerate(curves):
        if len(roc.fpr) < 2:
            raise ReportError(f"curve {name!r} is empty")
        color = TAB10[k % 10]
        pts = " ".join(f"{_f(ax.px(a))},{_f(ax.py(b))}" for a, b in zip(roc.fpr.tolist(), roc.tpr.tolist()))
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
        legend.append((f"{name} (AUC {_trapezoid(roc.fpr, roc.tpr):.3f})", color))
    out += _legend(legend)
    out.append("</svg>")
    return "\n".join(out) + "\n"


def render_sweep(series: list[tuple[int, float, str]], title: str = "AUC vs training classes") -> str:
    if not series:
        raise ReportError("empty sweep series")
    xs = [n for n, _, _ in series]
    ax = _Axes((min(xs), max(xs)), (0.0, 1.0))
    out = _frame(ax, title, "classes in training domain", "AUC")
    models = sorted({m for _, _, m in series})
    legend = []
    for k, m in enumerate(models):
        color = TAB10[k % 10]
        pts = sorted((n, a) for n, a, mm in series if mm == m)
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="'
                   + " ".join(f"{_f(ax.px(n))},{_f(ax.py(a))}" for n, a in pts) + '"/>')
        for n, a in pts:
            out.append(f'<circle cx="{_f(ax.px(n))}" cy="{_f(ax.py(a))}" r="3" fill="{color}"/>')
        legend.append((m, color))
    out += _legend(legend)
    out.append("</svg>")
    return "\n".join(out) + "\n"


def angle_color(theta: float) -> str:
    """Cyclic hue wheel: theta and theta + 2 pi share a color."""
    h = (theta / (2 * math.pi)) % 1.0
    r, g, b = colorsys.hsv_to_rgb(h, 0.85, 0.9)
    return f"#{round(r * 255):02x}{round(g * 255):02x}{round(b * 255):02x}"


def _label_key(v):
    return (0, v, "") if isinstance(v, (int, np.integer)) else (1, 0, str(v))


def render_scatter(sheet: ScatterSheet, color_by: str = "class", title: str | None = None) -> str:
    if color_by not in ("class", "angle"):
        raise ReportError(f"color_by must be 'class' or 'angle', got {color_by!r}")
    title = title or f"{sheet.model} {sheet.domain} latent space".strip()
    if len(sheet):
        lo, hi = sheet.z.min(axis=0), sheet.z.max(axis=0)
        pad = 0.05 * np.maximum(hi - lo, 1e-9)
        ax = _Axes((float(lo[0] - pad[0]), float(hi[0] + pad[0])), (float(lo[1] - pad[1]), float(hi[1] + pad[1])))
    else:
        ax = _Axes((-1.0, 1.0), (-1.0, 1.0))
    out = _frame(ax, title, "z1", "z2")
    classes = sorted(set(sheet.labels.tolist()), key=_label_key)
    cmap = {c: TAB10[k % 10] for k, c in enumerate(classes)}
    for (a, b), lab, th in zip(sheet.z.tolist(), sheet.labels.tolist(), sheet.theta.tolist()):
        color = cmap[lab] if color_by == "class" else angle_color(th)
        out.append(f'<circle cx="{_f(ax.px(a))}" cy="{_f(ax.py(b))}" r="1.6" fill="{color}" fill-opacity="0.7"/>')
    if color_by == "class":
        out += _legend([(str(c), cmap[c]) for c in classes])
    else:
        out += _legend([(f"{d} deg", angle_color(math.radians(d))) for d in range(0, 360, 45)])
    out.append("</svg>")
    return "\n".join(out) + "\n"


def render_svg(artifact, style: str = "class", title: str | None = None) -> str:
    """Dispatch on artifact type: RocCurve, sweep series list, or ScatterSheet."""
    if isinstance(artifact, RocCurve):
        return render_roc([("model", artifact)], title or "ROC")
    if isinstance(artifact, ScatterSheet):
        return render_scatter(artifact, style, title)
    if isinstance(artifact, list):
        return render_sweep(artifact, title or "AUC vs training classes")
    raise ReportError(f"cannot render {type(artifact).__name__}")


def write_figure(svg: str, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(svg)
