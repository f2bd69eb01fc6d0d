"""Posterior summaries, table exports and SVG figures.

Figures are written as plain SVG 1.1 text with a fixed 800x500 viewBox and
all numbers formatted at fixed precision, so equal inputs give equal bytes.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from xml.sax.saxutils import escape

import numpy as np
from scipy import integrate, special

from . import dists
from .infer import GLOBAL_NAMES, FitResult, GuideState, latent_names, logit_normal_mode
from .model import TimeGrid

QUANTILES = {"q05": 0.05, "q25": 0.25, "median": 0.5, "q75": 0.75, "q95": 0.95}
STAT_FIELDS = ("mean", "std", "median", "q05", "q25", "q75", "q95", "map")
UNITS = {
    "loss_rate": "per year",
    "scaling_factor": "persons per settlement",
    "sampling_prob": "probability",
}
POPULATION_UNITS = "persons"
LABELS = {
    "loss_rate": "Loss rate (per year)",
    "scaling_factor": "Scaling factor (persons per settlement)",
    "sampling_prob": "Sampling probability",
}
# normal tail mass beyond |z| = 12 is below 1e-32
LOGIT_Z_RANGE = 12.0
MIN_SAMPLES = 100
SCHEMA_VERSION = 1

# styling
WIDTH, HEIGHT = 800, 500
MARGIN = dict(left=80, right=30, top=40, bottom=60)
FONT = "font-family=\"Helvetica, Arial, sans-serif\""
COLORS = {"band": "#9ecae1", "mean": "#08519c", "map": "#d94801", "axis": "#333333", "grid": "#dddddd", "density": "#3f007d"}


@dataclass
class PosteriorSummary:
    names: list[str]
    mean: np.ndarray
    std: np.ndarray
    median: np.ndarray
    q05: np.ndarray
    q25: np.ndarray
    q75: np.ndarray
    q95: np.ndarray
    map: np.ndarray
    source: str = "guide"
    grid: TimeGrid | None = None
    guide: GuideState | None = None
    extra: dict = field(default_factory=dict)

    @property
    def n_bins(self) -> int:
        return len(self.names) - len(GLOBAL_NAMES)

    def index(self, name: str) -> int:
        return self.names.index(name)

    def latent(self, name: str) -> dict:
        i = self.index(name)
        return {f: float(getattr(self, f)[i]) for f in STAT_FIELDS}

    def trajectory(self) -> dict[str, np.ndarray]:
        n = self.n_bins
        rows = {f: getattr(self, f)[:n] for f in STAT_FIELDS}
        rows["year"] = self.grid.midpoints if self.grid is not None else np.arange(n, dtype=float)
        return rows

    def to_dict(self) -> dict:
        d = {
            "schema_version": SCHEMA_VERSION,
            "source": self.source,
            "names": list(self.names),
            "grid": self.grid.to_dict() if self.grid is not None else None,
            "guide": self.guide.to_dict() if self.guide is not None else None,
        }
        for f in STAT_FIELDS:
            d[f] = [float(v) for v in getattr(self, f)]
        if self.extra:
            d["extra"] = self.extra
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PosteriorSummary":
        return cls(
            names=list(d["names"]),
            **{f: np.asarray(d[f], dtype=float) for f in STAT_FIELDS},
            source=d.get("source", "guide"),
            grid=TimeGrid(**d["grid"]) if d.get("grid") else None,
            guide=GuideState.from_dict(d["guide"]) if d.get("guide") else None,
            extra=d.get("extra", {}),
        )


def _logit_normal_moment(loc: float, scale: float, k: int) -> float:
    """E[sigmoid(loc + scale*Z)**k] for standard normal Z, by adaptive quadrature."""

    def integrand(z):
        return special.expit(loc + scale * z) ** k * math.exp(-0.5 * z * z)

    val, _ = integrate.quad(integrand, -LOGIT_Z_RANGE, LOGIT_Z_RANGE, epsabs=0.0, epsrel=1e-12, limit=200)
    return val / math.sqrt(2 * math.pi)


def summarize_guide(guide: GuideState, grid: TimeGrid | None = None) -> PosteriorSummary:
    """Closed-form summaries of the log-normal coordinates; deterministic
    quadrature for the logit-normal sampling probability."""
    m, s = guide.loc, guide.scale
    out = {}
    out["mean"] = np.exp(m + 0.5 * s * s)
    out["std"] = out["mean"] * np.sqrt(np.expm1(s * s))
    for key, q in QUANTILES.items():
        out[key] = np.exp(m + s * dists.normal_quantile(q))
    out["map"] = np.exp(m - s * s)

    mp, sp = float(m[-1]), float(s[-1])
    mean_p = _logit_normal_moment(mp, sp, 1)
    out["mean"][-1] = mean_p
    out["std"][-1] = math.sqrt(max(_logit_normal_moment(mp, sp, 2) - mean_p**2, 0.0))
    for key, q in QUANTILES.items():
        out[key][-1] = special.expit(mp + sp * dists.normal_quantile(q))
    out["map"][-1] = logit_normal_mode(mp, sp)
    return PosteriorSummary(names=guide.names, source="guide", grid=grid, guide=guide, **out)


def summarize_samples(
    samples: np.ndarray,
    log_density: np.ndarray | None = None,
    names: list[str] | None = None,
    grid: TimeGrid | None = None,
) -> PosteriorSummary:
    """Empirical summaries of a (draws x latents) matrix.

    MAP is the draw with the highest ``log_density``; without densities it
    falls back to the per-column empirical median.  Columns are sorted before
    reduction so the result does not depend on row order.
    """
    x = np.asarray(samples, dtype=float)
    if x.ndim != 2 or x.shape[0] < MIN_SAMPLES:
        raise ValueError(f"need at least {MIN_SAMPLES} draws in a 2-d array, got shape {x.shape}")
    names = names or latent_names(x.shape[1] - len(GLOBAL_NAMES))
    if len(names) != x.shape[1]:
        raise ValueError("names do not match sample columns")
    srt = np.sort(x, axis=0)
    out = {"mean": srt.mean(axis=0), "std": srt.std(axis=0)}
    for key, q in QUANTILES.items():
        out[key] = np.quantile(srt, q, axis=0)
    if log_density is not None:
        ld = np.asarray(log_density, dtype=float)
        if ld.shape != (x.shape[0],):
            raise ValueError("log_density must have one entry per draw")
        best = np.flatnonzero(ld == ld.max())
        # lexicographically smallest among tied rows, for order invariance
        rows = x[best]
        order = np.lexsort(rows.T[::-1])
        out["map"] = rows[order[0]].copy()
    else:
        out["map"] = out["median"].copy()
    return PosteriorSummary(names=list(names), source="samples", grid=grid, **out)


# --------------------------------------------------------------------------
# exports


def _num(v: float) -> str:
    return repr(float(v))


def trajectory_csv(summary: PosteriorSummary) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["year", "mean", "map", "q25", "q75"])
    tr = summary.trajectory()
    for i in range(summary.n_bins):
        w.writerow([_num(tr["year"][i]), _num(tr["mean"][i]), _num(tr["map"][i]), _num(tr["q25"][i]), _num(tr["q75"][i])])
    return buf.getvalue()


def parameters_csv(summary: PosteriorSummary) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["name", "mean", "std", "q25", "q75", "map", "units"])
    for name in GLOBAL_NAMES:
        s = summary.latent(name)
        w.writerow([name, _num(s["mean"]), _num(s["std"]), _num(s["q25"]), _num(s["q75"]), _num(s["map"]), UNITS[name]])
    return buf.getvalue()


def elbo_trace_csv(fit: FitResult) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["iteration", "elbo"])
    for it, val in fit.elbo_trace:
        w.writerow([int(it), _num(val)])
    return buf.getvalue()


def fit_to_dict(fit: FitResult) -> dict:
    """Serializable view of a fit.  Wall time is left out so that reruns
    produce identical files."""
    return {
        "schema_version": SCHEMA_VERSION,
        "seed": fit.seed,
        "config": fit.config,
        "guide": fit.guide.to_dict(),
        "elbo_trace": [[int(i), float(v)] for i, v in fit.elbo_trace],
        "diagnostics": fit.diagnostics,
    }


def fit_from_dict(d: dict) -> FitResult:
    return FitResult(
        guide=GuideState.from_dict(d["guide"]),
        elbo_trace=[(int(i), float(v)) for i, v in d["elbo_trace"]],
        wall_time=float("nan"),
        seed=int(d["seed"]),
        config=d["config"],
        diagnostics=d.get("diagnostics", {}),
    )


def dumps(doc) -> str:
    return json.dumps(doc, indent=2, sort_keys=True, allow_nan=False) + "\n"


def export_tables(summary: PosteriorSummary, fit: FitResult, config_echo: dict | None = None) -> tuple[str, dict[str, str]]:
    """Report JSON plus the trajectory and parameter CSV tables."""
    doc = {
        "schema_version": SCHEMA_VERSION,
        "seed": fit.seed,
        "config": config_echo if config_echo is not None else fit.config,
        "elbo_trace": [[int(i), float(v)] for i, v in fit.elbo_trace],
        "parameters": {name: dict(summary.latent(name), units=UNITS[name]) for name in GLOBAL_NAMES},
        "summary": summary.to_dict(),
    }
    tables = {"trajectory.csv": trajectory_csv(summary), "parameters.csv": parameters_csv(summary)}
    return dumps(doc), tables


def summary_from_report(text: str) -> PosteriorSummary:
    return PosteriorSummary.from_dict(json.loads(text)["summary"])


# --------------------------------------------------------------------------
# SVG


def _fmt(v: float) -> str:
    s = f"{v:.2f}"
    return "0.00" if s == "-0.00" else s


def year_label(year: float) -> str:
    y = int(round(year))
    if y < 0:
        return f"{-y} BCE"
    if y == 0:
        return "0"
    return f"{y} CE"


def nice_ticks(lo: float, hi: float, target: int = 6) -> list[float]:
    if hi <= lo:
        return [lo]
    raw = (hi - lo) / target
    mag = 10 ** math.floor(math.log10(raw))
    step = next(m * mag for m in (1, 2, 2.5, 5, 10) if m * mag >= raw)
    first = math.ceil(lo / step) * step
    ticks = []
    v = first
    while v <= hi + 1e-9 * step:
        ticks.append(round(v, 12))
        v += step
    return ticks


def _value_label(v: float) -> str:
    if v == 0:
        return "0"
    a = abs(v)
    if a >= 1e5 or a < 1e-3:
        return f"{v:.1e}"
    if a >= 100:
        return f"{v:,.0f}"
    return f"{v:.4g}"


class _Canvas:
    def __init__(self, title: str):
        self.parts = [
            '<?xml version="1.0" encoding="UTF-8"?>',
            f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" viewBox="0 0 {WIDTH} {HEIGHT}" width="{WIDTH}" height="{HEIGHT}">',
            f"<title>{escape(title)}</title>",
            f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="#ffffff"/>',
        ]

    def add(self, element: str) -> None:
        self.parts.append(element)

    def text(self, x, y, s, size=12, anchor="middle", extra="") -> None:
        self.add(f'<text x="{_fmt(x)}" y="{_fmt(y)}" font-size="{size}" text-anchor="{anchor}" {FONT}{extra}>{escape(s)}</text>')

    def render(self) -> str:
        return "\n".join(self.parts + ["</svg>"]) + "\n"


def render_trajectory_svg(summary: PosteriorSummary, grid: TimeGrid | None = None) -> str:
    """Mean and MAP population per bin over the interquartile band."""
    grid = grid or summary.grid
    n = summary.n_bins
    if n < 1:
        raise ValueError("summary has no trajectory rows")
    if grid is None or grid.n_bins != n:
        raise ValueError("a grid matching the trajectory is required")
    tr = summary.trajectory()
    lo_band = np.maximum(tr["q25"], 0.0)
    hi_band = np.maximum(tr["q75"], 0.0)
    y_max = float(max(hi_band.max(), tr["mean"].max(), tr["map"].max()))
    y_max = y_max * 1.05 if y_max > 0 else 1.0

    left, right = MARGIN["left"], WIDTH - MARGIN["right"]
    top, bottom = MARGIN["top"], HEIGHT - MARGIN["bottom"]
    x0, x1 = float(grid.start_year), float(grid.end_year)

    def px(year):
        return left + (year - x0) / (x1 - x0) * (right - left)

    def py(v):
        return bottom - max(v, 0.0) / y_max * (bottom - top)

    c = _Canvas("Posterior population trajectory")
    c.add('<g class="grid">')
    for t in nice_ticks(0.0, y_max):
        c.add(f'<line x1="{_fmt(left)}" y1="{_fmt(py(t))}" x2="{_fmt(right)}" y2="{_fmt(py(t))}" stroke="{COLORS["grid"]}" stroke-width="1"/>')
        c.text(left - 8, py(t) + 4, _value_label(t), size=11, anchor="end")
    for t in nice_ticks(x0, x1):
        c.add(f'<line x1="{_fmt(px(t))}" y1="{_fmt(bottom)}" x2="{_fmt(px(t))}" y2="{_fmt(bottom + 5)}" stroke="{COLORS["axis"]}" stroke-width="1"/>')
        c.text(px(t), bottom + 20, year_label(t), size=11)
    c.add("</g>")

    # step-shaped band: bin-wise values, no smoothing
    upper = []
    lower = []
    for b0, b1, lo, hi in zip(grid.bin_starts, grid.bin_ends, lo_band, hi_band):
        upper += [(px(b0), py(hi)), (px(b1), py(hi))]
        lower += [(px(b0), py(lo)), (px(b1), py(lo))]
    pts = " ".join(f"{_fmt(x)},{_fmt(y)}" for x, y in upper + lower[::-1])
    c.add(f'<polygon class="band" points="{pts}" fill="{COLORS["band"]}" fill-opacity="0.6" stroke="none"/>')

    mids = grid.midpoints
    for key, dash in (("mean", ""), ("map", ' stroke-dasharray="6,4"')):
        line = " ".join(f"{_fmt(px(x))},{_fmt(py(v))}" for x, v in zip(mids, tr[key]))
        c.add(f'<polyline class="{key}" points="{line}" fill="none" stroke="{COLORS[key]}" stroke-width="2"{dash}/>')
    for x, v in zip(mids, tr["mean"]):
        c.add(f'<circle class="marker mean" cx="{_fmt(px(x))}" cy="{_fmt(py(v))}" r="2.5" fill="{COLORS["mean"]}"/>')
    for x, v in zip(mids, tr["map"]):
        c.add(f'<rect class="marker map" x="{_fmt(px(x) - 2.5)}" y="{_fmt(py(v) - 2.5)}" width="5" height="5" fill="{COLORS["map"]}"/>')

    c.add(f'<line x1="{left}" y1="{bottom}" x2="{right}" y2="{bottom}" stroke="{COLORS["axis"]}" stroke-width="1.5"/>')
    c.add(f'<line x1="{left}" y1="{top}" x2="{left}" y2="{bottom}" stroke="{COLORS["axis"]}" stroke-width="1.5"/>')
    c.text((left + right) / 2, HEIGHT - 15, "Year", size=13)
    c.text(20, (top + bottom) / 2, "Population", size=13, extra=f' transform="rotate(-90 20 {_fmt((top + bottom) / 2)})"')
    lx = left + 15
    c.add(f'<rect x="{lx}" y="{top + 2}" width="18" height="10" fill="{COLORS["band"]}"/>')
    c.text(lx + 24, top + 11, "interquartile range", size=11, anchor="start")
    c.add(f'<line x1="{lx}" y1="{top + 24}" x2="{lx + 18}" y2="{top + 24}" stroke="{COLORS["mean"]}" stroke-width="2"/>')
    c.text(lx + 24, top + 28, "mean", size=11, anchor="start")
    c.add(f'<line x1="{lx}" y1="{top + 40}" x2="{lx + 18}" y2="{top + 40}" stroke="{COLORS["map"]}" stroke-width="2" stroke-dasharray="6,4"/>')
    c.text(lx + 24, top + 44, "MAP", size=11, anchor="start")
    return c.render()


def density_curves(summary: PosteriorSummary, n_points: int = 400) -> list[tuple[str, np.ndarray, np.ndarray]]:
    """Guide densities of the three global latents between their 0.1% and
    99.9% quantiles, as plotted by ``render_density_svg``."""
    if summary.guide is None:
        raise ValueError("density plots need the fitted guide parameters")
    g = summary.guide
    z_lo, z_hi = dists.normal_quantile(0.001), dists.normal_quantile(0.999)
    curves = []
    for name in GLOBAL_NAMES:
        i = summary.index(name)
        m, s = float(g.loc[i]), float(g.scale[i])
        if name == "sampling_prob":
            lo, hi = special.expit(m + s * z_lo), special.expit(m + s * z_hi)
            xs = np.linspace(lo, hi, n_points)
            y = special.logit(xs)
            ys = np.exp(dists.log_pdf_standard_normal((y - m) / s)) / (s * xs * (1 - xs))
        else:
            lo, hi = math.exp(m + s * z_lo), math.exp(m + s * z_hi)
            xs = np.linspace(lo, hi, n_points)
            ys = np.exp(dists.log_pdf_lognormal(xs, dists.LogNormalParams(m, s)))
        curves.append((name, xs, ys))
    return curves


def render_density_svg(summary: PosteriorSummary) -> str:
    """Three side-by-side panels: loss rate, scaling factor, sampling probability."""
    curves = density_curves(summary)
    c = _Canvas("Posterior densities of model parameters")
    gap = 30
    panel_w = (WIDTH - MARGIN["left"] / 2 - MARGIN["right"] - 2 * gap) / 3
    top, bottom = MARGIN["top"] + 20, HEIGHT - MARGIN["bottom"]
    for k, (name, xs, ys) in enumerate(curves):
        left = MARGIN["left"] / 2 + k * (panel_w + gap)
        right = left + panel_w
        x0, x1 = float(xs[0]), float(xs[-1])
        y_max = float(ys.max()) * 1.1

        def px(v):
            return left + (v - x0) / (x1 - x0) * (right - left)

        def py(v):
            return bottom - v / y_max * (bottom - top)

        c.add(f'<g class="panel" id="panel-{name}">')
        c.text((left + right) / 2, MARGIN["top"], LABELS[name], size=12)
        pts = " ".join(f"{_fmt(px(x))},{_fmt(py(y))}" for x, y in zip(xs, ys))
        area = f"{_fmt(px(x0))},{_fmt(bottom)} {pts} {_fmt(px(x1))},{_fmt(bottom)}"
        c.add(f'<polygon points="{area}" fill="{COLORS["density"]}" fill-opacity="0.15" stroke="none"/>')
        c.add(f'<polyline class="density" points="{pts}" fill="none" stroke="{COLORS["density"]}" stroke-width="1.5"/>')
        s = summary.latent(name)
        c.add(f'<line class="mean" x1="{_fmt(px(s["mean"]))}" y1="{_fmt(top)}" x2="{_fmt(px(s["mean"]))}" y2="{_fmt(bottom)}" stroke="{COLORS["mean"]}" stroke-width="1"/>')
        c.add(f'<line x1="{_fmt(left)}" y1="{_fmt(bottom)}" x2="{_fmt(right)}" y2="{_fmt(bottom)}" stroke="{COLORS["axis"]}" stroke-width="1.5"/>')
        for t in nice_ticks(x0, x1, target=3):
            c.add(f'<line x1="{_fmt(px(t))}" y1="{_fmt(bottom)}" x2="{_fmt(px(t))}" y2="{_fmt(bottom + 5)}" stroke="{COLORS["axis"]}"/>')
            c.text(px(t), bottom + 18, _value_label(t), size=10)
        c.text((left + right) / 2, bottom + 38, f"mean {_value_label(s['mean'])}, sd {_value_label(s['std'])}", size=10)
        c.add("</g>")
    return c.render()


def embed_metadata(svg: str, doc: dict) -> str:
    """Insert ``doc`` as escaped JSON in a <metadata> element after the title."""
    marker = "</title>"
    at = svg.index(marker) + len(marker)
    payload = escape(json.dumps(doc, sort_keys=True, separators=(",", ":")))
    return f"{svg[:at]}\n<metadata>{payload}</metadata>{svg[at:]}"
