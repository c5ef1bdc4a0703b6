"""Metrics, robustness sweeps, the w/x alignment diagnostic and CSV/SVG output."""

import csv
import hashlib
import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from nsrobust import network
from nsrobust.attacks import with_eps
from nsrobust.errors import ArgumentError
from nsrobust.tensor import RandStream

DEFAULT_EPS_GRID = (0.0, 0.01, 0.02, 0.03, 0.05, 0.1, 0.2, 0.3)


def metrics(pred, true, class_count=None):
    """``(ACC, PREC)``: overall accuracy and unweighted mean per-class precision.

    A class that is never predicted has precision 0 and still counts in the mean.
    """
    pred = np.asarray(pred)
    true = np.asarray(true)
    if pred.shape != true.shape:
        raise ArgumentError(f"prediction/label lengths differ: {pred.shape} vs {true.shape}")
    if pred.size == 0:
        raise ArgumentError("metrics of an empty set are undefined")
    if class_count is None:
        class_count = int(max(pred.max(), true.max())) + 1
    acc = float((pred == true).mean())
    precisions = []
    for c in range(class_count):
        predicted = pred == c
        k = predicted.sum()
        precisions.append(float((predicted & (true == c)).sum() / k) if k else 0.0)
    return acc, float(np.mean(precisions))


def predict(model, signals, chunk=4096):
    out = []
    for start in range(0, len(signals), chunk):
        x = np.asarray(signals[start:start + chunk], dtype=model.dtype)
        out.append(network.logits(model, x).argmax(axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


@dataclass
class RobustnessReport:
    model_id: str
    attack_id: str
    config_digest: str
    rows: list = field(default_factory=list)  # (eps, acc, prec, n)
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        eps = [r[0] for r in self.rows]
        if any(b <= a for a, b in zip(eps, eps[1:])):
            raise ArgumentError(f"noise levels must be strictly increasing, got {eps}")

    def acc(self, eps):
        return self._lookup(eps)[1]

    def prec(self, eps):
        return self._lookup(eps)[2]

    def _lookup(self, eps):
        for row in self.rows:
            if abs(row[0] - eps) < 1e-12:
                return row
        raise KeyError(f"no row for eps={eps}")


def config_digest(cfg):
    blob = json.dumps(asdict(cfg) if hasattr(cfg, "__dataclass_fields__") else cfg,
                      sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def robustness_curve(model, attack, cfg, eps_list, hset, model_id="model", threads=1, chunk=512):
    """Accuracy and precision under ``attack(model, x, y, cfg, stream)`` at each noise level.

    ``attack`` is :func:`~nsrobust.attacks.pgd_attack` or
    :func:`~nsrobust.attacks.spsa_attack`; ``cfg`` supplies everything but
    ``eps``.  Each (eps, chunk) cell draws from its own derived stream, so
    results do not depend on ``threads``.
    """
    eps_list = [float(e) for e in eps_list]
    if 0.0 not in eps_list:
        raise ArgumentError("the noise grid must include 0 as the clean anchor")
    if any(b <= a for a, b in zip(eps_list, eps_list[1:])):
        raise ArgumentError(f"noise levels must be strictly increasing, got {eps_list}")
    x_all = np.asarray(hset.signals, dtype=model.dtype)
    y_all = hset.labels
    base = RandStream(cfg.seed, 3)

    def cell(i, eps):
        if eps == 0:
            return predict(model, x_all)
        preds = []
        for j, start in enumerate(range(0, len(x_all), chunk)):
            x = x_all[start:start + chunk]
            y = y_all[start:start + chunk]
            x_adv = attack(model, x, y, with_eps(cfg, eps), stream=base.spawn(i * 100_003 + j))
            preds.append(predict(model, x_adv))
        return np.concatenate(preds)

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            all_preds = list(pool.map(lambda a: cell(*a), enumerate(eps_list)))
    else:
        all_preds = [cell(i, e) for i, e in enumerate(eps_list)]
    rows = [(e, *metrics(p, y_all, model.class_count), len(y_all)) for e, p in zip(eps_list, all_preds)]
    attack_id = f"{attack.__name__.replace('_attack', '')}{getattr(cfg, 'steps', '')}"
    return RobustnessReport(model_id, attack_id, config_digest(cfg), rows,
                            {"seed": cfg.seed, "config": asdict(cfg),
                             "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S")})


def alignment_diagnostic(model, hset, class_count=None):
    """Mean cosine(w_y, x) over correctly classified samples, per class and overall.

    Returns ``(overall, per_class, skipped)``; zero-norm ``x`` or ``w_y`` rows
    are skipped and counted.
    """
    class_count = class_count or model.class_count
    x = np.asarray(hset.signals, dtype=model.dtype)
    y = hset.labels
    z, masks = network.forward(model, x)
    correct = z.argmax(axis=1) == y
    idx = np.flatnonzero(correct)
    eff = network.effective_linear(model, x[idx], masks.select(idx), labels=y[idx])
    w = eff.w[:, 0].astype(np.float64)
    xs = x[idx].reshape(len(idx), -1).astype(np.float64)
    nw, nx = np.linalg.norm(w, axis=1), np.linalg.norm(xs, axis=1)
    ok = (nw > 0) & (nx > 0)
    cos = np.zeros(len(idx))
    cos[ok] = (w[ok] * xs[ok]).sum(axis=1) / (nw[ok] * nx[ok])
    per_class = {}
    for c in range(class_count):
        sel = ok & (y[idx] == c)
        per_class[c] = float(cos[sel].mean()) if sel.any() else float("nan")
    overall = float(cos[ok].mean()) if ok.any() else float("nan")
    return overall, per_class, int((~ok).sum())


# --- artifacts -------------------------------------------------------------

def write_report_csv(report, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["eps", "ACC", "PREC", "n"])
        for eps, acc, prec, n in report.rows:
            w.writerow([f"{eps:g}", f"{acc:.6f}", f"{prec:.6f}", n])
    meta = {"model_id": report.model_id, "attack_id": report.attack_id,
            "config_digest": report.config_digest, **report.metadata}
    with open(os.path.splitext(path)[0] + ".json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, default=str)


def read_report_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = [(float(r["eps"]), float(r["ACC"]), float(r["PREC"]), int(r["n"]))
                for r in csv.DictReader(fh)]
    meta_path = os.path.splitext(path)[0] + ".json"
    meta = {}
    if os.path.exists(meta_path):
        with open(meta_path, encoding="utf-8") as fh:
            meta = json.load(fh)
    return RobustnessReport(meta.get("model_id", ""), meta.get("attack_id", ""),
                            meta.get("config_digest", ""), rows, meta)


def report_name(arch, method, attack):
    return f"{arch}_{method}_{attack}"


def comparison_table(reports):
    """``(header, rows)`` merging methods: eps, then ACC and PREC per method."""
    methods = list(reports)
    grid = sorted({r[0] for rep in reports.values() for r in rep.rows})
    header = ["eps"] + [f"{m}_{k}" for m in methods for k in ("ACC", "PREC")]
    rows = []
    for eps in grid:
        row = [f"{eps:g}"]
        for m in methods:
            try:
                _, acc, prec, _ = reports[m]._lookup(eps)
                row += [f"{acc:.6f}", f"{prec:.6f}"]
            except KeyError:
                row += ["", ""]
        rows.append(row)
    return header, rows


def emit_report(reports, out_dir, waveforms=None):
    """Write per-report CSVs, per-(attack, arch) comparison CSVs and SVG charts.

    ``reports`` maps ``(arch, method, attack)`` to a RobustnessReport;
    ``waveforms`` maps a name to ``(clean, {eps: adversarial})``.
    Returns the list of written paths.
    """
    written = []
    if not reports and not waveforms:
        return written
    os.makedirs(out_dir, exist_ok=True)
    groups = {}
    for (arch, method, attack), rep in reports.items():
        path = os.path.join(out_dir, report_name(arch, method, attack) + ".csv")
        write_report_csv(rep, path)
        written.append(path)
        groups.setdefault((arch, attack), {})[method] = rep
    for (arch, attack), reps in groups.items():
        stem = os.path.join(out_dir, report_name(arch, "compare", attack))
        header, rows = comparison_table(reps)
        with open(stem + ".csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            w.writerows(rows)
        written.append(stem + ".csv")
        for metric, col in (("ACC", 1), ("PREC", 2)):
            series = {m: [(r[0], r[col]) for r in rep.rows] for m, rep in reps.items()}
            svg = line_chart(series, f"{metric} {arch} {attack}", "noise level", metric)
            path = f"{stem}_{metric}.svg"
            with open(path, "w", encoding="utf-8") as fh:
                fh.write(svg)
            written.append(path)
    for name, (clean, adversarial) in (waveforms or {}).items():
        path = os.path.join(out_dir, f"{name}_waveforms.svg")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(waveform_panels(clean, adversarial))
        written.append(path)
    return written


# --- minimal SVG writer -------------------------------------------------------

_PALETTE = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
            "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf")


def _esc(s):
    return str(s).replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def _polyline(points, color, width=1.5):
    pts = " ".join(f"{x:.2f},{y:.2f}" for x, y in points)
    return f'<polyline fill="none" stroke="{color}" stroke-width="{width}" points="{pts}"/>'


def line_chart(series, title, xlabel, ylabel, width=640, height=400, ylim=(0.0, 1.0)):
    """Static SVG 1.1 line chart; one polyline per series, x on a linear scale."""
    left, right, top, bottom = 60, 140, 30, 50
    xs = [x for pts in series.values() for x, _ in pts] or [0.0, 1.0]
    x0, x1 = min(xs), max(xs)
    if x1 == x0:
        x1 = x0 + 1
    y0, y1 = ylim
    pw, ph = width - left - right, height - top - bottom

    def sx(x):
        return left + (x - x0) / (x1 - x0) * pw

    def sy(y):
        return top + (1 - (y - y0) / (y1 - y0)) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{width}" height="{height}">',
           f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
           f'<text x="{width / 2:.0f}" y="18" text-anchor="middle" font-size="14">{_esc(title)}</text>',
           f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>',
           f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>']
    for k in range(6):
        yv = y0 + (y1 - y0) * k / 5
        out.append(f'<text x="{left - 6}" y="{sy(yv) + 4:.1f}" text-anchor="end" font-size="10">{yv:.1f}</text>')
    for xv in sorted(set(xs)):
        out.append(f'<text x="{sx(xv):.1f}" y="{top + ph + 14}" text-anchor="middle" font-size="9">{xv:g}</text>')
    out.append(f'<text x="{left + pw / 2:.0f}" y="{height - 10}" text-anchor="middle" font-size="12">{_esc(xlabel)}</text>')
    out.append(f'<text x="14" y="{top + ph / 2:.0f}" text-anchor="middle" font-size="12" '
               f'transform="rotate(-90 14 {top + ph / 2:.0f})">{_esc(ylabel)}</text>')
    for i, (name, pts) in enumerate(series.items()):
        color = _PALETTE[i % len(_PALETTE)]
        out.append(_polyline([(sx(x), sy(y)) for x, y in pts], color))
        ly = top + 14 * i + 8
        out.append(f'<line x1="{left + pw + 10}" y1="{ly}" x2="{left + pw + 30}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{left + pw + 34}" y="{ly + 4}" font-size="11">{_esc(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def waveform_panels(clean, adversarial, cols=2, panel_w=320, panel_h=150):
    """Grid of heartbeat traces: the clean beat, then one panel per noise level."""
    panels = [("clean ECG", np.asarray(clean))]
    panels += [(f"noise level {eps:g}", np.asarray(x)) for eps, x in sorted(adversarial.items())]
    rows = (len(panels) + cols - 1) // cols
    width, height = cols * panel_w, rows * panel_h
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{width}" height="{height}">',
           f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>']
    for k, (title, trace) in enumerate(panels):
        ox, oy = (k % cols) * panel_w, (k // cols) * panel_h
        pad = 20
        n = len(trace)
        pts = [(ox + pad + i / max(n - 1, 1) * (panel_w - 2 * pad),
                oy + pad + (1 - float(v)) * (panel_h - 2 * pad)) for i, v in enumerate(trace)]
        out.append(f'<rect x="{ox + pad}" y="{oy + pad}" width="{panel_w - 2 * pad}" '
                   f'height="{panel_h - 2 * pad}" fill="none" stroke="#cccccc"/>')
        out.append(_polyline(pts, "#d62728" if k else "#1f77b4", 1.0))
        out.append(f'<text x="{ox + panel_w / 2:.0f}" y="{oy + 14}" text-anchor="middle" font-size="11">{_esc(title)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
