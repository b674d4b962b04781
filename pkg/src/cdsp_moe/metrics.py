"""Routing/topology statistics and CSV/SVG emission."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

LN2 = math.log(2.0)


def pearson(a, b, return_flag: bool = False):
    """Sample Pearson correlation; 0 (flagged) when either side has zero variance."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.size != b.size:
        raise ValueError("pearson needs equal lengths")
    if a.size < 2:
        raise ValueError("pearson needs at least two points")
    da, db = a - a.mean(), b - b.mean()
    saa, sbb = float(da @ da), float(db @ db)
    degenerate = saa == 0.0 or sbb == 0.0
    # sqrt of the product (not product of sqrts) so that a row against itself gives exactly 1
    r = 0.0 if degenerate else float(np.clip(da @ db / math.sqrt(saa * sbb), -1.0, 1.0))
    return (r, degenerate) if return_flag else r


def pairwise_pearson(rows) -> dict:
    rows = np.asarray(rows, dtype=np.float64)
    return {(i, j): pearson(rows[i], rows[j]) for i in range(len(rows)) for j in range(i + 1, len(rows))}


def _check_distribution(p) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
        raise ValueError("routing histogram rows must be probability distributions")
    return p


def js_divergence(p, q) -> float:
    p, q = _check_distribution(p), _check_distribution(q)
    m = 0.5 * (p + q)

    def kl(a):
        nz = (a > 0) & (m > 0)   # m underflows to 0 only for subnormal a; its term is below 1e-320
        return float(np.sum(a[nz] * np.log(a[nz] / m[nz])))

    return min(max(0.5 * kl(p) + 0.5 * kl(q), 0.0), LN2)


def clustering_separation(hist) -> dict:
    """JS distances between task rows and whether tasks 0 and 1 sit closest."""
    hist = np.asarray(hist, dtype=np.float64)
    if hist.shape[0] != 3:
        raise ValueError("clustering check expects three task rows")
    d01, d02, d12 = (js_divergence(hist[a], hist[b]) for a, b in ((0, 1), (0, 2), (1, 2)))
    degenerate = max(d01, d02, d12) == 0.0
    clustered = degenerate or d01 < min(d02, d12)
    return {"d01": d01, "d02": d02, "d12": d12, "clustered": bool(clustered), "degenerate": degenerate}


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def export_csv(data, path, fieldnames=None, row_labels=None) -> Path:
    """Write a matrix (2-d array) or a log (list of dicts) as CSV.

    Floats use the shortest repr that round-trips exactly.
    """
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            if isinstance(data, np.ndarray) or (data and not isinstance(data[0], dict)):
                mat = np.atleast_2d(np.asarray(data, dtype=np.float64))
                header = list(fieldnames or [f"c{j}" for j in range(mat.shape[1])])
                w.writerow((["row"] if row_labels is not None else []) + header)
                for i, row in enumerate(mat):
                    lead = [row_labels[i]] if row_labels is not None else []
                    w.writerow(lead + [_fmt(float(v)) for v in row])
            else:
                rows = list(data)
                header = list(fieldnames or (rows[0].keys() if rows else []))
                w.writerow(header)
                for r in rows:
                    w.writerow([_fmt(r.get(k, "")) for k in header])
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc
    return path


def read_csv_matrix(path) -> tuple[list[str], np.ndarray, list[str] | None]:
    with Path(path).open() as fh:
        rows = list(csv.reader(fh))
    header = rows[0]
    labelled = bool(header) and header[0] == "row"
    body = [r[1:] if labelled else r for r in rows[1:]]
    labels = [r[0] for r in rows[1:]] if labelled else None
    mat = np.array([[float(v) for v in r] for r in body]) if body else np.zeros((0, len(header)))
    return header[1:] if labelled else header, mat, labels


def read_csv_log(path) -> list[dict]:
    with Path(path).open() as fh:
        return [{k: float(v) if v not in ("",) else float("nan") for k, v in r.items()}
                for r in csv.DictReader(fh)]


@dataclass
class HeatmapSpec:
    matrix: np.ndarray
    row_labels: list = field(default_factory=list)
    col_labels: list = field(default_factory=list)
    title: str = ""
    vmin: float | None = 0.0
    vmax: float | None = 1.0
    low_color: str = "#f7fbff"
    high_color: str = "#08306b"
    annotate: bool = True

    def __post_init__(self):
        self.matrix = np.atleast_2d(np.asarray(self.matrix, dtype=np.float64))
        r, c = self.matrix.shape
        if not self.row_labels:
            self.row_labels = [str(i) for i in range(r)]
        if not self.col_labels:
            self.col_labels = [str(j) for j in range(c)]
        if len(self.row_labels) != r or len(self.col_labels) != c:
            raise ValueError(f"labels {len(self.row_labels)}x{len(self.col_labels)} do not match matrix {r}x{c}")


def _hex(c: str) -> np.ndarray:
    c = c.lstrip("#")
    return np.array([int(c[k:k + 2], 16) for k in (0, 2, 4)], dtype=np.float64)


def ramp_color(t: float, low: str, high: str) -> str:
    rgb = np.rint(_hex(low) + (_hex(high) - _hex(low)) * min(max(t, 0.0), 1.0)).astype(int)
    return "#{:02x}{:02x}{:02x}".format(*rgb)


def export_svg_heatmap(spec: HeatmapSpec, path, cell: int = 40) -> Path:
    m = spec.matrix
    vmin = float(m.min()) if spec.vmin is None else spec.vmin
    vmax = float(m.max()) if spec.vmax is None else spec.vmax
    span = vmax - vmin
    left, top = 70, 50 if spec.title else 30
    rows, cols = m.shape
    width, height = left + cols * cell + 10, top + rows * cell + 10
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">']
    if spec.title:
        out.append(f'<text x="{width / 2}" y="18" text-anchor="middle" font-size="14">{escape(spec.title)}</text>')
    for j, lab in enumerate(spec.col_labels):
        out.append(f'<text x="{left + (j + 0.5) * cell}" y="{top - 6}" text-anchor="middle">{escape(str(lab))}</text>')
    for i, lab in enumerate(spec.row_labels):
        out.append(f'<text x="{left - 6}" y="{top + (i + 0.5) * cell + 4}" text-anchor="end">{escape(str(lab))}</text>')
        for j in range(cols):
            t = 0.5 if span == 0 else (m[i, j] - vmin) / span
            fill = ramp_color(t, spec.low_color, spec.high_color)
            x, y = left + j * cell, top + i * cell
            out.append(f'<rect x="{x}" y="{y}" width="{cell}" height="{cell}" fill="{fill}"/>')
            if spec.annotate:
                ink = "#ffffff" if t > 0.6 else "#000000"
                out.append(f'<text x="{x + cell / 2}" y="{y + cell / 2 + 4}" text-anchor="middle" '
                           f'fill="{ink}">{m[i, j]:.2f}</text>')
    out.append("</svg>")
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("\n".join(out) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc
    return path
