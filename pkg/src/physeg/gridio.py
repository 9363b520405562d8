"""ASCII grid and parameter files.

Grid format (PGRD): line 1 is ``PGRD <KIND> <H> <W> [<C>]`` where KIND is a
modality (NDVI/DEM/SAR), LABEL, PROB or FEAT.  Values follow row-major, one
row per line; PROB/FEAT store C planes sequentially (plane c = channel c).
Floats are written with repr so files are byte-stable and round-trip exactly.

Parameter format (PSPARAMS): header ``PSPARAMS v1 <D> <C> <M> <H>`` followed
by the fusion matrix, fusion bias, head matrix, head bias and residual scale,
row-major ASCII.
"""

from __future__ import annotations

import numpy as np

from .priors import MODALITIES

GRID_KINDS = MODALITIES + ("LABEL", "PROB", "FEAT")
_PLANAR_KINDS = ("PROB", "FEAT")


class GridFormatError(ValueError):
    """Raised for malformed grid or parameter files."""


def _fmt_row(row) -> str:
    return " ".join(repr(float(v)) for v in row)


def write_grid(path, kind: str, values: np.ndarray) -> None:
    """Write a LABEL (H,W int), modality (H,W float) or PROB/FEAT (H,W,C) grid."""
    if kind not in GRID_KINDS:
        raise GridFormatError(f"unknown grid kind {kind!r}")
    arr = np.asarray(values)
    lines = []
    if kind in _PLANAR_KINDS:
        if arr.ndim != 3:
            raise GridFormatError(f"{kind} grids need a (H, W, C) array, got shape {arr.shape}")
        h, w, c = arr.shape
        lines.append(f"PGRD {kind} {h} {w} {c}")
        for plane in range(c):
            for i in range(h):
                lines.append(_fmt_row(arr[i, :, plane]))
    elif kind == "LABEL":
        if arr.ndim != 2:
            raise GridFormatError(f"LABEL grids need a (H, W) array, got shape {arr.shape}")
        h, w = arr.shape
        lines.append(f"PGRD LABEL {h} {w}")
        for i in range(h):
            lines.append(" ".join(str(int(v)) for v in arr[i]))
    else:
        if arr.ndim != 2:
            raise GridFormatError(f"{kind} grids need a (H, W) array, got shape {arr.shape}")
        h, w = arr.shape
        lines.append(f"PGRD {kind} {h} {w}")
        for i in range(h):
            lines.append(_fmt_row(arr[i]))
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")


def read_grid(path) -> tuple[str, np.ndarray]:
    """Read a PGRD file; returns (kind, array)."""
    with open(path, encoding="ascii") as fh:
        lines = fh.read().splitlines()
    if not lines or not lines[0].startswith("PGRD "):
        raise GridFormatError(f"{path}: missing PGRD header")
    head = lines[0].split()
    kind = head[1] if len(head) > 1 else ""
    if kind not in GRID_KINDS:
        raise GridFormatError(f"{path}: unknown grid kind {kind!r}")
    planar = kind in _PLANAR_KINDS
    expect = 5 if planar else 4
    if len(head) != expect:
        raise GridFormatError(f"{path}: header needs {expect} tokens, got {len(head)}")
    try:
        dims = [int(t) for t in head[2:]]
    except ValueError as exc:
        raise GridFormatError(f"{path}: non-integer dimension in header") from exc
    h, w = dims[0], dims[1]
    c = dims[2] if planar else 1
    body = [ln for ln in lines[1:] if ln.strip()]
    if len(body) != h * c:
        raise GridFormatError(f"{path}: expected {h * c} value rows, got {len(body)}")
    dtype = np.int32 if kind == "LABEL" else np.float64
    rows = []
    for ln in body:
        parts = ln.split()
        if len(parts) != w:
            raise GridFormatError(f"{path}: expected {w} values per row, got {len(parts)}")
        rows.append(parts)
    flat = np.array(rows, dtype=dtype)
    if planar:
        return kind, np.ascontiguousarray(flat.reshape(c, h, w).transpose(1, 2, 0))
    return kind, flat.reshape(h, w)


def read_grid_as(path, kind: str) -> np.ndarray:
    got, arr = read_grid(path)
    if got != kind:
        raise GridFormatError(f"{path}: expected {kind} grid, found {got}")
    return arr


def write_params(path, params) -> None:
    """Write refiner parameters (see refiner.RefinerParams) as PSPARAMS v1."""
    hidden, din = params.w1.shape
    c = params.w2.shape[0]
    m = len(MODALITIES)
    d = din - c - m
    if d < 0:
        raise GridFormatError(f"inconsistent parameter shapes: fused width {din} < C+M")
    lines = [f"PSPARAMS v1 {d} {c} {m} {hidden}"]
    for row in params.w1:
        lines.append(_fmt_row(row))
    lines.append(_fmt_row(params.b1))
    for row in params.w2:
        lines.append(_fmt_row(row))
    lines.append(_fmt_row(params.b2))
    lines.append(repr(float(params.residual_scale)))
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")


def read_params(path):
    """Read a PSPARAMS v1 file; returns a refiner.RefinerParams."""
    from .refiner import RefinerParams

    with open(path, encoding="ascii") as fh:
        lines = [ln for ln in fh.read().splitlines() if ln.strip()]
    if not lines or not lines[0].startswith("PSPARAMS v1 "):
        raise GridFormatError(f"{path}: missing PSPARAMS v1 header")
    try:
        d, c, m, hidden = (int(t) for t in lines[0].split()[2:])
    except ValueError as exc:
        raise GridFormatError(f"{path}: malformed header") from exc
    din = d + c + m
    expect = hidden + 1 + c + 1 + 1
    if len(lines) - 1 != expect:
        raise GridFormatError(f"{path}: expected {expect} value rows, got {len(lines) - 1}")
    cursor = 1

    def take(n, width):
        nonlocal cursor
        block = lines[cursor : cursor + n]
        cursor += n
        arr = np.array([ln.split() for ln in block], dtype=np.float64)
        if arr.shape != (n, width):
            raise GridFormatError(f"{path}: block shape {arr.shape} != {(n, width)}")
        return arr

    w1 = take(hidden, din)
    b1 = take(1, hidden)[0]
    w2 = take(c, hidden)
    b2 = take(1, c)[0]
    scale = float(lines[cursor])
    return RefinerParams(w1=w1, b1=b1, w2=w2, b2=b2, residual_scale=scale)


def write_history_csv(path, history) -> None:
    """Write per-step loss components as CSV (step, seg, region, phys, total)."""
    lines = ["step,seg,region,phys,total"]
    for k, rec in enumerate(history):
        cells = ",".join(repr(float(rec[key])) for key in ("seg", "region", "phys", "total"))
        lines.append(f"{k},{cells}")
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")
