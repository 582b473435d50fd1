"""Per-layer workload and cut-size profiles of a split network.

A profile row carries the per-layer FP/BP FLOPs and the size of the tensor
that crosses the link if the network is cut right after that layer.  The
latency formulas only ever need cumulative workloads, which are derived once
at construction.

Profile text format, one layer per line (``#`` starts a comment)::

    name, fp_mflop, bp_mflop, smashed_mb, grad_mb[, param_mb]
    name, fp_mflop, smashed_mb
    name, fp=9.8304 MFLOP, smashed=0.25 MB

Empty or omitted ``bp``/``grad`` fields default to twice the FP FLOPs and to
the smashed size respectively.  ``param`` (layer weight size) is only used for
model-exchange latencies and defaults to zero.  1 MB is 2**20 bytes.
"""

from __future__ import annotations

import decimal
from dataclasses import dataclass
from decimal import Decimal
from pathlib import Path

from .errors import ProfileError

MFLOP = Decimal(10**6)
MB_BITS = Decimal(2**23)

_CTX = decimal.Context(prec=60)


@dataclass(frozen=True)
class LayerProfile:
    index: int
    name: str
    fp_flops: float
    bp_flops: float
    smashed_bits: float
    grad_bits: float
    param_bits: float
    fp_cum: float
    bp_cum: float
    param_cum: float


@dataclass(frozen=True)
class CutWorkloads:
    """Per-sample workloads and per-sample transfer sizes at a given cut."""

    cut: int
    client_fp: float
    server_fp: float
    client_bp: float
    server_bp: float
    server_last_bp: float
    smashed_bits: float
    grad_bits: float
    client_param_bits: float


class ModelProfile:
    """Ordered layer profile; immutable after construction."""

    def __init__(self, names, fp_flops, smashed_bits, bp_flops=None, grad_bits=None,
                 param_bits=None):
        n = len(names)
        if n < 2:
            raise ProfileError(f"need at least 2 layers, got {n}")
        if bp_flops is None:
            bp_flops = [None] * n
        if grad_bits is None:
            grad_bits = [None] * n
        if param_bits is None:
            param_bits = [None] * n
        for seq in (fp_flops, smashed_bits, bp_flops, grad_bits, param_bits):
            if len(seq) != n:
                raise ProfileError("per-layer sequences differ in length")

        layers = []
        fp_cum = bp_cum = param_cum = 0.0
        for j in range(n):
            row = j + 1
            fp = float(fp_flops[j])
            bp = 2.0 * fp if bp_flops[j] is None else float(bp_flops[j])
            psi = float(smashed_bits[j])
            chi = psi if grad_bits[j] is None else float(grad_bits[j])
            par = 0.0 if param_bits[j] is None else float(param_bits[j])
            if fp < 0 or bp < 0:
                raise ProfileError("cumulative workload decreases (negative layer FLOPs)", row)
            if par < 0:
                raise ProfileError("negative parameter size", row)
            fp_cum += fp
            bp_cum += bp
            param_cum += par
            if fp_cum <= 0 or bp_cum <= 0:
                raise ProfileError("cumulative workload must be strictly positive", row)
            if j < n - 1 and (psi <= 0 or chi <= 0):
                raise ProfileError("cut-layer sizes must be positive", row)
            layers.append(LayerProfile(row, str(names[j]), fp, bp, psi, chi, par,
                                       fp_cum, bp_cum, param_cum))
        self.layers = tuple(layers)

    @property
    def total_layers(self):
        return len(self.layers)

    @property
    def cut_range(self):
        return range(1, self.total_layers)

    def __eq__(self, other):
        return isinstance(other, ModelProfile) and self.layers == other.layers

    def __repr__(self):
        return f"ModelProfile({[layer.name for layer in self.layers]})"

    def layer(self, j):
        return self.layers[j - 1]


def workloads_at_cut(profile: ModelProfile, cut: int) -> CutWorkloads:
    L = profile.total_layers
    if not 1 <= cut <= L - 1:
        raise ValueError(f"cut {cut} outside 1..{L - 1}")
    at = profile.layer(cut)
    last = profile.layer(L)
    penult = profile.layer(L - 1)
    return CutWorkloads(
        cut=cut,
        client_fp=at.fp_cum,
        server_fp=last.fp_cum - at.fp_cum,
        client_bp=at.bp_cum,
        server_bp=penult.bp_cum - at.bp_cum,
        server_last_bp=last.bp_cum - penult.bp_cum,
        smashed_bits=at.smashed_bits,
        grad_bits=at.grad_bits,
        client_param_bits=at.param_cum,
    )


# --- text format -----------------------------------------------------------

_KEYS = {"fp": "fp", "bp": "bp", "smashed": "smashed", "grad": "grad",
         "param": "param", "params": "param"}
_POSITIONAL = {
    2: ("fp", "smashed"),
    4: ("fp", "bp", "smashed", "grad"),
    5: ("fp", "bp", "smashed", "grad", "param"),
}
_UNITS = {"fp": ("mflop",), "bp": ("mflop",), "smashed": ("mb",), "grad": ("mb",),
          "param": ("mb",)}


def _number(text, scale, row, what):
    token = text.strip()
    if token in ("", "/"):
        return None if token == "" else 0.0
    try:
        value = _CTX.multiply(Decimal(token), scale)
    except decimal.InvalidOperation:
        raise ProfileError(f"cannot parse {what} value {text!r}", row) from None
    if not value.is_finite():
        raise ProfileError(f"non-finite {what} value", row)
    return float(value)


def _parse_row(line, row):
    parts = [p.strip() for p in line.split(",")]
    name, fields = parts[0], parts[1:]
    if not name:
        raise ProfileError("missing layer name", row)
    values = {}
    if any("=" in f for f in fields):
        for f in fields:
            if not f:
                continue
            if "=" not in f:
                raise ProfileError(f"mixed positional and keyword fields: {f!r}", row)
            key, _, rest = f.partition("=")
            key = _KEYS.get(key.strip().lower())
            if key is None:
                raise ProfileError(f"unknown field {f!r}", row)
            tokens = rest.split()
            if not tokens or len(tokens) > 2:
                raise ProfileError(f"bad field {f!r}", row)
            if len(tokens) == 2 and tokens[1].lower() not in _UNITS[key]:
                raise ProfileError(f"unit {tokens[1]!r} not allowed for {key}", row)
            values[key] = tokens[0]
    else:
        keys = _POSITIONAL.get(len(fields))
        if keys is None:
            raise ProfileError(f"expected 3, 5 or 6 comma-separated fields, got {len(parts)}", row)
        values = dict(zip(keys, fields))
    for required in ("fp", "smashed"):
        if not values.get(required, "").strip():
            raise ProfileError(f"missing {required} field", row)
    out = {}
    for key, text in values.items():
        scale = MFLOP if key in ("fp", "bp") else MB_BITS
        out[key] = _number(text, scale, row, key)
    if out["fp"] is None or out["smashed"] is None:
        raise ProfileError("fp and smashed are required", row)
    return name, out


def parse_profile(text: str) -> ModelProfile:
    names, fp, bp, smashed, grad, param = [], [], [], [], [], []
    row = 0
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        row += 1
        name, vals = _parse_row(line, row)
        names.append(name)
        fp.append(vals["fp"])
        bp.append(vals.get("bp"))
        smashed.append(vals["smashed"])
        grad.append(vals.get("grad"))
        param.append(vals.get("param"))
    return ModelProfile(names, fp, smashed, bp, grad, param)


def load_profile(source) -> ModelProfile:
    """Load a profile from a path or from a text document."""
    if isinstance(source, Path) or (isinstance(source, str) and "\n" not in source
                                    and Path(source).is_file()):
        return parse_profile(Path(source).read_text())
    return parse_profile(source)


def _fmt(value, scale):
    # enough digits that parse(format(x)) recovers x exactly
    d = _CTX.divide(Decimal(value), scale).normalize(_CTX)
    return format(d, "f")


def dump_profile(profile: ModelProfile) -> str:
    lines = ["# name, fp (MFLOP), bp (MFLOP), smashed (MB), grad (MB), param (MB)"]
    for layer in profile.layers:
        lines.append(
            f"{layer.name}, fp={_fmt(layer.fp_flops, MFLOP)}, bp={_fmt(layer.bp_flops, MFLOP)}, "
            f"smashed={_fmt(layer.smashed_bits, MB_BITS)}, grad={_fmt(layer.grad_bits, MB_BITS)}, "
            f"param={_fmt(layer.param_bits, MB_BITS)}"
        )
    return "\n".join(lines) + "\n"


# Table rows in published order: name, layer size (MB), FP MFLOP, smashed (MB).
# CONV4-CONV6 appear twice; both occurrences are kept, one per residual stage
# repetition.  "/" entries are zero.
_RESNET18_ROWS = """\
CONV1,   0.0364, 9.8304, 0.25
CONV2,   0.1411, 9.5027, 0.0625
CONV3,   0.1414, 9.4863, 0.0625
CONV4,   0.2827, 4.7432, 0.0313
CONV5,   0.564,  9.4618, 0.0313
CONV6,   0.0327, 0.5489, 0.0313
CONV4,   0.2827, 4.7432, 0.0313
CONV5,   0.564,  9.4618, 0.0313
CONV6,   0.0327, 0.5489, 0.0313
CONV7,   1.1279, 4.7309, 0.0156
CONV8,   2.2529, 9.4495, 0.0156
CONV9,   0.1279, 0.5366, 0.0156
CONV10,  4.5059, 4.7247, 0.0078
CONV11,  9.0059, 9.4433, 0.0078
CONV12,  0.5059, 0.5304, 0.0078
MAXPOOL, /,      0.0655, 0.0625
AVGPOOL, /,      /,      0.0020
FC,      0.0137, 0.0036, 2.67E-05
"""


def resnet18_preset() -> ModelProfile:
    """ResNet-18 profile (64x64 inputs), 18 rows in table order.

    BP FLOPs default to twice the FP FLOPs and the cut gradient has the same
    size as the smashed activations.
    """
    names, fp, smashed, param = [], [], [], []
    for row, line in enumerate(_RESNET18_ROWS.splitlines(), start=1):
        name, size_mb, fp_mflop, smashed_mb = (f.strip() for f in line.split(","))
        names.append(name)
        param.append(_number(size_mb, MB_BITS, row, "param"))
        fp.append(_number(fp_mflop, MFLOP, row, "fp"))
        smashed.append(_number(smashed_mb, MB_BITS, row, "smashed"))
    return ModelProfile(names, fp, smashed, param_bits=param)
