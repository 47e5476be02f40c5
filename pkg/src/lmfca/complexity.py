"""Static MAC/FLOP accounting for the network.

Counting conventions (also printed in every report header):
  * MACs count kernel multiply-accumulates of convolution-type layers:
    pointwise F*T*Cin*Cout, depthwise k x k F*T*C*k^2, 1D depthwise
    F*T*C*K, transposed 2x2/stride-2 Fout*Tout*Cin*Cout. Bias additions,
    activations, pooling, gating, and residual adds are tallied separately
    as elementwise ops.
  * flops        = 2*macs + elementwise ops (multiply and add counted apart)
  * fused_flops  = macs + elementwise ops (one multiply-add = one op, the
    convention most profiler tables use)
"""

from __future__ import annotations

from dataclasses import dataclass

from .model import FcaKind, LmfcaNet, ModelConfig

CONVENTIONS = (
    "macs: conv kernel multiply-accumulates; elem: bias/activation/pool/gate ops; "
    "flops = 2*macs + elem; fused_flops = macs + elem"
)


@dataclass
class CostSummary:
    rows: list
    macs: int
    elem: int

    @property
    def flops(self):
        return 2 * self.macs + self.elem

    @property
    def fused_flops(self):
        return self.macs + self.elem


def count_macs_flops(config: ModelConfig, f: int = 256, t: int = 192) -> CostSummary:
    """Per-layer cost table for one forward pass on an F x T input."""
    net = LmfcaNet(config)
    rows = net.cost_rows(f, t)
    return CostSummary(rows=rows, macs=sum(r["macs"] for r in rows),
                       elem=sum(r["elem"] for r in rows))


def fca_branch_macs(k: int, f_pooled: int, t_pooled: int, c: int) -> int:
    """Decoupled attention cost: two 1D depthwise convs, linear in K and in F*T."""
    return 2 * f_pooled * t_pooled * c * k


def dense_fca_macs(kind: FcaKind, f_pooled: int, t_pooled: int, c: int) -> int:
    """Cost of evaluating the dense fully-connected form instead."""
    if kind == FcaKind.TIME_AXIS:
        return f_pooled * t_pooled * t_pooled * c
    if kind == FcaKind.FREQUENCY_AXIS:
        return f_pooled * f_pooled * t_pooled * c
    return dense_fca_macs(FcaKind.TIME_AXIS, f_pooled, t_pooled, c) + \
        dense_fca_macs(FcaKind.FREQUENCY_AXIS, f_pooled, t_pooled, c)


def format_table(summary: CostSummary, title: str = "") -> str:
    """Delimited per-layer table with totals, ready for printing or a file."""
    lines = []
    if title:
        lines.append(f"# {title}")
    lines.append(f"# {CONVENTIONS}")
    lines.append("layer\top\tout_shape\tmacs\tflops")
    for r in summary.rows:
        shape = f"{r['f']}x{r['t']}x{r['c']}"
        flops = 2 * r["macs"] + r["elem"]
        lines.append(f"{r['name']}\t{r['op']}\t{shape}\t{r['macs']}\t{flops}")
    lines.append(f"TOTAL\t-\t-\t{summary.macs}\t{summary.flops}")
    lines.append(
        f"# totals: {summary.macs / 1e9:.3f} GMACs, {summary.flops / 1e9:.3f} GFLOPs "
        f"(2*macs convention), {summary.fused_flops / 1e9:.3f} G fused mult-adds"
    )
    return "\n".join(lines)
