"""Closed-form parameter / feature / MACC / memory accounting.

Counting rules per block (lengths after pooling use floor division):

=====  ==========================  ===============================
block  parameters                  MACCs
=====  ==========================  ===============================
phi1   n_k*n_ch + 4*n_k            n_ch*n_s*n_k
phi2   n_k*n_f + 4*n_k             n_f*n_s*n_k
phi3   16*n_k + n_k**2 + 4*n_k     (16*n_k + n_k**2) * (n_s // 8)
phi4   (n_in + 1) * n_cl           n_in * n_cl
=====  ==========================  ===============================

with ``n_in = n_k * ((n_s // 8) // 8)``. Convolutions carry no bias; BN and
pooling arithmetic is not counted as MACCs. Memory under the layer-by-layer
schedule is ``bytes_per_value * (params_total + peak_feature_pair)``.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

from .model import ModelConfig

DEFAULT_BUDGET_BYTES = 64 * 1024
PRECISION_BYTES = {8: 1, 32: 4}


@dataclass(frozen=True)
class LayerRecord:
    name: str
    params: int
    in_features: int
    out_features: int
    maccs: int


@dataclass(frozen=True)
class ResourceReport:
    layers: tuple = ()
    config: ModelConfig | None = None

    @property
    def params_total(self) -> int:
        return sum(r.params for r in self.layers)

    @property
    def macc_total(self) -> int:
        return sum(r.maccs for r in self.layers)

    @property
    def peak_feature_pair(self) -> int:
        return max((r.in_features + r.out_features for r in self.layers), default=0)

    def memory_bytes(self, precision: int = 8) -> int:
        if precision not in PRECISION_BYTES:
            raise ValueError(f"precision must be 8 or 32 bits, got {precision}")
        return PRECISION_BYTES[precision] * (self.params_total + self.peak_feature_pair)

    def layer(self, name: str) -> LayerRecord:
        for r in self.layers:
            if r.name == name:
                return r
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {
            "config": self.config.to_dict() if self.config else None,
            "layers": [asdict(r) for r in self.layers],
            "params_total": self.params_total,
            "peak_feature_pair": self.peak_feature_pair,
            "macc_total": self.macc_total,
            "memory_bytes_8bit": self.memory_bytes(8),
            "memory_bytes_32bit": self.memory_bytes(32),
        }

    def format_table(self, precision: int = 8) -> str:
        lines = [f"{'layer':<6} {'params':>10} {'in feat':>10} {'out feat':>10} {'MACC':>12}"]
        for r in self.layers:
            lines.append(f"{r.name:<6} {r.params:>10,} {r.in_features:>10,} "
                         f"{r.out_features:>10,} {r.maccs:>12,}")
        mem = self.memory_bytes(precision)
        lines.append(f"total: {self.params_total:,} params / {self.peak_feature_pair:,} peak features"
                     f" / {self.macc_total:,} MACC / {mem:,} B ({mem / 1000:.2f} kB @ {precision}-bit)")
        return "\n".join(lines)


def estimate(config: ModelConfig) -> ResourceReport:
    c = config
    k = c.sep_kernel
    n_in = c.fc_in
    layers = (
        LayerRecord("phi1", c.n_k * c.n_ch + 4 * c.n_k, c.n_ch * c.n_s, c.n_k * c.n_s,
                    c.n_ch * c.n_s * c.n_k),
        LayerRecord("phi2", c.n_k * c.n_f + 4 * c.n_k, c.n_k * c.n_s, c.n_k * c.len2,
                    c.n_f * c.n_s * c.n_k),
        LayerRecord("phi3", k * c.n_k + c.n_k ** 2 + 4 * c.n_k, c.n_k * c.len2, n_in,
                    (k * c.n_k + c.n_k ** 2) * c.len2),
        LayerRecord("phi4", (n_in + 1) * c.n_cl, n_in, c.n_cl, n_in * c.n_cl),
    )
    return ResourceReport(layers, c)


@dataclass(frozen=True)
class Budget:
    limit_bytes: int = DEFAULT_BUDGET_BYTES

    def __post_init__(self):
        if self.limit_bytes <= 0:
            raise ValueError("budget must be positive")


@dataclass(frozen=True)
class BudgetCheck:
    fits: bool
    margin_bytes: int
    required_bytes: int


def check_budget(report: ResourceReport, precision: int = 8, budget: Budget = Budget()) -> BudgetCheck:
    need = report.memory_bytes(precision)
    return BudgetCheck(need <= budget.limit_bytes, budget.limit_bytes - need, need)


def _ratio(a, b):
    if a == b:
        return 1.0
    return a / b if b else float("inf")


def compare(report_a: ResourceReport, report_b: ResourceReport) -> dict[str, float]:
    """Reduction factors of ``report_b`` relative to ``report_a`` (a / b).

    ``memory`` compares the peak consecutive feature-map pair, the quantity
    channel reduction shrinks; ``memory_total`` compares parameters plus
    features.
    """
    return {
        "params": _ratio(report_a.params_total, report_b.params_total),
        "memory": _ratio(report_a.peak_feature_pair, report_b.peak_feature_pair),
        "memory_total": _ratio(report_a.memory_bytes(8), report_b.memory_bytes(8)),
        "macc": _ratio(report_a.macc_total, report_b.macc_total),
    }


# Published resource cells for the two full-channel 4-class configurations.
PUBLISHED = {
    ModelConfig(22, 750, 32, 64, 4): {
        "phi1.params": 832, "phi1.out_features": 24_000, "phi1.maccs": 528_000,
        "phi2.params": 2_176, "phi2.out_features": 3_000, "phi2.maccs": 1_536_000,
        "phi3.params": 1_664, "phi3.out_features": 176, "phi3.maccs": 96_000,
        "phi4.params": 1_412, "phi4.out_features": 4, "phi4.maccs": 704,
        "input.features": 16_500,
        "params_total": 6_084, "peak_feature_pair": 40_500, "macc_total": 2_209_408,
    },
    ModelConfig(64, 480, 16, 128, 4): {
        "phi1.params": 1_088, "phi1.out_features": 7_680, "phi1.maccs": 491_520,
        "phi2.params": 2_112, "phi2.out_features": 960, "phi2.maccs": 983_040,
        "phi3.params": 576, "phi3.out_features": 112, "phi3.maccs": 30_720,
        "phi4.params": 484, "phi4.out_features": 4, "phi4.maccs": 448,
        "input.features": 30_720,
        "params_total": 4_228, "peak_feature_pair": 38_400, "macc_total": 1_505_728,
    },
}

# Why the floor-based counts cannot match some published cells.
_EXPLANATIONS = {
    "phi2.out_features": "published value uses 750/8 = 93.75 (non-integer length); floor gives 93",
    "phi3.out_features": "published features conflict with the dense-layer parameter count "
                         "(1,412 = (352 + 1) * 4), which implies the floor-based input size",
    "phi3.maccs": "published value equals n_k^2 * 93.75 (pointwise part only); the stated total "
                  "implies (16*n_k + n_k^2) * 93.75 = 144,000",
    "phi4.params": "published row uses a non-integer pooled length; the stated total matches floor",
    "phi4.maccs": "published value uses the halved dense input of the phi3 row (176 * 4); the "
                  "stated total implies 352 * 4 = 1,408",
    "macc_total": "published total uses non-integer pooled length 93.75",
}


@dataclass(frozen=True)
class Discrepancy:
    cell: str
    published: int
    computed: int
    explanation: str = ""

    @property
    def rel_error(self) -> float:
        return abs(self.computed - self.published) / abs(self.published)


def _cell_value(report: ResourceReport, cell: str) -> int:
    if cell == "input.features":
        return report.layers[0].in_features
    if "." in cell:
        layer, attr = cell.split(".")
        return getattr(report.layer(layer), attr)
    return getattr(report, cell)


@dataclass
class DiscrepancyReport:
    config: ModelConfig
    matched: list = field(default_factory=list)
    deviations: list = field(default_factory=list)

    def format(self) -> str:
        lines = [f"published cells for {self.config}: {len(self.matched)} exact, "
                 f"{len(self.deviations)} deviating"]
        for d in self.deviations:
            lines.append(f"  {d.cell}: published {d.published:,} computed {d.computed:,} "
                         f"({100 * d.rel_error:.2f}%) - {d.explanation}")
        return "\n".join(lines)


def discrepancies(report: ResourceReport) -> DiscrepancyReport:
    """Compare a report against the published cells for its configuration."""
    if report.config not in PUBLISHED:
        raise KeyError(f"no published cells for {report.config}")
    out = DiscrepancyReport(report.config)
    for cell, published in PUBLISHED[report.config].items():
        computed = _cell_value(report, cell)
        if computed == published:
            out.matched.append(cell)
        else:
            out.deviations.append(Discrepancy(cell, published, computed, _EXPLANATIONS.get(cell, "")))
    return out
