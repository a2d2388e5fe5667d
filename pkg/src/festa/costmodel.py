"""Closed-form communication-cost model and ledger reconciliation.

Units are caller-chosen element counts (millions for the full-scale
inventory, raw elements for toy reconciliation). Per averaging period of
``avg_period`` rounds, for one client, the published convention is:

* federated learning     total = 2 (Ph + Pb + Pt)
* split learning         total = k (F + G)
* federated split        total = k (F + G) + 2 (Ph + Pt)

where F and G are the per-round one-way feature and gradient element
counts. Parameter totals are bidirectional (upload for averaging plus the
refreshed download); the k(F+G) term equals ONE direction of the
feature/gradient stream, since each direction carries F + G per round
(features up / body outputs down, tail gradients up / head gradients
down). The measured ledger reports both directions; reconciliation maps
each direction's feature+gradient total onto k(F+G).
"""

from __future__ import annotations

from dataclasses import dataclass

from . import ledger as L


@dataclass(frozen=True)
class CostModelInput:
    head_params: float
    body_params: float
    tail_params: float
    feat_elems: float  # per round, one way
    grad_elems: float  # per round, one way
    avg_period: int

    def __post_init__(self):
        for name in ("head_params", "body_params", "tail_params",
                     "feat_elems", "grad_elems"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.avg_period < 1:
            raise ValueError("avg_period must be >= 1")


@dataclass(frozen=True)
class CostBreakdown:
    feature_gradient: float
    parameter: float

    @property
    def total(self) -> float:
        return self.feature_gradient + self.parameter


STRATEGY_ALIASES = {
    "fl": "fl",
    "sl": "sl",
    "festa": "festa",
    "festa-stl": "festa",
    "festa-mtl": "festa",
    "centralized": "centralized",
}


def closed_form_cost(strategy: str, inp: CostModelInput) -> CostBreakdown:
    """Total transmission per client per averaging period (see module doc)."""
    kind = STRATEGY_ALIASES.get(strategy)
    if kind is None:
        raise ValueError(f"unknown strategy {strategy!r}")
    k = inp.avg_period
    fg = k * (inp.feat_elems + inp.grad_elems)
    if kind == "fl":
        return CostBreakdown(0.0, 2.0 * (inp.head_params + inp.body_params
                                         + inp.tail_params))
    if kind == "sl":
        return CostBreakdown(fg, 0.0)
    if kind == "festa":
        return CostBreakdown(fg, 2.0 * (inp.head_params + inp.tail_params))
    return CostBreakdown(0.0, 0.0)  # centralized: nothing crosses the wire


# Full-scale sub-network parameter inventory (millions) per task, plus the
# per-round one-way feature/gradient volume: 2 samples x 257 tokens x 768
# dims = 0.394752M elements each way.
FULL_SCALE_FEAT_M = 2 * 257 * 768 / 1e6
FULL_SCALE_INPUTS = {
    "classification": CostModelInput(13.313, 66.367, 0.002,
                                     FULL_SCALE_FEAT_M, FULL_SCALE_FEAT_M, 100),
    "segmentation": CostModelInput(15.041, 66.367, 7.387,
                                   FULL_SCALE_FEAT_M, FULL_SCALE_FEAT_M, 100),
    "detection": CostModelInput(27.085, 66.367, 19.773,
                                FULL_SCALE_FEAT_M, FULL_SCALE_FEAT_M, 100),
}


@dataclass(frozen=True)
class FlowCheck:
    direction: str
    category: str
    expected: int
    actual: int

    @property
    def ok(self) -> bool:
        return self.expected == self.actual


@dataclass(frozen=True)
class Reconciliation:
    rows: tuple[FlowCheck, ...]
    setup_elements: int
    overhead_bytes: int

    @property
    def ok(self) -> bool:
        return all(r.ok for r in self.rows)

    def mismatches(self) -> list[FlowCheck]:
        return [r for r in self.rows if not r.ok]


def expected_flow_elements(strategy: str, inp: CostModelInput, rounds: int,
                           n_clients: int = 1) -> dict[tuple[str, str], int]:
    """Steady-state element counts per (direction, category) for a run of
    ``rounds`` rounds, summed over clients; round-1 distribution excluded."""
    kind = STRATEGY_ALIASES.get(strategy)
    if kind is None:
        raise ValueError(f"unknown strategy {strategy!r}")
    events = rounds // inp.avg_period if kind in ("fl", "festa") else 0
    f = round(inp.feat_elems)
    g = round(inp.grad_elems)
    per_dir_param = {
        "fl": round(inp.head_params + inp.body_params + inp.tail_params),
        "festa": round(inp.head_params + inp.tail_params),
        "sl": 0,
        "centralized": 0,
    }[kind]
    per_round_feat = 0 if kind in ("fl", "centralized") else f
    per_round_grad = 0 if kind in ("fl", "centralized") else g
    out = {}
    for d in L.DIRECTIONS:
        out[(d, "feature")] = rounds * per_round_feat * n_clients
        out[(d, "gradient")] = rounds * per_round_grad * n_clients
        out[(d, "parameter")] = events * per_dir_param * n_clients
    return out


def ledger_vs_model_multi(ledger: L.CostLedger, specs) -> Reconciliation:
    """Compare a measured ledger against the summed model expectations of
    several (strategy, input, rounds, n_clients) components, e.g. one per
    task of a multi-task run."""
    total = {(d, c): 0 for d in L.DIRECTIONS for c in L.CATEGORIES}
    for strategy, inp, rounds, n_clients in specs:
        for key, v in expected_flow_elements(strategy, inp, rounds, n_clients).items():
            total[key] += v
    rows = tuple(
        FlowCheck(d, c, total[(d, c)], ledger.elements(d, c))
        for d in L.DIRECTIONS for c in L.CATEGORIES)
    return Reconciliation(rows, ledger.setup.elements, ledger.overhead_bytes)


def ledger_vs_model(ledger: L.CostLedger, strategy: str, inp: CostModelInput,
                    rounds: int, n_clients: int = 1) -> Reconciliation:
    """Compare a run's measured ledger against the closed-form model."""
    return ledger_vs_model_multi(ledger, [(strategy, inp, rounds, n_clients)])
