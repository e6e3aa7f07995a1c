"""Sparsity metrics over recorded routing traces, FLOPs accounting, and
deterministic report emission."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

from .tensor import ContractError

PHASES = ("prefill", "decode")
TRACE_HEADER = ["sequence_id", "position", "layer", "rank", "expert_id", "mask_bit", "phase", "token_id"]
GROUP_KEYS = ("overall", "layer", "token_position", "phase", "token_id", "token_layer")


class SparsityTrace:
    """Long-format record of routing decisions: one row per candidate rank.

    Every (sequence, position, layer) cell carries exactly K rows, rank 1
    being the highest-weight candidate. ``expert_id`` is -1 for slots that
    route to nothing (null experts); ``mask_bit`` says whether the slot
    actually executed.
    """

    def __init__(self):
        self.sequence_id: list[int] = []
        self.position: list[int] = []
        self.layer: list[int] = []
        self.rank: list[int] = []
        self.expert_id: list[int] = []
        self.mask_bit: list[int] = []
        self.phase: list[str] = []
        self.token_id: list[int] = []

    def __len__(self) -> int:
        return len(self.rank)

    def record_cell(self, sequence_id, position, layer, expert_ids, mask_bits, phase, token_id):
        if phase not in PHASES:
            raise ContractError(f"unknown phase {phase!r}")
        for r, (eid, bit) in enumerate(zip(expert_ids, mask_bits), start=1):
            self.sequence_id.append(int(sequence_id))
            self.position.append(int(position))
            self.layer.append(int(layer))
            self.rank.append(r)
            self.expert_id.append(int(eid))
            self.mask_bit.append(int(bit))
            self.phase.append(phase)
            self.token_id.append(int(token_id))

    def arrays(self) -> dict[str, np.ndarray]:
        return {
            "sequence_id": np.asarray(self.sequence_id, dtype=np.int64),
            "position": np.asarray(self.position, dtype=np.int64),
            "layer": np.asarray(self.layer, dtype=np.int64),
            "rank": np.asarray(self.rank, dtype=np.int64),
            "expert_id": np.asarray(self.expert_id, dtype=np.int64),
            "mask_bit": np.asarray(self.mask_bit, dtype=np.int64),
            "phase": np.asarray(self.phase),
            "token_id": np.asarray(self.token_id, dtype=np.int64),
        }

    @property
    def k(self) -> int:
        return max(self.rank) if self.rank else 0

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(TRACE_HEADER)
            for i in range(len(self)):
                w.writerow(
                    [
                        self.sequence_id[i],
                        self.position[i],
                        self.layer[i],
                        self.rank[i],
                        self.expert_id[i],
                        self.mask_bit[i],
                        self.phase[i],
                        self.token_id[i],
                    ]
                )

    @classmethod
    def from_csv(cls, path) -> "SparsityTrace":
        trace = cls()
        with open(path, newline="") as f:
            reader = csv.reader(f)
            header = next(reader, None)
            if header != TRACE_HEADER:
                raise ContractError(f"unexpected trace header in {path}")
            for lineno, row in enumerate(reader, start=2):
                if len(row) != len(TRACE_HEADER):
                    raise ContractError(f"malformed trace row {lineno} in {path}")
                try:
                    trace.sequence_id.append(int(row[0]))
                    trace.position.append(int(row[1]))
                    trace.layer.append(int(row[2]))
                    trace.rank.append(int(row[3]))
                    trace.expert_id.append(int(row[4]))
                    trace.mask_bit.append(int(row[5]))
                    trace.token_id.append(int(row[7]))
                except ValueError:
                    raise ContractError(f"malformed trace row {lineno} in {path}")
                if row[6] not in PHASES:
                    raise ContractError(f"malformed trace row {lineno} in {path}")
                trace.phase.append(row[6])
        return trace


def _require_nonempty(trace: SparsityTrace) -> dict[str, np.ndarray]:
    if len(trace) == 0:
        raise ContractError("empty trace")
    return trace.arrays()


def _cell_index(arr: dict[str, np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Unique (sequence, position, layer) cells and each row's cell number."""
    keys = np.stack([arr["sequence_id"], arr["position"], arr["layer"]], axis=1)
    uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
    return uniq, inverse


def avg_k(trace: SparsityTrace, group_by: str = "overall") -> dict:
    """Mean activated experts per (token, layer) cell, grouped.

    Group keys: overall, layer, token_position, phase, token_id, and
    token_layer (per-cell counts keyed by (sequence, position, layer),
    the heatmap data).
    """
    if group_by not in GROUP_KEYS:
        raise ContractError(f"unknown group key {group_by!r}; valid: {GROUP_KEYS}")
    arr = _require_nonempty(trace)
    cells, inverse = _cell_index(arr)
    counts = np.bincount(inverse, weights=arr["mask_bit"].astype(np.float64))

    if group_by == "token_layer":
        return {
            (int(s), int(p), int(l)): float(c)
            for (s, p, l), c in zip(cells, counts)
        }
    if group_by == "overall":
        return {"overall": float(counts.mean())}

    column = {"layer": 2, "token_position": 1}.get(group_by)
    if column is not None:
        cell_keys = cells[:, column]
    else:
        # phase / token_id are rank-row attributes, constant within a cell
        first_row = np.zeros(len(cells), dtype=np.int64)
        first_row[inverse[::-1]] = np.arange(len(arr["rank"]))[::-1]
        field = arr["phase"] if group_by == "phase" else arr["token_id"]
        cell_keys = field[first_row]
    out: dict = {}
    for key in np.unique(cell_keys):
        sel = cell_keys == key
        label = str(key) if group_by == "phase" else int(key)
        out[label] = float(counts[sel].mean())
    return out


def position_mask_prob(trace: SparsityTrace) -> dict[int, float]:
    """Per routing rank, the fraction of cells whose slot was masked off."""
    arr = _require_nonempty(trace)
    out = {}
    for rank in range(1, trace.k + 1):
        sel = arr["rank"] == rank
        out[rank] = float((arr["mask_bit"][sel] == 0).mean())
    return out


def rank_extremes(trace: SparsityTrace) -> dict[int, tuple[int | None, int | None]]:
    """Per layer: (lowest rank ever masked, highest rank ever kept).

    Overlap (min_masked <= max_kept) means masking ignores routing rank.
    A layer that never masks reports None for the masked side.
    """
    arr = _require_nonempty(trace)
    out = {}
    for layer in np.unique(arr["layer"]):
        sel = arr["layer"] == layer
        masked = arr["rank"][sel & (arr["mask_bit"] == 0)]
        kept = arr["rank"][sel & (arr["mask_bit"] == 1)]
        out[int(layer)] = (
            int(masked.min()) if masked.size else None,
            int(kept.max()) if kept.size else None,
        )
    return out


def expert_load(trace: SparsityTrace) -> tuple[dict[int, float], dict[int, float]]:
    """Per-expert fraction of routed slots, before and after masking.

    Null slots (expert_id -1) are not routed work and are excluded. Each
    distribution sums to 1 when any slot qualifies.
    """
    arr = _require_nonempty(trace)
    routed = arr["expert_id"] >= 0
    kept = routed & (arr["mask_bit"] == 1)

    def _dist(sel):
        ids = arr["expert_id"][sel]
        if ids.size == 0:
            return {}
        counts = np.bincount(ids)
        return {int(e): float(c) / ids.size for e, c in enumerate(counts) if c}

    return _dist(routed), _dist(kept)


# ---------------------------------------------------------------------------
# FLOPs accounting
# ---------------------------------------------------------------------------


@dataclass
class FlopsModel:
    d_h: int
    d_ff: int
    num_experts: int
    top_k: int
    num_shared: int
    avg_k: float

    def __post_init__(self):
        if not 0.0 <= self.avg_k <= self.top_k:
            raise ContractError("avg_k must lie in [0, K]")


@dataclass
class FlopsReport:
    routed_flops_per_token_full: float
    routed_flops_per_token_actual: float
    routed_reduction: float
    layer_flops_per_token_full: float
    layer_flops_per_token_actual: float
    layer_reduction: float
    router_overhead_flops: float  # primary + mask router matmuls, per token


def flops_reduction(model: FlopsModel) -> FlopsReport:
    """Per-token FLOPs with multiply-adds counted as 2 FLOPs.

    One expert costs three d_h*d_ff matmuls. The routed reduction is the
    algebraic identity 1 - avg_k/K; the whole-layer numbers fold the shared
    experts (unmaskable compute) into both sides. Router matmul overhead is
    reported separately: it is what masking adds on top of the layer.
    """
    per_expert = 2.0 * 3.0 * model.d_h * model.d_ff
    routed_full = model.top_k * per_expert
    routed_actual = model.avg_k * per_expert
    layer_full = routed_full + model.num_shared * per_expert
    layer_actual = routed_actual + model.num_shared * per_expert
    return FlopsReport(
        routed_flops_per_token_full=routed_full,
        routed_flops_per_token_actual=routed_actual,
        routed_reduction=1.0 - model.avg_k / model.top_k,
        layer_flops_per_token_full=layer_full,
        layer_flops_per_token_actual=layer_actual,
        layer_reduction=1.0 - layer_actual / layer_full,
        router_overhead_flops=2.0 * 2.0 * model.d_h * model.num_experts,
    )


# ---------------------------------------------------------------------------
# report emission
# ---------------------------------------------------------------------------

REPORT_HEADER = ["metric", "group", "value"]


def _group_label(key) -> str:
    if isinstance(key, tuple):
        return "/".join(str(k) for k in key)
    return str(key)


def emit_report(metrics: dict[str, dict], fmt: str, path) -> None:
    """Write {metric: {group: value}} as CSV or JSON.

    Field order is sorted and stable, so identical metrics produce byte-
    identical files. ``parse_report`` inverts the CSV form.
    """
    if fmt == "csv":
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(REPORT_HEADER)
            for metric in sorted(metrics):
                groups = metrics[metric]
                for key in sorted(groups, key=_group_label):
                    value = groups[key]
                    w.writerow([metric, _group_label(key), "" if value is None else repr(float(value))])
    elif fmt == "json":
        payload = {
            metric: {
                _group_label(k): (None if v is None else float(v))
                for k, v in groups.items()
            }
            for metric, groups in metrics.items()
        }
        with open(path, "w") as f:
            json.dump(payload, f, sort_keys=True, indent=2)
            f.write("\n")
    else:
        raise ContractError(f"unknown report format {fmt!r}")


def parse_report(path) -> dict[str, dict[str, float | None]]:
    out: dict[str, dict] = {}
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        if header != REPORT_HEADER:
            raise ContractError("unexpected report header")
        for metric, group, value in reader:
            out.setdefault(metric, {})[group] = None if value == "" else float(value)
    return out
