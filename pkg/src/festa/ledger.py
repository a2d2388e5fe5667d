"""Byte/element accounting for wire traffic, split by direction and category.

Data categories count payload f32 elements only (bytes = 4 x elements);
frame headers, control payloads and tensor shape prefixes go to a separate
overhead counter. WEIGHTS frames with round 0 are administrative (initial
distribution, post-run collection) and land in the setup counter instead of
the steady-state parameter counters.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

from . import wire
from .wire import Frame, MsgType

CLIENT_TO_SERVER = "client_to_server"
SERVER_TO_CLIENT = "server_to_client"
DIRECTIONS = (CLIENT_TO_SERVER, SERVER_TO_CLIENT)
CATEGORIES = ("feature", "gradient", "parameter")

_CATEGORY_OF = {
    MsgType.FEAT: "feature",
    MsgType.BODY_OUT: "feature",
    MsgType.FEAT_GRAD: "gradient",
    MsgType.BODY_OUT_GRAD: "gradient",
    MsgType.WEIGHTS: "parameter",
}


@dataclass
class FlowCounter:
    elements: int = 0
    bytes: int = 0
    frames: int = 0

    def add(self, elements: int) -> None:
        self.elements += elements
        self.bytes += 4 * elements
        self.frames += 1

    def as_tuple(self):
        return (self.elements, self.bytes, self.frames)


class CostLedger:
    def __init__(self):
        self.flows: dict[tuple[str, str], FlowCounter] = {
            (d, c): FlowCounter() for d in DIRECTIONS for c in CATEGORIES}
        self.setup = FlowCounter()
        self.overhead_bytes = 0
        self.overhead_frames = 0

    def record(self, direction: str, frame: Frame) -> None:
        elements = wire.payload_elements(frame.msg_type, frame.payload)
        self.overhead_bytes += wire.HEADER_LEN + len(frame.payload) - 4 * elements
        self.overhead_frames += 1
        if frame.msg_type == MsgType.CONTROL:
            return
        if frame.msg_type == MsgType.WEIGHTS and frame.round == 0:
            self.setup.add(elements)
            return
        self.flows[(direction, _CATEGORY_OF[frame.msg_type])].add(elements)

    def elements(self, direction: str, category: str) -> int:
        return self.flows[(direction, category)].elements

    def totals(self) -> dict:
        return {
            "flows": {f"{d}/{c}": self.flows[(d, c)].as_tuple()
                      for d in DIRECTIONS for c in CATEGORIES},
            "setup": self.setup.as_tuple(),
            "overhead_bytes": self.overhead_bytes,
            "overhead_frames": self.overhead_frames,
        }

    def snapshot(self) -> "CostLedger":
        out = CostLedger()
        for key, fc in self.flows.items():
            out.flows[key] = FlowCounter(fc.elements, fc.bytes, fc.frames)
        out.setup = FlowCounter(self.setup.elements, self.setup.bytes, self.setup.frames)
        out.overhead_bytes = self.overhead_bytes
        out.overhead_frames = self.overhead_frames
        return out

    def bytes_since(self, snap: "CostLedger") -> dict[str, int]:
        """Per-category byte deltas (both directions summed) since a snapshot."""
        out = {}
        for c in CATEGORIES:
            out[c] = sum(self.flows[(d, c)].bytes - snap.flows[(d, c)].bytes
                         for d in DIRECTIONS)
        out["setup"] = self.setup.bytes - snap.setup.bytes
        out["overhead"] = self.overhead_bytes - snap.overhead_bytes
        return out

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["direction", "category", "elements", "bytes", "frames"])
            for d in DIRECTIONS:
                for c in CATEGORIES:
                    fc = self.flows[(d, c)]
                    w.writerow([d, c, fc.elements, fc.bytes, fc.frames])
            w.writerow(["any", "setup", self.setup.elements, self.setup.bytes,
                        self.setup.frames])
            w.writerow(["any", "overhead", "", self.overhead_bytes,
                        self.overhead_frames])

    def __eq__(self, other):
        if not isinstance(other, CostLedger):
            return NotImplemented
        return self.totals() == other.totals()
