"""Named parameter collections: the unit of averaging, syncing and checkpointing."""

from __future__ import annotations

import hashlib

import numpy as np

from .tensor import DimensionError, as_f32


class ParamSet:
    """Ordered name -> (value, grad) float32 pairs with a role tag.

    Iteration order is insertion order, which the builders keep identical
    across processes for a given architecture config; the wire blob format
    and FedAvg both rely on that.
    """

    def __init__(self, role: str, task_id: int | None = None):
        self.role = role
        self.task_id = task_id
        self._values: dict[str, np.ndarray] = {}
        self._grads: dict[str, np.ndarray] = {}

    def add(self, name: str, value) -> None:
        if name in self._values:
            raise ValueError(f"duplicate parameter name {name!r}")
        v = as_f32(value)
        self._values[name] = v
        self._grads[name] = np.zeros_like(v)

    def names(self) -> list[str]:
        return list(self._values)

    def value(self, name: str) -> np.ndarray:
        return self._values[name]

    def grad(self, name: str) -> np.ndarray:
        return self._grads[name]

    def items(self):
        return self._values.items()

    def __len__(self):
        return len(self._values)

    def __contains__(self, name):
        return name in self._values

    @property
    def n_elements(self) -> int:
        return sum(v.size for v in self._values.values())

    def accumulate_grad(self, name: str, g: np.ndarray) -> None:
        grad = self._grads[name]
        if g.shape != grad.shape:
            raise DimensionError(
                f"gradient shape {g.shape} != parameter shape {grad.shape} for {name!r}")
        grad += g

    def zero_grads(self) -> None:
        for g in self._grads.values():
            g.fill(0.0)

    def set_values(self, source: "ParamSet | dict[str, np.ndarray]") -> None:
        """Overwrite values in place (bitwise copy); shapes must match."""
        items = source.items() if isinstance(source, ParamSet) else source.items()
        for name, v in items:
            dst = self._values.get(name)
            if dst is None or dst.shape != v.shape:
                raise DimensionError(f"cannot assign parameter {name!r}")
            np.copyto(dst, v)

    def set_grads(self, grads: dict[str, np.ndarray]) -> None:
        for name, g in grads.items():
            np.copyto(self._grads[name], g)

    def copy_values(self) -> dict[str, np.ndarray]:
        return {name: v.copy() for name, v in self._values.items()}

    def copy_grads(self) -> dict[str, np.ndarray]:
        return {name: g.copy() for name, g in self._grads.items()}

    def clone(self) -> "ParamSet":
        out = ParamSet(self.role, self.task_id)
        for name, v in self._values.items():
            out.add(name, v.copy())
        return out

    def value_hash(self) -> str:
        h = hashlib.sha256()
        for name, v in self._values.items():
            h.update(name.encode())
            h.update(v.tobytes())
        return h.hexdigest()

    def global_grad_norm(self) -> float:
        total = 0.0
        for g in self._grads.values():
            total += float(np.dot(g.reshape(-1), g.reshape(-1)))
        return total ** 0.5

    def __repr__(self):
        return f"ParamSet(role={self.role!r}, entries={len(self)}, elements={self.n_elements})"


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Truncated normal at two standard deviations, rejection-sampled."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return (out * std).astype(np.float32)


def save_paramset(path, ps: ParamSet) -> None:
    from . import wire

    with open(path, "wb") as f:
        f.write(wire.encode_blob(ps.items()))


def load_paramset(path, role: str = "checkpoint", task_id: int | None = None) -> ParamSet:
    from . import wire

    with open(path, "rb") as f:
        entries = wire.decode_blob(f.read())
    ps = ParamSet(role, task_id)
    for name, value in entries:
        ps.add(name, value)
    return ps
