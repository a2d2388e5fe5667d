"""Split-model zoo: task heads, the shared transformer body, task tails.

Every head maps one raw sample to a token block of shape (tokens+1, dim)
with a learned CLS row prepended at index 0. The body is a pre-norm
transformer encoder that preserves block shape. Tails route by task: the
classification tail reads only the CLS row, the dense tails read only the
non-CLS rows.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import CLS_DIM, PATCH_DIM
from .params import ParamSet, trunc_normal

TASK_KINDS = ("classification", "segmentation", "detection")
TASK_INPUT_DIMS = {"classification": CLS_DIM, "segmentation": PATCH_DIM,
                   "detection": PATCH_DIM}


@dataclass(frozen=True)
class BodyConfig:
    layers: int
    heads: int
    dim: int
    tokens: int  # sequence length before the CLS row
    mlp_ratio: int = 4
    pos_embed: bool = True

    def __post_init__(self):
        if self.dim % self.heads != 0:
            raise T.DimensionError(f"dim {self.dim} not divisible by heads {self.heads}")


BODY_PRESETS = {
    "toy": BodyConfig(layers=2, heads=4, dim=32, tokens=16),
    "small": BodyConfig(layers=4, heads=4, dim=256, tokens=16),
    "medium": BodyConfig(layers=8, heads=8, dim=512, tokens=16),
    # full-capacity encoder at desk token count, for the capacity ablation
    "large": BodyConfig(layers=12, heads=12, dim=768, tokens=16),
    # the full-scale feature contract: 257 x 768 blocks
    "full": BodyConfig(layers=12, heads=12, dim=768, tokens=256),
}


class TransformerBody:
    """Pre-norm encoder stack; optional learned positions on non-CLS rows."""

    def __init__(self, cfg: BodyConfig, rng: np.random.Generator):
        self.cfg = cfg
        ps = ParamSet("body")
        if cfg.pos_embed:
            ps.add("pos", trunc_normal(rng, (cfg.tokens, cfg.dim)))
        d, h = cfg.dim, cfg.mlp_ratio * cfg.dim
        for l in range(cfg.layers):
            p = f"l{l}."
            ps.add(p + "ln1.g", np.ones(d, dtype=np.float32))
            ps.add(p + "ln1.b", np.zeros(d, dtype=np.float32))
            for nm in ("wq", "wk", "wv", "wo"):
                ps.add(p + nm, trunc_normal(rng, (d, d)))
            for nm in ("bq", "bk", "bv", "bo"):
                ps.add(p + nm, np.zeros(d, dtype=np.float32))
            ps.add(p + "ln2.g", np.ones(d, dtype=np.float32))
            ps.add(p + "ln2.b", np.zeros(d, dtype=np.float32))
            ps.add(p + "w1", trunc_normal(rng, (d, h)))
            ps.add(p + "b1", np.zeros(h, dtype=np.float32))
            ps.add(p + "w2", trunc_normal(rng, (h, d)))
            ps.add(p + "b2", np.zeros(d, dtype=np.float32))
        ps.add("lnf.g", np.ones(d, dtype=np.float32))
        ps.add("lnf.b", np.zeros(d, dtype=np.float32))
        self.params = ps

    def forward(self, g: T.Graph, block: T.Var, trace: list | None = None) -> T.Var:
        """Map a (tokens+1, dim) block through the encoder; shape-preserving.

        When given, `trace` collects the attention-probability Vars of every
        softmax, in layer-then-head order.
        """
        cfg = self.cfg
        if block.shape != (cfg.tokens + 1, cfg.dim):
            raise T.DimensionError(
                f"body expects block {(cfg.tokens + 1, cfg.dim)}, got {block.shape}")
        P = lambda name: g.param(self.params, name)
        x = block
        if cfg.pos_embed:
            cls_row = T.narrow(x, 0, 0, 1)
            rest = T.narrow(x, 0, 1, cfg.tokens)
            x = T.concat([cls_row, T.add(rest, P("pos"))], axis=0)
        n_heads, dh = cfg.heads, cfg.dim // cfg.heads
        inv_sqrt = 1.0 / np.sqrt(dh)
        for l in range(cfg.layers):
            p = f"l{l}."
            h1 = T.layernorm(x, P(p + "ln1.g"), P(p + "ln1.b"))
            q = T.add(T.matmul(h1, P(p + "wq")), P(p + "bq"))
            k = T.add(T.matmul(h1, P(p + "wk")), P(p + "bk"))
            v = T.add(T.matmul(h1, P(p + "wv")), P(p + "bv"))
            outs = []
            for i in range(n_heads):
                qi = T.narrow(q, 1, i * dh, dh)
                ki = T.narrow(k, 1, i * dh, dh)
                vi = T.narrow(v, 1, i * dh, dh)
                scores = T.scale(T.matmul_t(qi, ki), inv_sqrt)
                probs = T.softmax(scores, axis=-1)
                if trace is not None:
                    trace.append(probs)
                outs.append(T.matmul(probs, vi))
            att = T.add(T.matmul(T.concat(outs, axis=1), P(p + "wo")), P(p + "bo"))
            x = T.add(x, att)
            h2 = T.layernorm(x, P(p + "ln2.g"), P(p + "ln2.b"))
            m = T.gelu(T.add(T.matmul(h2, P(p + "w1")), P(p + "b1")))
            m = T.add(T.matmul(m, P(p + "w2")), P(p + "b2"))
            x = T.add(x, m)
        return T.layernorm(x, P("lnf.g"), P("lnf.b"))


class ClassificationHead:
    """Two-layer MLP lifted into tokens through a learned per-token bank."""

    def __init__(self, cfg: BodyConfig, input_dim: int, rng: np.random.Generator,
                 task_id: int = 0, hidden: int = 64):
        self.cfg = cfg
        self.input_dim = input_dim
        ps = ParamSet("head", task_id)
        ps.add("fc1.w", trunc_normal(rng, (input_dim, hidden)))
        ps.add("fc1.b", np.zeros(hidden, dtype=np.float32))
        ps.add("fc2.w", trunc_normal(rng, (hidden, cfg.dim)))
        ps.add("fc2.b", np.zeros(cfg.dim, dtype=np.float32))
        # per-token multiplicative bank, initialized near identity
        ps.add("bank", np.float32(1.0) + trunc_normal(rng, (cfg.tokens, cfg.dim)))
        ps.add("cls", trunc_normal(rng, (1, cfg.dim)))
        self.params = ps

    def forward(self, g: T.Graph, x: np.ndarray) -> T.Var:
        if x.shape != (self.input_dim,):
            raise T.DimensionError(
                f"classification head expects ({self.input_dim},), got {x.shape}")
        P = lambda name: g.param(self.params, name)
        xv = g.constant(x.reshape(1, -1))
        u = T.gelu(T.add(T.matmul(xv, P("fc1.w")), P("fc1.b")))
        z = T.add(T.matmul(u, P("fc2.w")), P("fc2.b"))  # (1, dim)
        tokens = T.mul(P("bank"), T.reshape(z, (self.cfg.dim,)))
        return T.concat([P("cls"), tokens], axis=0)


class PatchHead:
    """Shared per-patch linear embedding for the dense tasks."""

    def __init__(self, cfg: BodyConfig, patch_dim: int, rng: np.random.Generator,
                 task_id: int = 0):
        self.cfg = cfg
        self.patch_dim = patch_dim
        ps = ParamSet("head", task_id)
        ps.add("embed.w", trunc_normal(rng, (patch_dim, cfg.dim)))
        ps.add("embed.b", np.zeros(cfg.dim, dtype=np.float32))
        ps.add("cls", trunc_normal(rng, (1, cfg.dim)))
        self.params = ps

    def forward(self, g: T.Graph, patches: np.ndarray) -> T.Var:
        if patches.shape != (self.cfg.tokens, self.patch_dim):
            raise T.DimensionError(
                f"patch head expects {(self.cfg.tokens, self.patch_dim)}, got {patches.shape}")
        P = lambda name: g.param(self.params, name)
        tokens = T.add(T.matmul(g.constant(patches), P("embed.w")), P("embed.b"))
        return T.concat([P("cls"), tokens], axis=0)


class ClassificationTail:
    """Linear read-out of the CLS row only."""

    def __init__(self, cfg: BodyConfig, n_classes: int, rng: np.random.Generator,
                 task_id: int = 0):
        self.cfg = cfg
        self.n_classes = n_classes
        ps = ParamSet("tail", task_id)
        ps.add("w", trunc_normal(rng, (cfg.dim, n_classes)))
        ps.add("b", np.zeros(n_classes, dtype=np.float32))
        self.params = ps

    def forward(self, g: T.Graph, block: T.Var) -> T.Var:
        P = lambda name: g.param(self.params, name)
        cls_row = T.narrow(block, 0, 0, 1)
        return T.reshape(T.add(T.matmul(cls_row, P("w")), P("b")), (self.n_classes,))


class SegmentationTail:
    """Per-token mask logits from the non-CLS rows."""

    def __init__(self, cfg: BodyConfig, rng: np.random.Generator, task_id: int = 1):
        self.cfg = cfg
        ps = ParamSet("tail", task_id)
        ps.add("w", trunc_normal(rng, (cfg.dim, 1)))
        ps.add("b", np.zeros(1, dtype=np.float32))
        self.params = ps

    def forward(self, g: T.Graph, block: T.Var) -> T.Var:
        P = lambda name: g.param(self.params, name)
        rows = T.narrow(block, 0, 1, self.cfg.tokens)
        return T.reshape(T.add(T.matmul(rows, P("w")), P("b")), (self.cfg.tokens,))


class DetectionTail:
    """Mean-pooled non-CLS rows to (x, y, w, h, objectness logit)."""

    OUT = 5

    def __init__(self, cfg: BodyConfig, rng: np.random.Generator, task_id: int = 2):
        self.cfg = cfg
        ps = ParamSet("tail", task_id)
        ps.add("w", trunc_normal(rng, (cfg.dim, self.OUT)))
        ps.add("b", np.zeros(self.OUT, dtype=np.float32))
        self.params = ps

    def forward(self, g: T.Graph, block: T.Var) -> T.Var:
        P = lambda name: g.param(self.params, name)
        rows = T.narrow(block, 0, 1, self.cfg.tokens)
        pool = g.constant(np.full((1, self.cfg.tokens), 1.0 / self.cfg.tokens,
                                  dtype=np.float32))
        pooled = T.matmul(pool, rows)
        return T.reshape(T.add(T.matmul(pooled, P("w")), P("b")), (self.OUT,))


def build_head(task: str, cfg: BodyConfig, input_dim: int, rng: np.random.Generator,
               task_id: int = 0):
    if task == "classification":
        return ClassificationHead(cfg, input_dim, rng, task_id)
    if task in ("segmentation", "detection"):
        return PatchHead(cfg, input_dim, rng, task_id)
    raise ValueError(f"unknown task kind {task!r}")


def build_tail(task: str, cfg: BodyConfig, rng: np.random.Generator,
               task_id: int = 0, n_classes: int = 3):
    if task == "classification":
        return ClassificationTail(cfg, n_classes, rng, task_id)
    if task == "segmentation":
        return SegmentationTail(cfg, rng, task_id)
    if task == "detection":
        return DetectionTail(cfg, rng, task_id)
    raise ValueError(f"unknown task kind {task!r}")
