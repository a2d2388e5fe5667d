"""Experiment configuration: INI-style file, presets, flag overrides.

Precedence is defaults < config file < ``--set section.key=value`` < the
dedicated CLI flags. The config hash covers only semantic fields (not
seeds, transport or output paths), so records from re-runs and from both
transports group together.
"""

from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import asdict, dataclass, field

from .nets import BODY_PRESETS, TASK_KINDS, BodyConfig

STRATEGIES = ("centralized", "fl", "sl", "festa-stl", "festa-mtl")


class ConfigError(Exception):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field_name = field_name


@dataclass
class TaskSettings:
    kind: str
    clients: int
    optimizer: str
    schedule: str
    max_lr: float
    anneal_period: int | None = None
    loss_weight: float = 1.0
    partition: str = "iid"
    n_train: int = 400
    n_val: int = 60
    n_test: int = 120


# Desk-scale defaults; optimizer and schedule kinds per task follow the
# full-scale recipe (SGD+cosine for classification, Adam for the dense
# tasks), learning rates are retuned for the toy dimensions.
DEFAULT_TASKS = {
    "classification": TaskSettings(
        kind="classification", clients=6, optimizer="sgd",
        schedule="warmup-cosine", max_lr=0.3, loss_weight=1.0,
        partition="noniid", n_train=3000, n_val=300, n_test=600),
    "segmentation": TaskSettings(
        kind="segmentation", clients=2, optimizer="adam",
        schedule="warmup-cosine-annealing", max_lr=0.01, loss_weight=2.0,
        partition="iid", n_train=400, n_val=60, n_test=120),
    "detection": TaskSettings(
        kind="detection", clients=2, optimizer="adam",
        schedule="warmup-constant", max_lr=0.005, loss_weight=2.0,
        partition="iid", n_train=400, n_val=60, n_test=120),
}

# Full-scale hyperparameters (head/tail lr per task, body lr 0.0005,
# 12000 rounds, averaging per 100, warmup 500).
FULLSCALE_TASK_LRS = {"classification": 0.0005, "segmentation": 0.002,
                      "detection": 0.00002}


@dataclass
class ExperimentConfig:
    strategy: str = "festa-stl"
    tasks: list[TaskSettings] = field(default_factory=list)
    body: BodyConfig = BODY_PRESETS["toy"]
    rounds: int = 600
    avg_period: int = 10  # 0 disables averaging
    warmup: int = 25
    scheme: str = "one-step"
    joint_rounds: int | None = None
    alt_block: int | None = None
    batch: int = 2
    clip_norm: float | None = 1.0
    body_lr: float = 0.3
    body_schedule: str = "warmup-cosine"
    body_optimizer: str = "sgd"
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    transport: str = "inproc"
    tcp_host: str = "127.0.0.1"
    tcp_port: int = 0
    timeout: float = 30.0
    outdir: str = "results"
    weighted_avg: bool = False
    lambda_everywhere: bool = False
    track_body_hash: bool = True
    label: str = ""

    def semantic_dict(self) -> dict:
        d = asdict(self)
        for k in ("seeds", "transport", "tcp_host", "tcp_port", "timeout", "outdir"):
            d.pop(k)
        return d

    def config_hash(self) -> str:
        blob = json.dumps(self.semantic_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    @property
    def total_clients(self) -> int:
        return sum(t.clients for t in self.tasks)

    def client_map(self) -> dict[int, tuple[int, int]]:
        """Global client id -> (task index, local index)."""
        out = {}
        cid = 0
        for ti, t in enumerate(self.tasks):
            for local in range(t.clients):
                out[cid] = (ti, local)
                cid += 1
        return out


def _default_tasks_for(strategy: str) -> list[TaskSettings]:
    import copy

    if strategy == "festa-mtl":
        return [copy.deepcopy(DEFAULT_TASKS[k]) for k in TASK_KINDS]
    return [copy.deepcopy(DEFAULT_TASKS["classification"])]


def validate(cfg: ExperimentConfig) -> ExperimentConfig:
    if cfg.strategy not in STRATEGIES:
        raise ConfigError("run.strategy", f"must be one of {STRATEGIES}")
    if not cfg.tasks:
        raise ConfigError("task", "at least one task required")
    if cfg.strategy in ("centralized", "fl") and len(cfg.tasks) > 1:
        raise ConfigError("run.strategy", f"{cfg.strategy} supports a single task")
    if cfg.strategy == "festa-mtl" and len(cfg.tasks) < 2:
        raise ConfigError("run.strategy", "festa-mtl needs at least two tasks")
    if cfg.rounds < 1:
        raise ConfigError("run.rounds", "must be >= 1")
    if cfg.avg_period < 0:
        raise ConfigError("run.avg_period", "must be >= 0")
    if cfg.batch < 1:
        raise ConfigError("run.batch", "must be >= 1")
    if not 0 <= cfg.warmup <= cfg.rounds:
        raise ConfigError("run.warmup", "must lie within [0, rounds]")
    if cfg.scheme not in ("one-step", "two-step", "alternating"):
        raise ConfigError("run.scheme", "must be one-step, two-step or alternating")
    if cfg.strategy in ("centralized", "fl", "sl") and cfg.scheme != "one-step":
        raise ConfigError("run.scheme",
                          f"{cfg.strategy} trains all parts jointly (one-step only)")
    if cfg.scheme == "two-step":
        j = cfg.rounds // 2 if cfg.joint_rounds is None else cfg.joint_rounds
        if not 0 <= j <= cfg.rounds:
            raise ConfigError("run.joint_rounds", f"invalid split {j}/{cfg.rounds}")
        cfg.joint_rounds = j
    if cfg.scheme == "alternating" and cfg.alt_block is None:
        cfg.alt_block = max(cfg.avg_period, 1)
    if cfg.transport not in ("inproc", "tcp"):
        raise ConfigError("run.transport", "must be inproc or tcp")
    if not cfg.seeds:
        raise ConfigError("run.seeds", "at least one seed required")
    for t in cfg.tasks:
        prefix = f"task.{t.kind}"
        if t.kind not in TASK_KINDS:
            raise ConfigError(prefix, f"unknown task kind {t.kind!r}")
        if t.clients < 1:
            raise ConfigError(f"{prefix}.clients", "must be >= 1")
        if t.kind in ("segmentation", "detection") and cfg.body.tokens != 16:
            raise ConfigError("body.tokens",
                              "dense toy tasks require a 16-token body")
        if t.partition == "noniid":
            if t.kind != "classification":
                raise ConfigError(f"{prefix}.partition",
                                  "non-IID split is defined for classification")
            if t.clients not in (1, 6):
                raise ConfigError(f"{prefix}.clients",
                                  "the default non-IID skew is a 6-client plan "
                                  "(or 1 for the degenerate case); use iid otherwise")
        elif t.partition != "iid":
            raise ConfigError(f"{prefix}.partition", "must be iid or noniid")
        if t.n_train < t.clients * cfg.batch:
            raise ConfigError(f"{prefix}.n_train", "too small for client batches")
        if t.schedule == "warmup-cosine-annealing" and t.anneal_period is None:
            t.anneal_period = max(cfg.rounds // 6, 1)
    if cfg.strategy == "sl" and cfg.avg_period:
        cfg.avg_period = 0  # split learning never unifies
    return cfg


def _parse_scalar(text: str):
    t = text.strip()
    low = t.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    if low in ("none", ""):
        return None
    try:
        return int(t)
    except ValueError:
        pass
    try:
        return float(t)
    except ValueError:
        return t


def _coerce(obj, name: str, value):
    if not hasattr(obj, name):
        raise ConfigError(name, "unknown option")
    current = getattr(obj, name)
    if name == "seeds":
        if isinstance(value, str):
            return [int(s) for s in value.split(",") if s.strip()]
        return [int(value)]
    if isinstance(current, bool):
        if isinstance(value, bool):
            return value
        raise ConfigError(name, f"expected a boolean, got {value!r}")
    if isinstance(current, int) and value is not None and not isinstance(value, bool):
        return int(value)
    if isinstance(current, float) and value is not None:
        return float(value)
    return value


def build_config(file_path: str | None = None,
                 overrides: list[str] | None = None) -> ExperimentConfig:
    """Assemble a validated config from an optional file plus overrides
    ('section.key=value' strings; section 'run', 'body' or 'task.<kind>')."""
    sections: dict[str, dict[str, object]] = {"run": {}, "body": {}}
    if file_path:
        parser = configparser.ConfigParser()
        read = parser.read(file_path)
        if not read:
            raise ConfigError("config", f"cannot read {file_path}")
        for section in parser.sections():
            sections.setdefault(section, {})
            for key, value in parser.items(section):
                sections[section][key] = _parse_scalar(value)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError("--set", f"expected section.key=value, got {item!r}")
        key, _, value = item.partition("=")
        if "." not in key:
            raise ConfigError("--set", f"expected section.key=value, got {item!r}")
        section, _, name = key.strip().rpartition(".")
        sections.setdefault(section, {})[name] = _parse_scalar(value)
    return _config_from_sections(sections)


def _config_from_sections(sections: dict[str, dict[str, object]]) -> ExperimentConfig:
    cfg = ExperimentConfig()
    run = dict(sections.get("run", {}))
    strategy = run.get("strategy", cfg.strategy)
    cfg.strategy = str(strategy)
    if cfg.strategy == "festa-mtl" and "scheme" not in run:
        run["scheme"] = "two-step"
    cfg.tasks = _default_tasks_for(cfg.strategy)
    explicit = run.pop("tasks", None)
    if explicit:
        kinds = [k.strip() for k in str(explicit).split(",") if k.strip()]
        import copy
        cfg.tasks = []
        for k in kinds:
            if k not in DEFAULT_TASKS:
                raise ConfigError("run.tasks", f"unknown task kind {k!r}")
            cfg.tasks.append(copy.deepcopy(DEFAULT_TASKS[k]))
    for name, value in run.items():
        setattr(cfg, name, _coerce(cfg, name, value))
    body = dict(sections.get("body", {}))
    preset = body.pop("preset", None)
    body_kw = {}
    if preset:
        if preset not in BODY_PRESETS:
            raise ConfigError("body.preset", f"unknown preset {preset!r}")
        base = BODY_PRESETS[preset]
        body_kw = dict(layers=base.layers, heads=base.heads, dim=base.dim,
                       tokens=base.tokens, mlp_ratio=base.mlp_ratio,
                       pos_embed=base.pos_embed)
    for name in ("layers", "heads", "dim", "tokens", "mlp_ratio", "pos_embed"):
        if name in body:
            body_kw[name] = body.pop(name)
    for name in ("body_lr", "body_schedule", "body_optimizer"):
        if name in body:
            setattr(cfg, name, _coerce(cfg, name, body.pop(name)))
    if body:
        raise ConfigError("body", f"unknown option(s) {sorted(body)}")
    if body_kw:
        defaults = cfg.body
        merged = dict(layers=defaults.layers, heads=defaults.heads, dim=defaults.dim,
                      tokens=defaults.tokens, mlp_ratio=defaults.mlp_ratio,
                      pos_embed=defaults.pos_embed)
        merged.update(body_kw)
        try:
            cfg.body = BodyConfig(**merged)
        except Exception as e:
            raise ConfigError("body", str(e)) from None
    for section, values in sections.items():
        if not section.startswith("task."):
            continue
        kind = section[len("task."):]
        task = next((t for t in cfg.tasks if t.kind == kind), None)
        if task is None:
            raise ConfigError(section, f"task {kind!r} not active for {cfg.strategy}")
        for name, value in values.items():
            if not hasattr(task, name):
                raise ConfigError(f"{section}.{name}", "unknown option")
            current = getattr(task, name)
            if isinstance(current, bool):
                value = bool(value)
            elif isinstance(current, int) and value is not None:
                value = int(value)
            elif isinstance(current, float) and value is not None:
                value = float(value)
            setattr(task, name, value)
    return validate(cfg)


def apply_fullscale(cfg: ExperimentConfig) -> ExperimentConfig:
    """Switch a config to the full-scale regime (for completeness; these
    runs are far beyond desk time budgets)."""
    cfg.rounds = 12000
    cfg.avg_period = 100
    cfg.warmup = 500
    cfg.body = BODY_PRESETS["full"]
    cfg.body_lr = 0.0005
    for t in cfg.tasks:
        t.max_lr = FULLSCALE_TASK_LRS[t.kind]
        if t.kind == "segmentation":
            t.anneal_period = 2000 if cfg.strategy != "festa-mtl" else 1000
    if cfg.scheme == "two-step":
        cfg.joint_rounds = 6000
    return validate(cfg)


def expand_preset(name: str, base_file: str | None,
                  overrides: list[str] | None) -> list[ExperimentConfig]:
    """Named presets; sweep presets return one config per point."""
    if name == "desk":
        return [build_config(base_file, overrides)]
    if name == "fullscale":
        return [apply_fullscale(build_config(base_file, overrides))]
    if name == "avg-period-ablation":
        out = []
        for k in (1, 10, 100):
            cfg = build_config(base_file, overrides)
            cfg.avg_period = k
            cfg.label = f"avg_period={k}"
            out.append(validate(cfg))
        return out
    if name == "bodycap-ablation":
        out = []
        for preset in ("small", "medium", "large"):
            ov = list(overrides or [])
            ov.insert(0, f"body.preset={preset}")
            cfg = build_config(base_file, ov)
            cfg.label = f"body={preset}"
            out.append(cfg)
        return out
    if name == "scheme-ablation":
        out = []
        for scheme in ("one-step", "alternating", "two-step"):
            ov = list(overrides or [])
            ov.insert(0, f"run.scheme={scheme}")
            cfg = build_config(base_file, ov)
            cfg.label = f"scheme={scheme}"
            out.append(cfg)
        return out
    raise ConfigError("--preset", f"unknown preset {name!r}")
