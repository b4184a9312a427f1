"""Run configuration: a flat JSON object.

Every key is optional; omitted keys take the field defaults of :class:`Config`.
Unknown keys are rejected so that typos never pass silently. ``clients`` is
a list of objects describing where each client's data comes from::

    {"source": "blob_digits", "n_train_per_class": 100, "n_test_per_class": 50,
     "shift": [{"op": "tint", "scale": [1, 0.5, 0.2]}]}

    {"source": "idx", "train_images": "...", "train_labels": "...",
     "test_images": "...", "test_labels": "...", "rgb": true, "pad_to": 32}
"""
import json
from dataclasses import asdict, dataclass, field, fields

from .errors import ConfigError

RULES = ("fedavg", "fedprox", "fednova", "scaffold", "fedlgd")
ARCHS = ("convnet", "mlp")


def _default_clients():
    return [
        {"source": "blob_digits", "shift": []},
        {"source": "blob_digits", "shift": [{"op": "tint", "scale": [1.0, 0.4, 0.2]}]},
        {"source": "blob_digits", "shift": [{"op": "invert"}]},
        {"source": "blob_digits", "shift": [{"op": "noise", "sigma": 0.15}]},
    ]


@dataclass(frozen=True)
class Config:
    clients: list = field(default_factory=_default_clients)
    arch: str = "convnet"
    width: int = 128
    ipc: int = 10
    lam: float = 10.0
    tau_temp: float = 0.07
    mu: float = 0.01
    rule: str = "fedlgd"
    local_epochs: int = 1
    rounds: int = 100
    tau: int = 10
    local_distill_steps: int = 200
    global_distill_steps: int = 2000
    batch_size: int = 32
    lr_model: float = 0.01
    lr_pixel_dm: float = 1.0
    lr_pixel_gm: float = 0.1
    real_batch_per_class: int = 32
    ce_includes_global: bool = True
    con_reduction: str = "mean"
    augment: bool = False
    participation: float = 1.0
    seed: int = 0
    data_seed: object = None
    diag_per_class: int = 25
    output_dir: str = "runs/run"

    def to_json(self):
        """JSON text that ``parse_config_text`` turns back into an equal Config."""
        d = asdict(self)
        out = {JSON_NAMES.get(k, k): v for k, v in d.items()}
        return json.dumps(out, indent=2, sort_keys=True) + "\n"

    def replace(self, **changes):
        d = asdict(self)
        d.update(changes)
        return validate(Config(**d))

    @property
    def effective_data_seed(self):
        return self.seed if self.data_seed is None else self.data_seed


# JSON key -> field name, where they differ ("lambda" is a Python keyword)
JSON_NAMES = {"lam": "lambda"}
FIELD_NAMES = {v: k for k, v in JSON_NAMES.items()}

_CLIENT_KEYS = {
    "blob_digits": {"source", "shift", "n_train_per_class", "n_test_per_class", "side", "num_classes",
                    "clutter", "noise"},
    "idx": {"source", "shift", "train_images", "train_labels", "test_images", "test_labels", "rgb",
            "pad_to", "num_classes"},
}


def _type_ok(value, kind):
    if kind is bool:
        return isinstance(value, bool)
    if kind is int:
        return isinstance(value, int) and not isinstance(value, bool)
    if kind is float:
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    return isinstance(value, kind)


_TYPES = {f.name: f.type for f in fields(Config)}


def validate(cfg):
    for name, tname in _TYPES.items():
        if name == "data_seed":
            v = cfg.data_seed
            if v is not None and not _type_ok(v, int):
                raise ConfigError("data_seed must be an integer or null", "data_seed")
            continue
        if not _type_ok(getattr(cfg, name), tname):
            raise ConfigError(f"{JSON_NAMES.get(name, name)} must be of type {tname.__name__}",
                              JSON_NAMES.get(name, name))
    if cfg.rule not in RULES:
        raise ConfigError(f"rule must be one of {', '.join(RULES)}", "rule")
    if cfg.con_reduction not in ("mean", "sum"):
        raise ConfigError("con_reduction must be 'mean' or 'sum'", "con_reduction")
    if cfg.arch not in ARCHS:
        raise ConfigError(f"arch must be one of {', '.join(ARCHS)}", "arch")
    for name in ("width", "ipc", "batch_size"):
        if getattr(cfg, name) < 1:
            raise ConfigError(f"{name} must be >= 1", name)
    for name in ("local_epochs", "rounds", "tau", "local_distill_steps", "global_distill_steps",
                 "real_batch_per_class", "diag_per_class", "seed"):
        if getattr(cfg, name) < 0:
            raise ConfigError(f"{name} must be >= 0", name)
    for name in ("lam", "mu", "lr_model", "lr_pixel_dm", "lr_pixel_gm"):
        if getattr(cfg, name) < 0:
            raise ConfigError(f"{JSON_NAMES.get(name, name)} must be >= 0", JSON_NAMES.get(name, name))
    if cfg.tau_temp <= 0:
        raise ConfigError("tau_temp must be > 0", "tau_temp")
    if not 0 < cfg.participation <= 1:
        raise ConfigError("participation must be in (0, 1]", "participation")
    if cfg.tau > cfg.rounds:
        raise ConfigError(f"tau ({cfg.tau}) must not exceed rounds ({cfg.rounds})", "tau")
    if cfg.real_batch_per_class < 1 and cfg.local_distill_steps > 0:
        raise ConfigError("real_batch_per_class must be >= 1 when distilling", "real_batch_per_class")
    if not cfg.clients:
        raise ConfigError("at least one client is required", "clients")
    for i, c in enumerate(cfg.clients):
        path = f"clients[{i}]"
        if not isinstance(c, dict):
            raise ConfigError("client entries must be objects", path)
        src = c.get("source", "blob_digits")
        if src not in _CLIENT_KEYS:
            raise ConfigError(f"unknown source {src!r}", f"{path}.source")
        extra = set(c) - _CLIENT_KEYS[src]
        if extra:
            raise ConfigError(f"unknown keys {sorted(extra)}", f"{path}.{sorted(extra)[0]}")
        if not isinstance(c.get("shift", []), list):
            raise ConfigError("shift must be a list of transform objects", f"{path}.shift")
        if src == "idx":
            for k in ("train_images", "train_labels", "test_images", "test_labels"):
                if not isinstance(c.get(k), str):
                    raise ConfigError(f"{k} path is required for idx clients", f"{path}.{k}")
    return cfg


def config_from_dict(obj):
    if not isinstance(obj, dict):
        raise ConfigError("config must be a JSON object", "$")
    known = {JSON_NAMES.get(f.name, f.name) for f in fields(Config)}
    unknown = sorted(set(obj) - known)
    if unknown:
        raise ConfigError(f"unknown key {unknown[0]!r}", unknown[0])
    kwargs = {FIELD_NAMES.get(k, k): v for k, v in obj.items()}
    for k in ("lam", "tau_temp", "mu", "lr_model", "lr_pixel_dm", "lr_pixel_gm", "participation"):
        if k in kwargs and _type_ok(kwargs[k], int):
            kwargs[k] = float(kwargs[k])
    return validate(Config(**kwargs))


def parse_config_text(text):
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"invalid JSON: {e.msg} at line {e.lineno} column {e.colno}", "$") from None
    return config_from_dict(obj)


def parse_config(path):
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as e:
        raise ConfigError(f"cannot read config: {e.strerror}", str(path)) from None
    return parse_config_text(text)
