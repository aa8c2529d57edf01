"""Typed run configuration.

Config files are INI-style: shared sections [run], [data], [model] and
[optimizer], plus exactly one method section ([attendout], [vanilla],
[layerdrop], [attn_layerdrop] or [scheduled]) when the method needs
parameters. Unknown sections or keys are hard errors; silent typos are how
ablations die. The fairness hash covers everything shared (method name,
seed and method-specific sections excluded), which is what the comparison
harness checks before trusting a method-vs-method table.
"""

from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass

from .numkernel import ConfigError

METHOD_NONE = "none"
METHOD_ATTENDOUT = "attendout"
METHOD_VANILLA = "vanilla"
METHOD_LAYERDROP = "layerdrop"
METHOD_ATTN_LAYERDROP = "attn_layerdrop"
METHOD_SCHEDULED = "scheduled"

METHODS = (METHOD_NONE, METHOD_ATTENDOUT, METHOD_VANILLA, METHOD_LAYERDROP,
           METHOD_ATTN_LAYERDROP, METHOD_SCHEDULED)

TASK_MAJORITY = "majority_token"
TASK_BRACKETS = "balanced_brackets"


def _float_list(text: str) -> list[float]:
    try:
        return [float(part) for part in text.split(",")]
    except ValueError:
        raise ConfigError(f"expected comma-separated floats, got {text!r}") from None


def _bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("true", "yes", "1"):
        return True
    if lowered in ("false", "no", "0"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


# (type, required, default); default is ignored when required.
_SCHEMA = {
    "run": {
        "method": (str, True, None),
        "seed": (int, True, None),
        "epochs": (int, True, None),
    },
    "data": {
        "task": (str, True, None),
        "n": (int, True, None),
        "seq_len": (int, True, None),
        "vocab": (int, True, None),
        "train_fraction": (float, False, 0.8),
        "dev_fraction": (float, False, 0.1),
        "test_fraction": (float, False, 0.1),
    },
    "model": {
        "layers": (int, True, None),
        "d_model": (int, True, None),
        "d_ff": (int, True, None),
        "heads": (int, True, None),
    },
    "optimizer": {
        "algo": (str, False, "adam"),
        "lr": (float, True, None),
        "momentum": (float, False, 0.0),
        "batch_size": (int, True, None),
    },
    "attendout": {
        "dropout_step": (int, True, None),
        "gnet_lr": (float, True, None),
        "gnet_dim": (int, False, 0),       # 0 means d_model // 2
        "tau": (float, False, 1.0),
        "baseline_decay": (float, False, 0.9),
        "reward": (str, False, "signed"),
        "eval_pool": (str, False, "dev"),
        "eval_slice_fraction": (float, False, 0.1),
    },
    "vanilla": {
        "p": (float, True, None),
        "mode": (str, False, "scores"),
        "rescale": (_bool, False, False),
    },
    "layerdrop": {
        "p": (float, True, None),
    },
    "attn_layerdrop": {
        "p": (float, True, None),
    },
    "scheduled": {
        "p0": (_float_list, False, None),
        "slope": (_float_list, False, None),
        "schedule_file": (str, False, None),
    },
}

_METHOD_SECTIONS = {
    METHOD_NONE: None,
    METHOD_ATTENDOUT: "attendout",
    METHOD_VANILLA: "vanilla",
    METHOD_LAYERDROP: "layerdrop",
    METHOD_ATTN_LAYERDROP: "attn_layerdrop",
    METHOD_SCHEDULED: "scheduled",
}


@dataclass
class TrainConfig:
    method: str
    seed: int
    epochs: int
    task: str
    data_n: int
    seq_len: int
    vocab: int
    train_fraction: float
    dev_fraction: float
    test_fraction: float
    layers: int
    d_model: int
    d_ff: int
    heads: int
    opt_algo: str
    lr: float
    momentum: float
    batch_size: int
    # attendout
    dropout_step: int = 0
    gnet_lr: float = 0.0
    gnet_dim: int = 0
    tau: float = 1.0
    baseline_decay: float = 0.9
    reward: str = "signed"
    eval_pool: str = "dev"
    eval_slice_fraction: float = 0.1
    # vanilla / layerdrop / attn_layerdrop
    p: float = 0.0
    vanilla_mode: str = "scores"
    vanilla_rescale: bool = False
    # scheduled
    sched_p0: list[float] | None = None
    sched_slope: list[float] | None = None
    schedule_file: str | None = None
    fairness_hash: str = ""
    source_text: str = ""


def _parse_section(parser, section: str, found: dict) -> None:
    spec = _SCHEMA[section]
    present = parser.has_section(section)
    items = dict(parser.items(section)) if present else {}
    unknown = set(items) - set(spec)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {sorted(unknown)}")
    for key, (conv, required, default) in spec.items():
        if key in items:
            try:
                found[(section, key)] = conv(items[key])
            except ConfigError:
                raise
            except (TypeError, ValueError):
                raise ConfigError(
                    f"[{section}] {key}: cannot parse {items[key]!r} as {conv.__name__}"
                ) from None
        elif required:
            raise ConfigError(f"missing required field [{section}] {key}")
        else:
            found[(section, key)] = default


def compute_fairness_hash(parser: configparser.ConfigParser) -> str:
    """Hash of the config with the method name, the seed, and all
    method-specific sections stripped out."""
    parts = []
    for section in sorted(parser.sections()):
        if section in set(_METHOD_SECTIONS.values()) - {None}:
            continue
        for key, value in sorted(parser.items(section)):
            if section == "run" and key in ("method", "seed"):
                continue
            parts.append(f"{section}.{key}={value}")
    blob = "\n".join(parts).encode("utf-8")
    return hashlib.blake2b(blob, digest_size=16).hexdigest()


def parse_config_text(text: str) -> TrainConfig:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"config parse error: {exc}") from None

    known_sections = set(_SCHEMA)
    unknown = set(parser.sections()) - known_sections
    if unknown:
        raise ConfigError(f"unknown section(s): {sorted(unknown)}")

    for section in ("run", "data", "model", "optimizer"):
        if not parser.has_section(section):
            raise ConfigError(f"missing required section [{section}]")

    found: dict = {}
    _parse_section(parser, "run", found)
    method = found[("run", "method")].lower()
    if method not in METHODS:
        raise ConfigError(f"unknown method {method!r}; one of {METHODS}")

    needed = _METHOD_SECTIONS[method]
    for section in _SCHEMA:
        if section == "run":
            continue
        if section in ("data", "model", "optimizer"):
            _parse_section(parser, section, found)
        elif section == needed:
            if not parser.has_section(section):
                raise ConfigError(f"method {method!r} requires a [{section}] section")
            _parse_section(parser, section, found)
        elif parser.has_section(section):
            raise ConfigError(
                f"section [{section}] is not allowed when method = {method}"
            )

    cfg = TrainConfig(
        method=method,
        seed=found[("run", "seed")],
        epochs=found[("run", "epochs")],
        task=found[("data", "task")],
        data_n=found[("data", "n")],
        seq_len=found[("data", "seq_len")],
        vocab=found[("data", "vocab")],
        train_fraction=found[("data", "train_fraction")],
        dev_fraction=found[("data", "dev_fraction")],
        test_fraction=found[("data", "test_fraction")],
        layers=found[("model", "layers")],
        d_model=found[("model", "d_model")],
        d_ff=found[("model", "d_ff")],
        heads=found[("model", "heads")],
        opt_algo=found[("optimizer", "algo")].lower(),
        lr=found[("optimizer", "lr")],
        momentum=found[("optimizer", "momentum")],
        batch_size=found[("optimizer", "batch_size")],
        fairness_hash=compute_fairness_hash(parser),
        source_text=text,
    )
    if method == METHOD_ATTENDOUT:
        cfg.dropout_step = found[("attendout", "dropout_step")]
        cfg.gnet_lr = found[("attendout", "gnet_lr")]
        cfg.gnet_dim = found[("attendout", "gnet_dim")] or cfg.d_model // 2
        cfg.tau = found[("attendout", "tau")]
        cfg.baseline_decay = found[("attendout", "baseline_decay")]
        cfg.reward = found[("attendout", "reward")]
        cfg.eval_pool = found[("attendout", "eval_pool")]
        cfg.eval_slice_fraction = found[("attendout", "eval_slice_fraction")]
    elif method in (METHOD_VANILLA, METHOD_LAYERDROP, METHOD_ATTN_LAYERDROP):
        cfg.p = found[(needed, "p")]
        if method == METHOD_VANILLA:
            cfg.vanilla_mode = found[("vanilla", "mode")]
            cfg.vanilla_rescale = found[("vanilla", "rescale")]
    elif method == METHOD_SCHEDULED:
        cfg.sched_p0 = found[("scheduled", "p0")]
        cfg.sched_slope = found[("scheduled", "slope")]
        cfg.schedule_file = found[("scheduled", "schedule_file")]
        has_linear = cfg.sched_p0 is not None or cfg.sched_slope is not None
        if has_linear and (cfg.sched_p0 is None or cfg.sched_slope is None):
            raise ConfigError("[scheduled] p0 and slope must be given together")
        if has_linear and cfg.schedule_file is not None:
            raise ConfigError("[scheduled] give either p0/slope or schedule_file, not both")
        if not has_linear and cfg.schedule_file is None:
            raise ConfigError("[scheduled] needs p0/slope or a schedule_file")

    _validate(cfg)
    return cfg


def _validate(cfg: TrainConfig) -> None:
    if cfg.task not in (TASK_MAJORITY, TASK_BRACKETS):
        raise ConfigError(f"unknown task {cfg.task!r}")
    if cfg.task == TASK_BRACKETS and cfg.vocab != 3:
        raise ConfigError("balanced_brackets uses a fixed vocabulary of 3")
    if cfg.epochs < 0:
        raise ConfigError(f"epochs must be >= 0, got {cfg.epochs}")
    if cfg.batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {cfg.batch_size}")
    if cfg.opt_algo not in ("sgd", "adam"):
        raise ConfigError(f"optimizer algo must be sgd or adam, got {cfg.opt_algo!r}")
    if cfg.method == METHOD_ATTENDOUT:
        if cfg.dropout_step < 1:
            raise ConfigError(f"dropout_step must be >= 1, got {cfg.dropout_step}")
        if cfg.reward not in ("signed", "gap"):
            raise ConfigError(f"reward must be signed or gap, got {cfg.reward!r}")
        if cfg.eval_pool not in ("dev", "train_slice"):
            raise ConfigError(f"eval_pool must be dev or train_slice, got {cfg.eval_pool!r}")
        if cfg.tau <= 0:
            raise ConfigError(f"tau must be positive, got {cfg.tau}")
    if cfg.method in (METHOD_VANILLA, METHOD_LAYERDROP, METHOD_ATTN_LAYERDROP):
        if not 0.0 <= cfg.p <= 1.0:
            raise ConfigError(f"p must be in [0, 1], got {cfg.p}")
        if cfg.method == METHOD_VANILLA and cfg.vanilla_mode not in ("scores", "weights"):
            raise ConfigError(f"vanilla mode must be scores or weights, got {cfg.vanilla_mode!r}")


def load_config(path) -> TrainConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config_text(fh.read())
