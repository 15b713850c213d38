"""Run configuration: an INI-style ``key = value`` file with sections.

Every key the program understands is listed in ``SCHEMA``. Loading fills in
defaults, validates everything at once (:class:`ConfigError` lists every
problem), and :func:`dump_config` writes the fully resolved configuration
so a run can be reproduced from its echo alone.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass

TASKS = ("classify", "autoencode")
OPTIMIZERS = ("shf", "sgd", "momentum", "nag", "dsgd")
SOURCES = ("mnist", "idx", "csv", "synth-curves", "synth-blobs")

REQUIRED = object()
AUTO = "auto"


class ConfigError(ValueError):
    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.problems))


@dataclass(frozen=True)
class Key:
    section: str
    name: str
    kind: str
    default: object = None
    choices: tuple | None = None


SCHEMA = [
    Key("run", "task", "str", REQUIRED, TASKS),
    Key("run", "optimizer", "str", REQUIRED, OPTIMIZERS),
    Key("run", "epochs", "int", 10),
    Key("run", "seed", "int", REQUIRED),
    Key("data", "source", "str", "mnist", SOURCES),
    Key("data", "train_images", "str?", None),
    Key("data", "train_labels", "str?", None),
    Key("data", "test_images", "str?", None),
    Key("data", "test_labels", "str?", None),
    Key("data", "train_csv", "str?", None),
    Key("data", "test_csv", "str?", None),
    Key("data", "train_limit", "int?", None),
    Key("data", "test_limit", "int?", None),
    Key("data", "standardize", "str", AUTO, ("auto", "none", "feature", "global")),
    Key("data", "n_train", "int", 1000),
    Key("data", "n_test", "int", 500),
    Key("data", "n_features", "int", 20),
    Key("data", "n_classes", "int", 10),
    Key("model", "layers", "ints", REQUIRED),
    Key("model", "hidden_transfer", "str", AUTO, ("auto", "logistic", "tanh", "relu", "linear")),
    Key("model", "init_fan_in", "int", 15),
    Key("model", "init_bias", "float", 0.1),
    Key("model", "init_scale", "float", 1.0),
    Key("shf", "grad_batch", "int", 1000),
    Key("shf", "curv_batch", "int", 100),
    Key("shf", "cg_iters", "int", 3),
    Key("shf", "lambda0", "float", 1.0),
    Key("shf", "gamma1", "float", 0.5),
    Key("shf", "gamma_shutoff_epoch", "int?", None),
    Key("shf", "c", "float?", None),
    Key("shf", "omega", "int", 60),
    Key("shf", "xi", "float", 0.75),
    Key("shf", "weight_decay", "float", 0.0),
    Key("shf", "dropout_input", "float", 0.0),
    Key("shf", "dropout_hidden", "float", 0.0),
    Key("shf", "damping_mode", "str", "soft", ("soft", "martens")),
    Key("shf", "cg_termination", "str", "fixed", ("fixed", "relative")),
    Key("shf", "cg_epsilon", "float", 5e-4),
    Key("sgd", "batch_size", "int", 100),
    Key("sgd", "lr0", "float", 10.0),
    Key("sgd", "lr_decay", "float?", None),
    Key("sgd", "p0", "float", 0.5),
    Key("sgd", "p_final", "float", 0.99),
    Key("sgd", "momentum_epochs", "int?", None),
    Key("sgd", "max_norm", "float?", None),
    Key("sgd", "dropout", "floats", ()),
    Key("sgd", "weight_decay", "float", 0.0),
]

_BY_SECTION = {}
for _k in SCHEMA:
    _BY_SECTION.setdefault(_k.section, {})[_k.name] = _k


def _parse(kind, text):
    text = text.strip()
    if kind.endswith("?"):
        if text.lower() in ("", "none"):
            return None
        kind = kind[:-1]
    if kind == "str":
        return text
    if kind == "int":
        return int(text)
    if kind == "float":
        return float(text)
    if kind == "ints":
        return tuple(int(t) for t in text.replace(" ", "").split(",") if t)
    if kind == "floats":
        return tuple(float(t) for t in text.replace(" ", "").split(",") if t)
    raise AssertionError(kind)


def _format(value):
    if value is None:
        return "none"
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass
class TrainConfig:
    values: dict   # (section, name) -> resolved value

    def __getitem__(self, key):
        section, name = key.split(".")
        return self.values[(section, name)]

    @property
    def task(self):
        return self["run.task"]

    @property
    def optimizer(self):
        return self["run.optimizer"]


def parse_config(text, overrides=None):
    """Parse config text into a validated :class:`TrainConfig`.

    ``overrides`` maps ``"section.name"`` to a string value, applied before
    validation (the CLI's ``--seed``).
    """
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError([f"unparseable config: {exc}"]) from exc
    raw = {}
    problems = []
    for section in cp.sections():
        if section not in _BY_SECTION:
            problems.append(f"[{section}]: unknown section")
            continue
        for name, value in cp.items(section):
            if name not in _BY_SECTION[section]:
                problems.append(f"{section}.{name}: unknown key")
            else:
                raw[(section, name)] = value
    for dotted, value in (overrides or {}).items():
        section, name = dotted.split(".")
        raw[(section, name)] = str(value)

    values = {}
    for key in SCHEMA:
        k = (key.section, key.name)
        if k in raw:
            try:
                values[k] = _parse(key.kind, raw[k])
            except ValueError as exc:
                problems.append(f"{key.section}.{key.name}: {exc}")
                values[k] = None
        else:
            values[k] = key.default
    if problems:
        # still run the semantic checks so the user sees everything at once
        try:
            validate(values)
        except ConfigError as exc:
            problems.extend(p for p in exc.problems if p not in problems)
        except TypeError:
            pass  # a key that failed to parse broke a semantic check
        raise ConfigError(problems)
    return validate(values)


def load_config(path, overrides=None):
    with open(path) as f:
        return parse_config(f.read(), overrides)


def validate(values):
    values = dict(values)
    problems = []

    def get(dotted):
        return values[tuple(dotted.split("."))]

    def put(dotted, v):
        values[tuple(dotted.split("."))] = v

    for key in SCHEMA:
        v = values[(key.section, key.name)]
        if v is REQUIRED:
            problems.append(f"{key.section}.{key.name}: required")
        elif key.choices and v is not None and v not in key.choices:
            problems.append(f"{key.section}.{key.name}: must be one of {', '.join(key.choices)}")
    if problems:
        raise ConfigError(problems)

    task, opt = get("run.task"), get("run.optimizer")
    if get("run.epochs") < 0:
        problems.append("run.epochs: must be >= 0")

    layers = get("model.layers")
    if len(layers) < 2 or any(n <= 0 for n in layers):
        problems.append("model.layers: need at least two positive sizes")
    if get("model.hidden_transfer") == AUTO:
        put("model.hidden_transfer", "relu" if task == "classify" else "logistic")
    if get("model.init_fan_in") < 1:
        problems.append("model.init_fan_in: must be >= 1")
    src = get("data.source")
    if get("data.standardize") == AUTO:
        # autoencoder targets are the raw inputs, so they stay unscaled
        put("data.standardize", "feature" if task == "classify" else "none")

    need = {
        "mnist": ("train_images", "test_images") + (("train_labels", "test_labels") if task == "classify" else ()),
        "idx": ("train_images", "test_images") + (("train_labels", "test_labels") if task == "classify" else ()),
        "csv": ("train_csv", "test_csv"),
    }.get(src, ())
    for name in need:
        if not get(f"data.{name}"):
            problems.append(f"data.{name}: required for source {src}")
    if src == "synth-curves" and task != "autoencode":
        problems.append("data.source: synth-curves is an autoencoder dataset")
    if src == "synth-blobs" and task != "classify":
        problems.append("data.source: synth-blobs is a classification dataset")

    if opt == "shf":
        g, c = get("shf.grad_batch"), get("shf.curv_batch")
        if c < 1 or g < 1:
            problems.append("shf.curv_batch: batch sizes must be positive")
        elif g % c:
            problems.append(f"shf.curv_batch: grad_batch {g} is not a multiple of curv_batch {c}")
        if get("shf.cg_iters") < 1:
            problems.append("shf.cg_iters: must be >= 1")
        if not get("shf.lambda0") > 0:
            problems.append("shf.lambda0: must be > 0")
        cval = get("shf.c")
        if cval is None:
            problems.append("shf.c: required for optimizer shf (beta decay; use 1.0 for none)")
        elif not 0 < cval <= 1:
            problems.append("shf.c: must lie in (0, 1]")
        if not 0 <= get("shf.gamma1") <= 0.99:
            problems.append("shf.gamma1: must lie in [0, 0.99]")
        if get("shf.omega") < 0:
            problems.append("shf.omega: must be >= 0")
        for name in ("dropout_input", "dropout_hidden"):
            if not 0 <= get(f"shf.{name}") < 1:
                problems.append(f"shf.{name}: must lie in [0, 1)")
        if get("shf.weight_decay") < 0:
            problems.append("shf.weight_decay: must be >= 0")
        if get("shf.cg_epsilon") <= 0:
            problems.append("shf.cg_epsilon: must be > 0")
    else:
        if get("sgd.lr_decay") is None:
            problems.append("sgd.lr_decay: required for first-order optimizers")
        elif not 0 < get("sgd.lr_decay") <= 1:
            problems.append("sgd.lr_decay: must lie in (0, 1]")
        if not get("sgd.lr0") > 0:
            problems.append("sgd.lr0: must be > 0")
        if get("sgd.batch_size") < 1:
            problems.append("sgd.batch_size: must be >= 1")
        if opt == "sgd":
            put("sgd.p0", 0.0)
            put("sgd.p_final", 0.0)
        if not 0 <= get("sgd.p0") <= get("sgd.p_final") < 1:
            problems.append("sgd.p_final: need 0 <= p0 <= p_final < 1")
        if get("sgd.momentum_epochs") is None:
            put("sgd.momentum_epochs", get("run.epochs"))
        drop = get("sgd.dropout")
        if len(drop) > max(len(layers) - 1, 0):
            problems.append("sgd.dropout: one probability per non-output layer at most")
        if any(not 0 <= p < 1 for p in drop):
            problems.append("sgd.dropout: probabilities must lie in [0, 1)")
        if opt == "dsgd":
            if get("sgd.max_norm") is None:
                problems.append("sgd.max_norm: required for optimizer dsgd")
            if not any(drop):
                problems.append("sgd.dropout: dsgd needs at least one non-zero dropout probability")
        mn = get("sgd.max_norm")
        if mn is not None and not mn > 0:
            problems.append("sgd.max_norm: must be > 0")
    if problems:
        raise ConfigError(problems)
    return TrainConfig(values)


def dump_config(cfg):
    """Resolved configuration as config-file text (every key, defaults filled)."""
    out = io.StringIO()
    current = None
    for key in SCHEMA:
        if key.section != current:
            if current is not None:
                out.write("\n")
            out.write(f"[{key.section}]\n")
            current = key.section
        out.write(f"{key.name} = {_format(cfg.values[(key.section, key.name)])}\n")
    return out.getvalue()
