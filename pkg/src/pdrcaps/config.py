"""Line-oriented configuration files.

Grammar (one statement per line, ``#`` starts a comment)::

    file     := { line }
    line     := keyval | section | layer | blank
    keyval   := KEY "=" VALUE
    section  := "[stem]" | "[branch" INT "]" | "[train]" | "[data]"
    layer    := KIND { NAME "=" INT }          (only inside [stem] / [branch N])

Top-level keys describe the architecture (``name``, ``input_shape``,
``n_classes``, ``class_caps_dim``, ``routing_iterations``, ``resquash``,
``use_decoder``, ``decoder_hidden``).  Branch sections take ``cfc_kernel``,
``caps_dim``, ``caps_types``, ``cfc_stride`` and ``iterations`` plus layer
lines.  ``[train]`` and ``[data]`` hold free-form keys interpreted by the
trainer and the data loaders.

Layer kinds: ``conv3x3``, ``conv9x9``, ``depthwise_separable``,
``batchnorm``, ``relu``; layer keys: ``in``, ``out``, ``channels``,
``stride``, ``padding``, ``kernel``.

Every key can be overridden from the environment: ``PDRCAPS_<KEY>`` for
top-level keys, ``PDRCAPS_TRAIN_<KEY>``, ``PDRCAPS_DATA_<KEY>`` and
``PDRCAPS_BRANCH<N>_<KEY>`` for sectioned ones.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field

from .errors import ConfigError
from .model import LAYER_KINDS, ArchConfig, BranchSpec, LayerSpec

ENV_PREFIX = "PDRCAPS_"
_KEYVAL = re.compile(r"^([A-Za-z_][A-Za-z0-9_]*)\s*=\s*(.*)$")
_SECTION = re.compile(r"^\[\s*(stem|train|data|branch\s+(\d+))\s*\]$")
_ARCH_KEYS = ("name", "input_shape", "n_classes", "class_caps_dim", "routing_iterations", "resquash",
              "use_decoder", "decoder_hidden")
_BRANCH_KEYS = ("cfc_kernel", "caps_dim", "caps_types", "cfc_stride", "iterations")
_LAYER_KEYS = {"in": "in_channels", "out": "out_channels", "channels": "in_channels",
               "stride": "stride", "padding": "padding", "kernel": "kernel"}


@dataclass
class RunConfig:
    arch: ArchConfig
    train: dict = field(default_factory=dict)
    data: dict = field(default_factory=dict)


def _int(value, where):
    try:
        return int(value)
    except ValueError:
        raise ConfigError(f"{where}: expected an integer, got {value!r}") from None


def _ints(value, where):
    value = value.strip()
    if value in ("", "none"):
        return ()
    return tuple(_int(v.strip(), where) for v in value.split(","))


def parse_bool(value, where="value"):
    v = str(value).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"{where}: expected a boolean, got {value!r}")


def parse_layer(text, where="layer"):
    tokens = text.split()
    kind = tokens[0]
    if kind not in LAYER_KINDS:
        raise ConfigError(f"{where}: unknown layer kind {kind!r}")
    kw = {}
    for tok in tokens[1:]:
        if "=" not in tok:
            raise ConfigError(f"{where}: expected name=value, got {tok!r}")
        name, value = tok.split("=", 1)
        if name not in _LAYER_KEYS:
            raise ConfigError(f"{where}: unknown layer key {name!r}")
        kw[_LAYER_KEYS[name]] = _int(value, where)
    if kind == "batchnorm" and "in_channels" in kw:
        kw.setdefault("out_channels", kw["in_channels"])
    return LayerSpec(kind, **kw)


def format_layer(spec):
    if spec.kind == "relu":
        return "relu"
    if spec.kind == "batchnorm":
        return f"batchnorm channels={spec.in_channels}"
    parts = [spec.kind, f"in={spec.in_channels}", f"out={spec.out_channels}"]
    if spec.kind == "depthwise_separable" and spec.kernel != 3:
        parts.append(f"kernel={spec.kernel}")
    if spec.stride != 1:
        parts.append(f"stride={spec.stride}")
    if spec.padding != 0:
        parts.append(f"padding={spec.padding}")
    return " ".join(parts)


def _apply_env(top, sections, env):
    if not env:
        return
    for key, value in env.items():
        if not key.startswith(ENV_PREFIX):
            continue
        rest = key[len(ENV_PREFIX):].lower()
        m = re.match(r"^branch(\d+)_(\w+)$", rest)
        if m:
            sec = sections.setdefault(("branch", int(m.group(1))), {"keys": {}, "layers": []})
            sec["keys"][m.group(2)] = value
        elif rest.startswith("train_"):
            sections.setdefault(("train", 0), {"keys": {}, "layers": []})["keys"][rest[6:]] = value
        elif rest.startswith("data_"):
            sections.setdefault(("data", 0), {"keys": {}, "layers": []})["keys"][rest[5:]] = value
        elif rest in _ARCH_KEYS:
            top[rest] = value


def parse_config(text, env=None):
    """Parse config text into a :class:`RunConfig`; ``env`` supplies overrides."""
    top = {}
    sections = {}
    current = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        where = f"line {lineno}"
        m = _SECTION.match(line)
        if m:
            if m.group(2) is not None:
                current = ("branch", int(m.group(2)))
            else:
                current = (m.group(1), 0)
            if current in sections:
                raise ConfigError(f"{where}: duplicate section [{m.group(1)}]")
            sections[current] = {"keys": {}, "layers": []}
            continue
        kv = _KEYVAL.match(line)
        if kv:
            key, value = kv.group(1), kv.group(2).strip()
            target = top if current is None else sections[current]["keys"]
            if key in target:
                raise ConfigError(f"{where}: duplicate key {key!r}")
            target[key] = value
            continue
        if current is None or current[0] not in ("stem", "branch"):
            raise ConfigError(f"{where}: layer line outside [stem]/[branch N]: {line!r}")
        sections[current]["layers"].append(parse_layer(line, where))

    _apply_env(top, sections, env)
    unknown = set(top) - set(_ARCH_KEYS)
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    if "input_shape" not in top or "n_classes" not in top:
        raise ConfigError("config needs input_shape and n_classes")
    n_classes = _int(top["n_classes"], "n_classes")
    class_dim = _int(top.get("class_caps_dim", "16"), "class_caps_dim")
    iterations = _int(top.get("routing_iterations", "3"), "routing_iterations")

    branch_ids = sorted(i for kind, i in sections if kind == "branch")
    if branch_ids != list(range(1, len(branch_ids) + 1)):
        raise ConfigError(f"branch sections must be numbered 1..N, got {branch_ids}")
    branches = []
    for i in branch_ids:
        sec = sections[("branch", i)]
        keys = sec["keys"]
        unknown = set(keys) - set(_BRANCH_KEYS)
        if unknown:
            raise ConfigError(f"[branch {i}]: unknown keys {sorted(unknown)}")
        kw = {k: _int(v, f"[branch {i}] {k}") for k, v in keys.items()}
        kw.setdefault("iterations", iterations)
        branches.append(BranchSpec(tuple(sec["layers"]), n_classes=n_classes, class_caps_dim=class_dim, **kw))
    stem = sections.get(("stem", 0), {"layers": []})["layers"]
    arch = ArchConfig(
        name=top.get("name", "model"),
        input_shape=_ints(top["input_shape"], "input_shape"),
        n_classes=n_classes,
        stem=tuple(stem),
        branches=tuple(branches),
        class_caps_dim=class_dim,
        routing_iterations=iterations,
        resquash=parse_bool(top.get("resquash", "false"), "resquash"),
        use_decoder=parse_bool(top.get("use_decoder", "true"), "use_decoder"),
        decoder_hidden=_ints(top.get("decoder_hidden", "512, 1024"), "decoder_hidden"),
    )
    train = dict(sections.get(("train", 0), {"keys": {}})["keys"])
    data = dict(sections.get(("data", 0), {"keys": {}})["keys"])
    return RunConfig(arch, train, data)


def load_config(path, env=None):
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, env)


def dump_config(arch, train=None, data=None):
    """Render a config that :func:`parse_config` maps back to the same objects."""
    lines = [
        f"name = {arch.name}",
        f"input_shape = {', '.join(str(v) for v in arch.input_shape)}",
        f"n_classes = {arch.n_classes}",
        f"class_caps_dim = {arch.class_caps_dim}",
        f"routing_iterations = {arch.routing_iterations}",
        f"resquash = {str(arch.resquash).lower()}",
        f"use_decoder = {str(arch.use_decoder).lower()}",
        f"decoder_hidden = {', '.join(str(v) for v in arch.decoder_hidden) or 'none'}",
        "",
        "[stem]",
    ]
    lines += [format_layer(s) for s in arch.stem]
    for i, br in enumerate(arch.branches, 1):
        lines += ["", f"[branch {i}]",
                  f"cfc_kernel = {br.cfc_kernel}",
                  f"caps_dim = {br.caps_dim}",
                  f"caps_types = {br.caps_types}",
                  f"cfc_stride = {br.cfc_stride}"]
        if br.iterations != arch.routing_iterations:
            lines.append(f"iterations = {br.iterations}")
        lines += [format_layer(s) for s in br.layers]
    for title, section in (("train", train), ("data", data)):
        if section:
            lines += ["", f"[{title}]"] + [f"{k} = {v}" for k, v in section.items()]
    return "\n".join(lines) + "\n"
