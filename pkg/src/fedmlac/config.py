"""Text config format, override handling and run manifests.

A config is an INI-style file with one section per config group::

    [federation]
    algorithm = fedmlac
    rounds = 300
    active_ratio = 0.2

    [model]
    plugin_hidden = 16
    local_hidden = 8; 16; 32,16

Unknown sections or keys are errors. Tuple-valued keys use commas between
widths and semicolons between architecture variants; an empty value means
the empty tuple. ``seed`` under ``[data]`` may be ``none``, meaning the data
stream follows ``master_seed``.

Resolution order, lowest first: built-in defaults, the ``FEDMLAC_SEED``
environment variable (``master_seed`` only), the config file, then
``--override`` pairs.
"""

from __future__ import annotations

import configparser
import hashlib
import io
import json
import math
import subprocess
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Sequence

from .client import LocalUpdateConfig
from .nn import ACTIVATIONS
from .orchestrator import (
    ADVERSARIES,
    ALGORITHMS,
    AdversaryConfig,
    DataConfig,
    FederationConfig,
    ModelConfig,
)
from .server import AggregationConfig

SEED_ENV = "FEDMLAC_SEED"
MANIFEST_FORMAT = "fedmlac-manifest/1"
PARTITIONS = ("dirichlet", "iid", "group")
LPA_ALGORITHMS = ("fedmlac", "fedmlac_no_ml")


class ConfigError(ValueError):
    """Carries one ``(field, message)`` pair per problem found."""

    def __init__(self, problems: Sequence[tuple[str, str]]):
        self.problems = list(problems)
        super().__init__("; ".join(f"{f}: {m}" for f, m in self.problems))

    def lines(self) -> list[str]:
        return [f"{f}: {m}" for f, m in self.problems]


# --- value codecs ------------------------------------------------------------


def _int(text: str) -> int:
    return int(text.strip())


def _float(text: str) -> float:
    v = float(text.strip())
    if not math.isfinite(v):
        raise ValueError("must be finite")
    return v


def _str(text: str) -> str:
    return text.strip()


def _opt_int(text: str) -> int | None:
    t = text.strip().lower()
    return None if t in ("", "none") else int(t)


def _widths(text: str) -> tuple[int, ...]:
    t = text.strip()
    if not t:
        return ()
    out = tuple(int(p) for p in t.split(","))
    if any(w < 1 for w in out):
        raise ValueError("layer widths must be positive")
    return out


def _variants(text: str) -> tuple[tuple[int, ...], ...]:
    t = text.strip()
    if not t:
        return ()
    return tuple(_widths(p) for p in t.split(";"))


def _render(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        if value and isinstance(value[0], tuple):
            return "; ".join(_render(v) for v in value)
        return ",".join(str(v) for v in value)
    return str(value)


# (parser, check) per key; check returns an error string or None
_Check = Callable[[object], "str | None"]


def _one_of(options):
    return lambda v: None if v in options else f"must be one of {', '.join(options)}"


def _at_least(lo):
    return lambda v: None if v >= lo else f"must be >= {lo}"


def _positive(v):
    return None if v > 0 else "must be > 0"


def _unit_closed(v):
    return None if 0.0 <= v <= 1.0 else "must lie in [0, 1]"


def _unit_half_open(v):
    return None if 0.0 <= v < 1.0 else "must lie in [0, 1)"


def _ratio(v):
    return None if 0.0 < v <= 1.0 else "must lie in (0, 1]"


def _non_negative(v):
    return None if v >= 0 else "must be >= 0"


def _any(v):
    return None


def _opt_seed(v):
    return None if v is None or v >= 0 else "must be >= 0 or none"


SCHEMA: dict[str, dict[str, tuple[Callable[[str], object], _Check]]] = {
    "federation": {
        "algorithm": (_str, _one_of(ALGORITHMS)),
        "rounds": (_int, _at_least(1)),
        "active_ratio": (_float, _ratio),
        "num_clients": (_int, _at_least(1)),
        "master_seed": (_int, _non_negative),
        "eval_mode": (_str, _one_of(("global", "personalized"))),
    },
    "data": {
        "source": (_str, lambda v: None if v else "must name 'synthetic' or a CSV path"),
        "num_classes": (_int, _at_least(2)),
        "dim": (_int, _at_least(1)),
        "n_per_class": (_int, _at_least(1)),
        "cluster_spread": (_float, _positive),
        "n_groups": (_opt_int, lambda v: None if v is None or v >= 1 else "must be >= 1 or none"),
        "partition": (_str, _one_of(PARTITIONS)),
        "dirichlet_alpha": (_float, _positive),
        "test_fraction": (_float, _unit_half_open),
        "local_test_fraction": (_float, _unit_half_open),
        "seed": (_opt_int, _opt_seed),
    },
    "model": {
        "plugin_hidden": (_widths, _any),
        "local_hidden": (_variants, _any),
        "activation": (_str, _one_of(ACTIVATIONS)),
    },
    "local": {
        "epochs": (_int, _at_least(1)),
        "batch_size": (_int, _at_least(1)),
        "lr": (_float, _non_negative),
        "alpha": (_float, _unit_closed),
        "temperature": (_float, _positive),
        "prox_mu": (_float, _non_negative),
        "teacher": (_str, _one_of(("snapshot", "fresh"))),
    },
    "aggregation": {
        "v_l": (_float, _unit_half_open),
        "v_h": (_float, _unit_half_open),
    },
    "adversary": {
        "kind": (_str, _one_of(ADVERSARIES)),
        "fraction": (_float, _unit_closed),
        "rate": (_float, _unit_closed),
        "snr_db": (_float, _any),
        "factor": (_float, _any),
        "seed": (_int, _non_negative),
    },
}

_SECTION_TYPES = {
    "data": DataConfig,
    "model": ModelConfig,
    "local": LocalUpdateConfig,
    "aggregation": AggregationConfig,
    "adversary": AdversaryConfig,
}


# --- dict form ---------------------------------------------------------------


def config_to_dict(cfg: FederationConfig) -> dict[str, dict]:
    """Nested ``{section: {key: value}}`` with JSON-compatible values."""

    def plain(v):
        if isinstance(v, tuple):
            return [plain(x) for x in v]
        return v

    out = {"federation": {k: getattr(cfg, k) for k in SCHEMA["federation"]}}
    for section in _SECTION_TYPES:
        obj = getattr(cfg, section)
        out[section] = {k: plain(getattr(obj, k)) for k in SCHEMA[section]}
    return out


def default_dict() -> dict[str, dict]:
    return config_to_dict(FederationConfig())


def _coerce(section: str, key: str, value) -> object:
    """JSON value to the schema type (lists become tuples)."""
    if key == "plugin_hidden":
        return tuple(int(w) for w in value)
    if key == "local_hidden":
        return tuple(tuple(int(w) for w in v) for v in value)
    parser, _ = SCHEMA[section][key]
    if parser is _float and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if parser is _opt_int and value is None:
        return None
    if parser in (_int, _opt_int) and isinstance(value, int) and not isinstance(value, bool):
        return value
    if parser is _str and isinstance(value, str):
        return value
    if isinstance(value, str):
        return parser(value)
    raise ValueError(f"unexpected value {value!r}")


def config_from_dict(values: Mapping[str, Mapping[str, object]]) -> FederationConfig:
    """Validate a nested dict (as produced by :func:`config_to_dict`, possibly
    partial) on top of the defaults and build the config."""
    merged = default_dict()
    problems: list[tuple[str, str]] = []
    for section, entries in values.items():
        if section not in SCHEMA:
            problems.append((f"[{section}]", "unknown section"))
            continue
        for key, raw in entries.items():
            name = f"{section}.{key}"
            if key not in SCHEMA[section]:
                problems.append((name, "unknown key"))
                continue
            try:
                merged[section][key] = _coerce(section, key, raw)
            except (TypeError, ValueError) as exc:
                problems.append((name, f"cannot parse {raw!r}: {exc}"))
    if problems:
        raise ConfigError(problems)

    for section, entries in merged.items():
        for key, value in entries.items():
            if key in ("plugin_hidden", "local_hidden"):
                value = _coerce(section, key, value)
                merged[section][key] = value
            msg = SCHEMA[section][key][1](value)
            if msg:
                problems.append((f"{section}.{key}", f"{msg}, got {value!r}"))
    if problems:
        raise ConfigError(problems)

    cfg = FederationConfig(
        **merged["federation"],
        **{s: cls(**merged[s]) for s, cls in _SECTION_TYPES.items()},
    )
    _cross_checks(cfg)
    return cfg


def cohort_size(cfg: FederationConfig) -> int:
    return min(cfg.num_clients, max(1, int(round(cfg.active_ratio * cfg.num_clients))))


def _cross_checks(cfg: FederationConfig) -> None:
    problems = []
    if cfg.algorithm in LPA_ALGORITHMS:
        cohort = cohort_size(cfg)
        low, high = cfg.aggregation.pruned_counts(cohort)
        if low + high >= cohort:
            problems.append(
                (
                    "aggregation.v_l/v_h",
                    f"floor(v_l*|S|) + floor(v_h*|S|) < |S| is violated: {low} + {high} >= "
                    f"cohort of {cohort} clients",
                )
            )
    if cfg.algorithm in ("fedavg", "fedprox"):
        if any(h != cfg.model.plugin_hidden for h in cfg.model.local_hidden):
            problems.append(
                ("model.local_hidden", f"{cfg.algorithm} needs every client on the plug-in architecture")
            )
    if cfg.data.partition == "group" and cfg.data.source == "synthetic" and cfg.data.n_groups is None:
        problems.append(("data.n_groups", "group partition of synthetic data needs n_groups"))
    if problems:
        raise ConfigError(problems)


# --- text form ---------------------------------------------------------------


def render_config(cfg: FederationConfig) -> str:
    d = config_to_dict(cfg)
    parser = configparser.ConfigParser(interpolation=None)
    for section, entries in d.items():
        obj = cfg if section == "federation" else getattr(cfg, section)
        parser[section] = {k: _render(getattr(obj, k)) for k in entries}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def _read_ini(text: str, origin: str) -> dict[str, dict[str, object]]:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text, source=origin)
    except configparser.Error as exc:
        raise ConfigError([(origin, str(exc).splitlines()[0])]) from None
    problems, out = [], {}
    for section in parser.sections():
        if section not in SCHEMA:
            problems.append((f"[{section}]", "unknown section"))
            continue
        out[section] = {}
        for key, raw in parser[section].items():
            if key not in SCHEMA[section]:
                problems.append((f"{section}.{key}", "unknown key"))
                continue
            try:
                out[section][key] = SCHEMA[section][key][0](raw)
            except ValueError as exc:
                problems.append((f"{section}.{key}", f"cannot parse {raw!r}: {exc}"))
    if problems:
        raise ConfigError(problems)
    return out


def parse_config(text: str, origin: str = "<config>") -> FederationConfig:
    return config_from_dict(_read_ini(text, origin))


# --- overrides ---------------------------------------------------------------


def resolve_key(key: str) -> tuple[str, str]:
    """``section.key`` or a bare key that occurs in exactly one section."""
    if "." in key:
        section, name = key.split(".", 1)
        if section not in SCHEMA or name not in SCHEMA[section]:
            raise ConfigError([(key, "unknown key")])
        return section, name
    hits = [s for s, keys in SCHEMA.items() if key in keys]
    if not hits:
        raise ConfigError([(key, "unknown key")])
    if len(hits) > 1:
        raise ConfigError([(key, f"ambiguous, write one of {', '.join(f'{s}.{key}' for s in hits)}")])
    return hits[0], key


def parse_overrides(pairs: Sequence[str]) -> dict[str, dict[str, object]]:
    out: dict[str, dict[str, object]] = {}
    problems = []
    for pair in pairs:
        if "=" not in pair:
            problems.append((pair, "override must look like KEY=VALUE"))
            continue
        key, raw = pair.split("=", 1)
        try:
            section, name = resolve_key(key.strip())
            out.setdefault(section, {})[name] = SCHEMA[section][name][0](raw)
        except ConfigError as exc:
            problems.extend(exc.problems)
        except ValueError as exc:
            problems.append((key.strip(), f"cannot parse {raw!r}: {exc}"))
    if problems:
        raise ConfigError(problems)
    return out


def _merge(base: dict, extra: Mapping) -> dict:
    for section, entries in extra.items():
        base.setdefault(section, {}).update(entries)
    return base


# --- manifests ---------------------------------------------------------------


def tool_version() -> str:
    from . import __version__

    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True,
            text=True,
            timeout=5,
        )
        desc = out.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        desc = ""
    return f"{__version__}+{desc}" if desc else __version__


def data_descriptor(cfg: FederationConfig) -> dict:
    src = cfg.data.source
    if src == "synthetic":
        return {"source": "synthetic"}
    path = Path(src)
    digest = hashlib.sha256(path.read_bytes()).hexdigest() if path.is_file() else None
    return {"source": str(path), "sha256": digest}


@dataclass
class RunManifest:
    config: FederationConfig
    data: dict
    outputs: dict
    version: str

    def render(self) -> str:
        doc = {
            "format": MANIFEST_FORMAT,
            "version": self.version,
            "config": config_to_dict(self.config),
            "data": self.data,
            "outputs": self.outputs,
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    @classmethod
    def parse(cls, text: str) -> "RunManifest":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError([("manifest", f"not valid JSON: {exc}")]) from None
        if not isinstance(doc, dict) or doc.get("format") != MANIFEST_FORMAT:
            raise ConfigError([("manifest.format", f"expected {MANIFEST_FORMAT!r}")])
        missing = [k for k in ("config", "data", "outputs", "version") if k not in doc]
        if missing:
            raise ConfigError([(f"manifest.{k}", "missing") for k in missing])
        return cls(config_from_dict(doc["config"]), doc["data"], doc["outputs"], doc["version"])


def _file_values(path: Path) -> dict[str, dict[str, object]]:
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError([(str(path), f"cannot read: {exc.strerror}")]) from None
    if text.lstrip().startswith("{"):
        values = config_to_dict(RunManifest.parse(text).config)
    else:
        values = _read_ini(text, str(path))
    src = values.get("data", {}).get("source")
    if isinstance(src, str) and src != "synthetic" and not Path(src).is_absolute():
        values["data"]["source"] = str((path.parent / src).resolve())
    return values


def load_config(
    path: str | Path | None = None,
    overrides: Sequence[str] = (),
    env: Mapping[str, str] | None = None,
) -> FederationConfig:
    """Resolve defaults, ``FEDMLAC_SEED``, a config or manifest file and
    overrides, in that order of increasing precedence."""
    values: dict[str, dict[str, object]] = {}
    env = {} if env is None else env
    if env.get(SEED_ENV, "").strip():
        raw = env[SEED_ENV]
        try:
            values["federation"] = {"master_seed": int(raw)}
        except ValueError:
            raise ConfigError([(SEED_ENV, f"cannot parse {raw!r} as an integer")]) from None
    if path is not None:
        _merge(values, _file_values(Path(path)))
    _merge(values, parse_overrides(overrides))
    return config_from_dict(values)

