"""Run configuration: INI-style text with sections, comments and includes.

A line ``%include other.cfg`` splices another file in place (paths are
relative to the including file); later assignments override earlier ones.
Every field has a default, so an empty file is a valid config. The canonical
form lists every section and key in sorted order, and the config digest is
the SHA-256 of that form minus the output directory.
"""

from __future__ import annotations

import configparser
import hashlib
import os
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Tuple

from .flow import SamplerSpec, TrainSpec
from .meta_simulator import SCOPES, ModelConfig, StructurePrior
from .network import NetworkConfig, network_profile
from .presets import get_preset
from .priors import PriorSpec, prior_table
from .simulators import FAMILIES, SimSettings

DEFAULT_OUT = "mfsm_out"
_INCLUDE = re.compile(r"^\s*%include\s+(.+?)\s*$")


class ConfigError(ValueError):
    """Invalid configuration; the message names file, line and field."""


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _list(s: str) -> Tuple[str, ...]:
    return tuple(x.strip() for x in s.split(",") if x.strip())


def _floats(s: str) -> Tuple[float, ...]:
    return tuple(float(x) for x in _list(s))


def _u64(s: str) -> int:
    v = int(s)
    if not 0 <= v < 2**64:
        raise ValueError("seed must be an unsigned 64-bit integer")
    return v


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return ", ".join(_fmt(x) for x in v)
    return "" if v is None else str(v)


# section -> key -> (parser, default)
SCHEMA: Dict[str, Dict[str, tuple]] = {
    "run": {
        "scope": (str, "family"),
        "families": (_list, ("ddm",)),
        "family_probs": (_floats, ()),
        "preset": (str, ""),
        "seed": (_u64, 0),
        "out": (str, DEFAULT_OUT),
        "profile": (str, "desk"),
        "encoder_block": (str, "isab"),
        "token_mix": (str, "concat"),
    },
    "structure": {
        "n_min": (int, 64),
        "n_max": (int, 512),
        "r_max": (int, 8),
        "kind_weights": (_floats, (0.4, 0.4, 0.2)),
        "p_active": (float, 0.5),
        "p_fixed": (float, 0.5),
        "fixable": (_list, ("sv", "st")),
    },
    "simulator": {
        "dt": (float, 1e-3),
        "t_max": (float, 10.0),
        "boundary_correction": (str, "bridge"),
        "rdm_shared_drift_noise": (_bool, True),
        "max_censoring": (float, 0.01),
        "max_resample": (int, 10),
        "guard_factor": (float, 10.0),
    },
    "train": {
        "epochs": (int, 20),
        "steps_per_epoch": (int, 100),
        "batch_size": (int, 32),
        "lr": (float, 1e-4),
        "warmup_steps": (int, 100),
        "checkpoint_every": (int, 10),
        "lr_schedule": (str, "constant"),
        "time_power": (float, 1.0),
        "ema_decay": (float, 0.0),
    },
    "sampler": {
        "step_size": (float, 1e-2),
        "n_draws": (int, 1000),
        "chunk": (int, 1000),
    },
    "eval": {
        "n_datasets": (int, 200),
        "n_trials": (int, 500),
        "presets": (_list, ()),
        "num_quantiles": (int, 20),
        "prior_draws": (int, 10_000),
        "c2st_datasets": (int, 10),
        "c2st_folds": (int, 5),
        "c2st_classifier": (str, "logistic"),
        "c2st_standardize": (_bool, True),
    },
}


@dataclass(frozen=True)
class RunConfig:
    values: Dict[str, Dict[str, object]]
    # {family: {param: (mean, std)}} overrides of the intrinsic priors
    priors: Dict[str, Dict[str, Tuple[float, float]]] = field(default_factory=dict)

    def __getitem__(self, section: str) -> Dict[str, object]:
        return self.values[section]

    def __eq__(self, other):
        return isinstance(other, RunConfig) and self.canonical() == other.canonical()

    __hash__ = None

    # -- construction helpers -------------------------------------------------

    @classmethod
    def default(cls) -> "RunConfig":
        return cls({s: {k: d for k, (_, d) in keys.items()} for s, keys in SCHEMA.items()})

    def with_overrides(self, **kw) -> "RunConfig":
        """``section__key=value`` overrides, e.g. ``run__seed=3``; validated."""
        values = {s: dict(v) for s, v in self.values.items()}
        for k, v in kw.items():
            if v is None:
                continue
            section, key = k.split("__")
            if key not in SCHEMA.get(section, {}):
                raise ConfigError(f"unknown field {section}.{key}")
            values[section][key] = v
        cfg = RunConfig(values, self.priors)
        cfg.validate()
        return cfg

    # -- serialization ------------------------------------------------------

    def canonical(self, include_out: bool = True) -> str:
        lines = []
        for section in sorted(self.values):
            lines.append(f"[{section}]")
            for key in sorted(self.values[section]):
                if key == "out" and not include_out:
                    continue
                lines.append(f"{key} = {_fmt(self.values[section][key])}")
            lines.append("")
        for fam in sorted(self.priors):
            lines.append(f"[priors.{fam}]")
            for p in sorted(self.priors[fam]):
                lines.append(f"{p} = {_fmt(self.priors[fam][p])}")
            lines.append("")
        return "\n".join(lines)

    def digest(self) -> str:
        return hashlib.sha256(self.canonical(include_out=False).encode()).hexdigest()

    @property
    def seed(self) -> int:
        return int(self.values["run"]["seed"])

    @property
    def out_dir(self) -> Path:
        return Path(self.values["run"]["out"])

    # -- derived objects ----------------------------------------------------

    def validate(self):
        try:
            self.model_config()
            self.network_config()
            self.train_spec()
            self.sampler_spec()
        except (ValueError, KeyError, TypeError) as exc:
            raise ConfigError(str(exc)) from None

    def model_config(self, scope: Optional[str] = None, preset: Optional[str] = None,
                     families: Optional[Tuple[str, ...]] = None) -> ModelConfig:
        run, st, sim = self["run"], self["structure"], self["simulator"]
        scope = scope or run["scope"]
        preset = preset if preset is not None else (run["preset"] or None)
        fams = families or tuple(run["families"])
        priors = {
            f: {p: PriorSpec(m, s, prior_table(f)[p].link) for p, (m, s) in ps.items()}
            for f, ps in self.priors.items()
        }
        probs = tuple(run["family_probs"]) or None
        return ModelConfig(
            scope=scope,
            families=fams,
            family_probs=probs if scope == "class" else None,
            preset=preset if scope == "instance" else None,
            structure=StructurePrior(
                n_min=st["n_min"], n_max=st["n_max"], r_max=st["r_max"],
                kind_weights=tuple(st["kind_weights"]), p_active=st["p_active"],
                p_fixed=st["p_fixed"], fixable=tuple(st["fixable"])),
            sim=SimSettings(dt=sim["dt"], t_max=sim["t_max"],
                            boundary_correction=sim["boundary_correction"],
                            rdm_shared_drift_noise=sim["rdm_shared_drift_noise"]),
            priors=priors,
            max_censoring=sim["max_censoring"],
            max_resample=sim["max_resample"],
            guard_factor=sim["guard_factor"],
        )

    def network_config(self) -> NetworkConfig:
        mc = self.model_config()
        net = network_profile(self["run"]["profile"], r_max=mc.r_max, d_max=mc.d_max)
        return replace(net,
                       encoder=replace(net.encoder, block=self["run"]["encoder_block"]),
                       decoder=replace(net.decoder, token_mix=self["run"]["token_mix"]))

    def train_spec(self) -> TrainSpec:
        return TrainSpec(seed=self.seed, **self["train"])

    def sampler_spec(self, seed: Optional[int] = None) -> SamplerSpec:
        return SamplerSpec(seed=self.seed if seed is None else seed, **self["sampler"])

    def eval_presets(self, family: str) -> Tuple[str, ...]:
        from .presets import BENCHMARK_PRESETS, PRESETS

        chosen = tuple(self["eval"]["presets"])
        if chosen:
            return tuple(get_preset(p).name for p in chosen)
        if self["run"]["scope"] == "instance" and self["run"]["preset"]:
            return (get_preset(self["run"]["preset"]).name,)
        return tuple(p for p in BENCHMARK_PRESETS if family in PRESETS[p].families())


def _splice(path: Path, seen: Tuple[Path, ...] = ()) -> List[Tuple[str, str, int]]:
    """Lines of ``path`` with includes expanded, tagged with (file, line)."""
    path = path.resolve()
    if path in seen:
        raise ConfigError(f"{path}: include cycle")
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from None
    out = []
    for no, line in enumerate(text.splitlines(), 1):
        m = _INCLUDE.match(line)
        if m:
            out.extend(_splice(path.parent / m.group(1), seen + (path,)))
        else:
            out.append((line, str(path), no))
    return out


def _locate(lines, section: str, key: Optional[str]) -> str:
    current, where = None, None
    for text, fname, no in lines:
        s = text.strip()
        if s.startswith("[") and s.endswith("]"):
            current = s[1:-1].strip()
            if key is None and current == section:
                where = f"{fname}:{no}"
        elif current == section and key is not None:
            k = re.split(r"[=:]", s, maxsplit=1)[0].strip().lower()
            if k == key:
                where = f"{fname}:{no}"
    return where or "<config>"


def parse_lines(lines) -> RunConfig:
    parser = configparser.ConfigParser(strict=False, interpolation=None,
                                       comment_prefixes=("#", ";"), inline_comment_prefixes=("#",))
    try:
        parser.read_string("\n".join(t for t, _, _ in lines))
    except configparser.Error as exc:
        lineno = getattr(exc, "lineno", None)
        where = "<config>"
        if lineno and 0 < lineno <= len(lines):
            where = f"{lines[lineno - 1][1]}:{lines[lineno - 1][2]}"
        raise ConfigError(f"{where}: {exc.message if hasattr(exc, 'message') else exc}") from None
    cfg = RunConfig.default()
    values = cfg.values
    priors: Dict[str, Dict[str, Tuple[float, float]]] = {}
    for section in parser.sections():
        if section.startswith("priors."):
            fam = section.split(".", 1)[1]
            if fam not in FAMILIES:
                raise ConfigError(f"{_locate(lines, section, None)}: unknown family {fam!r}")
            table = prior_table(fam)
            for key, raw in parser.items(section):
                where = _locate(lines, section, key)
                if key not in table:
                    raise ConfigError(f"{where}: {section}.{key}: unknown parameter")
                try:
                    mean, std = _floats(raw)
                    PriorSpec(mean, std, table[key].link)
                except (ValueError, TypeError) as exc:
                    raise ConfigError(f"{where}: {section}.{key}: expected 'mean, std' ({exc})") from None
                priors.setdefault(fam, {})[key] = (mean, std)
            continue
        if section not in SCHEMA:
            raise ConfigError(f"{_locate(lines, section, None)}: unknown section [{section}]")
        for key, raw in parser.items(section):
            where = _locate(lines, section, key)
            if key not in SCHEMA[section]:
                raise ConfigError(f"{where}: {section}.{key}: unknown field")
            conv = SCHEMA[section][key][0]
            try:
                values[section][key] = conv(raw.strip())
            except ValueError as exc:
                raise ConfigError(f"{where}: {section}.{key}: {exc}") from None
    if values["run"]["scope"] not in SCOPES:
        raise ConfigError(f"{_locate(lines, 'run', 'scope')}: run.scope: must be one of {SCOPES}")
    cfg = RunConfig(values, priors)
    try:
        cfg.validate()
    except ConfigError as exc:
        raise ConfigError(f"invalid config: {exc}") from None
    return cfg


def parse_text(text: str) -> RunConfig:
    return parse_lines([(line, "<string>", no) for no, line in enumerate(text.splitlines(), 1)])


def load_config(path=None) -> RunConfig:
    if path is None:
        return RunConfig.default()
    return parse_lines(_splice(Path(path)))


def default_out() -> str:
    return os.environ.get("MFSM_OUT", DEFAULT_OUT)
