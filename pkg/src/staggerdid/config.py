"""Plain-text ``key = value`` run configuration.

Every key is declared in :data:`KEYS` with a parser and a default; unknown
keys are rejected. Environment variables ``STAGGERDID_<KEY>`` (upper case)
override the file. Relative paths resolve against the config file's folder.
"""

from __future__ import annotations

import os
from pathlib import Path
from typing import Callable, Mapping, Optional

from .errors import ConfigError

ENV_PREFIX = "STAGGERDID_"


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _int_list(text: str) -> tuple:
    return tuple(int(p) for p in text.split(",") if p.strip())


def _str_list(text: str) -> tuple:
    t = text.strip()
    if t.lower() in ("", "none"):
        return ()
    return tuple(p.strip() for p in t.split(",") if p.strip())


def _optional(parse: Callable) -> Callable:
    def inner(text: str):
        if text.strip().lower() in ("", "none"):
            return None
        return parse(text)
    return inner


def _choice(*options) -> Callable:
    def inner(text: str):
        t = text.strip()
        if t not in options:
            raise ValueError(f"expected one of {', '.join(options)}")
        return t
    return inner


def _mapping(text: str) -> dict:
    out = {}
    for part in _str_list(text):
        canon, sep, src = part.partition(":")
        if not sep:
            raise ValueError(f"schema entry {part!r} is not canonical:source")
        out[canon.strip()] = src.strip()
    return out


_path = _optional(str)

# key -> (parser, default as text)
KEYS: dict = {
    # general
    "seed": (int, "0"),
    "out_dir": (str, "out"),
    "workers": (int, "0"),
    "delimiter": (str, ","),
    "outcome": (str, "wage"),
    # inputs
    "panel": (_path, "none"),
    "wage_index": (_path, "none"),
    "deaths": (_path, "none"),
    "cohorts": (_path, "none"),
    "schema": (_mapping, ""),
    # sample filters
    "birth_year_min": (int, "1951"),
    "birth_year_max": (int, "1975"),
    "death_window": (int, "3"),
    "one_off": (_bool, "true"),
    "small_gift_allowance": (_bool, "false"),
    "death_set": (_choice("parental", "relative"), "parental"),
    "exclude_ever_self_employed": (_bool, "false"),
    # estimator
    "delta": (int, "2"),
    "ref_offset": (int, "3"),
    "control_strategy": (_choice("all", "nearest"), "all"),
    "nearest_n": (int, "10"),
    "category": (str, "all"),
    "covariates": (_str_list, "age"),
    # heatmap
    "display_year_min": (_optional(int), "none"),
    "display_year_max": (_optional(int), "none"),
    "mask_alpha": (float, "0.05"),
    # aggregation and bootstrap
    "scheme": (_choice("unbalanced", "balanced"), "unbalanced"),
    "balanced_a": (_optional(int), "none"),
    "balanced_b": (_optional(int), "none"),
    "display_s_min": (int, "-15"),
    "display_s_max": (int, "15"),
    "replicates": (int, "999"),
    "level": (float, "0.95"),
    "dump_draws": (_bool, "false"),
    # dynamic TWFE
    "twfe_omitted": (_int_list, "-4,-3"),
    "twfe_s_min": (_optional(int), "none"),
    "twfe_s_max": (_optional(int), "none"),
    "twfe_include_never_treated": (_bool, "false"),
    "staggered_curve": (_path, "none"),
    # matching
    "match_cohort_min": (int, "2000"),
    "match_cohort_max": (int, "2004"),
    "match_clean_before": (int, "6"),
    "match_clean_after": (int, "6"),
    "match_offset": (int, "3"),
    "match_covariates": (_str_list, "age,sex,wage"),
    "match_pool": (_choice("all_nonrecipients", "nonrecipients_with_death"),
                   "all_nonrecipients"),
    "match_event_min": (int, "-6"),
    "match_event_max": (int, "6"),
    "match_caliper": (_optional(float), "none"),
    "match_replacement": (_bool, "true"),
    "match_transform": (_choice("ihs", "none"), "ihs"),
    # descriptives
    "describe_deltas": (_int_list, "0,1,2,3,4,5"),
    "describe_grouping": (_choice("category", "sex", "age50"), "category"),
    "describe_at": (_choice("event_year", "full_period"), "event_year"),
    # simulation
    "tau": (_optional(str), "none"),
    "tau_table": (_path, "none"),
    "sim_first_year": (int, "1993"),
    "sim_last_year": (int, "2017"),
    "sim_cohort_min": (int, "1996"),
    "sim_cohort_max": (int, "2017"),
    "sim_cohort_size": (int, "100"),
    "sim_never_treated": (int, "0"),
    "sim_anticipation": (int, "0"),
    "sim_noise_sd": (float, "20"),
    "sim_person_sd": (float, "50"),
    "sim_year_trend": (float, "3"),
    "sim_category": (_choice("I1", "I2", "I3", "I4"), "I4"),
    "sim_selection_sex": (float, "0"),
    "sim_selection_education": (float, "0"),
    "sim_birth_min": (int, "1951"),
    "sim_birth_max": (int, "1975"),
    "sim_death_offset": (int, "0"),
    "sim_never_treated_death_share": (float, "0"),
    "sim_business_share": (float, "0"),
}

PATH_KEYS = ("panel", "wage_index", "deaths", "cohorts", "tau_table",
             "staggered_curve", "out_dir")


def parse_text(text: str, source: str = "<config>") -> dict:
    """Raw ``key -> value text`` pairs; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{source}:{lineno}: expected key = value")
        key = key.strip()
        if key not in KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown key '{key}'")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: key '{key}' set twice")
        out[key] = value.strip()
    return out


class RunConfig(Mapping):
    """Parsed configuration with every key present (defaults filled in).

    ``explicit`` holds the keys set by the file or the environment.
    """

    def __init__(self, values: dict, explicit: set, base_dir: Path):
        self._values = values
        self.explicit = frozenset(explicit)
        self.base_dir = base_dir

    def __getitem__(self, key):
        return self._values[key]

    def __iter__(self):
        return iter(self._values)

    def __len__(self):
        return len(self._values)

    def path(self, key: str) -> Optional[Path]:
        value = self._values[key]
        if value is None:
            return None
        p = Path(value)
        return p if p.is_absolute() else self.base_dir / p

    def require(self, key: str):
        if self._values[key] is None:
            raise ConfigError(f"missing required key '{key}'")
        return self._values[key]

    def with_overrides(self, **values) -> "RunConfig":
        new = dict(self._values)
        new.update(values)
        return RunConfig(new, set(self.explicit) | set(values), self.base_dir)

    def as_text_dict(self) -> dict:
        """JSON-friendly copy for the run manifest."""
        out = {}
        for k, v in self._values.items():
            out[k] = list(v) if isinstance(v, tuple) else v
        return out

    @classmethod
    def from_sources(cls, raw: Mapping[str, str], env: Optional[Mapping] = None,
                     base_dir: Path = Path(".")) -> "RunConfig":
        env = os.environ if env is None else env
        merged = dict(raw)
        for name, value in env.items():
            if not name.startswith(ENV_PREFIX):
                continue
            key = name[len(ENV_PREFIX):].lower()
            if key not in KEYS:
                raise ConfigError(f"environment variable {name}: unknown key '{key}'")
            merged[key] = value
        values = {}
        for key, (parse, default) in KEYS.items():
            text = merged.get(key, default)
            try:
                values[key] = parse(text)
            except (ValueError, TypeError) as exc:
                raise ConfigError(f"key '{key}': cannot parse {text!r} ({exc})") from None
        return cls(values, set(merged), base_dir)


def load_config(path, env: Optional[Mapping] = None) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return RunConfig.from_sources(parse_text(text, str(path)), env,
                                  path.resolve().parent)
