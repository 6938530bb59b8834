"""JSON-schema validation of the files psfnav reads and writes."""

from __future__ import annotations

import functools
import json
from importlib import resources

import jsonschema

from psfnav.errors import ConfigurationError

SCHEMAS = ("scenario", "terminal_set", "synth_config", "metrics", "report", "telemetry")


@functools.lru_cache(maxsize=None)
def load_schema(name: str) -> dict:
    if name not in SCHEMAS:
        raise KeyError(f"no schema named {name!r}")
    text = resources.files("psfnav").joinpath("schemas", f"{name}.schema.json").read_text()
    return json.loads(text)


def validate(data, name: str) -> None:
    """Raise ConfigurationError naming the offending field when ``data`` does not match."""
    schema = load_schema(name)
    validator = jsonschema.Draft202012Validator(schema)
    err = jsonschema.exceptions.best_match(validator.iter_errors(data))
    if err is not None:
        where = "/".join(str(p) for p in err.absolute_path) or "<root>"
        raise ConfigurationError(f"{name} schema error at {where}: {err.message}")
