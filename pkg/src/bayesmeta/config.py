"""Plain-text key=value configuration and run manifests.

Config files hold one ``key = value`` pair per line ('#' comments allowed);
values are parsed as int, float, bool, comma-separated lists of those, or
strings. Command-line --set overrides use the same syntax. Every command
resolves its full config against a schema of defaults, rejects unknown keys
with the offending field path, and records the resolved config in a JSON
manifest alongside digests of every output file, so a run can be reproduced
bitwise from its manifest.
"""

from __future__ import annotations

import datetime
import hashlib
import json
from pathlib import Path
from typing import Any, Dict, List, Optional


class ConfigError(ValueError):
    pass


def parse_scalar(text: str) -> Any:
    s = text.strip()
    if s.lower() in ("true", "false"):
        return s.lower() == "true"
    try:
        return int(s)
    except ValueError:
        pass
    try:
        return float(s)
    except ValueError:
        pass
    return s


def parse_value(text: str) -> Any:
    s = text.strip()
    if "," in s:
        return [parse_scalar(part) for part in s.split(",") if part.strip()]
    return parse_scalar(s)


def parse_config_file(path: str) -> Dict[str, Any]:
    out: Dict[str, Any] = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, _, value = line.partition("=")
        out[key.strip()] = parse_value(value)
    return out


def resolve_config(defaults: Dict[str, Any], file_path: Optional[str],
                   overrides: List[str]) -> Dict[str, Any]:
    """Defaults <- config file <- --set overrides, with unknown-key checks."""
    cfg = dict(defaults)

    def apply(key: str, value: Any, origin: str):
        if key not in defaults:
            raise ConfigError(f"unknown config key {key!r} (from {origin}); "
                              f"known keys: {', '.join(sorted(defaults))}")
        cfg[key] = value

    if file_path is not None:
        for k, v in parse_config_file(file_path).items():
            apply(k, v, file_path)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, _, value = item.partition("=")
        apply(key.strip(), parse_value(value), "--set")
    return cfg


def as_int_list(value: Any, key: str) -> List[int]:
    items = value if isinstance(value, list) else [value]
    try:
        return [int(v) for v in items]
    except (TypeError, ValueError):
        raise ConfigError(f"config field {key!r} must be an integer list")


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    h.update(path.read_bytes())
    return h.hexdigest()


def write_manifest(out_dir: Path, command: str, config: Dict[str, Any],
                   seeds: List[int], outputs: List[Path],
                   started: str, version: str) -> Path:
    manifest = {
        "schema": "bayesmeta.manifest.v1",
        "command": command,
        "config": config,
        "seeds": seeds,
        "code_version": version,
        "started": started,
        "finished": datetime.datetime.now(datetime.timezone.utc).isoformat(),
        "outputs": {p.name: sha256_file(p) for p in outputs},
    }
    path = out_dir / f"{command}_manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def utc_now() -> str:
    return datetime.datetime.now(datetime.timezone.utc).isoformat()
