import re
import tomllib
from pathlib import Path
from typing import Any

_KEY_VALUE = re.compile(r"^\s*([A-Za-z_][\w.-]*)\s*=\s*(.*?)\s*$")


def parse_key_values(text: str) -> dict[str, str]:
    """Parse ``key=value`` lines; blank lines and ``#`` comments are skipped."""
    values: dict[str, str] = {}
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0]
        if not line.strip():
            continue
        match = _KEY_VALUE.match(line)
        if match is None:
            raise ValueError(f"line {line_no}: expected key=value, got {raw.strip()!r}")
        values[match.group(1).replace("-", "_")] = match.group(2)
    return values


def coerce_value(text: str) -> Any:
    """Turn a config string into bool, int or float where it reads as one."""
    lowered = text.lower()
    if lowered in ("true", "yes", "on"):
        return True
    if lowered in ("false", "no", "off"):
        return False
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def load_config_file(path: str | Path) -> dict[str, Any]:
    """Read a ``.toml`` table or a plain key=value file into flag defaults."""
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    if path.suffix == ".toml":
        return {key.replace("-", "_"): value for key, value in tomllib.loads(text).items()}
    return {key: coerce_value(value) for key, value in parse_key_values(text).items()}
