"""Flat dotted-key configuration text: parsing, canonical form, hashing.

The on-disk form is one `key = value` pair per line, UTF-8, '#' comments.
The canonical form sorts keys and normalizes whitespace so that equal
configurations always hash identically.
"""

import hashlib

from .errors import ConfigError


def parse_kv(text):
    """Parse flat key/value text into a dict of strings."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        out[key] = value.strip()
    return out


def load_kv(path):
    with open(path, "r", encoding="utf-8") as fh:
        return parse_kv(fh.read())


def canonical_text(pairs):
    """Render a dict as canonical key-sorted `key = value` lines."""
    lines = [f"{k} = {pairs[k]}" for k in sorted(pairs)]
    return "\n".join(lines) + "\n" if lines else ""


def config_hash(pairs):
    """Short stable hash of the canonical form."""
    return hashlib.sha256(canonical_text(pairs).encode("utf-8")).hexdigest()[:16]


def get_typed(pairs, key, kind, default=None):
    """Fetch and convert a config value, raising ConfigError on bad input."""
    if key not in pairs:
        if default is not None or _allows_none(kind):
            return default
        raise ConfigError(f"missing required config key {key!r}")
    raw = pairs[key]
    try:
        if kind is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return kind(raw)
    except ValueError:
        raise ConfigError(f"config key {key!r}: cannot parse {raw!r} as {kind.__name__}") from None


def _allows_none(kind):
    return kind is str


def fmt_float(x):
    """Shortest round-trip decimal text for a float value."""
    return repr(float(x))
