"""Flat `key = value` text files used for configs, schemas, and reports."""

from .tensor import FormatError


def parse_kv(text):
    """Parse UTF-8 key-value lines into an ordered dict.

    Blank lines and `#` comments are ignored; duplicate keys are rejected.
    """
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if not key:
            raise FormatError(f"line {lineno}: empty key")
        if key in out:
            raise FormatError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def format_kv(pairs):
    return "".join(f"{k} = {v}\n" for k, v in pairs)


def read_kv(path):
    with open(path, "r", encoding="utf-8") as fh:
        return parse_kv(fh.read())


def write_kv(path, pairs):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(format_kv(pairs))
