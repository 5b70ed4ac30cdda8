"""Artifact helpers: atomic writes, checksums, JSON lines and seed splitting"""

import contextlib
import hashlib
import json
import os
import pathlib
import tempfile

from . import InputError


def derive_seed(global_seed, *names):
    """Split one global seed into a reproducible per-stage seed

    The rule is sha256 over ``"<seed>|<name>|<name>..."``, first 8 bytes read
    as a big-endian unsigned integer and masked to 63 bits.
    """
    key = "|".join([str(int(global_seed))] + [str(n) for n in names])
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") & (2**63 - 1)


def sha256_bytes(data):
    return hashlib.sha256(data).hexdigest()


def sha256_file(path):
    path = pathlib.Path(path)
    try:
        return sha256_bytes(path.read_bytes())
    except OSError as e:
        raise InputError(f"cannot read '{path}': {e.strerror}") from e


def canonical_json(obj):
    """JSON text with sorted keys and no insignificant whitespace"""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True)


def config_hash(obj):
    return sha256_bytes(canonical_json(obj).encode("utf-8"))[:16]


def atomic_write_bytes(path, data):
    """Write via a temporary file in the same directory, then rename over `path`"""
    path = pathlib.Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmpname = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    except OSError as e:
        raise InputError(f"cannot write '{path}': {e.strerror}") from e
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmpname, path)
    except BaseException as e:
        with contextlib.suppress(OSError):
            os.unlink(tmpname)
        if isinstance(e, OSError):
            raise InputError(f"cannot write '{path}': {e.strerror}") from e
        raise
    return path


def atomic_write_text(path, text):
    return atomic_write_bytes(path, text.encode("utf-8"))


def dumps_jsonl(objects):
    return "".join(canonical_json(obj) + "\n" for obj in objects)


def write_jsonl(path, objects):
    return atomic_write_text(path, dumps_jsonl(objects))


def read_jsonl(path):
    path = pathlib.Path(path)
    try:
        with open(path, encoding="utf-8") as f:
            return [json.loads(line) for line in f if line.strip()]
    except OSError as e:
        raise InputError(f"cannot read '{path}': {e.strerror}") from e
    except json.JSONDecodeError as e:
        raise InputError(f"'{path}' is not valid JSON lines: {e}") from e
