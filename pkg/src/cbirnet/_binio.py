"""Shared primitives for the versioned binary container files.

Both persisted artifacts (checkpoint, feature index) share one envelope:
an 8-byte magic, a little-endian u32 format version, a u32 header length,
and a UTF-8 JSON header with sorted keys, followed by format-specific
binary payload. Readers fail loudly: wrong magic, unreadable header, or
short reads each raise their own error type.
"""

from __future__ import annotations

import json
import struct

from .errors import FormatError, TruncatedFileError


def read_exact(f, n, what):
    buf = f.read(n)
    if len(buf) != n:
        raise TruncatedFileError(
            f"file ends inside {what}: wanted {n} bytes, got {len(buf)}")
    return buf


def write_container_header(f, magic, version, header_obj):
    header_bytes = json.dumps(header_obj, sort_keys=True,
                              separators=(",", ":")).encode("utf-8")
    f.write(magic)
    f.write(struct.pack("<I", version))
    f.write(struct.pack("<I", len(header_bytes)))
    f.write(header_bytes)


def read_container_header(f, magic, kind):
    lead = f.read(len(magic))
    if lead != magic:
        raise FormatError(
            f"not a {kind} file: expected magic {magic!r}, found {lead!r}")
    (version,) = struct.unpack("<I", read_exact(f, 4, "format version"))
    (hlen,) = struct.unpack("<I", read_exact(f, 4, "header length"))
    raw = read_exact(f, hlen, "JSON header")
    try:
        header = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable {kind} header: {exc}") from exc
    return version, header
