"""Frame loop: one version byte, a big-endian uint32 length, then a JSON object.

Requests look like ``{"op": "compile"|"eval", "source": ..., "input": ...,
"timeout_ms": ...}``; replies carry ``{"status", "value", "stderr_excerpt",
"duration_ms"}``.  A clean EOF on stdin ends the loop; a framing violation is
answered once and then the process exits nonzero so the host respawns it
rather than guessing where the next frame starts.
"""

import json
import struct
import sys

from .harness import STDERR_LIMIT, handle_task

FRAME_VERSION = 1
MAX_FRAME_BYTES = 8 * 1024 * 1024


class ProtocolViolation(Exception):
    pass


def _read_exact(stream, n: int):
    buf = bytearray()
    while len(buf) < n:
        chunk = stream.read(n - len(buf))
        if not chunk:
            if buf:
                raise ProtocolViolation("stream closed mid-frame")
            return None
        buf.extend(chunk)
    return bytes(buf)


def read_task(stream):
    """Next task dict, or None at a clean end of stream."""
    header = _read_exact(stream, 5)
    if header is None:
        return None
    if header[0] != FRAME_VERSION:
        raise ProtocolViolation(f"unsupported frame version {header[0]}")
    (length,) = struct.unpack(">I", header[1:])
    if length > MAX_FRAME_BYTES:
        raise ProtocolViolation(f"frame of {length} bytes exceeds cap")
    raw = _read_exact(stream, length)
    if raw is None:
        raise ProtocolViolation("stream closed mid-frame")
    try:
        payload = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ProtocolViolation(f"frame payload is not valid JSON: {exc}") from exc
    if not isinstance(payload, dict):
        raise ProtocolViolation("frame payload must be an object")
    return payload


def write_reply(stream, payload: dict) -> None:
    raw = json.dumps(payload, ensure_ascii=False).encode("utf-8")
    stream.write(bytes([FRAME_VERSION]) + struct.pack(">I", len(raw)) + raw)
    stream.flush()


def main() -> int:
    stdin = sys.stdin.buffer
    stdout = sys.stdout.buffer
    while True:
        try:
            task = read_task(stdin)
        except ProtocolViolation as exc:
            write_reply(stdout, {
                "status": "runtime_error",
                "value": None,
                "stderr_excerpt": f"protocol: {exc}"[:STDERR_LIMIT],
                "duration_ms": 0,
            })
            return 1
        if task is None:
            return 0
        write_reply(stdout, handle_task(task))


if __name__ == "__main__":
    sys.exit(main())
