"""Execution of verification functions under resource budgets.

Two executors share one interface:

* ``NativeEvaluator`` understands a small constraint grammar (length/word/line
  counts, forbidden characters, prefix/suffix) plus a few diagnostic forms,
  and runs entirely in-process.  It exists so the full offline test pipeline
  needs no guest runtime.
* ``GuestProcessExecutor`` ships arbitrary function source to long-lived
  worker processes over a length-prefixed JSON frame protocol, enforcing a
  hard wall-clock kill and a spawn-time memory cap, and replacing any worker
  that timed out or died so state cannot leak between tasks.
"""

from __future__ import annotations

import json
import logging
import os
import queue
import re
import select
import struct
import subprocess
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

from .datamodel import OUTCOME_STATUSES, EvalOutcome, VerifierFunction

logger = logging.getLogger(__name__)

FRAME_VERSION = 1
KILL_GRACE_MS = 500
_MAX_FRAME_BYTES = 8 * 1024 * 1024
_STDERR_EXCERPT_LIMIT = 2048


class SandboxError(Exception):
    """Base for executor transport/configuration failures."""


class ProtocolError(SandboxError):
    """A frame violated the wire protocol."""


class WorkerDied(SandboxError):
    """The guest process exited or closed its pipes mid-conversation."""


@dataclass(frozen=True)
class ExecBudget:
    wall_timeout_ms: int = 2000
    memory_cap_bytes: int = 256 * 1024 * 1024
    max_output_bytes: int = 64 * 1024

    def __post_init__(self):
        if self.wall_timeout_ms < 100:
            raise ValueError(f"wall_timeout_ms must be >= 100, got {self.wall_timeout_ms}")
        if self.memory_cap_bytes <= 0 or self.max_output_bytes <= 0:
            raise ValueError("memory_cap_bytes and max_output_bytes must be positive")


# --- wire framing (shared with the guest runtime) -----------------------------

def write_frame(stream, payload: dict) -> None:
    raw = json.dumps(payload, ensure_ascii=False).encode("utf-8")
    stream.write(bytes([FRAME_VERSION]) + struct.pack(">I", len(raw)) + raw)
    stream.flush()


def _read_exact(fd: int, n: int, deadline: Optional[float]) -> bytes:
    chunks = bytearray()
    while len(chunks) < n:
        if deadline is not None:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise TimeoutError("frame read deadline exceeded")
            ready, _, _ = select.select([fd], [], [], remaining)
            if not ready:
                raise TimeoutError("frame read deadline exceeded")
        chunk = os.read(fd, n - len(chunks))
        if not chunk:
            raise WorkerDied("guest closed its output stream")
        chunks.extend(chunk)
    return bytes(chunks)


def read_frame(fd: int, deadline: Optional[float] = None) -> dict:
    header = _read_exact(fd, 5, deadline)
    if header[0] != FRAME_VERSION:
        raise ProtocolError(f"unsupported frame version {header[0]}")
    (length,) = struct.unpack(">I", header[1:5])
    if length > _MAX_FRAME_BYTES:
        raise ProtocolError(f"frame of {length} bytes exceeds cap")
    raw = _read_exact(fd, length, deadline)
    try:
        payload = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ProtocolError(f"frame payload is not valid JSON: {exc}") from exc
    if not isinstance(payload, dict):
        raise ProtocolError("frame payload must be an object")
    return payload


# --- native evaluator ----------------------------------------------------------
#
# Grammar (one rule per function source):
#   length <=|>=|== N      characters in the response
#   words  <=|>=|== N      whitespace-delimited tokens
#   lines  == N            newline-delimited lines
#   forbid "CHARS"         none of the characters may appear
#   prefix "TEXT"          response starts with TEXT
#   suffix "TEXT"          response ends with TEXT
# plus diagnostics for fault-injection tests:
#   always_true | always_false | raise_error | return_nonbool

_COUNT_RULE = re.compile(r"^(length|words)\s*(<=|>=|==)\s*(\d+)$")
_LINES_RULE = re.compile(r"^lines\s*==\s*(\d+)$")
_TEXT_RULE = re.compile(r'^(forbid|prefix|suffix)\s+"([^"]*)"$')
_DIAGNOSTICS = ("always_true", "always_false", "raise_error", "return_nonbool")


def parse_native_rule(source: str):
    """Parse one native-grammar rule; returns an opaque tuple or None."""
    text = source.strip()
    m = _COUNT_RULE.match(text)
    if m:
        return (m.group(1), m.group(2), int(m.group(3)))
    m = _LINES_RULE.match(text)
    if m:
        return ("lines", "==", int(m.group(1)))
    m = _TEXT_RULE.match(text)
    if m:
        return (m.group(1), m.group(2))
    if text in _DIAGNOSTICS:
        return (text,)
    return None


def _apply_native_rule(rule, response: str) -> bool:
    kind = rule[0]
    if kind in ("length", "words", "lines"):
        _, op, n = rule
        if kind == "length":
            actual = len(response)
        elif kind == "words":
            actual = len(response.split())
        else:
            actual = len(response.split("\n"))
        if op == "<=":
            return actual <= n
        if op == ">=":
            return actual >= n
        return actual == n
    if kind == "forbid":
        return all(ch not in response for ch in rule[1])
    if kind == "prefix":
        return response.startswith(rule[1])
    if kind == "suffix":
        return response.endswith(rule[1])
    raise AssertionError(f"unreachable rule kind {kind}")


class NativeEvaluator:
    """In-process executor for the constraint grammar; thread-safe, no state."""

    kind = "native"

    def compile_check(self, func: VerifierFunction, budget: ExecBudget) -> EvalOutcome:
        rule = parse_native_rule(func.source_code)
        if rule is None:
            return EvalOutcome(status="compile_error", value=None, duration_ms=0.0)
        return EvalOutcome(status="ok", value=None, duration_ms=0.0)

    def evaluate(self, func: VerifierFunction, input: str, budget: ExecBudget) -> EvalOutcome:
        started = time.monotonic()
        rule = parse_native_rule(func.source_code)
        if rule is None:
            return EvalOutcome(status="compile_error", value=None, duration_ms=0.0)
        elapsed = lambda: (time.monotonic() - started) * 1000.0
        if rule[0] == "always_true":
            return EvalOutcome(status="ok", value=True, duration_ms=elapsed())
        if rule[0] == "always_false":
            return EvalOutcome(status="ok", value=False, duration_ms=elapsed())
        if rule[0] == "raise_error":
            return EvalOutcome(status="runtime_error", value=None, duration_ms=elapsed())
        if rule[0] == "return_nonbool":
            return EvalOutcome(status="bad_return", value=None, duration_ms=elapsed())
        verdict = _apply_native_rule(rule, input)
        return EvalOutcome(status="ok", value=verdict, duration_ms=elapsed())

    def close(self) -> None:
        pass


# --- guest process executor -----------------------------------------------------


class _GuestWorker:
    """One guest process: spawn, framed round-trips, kill."""

    def __init__(self, command: list[str], memory_cap_bytes: int):
        self.command = list(command)
        self.memory_cap_bytes = memory_cap_bytes
        self.proc = self._spawn()

    def _spawn(self) -> subprocess.Popen:
        cap = self.memory_cap_bytes

        def limit_resources():
            import resource

            try:
                resource.setrlimit(resource.RLIMIT_AS, (cap, cap))
            except (ValueError, OSError):
                pass  # caps are best-effort on exotic kernels

        return subprocess.Popen(
            self.command,
            stdin=subprocess.PIPE,
            stdout=subprocess.PIPE,
            stderr=subprocess.DEVNULL,
            bufsize=0,
            preexec_fn=limit_resources,
        )

    def request(self, payload: dict, deadline: float) -> dict:
        try:
            write_frame(self.proc.stdin, payload)
        except (BrokenPipeError, OSError) as exc:
            raise WorkerDied(f"guest stdin closed: {exc}") from exc
        return read_frame(self.proc.stdout.fileno(), deadline)

    def kill(self) -> None:
        try:
            self.proc.kill()
        except OSError:
            pass
        try:
            self.proc.wait(timeout=5)
        except subprocess.TimeoutExpired:
            logger.error("guest worker pid %s refused to die", self.proc.pid)

    def close(self) -> None:
        try:
            self.proc.stdin.close()
        except OSError:
            pass
        try:
            self.proc.wait(timeout=0.5)
        except subprocess.TimeoutExpired:
            self.kill()


class GuestProcessExecutor:
    """Executor backed by a pool of guest worker processes (one per lane).

    The memory cap is installed at worker spawn from ``spawn_budget``; the
    per-call budget sets the wall timeout shipped with each task.  Any worker
    that times out, dies, or speaks garbage is killed and replaced before its
    lane is reused, so no task can observe a predecessor's state.
    """

    kind = "guest_process"

    def __init__(self, command: list[str], lanes: int = 1,
                 spawn_budget: ExecBudget = ExecBudget()):
        if lanes < 1:
            raise ValueError(f"lanes must be >= 1, got {lanes}")
        self.command = list(command)
        self.spawn_budget = spawn_budget
        self._lanes: queue.Queue = queue.Queue()
        self._all: list[_GuestWorker] = []
        self._lock = threading.Lock()
        for _ in range(lanes):
            worker = _GuestWorker(self.command, spawn_budget.memory_cap_bytes)
            self._all.append(worker)
            self._lanes.put(worker)

    def _replace(self, worker: _GuestWorker) -> _GuestWorker:
        worker.kill()
        fresh = _GuestWorker(self.command, self.spawn_budget.memory_cap_bytes)
        with self._lock:
            self._all.remove(worker)
            self._all.append(fresh)
        return fresh

    def _roundtrip(self, op: str, source: str, input: str, budget: ExecBudget) -> EvalOutcome:
        worker = self._lanes.get()
        deadline = time.monotonic() + (budget.wall_timeout_ms + KILL_GRACE_MS) / 1000.0
        started = time.monotonic()
        respawn = False
        try:
            try:
                reply = worker.request(
                    {"op": op, "source": source, "input": input,
                     "timeout_ms": budget.wall_timeout_ms},
                    deadline,
                )
            except TimeoutError:
                respawn = True
                return EvalOutcome(
                    status="timeout", value=None,
                    duration_ms=(time.monotonic() - started) * 1000.0,
                )
            except (WorkerDied, ProtocolError) as exc:
                logger.warning("guest worker fault: %s", exc)
                respawn = True
                return EvalOutcome(
                    status="runtime_error", value=None,
                    duration_ms=(time.monotonic() - started) * 1000.0,
                )
            outcome = self._to_outcome(op, reply)
            if outcome is None:
                logger.warning("guest reply malformed: %r", reply)
                respawn = True
                return EvalOutcome(status="runtime_error", value=None, duration_ms=0.0)
            if outcome.status == "timeout":
                respawn = True  # the alarm fired mid-task; never trust that worker again
            return outcome
        finally:
            if respawn:
                worker = self._replace(worker)
            self._lanes.put(worker)

    @staticmethod
    def _to_outcome(op: str, reply: dict) -> Optional[EvalOutcome]:
        status = reply.get("status")
        value = reply.get("value")
        duration = reply.get("duration_ms", 0)
        excerpt = reply.get("stderr_excerpt", "")
        if status not in OUTCOME_STATUSES or not isinstance(duration, (int, float)):
            return None
        if status == "ok":
            if op == "eval" and not isinstance(value, bool):
                return None
            if op == "compile":
                value = None
        else:
            value = None
            if excerpt:
                logger.debug("guest %s: %s", status, str(excerpt)[:_STDERR_EXCERPT_LIMIT])
        try:
            return EvalOutcome(status=status, value=value, duration_ms=float(duration))
        except ValueError:
            return None

    def compile_check(self, func: VerifierFunction, budget: ExecBudget) -> EvalOutcome:
        return self._roundtrip("compile", func.source_code, "", budget)

    def evaluate(self, func: VerifierFunction, input: str, budget: ExecBudget) -> EvalOutcome:
        return self._roundtrip("eval", func.source_code, input, budget)

    def close(self) -> None:
        with self._lock:
            workers = list(self._all)
            self._all.clear()
        for worker in workers:
            worker.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc_info):
        self.close()
        return False


# --- matrix evaluation -----------------------------------------------------------


def evaluate_matrix(
    executor,
    funcs: list[VerifierFunction],
    inputs: list[str],
    budget: ExecBudget,
    workers: int = 1,
) -> list[list[EvalOutcome]]:
    """Evaluate every function against every input; cell (i, j) = funcs[i] on inputs[j].

    The matrix is always complete — individual failures become non-ok cells,
    never aborts.  Cells carry only the pure verdict (duration zeroed) so that
    parallel and sequential runs of the same batch compare equal.
    """

    def cell(task):
        i, j = task
        out = executor.evaluate(funcs[i], inputs[j], budget)
        return EvalOutcome(status=out.status, value=out.value, duration_ms=0.0)

    tasks = [(i, j) for i in range(len(funcs)) for j in range(len(inputs))]
    if workers <= 1 or len(tasks) <= 1:
        flat = [cell(t) for t in tasks]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            flat = list(pool.map(cell, tasks))
    width = len(inputs)
    return [flat[i * width:(i + 1) * width] for i in range(len(funcs))]
