"""Runs submitted verifier source in a stripped namespace and classifies the result.

Isolation layers, weakest to strongest:

1. a builtins table with no file, process, or attribute-poking facilities and
   an import hook limited to pure string/regex/math modules;
2. a ``SIGALRM`` raised at the task's wall budget (user code cannot reach the
   ``signal`` module to block it);
3. the host's hard kill at budget + grace, which covers code that stalls in C
   and never lets the alarm's exception surface.

Every task builds a brand-new namespace, so nothing a function defines or
mutates survives into the next task, even on the same worker process.
"""

import builtins
import inspect
import io
import signal
import time
import traceback
from contextlib import redirect_stderr, redirect_stdout

STDERR_LIMIT = 2048

ALLOWED_MODULES = frozenset({
    "re",
    "string",
    "math",
    "unicodedata",
    "textwrap",
    "collections",
    "itertools",
    "functools",
})

_ALLOWED_BUILTINS = (
    "abs", "all", "any", "ascii", "bin", "bool", "bytearray", "bytes",
    "callable", "chr", "complex", "dict", "divmod", "enumerate", "filter",
    "float", "format", "frozenset", "getattr", "hasattr", "hash", "hex",
    "int", "isinstance", "issubclass", "iter", "len", "list", "map", "max",
    "min", "next", "object", "oct", "ord", "pow", "range", "repr",
    "reversed", "round", "set", "slice", "sorted", "str", "sum", "tuple",
    "type", "zip",
    # exception types so user code can raise and catch normally
    "ArithmeticError", "AssertionError", "AttributeError", "BaseException",
    "Exception", "IndexError", "KeyError", "LookupError", "NameError",
    "NotImplementedError", "OverflowError", "RecursionError", "RuntimeError",
    "StopIteration", "TypeError", "ValueError", "ZeroDivisionError",
)


class WallTimeout(BaseException):
    """Raised by the alarm handler; BaseException so ``except Exception`` in
    user code cannot swallow it."""


def _limited_import(name, globals=None, locals=None, fromlist=(), level=0):
    root = name.split(".")[0]
    if level != 0 or root not in ALLOWED_MODULES:
        raise ImportError(f"import of {name!r} is not allowed here")
    return builtins.__import__(name, globals, locals, fromlist, level)


def make_builtins() -> dict:
    table = {name: getattr(builtins, name) for name in _ALLOWED_BUILTINS}
    table["__import__"] = _limited_import
    table["__build_class__"] = builtins.__build_class__
    table["__name__"] = "verifier"
    return table


def _alarm(signum, frame):
    raise WallTimeout()


class _Deadline:
    def __init__(self, timeout_ms: int):
        self.seconds = timeout_ms / 1000.0

    def __enter__(self):
        self._previous = signal.signal(signal.SIGALRM, _alarm)
        signal.setitimer(signal.ITIMER_REAL, self.seconds)
        return self

    def __exit__(self, *exc_info):
        signal.setitimer(signal.ITIMER_REAL, 0.0)
        signal.signal(signal.SIGALRM, self._previous)
        return False


def _excerpt() -> str:
    return traceback.format_exc(limit=3)[-STDERR_LIMIT:]


def _is_unary(fn) -> bool:
    if not callable(fn):
        return False
    try:
        inspect.signature(fn).bind("probe")
    except TypeError:
        return False
    except ValueError:
        pass  # no introspectable signature; give it the benefit of the doubt
    return True


def _run(op: str, source: str, input_text: str):
    """Define ``source`` fresh and run the requested op.

    Returns (status, value, excerpt).  WallTimeout propagates to the caller.
    """
    try:
        code = compile(source, "<verifier>", "exec")
    except SyntaxError:
        return "compile_error", None, _excerpt()

    namespace = {"__builtins__": make_builtins()}
    try:
        exec(code, namespace)
    except WallTimeout:
        raise
    except BaseException:
        # compile asks "is this well-formed?", so a failing module body is a
        # compile failure there; under eval it is the function's own fault
        status = "compile_error" if op == "compile" else "runtime_error"
        return status, None, _excerpt()

    fn = namespace.get("evaluate")
    if not _is_unary(fn):
        return "compile_error", None, "source must define a unary callable 'evaluate'"
    if op == "compile":
        return "ok", None, ""

    try:
        result = fn(input_text)
    except WallTimeout:
        raise
    except BaseException:
        return "runtime_error", None, _excerpt()
    if isinstance(result, bool):
        return "ok", result, ""
    return "bad_return", None, (
        f"evaluate returned {type(result).__name__}, expected bool"
    )


def handle_task(task: dict) -> dict:
    """One framed task in, one framed reply out.  Never raises."""
    started = time.monotonic()

    op = task.get("op")
    source = task.get("source")
    timeout_ms = task.get("timeout_ms", 2000)
    input_text = task.get("input", "")
    if (
        op not in ("compile", "eval")
        or not isinstance(source, str)
        or not isinstance(timeout_ms, int)
        or isinstance(timeout_ms, bool)
        or timeout_ms <= 0
        or not isinstance(input_text, str)
    ):
        return _reply("runtime_error", None,
                      f"protocol: malformed task fields {sorted(task)}", started)

    sink = io.StringIO()
    try:
        with _Deadline(timeout_ms), redirect_stdout(sink), redirect_stderr(sink):
            status, value, excerpt = _run(op, source, input_text)
    except WallTimeout:
        return _reply("timeout", None,
                      f"wall clock exceeded {timeout_ms} ms", started)
    except BaseException:
        return _reply("runtime_error", None, _excerpt(), started)
    return _reply(status, value, excerpt, started)


def _reply(status: str, value, excerpt: str, started: float) -> dict:
    if status != "ok" and not excerpt:
        excerpt = status
    return {
        "status": status,
        "value": value,
        "stderr_excerpt": excerpt[:STDERR_LIMIT],
        "duration_ms": int((time.monotonic() - started) * 1000),
    }
