"""Guest-side harness for running untrusted verifier functions.

The host process spawns ``python -m guestbox`` and exchanges length-prefixed
JSON frames over stdin/stdout.  Each task carries a source string that must
define a unary callable ``evaluate``; the harness runs it in a stripped
namespace under a self-imposed alarm and replies with a structured outcome.
"""

from .harness import handle_task

__all__ = ["handle_task"]
