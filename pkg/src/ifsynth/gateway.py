"""Chat-completion gateway: templates, rejection sampling, provider clients.

Two providers are supplied: an HTTP client for any chat-completions endpoint,
and a scripted provider that replays fixture files for fully deterministic
offline runs.  ``sample_k`` draws K independent completions, retries transport
failures, and pads unrecoverable slots with explicit failure markers so that
downstream counts stay auditable.
"""

from __future__ import annotations

import json
import logging
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional

from . import prompts

logger = logging.getLogger(__name__)


class ProviderError(Exception):
    """Transport-level failure talking to a completion provider."""


class TemplateError(ValueError):
    """A template slot was missing or unresolved."""


class PromptTemplateId(str, Enum):
    self_instruct = "self_instruct"
    verifier_gen = "verifier_gen"
    back_translate = "back_translate"
    response_gen = "response_gen"
    quality_judge = "quality_judge"


@dataclass(frozen=True)
class SamplingParams:
    temperature: float = 0.7
    k: int = 1
    max_tokens: int = 1024
    seed: Optional[int] = None

    def __post_init__(self):
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if self.temperature < 0:
            raise ValueError(f"temperature must be >= 0, got {self.temperature}")
        if self.max_tokens < 1:
            raise ValueError(f"max_tokens must be >= 1, got {self.max_tokens}")


@dataclass(frozen=True)
class Completion:
    """One slot of a sample_k call; ok=False marks an exhausted-retries failure."""

    index: int
    text: str
    ok: bool
    error: Optional[str] = None


def render_prompt(template: PromptTemplateId, vars: dict[str, str]) -> str:
    """Fill a template's declared slots by literal replacement.

    Only the declared slot names are substituted — templates legitimately
    contain other brace constructs (JSON examples, the score directive) that
    must survive verbatim.
    """
    template_id = PromptTemplateId(template).value
    text = prompts.TEMPLATE_TEXT[template_id]
    for slot in prompts.TEMPLATE_SLOTS[template_id]:
        if slot not in vars:
            raise TemplateError(f"missing slot {slot}")
        text = text.replace("{" + slot + "}", vars[slot])
    for slot in prompts.TEMPLATE_SLOTS[template_id]:
        if "{" + slot + "}" in text:
            raise TemplateError(f"unresolved slot {slot}")
    return text


def parse_dashed_list(completion: str) -> list[str]:
    """Extract '- ' bullet lines, marker stripped and trimmed; ignore the rest."""
    items = []
    for line in completion.split("\n"):
        if line.startswith("- "):
            item = line[2:].strip()
            if item:
                items.append(item)
    return items


# --- providers ---------------------------------------------------------------


class ScriptedProvider:
    """Replays canned completions from fixture files.

    Fixture layout: one ``<script_key>.json`` file per key, holding an ordered
    list of entries.  An entry is either a completion string or an object
    ``{"error": "..."}``; error entries make that slot fail persistently
    (every retry re-observes the scripted failure), so a scripted fault plus
    any retry budget still yields a failure-marked slot.
    """

    def __init__(self, fixtures_dir: str):
        self.fixtures_dir = fixtures_dir
        self._scripts: dict[str, list] = {}
        self._cursors: dict[str, int] = {}
        self._lock = threading.Lock()

    def _script(self, key: str) -> list:
        if key not in self._scripts:
            path = os.path.join(self.fixtures_dir, f"{key}.json")
            try:
                with open(path, encoding="utf-8") as fh:
                    entries = json.load(fh)
            except FileNotFoundError:
                raise ProviderError(f"no fixture script for key '{key}' at {path}")
            if not isinstance(entries, list):
                raise ProviderError(f"fixture script {path} must hold a list")
            self._scripts[key] = entries
        return self._scripts[key]

    def start_slot(self, script_key: str, prompt: str, params: SamplingParams) -> Callable[[], str]:
        with self._lock:
            script = self._script(script_key)
            cursor = self._cursors.get(script_key, 0)
            if cursor >= len(script):
                raise ProviderError(
                    f"fixture script '{script_key}' exhausted after {cursor} entries"
                )
            entry = script[cursor]
            self._cursors[script_key] = cursor + 1

        def attempt() -> str:
            if isinstance(entry, dict) and "error" in entry:
                raise ProviderError(f"scripted failure: {entry['error']}")
            if not isinstance(entry, str):
                raise ProviderError(f"fixture entry {cursor} of '{script_key}' is not a string")
            return entry

        return attempt

    def snapshot(self) -> dict:
        with self._lock:
            return dict(self._cursors)

    def restore(self, state: dict) -> None:
        with self._lock:
            self._cursors = {str(k): int(v) for k, v in state.items()}


class HttpChatProvider:
    """Minimal chat-completions client (model + messages + temperature)."""

    def __init__(
        self,
        base_url: str,
        model: str,
        auth_env: str = "PROVIDER_API_KEY",
        request_timeout: float = 120.0,
    ):
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.auth_env = auth_env
        self.request_timeout = request_timeout

    def start_slot(self, script_key: str, prompt: str, params: SamplingParams) -> Callable[[], str]:
        def attempt() -> str:
            import requests

            headers = {"Content-Type": "application/json"}
            token = os.environ.get(self.auth_env, "")
            if token:
                headers["Authorization"] = f"Bearer {token}"
            body = {
                "model": self.model,
                "messages": [{"role": "user", "content": prompt}],
                "temperature": params.temperature,
                "max_tokens": params.max_tokens,
            }
            try:
                resp = requests.post(
                    f"{self.base_url}/chat/completions",
                    json=body,
                    headers=headers,
                    timeout=self.request_timeout,
                )
            except requests.RequestException as exc:
                raise ProviderError(f"request failed: {exc}") from exc
            if resp.status_code != 200:
                raise ProviderError(f"provider returned HTTP {resp.status_code}")
            try:
                return resp.json()["choices"][0]["message"]["content"]
            except (KeyError, IndexError, TypeError, ValueError) as exc:
                raise ProviderError(f"malformed provider response: {exc}") from exc

        return attempt

    def snapshot(self) -> dict:
        return {}

    def restore(self, state: dict) -> None:
        pass


@dataclass
class Gateway:
    """Provider plus sampling policy: the one surface stages talk to."""

    provider: object
    retry_budget: int = 3
    retry_backoff: float = 0.5
    in_flight: int = 4

    def sample_k(self, script_key: str, prompt: str, params: SamplingParams) -> list[Completion]:
        """Draw exactly params.k completions, ordered by sample index.

        Slots are acquired from the provider in index order (which pins
        scripted fixtures deterministically), then attempted with retries.
        Slots that exhaust the retry budget come back as ok=False markers
        rather than being dropped.
        """
        thunks = [
            self.provider.start_slot(script_key, prompt, params)
            for _ in range(params.k)
        ]

        def run(indexed: tuple[int, Callable[[], str]]) -> Completion:
            index, thunk = indexed
            last_error: Optional[str] = None
            for attempt in range(self.retry_budget + 1):
                try:
                    return Completion(index=index, text=thunk(), ok=True)
                except ProviderError as exc:
                    last_error = str(exc)
                    if attempt < self.retry_budget and self.retry_backoff > 0:
                        time.sleep(self.retry_backoff * (2**attempt))
            logger.warning("sample slot %d failed after retries: %s", index, last_error)
            return Completion(index=index, text="", ok=False, error=last_error)

        work = list(enumerate(thunks))
        if self.in_flight <= 1 or params.k == 1:
            results = [run(item) for item in work]
        else:
            with ThreadPoolExecutor(max_workers=min(self.in_flight, params.k)) as pool:
                results = list(pool.map(run, work))
        results.sort(key=lambda c: c.index)
        return results

    def sample_one(self, script_key: str, prompt: str, params: SamplingParams) -> Completion:
        one = SamplingParams(
            temperature=params.temperature, k=1, max_tokens=params.max_tokens, seed=params.seed
        )
        return self.sample_k(script_key, prompt, one)[0]

    def snapshot(self) -> dict:
        return self.provider.snapshot()

    def restore(self, state: dict) -> None:
        self.provider.restore(state)
