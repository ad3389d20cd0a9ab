"""Stage 1: instruction augmentation, verifier generation, cross-validation,
and back-translation consistency gating.

The flow per instruction: sample K candidate verification functions with test
cases, execute the full function × case matrix, mutually filter both sides by
strict >0.5 accuracy, then regenerate instruction text from each surviving
function and drop the instruction if any regenerated text contradicts the
original under an NLI scorer.  Only contradiction drops; unparseable
back-translations are flagged and kept.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import re
from dataclasses import dataclass
from typing import Optional

from .datamodel import (
    Instruction,
    TestCase,
    VerifierFunction,
    make_case,
    make_instruction,
    make_verifier,
    normalize_text,
)
from .gateway import Gateway, PromptTemplateId, SamplingParams, render_prompt
from .sandbox import ExecBudget, evaluate_matrix

logger = logging.getLogger(__name__)

NLI_LABELS = ("entailment", "neutral", "contradiction")

# fixed stub probability profiles, one per label
_STUB_PROBS = {
    "entailment": (0.8, 0.15, 0.05),
    "neutral": (0.1, 0.8, 0.1),
    "contradiction": (0.05, 0.15, 0.8),
}


class StageError(Exception):
    """A work unit failed in a way that should stop the stage for resume."""

    def __init__(self, message: str, unit: str = ""):
        super().__init__(message)
        self.unit = unit


@dataclass(frozen=True)
class NLIVerdict:
    probs: tuple[float, float, float]  # (entailment, neutral, contradiction)
    label: str

    def __post_init__(self):
        if len(self.probs) != 3 or any(p < 0 for p in self.probs):
            raise ValueError(f"probs must be three nonnegative fractions, got {self.probs}")
        if abs(sum(self.probs) - 1.0) > 1e-6:
            raise ValueError(f"probs must sum to 1, got {sum(self.probs)}")
        if self.label not in NLI_LABELS:
            raise ValueError(f"bad NLI label {self.label!r}")
        if self.label != NLI_LABELS[max(range(3), key=lambda i: self.probs[i])]:
            raise ValueError("label must be the argmax of probs")


def verdict_from_probs(probs: tuple[float, float, float]) -> NLIVerdict:
    """Label by argmax; ties resolve to the earlier class in (e, n, c) order."""
    probs = tuple(float(p) for p in probs)
    label = NLI_LABELS[max(range(3), key=lambda i: probs[i])]
    return NLIVerdict(probs=probs, label=label)


@dataclass
class VerifierBundle:
    """One instruction's functions, cases, and (once computed) their matrix."""

    instruction_id: str
    functions: list[VerifierFunction]
    cases: list[TestCase]
    matrix: Optional[list[list]] = None  # compiled functions × cases
    stage: str = "generated"
    malformed_payloads: int = 0
    failed_slots: int = 0

    def __post_init__(self):
        if self.stage not in ("generated", "cross_verified"):
            raise ValueError(f"bad bundle stage {self.stage!r}")
        if self.matrix is not None:
            compiled = [f for f in self.functions if f.compile_ok]
            if len(self.matrix) != len(compiled) or any(
                len(row) != len(self.cases) for row in self.matrix
            ):
                raise ValueError("matrix dimensions must be compiled functions × cases")
        if self.stage == "cross_verified" and (not self.functions or not self.cases):
            raise ValueError("cross_verified bundle must retain >= 1 function and case")

    def compiled_functions(self) -> list[VerifierFunction]:
        return [f for f in self.functions if f.compile_ok]


@dataclass(frozen=True)
class BackTranslation:
    """Audit record for one function's regenerated instruction text."""

    function_id: str
    instruction_id: str
    hypothesis: Optional[str]
    flagged: bool  # completion did not parse as a list of strings
    raw_completion: str
    verdict: Optional[NLIVerdict] = None


# --- augmentation -----------------------------------------------------------------


def augmentations_for_seed(
    gateway: Gateway, seed: Instruction, k: int, params: SamplingParams
) -> list[Instruction]:
    """One rewrite call for one seed; parsed bullets become augmented children."""
    prompt = render_prompt(
        PromptTemplateId.self_instruct,
        {"K": str(k), "Seed Instructions": f"- {seed.text}"},
    )
    completion = gateway.sample_one("self_instruct", prompt, params)
    if not completion.ok:
        raise StageError(
            f"augmentation call failed for seed {seed.id}: {completion.error}",
            unit=f"augment:{seed.id}",
        )
    out = []
    for line in _parse_bullets(completion.text)[:k]:
        out.append(make_instruction(text=line, source="augmented", parent_id=seed.id))
    return out


def _parse_bullets(text: str) -> list[str]:
    from .gateway import parse_dashed_list

    return [item for item in parse_dashed_list(text) if normalize_text(item)]


def self_instruct(
    gateway: Gateway, seeds: list[Instruction], k: int, params: SamplingParams
) -> list[Instruction]:
    """Augment every seed and return the deduplicated union (seeds win ties)."""
    if not seeds:
        raise ValueError("self_instruct requires at least one seed")
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    from .datamodel import dedup_instructions

    collected = list(seeds)
    for seed in seeds:
        collected.extend(augmentations_for_seed(gateway, seed, k, params))
    return dedup_instructions(collected)


# --- verifier generation -----------------------------------------------------------

_FENCE_RE = re.compile(r"```(?:[a-zA-Z0-9_+-]*)\n(.*?)```", re.DOTALL)


def parse_verifier_payload(completion: str) -> Optional[tuple[str, list[tuple[str, bool]]]]:
    """Extract (function source, [(case input, expected bool), ...]) from a completion.

    Tolerates code fences and surrounding prose; case outputs may be booleans
    or the strings "True"/"False".  Returns None when no JSON object with a
    string ``func`` can be recovered.
    """
    candidates = [completion]
    candidates.extend(m.group(1) for m in _FENCE_RE.finditer(completion))
    start, end = completion.find("{"), completion.rfind("}")
    if 0 <= start < end:
        candidates.append(completion[start:end + 1])

    payload = None
    for text in candidates:
        try:
            parsed = json.loads(text.strip())
        except (json.JSONDecodeError, ValueError):
            continue
        if isinstance(parsed, dict):
            payload = parsed
            break
    if payload is None:
        return None
    func = payload.get("func")
    if not isinstance(func, str) or not func.strip():
        return None

    cases: list[tuple[str, bool]] = []
    raw_cases = payload.get("cases", [])
    if isinstance(raw_cases, list):
        for entry in raw_cases:
            if not isinstance(entry, dict):
                continue
            case_input = entry.get("input")
            expected = _parse_expected(entry.get("output"))
            if isinstance(case_input, str) and expected is not None:
                cases.append((case_input, expected))
    return func, cases


def _parse_expected(value) -> Optional[bool]:
    if isinstance(value, bool):
        return value
    if isinstance(value, str) and value.strip() in ("True", "False"):
        return value.strip() == "True"
    return None


def generate_verifiers(
    gateway: Gateway,
    instruction: Instruction,
    k: int,
    executor,
    budget: ExecBudget,
    params: SamplingParams,
) -> VerifierBundle:
    """Sample k verifier payloads and merge them into one generated-stage bundle.

    Duplicate functions/cases (by content id) collapse; malformed payloads and
    failed sample slots are counted, not fatal — an instruction with nothing
    parseable simply dies at cross-validation.
    """
    prompt = render_prompt(PromptTemplateId.verifier_gen, {"instruction": instruction.text})
    completions = gateway.sample_k("verifier_gen", prompt, dataclasses.replace(params, k=k))

    functions: dict[str, VerifierFunction] = {}
    cases: dict[str, TestCase] = {}
    malformed = 0
    failed = 0
    for completion in completions:
        if not completion.ok:
            failed += 1
            continue
        parsed = parse_verifier_payload(completion.text)
        if parsed is None:
            malformed += 1
            continue
        source, case_pairs = parsed
        func = make_verifier(instruction.id, source)
        if func.id not in functions:
            compiled = executor.compile_check(func, budget)
            func = dataclasses.replace(func, compile_ok=compiled.status == "ok")
            functions[func.id] = func
        for case_input, expected in case_pairs:
            case = make_case(instruction.id, case_input, expected)
            cases.setdefault(case.id, case)

    return VerifierBundle(
        instruction_id=instruction.id,
        functions=list(functions.values()),
        cases=list(cases.values()),
        malformed_payloads=malformed,
        failed_slots=failed,
    )


# --- cross-validation ----------------------------------------------------------------


def cross_validate(
    bundle: VerifierBundle,
    executor,
    budget: ExecBudget,
    threshold: float = 0.5,
    workers: int = 1,
) -> Optional[VerifierBundle]:
    """Two-pass mutual filter; returns the surviving bundle or None to drop.

    Pass A scores each case against ALL compiled functions and drops cases at
    accuracy <= threshold.  Pass B scores each function against the surviving
    cases and drops likewise.  Survivor accuracies are recorded on the
    records; the matrix is reduced to the surviving grid.
    """
    funcs = bundle.compiled_functions()
    if not funcs or not bundle.cases:
        return None

    matrix = bundle.matrix
    if matrix is None:
        matrix = evaluate_matrix(
            executor, funcs, [c.input for c in bundle.cases], budget, workers=workers
        )

    def match(i: int, j: int) -> bool:
        cell = matrix[i][j]
        return cell.status == "ok" and cell.value == bundle.cases[j].expected

    case_acc = [
        sum(1 for i in range(len(funcs)) if match(i, j)) / len(funcs)
        for j in range(len(bundle.cases))
    ]
    kept_cases = [j for j, acc in enumerate(case_acc) if acc > threshold]
    if not kept_cases:
        return None

    func_acc = [
        sum(1 for j in kept_cases if match(i, j)) / len(kept_cases)
        for i in range(len(funcs))
    ]
    kept_funcs = [i for i, acc in enumerate(func_acc) if acc > threshold]
    if not kept_funcs:
        return None

    surviving_funcs = [
        dataclasses.replace(funcs[i], accuracy=func_acc[i]) for i in kept_funcs
    ]
    surviving_cases = [
        dataclasses.replace(bundle.cases[j], accuracy=case_acc[j]) for j in kept_cases
    ]
    sub_matrix = [[matrix[i][j] for j in kept_cases] for i in kept_funcs]
    return VerifierBundle(
        instruction_id=bundle.instruction_id,
        functions=surviving_funcs,
        cases=surviving_cases,
        matrix=sub_matrix,
        stage="cross_verified",
        malformed_payloads=bundle.malformed_payloads,
        failed_slots=bundle.failed_slots,
    )


# --- back-translation + NLI gate -------------------------------------------------------

# Exemplar shown to the model inside the back-translation template.
EXAMPLE_FUNC = (
    "def evaluate(response):\n"
    "    return len(response) <= 50"
)
EXAMPLE_CASES = (
    '[{"input": "AutoARIMA automates ARIMA model selection.", "output": true}]\n'
    '-> ["Keep your answer to under 50 characters total."]'
)

_LIST_RE = re.compile(r"\[.*\]", re.DOTALL)


def parse_instruction_list(completion: str) -> Optional[list[str]]:
    """Recover a JSON list of instruction strings from a completion."""
    candidates = [completion]
    candidates.extend(m.group(1) for m in _FENCE_RE.finditer(completion))
    bracketed = _LIST_RE.search(completion)
    if bracketed:
        candidates.append(bracketed.group(0))
    for text in candidates:
        try:
            parsed = json.loads(text.strip())
        except (json.JSONDecodeError, ValueError):
            continue
        if isinstance(parsed, list) and parsed and all(isinstance(x, str) for x in parsed):
            return parsed
    return None


def back_translate(
    gateway: Gateway,
    func: VerifierFunction,
    params: SamplingParams,
    example_func: str = EXAMPLE_FUNC,
    example_cases: str = EXAMPLE_CASES,
) -> BackTranslation:
    """Regenerate instruction text from one surviving function.

    The first element of the parsed list becomes the hypothesis; completions
    that do not parse as a list flag the function but keep it (only an NLI
    contradiction drops instructions, and unparseable is not contradiction).
    """
    prompt = render_prompt(
        PromptTemplateId.back_translate,
        {"Example func": example_func, "Example cases": example_cases,
         "funcs": func.source_code},
    )
    completion = gateway.sample_one("back_translate", prompt, params)
    if not completion.ok:
        raise StageError(
            f"back-translation call failed for function {func.id}: {completion.error}",
            unit=f"backtranslate:{func.instruction_id}",
        )
    items = parse_instruction_list(completion.text)
    if items is None:
        logger.info("back-translation unparseable for function %s; kept", func.id)
        return BackTranslation(
            function_id=func.id, instruction_id=func.instruction_id,
            hypothesis=None, flagged=True, raw_completion=completion.text,
        )
    return BackTranslation(
        function_id=func.id, instruction_id=func.instruction_id,
        hypothesis=items[0], flagged=False, raw_completion=completion.text,
    )


def nli_gate(client, premise: str, hypothesis: str) -> NLIVerdict:
    """Score (premise=original instruction, hypothesis=back-translated text)."""
    if not premise or not hypothesis:
        raise ValueError("nli_gate requires non-empty premise and hypothesis")
    return verdict_from_probs(client.score(premise, hypothesis))


def gate_instruction(
    gateway: Gateway,
    nli_client,
    instruction: Instruction,
    functions: list[VerifierFunction],
    params: SamplingParams,
) -> tuple[bool, list[BackTranslation]]:
    """Back-translate every surviving function and gate the instruction.

    Dropped iff any function's regenerated text is labeled contradiction —
    the strictest per-function reading.  Flagged (unparseable) functions pass.
    """
    audits = []
    kept = True
    for func in functions:
        record = back_translate(gateway, func, params)
        if not record.flagged:
            verdict = nli_gate(nli_client, instruction.text, record.hypothesis)
            record = dataclasses.replace(record, verdict=verdict)
            if verdict.label == "contradiction":
                kept = False
        audits.append(record)
    return kept, audits


# --- NLI clients --------------------------------------------------------------------


class RuleStubNLI:
    """Deterministic keyword-rule NLI scorer for offline runs.

    Rules are dicts with optional ``premise_contains`` / ``hypothesis_contains``
    substrings (matched on normalized text) and a ``label``.  First matching
    rule wins; identical normalized texts are entailment; default is neutral.
    """

    def __init__(self, rules: Optional[list[dict]] = None):
        self.rules = list(rules or [])
        for rule in self.rules:
            if rule.get("label") not in NLI_LABELS:
                raise ValueError(f"stub rule has bad label: {rule!r}")

    @classmethod
    def from_file(cls, path: str) -> "RuleStubNLI":
        with open(path, encoding="utf-8") as fh:
            return cls(json.load(fh))

    def score(self, premise: str, hypothesis: str) -> tuple[float, float, float]:
        p, h = normalize_text(premise), normalize_text(hypothesis)
        if p == h:
            return _STUB_PROBS["entailment"]
        for rule in self.rules:
            need_p = normalize_text(rule.get("premise_contains", ""))
            need_h = normalize_text(rule.get("hypothesis_contains", ""))
            if need_p and need_p not in p:
                continue
            if need_h and need_h not in h:
                continue
            return _STUB_PROBS[rule["label"]]
        return _STUB_PROBS["neutral"]


class HttpNLIClient:
    """Remote three-class NLI scorer: POST {premise, hypothesis} -> {probs}."""

    def __init__(self, base_url: str, request_timeout: float = 60.0):
        self.base_url = base_url.rstrip("/")
        self.request_timeout = request_timeout

    def score(self, premise: str, hypothesis: str) -> tuple[float, float, float]:
        import requests

        try:
            resp = requests.post(
                f"{self.base_url}/score",
                json={"premise": premise, "hypothesis": hypothesis},
                timeout=self.request_timeout,
            )
            resp.raise_for_status()
            probs = resp.json()["probs"]
            return (float(probs[0]), float(probs[1]), float(probs[2]))
        except Exception as exc:  # transport, shape, or coercion failure
            raise StageError(f"NLI service unreachable or malformed: {exc}") from exc
