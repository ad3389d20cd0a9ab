"""Stage 2: instruction+query inputs, response rejection sampling, judging.

Each surviving instruction is paired with k queries drawn (seeded, without
replacement) from a user-query pool.  K responses are sampled per input and
scored against the instruction's surviving verification functions with
error-as-false pass rates.  Responses above the pass-rate gate face an
LLM judge whose last line must read "Score: N"; only score >= the configured
minimum enters the train set.  Failing responses are kept with their rates —
pair mining needs the rate-0 negatives.
"""

from __future__ import annotations

import logging
import random
import re
from dataclasses import dataclass, field
from typing import Optional

from .datamodel import Instruction, QueryInput, TrainSample, make_query_input
from .gateway import Completion, Gateway, PromptTemplateId, SamplingParams, render_prompt
from .instruction_stage import StageError
from .sandbox import ExecBudget, evaluate_matrix

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class JudgeScore:
    raw_completion: str
    score: int
    parse_ok: bool

    def __post_init__(self):
        if self.parse_ok and not 0 <= self.score <= 10:
            raise ValueError(f"parsed judge score out of range: {self.score}")


@dataclass
class ResponseCandidate:
    input_id: str
    sample_index: int
    text: str
    pass_rate: float
    outcomes: list = field(default_factory=list)
    judge: Optional[JudgeScore] = None

    def __post_init__(self):
        if self.outcomes:
            ok_true = sum(1 for o in self.outcomes if o.status == "ok" and o.value is True)
            expected = ok_true / len(self.outcomes)
            if abs(self.pass_rate - expected) > 1e-9:
                raise ValueError(
                    f"pass_rate {self.pass_rate} disagrees with outcomes ({expected})"
                )


def build_inputs(
    instructions: list[Instruction],
    query_pool: list[str],
    k: int,
    seed: int,
) -> list[QueryInput]:
    """Pair every instruction with k pool queries, sampled without replacement.

    Selection is seeded per instruction (stable under reordering of the
    instruction list); the rendered prompt is the response template filled
    with instruction and query.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if len(query_pool) < k:
        raise ValueError(
            f"query pool holds {len(query_pool)} entries but k={k}; "
            "use a smaller k or a larger pool"
        )
    inputs = []
    for inst in instructions:
        rng = random.Random(f"{seed}:{inst.id}")
        for query in rng.sample(query_pool, k):
            rendered = render_prompt(
                PromptTemplateId.response_gen,
                {"instruction": inst.text, "query": query},
            )
            inputs.append(make_query_input(inst.id, query, rendered))
    return inputs


def sample_responses(
    gateway: Gateway, input: QueryInput, k: int, params: SamplingParams
) -> list[Completion]:
    """Draw k response completions for one input; failed slots come back marked."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    import dataclasses

    return gateway.sample_k(
        "response_gen", input.rendered, dataclasses.replace(params, k=k)
    )


def verify_responses(
    input: QueryInput,
    completions: list[Completion],
    funcs: list,
    executor,
    budget: ExecBudget,
    workers: int = 1,
) -> list[ResponseCandidate]:
    """Score every usable response against all surviving functions.

    Every candidate is returned with its rate — callers apply the > threshold
    gate for D_train membership, while rate-0 candidates feed pair mining.
    """
    usable = [c for c in completions if c.ok]
    if not funcs:
        raise ValueError("verify_responses requires at least one surviving function")
    if not usable:
        return []
    matrix = evaluate_matrix(executor, funcs, [c.text for c in usable], budget,
                             workers=workers)
    candidates = []
    for j, completion in enumerate(usable):
        outcomes = [matrix[i][j] for i in range(len(funcs))]
        ok_true = sum(1 for o in outcomes if o.status == "ok" and o.value is True)
        candidates.append(
            ResponseCandidate(
                input_id=input.id,
                sample_index=completion.index,
                text=completion.text,
                pass_rate=ok_true / len(funcs),
                outcomes=outcomes,
            )
        )
    return candidates


_SCORE_LINE = re.compile(r"^Score:\s*(\d+)$")


def parse_judge_score(completion: str) -> JudgeScore:
    """Parse the judge's final non-empty line as "Score: N", N in 0..10.

    Anything else — missing line, prose after the score, out-of-range N — is
    parse_ok=False and the sample is discarded; no lenient rescue.
    """
    lines = [line.strip() for line in completion.strip().split("\n")]
    last = next((line for line in reversed(lines) if line), "")
    m = _SCORE_LINE.match(last)
    if not m:
        return JudgeScore(raw_completion=completion, score=0, parse_ok=False)
    score = int(m.group(1))
    if not 0 <= score <= 10:
        return JudgeScore(raw_completion=completion, score=0, parse_ok=False)
    return JudgeScore(raw_completion=completion, score=score, parse_ok=True)


def judge_quality(
    gateway: Gateway,
    instruction_text: str,
    input: QueryInput,
    response: str,
    params: SamplingParams,
) -> JudgeScore:
    """Render the judge prompt for one response and parse its score."""
    prompt = render_prompt(
        PromptTemplateId.quality_judge,
        {"instruction": instruction_text, "query": input.query_text,
         "response": response},
    )
    completion = gateway.sample_one("quality_judge", prompt, params)
    if not completion.ok:
        raise StageError(
            f"judge call failed for input {input.id}: {completion.error}",
            unit=f"judge:{input.id}",
        )
    return parse_judge_score(completion.text)


def assemble_train_set(
    kept: list[tuple[QueryInput, ResponseCandidate]],
    pass_threshold: float = 0.5,
    judge_min: int = 8,
) -> list[TrainSample]:
    """Deterministic reduction of judged candidates into D_train.

    Both gates are re-checked here so a TrainSample can never exist without
    them; output is ordered by (instruction_id, input_id, sample_index).
    """
    rows = []
    for input, candidate in kept:
        if candidate.pass_rate <= pass_threshold:
            continue
        if candidate.judge is None or not candidate.judge.parse_ok:
            continue
        if candidate.judge.score < judge_min:
            continue
        rows.append((input.instruction_id, input.id, candidate.sample_index,
                     input, candidate))
    rows.sort(key=lambda r: (r[0], r[1], r[2]))
    return [
        TrainSample(
            instruction_id=input.instruction_id,
            input_id=input.id,
            input_text=input.rendered,
            response_text=candidate.text,
            pass_rate=candidate.pass_rate,
            judge_score=candidate.judge.score,
        )
        for _, _, _, input, candidate in rows
    ]
