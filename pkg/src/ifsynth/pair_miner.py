"""Preference-pair mining (offline instruction/query level, online rounds)
and emission of trainer-ready SFT/DPO files.

Offline pairs come from pass-rate strata: chosen strictly above 0.5, rejected
at exactly 0.  Online rounds re-sample each training prompt with the current
model at temperature 0.8 and pair the best passing response against the worst
failing one, ties resolved toward the lowest sample index.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass
from typing import Optional

from .datamodel import (
    Instruction,
    PreferencePair,
    QueryInput,
    SftRecord,
    TrainSample,
    write_records,
)
from .gateway import Gateway, SamplingParams
from .instruction_stage import VerifierBundle
from .query_stage import ResponseCandidate
from .sandbox import ExecBudget, evaluate_matrix

logger = logging.getLogger(__name__)

DEFAULT_PAIR_CAP = 4


@dataclass(frozen=True)
class OnlineRoundConfig:
    k: int
    round_index: int
    temperature: float = 0.8
    chosen_min: float = 0.5
    rejected_max: float = 0.0

    def __post_init__(self):
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if self.round_index < 1:
            raise ValueError(f"round_index must be >= 1, got {self.round_index}")
        if not self.chosen_min > self.rejected_max:
            raise ValueError(
                f"chosen_min ({self.chosen_min}) must exceed rejected_max "
                f"({self.rejected_max})"
            )


# --- offline mining ---------------------------------------------------------------


def case_pass_rates(bundle: VerifierBundle) -> list[float]:
    """Fraction of surviving functions returning ok,true on each case input.

    This is deliberately pass-rate semantics (not agreement-with-expected): a
    chosen sample must itself follow the instruction, and an expected-false
    case would otherwise qualify as "positive".
    """
    if bundle.matrix is None:
        raise ValueError("bundle carries no matrix; run cross-validation first")
    n_funcs = len(bundle.functions)
    rates = []
    for j in range(len(bundle.cases)):
        ok_true = sum(
            1 for i in range(n_funcs)
            if bundle.matrix[i][j].status == "ok" and bundle.matrix[i][j].value is True
        )
        rates.append(ok_true / n_funcs)
    return rates


def mine_instruction_pairs(
    bundles: list[VerifierBundle],
    instructions_by_id: dict[str, Instruction],
    cap: int = DEFAULT_PAIR_CAP,
    chosen_min: float = 0.5,
    rejected_max: float = 0.0,
) -> list[PreferencePair]:
    """(instruction, winning case text, losing case text) triples, capped per instruction."""
    pairs = []
    for bundle in bundles:
        instruction = instructions_by_id[bundle.instruction_id]
        rates = case_pass_rates(bundle)
        winners = [j for j, r in enumerate(rates) if r > chosen_min]
        losers = [j for j, r in enumerate(rates) if r <= rejected_max]
        emitted = 0
        for w in winners:
            if emitted >= cap:
                break
            for l in losers:
                if emitted >= cap:
                    break
                chosen = bundle.cases[w].input
                rejected = bundle.cases[l].input
                if chosen == rejected:
                    continue
                pairs.append(PreferencePair(
                    prompt=instruction.text, chosen=chosen, rejected=rejected,
                    level="instruction", chosen_pass_rate=rates[w],
                    rejected_pass_rate=rates[l],
                ))
                emitted += 1
    return pairs


def mine_query_pairs(
    entries: list[tuple[QueryInput, list[ResponseCandidate]]],
    cap: int = DEFAULT_PAIR_CAP,
    pass_threshold: float = 0.5,
    judge_min: int = 8,
) -> list[PreferencePair]:
    """(input, winning response, losing response) triples per input.

    Winners must clear both gates (pass rate and judge); losers are exactly
    the rate-0 responses, judged or not.
    """
    pairs = []
    for input, candidates in entries:
        winners = [
            c for c in candidates
            if c.pass_rate > pass_threshold
            and c.judge is not None and c.judge.parse_ok and c.judge.score >= judge_min
        ]
        losers = [c for c in candidates if c.pass_rate == 0]
        emitted = 0
        for w in winners:
            if emitted >= cap:
                break
            for l in losers:
                if emitted >= cap:
                    break
                if w.text == l.text:
                    continue
                pairs.append(PreferencePair(
                    prompt=input.rendered, chosen=w.text, rejected=l.text,
                    level="query", chosen_pass_rate=w.pass_rate,
                    rejected_pass_rate=l.pass_rate,
                ))
                emitted += 1
    return pairs


def merge_pref(
    ins_pairs: list[PreferencePair], query_pairs: list[PreferencePair]
) -> list[PreferencePair]:
    """Union of both offline levels; exact (prompt, chosen, rejected) dupes collapse.

    First occurrence wins, so a triple present at both levels keeps its
    instruction-level tag.
    """
    seen = set()
    merged = []
    for pair in list(ins_pairs) + list(query_pairs):
        key = (pair.prompt, pair.chosen, pair.rejected)
        if key in seen:
            continue
        seen.add(key)
        merged.append(pair)
    return merged


# --- online rounds ------------------------------------------------------------------


def response_pass_rate(text: str, funcs, executor, budget: ExecBudget) -> float:
    outcomes = evaluate_matrix(executor, funcs, [text], budget)
    ok_true = sum(1 for row in outcomes if row[0].status == "ok" and row[0].value is True)
    return ok_true / len(funcs)


def online_pair_for_prompt(
    gateway: Gateway,
    prompt: str,
    funcs,
    cfg: OnlineRoundConfig,
    executor,
    budget: ExecBudget,
) -> Optional[PreferencePair]:
    """Sample k responses for one prompt and apply the selection rule.

    chosen = highest rate strictly above chosen_min; rejected = lowest rate at
    or below rejected_max; both ties break toward the lowest sample index.
    Prompts lacking either side, or where both sides are the same string,
    yield no pair.
    """
    params = SamplingParams(temperature=cfg.temperature, k=cfg.k)
    completions = gateway.sample_k(f"online_round_{cfg.round_index}", prompt, params)
    usable = [c for c in completions if c.ok]
    if not usable:
        return None
    rates = [response_pass_rate(c.text, funcs, executor, budget) for c in usable]

    chosen = None
    for i, rate in enumerate(rates):
        if rate > cfg.chosen_min and (chosen is None or rate > rates[chosen]):
            chosen = i
    rejected = None
    for i, rate in enumerate(rates):
        if rate <= cfg.rejected_max and (rejected is None or rate < rates[rejected]):
            rejected = i
    if chosen is None or rejected is None:
        return None
    if usable[chosen].text == usable[rejected].text:
        return None
    return PreferencePair(
        prompt=prompt, chosen=usable[chosen].text, rejected=usable[rejected].text,
        level="online", chosen_pass_rate=rates[chosen],
        rejected_pass_rate=rates[rejected], round=cfg.round_index,
    )


@dataclass
class RoundResult:
    pairs: list[PreferencePair]
    stats: dict


def online_round(
    train: list[TrainSample],
    gateway: Gateway,
    funcs_by_instruction: dict[str, list],
    cfg: OnlineRoundConfig,
    executor,
    budget: ExecBudget,
) -> RoundResult:
    """One self-sampling round over the distinct training prompts, in train order."""
    prompts: list[tuple[str, str]] = []
    seen = set()
    for sample in train:
        if sample.input_text not in seen:
            seen.add(sample.input_text)
            prompts.append((sample.input_text, sample.instruction_id))

    pairs = []
    for prompt, instruction_id in prompts:
        pair = online_pair_for_prompt(
            gateway, prompt, funcs_by_instruction[instruction_id], cfg, executor, budget
        )
        if pair is not None:
            pairs.append(pair)
    stats = {
        "round": cfg.round_index,
        "temperature": cfg.temperature,
        "k": cfg.k,
        "prompts": len(prompts),
        "pairs": len(pairs),
    }
    return RoundResult(pairs=pairs, stats=stats)


# --- emission -------------------------------------------------------------------------


def emit_sft(train: list[TrainSample], path: str) -> int:
    """Write D_train as (input, output) lines; returns the record count."""
    records = [SftRecord(input=t.input_text, output=t.response_text) for t in train]
    return write_records(path, records)


def emit_dpo(pairs: list[PreferencePair], path: str) -> int:
    """Write preference pairs with their level/rate/round metadata."""
    return write_records(path, list(pairs))
