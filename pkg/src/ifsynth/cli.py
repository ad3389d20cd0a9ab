"""Pipeline orchestration: config, checkpoints, stage runners, and the command line.

A run owns a directory.  Stages write their outputs there as atomic record
files, and every completed work unit is committed to a per-stage checkpoint
(including the provider cursor), so a killed run resumes mid-stage and still
produces byte-identical artifacts.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
import sys
from dataclasses import dataclass
from typing import Any, Optional

import click

from .analytics import (
    FunnelError,
    format_contamination_table,
    format_funnel_table,
    funnel_report,
    ngram_overlap,
)
from .datamodel import (
    Instruction,
    RecordParseError,
    advance_stage,
    atomic_write_text,
    dedup_instructions,
    make_instruction,
    parse_record,
    read_records,
    serialize_record,
    write_records,
)
from .gateway import (
    Gateway,
    HttpChatProvider,
    ProviderError,
    SamplingParams,
    ScriptedProvider,
)
from .instruction_stage import (
    HttpNLIClient,
    RuleStubNLI,
    StageError,
    VerifierBundle,
    augmentations_for_seed,
    cross_validate,
    gate_instruction,
    generate_verifiers,
)
from .pair_miner import (
    OnlineRoundConfig,
    emit_dpo,
    emit_sft,
    merge_pref,
    mine_instruction_pairs,
    mine_query_pairs,
    online_pair_for_prompt,
)
from .query_stage import (
    JudgeScore,
    ResponseCandidate,
    assemble_train_set,
    build_inputs,
    judge_quality,
    sample_responses,
    verify_responses,
)
from .sandbox import ExecBudget, GuestProcessExecutor, NativeEvaluator, SandboxError

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
LOCK_NAME = "run.lock"

ARTIFACTS = {
    "instructions_raw": "instructions.raw.records",
    "instructions_cross": "instructions.cross.records",
    "instructions_final": "instructions.final.records",
    "verifiers_generated": "verifiers.generated.records",
    "cases_generated": "cases.generated.records",
    "verifiers": "verifiers.records",
    "cases": "cases.records",
    "inputs": "inputs.records",
    "responses": "responses.records",
    "train": "train.records",
    "sft": "sft.records",
    "dpo_offline": "dpo.offline.records",
}


class ConfigError(Exception):
    """Bad configuration, missing inputs, or violated run-directory protocol."""


class PrerequisiteError(ConfigError):
    """A stage was invoked before the stage it depends on completed."""


class LockError(ConfigError):
    """The run directory is owned by another run."""


class CrashInjected(RuntimeError):
    """Debug-only: raised right after a checkpoint commit to exercise resume."""


# --- configuration -------------------------------------------------------------------

# Stage K values and thresholds default to the published training recipe;
# everything else is artifact plumbing with conservative defaults.
_DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "run_dir": "run",
    "seeds_path": "seeds.txt",
    "query_pool_path": "query_pool.txt",
    "instruction_rewrites": 100,
    "verifier_k": 8,
    "queries_per_instruction": 16,
    "responses_per_input": 8,
    "online_k": 8,
    "online_rounds": 2,
    "pair_cap": 4,
    "ngram_n": 13,
    "cross_val_threshold": 0.5,
    "response_threshold": 0.5,
    "judge_min": 8,
    "chosen_min": 0.5,
    "rejected_max": 0.0,
    "temperature": 0.7,
    "online_temperature": 0.8,
    "max_tokens": 1024,
    "workers": 1,
    "provider": {"kind": "scripted", "fixtures_dir": "fixtures"},
    "nli": {"kind": "rules", "rules_path": None},
    "executor": {"kind": "native"},
    "budget": {
        "wall_timeout_ms": 2000,
        "memory_cap_bytes": 256 * 1024 * 1024,
        "max_output_bytes": 64 * 1024,
    },
    "gateway": {"retry_budget": 3, "retry_backoff": 0.5, "in_flight": 4},
    "crash_after": None,
}

_INT_KEYS = (
    "seed", "instruction_rewrites", "verifier_k", "queries_per_instruction",
    "responses_per_input", "online_k", "online_rounds", "pair_cap", "ngram_n",
    "judge_min", "max_tokens", "workers",
)
_FLOAT_KEYS = (
    "cross_val_threshold", "response_threshold", "chosen_min", "rejected_max",
    "temperature", "online_temperature",
)
_PATH_KEYS = ("run_dir", "seeds_path", "query_pool_path")


@dataclass(frozen=True)
class RunConfig:
    """Resolved run configuration.

    ``raw`` holds the canonical key/value view (defaults applied, paths exactly
    as written) — it is what the manifest embeds and what the digest covers, so
    two runs configured with the same relative paths hash identically no matter
    where on disk they live.  ``base_dir`` anchors relative paths for IO.
    """

    raw: dict
    base_dir: str

    def __getattr__(self, name: str):
        try:
            return self.raw[name]
        except KeyError:
            raise AttributeError(name) from None

    def path(self, key: str) -> str:
        value = self.raw[key]
        if os.path.isabs(value):
            return value
        return os.path.join(self.base_dir, value)

    @property
    def run_path(self) -> str:
        return self.path("run_dir")


def _merge_section(key: str, given: dict) -> dict:
    section = dict(_DEFAULTS[key])
    unknown = set(given) - set(section) - {"kind", "command", "lanes", "base_url",
                                           "model", "auth_env", "fixtures_dir",
                                           "rules_path"}
    if unknown:
        raise ConfigError(f"unknown keys in config section '{key}': {sorted(unknown)}")
    section.update(given)
    return section


def make_config(overrides: dict, base_dir: str = ".") -> RunConfig:
    unknown = set(overrides) - set(_DEFAULTS)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    raw = dict(_DEFAULTS)
    raw.update(overrides)
    for key in ("provider", "nli", "executor", "budget", "gateway"):
        value = overrides.get(key)
        if value is not None:
            if not isinstance(value, dict):
                raise ConfigError(f"config key '{key}' must be an object")
            raw[key] = _merge_section(key, value)
        else:
            raw[key] = dict(_DEFAULTS[key])
    for key in _INT_KEYS:
        if not isinstance(raw[key], int) or isinstance(raw[key], bool):
            raise ConfigError(f"config key '{key}' must be an integer")
    for key in _FLOAT_KEYS:
        if not isinstance(raw[key], (int, float)) or isinstance(raw[key], bool):
            raise ConfigError(f"config key '{key}' must be a number")
        raw[key] = float(raw[key])
    for key in _PATH_KEYS:
        if not isinstance(raw[key], str) or not raw[key]:
            raise ConfigError(f"config key '{key}' must be a non-empty path")
    if raw["online_rounds"] < 0:
        raise ConfigError("online_rounds must be >= 0")
    if raw["crash_after"] is not None and not isinstance(raw["crash_after"], str):
        raise ConfigError("crash_after must be a '<stage>:<unit-index>' string")
    return RunConfig(raw=raw, base_dir=os.path.abspath(base_dir))


def load_config(path: str) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}")
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return make_config(data, base_dir=os.path.dirname(os.path.abspath(path)))


def _canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def manifest_config(cfg: RunConfig) -> dict:
    """The reproducible config view: run-dir-relative, no debug hooks."""
    shown = {k: v for k, v in cfg.raw.items() if k != "crash_after"}
    shown["run_dir"] = "."
    return shown


def config_digest(cfg: RunConfig) -> str:
    return hashlib.sha256(_canonical_json(manifest_config(cfg)).encode("utf-8")).hexdigest()


# --- run state -----------------------------------------------------------------------


@dataclass
class RunState:
    cfg: RunConfig
    gateway: Gateway
    nli: Any
    executor: Any
    budget: ExecBudget
    digest: str

    @property
    def params(self) -> SamplingParams:
        return SamplingParams(
            temperature=self.cfg.temperature, max_tokens=self.cfg.max_tokens
        )

    def close(self) -> None:
        close = getattr(self.executor, "close", None)
        if close is not None:
            close()


def _resolve(cfg: RunConfig, value: Optional[str]) -> Optional[str]:
    if value is None or os.path.isabs(value):
        return value
    return os.path.join(cfg.base_dir, value)


def build_state(cfg: RunConfig) -> RunState:
    provider_cfg = cfg.raw["provider"]
    kind = provider_cfg.get("kind")
    if kind == "scripted":
        provider = ScriptedProvider(_resolve(cfg, provider_cfg["fixtures_dir"]))
    elif kind == "http":
        provider = HttpChatProvider(
            base_url=provider_cfg["base_url"],
            model=provider_cfg["model"],
            auth_env=provider_cfg.get("auth_env", "PROVIDER_API_KEY"),
        )
    else:
        raise ConfigError(f"unknown provider kind {kind!r}")
    gw_cfg = cfg.raw["gateway"]
    gateway = Gateway(
        provider=provider,
        retry_budget=int(gw_cfg["retry_budget"]),
        retry_backoff=float(gw_cfg["retry_backoff"]),
        in_flight=int(gw_cfg["in_flight"]),
    )

    nli_cfg = cfg.raw["nli"]
    if nli_cfg.get("kind") == "rules":
        rules_path = _resolve(cfg, nli_cfg.get("rules_path"))
        nli = RuleStubNLI.from_file(rules_path) if rules_path else RuleStubNLI()
    elif nli_cfg.get("kind") == "http":
        nli = HttpNLIClient(nli_cfg["base_url"])
    else:
        raise ConfigError(f"unknown nli kind {nli_cfg.get('kind')!r}")

    budget_cfg = cfg.raw["budget"]
    budget = ExecBudget(
        wall_timeout_ms=int(budget_cfg["wall_timeout_ms"]),
        memory_cap_bytes=int(budget_cfg["memory_cap_bytes"]),
        max_output_bytes=int(budget_cfg["max_output_bytes"]),
    )

    exec_cfg = cfg.raw["executor"]
    if exec_cfg.get("kind") == "native":
        executor: Any = NativeEvaluator()
    elif exec_cfg.get("kind") == "guest":
        command = exec_cfg.get("command")
        if not isinstance(command, list) or not command:
            raise ConfigError("guest executor requires a non-empty 'command' list")
        executor = GuestProcessExecutor(
            command=command, lanes=int(exec_cfg.get("lanes", 1)), spawn_budget=budget
        )
    else:
        raise ConfigError(f"unknown executor kind {exec_cfg.get('kind')!r}")

    return RunState(cfg=cfg, gateway=gateway, nli=nli, executor=executor,
                    budget=budget, digest=config_digest(cfg))


# --- checkpoints ---------------------------------------------------------------------


def _checkpoint_path(run_dir: str, stage: str) -> str:
    return os.path.join(run_dir, "checkpoints", f"{stage}.json")


def load_checkpoint(run_dir: str, stage: str) -> Optional[dict]:
    path = _checkpoint_path(run_dir, stage)
    if not os.path.exists(path):
        return None
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


class _StageRun:
    """Unit-level commit log for one stage of one run."""

    def __init__(self, state: RunState, stage: str):
        self.state = state
        self.stage = stage
        self.run_dir = state.cfg.run_path
        existing = load_checkpoint(self.run_dir, stage)
        if existing is not None and existing.get("config_digest") != state.digest:
            raise ConfigError(
                f"stage '{stage}' has a checkpoint from a different configuration; "
                "refusing to resume (clear the run directory or restore the config)"
            )
        self.cp = existing or {
            "stage": stage,
            "config_digest": state.digest,
            "status": "running",
            "units": {},
            "unit_order": [],
            "gateway_cursor": {},
            "counts": None,
        }
        self.fresh = existing is None

    @property
    def complete(self) -> bool:
        return self.cp["status"] == "complete"

    def restore_cursor(self) -> None:
        if not self.fresh and self.cp["unit_order"]:
            self.state.gateway.restore(self.cp["gateway_cursor"])

    def done(self, key: str) -> bool:
        return key in self.cp["units"]

    def payload(self, key: str) -> dict:
        return self.cp["units"][key]

    def _save(self) -> None:
        atomic_write_text(
            _checkpoint_path(self.run_dir, self.stage),
            json.dumps(self.cp, sort_keys=True, indent=1),
        )

    def commit(self, key: str, payload: dict) -> None:
        self.cp["units"][key] = payload
        self.cp["unit_order"].append(key)
        self.cp["gateway_cursor"] = self.state.gateway.snapshot()
        self._save()
        index = len(self.cp["unit_order"]) - 1
        if self.state.cfg.crash_after == f"{self.stage}:{index}":
            raise CrashInjected(f"injected crash after {self.stage} unit {index}")

    def finish(self, counts: dict) -> dict:
        self.cp["status"] = "complete"
        self.cp["counts"] = counts
        self._save()
        return counts


def _require(state: RunState, stage: str, *prereqs: str) -> None:
    for prereq in prereqs:
        cp = load_checkpoint(state.cfg.run_path, prereq)
        if cp is None or cp.get("status") != "complete":
            raise PrerequisiteError(
                f"stage '{stage}' requires completed stage '{prereq}'"
            )
        if cp.get("config_digest") != state.digest:
            raise ConfigError(
                f"stage '{prereq}' outputs come from a different configuration; "
                f"re-run it before '{stage}'"
            )


def _artifact(state: RunState, name: str) -> str:
    return os.path.join(state.cfg.run_path, ARTIFACTS[name])


def _read_lines(path: str, what: str) -> list[str]:
    try:
        with open(path, encoding="utf-8") as fh:
            lines = [line.strip() for line in fh]
    except FileNotFoundError:
        raise ConfigError(f"{what} file not found: {path}")
    return [line for line in lines if line]


# --- stage: instructions -------------------------------------------------------------


def _records_payload(records: list) -> list[str]:
    return [serialize_record(r) for r in records]


def _payload_records(lines: list[str]) -> list:
    return [parse_record(line) for line in lines]


def stage_instructions(state: RunState) -> dict:
    cfg = state.cfg
    run = _StageRun(state, "instructions")
    if run.complete:
        return run.cp["counts"]
    run.restore_cursor()

    seed_lines = _read_lines(cfg.path("seeds_path"), "seed instructions")
    if not seed_lines:
        raise ConfigError(f"seed file {cfg.path('seeds_path')} holds no instructions")
    seeds = [make_instruction(text) for text in seed_lines]

    augmented: list[Instruction] = []
    for seed in seeds:
        key = f"augment:{seed.id}"
        if run.done(key):
            rewrites = _payload_records(run.payload(key)["instructions"])
        else:
            rewrites = augmentations_for_seed(
                state.gateway, seed, cfg.instruction_rewrites, state.params
            )
            run.commit(key, {"instructions": _records_payload(rewrites)})
        augmented.extend(rewrites)
    deduped = dedup_instructions(seeds + augmented)

    cross_kept: list[Instruction] = []
    gen_funcs, gen_cases = [], []
    kept_funcs: dict[str, list] = {}
    kept_cases: dict[str, list] = {}
    for inst in deduped:
        key = f"verify:{inst.id}"
        if run.done(key):
            payload = run.payload(key)
        else:
            bundle = generate_verifiers(
                state.gateway, inst, cfg.verifier_k, state.executor, state.budget,
                state.params,
            )
            surviving = cross_validate(
                bundle, state.executor, state.budget,
                threshold=cfg.cross_val_threshold, workers=cfg.workers,
            )
            payload = {
                "generated_functions": _records_payload(bundle.functions),
                "generated_cases": _records_payload(bundle.cases),
                "malformed_payloads": bundle.malformed_payloads,
                "failed_slots": bundle.failed_slots,
                "survived": surviving is not None,
                "functions": _records_payload(surviving.functions) if surviving else [],
                "cases": _records_payload(surviving.cases) if surviving else [],
            }
            run.commit(key, payload)
        gen_funcs.extend(_payload_records(payload["generated_functions"]))
        gen_cases.extend(_payload_records(payload["generated_cases"]))
        if payload["survived"]:
            cross_kept.append(inst)
            kept_funcs[inst.id] = _payload_records(payload["functions"])
            kept_cases[inst.id] = _payload_records(payload["cases"])

    final: list[Instruction] = []
    for inst in cross_kept:
        key = f"gate:{inst.id}"
        if run.done(key):
            kept = run.payload(key)["kept"]
        else:
            kept, audits = gate_instruction(
                state.gateway, state.nli, inst, kept_funcs[inst.id], state.params
            )
            run.commit(key, {
                "kept": kept,
                "hypotheses": [
                    {"function_id": a.function_id, "hypothesis": a.hypothesis,
                     "flagged": a.flagged,
                     "label": a.verdict.label if a.verdict else None}
                    for a in audits
                ],
            })
        if kept:
            final.append(inst)

    write_records(_artifact(state, "instructions_raw"), deduped)
    write_records(_artifact(state, "instructions_cross"),
                  [advance_stage(i, "cross_verified") for i in cross_kept])
    write_records(_artifact(state, "instructions_final"),
                  [advance_stage(i, "backtranslation_verified") for i in final])
    write_records(_artifact(state, "verifiers_generated"), gen_funcs)
    write_records(_artifact(state, "cases_generated"), gen_cases)
    final_ids = {i.id for i in final}
    write_records(_artifact(state, "verifiers"),
                  [f for i in cross_kept if i.id in final_ids for f in kept_funcs[i.id]])
    write_records(_artifact(state, "cases"),
                  [c for i in cross_kept if i.id in final_ids for c in kept_cases[i.id]])

    return run.finish({
        "seeds": len(seeds),
        "augmented_total": len(deduped),
        "post_cross": len(cross_kept),
        "post_nli": len(final),
    })


# --- stage: queries ------------------------------------------------------------------


def _funcs_by_instruction(state: RunState) -> dict[str, list]:
    grouped: dict[str, list] = {}
    for func in read_records(_artifact(state, "verifiers")):
        grouped.setdefault(func.instruction_id, []).append(func)
    return grouped


def _candidate_from_payload(entry: dict) -> ResponseCandidate:
    judge = None
    if entry["judge"] is not None:
        judge = JudgeScore(
            raw_completion=entry["judge"]["raw"],
            score=entry["judge"]["score"],
            parse_ok=entry["judge"]["parse_ok"],
        )
    return ResponseCandidate(
        input_id=entry["input_id"],
        sample_index=entry["sample_index"],
        text=entry["text"],
        pass_rate=entry["pass_rate"],
        judge=judge,
    )


def stage_queries(state: RunState) -> dict:
    cfg = state.cfg
    run = _StageRun(state, "queries")
    if run.complete:
        return run.cp["counts"]
    _require(state, "queries", "instructions")
    run.restore_cursor()

    instructions = sorted(
        read_records(_artifact(state, "instructions_final")), key=lambda i: i.id
    )
    text_by_id = {i.id: i.text for i in instructions}
    funcs_by_id = _funcs_by_instruction(state)
    pool = _read_lines(cfg.path("query_pool_path"), "query pool")
    try:
        inputs = build_inputs(instructions, pool, cfg.queries_per_instruction, cfg.seed)
    except ValueError as exc:
        raise ConfigError(str(exc))

    entries: list[tuple[Any, list[dict]]] = []
    for input in inputs:
        key = f"respond:{input.id}"
        if run.done(key):
            payload = run.payload(key)
        else:
            completions = sample_responses(
                state.gateway, input, cfg.responses_per_input, state.params
            )
            candidates = verify_responses(
                input, completions, funcs_by_id[input.instruction_id],
                state.executor, state.budget, workers=cfg.workers,
            )
            rows = []
            for cand in candidates:
                judge = None
                if cand.pass_rate > cfg.response_threshold:
                    score = judge_quality(
                        state.gateway, text_by_id[input.instruction_id], input,
                        cand.text, state.params,
                    )
                    judge = {"raw": score.raw_completion, "score": score.score,
                             "parse_ok": score.parse_ok}
                rows.append({
                    "input_id": input.id,
                    "sample_index": cand.sample_index,
                    "text": cand.text,
                    "pass_rate": cand.pass_rate,
                    "judge": judge,
                })
            payload = {"candidates": rows}
            run.commit(key, payload)
        entries.append((input, payload["candidates"]))

    judged_pairs = []
    total = verified = judged = 0
    response_lines = []
    for input, rows in entries:
        for row in rows:
            total += 1
            if row["pass_rate"] > cfg.response_threshold:
                verified += 1
                if row["judge"] and row["judge"]["parse_ok"] \
                        and row["judge"]["score"] >= cfg.judge_min:
                    judged += 1
            response_lines.append(_canonical_json(
                {**row, "instruction_id": input.instruction_id}
            ))
            judged_pairs.append((input, _candidate_from_payload(row)))

    train = assemble_train_set(
        judged_pairs, pass_threshold=cfg.response_threshold, judge_min=cfg.judge_min
    )

    write_records(_artifact(state, "inputs"), inputs)
    atomic_write_text(
        _artifact(state, "responses"),
        "\n".join(response_lines) + ("\n" if response_lines else ""),
    )
    write_records(_artifact(state, "train"), train)

    return run.finish({
        "inputs": len(inputs),
        "responses": total,
        "post_verify": verified,
        "post_judge": judged,
    })


# --- stage: mine ---------------------------------------------------------------------


def _response_entries(state: RunState) -> list[tuple[Any, list[ResponseCandidate]]]:
    inputs = read_records(_artifact(state, "inputs"))
    rows_by_input: dict[str, list[dict]] = {}
    with open(_artifact(state, "responses"), encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                row = json.loads(line)
                rows_by_input.setdefault(row["input_id"], []).append(row)
    entries = []
    for input in inputs:
        rows = rows_by_input.get(input.id, [])
        entries.append((input, [_candidate_from_payload(r) for r in rows]))
    return entries


def stage_mine(state: RunState) -> dict:
    cfg = state.cfg
    run = _StageRun(state, "mine")
    if run.complete:
        return run.cp["counts"]
    _require(state, "mine", "queries")

    instructions = read_records(_artifact(state, "instructions_final"))
    by_id = {i.id: i for i in instructions}
    funcs_by_id = _funcs_by_instruction(state)
    cases_by_id: dict[str, list] = {}
    for case in read_records(_artifact(state, "cases")):
        cases_by_id.setdefault(case.instruction_id, []).append(case)

    key = "mine:pairs"
    if run.done(key):
        payload = run.payload(key)
        merged = _payload_records(payload["pairs"])
    else:
        from .sandbox import evaluate_matrix

        bundles = []
        for inst in instructions:
            funcs = funcs_by_id.get(inst.id, [])
            cases = cases_by_id.get(inst.id, [])
            if not funcs or not cases:
                continue
            matrix = evaluate_matrix(
                state.executor, funcs, [c.input for c in cases], state.budget,
                workers=cfg.workers,
            )
            bundles.append(VerifierBundle(
                instruction_id=inst.id, functions=funcs, cases=cases,
                matrix=matrix, stage="cross_verified",
            ))
        ins_pairs = mine_instruction_pairs(
            bundles, by_id, cap=cfg.pair_cap,
            chosen_min=cfg.chosen_min, rejected_max=cfg.rejected_max,
        )
        query_pairs = mine_query_pairs(
            _response_entries(state), cap=cfg.pair_cap,
            pass_threshold=cfg.response_threshold, judge_min=cfg.judge_min,
        )
        merged = merge_pref(ins_pairs, query_pairs)
        payload = {
            "pairs": _records_payload(merged),
            "instruction_pairs": len(ins_pairs),
            "query_pairs": len(query_pairs),
        }
        run.commit(key, payload)

    train = read_records(_artifact(state, "train"))
    sft_count = emit_sft(train, _artifact(state, "sft"))
    emit_dpo(merged, _artifact(state, "dpo_offline"))

    return run.finish({
        "sft": sft_count,
        "dpo_offline": len(merged),
        "instruction_pairs": payload["instruction_pairs"],
        "query_pairs": payload["query_pairs"],
    })


# --- stage: online rounds ------------------------------------------------------------


def _online_artifact(state: RunState, round_index: int) -> str:
    return os.path.join(state.cfg.run_path, f"dpo.online.round-{round_index}.records")


def stage_online(state: RunState, round_index: int) -> dict:
    cfg = state.cfg
    if not 1 <= round_index <= cfg.online_rounds:
        raise ConfigError(
            f"online round {round_index} outside configured range "
            f"1..{cfg.online_rounds}"
        )
    stage = f"online-{round_index}"
    run = _StageRun(state, stage)
    if run.complete:
        return run.cp["counts"]
    prereq = "mine" if round_index == 1 else f"online-{round_index - 1}"
    _require(state, stage, prereq)
    run.restore_cursor()

    train = read_records(_artifact(state, "train"))
    funcs_by_id = _funcs_by_instruction(state)
    round_cfg = OnlineRoundConfig(
        k=cfg.online_k, round_index=round_index,
        temperature=cfg.online_temperature,
        chosen_min=cfg.chosen_min, rejected_max=cfg.rejected_max,
    )

    prompts: list[tuple[str, str]] = []
    seen = set()
    for sample in train:
        if sample.input_text not in seen:
            seen.add(sample.input_text)
            prompts.append((sample.input_text, sample.instruction_id))

    pairs = []
    for idx, (prompt, instruction_id) in enumerate(prompts):
        key = f"prompt:{idx}"
        if run.done(key):
            stored = run.payload(key)["pair"]
            pair = parse_record(stored) if stored is not None else None
        else:
            pair = online_pair_for_prompt(
                state.gateway, prompt, funcs_by_id[instruction_id], round_cfg,
                state.executor, state.budget,
            )
            run.commit(key, {"pair": serialize_record(pair) if pair else None})
        if pair is not None:
            pairs.append(pair)

    emit_dpo(pairs, _online_artifact(state, round_index))
    return run.finish({
        "round": round_index,
        "temperature": round_cfg.temperature,
        "k": round_cfg.k,
        "prompts": len(prompts),
        "pairs": len(pairs),
    })


# --- stage: report -------------------------------------------------------------------


def stage_report(state: RunState) -> dict:
    cfg = state.cfg
    run = _StageRun(state, "report")
    if run.complete:
        return run.cp["counts"]
    prereqs = ["instructions", "queries", "mine"]
    prereqs += [f"online-{r}" for r in range(1, cfg.online_rounds + 1)]
    _require(state, "report", *prereqs)

    stats = funnel_report(cfg.run_path)
    payload = dataclasses.asdict(stats)
    atomic_write_text(
        os.path.join(cfg.run_path, "report.funnel.json"),
        json.dumps(payload, sort_keys=True, indent=2) + "\n",
    )
    atomic_write_text(
        os.path.join(cfg.run_path, "report.funnel.txt"),
        format_funnel_table(stats) + "\n",
    )
    return run.finish(payload)


# --- stage: contamination (optional, not part of run_full) ---------------------------


def stage_contamination(state: RunState, test_path: str, n: Optional[int] = None) -> dict:
    cfg = state.cfg
    _require(state, "contamination", "mine")
    run = _StageRun(state, "contamination")
    order = n or cfg.ngram_n
    train_docs = [
        f"{rec.input}\n{rec.output}" for rec in read_records(_artifact(state, "sft"))
    ]
    test_docs = _read_lines(test_path, "contamination test")
    report = ngram_overlap(train_docs, test_docs, n=order)
    payload = dataclasses.asdict(report)
    payload["hit_indices"] = list(report.hit_indices)
    atomic_write_text(
        os.path.join(cfg.run_path, "contamination.json"),
        json.dumps(payload, sort_keys=True, indent=2) + "\n",
    )
    atomic_write_text(
        os.path.join(cfg.run_path, "contamination.txt"),
        format_contamination_table(report) + "\n",
    )
    return run.finish(payload)


# --- orchestration -------------------------------------------------------------------


def _planned_stages(cfg: RunConfig) -> list[str]:
    stages = ["instructions", "queries", "mine"]
    stages += [f"online-{r}" for r in range(1, cfg.online_rounds + 1)]
    stages.append("report")
    return stages


def acquire_lock(run_dir: str, takeover: bool = False) -> None:
    os.makedirs(run_dir, exist_ok=True)
    path = os.path.join(run_dir, LOCK_NAME)
    payload = _canonical_json({"pid": os.getpid()})
    try:
        fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        if not takeover:
            raise LockError(
                f"run directory {run_dir} is locked ({path}); "
                "use 'resume' to take over an interrupted run"
            )
        atomic_write_text(path, payload)
        return
    with os.fdopen(fd, "w", encoding="utf-8") as fh:
        fh.write(payload)


def release_lock(run_dir: str) -> None:
    try:
        os.unlink(os.path.join(run_dir, LOCK_NAME))
    except FileNotFoundError:
        pass


def dispatch_stage(state: RunState, name: str) -> dict:
    if name == "instructions":
        return stage_instructions(state)
    if name == "queries":
        return stage_queries(state)
    if name == "mine":
        return stage_mine(state)
    if name == "report":
        return stage_report(state)
    if name.startswith("online-"):
        return stage_online(state, int(name.split("-", 1)[1]))
    raise ConfigError(f"unknown stage {name!r}")


def compose_manifest(state: RunState) -> dict:
    cfg = state.cfg
    stages = _planned_stages(cfg)
    counts = {}
    for stage in stages:
        cp = load_checkpoint(cfg.run_path, stage)
        if cp is None or cp.get("status") != "complete":
            raise ConfigError(f"cannot build manifest: stage '{stage}' incomplete")
        counts[stage] = cp["counts"]

    artifacts = {key: rel for key, rel in sorted(ARTIFACTS.items())}
    for r in range(1, cfg.online_rounds + 1):
        artifacts[f"dpo_online_round_{r}"] = f"dpo.online.round-{r}.records"
    artifacts["report_funnel_json"] = "report.funnel.json"
    artifacts["report_funnel_txt"] = "report.funnel.txt"

    online = {
        "skipped": cfg.online_rounds == 0,
        "rounds": [counts[f"online-{r}"] for r in range(1, cfg.online_rounds + 1)],
    }
    return {
        "config": manifest_config(cfg),
        "config_digest": state.digest,
        "stages": stages,
        "artifacts": artifacts,
        "counts": counts,
        "funnel": counts["report"],
        "online": online,
    }


def write_manifest(state: RunState) -> str:
    manifest = compose_manifest(state)
    text = json.dumps(manifest, sort_keys=True, indent=2) + "\n"
    atomic_write_text(os.path.join(state.cfg.run_path, MANIFEST_NAME), text)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def manifest_digest(run_dir: str) -> str:
    with open(os.path.join(run_dir, MANIFEST_NAME), "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def run_full(cfg: RunConfig, takeover: bool = False) -> str:
    """Execute every planned stage and return the manifest digest.

    Completed stages are skipped (digest-guarded), so this doubles as resume.
    An injected crash leaves the lock in place, exactly like a dead process.
    """
    acquire_lock(cfg.run_path, takeover=takeover)
    state = build_state(cfg)
    try:
        for stage in _planned_stages(cfg):
            logger.info("stage %s", stage)
            dispatch_stage(state, stage)
        digest = write_manifest(state)
    except CrashInjected:
        raise
    except BaseException:
        release_lock(cfg.run_path)
        raise
    finally:
        state.close()
    release_lock(cfg.run_path)
    return digest


def run_single_stage(cfg: RunConfig, name: str, takeover: bool = False,
                     test_path: Optional[str] = None) -> dict:
    acquire_lock(cfg.run_path, takeover=takeover)
    state = build_state(cfg)
    try:
        if name == "online":
            counts: dict = {}
            for r in range(1, cfg.online_rounds + 1):
                counts[f"online-{r}"] = stage_online(state, r)
        elif name == "contamination":
            if test_path is None:
                raise ConfigError(
                    "stage 'contamination' needs --test <file> with benchmark lines"
                )
            counts = stage_contamination(state, test_path)
        else:
            counts = dispatch_stage(state, name)
    except CrashInjected:
        raise
    except BaseException:
        release_lock(cfg.run_path)
        raise
    finally:
        state.close()
    release_lock(cfg.run_path)
    return counts


# --- command line --------------------------------------------------------------------

EXIT_CONFIG = 2
EXIT_PROVIDER = 3
EXIT_SANDBOX = 4


def _exit_for(exc: BaseException) -> int:
    if isinstance(exc, (ConfigError, FunnelError, RecordParseError)):
        return EXIT_CONFIG
    if isinstance(exc, (ProviderError, StageError)):
        return EXIT_PROVIDER
    if isinstance(exc, SandboxError):
        return EXIT_SANDBOX
    raise exc


def _guard(action):
    try:
        return action()
    except CrashInjected as exc:
        click.echo(f"aborted: {exc}", err=True)
        sys.exit(1)
    except (ConfigError, FunnelError, RecordParseError, ProviderError,
            StageError, SandboxError) as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(_exit_for(exc))


@click.group()
def main() -> None:
    """Synthesize instruction-following SFT/DPO datasets from seed instructions."""
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path())
def run(config_path: str) -> None:
    """Run every stage end to end and write the manifest."""
    def action():
        digest = run_full(load_config(config_path))
        click.echo(f"manifest digest: {digest}")
    _guard(action)


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path())
def resume(config_path: str) -> None:
    """Take over an interrupted run and finish the remaining work."""
    def action():
        digest = run_full(load_config(config_path), takeover=True)
        click.echo(f"manifest digest: {digest}")
    _guard(action)


@main.command()
@click.argument("name")
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--test", "test_path", type=click.Path(), default=None,
              help="benchmark file for the contamination stage")
def stage(name: str, config_path: str, test_path: Optional[str]) -> None:
    """Run a single stage (instructions|queries|mine|online|online-N|contamination|report)."""
    def action():
        cfg = load_config(config_path)
        counts = run_single_stage(cfg, name, test_path=test_path)
        click.echo(_canonical_json(counts))
    _guard(action)


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path())
def report(config_path: str) -> None:
    """Print the funnel table for a run directory (read-only)."""
    def action():
        cfg = load_config(config_path)
        click.echo(format_funnel_table(funnel_report(cfg.run_path)))
    _guard(action)


@main.command()
@click.option("--train", "train_path", required=True, type=click.Path())
@click.option("--test", "test_path", required=True, type=click.Path())
@click.option("--n", "n", default=13, show_default=True, type=int)
@click.option("--out", "out_path", default=None, type=click.Path(),
              help="also write the report as JSON")
def contamination(train_path: str, test_path: str, n: int, out_path: Optional[str]) -> None:
    """Check test documents for n-gram overlap against training documents.

    Both files hold one document per line.
    """
    def action():
        train_docs = _read_lines(train_path, "train")
        test_docs = _read_lines(test_path, "test")
        report = ngram_overlap(train_docs, test_docs, n=n)
        if out_path:
            payload = dataclasses.asdict(report)
            payload["hit_indices"] = list(report.hit_indices)
            atomic_write_text(out_path, json.dumps(payload, sort_keys=True, indent=2) + "\n")
        click.echo(format_contamination_table(report))
    _guard(action)


if __name__ == "__main__":
    main()
