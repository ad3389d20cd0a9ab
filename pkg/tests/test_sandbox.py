"""Native evaluator semantics, matrix evaluation, and guest worker lifecycle."""

import os
import sys
import time

import pytest
from hypothesis import given
from hypothesis import strategies as st

from ifsynth import sandbox as sb
from ifsynth.datamodel import make_verifier

from oracles import ref_word_count

FAKE_GUEST = os.path.join(os.path.dirname(__file__), "fake_guest.py")
BUDGET = sb.ExecBudget()
FAST = sb.ExecBudget(wall_timeout_ms=200)


def _fn(source):
    return make_verifier(instruction_id="a" * 16, source_code=source, compile_ok=True)


def test_budget_validation():
    with pytest.raises(ValueError):
        sb.ExecBudget(wall_timeout_ms=99)
    with pytest.raises(ValueError):
        sb.ExecBudget(memory_cap_bytes=0)
    assert BUDGET.wall_timeout_ms == 2000
    assert BUDGET.memory_cap_bytes == 256 * 1024 * 1024
    assert BUDGET.max_output_bytes == 64 * 1024


# --- native grammar -------------------------------------------------------------

NATIVE = sb.NativeEvaluator()


@pytest.mark.parametrize("source", [
    "length <= 50", "length >= 3", "length == 0", "words <= 25", "words >= 20",
    "words == 20", "lines == 5", 'forbid "sS"', 'prefix "Yes"', 'suffix "Thanks"',
    "always_true", "always_false", "raise_error", "return_nonbool",
])
def test_native_compile_accepts_grammar(source):
    out = NATIVE.compile_check(_fn(source), BUDGET)
    assert out.status == "ok" and out.value is None


@pytest.mark.parametrize("source", [
    "require_numbered_list",
    "def evaluate(response): return len(response) <= 50",  # real Python needs the guest
    "length <= fifty",
    'forbid sS',  # unquoted
    "lines <= 3",  # only == is in the grammar for lines
    "",
])
def test_native_compile_rejects_everything_else(source):
    assert NATIVE.compile_check(_fn(source), BUDGET).status == "compile_error"


def _run(source, text):
    return NATIVE.evaluate(_fn(source), text, BUDGET)


def test_native_length_rule_on_concise_answer():
    answer = "AutoARIMA automates ARIMA model selection."
    assert len(answer) == 42
    out = _run("length <= 50", answer)
    assert (out.status, out.value) == ("ok", True)
    assert _run("length <= 50", "x" * 50).value is True   # boundary inclusive
    assert _run("length <= 50", "x" * 51).value is False


def test_native_word_count_rule():
    assert _run("words == 20", "one two three").value is False
    exactly_twenty = " ".join(f"w{i}" for i in range(20))
    assert _run("words == 20", exactly_twenty).value is True
    assert _run("words <= 2", "  spaced   out  ").value is True


def test_native_forbid_rule():
    assert _run('forbid "sS"', "EternaRealm").value is True
    assert _run('forbid "sS"', "snake").value is False
    assert _run('forbid "sS"', "Sphinx").value is False
    assert _run('forbid ""', "anything goes").value is True


def test_native_prefix_suffix_lines():
    assert _run('prefix "Yes"', "Yes, of course").value is True
    assert _run('prefix "Yes"', "yes, of course").value is False  # case-sensitive
    assert _run('suffix "Thanks"', "Many Thanks").value is True
    assert _run("lines == 1", "single line").value is True
    assert _run("lines == 1", "two\nlines").value is False
    assert _run("lines == 5", "a\nb\nc\nd\ne").value is True


def test_native_diagnostics():
    assert (_run("always_true", "x").status, _run("always_true", "x").value) == ("ok", True)
    assert _run("always_false", "x").value is False
    assert _run("raise_error", "x").status == "runtime_error"
    assert _run("return_nonbool", "x").status == "bad_return"


@given(st.text(max_size=300))
def test_native_counts_match_python_semantics(text):
    assert _run("length <= 50", text).value == (len(text) <= 50)
    assert _run("words == 3", text).value == (ref_word_count(text) == 3)
    assert _run("words >= 2", text).value == (ref_word_count(text) >= 2)
    assert _run("lines == 2", text).value == (len(text.split("\n")) == 2)
    assert _run('forbid "sS"', text).value == ("s" not in text and "S" not in text)


@given(st.text(max_size=100))
def test_native_repeated_evaluation_is_pure(text):
    a = _run('prefix "Yes"', text)
    b = _run('prefix "Yes"', text)
    assert (a.status, a.value) == (b.status, b.value)


# --- matrix ----------------------------------------------------------------------


def test_matrix_singleton_equals_evaluate():
    m = sb.evaluate_matrix(NATIVE, [_fn("length <= 5")], ["abc"], BUDGET)
    single = NATIVE.evaluate(_fn("length <= 5"), "abc", BUDGET)
    assert len(m) == 1 and len(m[0]) == 1
    assert (m[0][0].status, m[0][0].value) == (single.status, single.value)


def test_matrix_is_complete_despite_erroring_function():
    funcs = [_fn("length <= 3"), _fn("raise_error"), _fn("always_true")]
    inputs = ["a", "ab", "abc", "abcd"]
    m = sb.evaluate_matrix(NATIVE, funcs, inputs, BUDGET)
    assert [len(row) for row in m] == [4, 4, 4]
    assert [c.status for c in m[1]] == ["runtime_error"] * 4
    assert [c.value for c in m[0]] == [True, True, True, False]
    assert [c.value for c in m[2]] == [True] * 4


def test_matrix_parallel_matches_sequential():
    funcs = [_fn(s) for s in
             ["length <= 2", "words == 1", 'forbid "z"', "raise_error", "always_false"]]
    inputs = ["a", "zz", "one two", "xyz", ""]
    seq = sb.evaluate_matrix(NATIVE, funcs, inputs, BUDGET, workers=1)
    par = sb.evaluate_matrix(NATIVE, funcs, inputs, BUDGET, workers=4)
    assert seq == par


def test_matrix_empty_dimensions():
    assert sb.evaluate_matrix(NATIVE, [], ["a"], BUDGET) == []
    assert sb.evaluate_matrix(NATIVE, [_fn("always_true")], [], BUDGET) == [[]]


# --- guest process lifecycle ------------------------------------------------------


@pytest.fixture
def guest():
    executor = sb.GuestProcessExecutor([sys.executable, FAKE_GUEST], lanes=1,
                                       spawn_budget=FAST)
    yield executor
    executor.close()


def test_guest_eval_and_compile_roundtrip(guest):
    out = guest.evaluate(_fn("ok:true"), "any", FAST)
    assert (out.status, out.value) == ("ok", True)
    assert guest.evaluate(_fn("ok:false"), "any", FAST).value is False
    compiled = guest.compile_check(_fn("compile_ok"), FAST)
    assert (compiled.status, compiled.value) == ("ok", None)
    assert guest.compile_check(_fn("compile_err"), FAST).status == "compile_error"


def test_guest_error_statuses(guest):
    assert guest.evaluate(_fn("runtime"), "x", FAST).status == "runtime_error"
    assert guest.evaluate(_fn("nonbool"), "x", FAST).status == "bad_return"


def test_guest_hang_is_killed_within_grace_and_respawned(guest):
    assert guest.evaluate(_fn("set_flag"), "", FAST).value is True
    assert guest.evaluate(_fn("check_flag"), "", FAST).value is True  # same process

    started = time.monotonic()
    out = guest.evaluate(_fn("hang"), "", FAST)
    elapsed = time.monotonic() - started
    assert out.status == "timeout"
    assert elapsed <= (FAST.wall_timeout_ms + sb.KILL_GRACE_MS) / 1000.0 + 0.5

    # hung worker was replaced: the flag set earlier is gone
    assert guest.evaluate(_fn("check_flag"), "", FAST).value is False


def test_guest_self_timeout_also_forces_respawn(guest):
    assert guest.evaluate(_fn("set_flag"), "", FAST).value is True
    assert guest.evaluate(_fn("self_timeout"), "", FAST).status == "timeout"
    assert guest.evaluate(_fn("check_flag"), "", FAST).value is False


def test_guest_death_is_reported_and_recovered(guest):
    assert guest.evaluate(_fn("die"), "", FAST).status == "runtime_error"
    assert guest.evaluate(_fn("ok:true"), "", FAST).value is True


def test_guest_protocol_violations_are_contained(guest):
    assert guest.evaluate(_fn("reply_bad_version"), "", FAST).status == "runtime_error"
    assert guest.evaluate(_fn("ok:true"), "", FAST).value is True
    assert guest.evaluate(_fn("reply_garbage"), "", FAST).status == "runtime_error"
    assert guest.evaluate(_fn("ok:false"), "", FAST).value is False


def test_guest_slow_reply_within_budget_succeeds(guest):
    out = guest.evaluate(_fn("slow:50"), "", FAST)
    assert (out.status, out.value) == ("ok", True)
    assert out.duration_ms <= FAST.wall_timeout_ms + sb.KILL_GRACE_MS


def test_guest_matrix_parallel_matches_sequential():
    funcs = [_fn("ok:true"), _fn("ok:false"), _fn("runtime")]
    inputs = ["i1", "i2"]
    with sb.GuestProcessExecutor([sys.executable, FAKE_GUEST], lanes=2,
                                 spawn_budget=FAST) as executor:
        par = sb.evaluate_matrix(executor, funcs, inputs, FAST, workers=2)
        seq = sb.evaluate_matrix(executor, funcs, inputs, FAST, workers=1)
    assert par == seq
    assert [c.value for c in par[0]] == [True, True]
    assert [c.status for c in par[2]] == ["runtime_error", "runtime_error"]


def test_guest_lanes_validation():
    with pytest.raises(ValueError):
        sb.GuestProcessExecutor([sys.executable, FAKE_GUEST], lanes=0)
