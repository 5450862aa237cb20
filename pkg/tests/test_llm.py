import json
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import pytest

from advscene.dsl import compile_source
from advscene.guidance import canonical_source
from advscene.llm import (
    ExtractionError, GuidanceFailure, HttpProvider, MockProvider, PromptBundle, ProviderConfig,
    ProviderError, ReasoningTrace, ScriptedProvider, assign_faults, classify_level, debug_loop,
    debugger_ablation, extract_program, fixture_context, generate_program, inject_fault,
    lexicon_level, make_provider, query_to_guidance, scripted_queries, unit_test,
)
from advscene.llm.pipeline import TRACE_SCHEMA
from advscene.llm.providers import FAULT_KINDS, KEY_ENV


def fenced(src: str) -> str:
    return f"```gdl\n{src}```"


@pytest.fixture(scope="module")
def fixture():
    return fixture_context()


# --------------------------------------------------------------------------
# level classification

STRONG = ["aggressively cut in and crash", "forceful merge into the ego lane",
          "high-speed overtake and collision", "an aggressive lane change",
          "collide forcefully with the ego", "overtake at high-speed and hit the ego",
          "aggressive, forceful approach", "ram the ego vehicle aggressively",
          "a forceful cut-in", "high-speed rear-end crash"]
WEAK = ["gently drift into the ego lane", "a cautious merge toward the ego",
        "slight swerve into the ego", "gentle approach from behind",
        "cautiously cut in front of the ego", "a slight drift toward the ego lane",
        "approach the ego cautiously", "drift gently and touch the ego",
        "a slight nudge into the ego", "cautious overtake ending in contact"]
MEDIUM = ["attempt to collide with the ego vehicle", "crash into the ego",
          "cut in front of the ego vehicle", "overtake and collide with the ego",
          "merge into the ego lane and hit it", "approach the ego from behind",
          "block the ego vehicle", "swerve into the ego", "try to hit the ego car",
          "collision with the ego vehicle"]


@pytest.mark.parametrize("query,level", [(q, "strong") for q in STRONG] +
                         [(q, "weak") for q in WEAK] + [(q, "medium") for q in MEDIUM])
def test_lexicon_rules(query, level):
    got, triggers = lexicon_level(query)
    assert got == level
    assert triggers and all(t in query.lower() for t in triggers)


def test_examples_and_conflicts():
    assert classify_level("gently drift into the ego lane")[0] == "weak"
    assert classify_level("aggressive high-speed overtake and crash")[0] == "strong"
    assert classify_level("attempt to collide with the ego vehicle")[0] == "medium"
    # both intensities named: fall back to the ambiguous middle
    assert lexicon_level("aggressive but gentle")[0] == "medium"
    # substrings of other words do not trigger
    assert lexicon_level("the hardware of the lightbar")[0] is None


def test_llm_fallback_only_when_lexicon_silent():
    p = ScriptedProvider(["Thinking...\nlevel: strong"])
    assert classify_level("do the thing", p) == ("strong", [], "llm")
    assert classify_level("crash into it", ScriptedProvider([])) [2] == "lexicon"
    with pytest.raises(ProviderError):
        classify_level("do the thing", ScriptedProvider(["no idea"]))
    with pytest.raises(ProviderError):
        classify_level("do the thing", None)
    with pytest.raises(ValueError):
        classify_level("   ")


# --------------------------------------------------------------------------
# generation


class TestExtraction:
    def test_single_block(self):
        assert extract_program("text\n```gdl\nlevel: weak\n```\nmore") == "level: weak\n"

    @pytest.mark.parametrize("text", [
        "no code at all",
        "```python\nprint(1)\n```",
        "```gdl\na\n```\n```gdl\nb\n```",
        "```gdl\na\n```\n```\nb\n```",
    ])
    def test_rejects(self, text):
        with pytest.raises(ExtractionError):
            extract_program(text)


class TestGenerate:
    def test_canned_medium_program(self):
        p = ScriptedProvider([fenced(canonical_source("medium", w_adv=1.25))])
        g = generate_program("crash", "medium", PromptBundle(), p)
        assert 1.0 <= g.weights["w_adv"] < 2.0
        prompt = p.prompts[0]
        for needle in ("veh_coll_pens", "env_coll_pens", "[1.0, 2.0)", "strong: w_adv in [2.0, 4.0]",
                       "program"):
            assert needle in prompt

    def test_missing_block_is_typed_error(self):
        with pytest.raises(ExtractionError):
            generate_program("crash", "medium", PromptBundle(), ScriptedProvider(["sure!"]))

    def test_out_of_range_weight_reprompted_once(self):
        p = ScriptedProvider([fenced(canonical_source("weak").replace("w_adv = 0.5", "w_adv = 3.0")),
                               fenced(canonical_source("weak"))])
        g = generate_program("gently", "weak", PromptBundle(), p)
        assert g.weights["w_adv"] == 0.5
        assert len(g.completions) == 2 and p.prompts[1].startswith("## Weight correction")

    def test_strong_request_lands_in_strong_range(self):
        g = generate_program("aggressive crash", "strong", PromptBundle(), MockProvider())
        assert 2.0 <= g.weights["w_adv"] <= 4.0

    def test_timeout_surfaces_as_provider_error(self):
        p = ScriptedProvider([ProviderError("timed out")])
        with pytest.raises(ProviderError):
            generate_program("crash", "medium", PromptBundle(), p)


def test_prompt_bundle_requires_placeholders():
    with pytest.raises(ValueError, match="debugger"):
        PromptBundle(debugger="fix it")


# --------------------------------------------------------------------------
# debugger


class TestDebugLoop:
    def test_valid_source_first_attempt(self, fixture):
        out = debug_loop(canonical_source("medium"), fixture, ScriptedProvider([]))
        assert out.ok and out.trace.attempts == 1 and out.trace.diagnostics == [[]]

    def test_syntax_error_then_fix(self, fixture):
        bad = inject_fault(canonical_source("medium"), "syntax")
        p = ScriptedProvider(["Here:\n" + fenced(canonical_source("medium"))])
        out = debug_loop(bad, fixture, p)
        assert out.ok and out.trace.attempts == 2
        assert out.trace.diagnostics[0][0].phase == "parse"
        # the debugger prompt carries both the failing source and its diagnostics
        assert bad in p.prompts[0] and "parse:" in p.prompts[0]

    def test_exhaustion_keeps_every_diagnostic(self, fixture):
        bad = inject_fault(canonical_source("medium"), "unknown_builtin")
        p = ScriptedProvider([fenced(bad), fenced(bad)])
        out = debug_loop(bad, fixture, p, max_iters=3)
        assert not out.ok and out.trace.attempts == 3
        assert len(out.trace.diagnostics) == 3 and all(out.trace.diagnostics)
        assert out.trace.stage == "debug" and out.trace.status == "failed"

    @pytest.mark.parametrize("kind,phase", [("syntax", "parse"), ("unknown_builtin", "typecheck"),
                                            ("nonfinite", "eval"), ("mixed_route", "typecheck"),
                                            ("weight_range", "typecheck")])
    def test_fault_kinds_are_caught(self, fixture, kind, phase):
        program, diags = unit_test(inject_fault(canonical_source("weak"), kind), fixture)
        assert program is None and diags[0].phase == phase

    def test_level_mismatch_is_rejected(self, fixture):
        _, diags = unit_test(canonical_source("weak"), fixture, expected_level="strong")
        assert diags and "level" in diags[0].message

    def test_provider_failure_during_repair(self, fixture):
        bad = inject_fault(canonical_source("medium"), "syntax")
        out = debug_loop(bad, fixture, ScriptedProvider([ProviderError("offline")]))
        assert not out.ok
        assert out.trace.all_diagnostics()[-1].phase == "provider"

    def test_invalid_max_iters(self, fixture):
        with pytest.raises(ValueError):
            debug_loop("x", fixture, ScriptedProvider([]), max_iters=0)


# --------------------------------------------------------------------------
# full pipeline


QUERY_STRONG = "Make the adversarial vehicle overtake the ego vehicle and collide with it at high speed"


def test_high_speed_overtake_yields_strong_program_with_speed_term(fixture):
    p = ScriptedProvider(["Reasoning: strong, add speed.\n" + fenced(canonical_source("strong"))])
    program, trace = query_to_guidance(QUERY_STRONG, p, fixture)
    assert program.level == "strong" and trace.level == "strong"
    assert "high speed" in trace.triggers
    assert "speed(adv)" in program.source and len(program.terms) == 4
    assert trace.status == "ok" and trace.attempts == 1


def test_offline_provider_fails_at_generation(fixture):
    p = HttpProvider(ProviderConfig(kind="http", endpoint="http://127.0.0.1:9/none", timeout=0.5))
    with pytest.raises(GuidanceFailure) as e:
        query_to_guidance("crash into the ego", p, fixture)
    assert e.value.stage == "generate"
    assert e.value.trace.all_diagnostics()


def test_every_failure_has_a_diagnostic(fixture):
    cases = [("do it", ScriptedProvider([ProviderError("down")]), "classify"),
             ("crash", ScriptedProvider(["nothing fenced"]), "generate"),
             ("crash", ScriptedProvider([fenced("level: medium\nloss = (")] * 3), "debug")]
    for query, provider, stage in cases:
        with pytest.raises(GuidanceFailure) as e:
            query_to_guidance(query, provider, fixture)
        assert e.value.stage == stage
        assert len(e.value.trace.all_diagnostics()) >= 1


def test_mock_pipeline_is_reproducible(fixture, tmp_path):
    def run():
        provider = MockProvider(seed=4, fault_rate=0.5)
        traces = []
        for q in scripted_queries(8, 2):
            try:
                traces.append(query_to_guidance(q, provider, fixture)[1].to_dict())
            except GuidanceFailure as e:
                traces.append(e.trace.to_dict())
        return traces

    a, b = run(), run()
    assert json.dumps(a, sort_keys=True) == json.dumps(b, sort_keys=True)
    t = ReasoningTrace(query="q")
    t.save(tmp_path / "trace.json")
    assert ReasoningTrace.load_dict(tmp_path / "trace.json")["schema"] == TRACE_SCHEMA


def test_trace_attempts_bounded(fixture):
    for q in scripted_queries(10, 5):
        provider = MockProvider(faults={q: "syntax"})
        _, trace = query_to_guidance(q, provider, fixture, max_iters=2)
        assert trace.attempts <= 2


def test_fault_assignment_is_exact():
    qs = scripted_queries(50, 0)
    faults = assign_faults(qs, 0.3, 0)
    assert len(faults) == 15 and set(faults.values()) <= set(FAULT_KINDS[:4])


def test_debugger_ablation_direction():
    with_dbg, without = debugger_ablation(n=50, fault_rate=0.3, max_iters=3)
    assert with_dbg.rate > without.rate
    clean, _ = debugger_ablation(n=50, fault_rate=0.0, max_iters=3)
    assert clean.rate == 1.0


def test_mock_faults_by_rate_are_deterministic():
    m = MockProvider(seed=1, fault_rate=0.3)
    qs = scripted_queries(200, 1)
    kinds = [m.fault_for(q) for q in qs]
    assert kinds == [MockProvider(seed=1, fault_rate=0.3).fault_for(q) for q in qs]
    assert 0.15 < sum(k is not None for k in kinds) / len(qs) < 0.45


def test_inject_fault_unknown_kind():
    with pytest.raises(ValueError):
        inject_fault(canonical_source(), "gremlin")
    compile_source(canonical_source())   # the untouched program is valid


# --------------------------------------------------------------------------
# http provider


class _Handler(BaseHTTPRequestHandler):
    seen = []

    def do_POST(self):
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        _Handler.seen.append((body, self.headers.get("Authorization")))
        if body["model"] == "broken":
            payload = b"not json"
        else:
            payload = json.dumps({"choices": [{"message": {"content": fenced(
                canonical_source("weak"))}}]}).encode()
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(payload)))
        self.end_headers()
        self.wfile.write(payload)

    def log_message(self, *args):
        pass


@pytest.fixture
def server():
    srv = HTTPServer(("127.0.0.1", 0), _Handler)
    th = threading.Thread(target=srv.serve_forever, daemon=True)
    th.start()
    yield f"http://127.0.0.1:{srv.server_address[1]}/v1/chat/completions"
    srv.shutdown()


def test_http_provider_round_trip(server, monkeypatch):
    monkeypatch.setenv(KEY_ENV, "sekret")
    cfg = ProviderConfig(kind="http", endpoint=server, model="m1", temperature=0.2)
    p = make_provider(cfg)
    reply = p.complete("sys", [{"role": "user", "content": "hi"}])
    assert extract_program(reply) == canonical_source("weak")
    body, auth = _Handler.seen[-1]
    assert auth == "Bearer sekret"
    assert body["messages"][0] == {"role": "system", "content": "sys"}
    assert body["temperature"] == 0.2 and body["model"] == "m1"


def test_http_provider_bad_reply(server):
    p = HttpProvider(ProviderConfig(kind="http", endpoint=server, model="broken"))
    with pytest.raises(ProviderError, match="JSON"):
        p.complete("sys", [{"role": "user", "content": "hi"}])


def test_provider_config_validation():
    for kw in ({"timeout": 0}, {"kind": "carrier-pigeon"}, {"fault_rate": 2}):
        with pytest.raises(ValueError):
            ProviderConfig(**kw)
    with pytest.raises(ProviderError):
        HttpProvider(ProviderConfig(kind="http")).complete("s", [])
