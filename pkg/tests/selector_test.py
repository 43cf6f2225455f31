"""Tests for the rule-based and external selectors."""

import json
import pathlib
from collections.abc import Callable

import httpx
import pytest

from pmf import selector
from pmf.core import ConfigInvalidError
from pmf.feedback import FeedbackReport
from pmf.feedback import HistoryLog
from pmf.feedback import record
from pmf.metaheuristics import AlgorithmId
from pmf.selector import Action
from pmf.selector import Decision

URL = "http://selector.test/v1/chat/completions"
POLICY = selector.SelectorPolicy()


def make_report(  # noqa: PLR0913
    algorithm: AlgorithmId = AlgorithmId.DE,
    *,
    epoch: int = 0,
    stagnation: int = 0,
    diversity: float = 0.3,
    budget_fraction: float = 0.2,
    improvement: float = 0.0,
) -> FeedbackReport:
    """Build a report with the indicators the rules look at."""
    return FeedbackReport(
        epoch=epoch,
        algorithm=algorithm,
        best_fitness=10.0,
        mean_fitness=20.0,
        improvement_rate=improvement,
        convergence_rate=0.0,
        stagnation_count=stagnation,
        diversity=diversity,
        evals_used_total=100,
        budget_fraction=budget_fraction,
        epoch_wall_time=0.1,
    )


def logged(*reports: FeedbackReport) -> HistoryLog:
    """A history holding ``reports`` with consecutive epochs."""
    log = HistoryLog()
    for epoch, report in enumerate(reports):
        record(log, FeedbackReport.from_dict(report.to_dict() | {"epoch": epoch}))
    return log


def chat(content: str) -> dict[str, object]:
    """A chat-completions body carrying ``content``."""
    return {"choices": [{"message": {"role": "assistant", "content": content}}]}


def client_for(transport: httpx.MockTransport) -> httpx.Client:
    """An HTTP client that never leaves the process."""
    return httpx.Client(transport=transport)


def test_stagnation_switches_to_next_exploratory() -> None:
    """Stagnation early with no history moves DE to PSO."""
    report = make_report(stagnation=3)
    decision = selector.decide_rule_based(report, logged(report), POLICY)
    assert decision.action is Action.SWITCH
    assert decision.target is AlgorithmId.PSO


def test_no_rule_fires() -> None:
    """A healthy epoch continues."""
    report = make_report()
    decision = selector.decide_rule_based(report, logged(report), POLICY)
    assert decision == Decision.keep("no rule fired")


def test_stagnation_prefers_best_cumulative_improvement() -> None:
    """Late stagnation picks the untried algorithm with most past improvement."""
    report = make_report(AlgorithmId.CMAES, stagnation=3, budget_fraction=0.7)
    log = logged(report)
    log.cumulative_improvement |= {AlgorithmId.GA: 0.5, AlgorithmId.PSO: 0.1}
    assert selector.decide_rule_based(report, log, POLICY).target is AlgorithmId.GA


def test_stagnation_takes_precedence_over_diversity() -> None:
    """Stagnation wins over the late high-diversity rule."""
    report = make_report(stagnation=3, budget_fraction=0.7, diversity=0.8)
    log = logged(report)
    log.cumulative_improvement[AlgorithmId.ACO] = 0.3
    assert selector.decide_rule_based(report, log, POLICY).target is AlgorithmId.ACO


def test_stagnation_round_robin_when_all_tried() -> None:
    """Every algorithm already ran this phase, so the phase list rotates."""
    reports = [make_report(algorithm) for algorithm in AlgorithmId]
    current = make_report(AlgorithmId.DE, stagnation=3)
    log = logged(*reports, current)
    assert selector.decide_rule_based(log.reports[-1], log, POLICY).target is AlgorithmId.PSO


def test_stagnation_cost_aware_tie_break() -> None:
    """Equal improvement is broken by mean wall time when cost-aware."""
    report = make_report(stagnation=3)
    log = logged(report)
    log.epochs |= {AlgorithmId.PSO: 1, AlgorithmId.GA: 1}
    log.wall_time |= {AlgorithmId.PSO: 2.0, AlgorithmId.GA: 1.0}
    assert selector.decide_rule_based(report, log, POLICY).target is AlgorithmId.PSO
    cheap = selector.SelectorPolicy(cost_aware=True)
    assert selector.decide_rule_based(report, log, cheap).target is AlgorithmId.GA


def test_low_diversity_early_goes_exploratory() -> None:
    """A collapsed population early leaves an exploitative algorithm."""
    report = make_report(AlgorithmId.CMAES, diversity=0.01)
    decision = selector.decide_rule_based(report, logged(report), POLICY)
    assert decision.target is AlgorithmId.DE


def test_low_diversity_early_keeps_exploratory() -> None:
    """No diversity switch when the current algorithm already explores."""
    report = make_report(AlgorithmId.PSO, diversity=0.01)
    assert selector.decide_rule_based(report, logged(report), POLICY).action is Action.CONTINUE


def test_high_diversity_late_goes_exploitative() -> None:
    """A spread-out population late switches to CMA-ES."""
    report = make_report(AlgorithmId.DE, diversity=0.8, budget_fraction=0.7)
    decision = selector.decide_rule_based(report, logged(report), POLICY)
    assert decision.target is AlgorithmId.CMAES


def test_converged_exploratory_population_late_goes_exploitative() -> None:
    """DE still improving slightly on a collapsed population hands over to CMA-ES."""
    report = make_report(AlgorithmId.DE, diversity=0.003, budget_fraction=0.6, improvement=1e-6)
    decision = selector.decide_rule_based(report, logged(report), POLICY)
    assert decision.target is AlgorithmId.CMAES
    assert decision.reason.startswith("population converged late")


@pytest.mark.parametrize(
    ("algorithm", "budget_fraction"),
    [(AlgorithmId.SA, 0.6), (AlgorithmId.PSO, 0.2)],
)
def test_converged_population_continues(algorithm: AlgorithmId, budget_fraction: float) -> None:
    """Exploitative algorithms late, or exploratory ones early, keep running."""
    report = make_report(algorithm, diversity=0.003, budget_fraction=budget_fraction)
    assert selector.decide_rule_based(report, logged(report), POLICY).action is Action.CONTINUE


def test_converged_population_rule_can_be_disabled() -> None:
    """Without the late convergence rule nothing fires."""
    report = make_report(AlgorithmId.DE, diversity=0.003, budget_fraction=0.6)
    policy = selector.SelectorPolicy(late_convergence_switch=False)
    assert selector.decide_rule_based(report, logged(report), policy).action is Action.CONTINUE


def test_policy_rejects_overlapping_sets() -> None:
    """The two groups must partition the algorithms."""
    with pytest.raises(ConfigInvalidError):
        selector.SelectorPolicy(exploratory_set=(AlgorithmId.DE, AlgorithmId.CMAES))


def test_policy_rejects_bad_thresholds() -> None:
    """Thresholds are range-checked."""
    with pytest.raises(ConfigInvalidError):
        selector.SelectorPolicy(stagnation_threshold=0)
    with pytest.raises(ConfigInvalidError):
        selector.SelectorPolicy(phase_split=1.0)


def test_prompt_with_one_epoch() -> None:
    """A single-epoch history renders exactly one report line."""
    report = make_report()
    prompt = selector.build_prompt(report, logged(report), list(AlgorithmId))
    lines = prompt.splitlines()
    assert sum(line.startswith('{"epoch"') for line in lines) == 1
    assert "Current algorithm: DE" in prompt
    assert "GA, PSO, DE, ACO, SA, TS, CMAES" in prompt
    assert '"action"' in lines[-1]


def test_prompt_keeps_last_five_reports() -> None:
    """Older reports are left out."""
    log = logged(*(make_report() for _ in range(7)))
    prompt = selector.build_prompt(log.reports[-1], log, list(AlgorithmId))
    epochs = [json.loads(line)["epoch"] for line in prompt.splitlines() if line.startswith("{")]
    assert epochs == [2, 3, 4, 5, 6]


def test_prompt_does_not_repeat_a_logged_copy() -> None:
    """A report equal to the logged one, but not the same object, appears once."""
    log = logged(make_report(), make_report(improvement=0.1))
    latest = FeedbackReport.from_dict(log.reports[-1].to_dict())
    assert latest is not log.reports[-1]
    prompt = selector.build_prompt(latest, log, list(AlgorithmId))
    epochs = [json.loads(line)["epoch"] for line in prompt.splitlines() if line.startswith("{")]
    assert epochs == [0, 1]


def test_prompt_with_report_not_yet_logged() -> None:
    """A newer report than the log holds is appended after it."""
    log = logged(make_report())
    prompt = selector.build_prompt(make_report(epoch=1), log, list(AlgorithmId))
    epochs = [json.loads(line)["epoch"] for line in prompt.splitlines() if line.startswith("{")]
    assert epochs == [0, 1]


@pytest.mark.parametrize(
    ("text", "expected"),
    [
        ('{"action": "continue"}', Decision.keep()),
        (
            '{"action":"switch","algorithm":"SA","reason":"stagnation"}',
            Decision.switch(AlgorithmId.SA, "stagnation"),
        ),
        (
            'Sure! ```json\n{"action": "switch", "algorithm": "cma-es"}\n``` done',
            Decision.switch(AlgorithmId.CMAES),
        ),
        ('{"action": "switch", "algorithm": "DE"}', Decision.keep("no-op switch")),
    ],
)
def test_parse_decision(text: str, expected: Decision) -> None:
    """Decisions are found inside prose and normalized."""
    assert selector.parse_decision(text, AlgorithmId.DE) == expected


@pytest.mark.parametrize(
    ("text", "error"),
    [
        ("I would switch to PSO.", selector.ParseFailureError),
        ('{"action": "jump"}', selector.ParseFailureError),
        ('{"action": "switch"}', selector.ParseFailureError),
        ('{"action": "switch", "algorithm": "XYZ"}', selector.UnknownAlgorithmError),
    ],
)
def test_parse_decision_failures(text: str, error: type[Exception]) -> None:
    """Unusable responses raise."""
    with pytest.raises(error):
        selector.parse_decision(text, AlgorithmId.DE)


def test_external_config_validation() -> None:
    """Empty URLs and negative retries are rejected."""
    with pytest.raises(ConfigInvalidError):
        selector.ExternalSelectorConfig(endpoint_url="")
    with pytest.raises(ConfigInvalidError):
        selector.ExternalSelectorConfig(endpoint_url=URL, max_retries=-1)


def test_external_config_hides_api_key() -> None:
    """The key never shows up in a repr."""
    cfg = selector.ExternalSelectorConfig(endpoint_url=URL, api_key="sk-secret")
    assert "sk-secret" not in repr(cfg)


def test_external_config_from_env(monkeypatch: pytest.MonkeyPatch) -> None:
    """URL and key are read from the environment."""
    monkeypatch.setenv(selector.URL_ENV, URL)
    monkeypatch.setenv(selector.API_KEY_ENV, "sk-env")
    cfg = selector.ExternalSelectorConfig.from_env()
    assert cfg.endpoint_url == URL
    assert cfg.api_key == "sk-env"


def test_decide_external_switch() -> None:
    """A valid answer is followed and the request carries the key."""
    seen: list[httpx.Request] = []

    def handler(request: httpx.Request) -> httpx.Response:
        seen.append(request)
        return httpx.Response(200, json=chat('{"action": "switch", "algorithm": "PSO"}'))

    report = make_report()
    cfg = selector.ExternalSelectorConfig(endpoint_url=URL, model_name="m", api_key="k")
    decision = selector.decide_external(
        cfg,
        report,
        logged(report),
        list(AlgorithmId),
        POLICY,
        client=client_for(httpx.MockTransport(handler)),
    )
    assert decision.target is AlgorithmId.PSO
    assert seen[0].headers["Authorization"] == "Bearer k"
    body = json.loads(seen[0].content)
    assert body["model"] == "m"
    assert body["messages"][0]["content"].startswith("You are the selection agent")


def _timeout(request: httpx.Request) -> httpx.Response:
    raise httpx.ReadTimeout("timed out", request=request)


def _server_error(request: httpx.Request) -> httpx.Response:  # noqa: ARG001
    return httpx.Response(503, text="busy")


def _garbage(request: httpx.Request) -> httpx.Response:  # noqa: ARG001
    return httpx.Response(200, text="<html>not json</html>")


def _prose(request: httpx.Request) -> httpx.Response:  # noqa: ARG001
    return httpx.Response(200, json=chat("I think you should keep going."))


def _unavailable(request: httpx.Request) -> httpx.Response:  # noqa: ARG001
    return httpx.Response(200, json=chat('{"action": "switch", "algorithm": "TS"}'))


@pytest.mark.parametrize("handler", [_timeout, _server_error, _garbage, _prose, _unavailable])
def test_decide_external_falls_back(handler: Callable[[httpx.Request], httpx.Response]) -> None:
    """Every endpoint failure yields the rule-based decision."""
    report = make_report(stagnation=3)
    log = logged(report)
    available = [a for a in AlgorithmId if a is not AlgorithmId.TS]
    decision = selector.decide_external(
        selector.ExternalSelectorConfig(endpoint_url=URL),
        report,
        log,
        available,
        POLICY,
        client=client_for(httpx.MockTransport(handler)),
    )
    expected = selector.decide_rule_based(report, log, POLICY)
    assert decision.action is expected.action
    assert decision.target is expected.target
    assert decision.reason.startswith(selector.FALLBACK_PREFIX)


def test_decide_external_retries_once() -> None:
    """One retry after a failed request, then fallback."""
    calls: list[int] = []

    def handler(request: httpx.Request) -> httpx.Response:  # noqa: ARG001
        calls.append(1)
        return httpx.Response(500)

    report = make_report()
    decision = selector.decide_external(
        selector.ExternalSelectorConfig(endpoint_url=URL, max_retries=1),
        report,
        logged(report),
        list(AlgorithmId),
        POLICY,
        client=client_for(httpx.MockTransport(handler)),
    )
    assert len(calls) == 2
    assert decision.action is Action.CONTINUE


def test_decide_external_writes_trace(tmp_path: pathlib.Path) -> None:
    """Prompt, raw response and decision are appended per call."""

    def handler(request: httpx.Request) -> httpx.Response:  # noqa: ARG001
        return httpx.Response(200, json=chat('{"action": "continue"}'))

    trace = tmp_path / "trace.jsonl"
    report = make_report()
    for _ in range(2):
        selector.decide_external(
            selector.ExternalSelectorConfig(endpoint_url=URL),
            report,
            logged(report),
            list(AlgorithmId),
            POLICY,
            client=client_for(httpx.MockTransport(handler)),
            trace_path=trace,
        )
    entries = [json.loads(line) for line in trace.read_text(encoding="utf-8").splitlines()]
    assert len(entries) == 2
    assert entries[0]["response"] == '{"action": "continue"}'
    assert entries[0]["decision"]["action"] == "continue"
    assert "Current algorithm: DE" in entries[0]["prompt"]


def test_selector_objects() -> None:
    """The three selector classes satisfy the protocol."""
    report = make_report(stagnation=3)
    log = logged(report)
    assert selector.RuleBasedSelector().decide(report, log).target is AlgorithmId.PSO
    assert selector.ContinueSelector().decide(report, log) == Decision.keep("baseline")


def test_trace_records_every_attempt(tmp_path: pathlib.Path) -> None:
    """A malformed body and a following 503 are both traced verbatim."""
    replies = iter(
        [
            httpx.Response(200, text="<html>not json</html>"),
            httpx.Response(503, text="busy"),
        ],
    )

    def handler(request: httpx.Request) -> httpx.Response:  # noqa: ARG001
        return next(replies)

    trace = tmp_path / "trace.jsonl"
    report = make_report(stagnation=3)
    decision = selector.decide_external(
        selector.ExternalSelectorConfig(endpoint_url=URL, max_retries=1),
        report,
        logged(report),
        list(AlgorithmId),
        POLICY,
        client=client_for(httpx.MockTransport(handler)),
        trace_path=trace,
    )
    assert decision.reason.startswith(selector.FALLBACK_PREFIX)
    [entry] = [json.loads(line) for line in trace.read_text(encoding="utf-8").splitlines()]
    attempts = entry["attempts"]
    assert [a["status"] for a in attempts] == [200, 503]
    assert [a["response"] for a in attempts] == ["<html>not json</html>", "busy"]
    assert attempts[0]["error"].startswith("Malformed chat-completion body")
    assert "503" in attempts[1]["error"]
    assert entry["error"].startswith("No usable selector reply after 2 attempt(s)")
    assert entry["decision"]["algorithm"] == "PSO"


def test_trace_records_transport_errors(tmp_path: pathlib.Path) -> None:
    """A timed-out attempt is traced with its error and no body."""
    trace = tmp_path / "trace.jsonl"
    report = make_report()
    selector.decide_external(
        selector.ExternalSelectorConfig(endpoint_url=URL, max_retries=0),
        report,
        logged(report),
        list(AlgorithmId),
        POLICY,
        client=client_for(httpx.MockTransport(_timeout)),
        trace_path=trace,
    )
    [entry] = [json.loads(line) for line in trace.read_text(encoding="utf-8").splitlines()]
    assert entry["attempts"] == [
        {"attempt": 1, "status": None, "response": None, "error": "timed out"},
    ]
