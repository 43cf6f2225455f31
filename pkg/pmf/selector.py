"""Continue-or-switch decisions: a deterministic rule policy and an HTTP endpoint."""

import enum
import json
import logging
import os
from collections.abc import Iterable
from collections.abc import Sequence
from dataclasses import dataclass
from dataclasses import field
from pathlib import Path
from typing import Any
from typing import Protocol
from typing import Self

import httpx

from pmf.core import ConfigInvalidError
from pmf.core import PmfError
from pmf.feedback import FeedbackReport
from pmf.feedback import HistoryLog
from pmf.metaheuristics import AlgorithmId

logger = logging.getLogger(__name__)

PROMPT_REPORTS = 5
FALLBACK_PREFIX = "fallback:"
API_KEY_ENV = "PMF_SELECTOR_API_KEY"
URL_ENV = "PMF_SELECTOR_URL"

_PREAMBLE = (
    "You are the selection agent of an adaptive optimizer that minimises a "
    "black-box function by running one metaheuristic per epoch. After each "
    "epoch you decide whether to continue with the current algorithm or "
    "switch to another one."
)
_CONTRACT = (
    'Respond with only a JSON object: {"action": "continue"} or '
    '{"action": "switch", "algorithm": "<ID>", "reason": "<text>"}.'
)


class ParseFailureError(PmfError):
    """A selector response holds no usable JSON decision."""


class UnknownAlgorithmError(PmfError):
    """A decision names an algorithm outside the seven known ones."""


class Action(enum.StrEnum):
    """What the orchestrator does next."""

    CONTINUE = "continue"
    SWITCH = "switch"


@dataclass(frozen=True)
class Decision:
    """A selector verdict; ``target`` is set exactly for switches."""

    action: Action
    target: AlgorithmId | None = None
    reason: str = ""

    def __post_init__(self: Self) -> None:
        """Check that ``target`` matches ``action``."""
        if (self.action is Action.SWITCH) != (self.target is not None):
            message = "A switch needs a target and a continue must not have one."
            raise PmfError(message)

    @classmethod
    def keep(cls: type[Self], reason: str = "") -> Self:
        """Continue with the current algorithm."""
        return cls(Action.CONTINUE, None, reason)

    @classmethod
    def switch(cls: type[Self], target: AlgorithmId, reason: str = "") -> Self:
        """Switch to ``target``."""
        return cls(Action.SWITCH, target, reason)


@dataclass(frozen=True)
class SelectorPolicy:
    """Thresholds and algorithm groups of the rule-based selector."""

    stagnation_threshold: int = 3
    diversity_low: float = 0.05
    diversity_high: float = 0.6
    phase_split: float = 0.5
    exploratory_set: tuple[AlgorithmId, ...] = (
        AlgorithmId.DE,
        AlgorithmId.PSO,
        AlgorithmId.GA,
    )
    exploitative_set: tuple[AlgorithmId, ...] = (
        AlgorithmId.CMAES,
        AlgorithmId.SA,
        AlgorithmId.ACO,
        AlgorithmId.TS,
    )
    cost_aware: bool = False
    late_convergence_switch: bool = True

    def __post_init__(self: Self) -> None:
        """Validate thresholds and that the two groups partition the algorithms."""
        if self.stagnation_threshold < 1:
            message = "selector.stagnation_threshold must be a positive integer."
            raise ConfigInvalidError(message)
        if not 0.0 < self.phase_split < 1.0:
            message = "selector.phase_split must lie strictly between 0 and 1."
            raise ConfigInvalidError(message)
        if not 0.0 <= self.diversity_low <= self.diversity_high <= 1.0:
            message = "selector diversity thresholds must satisfy 0 <= low <= high <= 1."
            raise ConfigInvalidError(message)
        exploratory = set(self.exploratory_set)
        exploitative = set(self.exploitative_set)
        if exploratory & exploitative or exploratory | exploitative != set(AlgorithmId):
            message = (
                "selector.exploratory_set and selector.exploitative_set must be "
                "disjoint and cover all seven algorithms."
            )
            raise ConfigInvalidError(message)

    def phase_sets(
        self: Self,
        budget_fraction: float,
    ) -> tuple[tuple[AlgorithmId, ...], tuple[AlgorithmId, ...]]:
        """The group suited to the current phase, then the other group."""
        if budget_fraction < self.phase_split:
            return self.exploratory_set, self.exploitative_set
        return self.exploitative_set, self.exploratory_set


def _rotated_after(
    items: Sequence[AlgorithmId],
    current: AlgorithmId,
) -> list[AlgorithmId]:
    """``items`` starting right after ``current`` (unchanged if absent), without it."""
    if current not in items:
        return list(items)
    start = items.index(current) + 1
    return [item for item in (*items[start:], *items[:start]) if item != current]


def _preference_order(
    current: AlgorithmId,
    policy: SelectorPolicy,
    budget_fraction: float,
) -> list[AlgorithmId]:
    phase, other = policy.phase_sets(budget_fraction)
    if current in phase:
        return _rotated_after(phase, current) + list(other)
    return list(phase) + _rotated_after(other, current)


def _tried_this_phase(
    log: HistoryLog,
    policy: SelectorPolicy,
    budget_fraction: float,
) -> set[AlgorithmId]:
    early = budget_fraction < policy.phase_split
    return {
        report.algorithm
        for report in log.reports
        if (report.budget_fraction < policy.phase_split) == early
    }


def _stagnation_target(
    report: FeedbackReport,
    log: HistoryLog,
    policy: SelectorPolicy,
) -> AlgorithmId:
    current = report.algorithm
    order = _preference_order(current, policy, report.budget_fraction)
    tried = _tried_this_phase(log, policy, report.budget_fraction)
    untried = [algorithm for algorithm in order if algorithm not in tried]
    if untried:

        def rank(algorithm: AlgorithmId) -> tuple[float, float, int]:
            cost = log.mean_wall_time(algorithm) if policy.cost_aware else None
            return (
                -log.cumulative_improvement.get(algorithm, 0.0),
                float("inf") if cost is None else cost,
                order.index(algorithm),
            )

        return min(untried, key=rank)
    phase, other = policy.phase_sets(report.budget_fraction)
    cycle = _rotated_after(phase, current) or _rotated_after(other, current)
    return cycle[0]


def decide_rule_based(
    report: FeedbackReport,
    log: HistoryLog,
    policy: SelectorPolicy,
) -> Decision:
    """Apply the stagnation, diversity and phase rules in order.

    An exploratory population that has collapsed in the late phase keeps
    improving by tiny steps and never stagnates, so it is handed to the
    first exploitative algorithm unless ``late_convergence_switch`` is off.

    Args:
    ----
        report (FeedbackReport): The latest report, already recorded in ``log``.
        log (HistoryLog): Run history.
        policy (SelectorPolicy): Thresholds and algorithm groups.

    Returns:
    -------
        Decision: A switch from the first rule that fires, else continue.

    """
    current = report.algorithm
    if report.stagnation_count >= policy.stagnation_threshold:
        target = _stagnation_target(report, log, policy)
        return Decision.switch(
            target,
            f"stagnation for {report.stagnation_count} epochs",
        )
    early = report.budget_fraction < policy.phase_split
    if (
        early
        and report.diversity < policy.diversity_low
        and current not in policy.exploratory_set
    ):
        target = next(a for a in policy.exploratory_set if a != current)
        return Decision.switch(target, f"diversity {report.diversity:.3g} too low early")
    if (
        not early
        and report.diversity > policy.diversity_high
        and current not in policy.exploitative_set
    ):
        target = next(a for a in policy.exploitative_set if a != current)
        return Decision.switch(target, f"diversity {report.diversity:.3g} too high late")
    if (
        policy.late_convergence_switch
        and not early
        and report.diversity < policy.diversity_low
        and current in policy.exploratory_set
    ):
        return Decision.switch(
            policy.exploitative_set[0],
            f"population converged late (diversity {report.diversity:.3g})",
        )
    return Decision.keep("no rule fired")


def build_prompt(
    report: FeedbackReport,
    log: HistoryLog,
    available: Iterable[AlgorithmId],
) -> str:
    """Render the selection query sent to an external endpoint."""
    reports = [*(r for r in log.reports if r.epoch < report.epoch), report]
    recent = reports[-PROMPT_REPORTS:]
    cumulative = {str(k): v for k, v in sorted(log.cumulative_improvement.items())}
    lines = [
        _PREAMBLE,
        "",
        f"Current algorithm: {report.algorithm}",
        "Recent epoch reports (JSON lines, oldest first):",
        *(r.to_json() for r in recent),
        "",
        f"Cumulative improvement per algorithm: {json.dumps(cumulative)}",
        f"Available algorithms: {', '.join(str(a) for a in available)}",
        "",
        _CONTRACT,
    ]
    return "\n".join(lines)


def _first_json_object(text: str) -> dict[str, Any]:
    decoder = json.JSONDecoder()
    start = text.find("{")
    while start != -1:
        try:
            value, _ = decoder.raw_decode(text, start)
        except json.JSONDecodeError:
            pass
        else:
            if isinstance(value, dict):
                return value
        start = text.find("{", start + 1)
    message = "No JSON object found in the selector response."
    raise ParseFailureError(message)


def _algorithm_from(name: object) -> AlgorithmId:
    normalized = str(name).strip().upper().replace("-", "").replace("_", "")
    try:
        return AlgorithmId(normalized)
    except ValueError:
        message = f"Unknown algorithm '{name}'."
        raise UnknownAlgorithmError(message) from None


def parse_decision(text: str, current: AlgorithmId) -> Decision:
    """Extract and validate the first JSON decision object in ``text``."""
    payload = _first_json_object(text)
    action = str(payload.get("action", "")).strip().lower()
    reason = str(payload.get("reason", ""))
    if action == Action.CONTINUE:
        return Decision.keep(reason)
    if action != Action.SWITCH:
        message = f"Unknown action '{payload.get('action')}'."
        raise ParseFailureError(message)
    if "algorithm" not in payload:
        message = "A switch decision must name an algorithm."
        raise ParseFailureError(message)
    target = _algorithm_from(payload["algorithm"])
    if target == current:
        return Decision.keep("no-op switch")
    return Decision.switch(target, reason)


@dataclass(frozen=True)
class ExternalSelectorConfig:
    """Connection settings of an OpenAI-compatible chat-completions endpoint."""

    endpoint_url: str
    model_name: str = "default"
    api_key: str | None = field(default=None, repr=False)
    timeout: float = 20.0
    max_retries: int = 1

    def __post_init__(self: Self) -> None:
        """Validate the timeout and retry count."""
        if not self.endpoint_url:
            message = "selector.endpoint_url must not be empty."
            raise ConfigInvalidError(message)
        if self.timeout <= 0:
            message = f"selector.timeout must be positive, got {self.timeout}."
            raise ConfigInvalidError(message)
        if self.max_retries < 0:
            message = f"selector.max_retries must be >= 0, got {self.max_retries}."
            raise ConfigInvalidError(message)

    @classmethod
    def from_env(
        cls: type[Self],
        endpoint_url: str | None = None,
        **kwargs: Any,  # noqa: ANN401
    ) -> Self:
        """Fill the URL and key from ``PMF_SELECTOR_URL`` and ``PMF_SELECTOR_API_KEY``."""
        url = endpoint_url or os.environ.get(URL_ENV, "")
        kwargs.setdefault("api_key", os.environ.get(API_KEY_ENV))
        return cls(endpoint_url=url, **kwargs)


def _append_trace(path: Path | None, entry: dict[str, Any]) -> None:
    if path is None:
        return
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("a", encoding="utf-8") as trace:
        trace.write(json.dumps(entry) + "\n")


def _request_text(
    cfg: ExternalSelectorConfig,
    prompt: str,
    client: httpx.Client,
    attempts: list[dict[str, Any]],
) -> str:
    """Post ``prompt`` until a well-formed reply arrives or the retries run out.

    Every attempt is appended to ``attempts`` with its status and raw body,
    or with the transport error when no body arrived.
    """
    payload = {
        "model": cfg.model_name,
        "messages": [{"role": "user", "content": prompt}],
        "temperature": 0,
    }
    headers = {"Authorization": f"Bearer {cfg.api_key}"} if cfg.api_key else {}
    last_error: PmfError | None = None
    for attempt in range(1 + cfg.max_retries):
        call: dict[str, Any] = {"attempt": attempt + 1, "status": None, "response": None}
        attempts.append(call)
        try:
            response = client.post(
                cfg.endpoint_url,
                json=payload,
                headers=headers,
                timeout=cfg.timeout,
            )
            call["status"] = response.status_code
            call["response"] = response.text
            response.raise_for_status()
        except httpx.HTTPError as error:
            logger.info("Selector request attempt %d failed: %s", attempt + 1, error)
            call["error"] = str(error)
            last_error = PmfError(f"Selector endpoint unavailable: {error}")
            continue
        try:
            data = response.json()
            return str(data["choices"][0]["message"]["content"])
        except (ValueError, KeyError, IndexError, TypeError) as error:
            logger.info("Selector reply on attempt %d is malformed: %s", attempt + 1, error)
            call["error"] = f"Malformed chat-completion body: {error}"
            last_error = ParseFailureError(call["error"])
    message = f"No usable selector reply after {1 + cfg.max_retries} attempt(s): {last_error}"
    if isinstance(last_error, ParseFailureError):
        raise ParseFailureError(message)
    raise PmfError(message)


def decide_external(  # noqa: PLR0913
    cfg: ExternalSelectorConfig,
    report: FeedbackReport,
    log: HistoryLog,
    available: Sequence[AlgorithmId],
    fallback_policy: SelectorPolicy,
    *,
    client: httpx.Client | None = None,
    trace_path: Path | None = None,
) -> Decision:
    """Ask the endpoint; any failure yields the rule-based decision instead.

    Args:
    ----
        cfg (ExternalSelectorConfig): Endpoint settings.
        report (FeedbackReport): The latest report.
        log (HistoryLog): Run history.
        available (Sequence[AlgorithmId]): Algorithms the endpoint may pick.
        fallback_policy (SelectorPolicy): Policy used when the endpoint fails.
        client (httpx.Client | None): Client to send with; a new one otherwise.
        trace_path (Path | None): Where prompt and raw response are appended.

    Returns:
    -------
        Decision: Never raises.

    """
    prompt = build_prompt(report, log, available)
    attempts: list[dict[str, Any]] = []
    entry: dict[str, Any] = {
        "epoch": report.epoch,
        "prompt": prompt,
        "response": None,
        "attempts": attempts,
    }
    owned = client is None
    http = httpx.Client() if client is None else client
    try:
        text = _request_text(cfg, prompt, http, attempts)
        entry["response"] = text
        decision = parse_decision(text, report.algorithm)
        if decision.target is not None and decision.target not in available:
            message = f"Algorithm {decision.target} is not available."
            raise UnknownAlgorithmError(message)
    except PmfError as error:
        entry["error"] = error.message
        fallback = decide_rule_based(report, log, fallback_policy)
        logger.warning("External selector failed (%s); using rule-based decision", error)
        decision = Decision(
            fallback.action,
            fallback.target,
            f"{FALLBACK_PREFIX} {fallback.reason}",
        )
    finally:
        if owned:
            http.close()
    entry["decision"] = {
        "action": str(decision.action),
        "algorithm": None if decision.target is None else str(decision.target),
        "reason": decision.reason,
    }
    _append_trace(trace_path, entry)
    return decision


class Selector(Protocol):
    """Anything the orchestrator can consult after an epoch."""

    def decide(self: Self, report: FeedbackReport, log: HistoryLog) -> Decision:
        """Return the verdict for the epoch described by ``report``."""
        ...  # pragma: no cover


@dataclass(frozen=True)
class RuleBasedSelector:
    """Deterministic policy selector."""

    policy: SelectorPolicy = field(default_factory=SelectorPolicy)

    def decide(self: Self, report: FeedbackReport, log: HistoryLog) -> Decision:
        """Apply :func:`decide_rule_based`."""
        return decide_rule_based(report, log, self.policy)


@dataclass
class ExternalSelector:
    """Endpoint-backed selector with rule-based fallback."""

    config: ExternalSelectorConfig
    policy: SelectorPolicy = field(default_factory=SelectorPolicy)
    client: httpx.Client | None = None
    trace_path: Path | None = None

    def decide(self: Self, report: FeedbackReport, log: HistoryLog) -> Decision:
        """Apply :func:`decide_external` over all seven algorithms."""
        return decide_external(
            self.config,
            report,
            log,
            list(AlgorithmId),
            self.policy,
            client=self.client,
            trace_path=self.trace_path,
        )


class ContinueSelector:
    """Never switches; turns a run into a single-algorithm baseline."""

    def decide(self: Self, report: FeedbackReport, log: HistoryLog) -> Decision:  # noqa: ARG002
        """Always continue."""
        return Decision.keep("baseline")
