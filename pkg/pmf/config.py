"""Load run and experiment settings from TOML or JSON files.

Values are layered: built-in defaults, then the file, then the
``PMF_*`` environment variables. Command-line flags are applied last by
the CLI.
"""

import json
import logging
import os
import tomllib
from collections.abc import Mapping
from pathlib import Path
from typing import Any

from pmf.benchmarks import ProblemDescriptor
from pmf.core import ConfigInvalidError
from pmf.handover import HandoverConfig
from pmf.metaheuristics import AlgorithmId
from pmf.metaheuristics import params_from_mapping
from pmf.orchestrator import ExperimentConfig
from pmf.orchestrator import RunConfig
from pmf.orchestrator import SelectorKind
from pmf.selector import API_KEY_ENV
from pmf.selector import URL_ENV
from pmf.selector import ExternalSelectorConfig
from pmf.selector import SelectorPolicy

logger = logging.getLogger(__name__)

OUTPUT_ENV = "PMF_OUTPUT_DIR"

_SECTIONS = frozenset({"problem", "run", "selector", "handover", "experiment", "params"})
_PROBLEM_KEYS = frozenset({"function", "dim", "seed", "bias"})
_RUN_KEYS = frozenset(
    {
        "population_size",
        "max_evals",
        "epoch_evals",
        "initial_algorithm",
        "seed",
        "output_dir",
    },
)
_POLICY_KEYS = frozenset(
    {
        "stagnation_threshold",
        "diversity_low",
        "diversity_high",
        "phase_split",
        "exploratory_set",
        "exploitative_set",
        "cost_aware",
        "late_convergence_switch",
    },
)
_EXTERNAL_KEYS = frozenset({"endpoint_url", "model_name", "timeout", "max_retries"})
_HANDOVER_KEYS = frozenset(
    {
        "elite_fraction",
        "restart_diversity_threshold",
        "reevaluate_on_switch",
        "hybrid_merge_enabled",
        "donor_fraction",
    },
)
_EXPERIMENT_KEYS = frozenset(
    {"strategies", "functions", "seeds", "output_dir", "plot", "workers"},
)


def _table(data: Mapping[str, Any], name: str) -> Mapping[str, Any]:
    value = data.get(name, {})
    if not isinstance(value, Mapping):
        message = f"Config section [{name}] must be a table."
        raise ConfigInvalidError(message)
    return value


def _check_keys(table: Mapping[str, Any], allowed: frozenset[str], section: str) -> None:
    unknown = sorted(set(table) - allowed)
    if unknown:
        message = f"Unknown config key '{section}.{unknown[0]}'."
        raise ConfigInvalidError(message)


def _algorithm(value: object, key: str) -> AlgorithmId:
    try:
        return AlgorithmId(str(value).upper())
    except ValueError:
        message = f"Config key '{key}' names unknown algorithm '{value}'."
        raise ConfigInvalidError(message) from None


def _seeds(value: object) -> tuple[int, ...]:
    if isinstance(value, int):
        return tuple(range(value))
    if isinstance(value, list):
        return tuple(int(seed) for seed in value)
    message = "Config key 'experiment.seeds' must be a count or a list of seeds."
    raise ConfigInvalidError(message)


def _policy(table: Mapping[str, Any]) -> SelectorPolicy:
    values = {k: v for k, v in table.items() if k in _POLICY_KEYS}
    for key in ("exploratory_set", "exploitative_set"):
        if key in values:
            values[key] = tuple(_algorithm(a, f"selector.{key}") for a in values[key])
    return SelectorPolicy(**values)


def _external(
    table: Mapping[str, Any],
    env: Mapping[str, str],
) -> ExternalSelectorConfig | None:
    url = env.get(URL_ENV) or table.get("endpoint_url")
    if not url:
        return None
    values = {k: v for k, v in table.items() if k in _EXTERNAL_KEYS - {"endpoint_url"}}
    return ExternalSelectorConfig(
        endpoint_url=str(url),
        api_key=env.get(API_KEY_ENV),
        **values,
    )


def _params(
    table: Mapping[str, Any],
    problem: ProblemDescriptor,
    population_size: int,
) -> dict[AlgorithmId, dict[str, Any]]:
    overrides: dict[AlgorithmId, dict[str, Any]] = {}
    for name, values in table.items():
        algorithm = _algorithm(name, f"params.{name}")
        if not isinstance(values, Mapping):
            message = f"Config section [params.{name}] must be a table."
            raise ConfigInvalidError(message)
        params_from_mapping(algorithm, problem.dim, population_size, values)
        overrides[algorithm] = dict(values)
    return overrides


def build_config(
    data: Mapping[str, Any],
    env: Mapping[str, str] | None = None,
) -> ExperimentConfig:
    """Turn a parsed config document into validated settings.

    Args:
    ----
        data (Mapping[str, Any]): The parsed TOML or JSON document.
        env (Mapping[str, str] | None): Environment, ``os.environ`` by default.

    Returns:
    -------
        ExperimentConfig: The experiment; its ``template`` is the run config.

    Raises:
    ------
        ConfigInvalidError: naming the first offending key.

    """
    environment = os.environ if env is None else env
    _check_keys(data, _SECTIONS, "<root>")
    problem_table = _table(data, "problem")
    run_table = _table(data, "run")
    selector_table = _table(data, "selector")
    handover_table = _table(data, "handover")
    experiment_table = _table(data, "experiment")
    _check_keys(problem_table, _PROBLEM_KEYS, "problem")
    _check_keys(run_table, _RUN_KEYS, "run")
    _check_keys(selector_table, _POLICY_KEYS | _EXTERNAL_KEYS | {"kind"}, "selector")
    _check_keys(handover_table, _HANDOVER_KEYS, "handover")
    _check_keys(experiment_table, _EXPERIMENT_KEYS, "experiment")

    try:
        problem = ProblemDescriptor(**problem_table)
        kind = SelectorKind(selector_table.get("kind", SelectorKind.RULE_BASED))
        run_values = dict(run_table)
        if "initial_algorithm" in run_values:
            run_values["initial_algorithm"] = _algorithm(
                run_values["initial_algorithm"],
                "run.initial_algorithm",
            )
        output = environment.get(OUTPUT_ENV) or run_values.pop("output_dir", None)
        run_values.pop("output_dir", None)
        population_size = int(run_values.get("population_size", 30))
        template = RunConfig(
            problem=problem,
            selector=kind,
            policy=_policy(selector_table),
            external=_external(selector_table, environment),
            handover=HandoverConfig(**handover_table),
            params=_params(_table(data, "params"), problem, population_size),
            output_dir=Path(output) if output else None,
            **run_values,
        )
        experiment_values = dict(experiment_table)
        if "seeds" in experiment_values:
            experiment_values["seeds"] = _seeds(experiment_values["seeds"])
        for key in ("strategies", "functions"):
            if key in experiment_values:
                experiment_values[key] = tuple(str(v) for v in experiment_values[key])
        experiment_output = environment.get(OUTPUT_ENV) or experiment_values.pop(
            "output_dir",
            None,
        )
        experiment_values.pop("output_dir", None)
        if experiment_output:
            experiment_values["output_dir"] = Path(experiment_output)
        return ExperimentConfig(template=template, **experiment_values)
    except (TypeError, ValueError) as error:
        message = f"Invalid configuration: {error}"
        raise ConfigInvalidError(message) from error


def load_config(path: Path, env: Mapping[str, str] | None = None) -> ExperimentConfig:
    """Read ``path`` (``.toml`` or ``.json``) and build the settings."""
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as error:
        message = f"Cannot read config file '{path}': {error.strerror}."
        raise ConfigInvalidError(message) from error
    try:
        if path.suffix == ".json":
            data = json.loads(text)
        elif path.suffix == ".toml":
            data = tomllib.loads(text)
        else:
            message = f"Config file '{path}' must end in .toml or .json."
            raise ConfigInvalidError(message)
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as error:
        message = f"Cannot parse config file '{path}': {error}"
        raise ConfigInvalidError(message) from error
    if not isinstance(data, Mapping):
        message = f"Config file '{path}' must hold a table at the top level."
        raise ConfigInvalidError(message)
    logger.info("Loaded configuration from %s", path)
    return build_config(data, env)


def default_config(env: Mapping[str, str] | None = None) -> ExperimentConfig:
    """Settings when no config file is given: defaults plus environment."""
    return build_config({}, env)
