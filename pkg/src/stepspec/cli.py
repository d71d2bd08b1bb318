"""Command-line surface: run, sweep, simulate, profile, compare.

Config files are strict JSON: unknown keys are hard errors, as are unknown
``--overrides`` paths (dotted, e.g. ``engine.threshold=9``; bare engine keys
like ``threshold=9`` are accepted as a shortcut). Validation happens before
any backend call or output file is created. Exit codes: 0 success, 1 invalid
config, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import copy
import json
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any

from .backends.base import Backend, GenerationRequest
from .backends.http import OpenAICompletionsBackend
from .backends.simulated import SimulatedBackend
from .bench import (
    Knob,
    Scheme,
    SweepSpec,
    grade_answer,
    read_results_csv,
    run_scheme,
    run_sweep,
)
from .core import BackendProfile, BackendRole, EngineConfig, UtilityScore
from .simlab import (
    DEFAULT_BASE_PROFILE,
    DEFAULT_BASE_SPEC,
    DEFAULT_JUDGE_SPEC,
    DEFAULT_SMALL_PROFILE,
    DEFAULT_SMALL_SPEC,
    ChainTask,
    SimJudgeSpec,
    SimModelSpec,
    expected_step_latency,
    make_tasks,
    sample_step_latencies,
)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class CliConfig:
    """Parsed command line: the verb plus its config file and options."""

    verb: str
    config_path: str | None
    overrides: tuple[str, ...]
    output_dir: str | None


_ENGINE_DEFAULTS = EngineConfig().to_dict()

_DEFAULT_CONFIG: dict[str, Any] = {
    "engine": _ENGINE_DEFAULTS,
    "backends": {
        "mode": "simulated",
        "seed": 0,
        "token_agreement_prob": 0.8,
        "small": {
            "error_prob": DEFAULT_SMALL_SPEC.per_step_error_prob,
            "verbosity": DEFAULT_SMALL_SPEC.verbosity,
            "reflection_prob": DEFAULT_SMALL_SPEC.reflection_prob,
            "profile": DEFAULT_SMALL_PROFILE.to_dict(),
        },
        "base": {
            "error_prob": DEFAULT_BASE_SPEC.per_step_error_prob,
            "verbosity": DEFAULT_BASE_SPEC.verbosity,
            "reflection_prob": DEFAULT_BASE_SPEC.reflection_prob,
            "profile": DEFAULT_BASE_PROFILE.to_dict(),
        },
        "judge": {
            "correct_score": DEFAULT_JUDGE_SPEC.correct_score.value,
            "wrong_score_max": DEFAULT_JUDGE_SPEC.wrong_score_max,
            "noise": DEFAULT_JUDGE_SPEC.noise,
        },
        "base_url": None,
        "small_model": None,
        "base_model": None,
        "api_key_env": "STEPSPEC_API_KEY",
        "timeout_s": 120.0,
    },
    "problems": {"count": 8, "length": 12, "modulus": 97, "seed": 0, "file": None},
    "scheme": "SpecReason",
    "schemes": ["BaseOnly", "SpecReason"],
    "sweep": {"knob": "Threshold", "values": [3, 5, 7, 9], "repeats": 16},
    "parallelism": 1,
}


def _merge_config(defaults: dict, user: dict, path: str = "") -> dict:
    merged = copy.deepcopy(defaults)
    for key, value in user.items():
        full_key = f"{path}{key}"
        if key not in defaults:
            raise ConfigError(f"unknown config key: {full_key}")
        if isinstance(defaults[key], dict) and isinstance(value, dict):
            merged[key] = _merge_config(defaults[key], value, f"{full_key}.")
        else:
            merged[key] = value
    return merged


def load_config(path: str | None) -> dict[str, Any]:
    if path is None:
        return copy.deepcopy(_DEFAULT_CONFIG)
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}")
    try:
        user = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}")
    if not isinstance(user, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return _merge_config(_DEFAULT_CONFIG, user)


def apply_overrides(config: dict[str, Any], overrides: tuple[str, ...]) -> None:
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        parts = key.split(".")
        if len(parts) == 1 and parts[0] not in config and parts[0] in _ENGINE_DEFAULTS:
            parts = ["engine", parts[0]]
        node: Any = config
        for part in parts[:-1]:
            if not isinstance(node, dict) or part not in node:
                raise ConfigError(f"unknown override key: {key}")
            node = node[part]
        leaf = parts[-1]
        if not isinstance(node, dict) or leaf not in node:
            raise ConfigError(f"unknown override key: {key}")
        node[leaf] = value


def build_engine_config(config: dict[str, Any]) -> EngineConfig:
    try:
        return EngineConfig.from_dict(config["engine"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"engine config invalid: {exc}")


def _profile_from_dict(data: dict[str, Any], fallback_role: BackendRole) -> BackendProfile:
    merged = dict(data)
    merged.setdefault("role", fallback_role.value)
    try:
        return BackendProfile.from_dict(merged)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"backend profile invalid: {exc}")


def build_backends(config: dict[str, Any]) -> tuple[Backend, Backend]:
    section = config["backends"]
    mode = section["mode"]
    if mode == "simulated":
        try:
            small_spec = SimModelSpec(
                per_step_error_prob=section["small"]["error_prob"],
                verbosity=section["small"]["verbosity"],
                profile=_profile_from_dict(section["small"]["profile"], BackendRole.SMALL),
                reflection_prob=section["small"]["reflection_prob"],
            )
            base_spec = SimModelSpec(
                per_step_error_prob=section["base"]["error_prob"],
                verbosity=section["base"]["verbosity"],
                profile=_profile_from_dict(section["base"]["profile"], BackendRole.BASE),
                reflection_prob=section["base"]["reflection_prob"],
            )
            judge = SimJudgeSpec(
                correct_score=UtilityScore(section["judge"]["correct_score"]),
                wrong_score_max=section["judge"]["wrong_score_max"],
                noise=section["judge"]["noise"],
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"simulated backend config invalid: {exc}")
        small = SimulatedBackend(
            small_spec,
            seed=section["seed"],
            token_agreement_prob=section["token_agreement_prob"],
        )
        base = SimulatedBackend(
            base_spec,
            judge_spec=judge,
            seed=section["seed"],
            token_agreement_prob=section["token_agreement_prob"],
        )
        return small, base
    if mode == "http":
        for key in ("base_url", "small_model", "base_model"):
            if not section[key]:
                raise ConfigError(f"http mode requires backends.{key}")
        small = OpenAICompletionsBackend(
            base_url=section["base_url"],
            model=section["small_model"],
            profile=_profile_from_dict(section["small"]["profile"], BackendRole.SMALL),
            api_key_env=section["api_key_env"],
            timeout_s=section["timeout_s"],
        )
        base = OpenAICompletionsBackend(
            base_url=section["base_url"],
            model=section["base_model"],
            profile=_profile_from_dict(section["base"]["profile"], BackendRole.BASE),
            api_key_env=section["api_key_env"],
            timeout_s=section["timeout_s"],
        )
        return small, base
    raise ConfigError(f"backends.mode must be 'simulated' or 'http', got {mode!r}")


def build_tasks(config: dict[str, Any]) -> list[ChainTask]:
    problems = config["problems"]
    if problems.get("file"):
        try:
            data = json.loads(Path(problems["file"]).read_text())
            return [ChainTask.from_dict(item) for item in data]
        except (OSError, ValueError, KeyError) as exc:
            raise ConfigError(f"cannot load task file {problems['file']}: {exc}")
    try:
        return make_tasks(
            count=problems["count"],
            length=problems["length"],
            modulus=problems["modulus"],
            seed=problems["seed"],
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"problems config invalid: {exc}")


def _parse_scheme(name: str) -> Scheme:
    try:
        return Scheme(name)
    except ValueError:
        raise ConfigError(
            f"unknown scheme {name!r}; expected one of "
            f"{[s.value for s in Scheme]}"
        )


def _parse_sweep(config: dict[str, Any], engine: EngineConfig) -> SweepSpec:
    section = config["sweep"]
    try:
        knob = Knob(section["knob"])
    except ValueError:
        raise ConfigError(
            f"unknown sweep knob {section['knob']!r}; expected one of "
            f"{[k.value for k in Knob]}"
        )
    try:
        return SweepSpec(
            knob=knob,
            values=tuple(section["values"]),
            base_config=engine,
            repeats=section["repeats"],
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"sweep config invalid: {exc}")


def cmd_run(cli: CliConfig, args: argparse.Namespace) -> int:
    config = load_config(cli.config_path)
    apply_overrides(config, cli.overrides)
    engine = build_engine_config(config)
    scheme = _parse_scheme(config["scheme"])
    tasks = build_tasks(config)
    index = args.problem_index
    if not 0 <= index < len(tasks):
        raise ConfigError(f"problem index {index} out of range [0, {len(tasks)})")
    small, base = build_backends(config)

    task = tasks[index]
    result = run_scheme(scheme, engine, task.problem_text(), small, base)
    correct = grade_answer(result.state.final_answer, task.final_answer())

    for outcome in result.outcomes:
        step = outcome.step
        score = "-" if step.score is None else str(step.score.value)
        print(
            f"step {step.index:03d} {outcome.action.value:<24} "
            f"{step.producer.value:<10} score={score} tokens={step.token_count} "
            f"latency={step.latency.total_s:.3f}s"
        )
    answer = (result.state.final_answer or "").strip()
    print(f"answer: {answer}")
    metrics = result.metrics
    accepted = (
        "-"
        if metrics.accepted_fraction is None
        else f"{metrics.accepted_fraction:.3f}"
    )
    print(
        f"scheme={scheme.value} latency={metrics.latency_s:.3f}s "
        f"thinking_tokens={metrics.thinking_tokens} accepted_fraction={accepted} "
        f"rejected={metrics.rejected_count} "
        f"budget_exhausted={metrics.budget_exhausted} correct={correct}"
    )
    if cli.output_dir is not None:
        out = Path(cli.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        with (out / "trace.jsonl").open("w") as handle:
            for item in result.trace:
                handle.write(json.dumps(item) + "\n")
        summary = {
            "scheme": scheme.value,
            "problem_index": index,
            "metrics": {**metrics.to_dict(), "correct": correct},
            "final_answer": result.state.final_answer,
            "engine": engine.to_dict(),
        }
        (out / "run.json").write_text(json.dumps(summary, indent=2) + "\n")
    return 0


def cmd_sweep(cli: CliConfig, args: argparse.Namespace) -> int:
    config = load_config(cli.config_path)
    apply_overrides(config, cli.overrides)
    if args.parallelism is not None:
        config["parallelism"] = args.parallelism
    engine = build_engine_config(config)
    sweep = _parse_sweep(config, engine)
    schemes = [_parse_scheme(name) for name in config["schemes"]]
    tasks = build_tasks(config)
    small, base = build_backends(config)

    output_dir = Path(cli.output_dir or "stepspec-out")
    result = run_sweep(
        sweep,
        tasks,
        small,
        base,
        schemes=schemes,
        parallelism=config["parallelism"],
        output_dir=output_dir,
    )
    print(f"wrote {output_dir / 'results.csv'}")
    for cell in result.cells:
        accepted = (
            "-"
            if cell.mean_accepted_fraction is None
            else f"{cell.mean_accepted_fraction:.3f}"
        )
        print(
            f"{cell.scheme.value:<18} {cell.knob.value}={cell.knob_value:<6} "
            f"pass@1={cell.pass_at_1:.3f} latency={cell.mean_latency_s:.2f}s "
            f"tokens={cell.mean_thinking_tokens:.0f} accepted={accepted}"
        )
    return 0


def cmd_simulate(cli: CliConfig, args: argparse.Namespace) -> int:
    config = load_config(cli.config_path)
    apply_overrides(config, cli.overrides)
    section = config["backends"]
    small_spec = SimModelSpec(
        per_step_error_prob=section["small"]["error_prob"],
        verbosity=section["small"]["verbosity"],
        profile=_profile_from_dict(section["small"]["profile"], BackendRole.SMALL),
        reflection_prob=section["small"]["reflection_prob"],
    )
    base_spec = SimModelSpec(
        per_step_error_prob=section["base"]["error_prob"],
        verbosity=section["base"]["verbosity"],
        profile=_profile_from_dict(section["base"]["profile"], BackendRole.BASE),
        reflection_prob=section["base"]["reflection_prob"],
    )
    alphas = args.alpha or [0.7]
    worst = 0.0
    for alpha in alphas:
        if not 0 <= alpha <= 1:
            raise ConfigError(f"alpha must be in [0, 1], got {alpha}")
        closed = expected_step_latency(alpha, small_spec, base_spec)
        samples = sample_step_latencies(alpha, args.steps, args.seed, small_spec, base_spec)
        monte_carlo = float(samples.mean())
        rel_err = abs(monte_carlo - closed) / closed
        worst = max(worst, rel_err)
        print(
            f"alpha={alpha:.3f} closed_form={closed:.6f}s "
            f"monte_carlo={monte_carlo:.6f}s rel_err={rel_err * 100:.3f}%"
        )
    print(f"max_rel_err={worst * 100:.3f}%")
    return 0


def _measure_profile(args: argparse.Namespace) -> BackendProfile:
    placeholder = BackendProfile(
        name=args.model,
        role=BackendRole(args.role),
        decode_s_per_token=1.0,
        prefill_tokens_per_s=1.0,
    )
    backend = OpenAICompletionsBackend(
        base_url=args.backend_url,
        model=args.model,
        profile=placeholder,
        api_key_env=args.api_key_env,
        timeout_s=args.timeout_s,
    )
    decode_prompt = "Count upward from one, separating numbers with spaces:"
    short = backend.generate_step(GenerationRequest(prompt=decode_prompt, max_tokens=8))
    long = backend.generate_step(GenerationRequest(prompt=decode_prompt, max_tokens=96))
    if long.token_count <= short.token_count:
        raise RuntimeError("server did not decode more tokens at a larger max_tokens")
    decode_s = (long.measured_latency_s - short.measured_latency_s) / (
        long.token_count - short.token_count
    )
    if decode_s <= 0:
        raise RuntimeError("measured non-positive decode time; rerun on a quieter server")

    short_prompt = "echo " * 8
    long_prompt = "echo " * 600
    prefill_short = backend.generate_step(
        GenerationRequest(prompt=short_prompt, max_tokens=1)
    )
    prefill_long = backend.generate_step(
        GenerationRequest(prompt=long_prompt, max_tokens=1)
    )
    delta_t = prefill_long.measured_latency_s - prefill_short.measured_latency_s
    if delta_t <= 0:
        raise RuntimeError("measured non-positive prefill time; rerun on a quieter server")
    prefill_rate = (600 - 8) / delta_t
    return BackendProfile(
        name=args.model,
        role=BackendRole(args.role),
        decode_s_per_token=decode_s,
        prefill_tokens_per_s=prefill_rate,
    )


def cmd_profile(cli: CliConfig, args: argparse.Namespace) -> int:
    profile = _measure_profile(args)
    text = json.dumps(profile.to_dict(), indent=2) + "\n"
    if args.output:
        Path(args.output).write_text(text)
        print(f"wrote {args.output}")
    print(text, end="")
    return 0


def cmd_compare(cli: CliConfig, args: argparse.Namespace) -> int:
    rows_a = {
        (r["scheme"], r["knob"], r["knob_value"]): r for r in read_results_csv(args.csv_a)
    }
    rows_b = {
        (r["scheme"], r["knob"], r["knob_value"]): r for r in read_results_csv(args.csv_b)
    }
    shared = sorted(set(rows_a) & set(rows_b))
    if not shared:
        print("no shared cells between the two result files", file=sys.stderr)
        return 2
    print(f"{'cell':<40} {'pass@1 a->b':>22} {'latency a->b':>26}")
    for key in shared:
        a, b = rows_a[key], rows_b[key]
        pass_a, pass_b = float(a["pass_at_1"]), float(b["pass_at_1"])
        lat_a, lat_b = float(a["mean_latency_s"]), float(b["mean_latency_s"])
        label = f"{key[0]} {key[1]}={key[2]}"
        print(
            f"{label:<40} {pass_a:.3f} -> {pass_b:.3f} ({pass_b - pass_a:+.3f})"
            f"   {lat_a:.2f}s -> {lat_b:.2f}s ({lat_b - lat_a:+.2f}s)"
        )
    only_a = sorted(set(rows_a) - set(rows_b))
    only_b = sorted(set(rows_b) - set(rows_a))
    for key in only_a:
        print(f"only in {args.csv_a}: {key}")
    for key in only_b:
        print(f"only in {args.csv_b}: {key}")
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stepspec",
        description=(
            "Step-level speculative reasoning: run trajectories, sweep knobs, "
            "check the latency model, profile servers, compare results."
        ),
    )
    sub = parser.add_subparsers(dest="verb", required=True)

    def add_common(p: argparse.ArgumentParser, needs_config: bool = True) -> None:
        if needs_config:
            p.add_argument("--config", help="JSON config file (defaults used if omitted)")
            p.add_argument(
                "--overrides",
                nargs="*",
                default=[],
                help="key=value config overrides (dotted paths; bare engine keys allowed)",
            )
        p.add_argument("--output-dir", help="directory for output files")

    run_p = sub.add_parser("run", help="run a single trajectory and print its trace")
    add_common(run_p)
    run_p.add_argument("--problem-index", type=int, default=0)

    sweep_p = sub.add_parser("sweep", help="run a knob sweep and emit result tables")
    add_common(sweep_p)
    sweep_p.add_argument("--parallelism", type=int, default=None)

    sim_p = sub.add_parser(
        "simulate", help="compare closed-form step latency against Monte-Carlo"
    )
    add_common(sim_p)
    sim_p.add_argument("--alpha", type=float, action="append")
    sim_p.add_argument("--steps", type=int, default=100_000)
    sim_p.add_argument("--seed", type=int, default=0)

    prof_p = sub.add_parser("profile", help="measure a live server's decode/prefill rates")
    add_common(prof_p, needs_config=False)
    prof_p.add_argument("--backend-url", required=True)
    prof_p.add_argument("--model", required=True)
    prof_p.add_argument("--role", choices=[r.value for r in BackendRole], default="Base")
    prof_p.add_argument("--api-key-env", default="STEPSPEC_API_KEY")
    prof_p.add_argument("--timeout-s", type=float, default=120.0)
    prof_p.add_argument("--output", help="write the profile JSON here")

    cmp_p = sub.add_parser("compare", help="diff two results.csv files")
    cmp_p.add_argument("csv_a")
    cmp_p.add_argument("csv_b")

    return parser


_HANDLERS = {
    "run": cmd_run,
    "sweep": cmd_sweep,
    "simulate": cmd_simulate,
    "profile": cmd_profile,
    "compare": cmd_compare,
}


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    cli = CliConfig(
        verb=args.verb,
        config_path=getattr(args, "config", None),
        overrides=tuple(getattr(args, "overrides", ())),
        output_dir=getattr(args, "output_dir", None),
    )
    try:
        return _HANDLERS[args.verb](cli, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failures map to exit code 2
        print(f"error: {exc}", file=sys.stderr)
        return 2


def run_main() -> None:
    sys.exit(main())


if __name__ == "__main__":
    run_main()
