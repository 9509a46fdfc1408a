"""Command-line entry point: calibrate, run, bench, analyze, delegation-test, mock-serve."""
from __future__ import annotations

import argparse
import logging
import sys
from contextlib import ExitStack, closing
from dataclasses import asdict
from pathlib import Path
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import pandas as pd

from . import __version__
from .calibration import (
    CalibrationConfig,
    EndpointTraceSource,
    RecordedTraceSource,
    SwitchCueSet,
    aggregate_cue_stats,
    calibrate,
    format_cue_set_table,
)
from .client import CompletionBackend, EndpointClient, EndpointConfig, SamplingParams
from .config import ResolvedConfig, resolve_config, setup_logging
from .cues import CuePool, default_pool, load_pool
from .errors import BadRequest, ConfigError, RelaySwitchError
from .evalharness import (
    ANSWER_MODES,
    answer_delegation_experiment,
    format_accuracy_table,
    format_delegation_table,
    load_problems,
    pass_at_1,
    run_benchmark,
)
from .margin import global_margin_stats, margin_trajectory, margins_from_trace
from .metrics import CorpusSummary, aggregate, format_report, session_stats
from .mocksim import CostModel, ScriptedBackend, SpecDecodeProfile, load_script, simulate_latency, spec_only_latency
from .outputs import write_csv_atomic, write_json_atomic, write_text_atomic
from .records import load_trace_jsonl
from .reports import banner
from .switcher import Budgets, run, run_many, start_session

logger = logging.getLogger(__name__)

SWITCHING = 'Switching'
SWITCHING_SPEC = 'Switching + spec. decoding'
SPEC_ONLY = 'Spec. decoding only'


# --- argument parsing -------------------------------------------------------------

def _common_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', type=Path, help='TOML config file.')
    common.add_argument('--log-level', help='DEBUG, INFO, WARNING or ERROR (default INFO).')
    common.add_argument('--log-file', type=Path, help='Also write logs to this file.')
    common.add_argument('--output-dir', type=Path, help='Directory for artifacts (default ./output).')
    common.add_argument('--jobs', type=int, help='Maximum concurrent sessions or requests (default 4).')
    return common


def _backend_parser() -> argparse.ArgumentParser:
    backend = argparse.ArgumentParser(add_help=False)
    backend.add_argument('--large-url', help='Large-model endpoint base URL (env RELAYGEN_LARGE_URL).')
    backend.add_argument('--small-url', help='Small-model endpoint base URL (env RELAYGEN_SMALL_URL).')
    backend.add_argument('--large-model', help='Large model id as served.')
    backend.add_argument('--small-model', help='Small model id as served.')
    backend.add_argument('--api-key', help='Bearer token (env RELAYGEN_API_KEY).')
    backend.add_argument('--large-script', type=Path, help='Use an in-process scripted large model.')
    backend.add_argument('--small-script', type=Path, help='Use an in-process scripted small model.')
    return backend


def _session_parser() -> argparse.ArgumentParser:
    session = argparse.ArgumentParser(add_help=False)
    session.add_argument('--cues', type=Path, help='Switch cue set JSON produced by calibrate.')
    session.add_argument('--max-tokens', type=int, help='Total generation budget per session (default 32768).')
    session.add_argument('--max-small-segment', type=int, help='Token cap per small reasoning segment (default 128).')
    session.add_argument('--temperature', type=float)
    session.add_argument('--top-p', type=float)
    session.add_argument('--top-k', type=int)
    return session


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog='relay_switch',
        description='Runtime large/small model switching driven by calibrated discourse cues.',
    )
    parser.add_argument('--version', action='version', version=f'%(prog)s {__version__}')
    subparsers = parser.add_subparsers(dest='command')
    common, backend, session = _common_parser(), _backend_parser(), _session_parser()

    cal = subparsers.add_parser('calibrate', parents=[common, backend],
                                help='Select switch cues from calibration traces.')
    cal.add_argument('--prompts', type=Path, help='JSONL prompts {id, prompt} to generate traces from.')
    cal.add_argument('--traces', type=Path, help='Directory of pre-recorded large-model JSONL traces.')
    cal.add_argument('--rescored', type=Path, help='Directory of small-model rescorings (same file names).')
    cal.add_argument('--limit', type=int, help='Use only the first N recorded traces.')
    cal.add_argument('--samples-per-prompt', type=int, help='Traces per prompt (default 4).')
    cal.add_argument('--min-count', type=int, help='Minimum occurrences for a cue to be selected (default 3).')
    cal.add_argument('--all-candidates', action='store_true', help='Skip selection; export the whole pool.')
    cal.add_argument('--score-under', choices=['small', 'large'], help='Model whose margins drive selection.')
    cal.add_argument('--max-tokens', type=int, help='Generation budget per calibration trace.')
    cal.add_argument('--pool', type=Path, help='TOML cue pool override.')
    cal.add_argument('--out', type=Path, help='Output cue set JSON (default <output-dir>/switch_cues.json).')

    run_parser = subparsers.add_parser('run', parents=[common, backend, session], help='Run switching sessions.')
    source = run_parser.add_mutually_exclusive_group(required=True)
    source.add_argument('--prompt', help='Prompt text (already chat-templated).')
    source.add_argument('-f', '--file', type=Path, help='Prompt text file, or JSONL {id, prompt} for several.')
    run_parser.add_argument('--out', type=Path, help='Transcript JSON (default <output-dir>/transcript.json).')

    bench = subparsers.add_parser('bench', parents=[common, backend, session],
                                  help='Utilization and simulated speedup over a problem set.')
    bench.add_argument('--problems', type=Path, required=True, help='JSONL {id, prompt, answer}.')
    bench.add_argument('--repeats', type=int, default=5, help='Sessions per problem (default 5).')
    bench.add_argument('--mode', choices=ANSWER_MODES, default='boxed')
    bench.add_argument('--cost-model', default='',
                       help='large=1,small=0.25,switch=0,prefill=0 (per-token and per-switch costs).')
    bench.add_argument('--spec-profile', default='', help='span=3[,verify=COST][,draft=COST]')

    analyze = subparsers.add_parser('analyze', parents=[common], help='Margin trajectories and per-cue tables.')
    analyze.add_argument('--traces', type=Path, required=True, help='Directory of JSONL traces.')
    analyze.add_argument('--window', type=int, default=25, help='Moving-average window (default 25).')
    analyze.add_argument('--pool', type=Path, help='TOML cue pool override.')
    analyze.add_argument('--out-dir', type=Path, help='Default <output-dir>/analysis.')
    analyze.add_argument('--plot', action='store_true', help='Also render PNG figures.')

    deleg = subparsers.add_parser('delegation-test', parents=[common, backend, session],
                                  help='Large vs small answer-stage consistency on shared reasoning.')
    deleg.add_argument('--problems', type=Path, required=True, help='JSONL {id, prompt, answer}.')
    deleg.add_argument('--mode', choices=ANSWER_MODES, default='boxed')

    mock = subparsers.add_parser('mock-serve', parents=[common], help='Serve a script over HTTP.')
    mock.add_argument('--script', type=Path, required=True, help='JSONL script file.')
    mock.add_argument('--port', type=int, default=8000)
    mock.add_argument('--host', default='127.0.0.1')
    mock.add_argument('--model-id', help='Served model id (default: script header or file stem).')
    mock.add_argument('--strip-stop', action='store_true', help='Drop stop strings from outputs.')

    return parser


def parse_args(argv: Optional[Sequence[str]] = None) -> argparse.Namespace:
    return build_parser().parse_args(argv)


# --- shared helpers -------------------------------------------------------------

FLAG_KEYS: Dict[str, str] = {
    'large_url': 'large_url',
    'small_url': 'small_url',
    'large_model': 'large_model',
    'small_model': 'small_model',
    'api_key': 'api_key',
    'jobs': 'jobs',
    'output_dir': 'output_dir',
    'log_level': 'log_level',
    'max_tokens': 'max_total_tokens',
    'max_small_segment': 'max_small_segment_tokens',
    'temperature': 'temperature',
    'top_p': 'top_p',
    'top_k': 'top_k',
    'samples_per_prompt': 'samples_per_prompt',
    'min_count': 'min_count',
    'score_under': 'score_under',
    'prompts': 'prompts_path',
    'cues': 'cue_set_path',
}


def resolve_settings(args: argparse.Namespace) -> ResolvedConfig:
    flags = {}
    for attr, key in FLAG_KEYS.items():
        value = getattr(args, attr, None)
        if value is not None:
            flags[key] = str(value) if isinstance(value, Path) else value
    return resolve_config(flags, getattr(args, 'config', None))


def build_backend(role: str, args: argparse.Namespace, settings: ResolvedConfig,
                  required: bool = True) -> Optional[CompletionBackend]:
    script_path = getattr(args, f'{role}_script', None)
    if script_path:
        model_flag = getattr(args, f'{role}_model', None)
        return ScriptedBackend(load_script(script_path, model_id=model_flag))
    if not settings.get(f'{role}_url'):
        if required:
            raise ConfigError(f"no {role} model configured: pass --{role}-url or --{role}-script")
        return None
    return EndpointClient(EndpointConfig.from_settings(role, settings.values))


def session_budgets(settings: ResolvedConfig) -> Budgets:
    return Budgets(
        max_total_tokens=int(settings['max_total_tokens']),
        max_small_segment_tokens=int(settings['max_small_segment_tokens']),
    )


def session_sampling(settings: ResolvedConfig) -> SamplingParams:
    return SamplingParams(
        temperature=float(settings['temperature']),
        top_p=float(settings['top_p']),
        top_k=int(settings['top_k']),
    )


def load_cue_set(settings: ResolvedConfig) -> Optional[SwitchCueSet]:
    path = settings.get('cue_set_path')
    if not path:
        logger.warning('No switch cue set given (--cues); the large model will reason until </think>')
        return None
    return SwitchCueSet.load(Path(path))


def load_cue_pool(path: Optional[Path]) -> CuePool:
    return load_pool(path) if path else default_pool()


def output_dir(settings: ResolvedConfig) -> Path:
    return Path(settings.get('output_dir', 'output'))


def parse_kv(text: str, allowed: Sequence[str]) -> Dict[str, float]:
    values: Dict[str, float] = {}
    for part in filter(None, (p.strip() for p in text.split(','))):
        key, sep, raw = part.partition('=')
        key = key.strip()
        if not sep or key not in allowed:
            raise ConfigError(f"expected key=value with key in {list(allowed)}, got {part!r}")
        try:
            values[key] = float(raw)
        except ValueError as exc:
            raise ConfigError(f"not a number for {key}: {raw!r}") from exc
    return values


def parse_cost_model(text: str) -> CostModel:
    kv = parse_kv(text, ('large', 'small', 'switch', 'prefill'))
    return CostModel(
        large_token_cost=kv.get('large', 1.0),
        small_token_cost=kv.get('small', 0.25),
        switch_overhead=kv.get('switch', 0.0),
        prefill_token_cost=kv.get('prefill', 0.0),
    )


def parse_spec_profile(text: str) -> Optional[SpecDecodeProfile]:
    if not text:
        return None
    kv = parse_kv(text, ('span', 'verify', 'draft'))
    if 'span' not in kv:
        raise ConfigError('--spec-profile needs span=<mean accepted span>')
    return SpecDecodeProfile(
        mean_accepted_span=kv['span'],
        verify_cost=kv.get('verify'),
        draft_cost_per_token=kv.get('draft', 0.0),
    )


def _print_block(lines: List[str]) -> None:
    print('\n'.join(lines))


# --- subcommands --------------------------------------------------------------

def cmd_calibrate(args: argparse.Namespace, settings: ResolvedConfig) -> int:
    with ExitStack() as backends:
        return _calibrate(args, settings, backends)


def _opened(backends: ExitStack, backend: Optional[CompletionBackend]) -> Optional[CompletionBackend]:
    if backend is not None:
        backends.callback(backend.close)
    return backend


def _calibrate(args: argparse.Namespace, settings: ResolvedConfig, backends: ExitStack) -> int:
    pool = load_cue_pool(args.pool)
    jobs = int(settings['jobs'])
    small = _opened(backends, build_backend('small', args, settings, required=False))

    echo = settings.echo()
    if args.traces:
        source = RecordedTraceSource(args.traces, args.rescored, args.limit)
        echo.update({'traces': str(args.traces), 'limit': args.limit})
    else:
        prompts_path = settings.get('prompts_path')
        if not prompts_path:
            raise BadRequest('calibrate needs --traces DIR or --prompts FILE')
        problems = load_problems(Path(prompts_path))
        source = EndpointTraceSource(
            _opened(backends, build_backend('large', args, settings)),
            [(p.id, p.prompt) for p in problems],
            samples_per_prompt=int(settings['samples_per_prompt']),
            max_tokens=int(settings['max_total_tokens']),
            sampling=session_sampling(settings),
            jobs=jobs,
        )
    if args.pool:
        echo['pool'] = str(args.pool)

    config = CalibrationConfig(
        model_pair=(str(settings['large_model']), str(settings['small_model'])),
        min_count=int(settings['min_count']),
        score_under=str(settings['score_under']),
        all_candidates=args.all_candidates,
        jobs=jobs,
        config_echo=echo,
    )
    result = calibrate(config, source, small=small, pool=pool)

    out = args.out or output_dir(settings) / 'switch_cues.json'
    result.cue_set.save(out)
    report = format_cue_set_table(result.cue_set)
    report_path = out.with_suffix('.txt')
    write_text_atomic(report_path, report)
    print(report, end='')
    print(f"[SUCCESS] {result.n_traces} traces, {len(result.cue_set.surfaces)} stop surfaces -> {out}")
    return 0


def _read_prompts(args: argparse.Namespace) -> List[Tuple[str, str]]:
    if args.prompt is not None:
        return [('prompt', args.prompt)]
    if args.file.suffix == '.jsonl':
        return [(p.id, p.prompt) for p in load_problems(args.file)]
    return [(args.file.stem, args.file.read_text(encoding='utf-8'))]


def cmd_run(args: argparse.Namespace, settings: ResolvedConfig) -> int:
    with closing(build_backend('large', args, settings)) as large, \
            closing(build_backend('small', args, settings)) as small:
        return _run_sessions(args, settings, large, small)


def _run_sessions(args: argparse.Namespace, settings: ResolvedConfig,
                  large: CompletionBackend, small: CompletionBackend) -> int:
    cue_set = load_cue_set(settings)
    prompts = _read_prompts(args)
    budgets, sampling = session_budgets(settings), session_sampling(settings)

    if len(prompts) == 1:
        transcripts = [run(start_session(prompts[0][1], cue_set, budgets, sampling), large, small)]
    else:
        transcripts = run_many(prompts, large, small, cue_set, budgets, sampling, jobs=int(settings['jobs']))

    records = []
    for (prompt_id, _), transcript in zip(prompts, transcripts):
        payload = transcript.to_dict()
        payload['id'] = prompt_id
        records.append(payload)
    body: Dict[str, Any] = records[0] if len(records) == 1 else {'transcripts': records}
    body['config_echo'] = settings.echo()
    out = args.out or output_dir(settings) / 'transcript.json'
    write_json_atomic(out, body)

    aborted = [pid for (pid, _), t in zip(prompts, transcripts) if t.aborted]
    for (prompt_id, _), transcript in zip(prompts, transcripts):
        session = transcript.session
        util = session_stats(session).utilization if session.context else 0.0
        print(f"[INFO] {prompt_id}: {len(session.context)} tokens, {len(session.events)} switches, "
              f"large utilization {util * 100:.2f}%, end={session.end_reason}")
    if aborted:
        print(f"[ERROR] aborted sessions: {', '.join(aborted)} (partial transcripts in {out})")
        return 1
    print(f"[SUCCESS] transcript -> {out}")
    return 0


def summarize_over_problems(
    per_problem: Mapping[str, Mapping[str, List[Dict[str, float]]]],
) -> Dict[str, CorpusSummary]:
    """Mean per problem first, then mean ± std across problems."""
    names: List[str] = []
    for columns in per_problem.values():
        names += [name for name in columns if name not in names]
    summaries: Dict[str, CorpusSummary] = {}
    for name in names:
        problem_means = [
            {metric: mean for metric, (mean, _) in aggregate(columns[name]).metrics.items()}
            for columns in per_problem.values()
            if columns.get(name)
        ]
        if problem_means:
            summaries[name] = aggregate(problem_means)
    return summaries


def cmd_bench(args: argparse.Namespace, settings: ResolvedConfig) -> int:
    with closing(build_backend('large', args, settings)) as large, \
            closing(build_backend('small', args, settings)) as small:
        return _bench(args, settings, large, small)


def _bench(args: argparse.Namespace, settings: ResolvedConfig,
           large: CompletionBackend, small: CompletionBackend) -> int:
    cue_set = load_cue_set(settings)
    cost_model = parse_cost_model(args.cost_model)
    spec_profile = parse_spec_profile(args.spec_profile)
    problems = load_problems(args.problems, mode=args.mode)

    runs = run_benchmark(
        problems, large, small, cue_set,
        budgets=session_budgets(settings),
        sampling=session_sampling(settings),
        samples_per_problem=args.repeats,
        jobs=int(settings['jobs']),
        mode=args.mode,
    )

    per_problem: Dict[str, Dict[str, List[Dict[str, float]]]] = {}
    aborted = 0
    for run_ in runs:
        columns: Dict[str, List[Dict[str, float]]] = {SWITCHING: []}
        if spec_profile is not None:
            columns[SWITCHING_SPEC] = []
            columns[SPEC_ONLY] = []
        for sample in run_.samples:
            session = sample.transcript.session
            if sample.transcript.aborted or not session.context:
                aborted += 1
                continue
            metrics = session_stats(session).as_metrics()
            plain = simulate_latency(session.producers, cost_model)
            columns[SWITCHING].append({**metrics, 'speedup': plain.speedup_vs_large_only})
            if spec_profile is not None:
                combined = simulate_latency(session.producers, cost_model, spec_profile)
                columns[SWITCHING_SPEC].append({**metrics, 'speedup': combined.speedup_vs_large_only})
                alone = spec_only_latency(len(session.context), cost_model, spec_profile)
                columns[SPEC_ONLY].append({'utilization': 1.0, 'speedup': alone.speedup_vs_large_only})
        per_problem[run_.problem_id] = columns

    summaries = summarize_over_problems(per_problem)
    if SWITCHING not in summaries:
        raise RelaySwitchError('no session completed; nothing to report')

    references = [p.reference_answer for p in problems]
    accuracy = pass_at_1(runs) if all(r is not None for r in references) else None
    table = format_report(summaries)
    text_lines = banner('BENCHMARK') + [table.rstrip('\n')]
    if accuracy is not None:
        text_lines += ['', format_accuracy_table(runs).rstrip('\n')]
    text = '\n'.join(text_lines) + '\n'

    out_dir = output_dir(settings)
    write_json_atomic(out_dir / 'bench_report.json', {
        'config_echo': settings.echo(),
        'cost_model': asdict(cost_model),
        'spec_profile': asdict(spec_profile) if spec_profile else None,
        'repeats': args.repeats,
        'pass_at_1': accuracy,
        'aborted_sessions': aborted,
        'columns': {name: summary.to_dict() for name, summary in summaries.items()},
    })
    write_text_atomic(out_dir / 'bench_report.txt', text)
    print(text, end='')
    if aborted:
        print(f"[ERROR] {aborted} sessions aborted; excluded from the report")
        return 1
    print(f"[SUCCESS] report -> {out_dir / 'bench_report.json'}")
    return 0


def cmd_analyze(args: argparse.Namespace, settings: ResolvedConfig) -> int:
    pool = load_cue_pool(args.pool)
    out_dir = args.out_dir or output_dir(settings) / 'analysis'
    files = sorted(Path(args.traces).glob('*.jsonl'))
    if not files:
        raise BadRequest(f"no *.jsonl traces in {args.traces}")

    pairs = []
    for path in files:
        trace = load_trace_jsonl(path)
        series = margins_from_trace(trace)
        pairs.append((trace, series))
        if not len(trace):
            logger.warning(f"Skipping empty trace {path.name}")
            continue
        window = min(args.window, len(series))
        if window != args.window:
            logger.info(f"{path.name}: window clamped to {window} (trace length)")
        frame = pd.DataFrame({
            'position': range(len(trace)),
            'text': [t.text for t in trace.tokens],
            'margin': series.values,
            'smoothed': margin_trajectory(series, window),
        })
        write_csv_atomic(out_dir / f'trajectory_{trace.trace_id}.csv', frame)
        if args.plot:
            from .plots import plot_trajectory

            plot_trajectory(frame, out_dir / f'trajectory_{trace.trace_id}.png', title=trace.trace_id)

    global_stats = global_margin_stats([series for _, series in pairs])
    stats = aggregate_cue_stats(pairs, pool)
    cue_frame = pd.DataFrame(
        [
            {
                'cue': s.cue_canonical,
                'category': pool.get(s.cue_canonical).category.value,
                'occurrence_count': s.occurrence_count,
                'post_sentence_mean': s.post_sentence_mean,
                'post_sentence_std_err': s.post_sentence_std_err,
                'above_threshold': s.post_sentence_mean >= global_stats.threshold,
            }
            for s in stats
        ],
        columns=['cue', 'category', 'occurrence_count', 'post_sentence_mean', 'post_sentence_std_err',
                 'above_threshold'],
    )
    write_csv_atomic(out_dir / 'cue_margins.csv', cue_frame)
    write_json_atomic(out_dir / 'global_margin.json', {**global_stats.to_dict(), 'config_echo': settings.echo()})
    if args.plot and not cue_frame.empty:
        from .plots import plot_cue_margins

        plot_cue_margins(cue_frame, global_stats, out_dir / 'cue_margins.png')
    print(f"[SUCCESS] {len(files)} trajectories, {len(cue_frame)} cues -> {out_dir}")
    return 0


def cmd_delegation_test(args: argparse.Namespace, settings: ResolvedConfig) -> int:
    problems = load_problems(args.problems, mode=args.mode)
    with closing(build_backend('large', args, settings)) as large, \
            closing(build_backend('small', args, settings)) as small:
        report = answer_delegation_experiment(
            problems, large, small,
            budgets=session_budgets(settings),
            sampling=session_sampling(settings),
            jobs=int(settings['jobs']),
            mode=args.mode,
        )
    out_dir = output_dir(settings)
    write_json_atomic(out_dir / 'delegation_report.json', {**report.to_dict(), 'config_echo': settings.echo()})
    table = format_delegation_table(report)
    write_text_atomic(out_dir / 'delegation_report.txt', table)
    print(table, end='')
    if report.failures:
        print(f"[ERROR] {len(report.failures)} problems failed")
        return 1
    print(f"[SUCCESS] report -> {out_dir / 'delegation_report.json'}")
    return 0


def cmd_mock_serve(args: argparse.Namespace, settings: ResolvedConfig) -> int:
    from .mock_server import serve

    script = load_script(args.script, model_id=args.model_id)
    serve(script, host=args.host, port=args.port, strip_stop=args.strip_stop,
          log_level=str(settings['log_level']))
    return 0


COMMANDS: Dict[str, Callable[[argparse.Namespace, ResolvedConfig], int]] = {
    'calibrate': cmd_calibrate,
    'run': cmd_run,
    'bench': cmd_bench,
    'analyze': cmd_analyze,
    'delegation-test': cmd_delegation_test,
    'mock-serve': cmd_mock_serve,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if not args.command:
        parser.print_help()
        return 2
    try:
        settings = resolve_settings(args)
        setup_logging(str(settings['log_level']), getattr(args, 'log_file', None))
        return COMMANDS[args.command](args, settings)
    except (RelaySwitchError, OSError) as exc:
        logger.error(f"{args.command} failed: {exc}")
        print(f"[ERROR] {exc}", file=sys.stderr)
        return 1
