"""
Command-line entry point.

    irac gen --profile paper-truck --run-index 3 -o inst.json
    irac solve --solver pmm --instance inst.json
    irac compare --instance inst.json --solvers pmm,greedy,brute_force
    irac experiment --config configs/paper_truck.yaml
    irac case-study --config configs/paper_truck.yaml --constructed
    irac ilo gen-data --profile paper-truck -n 10000 --seed 1 -o demos.jsonl
    irac ilo train --dataset demos.jsonl -o ilo.model
    irac ilo infer --model ilo.model --instance inst.json
    irac ilo eval --model ilo.model --dataset demos.jsonl --timing-samples 100
    irac ilo timing-sweep --users 10 20 40 --n-train 500 --n-test 100 -o timing.csv
    irac metrics score --a edge.ppm --b local.ppm --lambda 0.2 --truth truth.ppm
    irac serve --port 8080

Exit codes: 0 success, 2 invalid input, 3 solver failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from src.config import settings
from src.errors import DomainError, SolverError, ValidationFailure
from src.harness import (
    SOLVER_NAMES,
    case_study,
    compare_solvers,
    format_table,
    ilo_timing_sweep,
    load_experiment_config,
    resolve_solvers,
    run_experiment,
    run_solver,
    scenario_from_profile,
)
from src.ilo import (
    TrainConfig,
    evaluate,
    generate_dataset,
    infer,
    load_dataset,
    load_model,
    save_dataset,
    save_model,
    split_dataset,
    train,
)
from src.instance import Instance, generate_instance, require_valid
from src.metrics import psnr_from_loss, read_ppm, rendering_error
from src.observability import configure_logging

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_INVALID, EXIT_SOLVER = 0, 2, 3


def _emit(text: str, output: str | None) -> None:
    if output:
        Path(output).write_text(text + "\n")
        logger.info("wrote %s", output)
    else:
        print(text)


def _load_instance(path: str) -> Instance:
    return require_valid(Instance.load(path))


def cmd_gen(args: argparse.Namespace) -> int:
    overrides = {"seed": args.seed} if args.seed is not None else {}
    scenario = scenario_from_profile(args.profile, overrides)
    inst = generate_instance(scenario, args.run_index)
    if args.power_mw is not None:
        inst = inst.with_budget(args.power_mw * 1e-3)
    _emit(inst.model_dump_json(indent=2), args.output)
    return EXIT_OK


def cmd_solve(args: argparse.Namespace) -> int:
    inst = _load_instance(args.instance)
    solver = resolve_solvers([args.solver], model_path=args.model)[args.solver]
    solution = run_solver(args.solver, solver, inst)
    _emit(solution.model_dump_json(indent=2), args.output)
    return EXIT_OK


def cmd_compare(args: argparse.Namespace) -> int:
    inst = _load_instance(args.instance)
    names = [n.strip() for n in args.solvers.split(",") if n.strip()]
    table = compare_solvers(inst, names, timing=args.timing, model_path=args.model)
    print(format_table(table))
    return EXIT_OK


def cmd_experiment(args: argparse.Namespace) -> int:
    cfg = load_experiment_config(args.config)
    if args.runs is not None and args.runs < 1:
        raise ValidationFailure(["--runs must be >= 1"], subject="command line")
    updates = {"num_runs": args.runs, "workers": args.workers}
    cfg = cfg.model_copy(update={k: v for k, v in updates.items() if v is not None})
    report = run_experiment(cfg, args.output_dir)
    print(format_table(report.summary))
    return EXIT_OK


def cmd_case_study(args: argparse.Namespace) -> int:
    cfg = load_experiment_config(args.config)
    power = args.power_mw * 1e-3 if args.power_mw is not None else None
    frame = case_study(cfg, run_index=args.run_index, power_budget=power, constructed=args.constructed)
    text = frame.to_csv(index=False, float_format="%.9g")
    _emit(text.rstrip("\n"), args.output)
    return EXIT_OK


def cmd_ilo_gen_data(args: argparse.Namespace) -> int:
    scenario = scenario_from_profile(args.profile)
    sweep = [p * 1e-3 for p in args.power_sweep_mw] if args.power_sweep_mw else None
    build = generate_dataset(scenario, args.n, args.seed, power_sweep=sweep, workers=args.workers)
    save_dataset(build.samples, args.output)
    print(f"kept {len(build.samples)} samples, skipped {len(build.skipped)}")
    return EXIT_OK


def cmd_ilo_train(args: argparse.Namespace) -> int:
    samples = load_dataset(args.dataset)
    train_set, test_set = split_dataset(samples, args.test_fraction)
    cfg = TrainConfig(
        epochs=args.epochs,
        learning_rate=args.learning_rate,
        batch_size=args.batch_size,
        seed=args.seed,
    )
    model, history = train(train_set, cfg, test_set)
    save_model(model, args.output)
    if args.history:
        Path(args.history).write_text(history.model_dump_json(indent=2))
    print(history.final.model_dump_json(indent=2))
    return EXIT_OK


def cmd_ilo_infer(args: argparse.Namespace) -> int:
    solution = infer(load_model(args.model), _load_instance(args.instance))
    _emit(solution.model_dump_json(indent=2), args.output)
    return EXIT_OK


def cmd_ilo_eval(args: argparse.Namespace) -> int:
    samples = load_dataset(args.dataset)
    if args.test_fraction is not None:
        _, samples = split_dataset(samples, args.test_fraction)
    report = evaluate(load_model(args.model), samples, timing_samples=args.timing_samples)
    print(report.model_dump_json(indent=2))
    return EXIT_OK


def cmd_ilo_timing_sweep(args: argparse.Namespace) -> int:
    frame = ilo_timing_sweep(
        scenario_from_profile(args.profile),
        args.users,
        n_train=args.n_train,
        n_test=args.n_test,
        train_cfg=TrainConfig(epochs=args.epochs, seed=args.seed),
        seed=args.seed,
        workers=args.workers,
        output=args.output,
    )
    print(format_table(frame))
    return EXIT_OK


def cmd_metrics_score(args: argparse.Namespace) -> int:
    edge, local = read_ppm(args.edge), read_ppm(args.local)
    result = {"switching_gain": rendering_error(edge, local, args.weight)}
    if args.truth:
        truth = read_ppm(args.truth)
        for name, image in (("edge", edge), ("local", local)):
            loss = rendering_error(image, truth, args.weight)
            result[f"loss_{name}"] = loss
            result[f"psnr_{name}"] = psnr_from_loss(loss)
    print(json.dumps(result, indent=2))
    return EXIT_OK


def cmd_serve(args: argparse.Namespace) -> int:
    from src.main import serve

    serve(host=args.host, port=args.port)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="irac",
        description="Integrated rendering and communication decisions for edge-collaborative GS",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog=__doc__,
    )
    parser.add_argument("--log-level", default=None, help="Override LOG_LEVEL")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="Emit one random instance as JSON")
    p.add_argument("--profile", default=settings.default_profile)
    p.add_argument("--run-index", type=int, default=0)
    p.add_argument("--seed", type=int, default=None, help="Override the profile seed")
    p.add_argument("--power-mw", type=float, default=None)
    p.add_argument("-o", "--output", default=None)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("solve", help="Run one solver on an instance file")
    p.add_argument("--solver", required=True, choices=SOLVER_NAMES)
    p.add_argument("--instance", required=True)
    p.add_argument("--model", default=None, help="ILO model file (solver ilo)")
    p.add_argument("-o", "--output", default=None)
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("compare", help="Tabulate several solvers on one instance")
    p.add_argument("--instance", required=True)
    p.add_argument("--solvers", default="pmm,greedy,rounding,max_rate,user_gs")
    p.add_argument("--model", default=None)
    p.add_argument("--timing", action="store_true", help="Add wall times (not reproducible)")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("experiment", help="Monte-Carlo sweep from a YAML config")
    p.add_argument("--config", required=True)
    p.add_argument("--output-dir", default=None)
    p.add_argument("--runs", type=int, default=None)
    p.add_argument("--workers", type=int, default=None)
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("case-study", help="Per-user x, L, gamma, p for each solver")
    p.add_argument("--config", required=True)
    p.add_argument("--run-index", type=int, default=0)
    p.add_argument("--power-mw", type=float, default=None)
    p.add_argument("--constructed", action="store_true", help="Use the far-user instance")
    p.add_argument("-o", "--output", default=None)
    p.set_defaults(func=cmd_case_study)

    ilo = sub.add_parser("ilo", help="Imitation-learning fast path").add_subparsers(
        dest="ilo_command", required=True
    )
    p = ilo.add_parser("gen-data", help="Label random instances with PMM")
    p.add_argument("--profile", default=settings.default_profile)
    p.add_argument("-n", type=int, default=10000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--power-sweep-mw", type=float, nargs="+", default=None)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_ilo_gen_data)

    p = ilo.add_parser("train", help="Train the network on a dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--learning-rate", type=float, default=6e-4)
    p.add_argument("--batch-size", type=int, default=96)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--test-fraction", type=float, default=0.5)
    p.add_argument("--history", default=None, help="Write per-epoch history JSON here")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_ilo_train)

    p = ilo.add_parser("infer", help="Decide one instance with a trained model")
    p.add_argument("--model", required=True)
    p.add_argument("--instance", required=True)
    p.add_argument("-o", "--output", default=None)
    p.set_defaults(func=cmd_ilo_infer)

    p = ilo.add_parser("eval", help="Compare a model with its PMM labels")
    p.add_argument("--model", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--test-fraction", type=float, default=None)
    p.add_argument("--timing-samples", type=int, default=0)
    p.set_defaults(func=cmd_ilo_eval)

    p = ilo.add_parser("timing-sweep", help="Train one model per K and time it against PMM")
    p.add_argument("--profile", default=settings.default_profile)
    p.add_argument("--users", type=int, nargs="+", default=[10, 20, 30, 40])
    p.add_argument("--n-train", type=int, default=2000)
    p.add_argument("--n-test", type=int, default=200)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("-o", "--output", required=True, help="CSV report")
    p.set_defaults(func=cmd_ilo_timing_sweep)

    metrics = sub.add_parser("metrics", help="Rendering-error tools").add_subparsers(
        dest="metrics_command", required=True
    )
    p = metrics.add_parser("score", help="Switching gain (and losses) of PPM renders")
    p.add_argument("--a", "--edge", dest="edge", required=True, help="Edge-model render")
    p.add_argument("--b", "--local", dest="local", required=True, help="Local-model render")
    p.add_argument("--truth", default=None, help="Ground-truth frame; adds losses and PSNR")
    p.add_argument("--lambda", "--weight", dest="weight", type=float, default=0.2, help="Weight of the (1 - SSIM) term")
    p.set_defaults(func=cmd_metrics_score)

    p = sub.add_parser("serve", help="Start the decision service")
    p.add_argument("--host", default="0.0.0.0")
    p.add_argument("--port", type=int, default=None)
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level)
    try:
        return args.func(args)
    except (ValidationFailure, DomainError) as exc:
        logger.error("%s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except SolverError as exc:
        logger.error("%s", exc, exc_info=True)
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
