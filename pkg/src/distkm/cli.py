"""Command-line surface: run a federation, simulate scenarios, inspect messages."""

import argparse
import json
import os
import sys
from dataclasses import dataclass

from .errors import (
    ConvergenceError,
    DegenerateStatisticError,
    DistKMError,
    FitError,
    InitializationError,
    IntegrationError,
    ProtocolError,
    TailSupportError,
    ValidationError,
)

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NUMERIC = 3

_VALIDATION_ERRORS = (ValidationError, ProtocolError, InitializationError)
_NUMERIC_ERRORS = (
    ConvergenceError,
    DegenerateStatisticError,
    FitError,
    IntegrationError,
    TailSupportError,
)


def _fail(code, message):
    print(f"distkm: error: {message}", file=sys.stderr)
    return code


@dataclass
class StudyConfig:
    """Operator study description loaded from TOML (JSON fallback)."""

    mode: str
    site_files: list
    eval_times: list
    order: list | None = None
    knots: int = 9
    degree: int = 3
    link: str = "logit"
    batch_size: int | None = None
    batch_fraction: float | None = None
    restriction: float = 0.0
    confint_restriction: float = 0.0
    t_max: float | None = None
    seed: int = 0

    @classmethod
    def from_file(cls, path):
        if not os.path.exists(path):
            raise ValidationError(f"config file not found: {path}")
        with open(path, "rb") as fh:
            raw = fh.read()
        if path.endswith(".json"):
            data = json.loads(raw.decode("utf-8"))
        else:
            try:
                import tomllib as toml
            except ImportError:
                import tomli as toml
            try:
                data = toml.loads(raw.decode("utf-8"))
            except toml.TOMLDecodeError:
                # JSON fallback for unlabeled files
                try:
                    data = json.loads(raw.decode("utf-8"))
                except json.JSONDecodeError as exc:
                    raise ValidationError(f"{path}: neither valid TOML nor JSON ({exc})") from exc
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ValidationError(f"{path}: unknown config keys {sorted(unknown)}")
        missing = {"mode", "site_files", "eval_times"} - set(data)
        if missing:
            raise ValidationError(f"{path}: missing required keys {sorted(missing)}")
        return cls(**data)

    def apply_overrides(self, args):
        for name in (
            "restriction",
            "confint_restriction",
            "batch_size",
            "batch_fraction",
            "knots",
            "degree",
            "link",
            "seed",
        ):
            v = getattr(args, name, None)
            if v is not None:
                setattr(self, name, v)
        if getattr(args, "eval_times", None):
            self.eval_times = [float(x) for x in args.eval_times.split(",")]

    def federation_config(self):
        from .federation import FederationConfig

        batch_size = self.batch_size
        if batch_size is None and self.batch_fraction is None:
            batch_size = 8
        return FederationConfig(
            mode=self.mode,
            eval_times=tuple(self.eval_times),
            initial_knots=self.knots,
            degree=self.degree,
            link=self.link,
            batch_size=batch_size,
            batch_fraction=self.batch_fraction,
            restriction=self.restriction,
            confint_restriction=self.confint_restriction,
            t_max=self.t_max,
        )


def _load_sites(config):
    from .federation import SiteDataset
    from .surv_core import read_records_csv

    files = list(config.site_files)
    if config.order is not None:
        if sorted(config.order) != list(range(len(files))):
            raise ValidationError("order must be a permutation of the site file indices")
        files = [files[i] for i in config.order]
    sites = []
    for path in files:
        if not os.path.exists(path):
            raise ValidationError(f"site file not found: {path}")
        name = os.path.splitext(os.path.basename(path))[0]
        records = read_records_csv(path)
        if config.mode == "ipw":
            if any(r.arm is None for r in records):
                raise ValidationError(f"{path}: ipw mode requires an 'arm' column")
            if any(len(r.covariates) == 0 for r in records):
                raise ValidationError(f"{path}: ipw mode requires covariate columns z1..zp")
        sites.append(SiteDataset(site_id=name, records=tuple(records)))
    return sites


def cmd_run(args):
    from .federation import run_ipw, run_unweighted

    config = StudyConfig.from_file(args.config)
    config.apply_overrides(args)
    sites = _load_sites(config)
    fed = config.federation_config()
    result = run_ipw(sites, fed) if config.mode == "ipw" else run_unweighted(sites, fed)
    os.makedirs(args.out_dir, exist_ok=True)
    result.write_json(os.path.join(args.out_dir, "result.json"))
    result.write_curves_csv(os.path.join(args.out_dir, "curves.csv"))
    result.write_logrank_json(os.path.join(args.out_dir, "logrank.json"))
    print(f"wrote result.json, curves.csv, logrank.json to {args.out_dir}")
    if result.logrank.get("method"):
        print(
            f"log-rank ({result.logrank['method']}): statistic="
            f"{result.logrank['statistic']:.6g} p={result.logrank['p_value']:.4g}"
        )
    return EXIT_OK


def cmd_simulate(args):
    from .simgen import default_config, evaluate, make_scenario

    if args.scenario not in ("A", "B", "C", "D", "E"):
        raise ValidationError(f"unknown scenario {args.scenario!r}; expected A..E")
    if args.repeats < 1:
        raise ValidationError("repeats must be >= 1")
    scenario = make_scenario(args.scenario, args.hr)
    config = default_config(scenario, mode=args.mode)
    if args.restriction is not None:
        from dataclasses import replace

        config = replace(
            config, restriction=args.restriction, confint_restriction=args.restriction
        )
    metrics = evaluate(
        scenario,
        args.repeats,
        seed=args.seed,
        mode=args.mode,
        workers=args.workers,
        config=config,
    )
    os.makedirs(args.out_dir, exist_ok=True)
    metrics_path = os.path.join(args.out_dir, f"metrics_{args.scenario}.json")
    with open(metrics_path, "w", encoding="utf-8") as fh:
        fh.write(metrics.to_json())
        fh.write("\n")
    metrics.write_per_repeat_csv(os.path.join(args.out_dir, f"repeats_{args.scenario}.csv"))
    print(f"wrote {metrics_path}")
    print(
        f"scenario {args.scenario} (HR={args.hr}): bias={['%.4f' % b for b in metrics.bias_dist]} "
        f"coverage={['%.3f' % c for c in metrics.coverage_dist]} "
        f"reject={metrics.reject_rate_dist:.3f} (pooled {metrics.reject_rate_pooled:.3f})"
    )
    return EXIT_OK


def cmd_inspect(args):
    from .federation import deserialize_message, field_inventory

    if not os.path.exists(args.message):
        raise ValidationError(f"message file not found: {args.message}")
    with open(args.message, "rb") as fh:
        blob = fh.read()
    msg = deserialize_message(blob)
    print(f"protocol_version: {msg.protocol_version}")
    print(f"pass_id: {msg.pass_id}")
    if msg.group_params:
        for g in sorted(msg.group_params):
            p = msg.group_params[g]
            print(
                f"group {g}: {p.knots.size} knots, degree {p.degree}, link {p.link}, "
                f"{p.basis_dim}-dim coefficients x2, n_cum={p.n_cum}, t_max={p.t_max:.6g}"
            )
    else:
        print("group_params: none (propensity pass)")
    acc = msg.accumulators
    print(
        f"accumulators: {acc.eval_times.size} eval times, groups={sorted(acc.n)}, "
        f"n_total={acc.n_total}, n_treated={acc.n_treated}"
    )
    if msg.propensity is not None:
        print(
            f"propensity: {msg.propensity.coef.size} coefficients, "
            f"info {msg.propensity.cum_info.shape[0]}x{msg.propensity.cum_info.shape[1]}, "
            f"n_cum={msg.propensity.n_cum}"
        )
    print(f"site_trace: {len(msg.site_trace)} entries")
    inventory = field_inventory(json.loads(blob.decode("utf-8")))
    print(f"field inventory ({len(inventory)} paths): {', '.join(inventory)}")
    print("privacy check: message carries summary parameters only; no individual-level fields")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(
        prog="distkm",
        description="Distributed Kaplan-Meier curves via sequential influence-function updates",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run a federation over per-site CSV files")
    run_p.add_argument("--config", required=True, help="study config (TOML, or JSON fallback)")
    run_p.add_argument("--out-dir", default=".")
    run_p.add_argument("--restriction", type=float, default=None,
                       help="time below which integration uses Gauss-Kronrod (default 0 = pure "
                            "Romberg; set to 5-10%% of follow-up under steep early hazards)")
    run_p.add_argument("--confint-restriction", type=float, default=None,
                       help="same, for the confidence-interval integrals")
    run_p.add_argument("--batch-size", type=int, default=None)
    run_p.add_argument("--batch-fraction", type=float, default=None)
    run_p.add_argument("--knots", type=int, default=None)
    run_p.add_argument("--degree", type=int, default=None)
    run_p.add_argument("--link", choices=("logit", "cloglog"), default=None)
    run_p.add_argument("--eval-times", default=None, help="comma-separated times")
    run_p.add_argument("--seed", type=int, default=None)
    run_p.set_defaults(func=cmd_run)

    sim_p = sub.add_parser("simulate", help="run a Monte Carlo scenario study")
    sim_p.add_argument("scenario", help="A, B, C, D or E")
    sim_p.add_argument("--repeats", type=int, required=True)
    sim_p.add_argument("--seed", type=int, default=0)
    sim_p.add_argument("--hr", type=float, default=1.0, help="hazard ratio (1.0 null)")
    sim_p.add_argument("--mode", choices=("unweighted", "ipw"), default="unweighted")
    sim_p.add_argument("--workers", type=int, default=1)
    sim_p.add_argument("--restriction", type=float, default=None)
    sim_p.add_argument("--out-dir", default=".")
    sim_p.set_defaults(func=cmd_simulate)

    insp_p = sub.add_parser("inspect", help="summarize a serialized site message")
    insp_p.add_argument("message", help="path to a SiteMessage JSON file")
    insp_p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except _VALIDATION_ERRORS as exc:
        return _fail(EXIT_VALIDATION, str(exc))
    except _NUMERIC_ERRORS as exc:
        return _fail(EXIT_NUMERIC, str(exc))
    except DistKMError as exc:
        return _fail(EXIT_NUMERIC, str(exc))


if __name__ == "__main__":
    sys.exit(main())
