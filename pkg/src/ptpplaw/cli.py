"""Command-line interface.

Exit codes: 0 success (an infeasible plan is a success), 1 configuration
error, 2 data error, 3 fit failure. Diagnostics go to stderr, one-line
summaries to stdout.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .data import DataError, Dataset, GridSpec, extract_grid, load_dataset
from .fitting import FitConfig, FitError, FitResult, fit, fit_with_anchors
from .forms import ALL_FORMS, LawForm
from .metrics import metrics_report
from .protocol import (
    AnchorPolicy,
    ComparisonTable,
    ExperimentSpec,
    TableRow,
    _flag_best,
    oracle_table,
    predict_grid,
    run_experiment,
    select_anchors,
)
from .planner import PlanConstraints, PlanProblem, default_r_grid, plan, verify_plan
from .synth import generate, paper_default_spec, save_truth

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_FIT = 0, 1, 2, 3

log = logging.getLogger("ptpplaw")


class ConfigError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; that code is reserved for data errors here
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _stages(text: str) -> tuple[float, ...]:
    try:
        values = tuple(float(s) for s in text.split(",") if s.strip())
    except ValueError:
        raise ConfigError(f"cannot parse stage list {text!r}; expected e.g. 15,31") from None
    if not values:
        raise ConfigError("stage list is empty")
    return values


def _forms(text: str) -> tuple[LawForm, ...]:
    if text.strip().lower() == "all":
        return ALL_FORMS
    try:
        return tuple(LawForm.parse(f) for f in text.split(",") if f.strip())
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _form(text: str) -> LawForm:
    try:
        return LawForm.parse(text)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _config(args) -> FitConfig:
    try:
        return FitConfig(huber_delta=args.huber_delta, n_starts=args.n_starts, seed=args.seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _out(args, name: str) -> Path:
    path = Path(name)
    if not path.is_absolute():
        path = Path(args.out_dir) / path
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _require(path: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"no such file: {p}")
    return p


def _load(path: str) -> Dataset:
    return load_dataset(_require(path))


def _load_fit(path: str) -> FitResult:
    p = _require(path)
    try:
        return FitResult.load(p)
    except (KeyError, ValueError, TypeError) as exc:
        raise ConfigError(f"{p}: not a fit result ({exc})") from None


def _say(args, text: str) -> None:
    if not args.quiet:
        print(text)


def _warn_unconverged(fr: FitResult, what: str) -> None:
    if not fr.converged:
        log.warning("%s did not converge (projected gradient %.2e)", what, fr.projected_grad_norm)


def cmd_fit(args) -> int:
    form = _form(args.form)
    cfg = _config(args)
    ds = _load(args.data).select(domain=args.domain.lower())
    train = ds.select(stages=_stages(args.train_ptpp))
    if args.anchors:
        policy = _anchor_policy(args.anchors)
        anchors = Dataset(
            tuple(m for s in _stages(args.anchor_ptpp) for m in select_anchors(ds, s, policy)), source=ds.source
        )
        fr = fit_with_anchors(train, anchors, form, cfg)
    else:
        fr = fit(train, form, cfg)
    _warn_unconverged(fr, f"{form.value} fit")
    out = _out(args, args.out)
    fr.save(out)
    _say(args, f"{form.value}: objective {fr.objective:.3e} on {len(train)} points, "
               f"converged={fr.converged}, best start {fr.best_start_index} -> {out}")
    return EXIT_OK


def _anchor_policy(text: str | None) -> AnchorPolicy:
    try:
        return AnchorPolicy.parse(text)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _write_table(args, table: ComparisonTable, stem: str) -> None:
    js, txt = _out(args, f"{stem}.json"), _out(args, f"{stem}.txt")
    js.write_text(table.to_json() + "\n", encoding="utf-8")
    txt.write_text(table.to_text() + "\n", encoding="utf-8")
    _say(args, table.to_text())
    log.info("wrote %s and %s", js, txt)


def cmd_compare(args) -> int:
    cfg = _config(args)
    ds = _load(args.data)
    eval_stages = _stages(args.eval_ptpp)
    if args.oracle:
        if len(eval_stages) != 1:
            raise ConfigError("--oracle takes exactly one --eval-ptpp stage")
        table, results = oracle_table(ds, eval_stages[0], _forms(args.forms), cfg, domain=args.domain.lower())
        fits = {form: r.fit.to_dict() for form, r in results.items()}
    else:
        try:
            spec = ExperimentSpec(
                train_stages=_stages(args.train_ptpp),
                eval_stages=eval_stages,
                forms=_forms(args.forms),
                domain=args.domain.lower(),
                anchor_policy=_anchor_policy(args.anchors),
                fit_config=cfg,
                huber_delta=args.huber_delta,
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        result = run_experiment(ds, spec)
        table = result.table
        fits = result.fits_to_dict()
        for (form, variant), fr in result.fits.items():
            _warn_unconverged(fr, f"{form}/{variant} fit")
        log.info("audit: %s", json.dumps(result.audit))
    _write_table(args, table, args.out_stem)
    _out(args, f"{args.out_stem}_fits.json").write_text(json.dumps(fits, indent=2) + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    """Score stored fits on held-out stages without refitting."""
    ds = _load(args.data).select(domain=args.domain.lower())
    held = ds.select(stages=_stages(args.eval_ptpp))
    rows = []
    for path in args.fit:
        fr = _load_fit(path)
        p = fr.predict(held.column("N"), held.column("D"), held.column("r"), held.column("ptpp"))
        rows.append(TableRow(fr.form, "stored-fit", metrics_report(p, held.loss, args.huber_delta)))
    if len({r.form for r in rows}) != len(rows):
        raise ConfigError("each --fit must be a different law form")
    table = ComparisonTable(
        rows=_flag_best(rows), mode="evaluate", domain=args.domain.lower(),
        eval_stages=tuple(sorted(held.stages)), anchors="none",
    )
    _write_table(args, table, args.out_stem)
    return EXIT_OK


def cmd_plan(args) -> int:
    src, tgt = _load_fit(args.src_fit), _load_fit(args.tgt_fit)
    try:
        constraints = PlanConstraints.parse(args.forget, args.tau)
        problem = PlanProblem(
            src_fit=src,
            tgt_fit=tgt,
            N=args.n,
            ptpp=args.ptpp,
            constraints=constraints,
            baseline_measured=args.baseline_loss,
            r_grid=tuple(default_r_grid(args.r_points)),
            atpp_max=args.atpp_max,
            require_converged=not args.allow_unconverged,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    bad = [n for n, f in (("source", src), ("target", tgt)) if not f.converged]
    if bad and not args.allow_unconverged:
        log.error("%s fit(s) did not converge; pass --allow-unconverged to plan anyway", " and ".join(bad))
        return EXIT_FIT
    result = plan(problem, method=args.method)

    out = _out(args, args.out)
    out.write_text(result.to_json() + "\n", encoding="utf-8")
    stem = out.with_suffix("")
    for suffix, text in (
        ("_feasibility.csv", result.feasibility_csv()),
        ("_forgetting_landscape.csv", result.forgetting_landscape_csv()),
        ("_target_landscape.csv", result.target_landscape_csv()),
    ):
        Path(f"{stem}{suffix}").write_text(text, encoding="utf-8")

    check = verify_plan(json.loads(out.read_text(encoding="utf-8")), src, tgt, args.baseline_loss)
    if not check["ok"]:
        log.error("plan failed re-verification: %s", json.dumps(check))
        return EXIT_FIT
    if args.svg:
        _plot(result, Path(f"{stem}.svg"))

    if result.feasible:
        _say(args, f"atpp*={result.atpp_star:.4g} r*={result.r_star:.4g} D*={result.D_star:.4g} "
                   f"flops={result.flops:.4g} binding={result.binding_constraint} -> {out}")
    else:
        _say(args, f"infeasible -> {out}")
        for note in result.diagnoses:
            log.warning("%s", note)
    return EXIT_OK


def _plot(result, path: Path) -> None:
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        log.warning("matplotlib not installed; skipping %s", path)
        return
    pct = 100.0 * result.landscape_r
    fig, axes = plt.subplots(1, 2, figsize=(10, 4), constrained_layout=True)
    panels = ((result.landscape_forgetting, "forgetting (nats)"), (result.landscape_target, "target loss"))
    for ax, (values, title) in zip(axes, panels):
        mesh = ax.pcolormesh(result.landscape_atpp, pct, values, shading="auto")
        fig.colorbar(mesh, ax=ax)
        ax.set_xscale("log")
        ax.set_xlabel("ATPP")
        ax.set_ylabel("replay %")
        ax.set_title(title)
        if result.feasible:
            ax.plot(result.atpp_star, 100.0 * result.r_star, marker="*", color="red", markersize=14)
    fig.savefig(path, format="svg")
    plt.close(fig)


def cmd_synth(args) -> int:
    domains = ("target", "source") if args.domain == "both" else (args.domain,)
    parts = []
    truths = {}
    for i, domain in enumerate(domains):
        spec = paper_default_spec(noise_sigma=args.noise, seed=args.seed + i, domain=domain)
        parts.append(generate(spec))
        truths[domain] = spec.true_params.to_dict(spec.form)
        if len(domains) == 1:
            save_truth(spec, _out(args, args.truth))
    ds = Dataset(tuple(m for p in parts for m in p), source=parts[0].source)
    if len(domains) > 1:
        _out(args, args.truth).write_text(json.dumps(truths, indent=2) + "\n", encoding="utf-8")
    out = _out(args, args.out)
    ds.save(out)
    _say(args, f"{len(ds)} measurements ({', '.join(domains)}), sigma={args.noise:g} -> {out}")
    return EXIT_OK


def cmd_predict_grid(args) -> int:
    fr = _load_fit(args.fit)
    if args.data:
        grid = extract_grid(_load(args.data))
    else:
        try:
            grid = GridSpec(
                model_sizes=tuple(sorted(_stages(args.sizes))),
                replay_ratios=tuple(sorted(_stages(args.ratios))),
                ptpp_stages=(args.stage,),
                token_points=(1.0,),
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    atpp = None
    if args.atpp or not args.data:
        lo, hi, n = args.atpp or (0.5, 50.0, 16)
        atpp = tuple(np.geomspace(lo, hi, int(n)))
    pred = predict_grid(fr, grid, args.stage, atpp)
    out = _out(args, args.out)
    out.write_text(pred.to_csv(), encoding="utf-8")
    _say(args, f"{len(pred)} predictions at ptpp={args.stage:g} -> {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    def global_flags(parser, suppress):
        # subcommands repeat the global flags; SUPPRESS keeps their defaults
        # from overwriting values given before the subcommand name
        d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
        parser.add_argument("--seed", type=int, default=d(0), help="RNG seed for multi-start draws and synthetic noise")
        parser.add_argument("--out-dir", default=d("."), help="directory for relative output paths")
        parser.add_argument("--quiet", action="store_true", default=d(False), help="suppress stdout summaries")
        parser.add_argument("-v", "--verbose", action="store_true", default=d(False), help="debug logging on stderr")

    common = _Parser(add_help=False)
    global_flags(common, suppress=True)
    p = _Parser(prog="ptpplaw", description=__doc__.splitlines()[0])
    global_flags(p, suppress=False)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def fit_opts(sp):
        sp.add_argument("--n-starts", type=int, default=64)
        sp.add_argument("--huber-delta", type=float, default=0.02)

    sp = sub.add_parser("fit", parents=[common], help="fit one law form to training stages")
    sp.add_argument("--data", required=True)
    sp.add_argument("--form", default="gated-floor")
    sp.add_argument("--domain", default="target")
    sp.add_argument("--train-ptpp", default="15,31")
    sp.add_argument("--anchors", default=None, help="anchor policy: flags or auto:<n>[@<N>]")
    sp.add_argument("--anchor-ptpp", default="279", help="stages to take anchors from")
    sp.add_argument("--out", default="fit.json")
    fit_opts(sp)
    sp.set_defaults(func=cmd_fit)

    sp = sub.add_parser("compare", parents=[common], help="fit all forms and tabulate held-out metrics")
    sp.add_argument("--data", required=True)
    sp.add_argument("--forms", default="all")
    sp.add_argument("--domain", default="target")
    sp.add_argument("--train-ptpp", default="15,31")
    sp.add_argument("--eval-ptpp", default="279")
    sp.add_argument("--anchors", default=None, help="flags or auto:<n>[@<N>]; adds an anchored variant")
    sp.add_argument("--oracle", action="store_true", help="fit and score on the eval stage (upper bound)")
    sp.add_argument("--out-stem", default="table")
    fit_opts(sp)
    sp.set_defaults(func=cmd_compare)

    sp = sub.add_parser("evaluate", parents=[common], help="score stored fits on held-out stages")
    sp.add_argument("--data", required=True)
    sp.add_argument("--fit", action="append", required=True, help="fit JSON; repeat for several forms")
    sp.add_argument("--domain", default="target")
    sp.add_argument("--eval-ptpp", default="279")
    sp.add_argument("--huber-delta", type=float, default=0.02)
    sp.add_argument("--out-stem", default="evaluation")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("plan", parents=[common], help="minimum adaptation budget under forgetting/target limits")
    sp.add_argument("--src-fit", required=True)
    sp.add_argument("--tgt-fit", required=True)
    sp.add_argument("--n", type=float, required=True, help="model parameters")
    sp.add_argument("--ptpp", type=float, required=True)
    sp.add_argument("--forget", default="2%", help="'2%%' relative to baseline, bare number in nats, or inf")
    sp.add_argument("--tau", type=float, required=True, help="target loss threshold")
    sp.add_argument("--baseline-loss", type=float, default=None, help="measured unadapted source loss")
    sp.add_argument("--r-points", type=int, default=2048)
    sp.add_argument("--atpp-max", type=float, default=1e3)
    sp.add_argument("--method", choices=("auto", "bisect", "scan"), default="auto")
    sp.add_argument("--allow-unconverged", action="store_true")
    sp.add_argument("--svg", action="store_true", help="also render the two landscapes (needs matplotlib)")
    sp.add_argument("--out", default="plan.json")
    sp.set_defaults(func=cmd_plan)

    sp = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset on the default grid")
    sp.add_argument("--domain", choices=("target", "source", "both"), default="target")
    sp.add_argument("--noise", type=float, default=0.0, help="std of Gaussian noise on ln loss")
    sp.add_argument("--out", default="synth.csv")
    sp.add_argument("--truth", default="truth.json")
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("predict-grid", parents=[common], help="dense predictions from a stored fit")
    sp.add_argument("--fit", required=True)
    sp.add_argument("--stage", type=float, required=True, help="ptpp to predict at")
    sp.add_argument("--data", default=None, help="take N, r and D axes from this dataset")
    sp.add_argument("--sizes", default="2.41e8,5.17e8,1.4e9,8.1e9")
    sp.add_argument("--ratios", default="0.1,0.25,0.5")
    sp.add_argument("--atpp", type=float, nargs=3, metavar=("LO", "HI", "N"), default=None)
    sp.add_argument("--out", default="grid.csv")
    sp.set_defaults(func=cmd_predict_grid)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.DEBUG if args.verbose else (logging.ERROR if args.quiet else logging.INFO)
    logging.basicConfig(level=level, format="%(levelname)s %(message)s", stream=sys.stderr, force=True)
    try:
        return args.func(args)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except DataError as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA
    except FitError as exc:
        log.error("fit failure: %s", exc)
        return EXIT_FIT
    except ValueError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
