"""Command-line interface.

Subcommands cover the whole pipeline: synthesize a cohort, fit the PCA
subspace, train the flow, then predict, sample, build conditional
templates, evaluate, and run the geometry utilities. Report-producing
paths (train --log, eval --out-dir, template) render matplotlib figures
next to their delimited outputs. All randomness is seeded through flags
or config keys; exit codes are 0 success, 1 validation error,
2 numerical failure.
"""

from __future__ import annotations

import argparse
import io
import json
import sys
from pathlib import Path

import numpy as np

from . import aging, container, subspace, training
from .cohort import ConfigReader, load_cohort, read_kv_config, read_manifest, split_rows
from .errors import NumericalError, ValidationError
from .flow import FlowConfig, build_flow
from .geometry import svf_exp, jacobian_det_map, warp
from .synth import SynthConfig, write_cohort


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse default exits with 2; we reserve 2 for numerics
        raise ValidationError(f"{self.prog}: {message}")


def _build_parser() -> _Parser:
    p = _Parser(prog="flowage", description="Bidirectional aging model over velocity-field subspaces")
    sp = p.add_subparsers(dest="command", metavar="<command>")

    s = sp.add_parser("synth", help="generate a synthetic cohort", add_help=True)
    s.add_argument("--config", required=True)
    s.add_argument("--out-dir", required=True)

    s = sp.add_parser("fit-subspace", help="fit the PCA subspace of a cohort")
    s.add_argument("--manifest", required=True)
    s.add_argument("--n-sub", type=int, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--standardize-coords", choices=["true", "false"], default="true")

    s = sp.add_parser("train", help="train the flow on projected coordinates")
    s.add_argument("--manifest", required=True)
    s.add_argument("--subspace", required=True)
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--log", default=None)

    s = sp.add_parser("predict", help="predict ages for a tensor or a manifest")
    s.add_argument("--model", required=True)
    s.add_argument("--input", required=True)
    s.add_argument("--format", choices=["csv", "json"], default="csv")

    s = sp.add_parser("sample", help="sample coordinates conditioned on age")
    s.add_argument("--model", required=True)
    s.add_argument("--age", type=float, required=True)
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--out-dir", required=True)

    s = sp.add_parser("template", help="Monte-Carlo conditional templates per age")
    s.add_argument("--model", required=True)
    s.add_argument("--ages", default="40,50,60,70,80,90")
    s.add_argument("--n-samples", type=int, default=10000)
    s.add_argument("--template", required=True)
    s.add_argument("--out-dir", required=True)
    s.add_argument("--emit-jacobian", action="store_true")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--squarings", type=int, default=8)

    s = sp.add_parser("eval", help="per-age-bin MAE report")
    s.add_argument("--model", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--baseline", choices=["mlr"], default=None)
    s.add_argument("--out-dir", default=None)

    s = sp.add_parser("exp", help="exponentiate a velocity field")
    s.add_argument("--velocity", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--squarings", type=int, default=8)

    s = sp.add_parser("warp", help="warp a volume by a deformation")
    s.add_argument("--image", required=True)
    s.add_argument("--deformation", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--nearest", action="store_true")
    return p


def _parse_synth_config(path) -> SynthConfig:
    r = ConfigReader(read_kv_config(path), str(path))
    kwargs = dict(
        n_subjects=r.get_int("n_subjects", SynthConfig.n_subjects),
        n_test=r.get_int("n_test", SynthConfig.n_test),
        dims=r.get_tuple("dims", 3, int, SynthConfig.dims),
        spacing=r.get_tuple("spacing", 3, float, SynthConfig.spacing),
        age_range=r.get_tuple("age_range", 2, float, SynthConfig.age_range),
        generator=r.get_str("generator", SynthConfig.generator, choices=("linear", "quadratic", "sigmoid")),
        n_factors=r.get_int("n_factors", SynthConfig.n_factors),
        noise_std=r.get_float("noise_std", SynthConfig.noise_std),
        voxel_noise_std=r.get_float("voxel_noise_std", SynthConfig.voxel_noise_std),
        bump_amp=r.get_float("bump_amp", SynthConfig.bump_amp),
        sigmoid_width=r.get_float("sigmoid_width", SynthConfig.sigmoid_width),
        seed=r.get_int("seed", SynthConfig.seed),
    )
    centers = r.get_optional("bump_centers")
    if centers is not None:
        kwargs["bump_centers"] = [tuple(float(x) for x in t.split(",")) for t in centers.split(";")]
    widths = r.get_optional("bump_widths")
    if widths is not None:
        kwargs["bump_widths"] = [float(x) for x in widths.split(",")]
    r.reject_unknown()
    cfg = SynthConfig(**kwargs)
    cfg.validate()
    return cfg


def _parse_train_config(path) -> tuple[dict, training.TrainConfig]:
    r = ConfigReader(read_kv_config(path), str(path))
    flow_kwargs = dict(
        n_lay=r.get_int("n_lay", FlowConfig.n_lay),
        n_hid=r.get_int("n_hid", FlowConfig.n_hid),
        hidden_width=r.get_int("hidden_width", FlowConfig.hidden_width),
        scale_clamp=r.get_float("scale_clamp", FlowConfig.scale_clamp),
    )
    tc = training.TrainConfig(
        sigma=r.get_float("sigma", training.TrainConfig.sigma),
        epochs=r.get_int("epochs", training.TrainConfig.epochs),
        learning_rate=r.get_float("learning_rate", training.TrainConfig.learning_rate),
        weight_decay=r.get_float("weight_decay", training.TrainConfig.weight_decay),
        batch=r.get_str("batch", str(training.TrainConfig.batch)),
        seed=r.get_int("seed", training.TrainConfig.seed),
        grad_check=r.get_bool("grad_check", training.TrainConfig.grad_check),
        record_every=r.get_int("record_every", training.TrainConfig.record_every),
        age_units=r.get_str("age_units", training.TrainConfig.age_units, choices=("normalized", "years")),
    )
    if tc.batch != "full":
        try:
            tc.batch = int(tc.batch)
        except ValueError:
            raise ValidationError(f"{path}: batch must be 'full' or an integer, got {tc.batch!r}") from None
    r.reject_unknown()
    tc.validate()
    return flow_kwargs, tc


def _load_model(path) -> aging.AgingModel:
    sub, flow, prov = container.load_aging_model(path)
    return aging.AgingModel(sub, flow, prov)


def _report_csv(reports: dict) -> str:
    buf = io.StringIO()
    buf.write("model,bin,count,mae_years\n")
    for name, rep in reports.items():
        for b in rep.per_bin:
            mae = "" if b.mae is None else repr(b.mae)
            buf.write(f"{name},{b.label},{b.count},{mae}\n")
        buf.write(f"{name},all,{rep.n_subjects},{rep.overall_mae!r}\n")
    return buf.getvalue()


def _print_report(name: str, rep: aging.EvalReport) -> None:
    print(f"{name} MAE by age range (years):")
    print("  " + " | ".join(f"{b.label:>6}" for b in rep.per_bin) + " |    all")
    cells = []
    for b in rep.per_bin:
        cells.append(f"{b.mae:6.2f}" if b.mae is not None else "     -")
    print("  " + " | ".join(cells) + f" | {rep.overall_mae:6.2f}")
    print("  counts: " + ", ".join(f"{b.label}={b.count}" for b in rep.per_bin) + f", all={rep.n_subjects}")


def _cmd_synth(args) -> int:
    cfg = _parse_synth_config(args.config)
    manifest, record = write_cohort(cfg, args.out_dir)
    n_train = cfg.n_subjects - cfg.n_test
    print(f"wrote {cfg.n_subjects} subjects ({n_train} train / {cfg.n_test} test) to {args.out_dir}")
    print(f"manifest: {manifest}")
    print(f"generator record: {Path(args.out_dir) / 'generator.json'} (bayes mae {record.bayes_mae_years:.3f} y)")
    return 0


def _cmd_fit_subspace(args) -> int:
    rows = read_manifest(args.manifest)
    train_rows, _ = split_rows(rows)
    cohort = load_cohort(train_rows)
    model = subspace.fit([v for v, _ in cohort], args.n_sub, standardize=args.standardize_coords == "true")
    container.save_subspace(args.out, model)
    print(f"fitted subspace on {len(cohort)} fields: n_sub={model.n_sub}, variance captured {model.variance_captured:.4f}")
    print(f"checkpoint: {args.out}")
    return 0


def _cmd_train(args) -> int:
    flow_kwargs, tc = _parse_train_config(args.config)
    if args.seed is not None:
        tc.seed = args.seed
    sub = container.load_subspace(args.subspace)
    rows = read_manifest(args.manifest)
    train_rows, _ = split_rows(rows)
    cohort = load_cohort(train_rows)
    coords = subspace.project_many(sub, [v for v, _ in cohort])
    ages = np.array([a for _, a in cohort])

    fcfg = FlowConfig(n_sub=sub.n_sub, **flow_kwargs)
    model = build_flow(fcfg, seed=tc.seed)
    data = list(zip(coords, ages))
    model, records = training.train(
        model, data, tc,
        on_record=lambda r: print(f"epoch {r.epoch}: loss={r.loss:.6f} age_mse={r.age_mse:.6f} log_det={r.log_det_mean:.4f}"),
    )

    prov = {
        "config_hash": training.config_hash(tc),
        "data_fingerprint": training.data_fingerprint(coords, ages),
        "train_seed": tc.seed,
        "sigma": repr(tc.sigma),
        "epochs": tc.epochs,
        "learning_rate": repr(tc.learning_rate),
        "weight_decay": repr(tc.weight_decay),
        "batch": tc.batch,
        "age_units": tc.age_units,
        "n_train": len(cohort),
    }
    container.save_aging_model(args.out, sub, model, prov)
    print(f"trained {tc.epochs} epochs on {len(cohort)} subjects; checkpoint: {args.out}")
    if args.log:
        training.write_train_log(records, args.log)
        from . import plots

        fig = plots.save_training_curves(records, Path(args.log).with_suffix(".png"))
        print(f"training log: {args.log} (curves: {fig})")
    return 0


def _cmd_predict(args) -> int:
    m = _load_model(args.model)
    path = Path(args.input)
    if not path.is_file():
        raise ValidationError(f"{path}: file not found")
    results = []
    with path.open("rb") as fh:
        is_tensor = fh.read(8) == container.MAGIC
    if is_tensor:
        v = container.read_velocity(path)
        results.append({"subject_id": path.stem, "predicted_age_years": aging.predict_age(m, v)})
    else:
        for row in read_manifest(path):
            v = container.read_velocity(row.velocity_path)
            results.append(
                {
                    "subject_id": row.subject_id,
                    "age_years": row.age_years,
                    "predicted_age_years": aging.predict_age(m, v),
                }
            )
    if args.format == "json":
        print(json.dumps(results, indent=1))
    else:
        cols = list(results[0].keys())
        print(",".join(cols))
        for rec in results:
            print(",".join(repr(rec[c]) if isinstance(rec[c], float) else str(rec[c]) for c in cols))
    return 0


def _cmd_sample(args) -> int:
    m = _load_model(args.model)
    samples = aging.sample_conditional(m, args.age, args.n, args.seed)
    out = Path(args.out_dir)
    container.write_tensor(out / "samples.bin", samples, "matrix", extra={"age_years": repr(float(args.age)), "seed": args.seed})
    lines = ["sample_id," + ",".join(f"c{j}" for j in range(samples.shape[1]))]
    for i, row in enumerate(samples):
        lines.append(f"sample_{i:06d}," + ",".join(repr(x) for x in row))
    container.atomic_write_bytes(out / "samples.csv", ("\n".join(lines) + "\n").encode())
    print(f"wrote {args.n} conditional samples at age {args.age} to {out}")
    return 0


def _cmd_template(args) -> int:
    m = _load_model(args.model)
    try:
        ages = [float(a) for a in str(args.ages).split(",") if a.strip()]
    except ValueError:
        raise ValidationError(f"--ages must be a comma-separated list of numbers, got {args.ages!r}") from None
    if not ages:
        raise ValidationError("--ages is empty")
    template = container.read_volume(args.template)
    if template.dims != m.subspace.dims:
        raise ValidationError(f"template grid {template.dims} does not match model grid {m.subspace.dims}")
    out = Path(args.out_dir)
    from . import plots

    summary = ["age_years,velocity_path,warped_path,jacobian_path,mean_abs_velocity,mean_jacobian_det"]
    for age in ages:
        tag = f"age{age:g}"
        tvel = aging.conditional_template(m, age, args.n_samples, args.seed)
        phi = svf_exp(tvel, args.squarings)
        warped = warp(template, phi)
        vel_path = out / f"template_{tag}.vf"
        img_path = out / f"template_{tag}.vol"
        container.write_velocity(vel_path, tvel)
        container.write_volume(img_path, warped)
        plots.save_volume_slices(warped, out / f"template_{tag}.png", title=f"conditional template, age {age:g}")
        jac_path = ""
        mean_jac = ""
        if args.emit_jacobian:
            jac = jacobian_det_map(phi)
            jac_path = out / f"jacobian_{tag}.vol"
            container.write_volume(jac_path, jac)
            plots.save_volume_slices(jac, out / f"jacobian_{tag}.png", title=f"jacobian determinant, age {age:g}", diverging=True)
            mean_jac = repr(float(jac.data.mean()))
        summary.append(
            f"{age:g},{vel_path.name},{img_path.name},{Path(jac_path).name if jac_path else ''},"
            f"{float(np.abs(tvel.data).mean())!r},{mean_jac}"
        )
        print(f"age {age:g}: template written ({args.n_samples} samples)")
    container.atomic_write_bytes(out / "templates.csv", ("\n".join(summary) + "\n").encode())
    return 0


def _cmd_eval(args) -> int:
    m = _load_model(args.model)
    rows = read_manifest(args.manifest)
    train_rows, test_rows = split_rows(rows)
    eval_rows = test_rows if test_rows else rows
    cohort = load_cohort(eval_rows)
    coords = np.stack([subspace.project(m.subspace, v) for v, _ in cohort])
    ages = np.array([a for _, a in cohort])

    reports = {"flow": aging.evaluate_predictions(ages, aging.predict_ages_batch(m, coords))}
    _print_report("flow", reports["flow"])

    if args.baseline == "mlr":
        if not test_rows:
            raise ValidationError(f"{args.manifest}: --baseline mlr needs a split column to separate train and test rows")
        train_cohort = load_cohort(train_rows)
        train_coords = np.stack([subspace.project(m.subspace, v) for v, _ in train_cohort])
        train_ages = np.array([a for _, a in train_cohort])
        mlr = aging.fit_mlr(list(zip(train_coords, train_ages)))
        reports["mlr"] = aging.evaluate_predictions(ages, aging.predict_mlr_batch(mlr, coords))
        _print_report("mlr", reports["mlr"])

    if args.out_dir:
        out = Path(args.out_dir)
        container.atomic_write_bytes(out / "eval_report.csv", _report_csv(reports).encode())
        from . import plots

        plots.save_mae_bars(reports, out / "eval_report.png")
        print(f"report: {out / 'eval_report.csv'} (figure: {out / 'eval_report.png'})")
    return 0


def _cmd_exp(args) -> int:
    if args.squarings < 0:
        raise ValidationError(f"--squarings must be >= 0, got {args.squarings}")
    v = container.read_velocity(args.velocity)
    phi = svf_exp(v, args.squarings)
    container.write_deformation(args.out, phi)
    print(f"exp({Path(args.velocity).name}) -> {args.out} (squarings={args.squarings})")
    return 0


def _cmd_warp(args) -> int:
    img = container.read_volume(args.image)
    if args.nearest:
        img.interpolation = "nearest"
    phi = container.read_deformation(args.deformation)
    out = warp(img, phi)
    container.write_volume(args.out, out)
    print(f"warped {Path(args.image).name} -> {args.out}")
    return 0


_COMMANDS = {
    "synth": _cmd_synth,
    "fit-subspace": _cmd_fit_subspace,
    "train": _cmd_train,
    "predict": _cmd_predict,
    "sample": _cmd_sample,
    "template": _cmd_template,
    "eval": _cmd_eval,
    "exp": _cmd_exp,
    "warp": _cmd_warp,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help()
            return 1
        return _COMMANDS[args.command](args)
    except ValidationError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
