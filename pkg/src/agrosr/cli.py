"""agrosr command-line interface.

Exit codes: 0 success or accepted, 1 rejected or failed checks, 2 usage,
config or missing-file errors, 3 runtime divergence.

Every subcommand reads an optional JSON run config (``--config``) with the
keys ``manifest``, ``labels``, ``regimes``, ``out``, ``seed``, ``log_level``,
``feature_size_m`` and the module sections ``pipeline``, ``field`` and
``audit``. Relative paths in the config resolve against the config file's
directory; command-line flags win over the file.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

log = logging.getLogger("agrosr")

EXIT_OK, EXIT_REJECTED, EXIT_USAGE, EXIT_DIVERGED = 0, 1, 2, 3
_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMBA_NUM_THREADS")
_SYNTH_EXTRAS = ("scheduled_factor", "scheduled_noise_sigma", "regimes", "bands")


class UsageError(Exception):
    """Bad invocation detected after argument parsing (exit 2)."""

    code = "usage"


@dataclass
class RunConfig:
    manifest: Path | None = None
    labels: Path | None = None
    regimes: Path | None = None
    out: Path | None = None
    seed: int | None = None
    log_level: str = "WARNING"
    feature_size_m: float | None = None
    pipeline: dict = field(default_factory=dict)
    field_spec: dict = field(default_factory=dict)
    audit: dict = field(default_factory=dict)

    @classmethod
    def load(cls, path: str | Path | None) -> "RunConfig":
        if path is None:
            return cls()
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"config file not found: {path}")
        from .io import read_json

        d = read_json(path)
        known = {"manifest", "labels", "regimes", "out", "seed", "log_level", "feature_size_m", "pipeline", "field", "audit"}
        unknown = set(d) - known
        if unknown:
            raise UsageError(f"unknown run config keys: {sorted(unknown)}")
        base = path.parent

        def rel(key):
            v = d.get(key)
            return None if v is None else (base / v)

        return cls(
            manifest=rel("manifest"),
            labels=rel("labels"),
            regimes=rel("regimes"),
            out=rel("out"),
            seed=d.get("seed"),
            log_level=d.get("log_level", "WARNING"),
            feature_size_m=d.get("feature_size_m"),
            pipeline=dict(d.get("pipeline", {})),
            field_spec=dict(d.get("field", {})),
            audit=dict(d.get("audit", {})),
        )


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------


def _pick(flag, cfg_value, name: str, required: bool = True):
    v = flag if flag is not None else cfg_value
    if v is None and required:
        raise UsageError(f"missing {name} (flag or run config)")
    return v


def _existing(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{what} not found: {p}")
    return p


def _out_dir(args, run: RunConfig, default: str) -> Path:
    out = Path(args.out) if args.out else (run.out or Path(default))
    out.mkdir(parents=True, exist_ok=True)
    if not os.access(out, os.W_OK):
        raise UsageError(f"output directory not writable: {out}")
    return out


def _pipeline_config(run: RunConfig, seed):
    from .pipeline import PipelineConfig

    d = dict(run.pipeline)
    if seed is not None:
        d["seed"] = seed
    return PipelineConfig.from_dict(d)


def _load_inputs(args, run: RunConfig, need_labels: bool):
    from .io import load_ensemble, read_labels

    manifest = _existing(_pick(getattr(args, "manifest", None), run.manifest, "manifest"), "manifest")
    ensemble = load_ensemble(manifest)
    labels = None
    if need_labels:
        labels = read_labels(_existing(_pick(getattr(args, "labels", None), run.labels, "labels"), "labels file"))
    return manifest, ensemble, labels


def _set_threads(n: int | None) -> None:
    if n is None:
        return
    if n < 1:
        raise UsageError("--threads must be positive")
    # only effective for BLAS when numpy has not been imported yet
    for var in _THREAD_VARS:
        os.environ[var] = str(n)
    if "numba" in sys.modules:
        import numba

        numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))


def _dump(obj) -> str:
    from .pipeline import _clean

    return json.dumps(_clean(obj), indent=2, sort_keys=True, allow_nan=False) + "\n"


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------


def cmd_synth(args, run: RunConfig) -> int:
    from .errors import InvalidSpecError
    from .io import read_json, write_bsf, write_json, write_labels, write_manifest, write_regime_spec
    from .labels import RegimeSpec
    from .synth import FieldSpec, simulate_ensemble

    if args.spec:
        d = read_json(_existing(args.spec, "field spec"))
    else:
        d = dict(run.field_spec)
    extras = {k: d.pop(k) for k in _SYNTH_EXTRAS if k in d}
    if args.seed is not None:
        d["seed"] = args.seed
    elif run.seed is not None and "seed" not in d:
        d["seed"] = run.seed
    spec = FieldSpec.from_dict(d)
    factor = int(args.factor if args.factor is not None else extras.get("scheduled_factor", 2))
    noise = float(args.scheduled_noise if args.scheduled_noise is not None else extras.get("scheduled_noise_sigma", 0.0))
    regimes = None
    if extras.get("regimes") is not None:
        try:
            regimes = RegimeSpec.from_dict(extras["regimes"])
        except (TypeError, ValueError, KeyError) as exc:
            if isinstance(exc, InvalidSpecError):
                raise
            raise InvalidSpecError(f"bad regimes block: {exc}") from None
    ensemble, truth, regimes = simulate_ensemble(spec, factor, noise, extras.get("bands"), regimes)

    out = _out_dir(args, run, "synth_out")
    rows, files = [], []
    for ms in ensemble.all_sets:
        for m in ms.maps:
            p = write_bsf(out / f"{ms.kind.value}_s{ms.sensor_id}_{m.acquisition_date.isoformat()}.bsf", m)
            rows.append((ms.sensor_id, ms.kind, p, m.acquisition_date.isoformat()))
            files.append(p)
    files.append(write_manifest(out / "manifest.csv", rows))
    files.append(write_labels(out / "labels.lbl", truth))
    files.append(write_regime_spec(out / "regimes.json", regimes))
    files.append(write_json(out / "field_spec.json", {**spec.to_dict(), "scheduled_factor": factor,
                                                      "scheduled_noise_sigma": noise}))
    print(f"synth: {ensemble.n_scheduled} scheduled + {ensemble.n_on_demand} on-demand sensor(s), "
          f"{len(rows)} map(s)")
    for p in files:
        print(f"  {p} ({p.stat().st_size} bytes)")
    return EXIT_OK


def cmd_audit(args, run: RunConfig) -> int:
    from .audit import FAIL, WARN, AuditThresholds, audit
    from .io import load_ensemble

    manifest = _existing(_pick(args.manifest, run.manifest, "manifest"), "manifest")
    feature = _pick(args.feature_size_m, run.feature_size_m, "--feature-size-m")
    th = dict(run.audit)
    for key in ("min_feature_ratio", "max_gap", "min_snr_db", "max_registration_px", "max_drift",
                "registration_band", "search_px"):
        v = getattr(args, key)
        if v is not None:
            th[key] = v
    report = audit(load_ensemble(manifest), float(feature), AuditThresholds.from_dict(th))
    out = _out_dir(args, run, "audit_out")
    (out / "audit.json").write_text(_dump({**report.to_dict(), "thresholds": th}))
    overall = report.overall
    if overall == WARN:
        print("WARNING: audit passed with warnings; review the items marked warn")
    print(report.summary_line())
    return EXIT_REJECTED if overall == FAIL else EXIT_OK


def _sr_config(args, run: RunConfig):
    from .pipeline import SRConfig

    pcfg = _pipeline_config(run, args.seed)
    if args.sr_index >= len(pcfg.sr_registry):
        raise UsageError(f"--sr-index {args.sr_index} out of range ({len(pcfg.sr_registry)} SR configs)")
    d = pcfg.sr_registry[args.sr_index].to_dict()
    overrides = {"kind": args.kind, "patch_size_lo": args.patch_size, "epochs": args.epochs,
                 "learning_rate": args.learning_rate, "ridge_lambda": args.ridge_lambda}
    d.update({k: v for k, v in overrides.items() if v is not None})
    return pcfg, SRConfig.from_dict(d)


def cmd_train_sr(args, run: RunConfig) -> int:
    from .pipeline import _seed
    from .sr import SRTaskSpec, save_model, write_loss_curve

    _, ensemble, _ = _load_inputs(args, run, need_labels=False)
    pcfg, scfg = _sr_config(args, run)
    lo = ensemble.scheduled_maps()[0]
    task = SRTaskSpec(pcfg.sr_bands, pcfg.sr_bands, pcfg.scale_factor, scfg.patch_size_lo, scfg.stride,
                      pcfg.allowed_factors)
    lo_mask = pcfg.split.train_mask(lo.height_px, lo.width_px)
    model = scfg.fit(ensemble, task, _seed(pcfg.seed, 0, args.sr_index), lo_mask)
    out = _out_dir(args, run, "sr_out")
    save_model(model, out / "model.bin")
    files = [out / "model.bin"]
    if model.kind == "conv_net":
        write_loss_curve(model, out / "loss_curve.csv")
        files.append(out / "loss_curve.csv")
    (out / "train_sr.json").write_text(_dump({"sr": scfg.to_dict(), "task": task.to_dict(), "meta": model.meta}))
    print(f"train-sr: {model.kind} fitted; wrote " + ", ".join(str(p) for p in files))
    return EXIT_OK


def cmd_eval_sr(args, run: RunConfig) -> int:
    from .io import write_bsf
    from .pipeline import _pick_maps, _sr_similarity
    from .sr import apply_sr, fit_interp_baseline, load_model

    _, ensemble, _ = _load_inputs(args, run, need_labels=False)
    model = load_model(_existing(args.model, "model file"))
    pcfg = _pipeline_config(run, args.seed)
    lo, hi = _pick_maps(ensemble)
    sr_map = apply_sr(model, lo, stride=args.apply_stride)
    result = {"model": model.kind, "similarity": _sr_similarity(sr_map, hi, pcfg.split)}
    if model.task.scale_factor > 1:
        base = apply_sr(fit_interp_baseline(model.task), lo.select(model.task.input_bands))
        result["bicubic_similarity"] = _sr_similarity(base, hi, pcfg.split)
    out = _out_dir(args, run, "sr_eval_out")
    write_bsf(out / "sr_output.bsf", sr_map)
    (out / "similarity.json").write_text(_dump(result))
    for band, rep in result["similarity"].items():
        ref = result.get("bicubic_similarity", {}).get(band)
        extra = f" (bicubic {ref['psnr_db']:.2f} dB)" if ref else ""
        print(f"eval-sr: {band}: PSNR {rep['psnr_db']:.2f} dB, SSIM {rep['ssim']:.3f}{extra}")
    return EXIT_OK


def cmd_train_clf(args, run: RunConfig) -> int:
    from .classify import evaluate, extract_labeled_patches, train_classifier
    from .io import read_bsf
    from .labels import LabelRaster, label_downsample
    from .pipeline import _seed

    _, ensemble, labels = _load_inputs(args, run, need_labels=True)
    pcfg = _pipeline_config(run, args.seed)
    if args.clf_index >= len(pcfg.clf_registry):
        raise UsageError(f"--clf-index {args.clf_index} out of range ({len(pcfg.clf_registry)} classifier configs)")
    ccfg = pcfg.clf_registry[args.clf_index]
    if args.stack:
        stack = read_bsf(_existing(args.stack, "band stack"))
    elif args.source == "scheduled":
        stack = ensemble.scheduled_maps()[0]
    else:
        stack = ensemble.on_demand_maps()[0]
    if (stack.height_px, stack.width_px) != labels.data.shape:
        f = labels.width_px // stack.width_px
        if f < 1 or f * stack.width_px > labels.width_px:
            raise UsageError("labels and stack grids are incompatible")
        labels = label_downsample(labels, f) if f > 1 else labels
        labels = LabelRaster(labels.data[: stack.height_px, : stack.width_px], labels.classes)
    h, w = labels.data.shape
    train = extract_labeled_patches(stack, labels, ccfg.features, 1, pcfg.split.train_mask(h, w))
    test = extract_labeled_patches(stack, labels, ccfg.features, pcfg.eval_stride, pcfg.split.test_mask(h, w))
    clf = train_classifier(train, ccfg.kind, ccfg.hyperparams, _seed(pcfg.seed, 1, args.clf_index))
    res = evaluate(clf, test)
    out = _out_dir(args, run, "clf_out")
    (out / "eval.json").write_text(_dump({"classifier": ccfg.to_dict(), "meta": clf.meta, "eval": res.to_dict()}))
    res.write_confusion_csv(out / "confusion.csv")
    print(f"train-clf: {ccfg.name} error rate {res.error_rate:.4f} on {res.n_samples} test cells")
    return EXIT_OK


def cmd_pipeline(args, run: RunConfig) -> int:
    from .io import write_bsf
    from .pipeline import run_algorithm1
    from .sr import save_model

    manifest, ensemble, labels = _load_inputs(args, run, need_labels=True)
    pcfg = _pipeline_config(run, args.seed)
    if args.max_iterations is not None:
        pcfg.max_iterations = args.max_iterations
    if args.phi is not None:
        pcfg.phi = args.phi
    pcfg.validate()
    report = run_algorithm1(ensemble, labels, pcfg)
    out = _out_dir(args, run, "pipeline_out")
    report.write(out)
    chosen = next(it for it in report.iterations if it["selected"])
    inputs = {"manifest": str(Path(manifest).resolve()),
              "labels": str(Path(_pick(args.labels, run.labels, "labels")).resolve()),
              "selected_iteration": chosen["index"]}
    sr_map = report.sr_outputs.get(chosen["sr_index"])
    if sr_map is not None:
        write_bsf(out / "sr_output.bsf", sr_map)
        save_model(report.models[chosen["index"]], out / "sr_model.bin")
        inputs["sr_output"] = "sr_output.bsf"
    (out / "inputs.json").write_text(json.dumps(inputs, indent=2, sort_keys=True) + "\n")
    rel = report.relative_improvement
    print(f"pipeline: {report.decision} (eps_low {report.epsilon_low:.4f}, eps_high {report.epsilon_high:.4f}, "
          f"eps_sr {report.epsilon_sr:.4f}, rel {rel:.3f} vs phi {report.phi}) after {len(report.iterations)} iteration(s)")
    return EXIT_OK if report.accepted else EXIT_REJECTED


def render_report(report: dict) -> str:
    lines = [
        f"decision: {report['decision']}",
        f"epsilon_low:  {report['epsilon_low']:.4f}",
        f"epsilon_high: {report['epsilon_high']:.4f}",
        f"epsilon_sr:   {report['epsilon_sr']:.4f}",
        f"relative improvement: {report['relative_improvement']:.4f} (threshold {report['phi']})",
        "",
        f"{'it':>3} {'sr':<16} {'classifier':<24} {'eps_low':>8} {'eps_high':>8} {'eps_sr':>8} {'rel':>8}  status",
    ]
    for it in report["iterations"]:
        sr = f"{it['sr']['kind']}/p{it['sr']['patch_size_lo']}"
        clf = f"{it['classifier']['kind']}/p{it['classifier']['features']['patch_size']}"
        mark = " *" if it.get("selected") else ""
        status = it["status"] + (f" ({it['error']})" if it.get("error") else "")
        lines.append(f"{it['index']:>3} {sr:<16} {clf:<24} {it['epsilon_low']:>8.4f} {it['epsilon_high']:>8.4f} "
                     f"{it['epsilon_sr']:>8.4f} {it['relative_improvement']:>8.4f}  {status}{mark}")
    return "\n".join(lines) + "\n"


def cmd_report(args, run: RunConfig) -> int:
    from .io import labels_to_rgb, load_ensemble, read_bsf, read_labels, write_pgm, write_ppm
    from .pipeline import _pick_maps

    src = Path(args.report)
    report_path = src / "report.json" if src.is_dir() else src
    report_path = _existing(report_path, "report")
    report = json.loads(report_path.read_text())
    run_dir = report_path.parent
    out = Path(args.out) if args.out else run_dir
    out.mkdir(parents=True, exist_ok=True)

    text = render_report(report)
    (out / "report.txt").write_text(text)
    with (out / "iterations.csv").open("w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["index", "sr", "classifier", "epsilon_low", "epsilon_high", "epsilon_sr",
                     "relative_improvement", "status", "selected"])
        for it in report["iterations"]:
            wr.writerow([it["index"], it["sr"]["kind"], it["classifier"]["kind"], it["epsilon_low"],
                         it["epsilon_high"], it["epsilon_sr"], it["relative_improvement"], it["status"],
                         int(bool(it.get("selected")))])
    for it in report["iterations"]:
        for key in ("eval_low", "eval_high", "eval_sr"):
            ev = it.get(key)
            if ev:
                with (out / f"confusion_it{it['index']}_{key[5:]}.csv").open("w", newline="") as fh:
                    wr = csv.writer(fh, lineterminator="\n")
                    wr.writerow(["true\\pred"] + [str(c) for c in ev["classes"]])
                    for c, row in zip(ev["classes"], ev["confusion"]):
                        wr.writerow([str(c)] + row)

    images = []
    inputs_path = run_dir / "inputs.json"
    if inputs_path.is_file():
        inputs = json.loads(inputs_path.read_text())
        lo, hi = _pick_maps(load_ensemble(_existing(inputs["manifest"], "manifest")))
        sr_map = read_bsf(run_dir / inputs["sr_output"]) if inputs.get("sr_output") else None
        img = out / "images"
        for name in hi.band_names:
            # one shared stretch per band so the three views are comparable
            ref = hi.band(name)
            vmin, vmax = float(ref.min()), float(ref.max())
            if name in lo.band_names:
                images.append(write_pgm(img / f"input_{name}.pgm", lo.band(name), vmin, vmax))
            images.append(write_pgm(img / f"target_{name}.pgm", ref, vmin, vmax))
            if sr_map is not None and name in sr_map.band_names:
                images.append(write_pgm(img / f"sr_{name}.pgm", sr_map.band(name), vmin, vmax))
        images.append(write_ppm(img / "labels.ppm", labels_to_rgb(read_labels(_existing(inputs["labels"], "labels file")))))
    print(text, end="")
    print(f"report: wrote {out / 'report.txt'}, {out / 'iterations.csv'} and {len(images)} image(s)")
    return EXIT_OK


# --------------------------------------------------------------------------
# argument parsing
# --------------------------------------------------------------------------


def _global_flags(default) -> argparse.ArgumentParser:
    g = argparse.ArgumentParser(add_help=False)
    g.add_argument("--config", default=default, help="JSON run config")
    g.add_argument("--seed", type=int, default=default, help="master seed (overrides config)")
    g.add_argument("--threads", type=int, default=default, help="cap on worker threads")
    g.add_argument("--out", default=default, help="output directory")
    g.add_argument("--log-level", default=default, help="logging level (default from config, else WARNING)")
    return g


def build_parser() -> argparse.ArgumentParser:
    # global flags may sit before or after the subcommand; the subcommand copy
    # suppresses its defaults so it never clobbers a value given up front
    common = _global_flags(argparse.SUPPRESS)
    p = argparse.ArgumentParser(prog="agrosr", description="Super-resolution feasibility tooling for crop maps.",
                                parents=[_global_flags(None)])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic field and its sensor maps")
    s.add_argument("spec", nargs="?", help="field spec JSON (default: 'field' section of the run config)")
    s.add_argument("--factor", type=int, help="scheduled/on-demand pixel ratio")
    s.add_argument("--scheduled-noise", type=float, help="extra noise sigma on scheduled maps")
    s.set_defaults(func=cmd_synth)

    a = sub.add_parser("audit", parents=[common], help="run the feasibility checklist")
    a.add_argument("manifest", nargs="?")
    a.add_argument("--feature-size-m", type=float, dest="feature_size_m")
    a.add_argument("--min-feature-ratio", type=float)
    a.add_argument("--max-gap", type=float)
    a.add_argument("--min-snr-db", type=float)
    a.add_argument("--max-registration-px", type=float)
    a.add_argument("--max-drift", type=float)
    a.add_argument("--registration-band")
    a.add_argument("--search-px", type=int)
    a.set_defaults(func=cmd_audit)

    t = sub.add_parser("train-sr", parents=[common], help="fit one SR model")
    t.add_argument("--manifest")
    t.add_argument("--sr-index", type=int, default=0, help="entry of the pipeline SR registry to start from")
    t.add_argument("--kind", choices=("patch_linear", "conv_net", "interp_baseline"))
    t.add_argument("--patch-size", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--learning-rate", type=float)
    t.add_argument("--ridge-lambda", type=float)
    t.set_defaults(func=cmd_train_sr)

    e = sub.add_parser("eval-sr", parents=[common], help="apply an SR model and score it against on-demand data")
    e.add_argument("--manifest")
    e.add_argument("--model", required=True)
    e.add_argument("--apply-stride", type=int, default=1)
    e.set_defaults(func=cmd_eval_sr)

    c = sub.add_parser("train-clf", parents=[common], help="train and evaluate one classifier")
    c.add_argument("--manifest")
    c.add_argument("--labels")
    c.add_argument("--clf-index", type=int, default=0)
    c.add_argument("--source", choices=("scheduled", "on_demand"), default="on_demand")
    c.add_argument("--stack", help="classify this BSF instead (e.g. an SR output)")
    c.set_defaults(func=cmd_train_clf)

    q = sub.add_parser("pipeline", parents=[common], help="run the accept/reject loop")
    q.add_argument("--manifest")
    q.add_argument("--labels")
    q.add_argument("--max-iterations", type=int)
    q.add_argument("--phi", type=float)
    q.set_defaults(func=cmd_pipeline)

    r = sub.add_parser("report", parents=[common], help="render a pipeline report")
    r.add_argument("report", help="pipeline output directory or report.json")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK

    try:
        run = RunConfig.load(args.config)
        logging.basicConfig(level=(args.log_level or run.log_level).upper(),
                            format="%(levelname)s %(name)s: %(message)s")
        _set_threads(args.threads)
        from .errors import AgroSRError, DivergenceError

        try:
            return args.func(args, run)
        except DivergenceError as exc:
            print(f"agrosr: error [{exc.code}]: {exc}", file=sys.stderr)
            return EXIT_DIVERGED
        except AgroSRError as exc:
            print(f"agrosr: error [{exc.code}]: {exc}", file=sys.stderr)
            return EXIT_USAGE
    except UsageError as exc:
        print(f"agrosr: error [usage]: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"agrosr: error [missing-file]: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as exc:
        # e.g. unknown log level
        print(f"agrosr: error [usage]: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
