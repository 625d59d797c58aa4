"""Command-line entry point: ``lesionkit <subcommand> ...``.

Exit codes: 0 success, 1 validation error, 2 I/O error, 64 usage error.
Every subcommand writes only inside its ``--out`` directory and leaves a
``run.json`` there recording the arguments, seed and tool version.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .exceptions import GenerationError, ValidationError
from .experiments import (
    ExperimentConfig,
    loss_comparison,
    rater_study,
    write_json,
    write_loss_comparison,
    write_rater_study,
)
from .imbalance import LOSS_KINDS, build_weight_grid, compute_loss
from .labeling import label_components
from .lesion_metrics import SMALL_CUT_MM, bootstrap_prc, lesion_prc, match_case, parallel_map
from .phantom import PhantomParams, PredictorModel, StudyParams, gen_case, simulate_predictor, simulate_study
from .rater_protocol import CaseStudy, RaterRecord, compare_settings, timing_summary
from .sampler import PatchSpec, load_training_cases, sample_batch
from .trainer import TrainConfig, VoxelModel, evaluate_probabilities, extract_features, forward, train
from .volgrid import DatasetManifest, Mask, ProbabilityMap, VoxelGrid, check_same_geometry, positive_fraction, read_volume, write_volume

EX_OK, EX_VALIDATION, EX_IO, EX_USAGE = 0, 1, 2, 64

SUBCOMMANDS = ("phantom", "label", "weights", "loss", "sample", "train", "predict",
               "prc", "rater-eval", "repro")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _common(p, seed=False, connectivity=False):
    p.add_argument("--out", required=True, type=Path, help="output directory")
    p.add_argument("--config", type=Path, help="JSON configuration")
    if seed:
        p.add_argument("--seed", type=int, default=0, help="base random seed (u64)")
    if connectivity:
        p.add_argument("--connectivity", type=int, choices=(6, 26), default=26)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="lesionkit", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"lesionkit {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    ph = sub.add_parser("phantom", help="generate synthetic phantoms")
    ph_sub = ph.add_subparsers(dest="action", parser_class=_Parser)
    gen = ph_sub.add_parser("gen", help="phantom volumes, masks, catalogs and a manifest")
    _common(gen, seed=True)
    gen.add_argument("--cases", type=int, required=True)
    gen.add_argument("--split", default="train", choices=("train", "holdout", "clinical"))
    gen.add_argument("--with-prob", action="store_true",
                     help="also write simulated probability maps (for `prc`)")
    st = ph_sub.add_parser("study", help="simulated multi-rater study (for `rater-eval`)")
    _common(st, seed=True)
    st.add_argument("--cases", type=int, required=True)
    st.add_argument("--raters", type=int, default=4)

    lab = sub.add_parser("label", help="connected components of a mask")
    _common(lab, connectivity=True)
    lab.add_argument("--mask", required=True, type=Path)

    w = sub.add_parser("weights", help="inverse-volume weight grid of a mask")
    _common(w, connectivity=True)
    w.add_argument("--mask", required=True, type=Path)
    w.add_argument("--beta", type=float, help="positive fraction; default: that of --mask")

    lo = sub.add_parser("loss", help="evaluate a loss on a probability map")
    _common(lo)
    lo.add_argument("--kind", required=True, choices=LOSS_KINDS)
    lo.add_argument("--prob", required=True, type=Path)
    lo.add_argument("--mask", required=True, type=Path)
    lo.add_argument("--weights", type=Path)

    sa = sub.add_parser("sample", help="draw training patches from a manifest")
    _common(sa, seed=True, connectivity=True)
    sa.add_argument("--manifest", required=True, type=Path)
    sa.add_argument("-n", "--n", dest="n", type=int, default=12)
    sa.add_argument("--patch-size", type=int, nargs=3, default=(32, 32, 32))
    sa.add_argument("--tumor-prob", type=float, default=0.5)

    tr = sub.add_parser("train", help="train the voxel classifier")
    _common(tr, seed=True, connectivity=True)
    tr.add_argument("--manifest", required=True, type=Path)

    pr = sub.add_parser("predict", help="probability map for an image")
    _common(pr)
    pr.add_argument("--model", required=True, type=Path)
    pr.add_argument("--image", required=True, type=Path)

    prc = sub.add_parser("prc", help="lesion-wise precision-recall curve")
    _common(prc, seed=True, connectivity=True)
    prc.add_argument("--manifest", required=True, type=Path)
    prc.add_argument("--small-cut-mm", type=float, default=SMALL_CUT_MM)
    prc.add_argument("--bootstrap-iters", type=int, default=100)
    prc.add_argument("--bootstrap-frac", type=float, default=0.8)
    prc.add_argument("--target-precision", type=float,
                     help="report small-lesion recall at this precision (default: precision at the 0.5 cut)")

    re = sub.add_parser("rater-eval", help="multi-rater comparison and timing tables")
    _common(re)
    re.add_argument("--study", required=True, type=Path)

    rp = sub.add_parser("repro", help="run both flagship experiments")
    _common(rp, seed=True, connectivity=True)
    rp.add_argument("--small-cut-mm", type=float)
    rp.add_argument("--bootstrap-iters", type=int)
    rp.add_argument("--bootstrap-frac", type=float)
    # default connectivity comes from the config for repro
    rp.set_defaults(connectivity=None)
    return parser


def _run_record(args, out: Path) -> None:
    record = {
        "tool": "lesionkit",
        "version": __version__,
        "command": args.command,
        "args": {k: (str(v) if isinstance(v, Path) else v) for k, v in sorted(vars(args).items())
                 if k not in ("out", "func")},
    }
    write_json(out / "run.json", record)


def _load_json(path):
    with open(path) as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: invalid JSON ({exc})") from None


def cmd_phantom(args) -> None:
    if args.action is None:
        raise UsageError("phantom needs an action: gen or study")
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    rng = np.random.default_rng(args.seed)
    if args.cases < 1:
        raise ValidationError("--cases must be positive")
    if args.action == "gen":
        _phantom_gen(args, cfg, rng)
    else:
        _phantom_study(args, cfg, rng)


def _phantom_gen(args, cfg, rng):
    out = args.out
    entries = []
    for i in range(args.cases):
        case_id = f"case{i:03d}"
        image, gt, catalog = gen_case(cfg.phantom, rng)
        write_volume(image, out / f"{case_id}_image.rvol")
        write_volume(gt, out / f"{case_id}_gt.rvol")
        write_json(out / f"{case_id}_catalog.json", [l.to_dict() for l in catalog])
        entry = {"id": case_id, "image": f"{case_id}_image.rvol", "gt": f"{case_id}_gt.rvol"}
        if args.with_prob:
            prob = simulate_predictor(gt, catalog, cfg.predictor, rng)
            write_volume(prob, out / f"{case_id}_prob.rvol")
            entry["prob"] = f"{case_id}_prob.rvol"
        entries.append(entry)
    DatasetManifest.from_dict({"split": args.split, "cases": entries}, out).save(out / "manifest.json")


def _phantom_study(args, cfg, rng):
    out = args.out
    study = replace(cfg.study, n_cases=args.cases, n_raters=args.raters)
    cases, truths = simulate_study(cfg.study_phantom, study, rng)
    doc = {"cases": []}
    for case, gt in zip(cases, truths):
        write_volume(gt, out / f"{case.case_id}_gt.rvol")
        raters = []
        for u, r in enumerate(case.raters, start=1):
            stem = f"{case.case_id}_r{u}"
            write_volume(Mask(r.manual_mask, gt.spacing), out / f"{stem}_manual.rvol")
            write_volume(Mask(r.cnn_init_mask, gt.spacing), out / f"{stem}_cnn.rvol")
            raters.append({"manual": f"{stem}_manual.rvol", "cnn_init": f"{stem}_cnn.rvol",
                           "manual_time": r.manual_time, "adjust_time": r.adjust_time})
        doc["cases"].append({"id": case.case_id, "raters": raters})
    write_json(out / "study.json", doc)


def _read_mask(path) -> Mask:
    grid = read_volume(path)
    if not isinstance(grid, Mask):
        raise ValidationError(f"{path}: expected a mask volume (dtype code 0)")
    return grid


def _read_prob(path) -> ProbabilityMap:
    grid = read_volume(path)
    return ProbabilityMap(grid.values, grid.spacing)


def cmd_label(args) -> None:
    mask = _read_mask(args.mask)
    labels = label_components(mask, args.connectivity)
    write_volume(labels.to_grid(), args.out / "labels.rvol")
    write_json(args.out / "sizes.json", {
        "connectivity": labels.connectivity,
        "n_components": labels.n_components,
        "sizes": labels.sizes.tolist(),
    })


def cmd_weights(args) -> None:
    mask = _read_mask(args.mask)
    beta = args.beta if args.beta is not None else positive_fraction([mask])
    labels = label_components(mask, args.connectivity)
    wg = build_weight_grid(labels, beta)
    write_volume(wg.grid, args.out / "weights.rvol")
    write_json(args.out / "weights.json", {
        "beta": wg.beta,
        "connectivity": labels.connectivity,
        "component_weights": wg.component_weights.tolist(),
        "component_sizes": labels.sizes.tolist(),
    })


def cmd_loss(args) -> None:
    if args.kind == "iwbce" and args.weights is None:
        raise ValidationError("loss --kind iwbce requires --weights (a weight RVOL from `weights`)")
    prob = _read_prob(args.prob)
    mask = _read_mask(args.mask)
    grids = [prob, mask]
    weights = None
    if args.weights is not None:
        weights = read_volume(args.weights)
        grids.append(weights)
    check_same_geometry(*grids, names=["prob", "mask", "weights"][: len(grids)])
    report = compute_loss(args.kind, prob, mask, None if weights is None else weights.values.astype(np.float64))
    write_json(args.out / "loss.json", report.to_dict())
    print(json.dumps({"loss_kind": report.loss_kind, "value": report.value}))


def cmd_sample(args) -> None:
    manifest = DatasetManifest.load(args.manifest)
    spec = PatchSpec(tuple(args.patch_size), args.tumor_prob, args.seed)
    cases = load_training_cases(manifest, weighted=True, connectivity=args.connectivity)
    patches = sample_batch(cases, spec, args.n, np.random.default_rng(args.seed))
    index = []
    for i, p in enumerate(patches):
        case = cases[p.case_index]
        spacing = read_volume(manifest.resolve(manifest.cases[p.case_index].gt)).spacing
        stem = f"patch{i:05d}"
        write_volume(VoxelGrid(p.image, spacing), args.out / f"{stem}_image.rvol")
        write_volume(Mask(p.gt, spacing), args.out / f"{stem}_gt.rvol")
        write_volume(VoxelGrid(p.weights, spacing), args.out / f"{stem}_weights.rvol")
        index.append({
            "patch": stem, "case": case.case_id, "origin": list(p.origin),
            "center": list(p.center), "tumor_draw": p.tumor_draw,
            "center_positive": p.center_positive,
            "shifted_center_positive": p.shifted_center_positive,
        })
    write_json(args.out / "index.json", {"patch_size": list(spec.size), "tumor_prob": spec.tumor_prob,
                                         "patches": index})


def _train_config(args) -> TrainConfig:
    doc = _load_json(args.config) if args.config else {}
    if "train" in doc:
        doc = doc["train"]
    doc = dict(doc)
    doc["seed"] = args.seed
    doc["connectivity"] = args.connectivity
    return TrainConfig.from_dict(doc)


def cmd_train(args) -> None:
    config = _train_config(args)
    manifest = DatasetManifest.load(args.manifest)
    cases = load_training_cases(manifest, weighted=config.loss == "iwbce", connectivity=config.connectivity)
    cases = [replace(c, features=extract_features(c.image, config.radii).astype(np.float32))
             for c in cases]
    model, log = train(cases, config)
    model.save(args.out / "model.json")
    lines = ["epoch,lr,mean_loss"] + [f"{e['epoch']},{e['lr']:.6g},{e['mean_loss']:.10g}" for e in log]
    (args.out / "train_log.csv").write_text("\n".join(lines) + "\n")


def cmd_predict(args) -> None:
    model = VoxelModel.load(args.model)
    image = read_volume(args.image)
    p = forward(model, extract_features(image, model.radii))
    write_volume(ProbabilityMap(p.astype(np.float32), image.spacing), args.out / "prob.rvol")


def cmd_prc(args) -> None:
    manifest = DatasetManifest.load(args.manifest)
    missing = [c.case_id for c in manifest.cases if c.prob is None]
    if missing:
        raise ValidationError(f"manifest cases without a probability map: {missing}")

    def load(entry):
        prob = _read_prob(manifest.resolve(entry.prob))
        gt = _read_mask(manifest.resolve(entry.gt))
        check_same_geometry(prob, gt, names=[f"{entry.case_id}:prob", f"{entry.case_id}:gt"])
        return prob, gt

    pairs = parallel_map(load, manifest.cases)
    report = evaluate_probabilities([p for p, _ in pairs], [g for _, g in pairs], args.connectivity,
                                    args.small_cut_mm, [c.case_id for c in manifest.cases])
    curve = report.prc
    small = report.small_prc
    if args.bootstrap_iters > 0 and len(manifest) >= 2:
        rng = np.random.default_rng(args.seed)
        curve = bootstrap_prc(report.matches, args.bootstrap_iters, args.bootstrap_frac, rng)
        if small is not None:
            small = bootstrap_prc(report.matches, args.bootstrap_iters, args.bootstrap_frac, rng,
                                  args.small_cut_mm)
    (args.out / "prc.csv").write_text(curve.to_csv())
    if small is not None:
        (args.out / "prc_small.csv").write_text(small.to_csv())
    target = args.target_precision if args.target_precision is not None else float(report.prc.precision[0])
    write_json(args.out / "summary.json", {
        "n_cases": len(manifest),
        "n_gt_lesions": report.prc.n_gt,
        "n_small_lesions": report.n_small,
        "small_cut_mm": args.small_cut_mm,
        "median_lesion_dice": report.median_lesion_dice,
        "target_precision": target,
        "operating_point": report.at_precision(target),
    })


def _study_from_json(path) -> list[CaseStudy]:
    doc = _load_json(path)
    root = Path(path).parent
    cases = []
    try:
        for c in doc["cases"]:
            records = []
            for u, r in enumerate(c["raters"], start=1):
                def mask(key):
                    if r.get(key) is None:
                        raise ValidationError(f"case {c['id']!r}, rater {u}: missing {key} mask")
                    p = Path(r[key])
                    return _read_mask(p if p.is_absolute() else root / p).values
                records.append(RaterRecord(mask("manual"), mask("cnn_init"),
                                           float(r["manual_time"]), float(r["adjust_time"])))
            cases.append(CaseStudy(str(c["id"]), tuple(records)))
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"{path}: malformed study manifest ({exc!r})") from None
    return cases


def cmd_rater_eval(args) -> None:
    cases = _study_from_json(args.study)
    write_rater_study(compare_settings(cases), timing_summary(cases), args.out)


def cmd_repro(args) -> None:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    cfg = cfg.with_seed(args.seed)
    overrides = {}
    if args.connectivity is not None:
        overrides["connectivity"] = args.connectivity
    if args.small_cut_mm is not None:
        overrides["small_cut_mm"] = args.small_cut_mm
    if args.bootstrap_iters is not None:
        overrides["bootstrap_iters"] = args.bootstrap_iters
    if args.bootstrap_frac is not None:
        overrides["bootstrap_frac"] = args.bootstrap_frac
    if overrides:
        cfg = replace(cfg, metrics=replace(cfg.metrics, **overrides))
    write_json(args.out / "config.json", cfg.to_dict())
    write_loss_comparison(loss_comparison(cfg, bootstrap=True), args.out / "loss_comparison")
    _, report, timing = rater_study(cfg)
    write_rater_study(report, timing, args.out / "rater_study")


COMMANDS = {
    "phantom": cmd_phantom,
    "label": cmd_label,
    "weights": cmd_weights,
    "loss": cmd_loss,
    "sample": cmd_sample,
    "train": cmd_train,
    "predict": cmd_predict,
    "prc": cmd_prc,
    "rater-eval": cmd_rater_eval,
    "repro": cmd_repro,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    if argv and not argv[0].startswith("-") and argv[0] not in SUBCOMMANDS:
        print(parser.format_usage(), end="", file=sys.stderr)
        print(f"lesionkit: error: unknown subcommand {argv[0]!r}", file=sys.stderr)
        return EX_USAGE
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage() + "lesionkit: error: a subcommand is required")
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EX_USAGE
    try:
        args.out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](args)
        _run_record(args, args.out)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EX_USAGE
    except (ValidationError, GenerationError) as exc:
        print(f"lesionkit {args.command}: error: {exc}", file=sys.stderr)
        return EX_VALIDATION
    except OSError as exc:
        print(f"lesionkit {args.command}: I/O error: {exc}", file=sys.stderr)
        return EX_IO
    return EX_OK


if __name__ == "__main__":
    sys.exit(main())
