"""End-to-end experiments driven by one JSON configuration.

``loss_comparison`` trains the voxel classifier with each loss on
synthetic phantoms and compares lesion-wise detection, with small lesions
reported separately.  ``rater_study`` runs the multi-rater contour
comparison and timing summary on a simulated study.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .exceptions import ValidationError
from .imbalance import LOSS_KINDS
from .labeling import DEFAULT_CONNECTIVITY
from .lesion_metrics import SMALL_CUT_MM, bootstrap_prc
from .phantom import PhantomParams, PredictorModel, RaterModel, StudyParams, gen_case, simulate_predictor, simulate_study
from .rater_protocol import SETTINGS, compare_settings, mmss, timing_summary
from .trainer import (
    EvaluationReport,
    TrainConfig,
    evaluate,
    evaluate_probabilities,
    extract_features,
    prepare_cases,
    train,
)
from .validation import check_connectivity

REFERENCE_LOSS = "bce"


@dataclass(frozen=True)
class MetricOptions:
    connectivity: int = DEFAULT_CONNECTIVITY
    small_cut_mm: float = SMALL_CUT_MM
    bootstrap_iters: int = 100
    bootstrap_frac: float = 0.8
    # None: match the precision of the reference (BCE) model at the 0.5 cut
    target_precision: float | None = None

    def __post_init__(self):
        check_connectivity(self.connectivity)
        if not self.small_cut_mm > 0:
            raise ValidationError("small_cut_mm must be positive")
        if self.bootstrap_iters < 1:
            raise ValidationError("bootstrap_iters must be positive")
        if not 0 < self.bootstrap_frac <= 1:
            raise ValidationError("bootstrap_frac must lie in (0, 1]")


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    n_train: int = 40
    n_test: int = 10
    losses: tuple[str, ...] = ("bce", "iwbce", "dice")
    phantom: PhantomParams = PhantomParams()
    train: TrainConfig = TrainConfig()
    predictor: PredictorModel = PredictorModel(fp_rate=1.0, blur_sigma_mm=0.8)
    study: StudyParams = StudyParams()
    study_phantom: PhantomParams = PhantomParams(dims=(64, 64, 64), noise_sigma=0.0,
                                                 diameter_range=(4.0, 20.0))
    metrics: MetricOptions = MetricOptions()

    def __post_init__(self):
        if self.n_train < 1 or self.n_test < 2:
            raise ValidationError("need n_train >= 1 and n_test >= 2")
        bad = [l for l in self.losses if l not in LOSS_KINDS]
        if bad or not self.losses:
            raise ValidationError(f"losses must be a non-empty subset of {LOSS_KINDS}, got {self.losses}")
        object.__setattr__(self, "losses", tuple(self.losses))

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(self, seed=int(seed))

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        doc = dict(doc)
        _reject_unknown(cls, doc, "experiment config")
        kwargs = {}
        for key in ("seed", "n_train", "n_test"):
            if key in doc:
                kwargs[key] = int(doc[key])
        if "losses" in doc:
            kwargs["losses"] = tuple(doc["losses"])
        if "phantom" in doc:
            kwargs["phantom"] = _build(PhantomParams, doc["phantom"])
        if "study_phantom" in doc:
            kwargs["study_phantom"] = _build(PhantomParams, doc["study_phantom"])
        if "train" in doc:
            kwargs["train"] = TrainConfig.from_dict(doc["train"])
        if "predictor" in doc:
            kwargs["predictor"] = _build(PredictorModel, doc["predictor"])
        if "metrics" in doc:
            kwargs["metrics"] = _build(MetricOptions, doc["metrics"])
        if "study" in doc:
            sdoc = dict(doc["study"])
            for key in ("manual", "seed_contour", "cnn_adjust"):
                if key in sdoc:
                    sdoc[key] = _build(RaterModel, sdoc[key])
            kwargs["study"] = _build(StudyParams, sdoc)
        return cls(**kwargs)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            try:
                return cls.from_dict(json.load(fh))
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{path}: invalid JSON ({exc})") from None
            except TypeError as exc:
                raise ValidationError(f"{path}: {exc}") from None


def _reject_unknown(cls, doc, what):
    unknown = set(doc) - {f.name for f in fields(cls)}
    if unknown:
        raise ValidationError(f"unknown {what} keys: {sorted(unknown)}")


def _build(cls, doc):
    doc = dict(doc)
    _reject_unknown(cls, doc, cls.__name__)
    for f in fields(cls):
        if f.name in doc and isinstance(doc[f.name], list):
            doc[f.name] = tuple(doc[f.name])
    return cls(**doc)


def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), stream])


@dataclass
class LossComparison:
    reports: dict
    logs: dict
    target_precision: float
    reference: EvaluationReport | None = None
    bootstrap: dict = field(default_factory=dict)

    def operating_points(self) -> dict:
        return {k: r.at_precision(self.target_precision) for k, r in self.reports.items()}

    def summary(self) -> dict:
        points = self.operating_points()
        out = {"target_precision": self.target_precision, "losses": {}}
        for k, rep in self.reports.items():
            out["losses"][k] = {
                "operating_point": points[k],
                "n_gt": rep.prc.n_gt,
                "n_small": rep.n_small,
                "median_lesion_dice": rep.median_lesion_dice,
                "final_train_loss": self.logs[k][-1]["mean_loss"],
                "first_train_loss": self.logs[k][0]["mean_loss"],
            }
        if self.reference is not None:
            out["simulated_predictor"] = {
                "operating_point": self.reference.at_precision(self.target_precision),
                "median_lesion_dice": self.reference.median_lesion_dice,
            }
        return out


def make_benchmark(cfg: ExperimentConfig):
    """Train and test phantoms for ``cfg.seed``: lists of (image, gt, catalog)."""
    rng = _rng(cfg.seed, 1)
    train_set = [gen_case(cfg.phantom, rng) for _ in range(cfg.n_train)]
    test_set = [gen_case(cfg.phantom, rng) for _ in range(cfg.n_test)]
    return train_set, test_set


def loss_comparison(cfg: ExperimentConfig, bootstrap: bool = False) -> LossComparison:
    """Train one model per loss on the same phantoms and evaluate on held-out ones."""
    train_set, test_set = make_benchmark(cfg)
    images = [c[0] for c in train_set]
    masks = [c[1] for c in train_set]
    feats = [extract_features(img, cfg.train.radii).astype(np.float32) for img in images]
    m = cfg.metrics
    reports, logs = {}, {}
    for loss in cfg.losses:
        tcfg = replace(cfg.train, loss=loss, seed=int(cfg.seed), connectivity=m.connectivity)
        cases = prepare_cases(images, masks, tcfg, features=feats)
        model, log = train(cases, tcfg)
        del cases
        reports[loss] = evaluate(model, [c[0] for c in test_set], [c[1] for c in test_set],
                                 m.connectivity, m.small_cut_mm)
        logs[loss] = log
    del feats
    pred_rng = _rng(cfg.seed, 4)
    probs = [simulate_predictor(gt, cat, cfg.predictor, pred_rng) for _, gt, cat in test_set]
    reference = evaluate_probabilities(probs, [c[1] for c in test_set], m.connectivity, m.small_cut_mm)
    target = m.target_precision
    if target is None:
        ref = reports.get(REFERENCE_LOSS) or next(iter(reports.values()))
        target = float(ref.prc.precision[0])
    result = LossComparison(reports, logs, target, reference)
    if bootstrap:
        boot_rng = _rng(cfg.seed, 2)
        for loss, rep in reports.items():
            result.bootstrap[loss] = bootstrap_prc(rep.matches, m.bootstrap_iters, m.bootstrap_frac, boot_rng)
            if rep.small_prc is not None:
                result.bootstrap[f"{loss}_small"] = bootstrap_prc(
                    rep.matches, m.bootstrap_iters, m.bootstrap_frac, boot_rng, m.small_cut_mm
                )
    return result


def rater_study(cfg: ExperimentConfig):
    """Simulated study → (cases, ComparisonReport, timing summary)."""
    cases, _ = simulate_study(cfg.study_phantom, cfg.study, _rng(cfg.seed, 3))
    return cases, compare_settings(cases), timing_summary(cases)


def table1_csv(report) -> str:
    lines = ["rater," + ",".join(SETTINGS) + ",p_I,p_II"]
    for row in report.rows():
        vals = [format(row[s], ".6f") for s in SETTINGS]
        ps = ["" if row[k] is None else format(row[k], ".6g") for k in ("p_I", "p_II")]
        lines.append(",".join([row["rater"]] + vals + ps))
    return "\n".join(lines) + "\n"


def table2_rows(timing: dict):
    for key in sorted(k for k in timing if k != "all") + ["all"]:
        t = timing[key]
        yield {
            "rater": "All data" if key == "all" else f"User {key}",
            "median_manual": mmss(t["median_manual"]),
            "manual_range": f"{mmss(t['manual_range'][0])} - {mmss(t['manual_range'][1])}",
            "median_reduction": mmss(t["median_reduction"]),
            "reduction_range": f"{mmss(t['reduction_range'][0])} - {mmss(t['reduction_range'][1])}",
            "speedup": format(t["speedup"], ".2f"),
        }


def table2_csv(timing: dict) -> str:
    cols = ["rater", "median_manual", "manual_range", "median_reduction", "reduction_range", "speedup"]
    lines = [",".join(cols)]
    lines += [",".join(row[c] for c in cols) for row in table2_rows(timing)]
    return "\n".join(lines) + "\n"


def write_json(path, doc) -> None:
    with open(path, "w") as fh:
        json.dump(_jsonable(doc), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, np.floating):
        x = float(x)
    if isinstance(x, float) and not np.isfinite(x):
        return None
    return x


def write_loss_comparison(result: LossComparison, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    for loss, rep in result.reports.items():
        curve = result.bootstrap.get(loss, rep.prc)
        (out / f"prc_{loss}.csv").write_text(curve.to_csv())
        small = result.bootstrap.get(f"{loss}_small", rep.small_prc)
        if small is not None:
            (out / f"prc_{loss}_small.csv").write_text(small.to_csv())
        log_lines = ["epoch,lr,mean_loss"] + [
            f"{e['epoch']},{e['lr']:.6g},{e['mean_loss']:.10g}" for e in result.logs[loss]
        ]
        (out / f"train_log_{loss}.csv").write_text("\n".join(log_lines) + "\n")
    if result.reference is not None:
        (out / "prc_simulated_predictor.csv").write_text(result.reference.prc.to_csv())
    write_json(out / "summary.json", result.summary())


def write_rater_study(report, timing, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "table1.csv").write_text(table1_csv(report))
    (out / "table2.csv").write_text(table2_csv(timing))
    write_json(out / "table1.json", {"medians": report.medians, "p_values": report.p_values})
    write_json(out / "table2.json", timing)
    lines = ["case,rater," + ",".join(SETTINGS)]
    for (case_id, u) in report.dice["1v3"]:
        vals = [format(report.dice[s][(case_id, u)], ".6f") for s in SETTINGS]
        lines.append(",".join([case_id, str(u)] + vals))
    (out / "dice_per_case.csv").write_text("\n".join(lines) + "\n")
