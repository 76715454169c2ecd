"""The accept/reject loop: is SR on scheduled maps worth it for a classifier?

Error rates for the scheduled map, the on-demand map and the SR-enhanced
scheduled map are all measured on one frozen set of on-demand-resolution test
cells. A scheduled-map prediction for a cell is the prediction made for the
coarse pixel containing it.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .classify import (
    Classifier,
    PatchFeatureSpec,
    SpatialSplit,
    evaluate_predictions,
    extract_labeled_patches,
    grid_centers,
    patch_features,
    train_classifier,
)
from .errors import AgroSRError, InvalidArgumentError
from .labels import UNLABELED, LabelRaster, label_downsample
from .raster import BandStack, SensorEnsemble, crop
from .sr import (
    SRModel,
    SRTaskSpec,
    apply_sr,
    fit_conv_net,
    fit_interp_baseline,
    fit_patch_linear,
    make_training_pairs,
    similarity,
)
from .sr.convnet import LayerSpec

__all__ = [
    "SRConfig", "ClassifierConfig", "PipelineConfig", "PipelineReport", "run_algorithm1",
    "check_decision_consistency", "label_downsample", "default_sr_registry", "default_clf_registry",
    "scheduled_error",
]

ACCEPTED = "accepted"
REJECTED = "rejected_exhausted"
FAILED_EPSILON = 1.0
REPORT_KEYS = ("epsilon_low", "epsilon_high", "epsilon_sr", "relative_improvement", "phi", "decision", "iterations")


@dataclass
class SRConfig:
    kind: str = "patch_linear"
    patch_size_lo: int = 5
    stride: int = 1
    ridge_lambda: float = 1e-3
    epochs: int = 15
    learning_rate: float = 0.05
    batch_size: int = 32
    momentum: float = 0.9
    width: int = 8
    arch: list | None = None
    apply_stride: int = 1

    @property
    def name(self) -> str:
        return f"{self.kind}/p{self.patch_size_lo}"

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        if self.arch is not None:
            d["arch"] = [a.to_dict() if isinstance(a, LayerSpec) else dict(a) for a in self.arch]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SRConfig":
        d = dict(d)
        if d.get("arch") is not None:
            d["arch"] = [LayerSpec.from_dict(a) if isinstance(a, dict) else a for a in d["arch"]]
        return cls(**d)

    def fit(self, ensemble: SensorEnsemble, task: SRTaskSpec, seed: int, lo_mask) -> SRModel:
        if self.kind == "interp_baseline":
            return fit_interp_baseline(task)
        pairs = make_training_pairs(ensemble, task, seed=seed, lo_mask=lo_mask)
        if self.kind == "patch_linear":
            return fit_patch_linear(pairs, self.ridge_lambda)
        if self.kind == "conv_net":
            return fit_conv_net(pairs, self.arch, self.epochs, self.learning_rate, seed, self.batch_size,
                                self.momentum, width=self.width)
        raise InvalidArgumentError(f"unknown SR kind {self.kind!r}")


@dataclass
class ClassifierConfig:
    kind: str = "logistic_multinomial"
    features: PatchFeatureSpec = field(default_factory=lambda: PatchFeatureSpec(5, ("blue", "green", "red", "nir", "thermal")))
    hyperparams: dict = field(default_factory=dict)

    @property
    def name(self) -> str:
        return f"{self.kind}/p{self.features.patch_size}"

    def to_dict(self) -> dict:
        return {"kind": self.kind, "features": self.features.to_dict(), "hyperparams": dict(self.hyperparams)}

    @classmethod
    def from_dict(cls, d: dict) -> "ClassifierConfig":
        feats = d.get("features")
        return cls(d.get("kind", "logistic_multinomial"),
                   PatchFeatureSpec.from_dict(feats) if feats else PatchFeatureSpec(5, ("blue", "green", "red", "nir", "thermal")),
                   dict(d.get("hyperparams", {})))


def default_sr_registry() -> list[SRConfig]:
    return [SRConfig("patch_linear", 5), SRConfig("conv_net", 7, stride=2)]


def default_clf_registry() -> list[ClassifierConfig]:
    return [ClassifierConfig("logistic_multinomial"), ClassifierConfig("knn", hyperparams={"k": 5, "max_exemplars": 8000})]


@dataclass
class PipelineConfig:
    phi: float = 0.2
    scale_factor: int = 2
    sr_registry: list[SRConfig] = field(default_factory=default_sr_registry)
    clf_registry: list[ClassifierConfig] = field(default_factory=default_clf_registry)
    max_iterations: int = 4
    seed: int = 0
    split: SpatialSplit = field(default_factory=lambda: SpatialSplit.quadrant(3))
    sr_bands: tuple[str, ...] = ("blue", "green", "red", "nir", "thermal")
    allowed_factors: tuple[int, ...] = (1, 2, 4, 8, 16)
    train_stride_lo: int = 1
    train_stride_hi: int = 1
    eval_stride: int = 2

    def __post_init__(self):
        self.sr_bands = tuple(self.sr_bands)
        self.allowed_factors = tuple(int(f) for f in self.allowed_factors)
        self.validate()

    def validate(self) -> None:
        if not 0.0 <= self.phi < 1.0:
            raise InvalidArgumentError(f"phi must lie in [0, 1), got {self.phi}")
        if not self.sr_registry or not self.clf_registry:
            raise InvalidArgumentError("SR and classifier registries must be non-empty")
        if self.max_iterations < 1:
            raise InvalidArgumentError("max_iterations must be positive")
        if self.scale_factor not in self.allowed_factors:
            raise InvalidArgumentError(f"scale_factor {self.scale_factor} not in {self.allowed_factors}")
        for name in ("train_stride_lo", "train_stride_hi", "eval_stride"):
            if getattr(self, name) < 1:
                raise InvalidArgumentError(f"{name} must be positive")

    def to_dict(self) -> dict:
        return {
            "phi": self.phi,
            "scale_factor": self.scale_factor,
            "sr_registry": [c.to_dict() for c in self.sr_registry],
            "clf_registry": [c.to_dict() for c in self.clf_registry],
            "max_iterations": self.max_iterations,
            "seed": self.seed,
            "split": self.split.to_dict(),
            "sr_bands": list(self.sr_bands),
            "allowed_factors": list(self.allowed_factors),
            "train_stride_lo": self.train_stride_lo,
            "train_stride_hi": self.train_stride_hi,
            "eval_stride": self.eval_stride,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        d = dict(d)
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise InvalidArgumentError(f"unknown pipeline config keys: {sorted(unknown)}")
        if "sr_registry" in d:
            d["sr_registry"] = [SRConfig.from_dict(c) for c in d["sr_registry"]]
        if "clf_registry" in d:
            d["clf_registry"] = [ClassifierConfig.from_dict(c) for c in d["clf_registry"]]
        if "split" in d:
            d["split"] = SpatialSplit.from_dict(d["split"])
        try:
            return cls(**d)
        except TypeError as exc:
            raise InvalidArgumentError(str(exc)) from None


@dataclass
class PipelineReport:
    epsilon_low: float
    epsilon_high: float
    epsilon_sr: float
    relative_improvement: float
    phi: float
    decision: str
    iterations: list[dict]
    config: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)
    models: dict = field(default_factory=dict)  # iteration index -> fitted SRModel (not serialized)
    sr_outputs: dict = field(default_factory=dict)  # sr registry index -> BandStack (not serialized)

    @property
    def accepted(self) -> bool:
        return self.decision == ACCEPTED

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in REPORT_KEYS}

    def to_json(self) -> str:
        return json.dumps(_clean(self.to_dict()), indent=2, allow_nan=False) + "\n"

    def write(self, out_dir) -> dict:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {"report": out / "report.json", "config": out / "config.json", "timings": out / "timings.json"}
        paths["report"].write_text(self.to_json())
        paths["config"].write_text(json.dumps(_clean(self.config), indent=2, allow_nan=False) + "\n")
        paths["timings"].write_text(json.dumps(self.timings, indent=2) + "\n")
        return paths


def _clean(obj):
    """JSON-safe copy: numpy scalars unwrapped, non-finite floats as strings."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, np.generic):
        obj = obj.item()
    if isinstance(obj, float) and not np.isfinite(obj):
        return "inf" if obj > 0 else ("-inf" if obj < 0 else "nan")
    return obj


def _seed(*parts) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def _relative(eps_low: float, eps_sr: float) -> float:
    return 0.0 if eps_low == 0 else (eps_low - eps_sr) / eps_low


def _iteration_passes(it: dict, phi: float) -> bool:
    return bool(it.get("low_res_sufficient")) or it["relative_improvement"] >= phi


def check_decision_consistency(report: dict) -> bool:
    """Re-derive the decision and headline numbers from the iteration list."""
    its = report["iterations"]
    phi = report["phi"]
    passing = [it for it in its if _iteration_passes(it, phi)]
    expected = ACCEPTED if passing else REJECTED
    if report["decision"] != expected:
        return False
    # the loop stops at the first passing combo, so only the last may pass
    if passing and passing[0] is not its[-1]:
        return False
    if not its:
        return False
    chosen = [it for it in its if it.get("selected")]
    if len(chosen) != 1:
        return False
    c = chosen[0]
    if passing and c is not passing[0]:
        return False
    if not passing and c["relative_improvement"] != max(it["relative_improvement"] for it in its):
        return False
    return all(report[k] == c[k] for k in ("epsilon_low", "epsilon_high", "epsilon_sr", "relative_improvement"))


def _pick_maps(ensemble: SensorEnsemble) -> tuple[BandStack, BandStack]:
    scheduled = ensemble.scheduled_maps()
    on_demand = ensemble.on_demand_maps()
    if not scheduled or not on_demand:
        raise InvalidArgumentError("ensemble needs at least one scheduled and one on-demand map")
    hi = on_demand[0]
    lo = min(scheduled, key=lambda m: abs((m.acquisition_date - hi.acquisition_date).days))
    return lo, hi


class _Evaluator:
    """Frozen test cells and per-map classifier training for one run."""

    def __init__(self, lo, hi, labels, config: PipelineConfig):
        self.lo, self.hi, self.labels, self.cfg = lo, hi, labels, config
        self.f = config.scale_factor
        self.lo_labels = label_downsample(labels, self.f)
        h, w = labels.data.shape
        self.lo_labels = LabelRaster(self.lo_labels.data[: lo.height_px, : lo.width_px], labels.classes)
        cells = grid_centers(h, w, 1, config.eval_stride)
        test = config.split.test_mask(h, w)
        keep = test[cells[:, 0], cells[:, 1]] & (labels.data[cells[:, 0], cells[:, 1]] != UNLABELED)
        self.all_cells = cells[keep]
        self._cells = {}

    def cells_for(self, spec: PatchFeatureSpec) -> np.ndarray:
        """Test cells where both the scheduled and on-demand maps give a prediction
        and the SR extent holds the whole patch."""
        key = spec
        if key not in self._cells:
            cells = self.all_cells
            _, ok_lo = patch_features(self.lo, spec, cells // self.f)
            _, ok_hi = patch_features(self.hi, spec, cells)
            half = spec.patch_size // 2
            hs, ws = self.lo.height_px * self.f, self.lo.width_px * self.f
            in_sr = (cells[:, 0] >= half) & (cells[:, 0] < hs - half) & (cells[:, 1] >= half) & (cells[:, 1] < ws - half)
            self._cells[key] = cells[ok_lo & ok_hi & in_sr]
            if self._cells[key].shape[0] == 0:
                raise InvalidArgumentError("no usable test cells under the spatial split")
        return self._cells[key]

    def train(self, stack: BandStack, labels: LabelRaster, ccfg: ClassifierConfig, stride: int, seed: int) -> Classifier:
        h, w = labels.data.shape
        data = extract_labeled_patches(stack, labels, ccfg.features, stride, self.cfg.split.train_mask(h, w))
        return train_classifier(data, ccfg.kind, ccfg.hyperparams, seed)

    def score(self, clf: Classifier, stack: BandStack, ccfg: ClassifierConfig, coarse: bool = False):
        cells = self.cells_for(ccfg.features)
        truth = self.labels.data[cells[:, 0], cells[:, 1]]
        pred = clf.predict_cells(stack, cells // self.f if coarse else cells)
        # a missing prediction counts as an error
        pred = np.where(pred == UNLABELED, _wrong_label(truth, self.labels.class_ids), pred)
        return evaluate_predictions(truth, pred, self.labels.class_ids)


def _wrong_label(truth: np.ndarray, class_ids) -> np.ndarray:
    ids = sorted(class_ids)
    nxt = {c: ids[(i + 1) % len(ids)] for i, c in enumerate(ids)}
    return np.array([nxt[int(t)] for t in truth], dtype=np.int32)


def _test_block_crop(stack: BandStack, split: SpatialSplit) -> BandStack:
    m = split.test_mask(stack.height_px, stack.width_px)
    rows = np.flatnonzero(m.any(axis=1))
    cols = np.flatnonzero(m.any(axis=0))
    return crop(stack, int(cols[0]), int(rows[0]), int(cols[-1] - cols[0] + 1), int(rows[-1] - rows[0] + 1))


def _sr_similarity(sr_out: BandStack, hi: BandStack, split: SpatialSplit) -> dict:
    h, w = sr_out.height_px, sr_out.width_px
    a = _test_block_crop(sr_out, split)
    b = _test_block_crop(crop(hi, 0, 0, w, h), split)
    out = {}
    for name in sr_out.band_names:
        ref = b.band(name)
        rng = float(np.nanmax(ref) - np.nanmin(ref)) or 1.0
        out[name] = similarity(a.select([name]), b.select([name]), rng).to_dict()
    return out


def run_algorithm1(ensemble: SensorEnsemble, labels: LabelRaster, config: PipelineConfig) -> PipelineReport:
    """Steps 1-5 over the registry cross-product (SR-major, classifier-minor)."""
    config.validate()
    lo, hi = _pick_maps(ensemble)
    f = config.scale_factor
    ratio = lo.pixel_size_m / hi.pixel_size_m
    if abs(ratio - f) > 1e-6 * f:
        raise InvalidArgumentError(f"scheduled/on-demand pixel ratio {ratio:.6g} does not match scale_factor {f}")
    if labels.data.shape != (hi.height_px, hi.width_px):
        raise InvalidArgumentError("labels must be defined on the on-demand grid")
    if len(set(labels.data[labels.data != UNLABELED].tolist())) < 2:
        raise InvalidArgumentError("labels need at least two classes")

    ev = _Evaluator(lo, hi, labels, config)
    lo_mask = config.split.train_mask(lo.height_px, lo.width_px)
    timings = {}
    baseline_cache = {}
    iterations = []
    models = {}
    sr_outputs = {}
    combos = [(i, j) for i in range(len(config.sr_registry)) for j in range(len(config.clf_registry))]
    for idx, (si, cj) in enumerate(combos[: config.max_iterations]):
        scfg, ccfg = config.sr_registry[si], config.clf_registry[cj]
        rec = {"index": idx, "sr_index": si, "clf_index": cj, "sr": scfg.to_dict(), "classifier": ccfg.to_dict(), "status": "ok"}
        t0 = time.perf_counter()

        # steps 1-2 depend only on the classifier config; computed once each
        if cj not in baseline_cache:
            cseed = _seed(config.seed, 1, cj)
            try:
                c_lo = ev.train(lo, ev.lo_labels, ccfg, config.train_stride_lo, cseed)
                r_lo = ev.score(c_lo, lo, ccfg, coarse=True)
                c_hi = ev.train(hi, labels, ccfg, config.train_stride_hi, cseed)
                r_hi = ev.score(c_hi, hi, ccfg)
                baseline_cache[cj] = (r_lo.to_dict(), r_hi.to_dict(), None)
            except AgroSRError as exc:
                baseline_cache[cj] = (None, None, exc)
        r_lo, r_hi, base_err = baseline_cache[cj]
        t1 = time.perf_counter()

        if base_err is not None:
            rec.update(status="failed", error=f"{base_err.code}: {base_err}")
            eps_low = eps_high = eps_sr = FAILED_EPSILON
            r_sr = None
            sim = None
        else:
            eps_low, eps_high = r_lo["error_rate"], r_hi["error_rate"]
            sim = None
            try:
                # step 3: fit SR once per SR config and reuse it across classifiers
                if si not in sr_outputs:
                    sseed = _seed(config.seed, 0, si)
                    task = SRTaskSpec(config.sr_bands, config.sr_bands, f, scfg.patch_size_lo, scfg.stride,
                                      config.allowed_factors)
                    try:
                        model = scfg.fit(ensemble, task, sseed, lo_mask)
                        sr_outputs[si] = (model, apply_sr(model, lo, stride=scfg.apply_stride))
                    except AgroSRError as exc:
                        sr_outputs[si] = exc
                if isinstance(sr_outputs[si], AgroSRError):
                    raise sr_outputs[si]
                model, sr_map = sr_outputs[si]
                models[idx] = model
                sim = _sr_similarity(sr_map, hi, config.split)
                # step 4: classifier on the SR-enhanced map, truth labels
                sr_labels = LabelRaster(labels.data[: sr_map.height_px, : sr_map.width_px], labels.classes)
                c_sr = ev.train(sr_map, sr_labels, ccfg, config.train_stride_hi, _seed(config.seed, 2, idx))
                res = ev.score(c_sr, sr_map, ccfg)
                r_sr = res.to_dict()
                eps_sr = res.error_rate
            except AgroSRError as exc:
                rec.update(status="failed", error=f"{exc.code}: {exc}")
                if getattr(exc, "epoch", None) is not None:
                    rec["divergence_epoch"] = exc.epoch
                r_sr = None
                eps_sr = FAILED_EPSILON
        t2 = time.perf_counter()

        rec.update(
            epsilon_low=eps_low,
            epsilon_high=eps_high,
            epsilon_sr=eps_sr,
            relative_improvement=_relative(eps_low, eps_sr),
            low_res_sufficient=eps_low == 0,
            n_test=(r_lo or {}).get("n_samples", 0),
            eval_low=r_lo,
            eval_high=r_hi,
            eval_sr=r_sr,
            similarity=sim,
            selected=False,
        )
        iterations.append(rec)
        timings[f"iteration_{idx}"] = {"baseline_s": round(t1 - t0, 3), "sr_s": round(t2 - t1, 3)}
        # step 5
        if _iteration_passes(rec, config.phi):
            break

    passing = [it for it in iterations if _iteration_passes(it, config.phi)]
    if passing:
        chosen, decision = passing[0], ACCEPTED
    else:
        best = max(it["relative_improvement"] for it in iterations)
        chosen, decision = next(it for it in iterations if it["relative_improvement"] == best), REJECTED
    chosen["selected"] = True
    return PipelineReport(
        chosen["epsilon_low"], chosen["epsilon_high"], chosen["epsilon_sr"], chosen["relative_improvement"],
        config.phi, decision, iterations, config.to_dict(), timings, models,
        {k: v[1] for k, v in sr_outputs.items() if isinstance(v, tuple)},
    )


def scheduled_error(ensemble: SensorEnsemble, labels: LabelRaster, config: PipelineConfig, clf_index: int = 0):
    """Step 1 alone: the scheduled-map EvalResult on the frozen test cells.

    Factor 1 is allowed here, in which case the "scheduled" map is simply
    scored at full resolution.
    """
    lo, hi = _pick_maps(ensemble)
    ccfg = config.clf_registry[clf_index]
    ev = _Evaluator(lo, hi, labels, config)
    clf = ev.train(lo, ev.lo_labels, ccfg, config.train_stride_lo, _seed(config.seed, 1, clf_index))
    return ev.score(clf, lo, ccfg, coarse=True)
