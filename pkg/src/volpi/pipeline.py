"""Experiment orchestration: dataset generation, training, calibration,
evaluation and the gamma sweep, shared by the CLI and the test harness.

Layout under an experiment's out_dir:

    dataset/cases/<id>/...   dataset/manifest.json
    models/<variant>/run<k>/model.bin|model.json
    calibration/run<k>/<method>.json
    reports/run<k>/report.csv|report.txt|fig2_data.csv|pi_records.jsonl
    reports/aggregate.csv    (when n_runs > 1)
    run.json
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from dataclasses import dataclass, field, replace

import numpy as np

from volpi import __version__, calibration, metrics, nets, phantom, pimethods
from volpi.errors import ConfigError, MissingArtifactError
from volpi.seeding import derive_seed

DIRECT_METHODS = ("triad", "regcnn")
SAMPLING_METHODS = ("ct", "mc", "tta")
ALL_METHODS = ("triad", "ct", "mc", "tta", "regcnn")
SEG_VARIANTS = ("baseline", "dropout", "triad")

TEMPERATURE_SAMPLE_VOXELS = 100_000


@dataclass
class ExperimentConfig:
    """One experiment: phantoms, nets, methods, budgets, seed, output dir."""

    out_dir: str
    seed: int | None = None
    phantom: phantom.PhantomSpec = field(default_factory=phantom.PhantomSpec)
    n_cases: int = 60
    splits: tuple[float, float, float] = (0.4, 0.2, 0.4)
    alpha: float = 0.1
    gamma: float = 0.2
    methods: tuple[str, ...] = ALL_METHODS
    T: int = 20
    n_thresholds: int = 20
    n_aug: int = 20
    n_runs: int = 1
    net: dict = field(default_factory=dict)  # base_filters / depth / dropout_rate
    train: dict = field(default_factory=dict)  # epochs / batch_size / learning_rate
    dataset_root: str | None = None  # share another experiment's dataset

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ConfigError(f"alpha must be in (0, 1), got {self.alpha}")
        if not 0.0 < self.gamma < 0.5:
            raise ConfigError(f"gamma must be in (0, 0.5), got {self.gamma}")
        if not self.methods:
            raise ConfigError("methods must be nonempty")
        unknown = set(self.methods) - set(ALL_METHODS)
        if unknown:
            raise ConfigError(f"unknown methods {sorted(unknown)}; choose from {ALL_METHODS}")
        if self.n_cases < 3:
            raise ConfigError("n_cases must be >= 3 (one per fold)")
        if self.n_runs < 1:
            raise ConfigError("n_runs must be >= 1")
        for name, v in (("T", self.T), ("n_thresholds", self.n_thresholds), ("n_aug", self.n_aug)):
            if v < 2:
                raise ConfigError(f"{name} must be >= 2, got {v}")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        if "phantom" in d:
            try:
                d["phantom"] = phantom.PhantomSpec.from_dict(d["phantom"])
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad phantom spec: {exc}") from None
        for key in ("splits", "methods"):
            if key in d:
                d[key] = tuple(d[key])
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config fields {sorted(unknown)}")
        if "out_dir" not in d:
            raise ConfigError("config must set out_dir")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def from_json_file(cls, path: str) -> "ExperimentConfig":
        try:
            with open(path, "r", encoding="utf-8") as fh:
                payload = json.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}") from None
        return cls.from_dict(payload)

    def to_dict(self) -> dict:
        return {
            "out_dir": self.out_dir,
            "seed": self.seed,
            "phantom": self.phantom.to_dict(),
            "n_cases": self.n_cases,
            "splits": list(self.splits),
            "alpha": self.alpha,
            "gamma": self.gamma,
            "methods": list(self.methods),
            "T": self.T,
            "n_thresholds": self.n_thresholds,
            "n_aug": self.n_aug,
            "n_runs": self.n_runs,
            "net": dict(self.net),
            "train": dict(self.train),
            "dataset_root": self.dataset_root,
        }

    # -- paths ---------------------------------------------------------------

    @property
    def dataset_dir(self) -> str:
        return self.dataset_root or os.path.join(self.out_dir, "dataset")

    def model_dir(self, variant: str, run: int = 0) -> str:
        return os.path.join(self.out_dir, "models", variant, f"run{run}")

    def calibration_path(self, method: str, run: int = 0) -> str:
        return os.path.join(self.out_dir, "calibration", f"run{run}", f"{method}.json")

    def reports_dir(self, run: int = 0) -> str:
        return os.path.join(self.out_dir, "reports", f"run{run}")

    def require_seed(self) -> int:
        if self.seed is None:
            raise ConfigError("an explicit seed is required (set --seed or config 'seed')")
        return self.seed


def _net_spec(cfg: ExperimentConfig, variant: str) -> nets.NetSpec:
    base = {
        "in_channels": cfg.phantom.n_channels,
        "n_classes": cfg.phantom.n_classes,
        "base_filters": cfg.net.get("base_filters", 8),
        "depth": cfg.net.get("depth", 3),
    }
    if variant == "baseline":
        return nets.NetSpec(**base)
    if variant == "dropout":
        return nets.NetSpec(**base, dropout_rate=cfg.net.get("dropout_rate", 0.2))
    if variant == "triad":
        return nets.NetSpec(**base, n_heads=3)
    if variant == "regcnn":
        return nets.NetSpec(**base, head_kind="regression")
    raise ConfigError(f"unknown variant '{variant}'")


def _train_config(cfg: ExperimentConfig, variant: str, seed: int, gamma: float) -> nets.TrainConfig:
    epochs = int(cfg.train.get("epochs", 10))
    if variant == "regcnn":
        epochs = int(cfg.train.get("regressor_epochs", 4 * epochs))
    return nets.TrainConfig(
        epochs=epochs,
        loss_id={"baseline": "dice", "dropout": "dice", "triad": "triad", "regcnn": "pinball-compound"}[variant],
        seed=seed,
        learning_rate=float(cfg.train.get("learning_rate", 2e-4)),
        batch_size=int(cfg.train.get("batch_size", 4)),
        gamma=gamma,
        alpha=cfg.alpha,
    )


# -- dataset -------------------------------------------------------------------


def run_gen(cfg: ExperimentConfig, force: bool = False) -> list[str]:
    """Generate n_cases phantoms plus manifest with the three-fold split."""
    seed = cfg.require_seed()
    root = cfg.dataset_dir
    if os.path.isdir(root) and os.listdir(root):
        if not force:
            raise ConfigError(f"dataset dir {root} is not empty (use --force to overwrite)")
    os.makedirs(root, exist_ok=True)
    ids = []
    for i in range(cfg.n_cases):
        cid = f"case_{i:04d}"
        case = phantom.generate_phantom(cfg.phantom, derive_seed(seed, "case", i), case_id=cid)
        phantom.write_case(case, phantom.case_dir(root, cid))
        ids.append(cid)
    split = phantom.split_dataset(ids, cfg.splits, seed)
    phantom.write_manifest(root, cfg.phantom, ids, split)
    return ids


def _load_split(cfg: ExperimentConfig) -> tuple[phantom.PhantomSpec, phantom.DatasetSplit]:
    if not os.path.isdir(cfg.dataset_dir):
        raise MissingArtifactError(f"no dataset under {cfg.dataset_dir}; run `gen` first")
    spec, _, split = phantom.read_manifest(cfg.dataset_dir)
    return spec, split


# -- training ------------------------------------------------------------------


def _baseline_onehot_segs(baseline, cases) -> list[np.ndarray]:
    """One-hot argmax segmentations of the baseline net, batched."""
    n_classes = baseline.spec.n_classes
    out = []
    chunk = 8
    for start in range(0, len(cases), chunk):
        stack = np.stack([c.intensities for c in cases[start : start + chunk]])
        logits = nets.forward_batch(baseline, stack).numpy()
        labels = logits[:, 0].argmax(axis=1)  # head 0
        for lab in labels:
            out.append(np.eye(n_classes, dtype=np.float32)[lab].transpose(3, 0, 1, 2))
    return out


def run_train(cfg: ExperimentConfig, variant: str) -> list[list[float]]:
    """Train one model variant for each run; returns per-run loss traces."""
    if variant not in ("baseline", "dropout", "triad", "regcnn"):
        raise ConfigError(f"unknown variant '{variant}'")
    seed = cfg.require_seed()
    _, split = _load_split(cfg)
    train_cases = phantom.load_cases(cfg.dataset_dir, split.train_ids)
    if not train_cases:
        raise MissingArtifactError("train fold is empty")
    traces = []
    for run in range(cfg.n_runs):
        run_seed = derive_seed(seed, "train", variant, cfg.gamma if variant == "triad" else "", run)
        spec = _net_spec(cfg, variant)
        tcfg = _train_config(cfg, variant, run_seed, cfg.gamma)
        if variant == "regcnn":
            base_dir = cfg.model_dir("baseline", run)
            try:
                baseline, _ = nets.load_checkpoint(base_dir)
            except MissingArtifactError:
                raise MissingArtifactError(
                    f"regcnn needs a baseline checkpoint under {base_dir}; train baseline first"
                ) from None
            segs = _baseline_onehot_segs(baseline, train_cases)
            items = [
                (np.concatenate([c.intensities, seg], axis=0), c.true_volumes_mL)
                for c, seg in zip(train_cases, segs)
            ]
            net = nets.build_regressor(spec, run_seed)
        else:
            items = [(c.intensities, c.labels) for c in train_cases]
            net = nets.build_net(spec, run_seed)
        _, trace = nets.train(net, items, tcfg)
        nets.save_checkpoint(cfg.model_dir(variant, run), net, tcfg, run_seed, trace)
        traces.append(trace)
    return traces


# -- per-case PI collection ------------------------------------------------------


@dataclass
class CaseOutcome:
    case_id: str
    truth: np.ndarray
    interval: pimethods.VolumeInterval | None = None
    stats: pimethods.SamplingStats | None = None
    wall_time_s: float = 0.0
    forward_passes: int = 1
    prerequisite_passes: int = 0
    dsc: np.ndarray | None = None


class MethodContext:
    """Loaded checkpoints for one run, resolved lazily per method."""

    def __init__(self, cfg: ExperimentConfig, run: int = 0):
        self.cfg = cfg
        self.run = run
        self._nets: dict[str, object] = {}

    def net_for(self, variant: str):
        if variant not in self._nets:
            path = self.cfg.model_dir(variant, self.run)
            try:
                self._nets[variant], _ = nets.load_checkpoint(path)
            except MissingArtifactError:
                raise MissingArtifactError(
                    f"method needs the '{variant}' checkpoint under {path}; train it first"
                ) from None
        return self._nets[variant]


def _case_dsc(pred_labels: np.ndarray, case: phantom.PhantomCase, n_classes: int) -> np.ndarray:
    return np.array(
        [metrics.dsc(pred_labels, case.labels, c) for c in range(1, n_classes)]
    )


def collect_outcomes(
    method: str,
    ctx: MethodContext,
    cases: list[phantom.PhantomCase],
    with_dsc: bool,
    temperature: float | None = None,
) -> list[CaseOutcome]:
    """Run one PI constructor over a fold of cases.

    For 'ct' a fitted temperature (tau) must be supplied; see
    `fit_ct_temperature`.
    """
    cfg = ctx.cfg
    n_classes = cfg.phantom.n_classes
    out: list[CaseOutcome] = []
    for case in cases:
        x = case.intensities
        spacing = case.spacing_mm
        o = CaseOutcome(case_id=case.case_id, truth=case.true_volumes_mL.copy())
        if method == "triad":
            net = ctx.net_for("triad")
            t0 = time.perf_counter()
            mask = nets.forward(net, x)
            o.interval = pimethods.triad_intervals(mask, spacing)
            o.wall_time_s = time.perf_counter() - t0
            o.forward_passes = 1
            if with_dsc:
                o.dsc = _case_dsc(mask.probs[1].argmax(axis=0), case, n_classes)
        elif method == "ct":
            if temperature is None:
                raise ValueError("ct needs a fitted temperature")
            net = ctx.net_for("baseline")
            t0 = time.perf_counter()
            mask = nets.forward(net, x)
            scaled = calibration.apply_temperature(mask.logits[0], temperature)
            o.stats = pimethods.ct_stats(scaled, _ct_thresholds(cfg), spacing)
            o.wall_time_s = time.perf_counter() - t0
            o.forward_passes = 1
            if with_dsc:
                o.dsc = _case_dsc(mask.probs[0].argmax(axis=0), case, n_classes)
        elif method == "mc":
            net = ctx.net_for("dropout")
            t0 = time.perf_counter()
            o.stats = pimethods.mc_stats(
                net, x, cfg.T, derive_seed(cfg.seed or 0, "mc", case.case_id), spacing
            )
            o.wall_time_s = time.perf_counter() - t0
            o.forward_passes = cfg.T
            if with_dsc:
                clean = nets.forward(net, x)
                o.dsc = _case_dsc(clean.probs[0].argmax(axis=0), case, n_classes)
        elif method == "tta":
            net = ctx.net_for("baseline")
            t0 = time.perf_counter()
            o.stats = pimethods.tta_stats(
                net, x, cfg.n_aug, derive_seed(cfg.seed or 0, "tta", case.case_id), spacing
            )
            o.wall_time_s = time.perf_counter() - t0
            o.forward_passes = cfg.n_aug
            if with_dsc:
                clean = nets.forward(net, x)
                o.dsc = _case_dsc(clean.probs[0].argmax(axis=0), case, n_classes)
        elif method == "regcnn":
            baseline = ctx.net_for("baseline")
            regressor = ctx.net_for("regcnn")
            base_mask = nets.forward(baseline, x)
            labels = base_mask.probs[0].argmax(axis=0)
            onehot = np.eye(n_classes, dtype=np.float32)[labels].transpose(3, 0, 1, 2)
            t0 = time.perf_counter()
            o.interval = pimethods.regcnn_intervals(regressor, x, onehot)
            o.wall_time_s = time.perf_counter() - t0
            o.forward_passes = 1
            o.prerequisite_passes = 1
            if with_dsc:
                o.dsc = _case_dsc(labels, case, n_classes)
        else:
            raise ConfigError(f"unknown method '{method}'")
        out.append(o)
    return out


def _ct_thresholds(cfg: ExperimentConfig) -> np.ndarray:
    return np.linspace(0.01, 0.99, cfg.n_thresholds)


def fit_ct_temperature(cfg: ExperimentConfig, ctx: MethodContext,
                       cases: list[phantom.PhantomCase]) -> calibration.Temperature:
    """Fit the softmax temperature on a seeded voxel subsample of the fold."""
    net = ctx.net_for("baseline")
    rng = np.random.default_rng(derive_seed(cfg.seed or 0, "temperature", ctx.run))
    quota = max(1, TEMPERATURE_SAMPLE_VOXELS // max(1, len(cases)))
    logit_rows, label_rows = [], []
    for case in cases:
        mask = nets.forward(net, case.intensities)
        flat_logits = mask.logits[0].reshape(mask.logits.shape[1], -1).T  # [V, N]
        flat_labels = case.labels.reshape(-1)
        pick = rng.choice(flat_labels.size, size=min(quota, flat_labels.size), replace=False)
        logit_rows.append(flat_logits[pick])
        label_rows.append(flat_labels[pick])
    return calibration.fit_temperature(np.concatenate(logit_rows), np.concatenate(label_rows))


# -- calibration ----------------------------------------------------------------


def _outcome_matrices(outcomes: list[CaseOutcome], kind: str):
    if kind == "interval":
        l = np.stack([o.interval.lower_mL for o in outcomes])
        u = np.stack([o.interval.upper_mL for o in outcomes])
        y = np.stack([o.truth for o in outcomes])
        return l, u, y
    mu = np.stack([o.stats.mu_mL for o in outcomes])
    sg = np.stack([o.stats.sigma_mL for o in outcomes])
    y = np.stack([o.truth for o in outcomes])
    return mu, sg, y


def _histogram_summary(scores: np.ndarray) -> dict:
    finite = scores[np.isfinite(scores)]
    if finite.size == 0:
        return {"n_finite": 0, "n_infinite": int(scores.size)}
    counts, edges = np.histogram(finite, bins=10)
    return {
        "n_finite": int(finite.size),
        "n_infinite": int(scores.size - finite.size),
        "min": float(finite.min()),
        "max": float(finite.max()),
        "mean": float(finite.mean()),
        "bin_edges": [float(e) for e in edges],
        "bin_counts": [int(c) for c in counts],
    }


def run_calibrate(cfg: ExperimentConfig, method: str, run: int = 0) -> calibration.CalibrationFactor:
    """Fit per-class corrective factors on the calibration fold and persist."""
    if method not in ALL_METHODS:
        raise ConfigError(f"unknown method '{method}'")
    spec, split = _load_split(cfg)
    if not split.calibration_ids:
        raise MissingArtifactError("calibration fold is empty")
    cases = phantom.load_cases(cfg.dataset_dir, split.calibration_ids)
    ctx = MethodContext(cfg, run)
    temp = None
    if method == "ct":
        temp = fit_ct_temperature(cfg, ctx, cases)
    outcomes = collect_outcomes(
        method, ctx, cases, with_dsc=False, temperature=temp.tau if temp else None
    )
    if method in DIRECT_METHODS:
        l, u, y = _outcome_matrices(outcomes, "interval")
        factor = calibration.fit_additive_q(l, u, y, cfg.alpha)
        scores = calibration.additive_scores(l, u, y)
    else:
        mu, sg, y = _outcome_matrices(outcomes, "stats")
        factor = calibration.fit_multiplicative_q(mu, sg, y, cfg.alpha)
        scores = calibration.multiplicative_scores(mu, sg, y)

    class_names = list(cfg.phantom.class_names[1:])
    payload = {
        "method": method,
        "mode": factor.mode,
        "alpha": factor.alpha,
        "n_cal": factor.n_cal,
        "classes": [
            {
                "class_name": class_names[c],
                "q": float(factor.q[c]),
                "unbounded": bool(factor.unbounded[c]),
                "score_histogram": _histogram_summary(scores[:, c]),
            }
            for c in range(len(class_names))
        ],
    }
    if temp is not None:
        payload["temperature"] = {
            "tau": temp.tau,
            "nll_before": temp.nll_before,
            "nll_after": temp.nll_after,
            "degenerate": temp.degenerate,
        }
    path = cfg.calibration_path(method, run)
    os.makedirs(os.path.dirname(path), exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return factor


def load_calibration(cfg: ExperimentConfig, method: str, run: int = 0):
    """Read a persisted factor; returns (CalibrationFactor, temperature|None)."""
    path = cfg.calibration_path(method, run)
    if not os.path.exists(path):
        raise MissingArtifactError(f"no calibration for '{method}' under {path}; run `calibrate`")
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    factor = calibration.CalibrationFactor(
        q=np.array([c["q"] for c in payload["classes"]]),
        mode=payload["mode"],
        alpha=payload["alpha"],
        n_cal=payload["n_cal"],
        unbounded=np.array([c["unbounded"] for c in payload["classes"]]),
    )
    temp = payload.get("temperature", {}).get("tau") if "temperature" in payload else None
    return factor, temp


# -- evaluation -----------------------------------------------------------------


def _final_interval(o: CaseOutcome, factor: calibration.CalibrationFactor) -> pimethods.VolumeInterval:
    source = o.interval if o.interval is not None else o.stats
    return calibration.apply_calibration(source, factor)


def _pi_record(o: CaseOutcome, interval: pimethods.VolumeInterval) -> pimethods.PIRecord:
    return pimethods.PIRecord(
        case_id=o.case_id,
        interval=interval,
        truth_mL=o.truth,
        wall_time_s=o.wall_time_s,
        forward_passes=o.forward_passes,
        prerequisite_passes=o.prerequisite_passes,
        dsc=o.dsc,
    )


def _jsonl_line(method: str, rec: pimethods.PIRecord, class_names: list[str]) -> str:
    iv = rec.interval
    per_class = []
    for c, name in enumerate(class_names):
        per_class.append(
            {
                "class_name": name,
                "lower_mL": float(iv.lower_mL[c]),
                "mean_mL": float(iv.mean_mL[c]),
                "upper_mL": float(iv.upper_mL[c]),
                "truth_mL": float(rec.truth_mL[c]),
                "covered": bool(iv.lower_mL[c] <= rec.truth_mL[c] <= iv.upper_mL[c]),
                "unbounded": bool(iv.unbounded[c]),
                "order_violation": bool(iv.order_violations[c])
                if iv.order_violations is not None
                else None,
                "dsc": float(rec.dsc[c]) if rec.dsc is not None else None,
            }
        )
    return json.dumps(
        {
            "case_id": rec.case_id,
            "method": method,
            "calibrated": iv.calibrated,
            "classes": per_class,
            "wall_time_s": rec.wall_time_s,
            "forward_passes": rec.forward_passes,
            "prerequisite_passes": rec.prerequisite_passes,
        },
        sort_keys=True,
    )


def method_rows(
    method: str,
    records: list[pimethods.PIRecord],
    class_names: list[str],
    target: float,
) -> list[metrics.MethodClassResult]:
    rows = []
    for c, name in enumerate(class_names):
        lowers = np.array([r.interval.lower_mL[c] for r in records])
        uppers = np.array([r.interval.upper_mL[c] for r in records])
        means = np.array([r.interval.mean_mL[c] for r in records])
        truths = np.array([r.truth_mL[c] for r in records])
        dscs = np.array([r.dsc[c] for r in records if r.dsc is not None])
        rows.append(
            metrics.score_method_class(
                method, name, lowers, uppers, means, truths, dscs, records, target
            )
        )
    return rows


def order_violation_rate(records: list[pimethods.PIRecord]) -> float:
    """Fraction of (case, class) triples that were disordered before sorting."""
    flags = [
        r.interval.order_violations
        for r in records
        if r.interval.order_violations is not None
    ]
    if not flags:
        return 0.0
    return float(np.mean(np.stack(flags)))


def run_evaluate(cfg: ExperimentConfig, run: int = 0,
                 methods: tuple[str, ...] | None = None):
    """Evaluate calibrated methods on the test fold; emit reports.

    Returns {method: list[PIRecord]} alongside writing report.csv,
    report.txt, fig2_data.csv and pi_records.jsonl under reports/run<k>/.
    """
    spec, split = _load_split(cfg)
    methods = tuple(methods or cfg.methods)
    cases = phantom.load_cases(cfg.dataset_dir, split.test_ids)
    if not cases:
        raise MissingArtifactError("test fold is empty")
    ctx = MethodContext(cfg, run)
    class_names = list(cfg.phantom.class_names[1:])
    target = 1.0 - cfg.alpha

    all_rows: list[metrics.MethodClassResult] = []
    per_method_records: dict[str, list[pimethods.PIRecord]] = {}
    jsonl_lines: list[str] = []
    for method in methods:
        factor, tau = load_calibration(cfg, method, run)
        outcomes = collect_outcomes(method, ctx, cases, with_dsc=True, temperature=tau)
        records = [_pi_record(o, _final_interval(o, factor)) for o in outcomes]
        per_method_records[method] = records
        all_rows.extend(method_rows(method, records, class_names, target))
        jsonl_lines.extend(_jsonl_line(method, r, class_names) for r in records)

    rep_dir = cfg.reports_dir(run)
    os.makedirs(rep_dir, exist_ok=True)
    with open(os.path.join(rep_dir, "pi_records.jsonl"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(jsonl_lines) + "\n")
    with open(os.path.join(rep_dir, "report.csv"), "w", encoding="utf-8") as fh:
        fh.write(metrics.report_csv(all_rows))

    extra = []
    for method in methods:
        recs = per_method_records[method]
        passes, wall = metrics.cost_summary(recs)
        extra.append(f"{method}: mean forward passes {passes:.1f}, mean wall {wall:.4f}s")
        rate = order_violation_rate(recs)
        if any(r.interval.order_violations is not None for r in recs):
            extra.append(f"{method}: head-order violation rate {100 * rate:.1f}%")
    if "triad" in methods and "mc" in methods:
        for c, name in enumerate(class_names):
            wa = [r.interval.upper_mL[c] - r.interval.lower_mL[c] for r in per_method_records["triad"]]
            wb = [r.interval.upper_mL[c] - r.interval.lower_mL[c] for r in per_method_records["mc"]]
            finite = [(a, b) for a, b in zip(wa, wb) if np.isfinite(a) and np.isfinite(b)]
            if len(finite) >= 2:
                t, p = metrics.paired_width_ttest(*zip(*finite))
                extra.append(f"width t-test triad vs mc [{name}]: t={t:.3f} p={p:.4f}")
    with open(os.path.join(rep_dir, "report.txt"), "w", encoding="utf-8") as fh:
        fh.write(metrics.report_text(all_rows, extra))

    fig_method = "triad" if "triad" in methods else methods[0]
    with open(os.path.join(rep_dir, "fig2_data.csv"), "w", encoding="utf-8") as fh:
        fh.write("case_id,class,truth_mL,lower_mL,mean_mL,upper_mL,covered\n")
        for r in per_method_records[fig_method]:
            iv = r.interval
            for c, name in enumerate(class_names):
                covered = bool(iv.lower_mL[c] <= r.truth_mL[c] <= iv.upper_mL[c])
                fh.write(
                    f"{r.case_id},{name},{r.truth_mL[c]:.6f},{iv.lower_mL[c]:.6f},"
                    f"{iv.mean_mL[c]:.6f},{iv.upper_mL[c]:.6f},{covered}\n"
                )

    _write_provenance(cfg, run)
    return per_method_records, all_rows


def _sha256_file(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(65536), b""):
            h.update(block)
    return h.hexdigest()


def _write_provenance(cfg: ExperimentConfig, run: int) -> None:
    import torch

    artifacts = {}
    for variant in ("baseline", "dropout", "triad", "regcnn"):
        path = os.path.join(cfg.model_dir(variant, run), nets.MODEL_BIN)
        if os.path.exists(path):
            artifacts[os.path.relpath(path, cfg.out_dir)] = _sha256_file(path)
    cal_root = os.path.join(cfg.out_dir, "calibration", f"run{run}")
    if os.path.isdir(cal_root):
        for name in sorted(os.listdir(cal_root)):
            path = os.path.join(cal_root, name)
            artifacts[os.path.relpath(path, cfg.out_dir)] = _sha256_file(path)
    payload = {
        "config": cfg.to_dict(),
        "run": run,
        "versions": {
            "volpi": __version__,
            "numpy": np.__version__,
            "torch": torch.__version__,
        },
        "artifact_sha256": artifacts,
    }
    with open(os.path.join(cfg.out_dir, "run.json"), "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


# -- full experiment and gamma sweep ---------------------------------------------


def run_experiment(cfg: ExperimentConfig, force_gen: bool = False):
    """Generate (if needed), train all required variants, calibrate and
    evaluate every configured method; returns the run-0 evaluation output."""
    if not os.path.isdir(cfg.dataset_dir) or not os.listdir(cfg.dataset_dir):
        run_gen(cfg, force=force_gen)
    needed = set()
    for m in cfg.methods:
        needed.update(
            {"triad": ("triad",), "ct": ("baseline",), "tta": ("baseline",),
             "mc": ("dropout",), "regcnn": ("baseline", "regcnn")}[m]
        )
    ordered = [v for v in ("baseline", "dropout", "triad", "regcnn") if v in needed]
    for variant in ordered:
        run_train(cfg, variant)
    result = None
    per_run_rows = []
    for run in range(cfg.n_runs):
        for method in cfg.methods:
            run_calibrate(cfg, method, run)
        records, rows = run_evaluate(cfg, run)
        per_run_rows.append(rows)
        if run == 0:
            result = (records, rows)
    if cfg.n_runs > 1:
        agg = metrics.aggregate_runs(per_run_rows)
        with open(os.path.join(cfg.out_dir, "reports", "aggregate.csv"), "w", encoding="utf-8") as fh:
            fh.write(agg)
    return result


DEFAULT_SWEEP_GAMMAS = (0.1, 0.2, 0.3, 0.4)


def run_sweep_gamma(cfg: ExperimentConfig, gammas=DEFAULT_SWEEP_GAMMAS) -> str:
    """Train/calibrate/evaluate one triad net per gamma; merged CSV report.

    Each gamma runs as a child experiment under out_dir/sweep/gamma_<g>/
    sharing the parent dataset, so per-gamma checkpoints and reports stay
    separate.
    """
    for g in gammas:
        if not 0.0 < g < 0.5:
            raise ConfigError(f"gamma {g} outside (0, 0.5)")
    _load_split(cfg)  # dataset must already exist
    lines = [
        "gamma,class_name,n_cases,delta_f_percent,width_mL,unbounded_count,"
        "mae_mL,dsc,order_violation_rate_percent"
    ]
    for g in gammas:
        sub = replace(
            cfg,
            out_dir=os.path.join(cfg.out_dir, "sweep", f"gamma_{g:.2f}"),
            dataset_root=cfg.dataset_dir,
            gamma=g,
            methods=("triad",),
            n_runs=1,
        )
        run_train(sub, "triad")
        run_calibrate(sub, "triad")
        records, rows = run_evaluate(sub, methods=("triad",))
        rate = 100.0 * order_violation_rate(records["triad"])
        for row in rows:
            lines.append(
                f"{g:.2f},{row.class_name},{row.n_cases},{row.delta_f_percent:.6f},"
                f"{row.width_mL:.6f},{row.unbounded_count},{row.mae_mL:.6f},"
                f"{row.dsc:.6f},{rate:.6f}"
            )
    out_path = os.path.join(cfg.out_dir, "sweep_gamma.csv")
    os.makedirs(cfg.out_dir, exist_ok=True)
    with open(out_path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    return out_path
