"""Experiment lifecycle behind the CLI: prepare, train, attack, eval, export-reps, report.

Everything a stage reads was written by an earlier stage into the run
directory, so stages can be rerun on their own. Output bytes depend only on
the config and seed, except for a single ``generated_at`` line per report file.
"""

from __future__ import annotations

import csv
import datetime as _dt
import hashlib
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from .attacks import (
    boundary_attack,
    cw,
    fgsm,
    lp_norm,
    mim,
    nes_attack,
    norm_name,
    objective_values,
    pgd,
    project,
    write_query_log,
)
from .attacks.whitebox import AttackConfig, AttackObjective
from .config import ConfigError, ExperimentConfig, canonical_json
from .datasets import DataError, Dataset, from_csv, load_idx, stratified_split, synth_blobs, to_csv
from .detector import (
    DetectorModel,
    adaptive_objective,
    base_objective,
    calibrate_thresholds,
    classify,
    export_representations,
    load_detector,
    make_centers,
    probabilities,
    save_detector,
    train_benign,
    train_separating,
    train_vanilla,
)
from .metrics import EvalReport, eroc_for_detector, eligible_mask, success_mask, sweep_worst_case
from .tensor import init_mlp, write_npz

SPLITS = ("train", "calib", "test")
EROC_NEGATIVES = "benign test examples with the same predicted class"


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _timestamp() -> str:
    return _dt.datetime.now(_dt.timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise DataError(f"missing artifact {path}; run the earlier stage first") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"corrupt artifact {path}: {exc}") from exc


class Run:
    """Paths inside one run directory."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.root = Path(cfg.out)

    def data(self, split):
        return self.root / "data" / f"{split}.csv"

    @property
    def manifest(self):
        return self.root / "data" / "manifest.json"

    @property
    def checkpoint(self):
        return self.root / "model.npz"

    @property
    def curve(self):
        return self.root / "train_curve.csv"

    def cell_dir(self, name):
        return self.root / "attacks" / name

    @property
    def attack_index(self):
        return self.root / "attacks" / "index.json"

    @property
    def report_json(self):
        return self.root / "report.json"

    @property
    def report_csv(self):
        return self.root / "table.csv"

    @property
    def reps(self):
        return self.root / "reps.csv"


# ---------------------------------------------------------------- prepare


def build_splits(cfg: ExperimentConfig):
    ds = cfg.dataset
    sizes = [ds.train_per_class, ds.calib_per_class, ds.test_per_class]
    if ds.kind == "mnist":
        full = load_idx(ds.images, ds.labels, ds.num_classes)
        sources = {Path(ds.images).name: sha256_file(ds.images), Path(ds.labels).name: sha256_file(ds.labels)}
    else:
        if sum(sizes) > ds.per_class_n:
            raise ConfigError("blob split sizes exceed dataset.per_class_n")
        full = synth_blobs(ds.num_classes, ds.per_class_n, ds.dim, ds.spread, cfg.seed)
        sources = {}
    if sum(sizes) > full.class_counts().min():
        raise DataError(f"split sizes {sizes} exceed the smallest class ({full.class_counts().min()} examples)")
    return dict(zip(SPLITS, stratified_split(full, sizes, cfg.seed))), sources


def cmd_prepare(cfg: ExperimentConfig) -> dict:
    run = Run(cfg)
    splits, sources = build_splits(cfg)
    run.manifest.parent.mkdir(parents=True, exist_ok=True)
    files = {}
    for name, part in splits.items():
        to_csv(part, run.data(name))
        files[name] = {"path": run.data(name).name, "sha256": sha256_file(run.data(name)), "n": len(part)}
    manifest = {
        "config_hash": cfg.config_hash(),
        "kind": cfg.dataset.kind,
        "num_classes": cfg.dataset.num_classes,
        "input_dim": splits["train"].input_dim,
        "sources": sources,
        "splits": files,
    }
    _write_json(run.manifest, manifest)
    return manifest


def load_split(run: Run, split: str) -> Dataset:
    manifest = _read_json(run.manifest)
    entry = manifest["splits"].get(split)
    path = run.data(split)
    if entry is None or not path.is_file():
        raise DataError(f"split {split!r} missing; run prepare first")
    if sha256_file(path) != entry["sha256"]:
        raise DataError(f"{path} does not match its manifest checksum")
    return from_csv(path, manifest["num_classes"])


def input_checksums(run: Run) -> dict:
    manifest = _read_json(run.manifest)
    out = {f"data/{v['path']}": v["sha256"] for v in manifest["splits"].values()}
    out.update({f"source/{k}": v for k, v in manifest["sources"].items()})
    return out


# ---------------------------------------------------------------- train


def build_detector(cfg: ExperimentConfig, train: Dataset) -> DetectorModel:
    k, d = train.num_classes, train.input_dim
    widths = [d, *cfg.hidden, k + 1]
    if cfg.mode == "vanilla":
        return train_vanilla(init_mlp(widths, num_classes=k, seed=cfg.seed), train, _seeded(cfg.train, cfg.seed))
    centers = make_centers(k)
    model = init_mlp(widths, seed=cfg.seed)
    history = []
    if cfg.warmup_epochs:
        warm = train_benign(model, centers, train, replace(_seeded(cfg.train, cfg.seed), epochs=cfg.warmup_epochs))
        model, history = warm.model, list(warm.history)
    det = train_separating(model, centers, train, _seeded(cfg.train, cfg.seed + 1), cfg.mode)
    det.history = history + list(det.history)
    return det


def _seeded(train_cfg, seed):
    return replace(train_cfg, seed=seed, inner_attack=train_cfg.inner_attack.replace(seed=seed))


def cmd_train(cfg: ExperimentConfig) -> DetectorModel:
    run = Run(cfg)
    train = load_split(run, "train")
    calib = load_split(run, "calib")
    det = build_detector(cfg, train)
    # the checkpoint carries thresholds at the strictest operating point
    det = calibrate_thresholds(det, calib, cfg.fpr_percents[0])
    save_detector(run.checkpoint, det)
    with open(run.curve, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "phase", "loss"])
        for i, v in enumerate(det.history):
            phase = "warmup" if cfg.mode != "vanilla" and i < cfg.warmup_epochs else "main"
            w.writerow([i + 1, phase, repr(float(v))])
    return det


def load_checkpoint(run: Run) -> DetectorModel:
    if not run.checkpoint.is_file():
        raise DataError(f"missing checkpoint {run.checkpoint}; run train first")
    return load_detector(run.checkpoint)


# ---------------------------------------------------------------- attack


def _objective(det: DetectorModel, spec) -> AttackObjective:
    if spec.objective == "adaptive":
        if spec.base == "center" and det.mode == "vanilla":
            raise ConfigError(f"attack {spec.name}: center objective needs a center-based detector")
        return adaptive_objective(det, spec.base, spec.kappa)
    if spec.objective == "center" and det.mode == "vanilla":
        raise ConfigError(f"attack {spec.name}: center objective needs a center-based detector")
    return base_objective(det, spec.objective, spec.kappa)


def attack_targets(y, k, seed):
    rng = np.random.default_rng([seed, 7])
    return (np.asarray(y) + rng.integers(1, k, size=len(y))) % k


def _cell_seed(cfg: ExperimentConfig, cell: int, alpha_idx: int) -> int:
    return int(np.random.default_rng([cfg.seed, 11, cell, alpha_idx]).integers(2**31))


def run_attack(det: DetectorModel, spec, x, y, alpha, seed, train: Dataset | None = None, train_cfg=None):
    """One (attack, alpha) cell. Returns ``(x_adv, queries, final_objective, query_log)``."""
    k = det.k
    target = attack_targets(y, k, seed) if spec.targeted else None
    n = len(y)
    queries = np.zeros(n, dtype=np.int64)
    log = None
    if spec.kind in ("fgsm", "pgd", "mim", "cw"):
        obj = _objective(det, spec)
        acfg = spec.attack_config(alpha, seed)
        if spec.kind == "fgsm":
            x_adv = fgsm(det.model, obj, x, y, spec.epsilon, spec.norm, target)
        elif spec.kind == "pgd":
            x_adv = pgd(det.model, obj, x, y, acfg, target)
        elif spec.kind == "mim":
            x_adv = mim(det.model, obj, x, y, acfg, target)
        else:
            x_adv = cw(det.model, obj, x, y, acfg, target, success_fn=lambda xa: success_mask(det, xa, y, target))
            obj = obj.with_kappa(0.0)
        final = objective_values(det.model, obj, x_adv, y, target)
    elif spec.kind == "nes":
        acfg = spec.attack_config(alpha, seed)
        res = nes_attack(lambda pts: probabilities(det, pts), x, y, acfg, spec.sigma, spec.samples, target, spec.max_queries)
        x_adv, queries = res.x_adv, res.queries
        anchor = target if spec.targeted else y
        p = probabilities(det, x_adv)[np.arange(n), anchor]
        final = (-1.0 if spec.targeted else 1.0) * np.log(np.maximum(p, 1e-300))
    elif spec.kind == "boundary":
        res = boundary_attack(lambda pts: classify(det, pts), x, y, spec.boundary_iters, seed, strict=False)
        # the walk itself is unconstrained; the budget applies to the returned point
        x_adv = np.clip(x + project(res.x_adv - x, spec.norm, spec.epsilon), 0.0, 1.0)
        queries = res.queries
        final = np.linalg.norm(res.x_adv - x, axis=1)
        log = res.log
    elif spec.kind == "transfer":
        surrogate = train_vanilla(
            init_mlp([x.shape[1], *det_hidden(det), k + 1], num_classes=k, seed=seed), train, train_cfg
        ).model
        obj = AttackObjective("ce" if spec.objective in ("adaptive", "center") else spec.objective, kappa=spec.kappa)
        x_adv = pgd(surrogate, obj, x, y, spec.attack_config(alpha, seed), target)
        final = objective_values(surrogate, obj, x_adv, y, target)
    else:  # pragma: no cover - rejected by config validation
        raise ConfigError(f"unknown attack kind {spec.kind}")
    return np.asarray(x_adv), queries, np.asarray(final, dtype=np.float64), log, target


def det_hidden(det: DetectorModel):
    return [layer.weight.shape[0] for layer in det.model.layers[:-1]]


def _alphas(spec):
    # fgsm and boundary have no step size; one cell each
    return (spec.epsilon,) if spec.kind in ("fgsm", "boundary") else spec.alphas


def cmd_attack(cfg: ExperimentConfig, threads: int = 1) -> dict:
    run = Run(cfg)
    det = load_checkpoint(run)
    test = load_split(run, "test")
    ok = eligible_mask(det, test.inputs, test.labels)
    if not ok.any():
        raise DataError("no eligible test examples (none correctly classified and unflagged)")
    idx = np.flatnonzero(ok)
    x, y = test.inputs[idx], test.labels[idx]
    train = load_split(run, "train") if any(a.kind == "transfer" for a in cfg.attacks) else None

    jobs = [(ci, spec, ai, alpha) for ci, spec in enumerate(cfg.attacks) for ai, alpha in enumerate(_alphas(spec))]

    def work(job):
        ci, spec, ai, alpha = job
        seed = _cell_seed(cfg, ci, ai)
        x_adv, queries, final, log, target = run_attack(det, spec, x, y, alpha, seed, train, _seeded(cfg.train, seed))
        out = run.cell_dir(spec.name)
        out.mkdir(parents=True, exist_ok=True)
        arrays = {"x_adv": x_adv, "index": idx.astype(np.int64), "labels": y}
        if target is not None:
            arrays["target"] = np.asarray(target, dtype=np.int64)
        write_npz(out / f"alpha{ai}.npz", arrays)
        hit = success_mask(det, x_adv, y, target)
        used = lp_norm(x_adv - x, spec.norm)
        with open(out / f"alpha{ai}.jsonl", "w") as fh:
            for i in range(len(y)):
                rec = {
                    "index": int(idx[i]),
                    "success": bool(hit[i]),
                    "norm_used": float(used[i]),
                    "final_objective": float(final[i]),
                    "queries": int(queries[i]),
                }
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        if log is not None:
            write_query_log(out / f"alpha{ai}_queries.csv", log)
        return spec.name, ai, float(alpha), (out / f"alpha{ai}.npz")

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(work, jobs))
    else:
        results = [work(j) for j in jobs]

    index = {"config_hash": cfg.config_hash(), "checkpoint_sha256": sha256_file(run.checkpoint), "cells": []}
    for name, ai, alpha, path in results:
        index["cells"].append(
            {"attack": name, "alpha_index": ai, "alpha": alpha, "file": f"{name}/{path.name}", "sha256": sha256_file(path)}
        )
    _write_json(run.attack_index, index)
    return index


def load_adversarials(run: Run, entry: dict):
    path = run.root / "attacks" / entry["file"]
    if not path.is_file():
        raise DataError(f"missing adversarial set {path}; run attack first")
    if sha256_file(path) != entry["sha256"]:
        raise DataError(f"{path} does not match the attack index checksum")
    with np.load(path, allow_pickle=False) as f:
        return {k: f[k] for k in f.files}


# ---------------------------------------------------------------- eval


def evaluate_cell(dets: dict, test: Dataset, spec, alpha, arrays, seed) -> EvalReport:
    """ASR at every calibrated ``p`` plus EROC for one adversarial set."""
    x_adv, y = arrays["x_adv"], arrays["labels"]
    target = arrays.get("target")
    asr_by_p = {p: float(success_mask(det, x_adv, y, target).mean()) for p, det in dets.items()}
    ref = dets[min(dets)]
    value, aucs, weights = eroc_for_detector(ref, test.inputs, x_adv)
    return EvalReport(
        attack_name=spec.name,
        norm=norm_name(spec.norm),
        epsilon=float(spec.epsilon),
        targeted=bool(spec.targeted),
        alpha=float(alpha),
        iters=int(spec.iters) if spec.kind not in ("fgsm", "boundary") else (1 if spec.kind == "fgsm" else spec.boundary_iters),
        asr_by_p=asr_by_p,
        eroc=value,
        per_class_auc=aucs,
        per_class_weight=weights,
        n_eligible=int(len(y)),
        seed=int(seed),
        notes={"kind": spec.kind, "objective": spec.objective},
    )


def cmd_eval(cfg: ExperimentConfig) -> dict:
    run = Run(cfg)
    det = load_checkpoint(run)
    calib = load_split(run, "calib")
    test = load_split(run, "test")
    index = _read_json(run.attack_index)
    dets = {p: calibrate_thresholds(det, calib, p) for p in cfg.fpr_percents}
    by_name = {a.name: a for a in cfg.attacks}
    reports = []
    for name, spec in by_name.items():
        entries = sorted((e for e in index["cells"] if e["attack"] == name), key=lambda e: e["alpha_index"])
        if not entries:
            raise DataError(f"no adversarial sets for attack {name!r}; run attack first")
        loaded = {e["alpha"]: load_adversarials(run, e) for e in entries}
        best = sweep_worst_case(
            lambda alpha, _k: evaluate_cell(dets, test, spec, alpha, loaded[alpha], cfg.seed),
            [e["alpha"] for e in entries],
            spec.iters,
        )
        best.notes["alphas_swept"] = [e["alpha"] for e in entries]
        reports.append(best)

    inputs = input_checksums(run)
    inputs["model.npz"] = sha256_file(run.checkpoint)
    inputs["attacks/index.json"] = sha256_file(run.attack_index)
    body = {
        "generated_at": _timestamp(),
        "config_hash": cfg.config_hash(),
        "config": json.loads(canonical_json(cfg.effective())),
        "inputs": inputs,
        "mode": det.mode,
        "thresholds": {_pkey(p): [float(t) for t in d.thresholds] for p, d in dets.items()},
        "eroc_negatives": EROC_NEGATIVES,
        "eligibility": f"correct and unflagged at p={_pkey(min(dets))}",
        "reports": [r.to_dict() for r in reports],
    }
    _write_json(run.report_json, body)
    write_table(run.report_csv, reports, body["generated_at"], body["config_hash"], cfg.fpr_percents)
    return body


def _pkey(p) -> str:
    p = float(p)
    return str(int(p)) if p == int(p) else repr(p)


TABLE_COLUMNS = ["attack", "norm", "eps", "targeted", "asr1", "asr2", "asr5", "eroc"]


def write_table(path, reports, generated_at, config_hash, fprs) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# generated_at={generated_at}\n")
        fh.write(f"# config_hash={config_hash}\n")
        w = csv.writer(fh)
        w.writerow(TABLE_COLUMNS)
        for r in reports:
            asr = {float(k): v for k, v in r.asr_by_p.items()}
            cells = [asr.get(p) for p in (1.0, 2.0, 5.0)]
            w.writerow(
                [r.attack_name, r.norm, repr(r.epsilon), int(r.targeted)]
                + ["" if c is None else repr(c) for c in cells]
                + [repr(r.eroc)]
            )


# ---------------------------------------------------------------- export / report


def cmd_export_reps(cfg: ExperimentConfig) -> Path:
    """Benign test rows plus, when attacks exist, the first cell's adversarial rows."""
    run = Run(cfg)
    det = load_checkpoint(run)
    test = load_split(run, "test")
    xs, labels, flags = [test.inputs], [test.labels], [np.zeros(len(test), dtype=np.int64)]
    if run.attack_index.is_file():
        index = _read_json(run.attack_index)
        if index["cells"]:
            arrays = load_adversarials(run, index["cells"][0])
            xs.append(arrays["x_adv"])
            labels.append(arrays["labels"])
            flags.append(np.ones(len(arrays["labels"]), dtype=np.int64))
    export_representations(det, np.concatenate(xs), np.concatenate(labels), np.concatenate(flags), run.reps)
    return run.reps


def cmd_report(cfg: ExperimentConfig) -> str:
    """Render the evaluated table as fixed-width text (also written to report.txt)."""
    run = Run(cfg)
    body = _read_json(run.report_json)
    lines = [f"mode={body['mode']} config={body['config_hash'][:12]}"]
    header = f"{'attack':<16}{'norm':<6}{'eps':>8}{'T':>3}" + "".join(f"{'ASR-' + p:>9}" for p in _asr_keys(body)) + f"{'EROC':>9}"
    lines.append(header)
    for r in body["reports"]:
        row = f"{r['attack_name']:<16}{r['norm']:<6}{r['epsilon']:>8.3g}{('T' if r['targeted'] else 'U'):>3}"
        row += "".join(f"{r['asr_by_p'][p]:>9.3f}" for p in _asr_keys(body))
        row += f"{r['eroc']:>9.3f}"
        lines.append(row)
    text = "\n".join(lines) + "\n"
    (run.root / "report.txt").write_text(text)
    return text


def _asr_keys(body):
    return sorted(body["reports"][0]["asr_by_p"], key=float) if body["reports"] else []


def set_threads(n: int) -> None:
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMBA_NUM_THREADS"):
        os.environ.setdefault(var, str(n))
