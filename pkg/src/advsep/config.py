"""Experiment configuration loaded from YAML."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import yaml

from .attacks.whitebox import AttackConfig, norm_name, parse_norm
from .detector import MODES, TrainConfig

ATTACK_KINDS = ("fgsm", "pgd", "mim", "cw", "nes", "boundary", "transfer")
OBJECTIVES = ("adaptive", "ce", "cw", "center")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetSpec:
    kind: str = "blobs"
    images: str | None = None
    labels: str | None = None
    num_classes: int = 3
    dim: int = 16
    spread: float = 0.035
    per_class_n: int = 700
    train_per_class: int = 300
    calib_per_class: int = 300
    test_per_class: int = 100


@dataclass(frozen=True)
class AttackSpec:
    name: str
    kind: str = "pgd"
    objective: str = "adaptive"
    base: str = "cw"
    norm: float = float("inf")
    epsilon: float = 0.3
    alphas: tuple = (0.01,)
    iters: int = 200
    targeted: bool = False
    momentum_decay: float = 0.9
    restarts: int = 1
    kappa: float = 0.0
    sigma: float = 0.001
    samples: int = 50
    max_queries: int | None = None
    boundary_iters: int = 1000

    def attack_config(self, alpha: float, seed: int) -> AttackConfig:
        return AttackConfig(
            norm=self.norm,
            epsilon=self.epsilon,
            alpha=alpha,
            iters=self.iters,
            targeted=self.targeted,
            momentum_decay=self.momentum_decay if self.kind == "mim" else 0.0,
            restarts=self.restarts,
            seed=seed,
        )


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int
    out: str
    dataset: DatasetSpec
    hidden: tuple
    mode: str
    train: TrainConfig
    warmup_epochs: int
    attacks: tuple
    fpr_percents: tuple = (1.0, 2.0, 5.0)
    source: dict = field(default_factory=dict, compare=False)

    def config_hash(self) -> str:
        """sha256 over the canonical JSON of the effective settings."""
        return hashlib.sha256(canonical_json(self.effective()).encode()).hexdigest()

    def effective(self) -> dict:
        d = {
            "seed": self.seed,
            "dataset": asdict(self.dataset),
            "hidden": list(self.hidden),
            "mode": self.mode,
            "train": asdict(self.train),
            "warmup_epochs": self.warmup_epochs,
            "attacks": [asdict(a) for a in self.attacks],
            "fpr_percents": list(self.fpr_percents),
        }
        d["train"]["inner_attack"]["norm"] = norm_name(self.train.inner_attack.norm)
        for a in d["attacks"]:
            a["norm"] = norm_name(a["norm"])
            a["alphas"] = list(a["alphas"])
        return d


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _take(section: dict, name: str, allowed: set) -> dict:
    if section is None:
        return {}
    if not isinstance(section, dict):
        raise ConfigError(f"'{name}' must be a mapping")
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) in '{name}': {', '.join(sorted(unknown))}")
    return dict(section)


def _fields(cls) -> set:
    return set(cls.__dataclass_fields__)


def _resolve(base_dir: Path, p):
    if p is None:
        return None
    path = Path(p)
    return str(path if path.is_absolute() else (base_dir / path))


def parse_config(raw: dict, base_dir=".") -> ExperimentConfig:
    """Validate a raw mapping. Relative paths resolve against ``base_dir``."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")
    top = _take(raw, "config", {"seed", "out", "dataset", "model", "detector", "train", "attacks", "metrics"})
    if "seed" not in top or isinstance(top["seed"], bool) or not isinstance(top["seed"], int):
        raise ConfigError("'seed' is mandatory and must be an integer")
    base_dir = Path(base_dir)
    try:
        ds = DatasetSpec(**_take(top.get("dataset"), "dataset", _fields(DatasetSpec)))
        if ds.kind not in ("mnist", "blobs"):
            raise ConfigError(f"dataset.kind must be mnist or blobs, got {ds.kind!r}")
        if ds.kind == "mnist":
            if not ds.images or not ds.labels:
                raise ConfigError("mnist dataset needs 'images' and 'labels' paths")
            ds = DatasetSpec(**{**asdict(ds), "images": _resolve(base_dir, ds.images), "labels": _resolve(base_dir, ds.labels)})
            for p in (ds.images, ds.labels):
                if not Path(p).is_file():
                    raise ConfigError(f"dataset file not found: {p}")
        for name in ("train_per_class", "calib_per_class", "test_per_class"):
            if getattr(ds, name) < 1:
                raise ConfigError(f"dataset.{name} must be >= 1")

        model = _take(top.get("model"), "model", {"hidden"})
        hidden = tuple(int(h) for h in model.get("hidden", (64, 64)))
        if any(h < 1 for h in hidden):
            raise ConfigError("model.hidden widths must be positive")

        det = _take(top.get("detector"), "detector", {"mode"})
        mode = det.get("mode", "ours")
        if mode not in MODES:
            raise ConfigError(f"detector.mode must be one of {MODES}")

        tr = _take(top.get("train"), "train", _fields(TrainConfig) | {"warmup_epochs"})
        warmup = int(tr.pop("warmup_epochs", 0))
        inner = _take(tr.pop("inner_attack", None), "train.inner_attack", _fields(AttackConfig))
        inner.setdefault("targeted", True)
        train = TrainConfig(**tr, inner_attack=AttackConfig(**inner))
        if warmup < 0:
            raise ConfigError("train.warmup_epochs must be >= 0")

        attacks = []
        raw_attacks = top.get("attacks") or []
        if not isinstance(raw_attacks, list):
            raise ConfigError("'attacks' must be a list")
        for i, a in enumerate(raw_attacks):
            a = _take(a, f"attacks[{i}]", _fields(AttackSpec))
            a.setdefault("name", f"attack{i}")
            a["norm"] = parse_norm(a.get("norm", "inf"))
            alphas = a.get("alphas", [0.01])
            a["alphas"] = tuple(float(v) for v in (alphas if isinstance(alphas, list) else [alphas]))
            spec = AttackSpec(**a)
            if spec.kind not in ATTACK_KINDS:
                raise ConfigError(f"attacks[{i}].kind must be one of {ATTACK_KINDS}")
            if spec.objective not in OBJECTIVES:
                raise ConfigError(f"attacks[{i}].objective must be one of {OBJECTIVES}")
            if not spec.alphas:
                raise ConfigError(f"attacks[{i}].alphas must not be empty")
            for alpha in spec.alphas:
                spec.attack_config(alpha, 0)
            attacks.append(spec)
        if len({a.name for a in attacks}) != len(attacks):
            raise ConfigError("attack names must be unique")

        metrics = _take(top.get("metrics"), "metrics", {"fpr_percents"})
        fprs = tuple(sorted(float(p) for p in metrics.get("fpr_percents", (1, 2, 5))))
        if not fprs or not all(0 < p < 100 for p in fprs):
            raise ConfigError("metrics.fpr_percents must be non-empty values in (0, 100)")
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc

    return ExperimentConfig(
        seed=int(top["seed"]),
        out=str(top.get("out", "runs/default")),
        dataset=ds,
        hidden=hidden,
        mode=mode,
        train=train,
        warmup_epochs=warmup,
        attacks=tuple(attacks),
        fpr_percents=fprs,
        source=raw,
    )


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML in {path}: {exc}") from exc
    return parse_config(raw, base_dir=path.parent)
