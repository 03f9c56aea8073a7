"""Experiment orchestration shared by the command line and the test suite.

One experiment seed runs the full pipeline: generate the synthetic dataset,
optionally replace domain labels with pseudo labels, train the classifier,
summarize source styles into a registry, then evaluate every test domain
under the configured shift mode. Everything is deterministic given the seed.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import domain_data as dd
from . import micro_net as mn
from . import test_time_shift as tts
from .errors import ConfigError

MODE_NAMES = {
    "off": tts.OFF,
    "proposed": tts.PROPOSED,
    "shift-all": tts.SHIFT_ALL,
    "shift_all": tts.SHIFT_ALL,
    "nearest-sample": None,  # built with pool size
    "nearest_sample": None,
    "single-domain": tts.SINGLE_DOMAIN,
    "single_domain": tts.SINGLE_DOMAIN,
}


def shift_mode_from_name(name: str, pool_size: int = tts.DEFAULT_NEAREST_POOL) -> tts.ShiftMode:
    if name not in MODE_NAMES:
        raise ConfigError(f"unknown shift mode {name!r}; expected one of "
                          f"{sorted(set(MODE_NAMES))}")
    if name.replace("-", "_") == "nearest_sample":
        return tts.nearest_sample(pool_size)
    return MODE_NAMES[name]


def _build(cls, doc: dict):
    """Dataclass construction with config-level error reporting."""
    try:
        return cls(**doc)
    except TypeError as exc:
        raise ConfigError(f"bad {cls.__name__} fields: {exc}") from exc


@dataclass(frozen=True)
class DataConfig:
    n_classes: int = 7
    n_sources: int = 3
    per_cell_train: int = 18
    per_cell_test: int = 16
    image_size: int = 32
    target_preset: str = "far"
    imbalance: dd.ImbalanceSpec = field(default_factory=dd.ImbalanceSpec)

    @classmethod
    def from_dict(cls, doc: dict) -> "DataConfig":
        doc = dict(doc)
        if "imbalance" in doc and doc["imbalance"] is not None:
            doc["imbalance"] = dd.ImbalanceSpec.from_dict(doc["imbalance"])
        else:
            doc.pop("imbalance", None)
        return _build(cls, doc)


@dataclass(frozen=True)
class EvalConfig:
    mode: str = "proposed"
    alpha: float | None = None
    layer: str = "block2"
    pool_size: int = tts.DEFAULT_NEAREST_POOL

    @classmethod
    def from_dict(cls, doc: dict) -> "EvalConfig":
        return _build(cls, doc)


@dataclass(frozen=True)
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    net: mn.NetConfig = field(default_factory=mn.NetConfig)
    train: mn.TrainConfig = field(default_factory=mn.TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    protocol: str = "leave_one_out"
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    pseudo_labels: int | None = None

    def __post_init__(self):
        if self.protocol not in ("leave_one_out", "single_domain"):
            raise ConfigError(f"unknown protocol {self.protocol!r}")

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        known = {"data", "net", "train", "eval", "protocol", "seeds", "pseudo_labels"}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown experiment config keys: {sorted(unknown)}")
        kwargs = {}
        if "data" in doc:
            kwargs["data"] = DataConfig.from_dict(doc["data"])
        if "net" in doc:
            kwargs["net"] = mn.NetConfig.from_dict(doc["net"])
        if "train" in doc:
            train_doc = dict(doc["train"])
            for key in ("sb_hooks", "aug_hooks"):
                if train_doc.get(key) is not None:
                    train_doc[key] = tuple(train_doc[key])
            kwargs["train"] = _build(mn.TrainConfig, train_doc)
        if "eval" in doc:
            kwargs["eval"] = EvalConfig.from_dict(doc["eval"])
        for key in ("protocol", "pseudo_labels"):
            if key in doc:
                kwargs[key] = doc[key]
        if "seeds" in doc:
            kwargs["seeds"] = tuple(doc["seeds"])
        return cls(**kwargs)


def load_experiment_config(path) -> ExperimentConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read experiment config {path}: {exc}") from exc
    return ExperimentConfig.from_dict(doc)


def method_label(sb: bool, mode: str, aug: str) -> str:
    base = {(False, False): "Baseline", (True, False): "SB",
            (False, True): "TS", (True, True): "TSB"}[(sb, mode != "off")]
    return base if aug == "none" else f"{base} (+{aug})"


def generate_data(cfg: DataConfig, out_dir, seed: int) -> dd.DatasetManifest:
    """Materialize the dataset for one experiment seed, imbalance applied."""
    manifest = dd.gen_dataset(
        out_dir, n_classes=cfg.n_classes, sources=dd.source_styles(cfg.n_sources),
        target=dd.target_style(cfg.target_preset), per_cell_train=cfg.per_cell_train,
        per_cell_test=cfg.per_cell_test, image_size=cfg.image_size, seed=seed)
    if cfg.imbalance.kind != "balanced":
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0xBA1A])))
        manifest = dd.apply_imbalance(manifest, cfg.imbalance, rng)
        dd.save_manifest(manifest, Path(out_dir) / "manifest.json")
    return manifest


def load_split(manifest: dd.DatasetManifest, root, split: str, domains=None):
    records = manifest.records(split, domains)
    images = dd.load_images(manifest, root, records)
    classes = np.array([r.cls for r in records], dtype=np.intp)
    doms = np.array([r.domain for r in records], dtype=np.intp)
    return images, classes, doms


def assign_pseudo_domains(images: np.ndarray, k: int, seed: int) -> np.ndarray:
    """Pseudo domain ids from raw-pixel style clustering (no labels needed)."""
    styles = dd.raw_pixel_styles(images)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0xC1_05])))
    return tts.pseudo_domains(styles, k, rng)


@dataclass
class SeedOutcome:
    seed: int
    manifest: dd.DatasetManifest
    net: mn.MicroNet
    registry: tts.DomainRegistry
    metrics: mn.TrainMetrics
    rows: list[dict]
    wall_time: float


def run_seed(cfg: ExperimentConfig, seed: int, workdir) -> SeedOutcome:
    start = time.perf_counter()
    workdir = Path(workdir)
    data_dir = workdir / f"data_seed{seed}"
    manifest = generate_data(cfg.data, data_dir, seed)

    if cfg.protocol == "single_domain":
        train_domains = [manifest.source_domains[0]]
    else:
        train_domains = manifest.source_domains
    xtr, ytr, dtr = load_split(manifest, data_dir, "train", train_domains)

    if cfg.pseudo_labels is not None:
        dtr = assign_pseudo_domains(xtr, cfg.pseudo_labels, seed)
        n_domains = cfg.pseudo_labels
    else:
        dtr = np.searchsorted(np.unique(dtr), dtr)  # compact 0-based ids
        n_domains = len(train_domains)

    net = mn.MicroNet.init(cfg.net, seed=seed)
    train_cfg = mn.TrainConfig(**{**cfg.train.__dict__, "seed": seed})
    metrics = mn.train(net, xtr, ytr, dtr, train_cfg, n_domains=n_domains)

    alpha = cfg.eval.alpha
    if alpha is None:
        alpha = tts.PSEUDO_LABEL_ALPHA if cfg.pseudo_labels is not None else tts.DEFAULT_ALPHA
    registry = tts.build_registry(net, xtr, dtr, cfg.eval.layer, alpha=alpha)

    mode = shift_mode_from_name(cfg.eval.mode, cfg.eval.pool_size)
    pool = None
    rng = None
    if mode.kind == "nearest_sample":
        pool = net.style_vectors_at(xtr, cfg.eval.layer)
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0x9001])))

    xte, yte, dte = load_split(manifest, data_dir, "test")
    result = mn.evaluate(net, xte, yte, dte, registry=registry, mode=mode,
                         alpha=alpha, sample_pool=pool, rng=rng)
    label = method_label(cfg.train.sb, mode.kind, cfg.train.aug)
    rows = []
    for dom in sorted(result.domains):
        rows.append({
            "method": label,
            "target": manifest.styles[dom].name,
            "seed": seed,
            "accuracy": result.accuracy(dom),
            "shift_rate": result.shift_rate(dom),
        })
    return SeedOutcome(seed=seed, manifest=manifest, net=net, registry=registry,
                       metrics=metrics, rows=rows,
                       wall_time=time.perf_counter() - start)


def run_experiment(cfg: ExperimentConfig, workdir) -> list[dict]:
    rows = []
    for seed in cfg.seeds:
        rows.extend(run_seed(cfg, seed, workdir).rows)
    return rows
