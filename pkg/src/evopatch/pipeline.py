"""End-to-end phases shared by the CLI and the acceptance suite."""

from __future__ import annotations

import json
import time
import zlib
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import plan_split
from .evolution import (
    Baseline,
    Datasets,
    EvoParams,
    Evaluator,
    EvolutionResult,
    FitnessCache,
    ModelConfig,
    compute_baseline,
    eval_fitness,
    evolve,
)
from .geometry import Chromosome, chromosome_rects
from .imaging import AugmentConfig, GrayImage, augment_dataset, draw_rects, full_dataset, stack_dataset, write_png
from .nn import CompactCnn, TrainConfig, train

CONFIG_SCHEMA = "evopatch.config/1"
REPORT_SCHEMA = "evopatch.report/1"


def substream_seed(root: int, name: str) -> int:
    """Independent 64-bit seed for a named phase, derived from the root seed."""
    ss = np.random.SeedSequence(entropy=int(root), spawn_key=(zlib.crc32(name.encode()),))
    return int(ss.generate_state(1, np.uint64)[0])


@dataclass(frozen=True)
class RunConfig:
    evo: EvoParams = EvoParams()
    train: TrainConfig = TrainConfig()
    model: ModelConfig = ModelConfig()
    augment: AugmentConfig = AugmentConfig()
    r_runs: int = 3
    test_frac: float = 0.30
    val_frac: float = 0.20
    seed: int = 0
    manifest: str | None = None

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        schema = d.pop("schema", CONFIG_SCHEMA)
        if schema != CONFIG_SCHEMA:
            raise ValueError(f"unknown config schema {schema!r}")
        return cls(
            evo=EvoParams.from_dict(d.pop("evo", {})),
            train=TrainConfig.from_dict(d.pop("train", {})),
            model=ModelConfig.from_dict(d.pop("model", {})),
            augment=AugmentConfig.from_dict(d.pop("augment", {})),
            **d,
        )

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"]["filters"] = list(self.model.filters)
        d["augment"] = {k: list(v) for k, v in d["augment"].items()}
        return {"schema": CONFIG_SCHEMA, **d}

    def with_overrides(self, seed: int | None = None, proxy: bool = False) -> "RunConfig":
        cfg = self
        if seed is not None:
            cfg = replace(cfg, seed=seed)
        if proxy:
            cfg = replace(cfg, model=replace(cfg.model, classifier="proxy"))
        return cfg


def prepare_datasets(images: Sequence[GrayImage], num_classes: int, cfg: RunConfig) -> tuple[Datasets, dict]:
    """Subject-disjoint split, then augmentation of the training partition only."""
    plan = plan_split((img.subject for img in images), cfg.test_frac, cfg.val_frac, substream_seed(cfg.seed, "split"))
    train_imgs, val_imgs, test_imgs = plan.partition(images)
    aug_rng = np.random.default_rng(substream_seed(cfg.seed, "augment"))
    train_imgs = augment_dataset(train_imgs, aug_rng, cfg.augment)
    split = {
        "train": sorted(plan.train_subjects),
        "val": sorted(plan.val_subjects),
        "test": sorted(plan.test_subjects),
    }
    return Datasets(train_imgs, val_imgs, test_imgs, num_classes), split


def run_baseline(data: Datasets, cfg: RunConfig) -> Baseline:
    return compute_baseline(data, cfg.model, cfg.train, cfg.r_runs, substream_seed(cfg.seed, "baseline"))


@dataclass
class EvolveOutcome:
    result: EvolutionResult
    best_model: CompactCnn
    best_test_accuracy: float
    timings: dict = field(default_factory=dict)

    def report(self, baseline: Baseline, cfg: RunConfig, split: dict, history_path: str = "history.json") -> dict:
        best = self.result.best
        return {
            "schema": REPORT_SCHEMA,
            "classifier": "proxy-logistic-regression" if cfg.model.classifier == "proxy" else "cnn",
            "baseline": {"s_b": baseline.s_b, "p_b": baseline.p_b, "test_accuracy": baseline.test_accuracy},
            "best": {
                "fitness": best.fitness,
                "s_c": best.s_c,
                "p_c": best.p_c,
                "test_accuracy": self.best_test_accuracy,
                "chromosome": best.chromosome.to_dict(),
            },
            "reduction_pct": reduction_pct(baseline.p_b, best.p_c),
            "history": history_path,
            "config": cfg.to_dict(),
            "seeds": {name: substream_seed(cfg.seed, name) for name in ("split", "augment", "baseline", "evolve", "train")},
            "split": split,
        }


def reduction_pct(p_b: int, p_c: int) -> float:
    return 100.0 * (p_b - p_c) / p_b


def run_evolution(data: Datasets, baseline: Baseline, cfg: RunConfig, on_generation=None) -> EvolveOutcome:
    timings = {}
    t0 = time.perf_counter()
    train_seed = substream_seed(cfg.seed, "train")
    evaluator = Evaluator(baseline, data, cfg.train, cfg.evo, cfg.model, seed=train_seed, cache=FitnessCache())
    rng = np.random.default_rng(substream_seed(cfg.seed, "evolve"))
    result = evolve(cfg.evo, evaluator, data.image_dims, rng, on_generation)
    timings["evolve_s"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    # retrain with the same derived seed; reproduces the cached record bitwise
    rec = eval_fitness(
        result.best.chromosome, baseline, data, cfg.train, cfg.evo, cfg.model, None, train_seed, keep_model=True
    )
    if rec.model is None:
        raise RuntimeError(f"best chromosome failed to retrain: {rec.error}")
    timings["retrain_s"] = time.perf_counter() - t0
    xs, ys = stack_dataset(data.test, result.best.chromosome)
    test_acc = rec.model.accuracy(xs, ys)
    timings["evaluations"] = len(evaluator.cache)
    return EvolveOutcome(result, rec.model, test_acc, timings)


def history_json(result: EvolutionResult) -> list[dict]:
    return [asdict(h) for h in result.history]


def dump_json(path: str | Path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


# --- render -----------------------------------------------------------------


def render_patches(
    images: Sequence[GrayImage], c: Chromosome, n: int, out_dir: str | Path, seed: int
) -> list[Path]:
    """Overlay + per-patch PNGs for ``n`` images sampled with ``seed``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if n > len(images):
        raise ValueError(f"asked for {n} images, only {len(images)} available")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    picks = sorted(int(i) for i in np.random.default_rng(seed).choice(len(images), size=n, replace=False))
    written = []
    for j, idx in enumerate(picks):
        img = images[idx]
        rects = chromosome_rects(c, img.nose, img.dims)
        p = out / f"overlay_{j:02d}.png"
        write_png(p, draw_rects(img.data, rects))
        written.append(p)
        for k, r in enumerate(rects):
            p = out / f"patch_{j:02d}_{k}.png"
            write_png(p, img.data[r.top : r.bottom, r.left : r.right])
            written.append(p)
    return written


# --- timing -----------------------------------------------------------------


def time_inference(
    raw_images: Sequence[GrayImage], c: Chromosome, full_model: CompactCnn, patch_model: CompactCnn, n: int = 10
) -> dict:
    """Wall-clock for equalize + input building + prediction of ``n`` images on both paths."""
    from .imaging import hist_equalize

    if n < 1:
        raise ValueError("need at least one image to time")
    imgs = list(raw_images[:n])
    if len(imgs) < n:
        raise ValueError(f"asked for {n} images, only {len(raw_images)} available")

    def full_path():
        x, _ = full_dataset([hist_equalize(i) for i in imgs])
        full_model.predict(x)

    def patch_path():
        x, _ = stack_dataset([hist_equalize(i) for i in imgs], c)
        patch_model.predict(x)

    full_path(), patch_path()  # compile / warm caches
    t0 = time.perf_counter()
    full_path()
    t_full = time.perf_counter() - t0
    t0 = time.perf_counter()
    patch_path()
    t_patch = time.perf_counter() - t0
    return {"n_images": n, "full_s": t_full, "patch_s": t_patch, "ratio_full_over_patch": t_full / t_patch}


def time_training(data: Datasets, c: Chromosome, model_cfg: ModelConfig, train_cfg: TrainConfig, seed: int = 0) -> dict:
    """Train once on whole images and once on the chromosome's patches; wall-clock both."""
    xt, yt = full_dataset(data.train)
    xv, yv = full_dataset(data.val)
    m = model_cfg.build(xt.shape[1:], data.num_classes, seed)
    t0 = time.perf_counter()
    train(m, xt, yt, xv, yv, train_cfg, seed)
    t_full = time.perf_counter() - t0
    xt, yt = stack_dataset(data.train, c)
    xv, yv = stack_dataset(data.val, c)
    m = model_cfg.build(xt.shape[1:], data.num_classes, seed)
    t0 = time.perf_counter()
    train(m, xt, yt, xv, yv, train_cfg, seed)
    t_patch = time.perf_counter() - t0
    return {"full_train_s": t_full, "patch_train_s": t_patch, "ratio_full_over_patch": t_full / t_patch}
