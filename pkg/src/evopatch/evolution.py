"""Genetic search over patch chromosomes.

Fitness of a chromosome c against a baseline network b::

    fitness = exp(w_s * s_c / s_b + (p_b - p_c) / p_b)

where ``s`` is validation accuracy and ``p`` the trainable-parameter count.
"""

from __future__ import annotations

import hashlib
import json
import math
import threading
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .geometry import Chromosome, PatchOffset, PatchRect, chromosome_rects, chromosome_signature
from .imaging import GrayImage, full_dataset, stack_dataset
from .nn import CompactCnn, ShapeError, TrainConfig, TrainingDiverged, build_default, build_proxy, train
from .nn.model import default_parameter_count


class BoundError(ValueError):
    """Patch-size bounds leave no room for offsets in this image."""


@dataclass(frozen=True)
class EvoParams:
    population_size: int = 100
    tournament_size: int = 7
    crossover_pct: int = 50
    mutation_pct: int = 50
    generations: int = 15
    w_s: float = 5.0
    min_alpha: int = 30
    max_alpha: int = 50
    min_beta: int = 30
    max_beta: int = 50
    min_patches: int = 1
    max_patches: int = 4
    elitism: int = 1
    rng_seed: int = 0

    def __post_init__(self):
        if self.crossover_pct + self.mutation_pct != 100:
            raise ValueError("crossover_pct + mutation_pct must equal 100")
        if self.population_size < 1 or not 1 <= self.tournament_size <= self.population_size:
            raise ValueError("need 1 <= tournament_size <= population_size")
        if self.generations < 0:
            raise ValueError("generations must be >= 0")
        if not 0 <= self.elitism <= self.population_size:
            raise ValueError("elitism must be within [0, population_size]")
        for lo, hi in ((self.min_alpha, self.max_alpha), (self.min_beta, self.max_beta), (self.min_patches, self.max_patches)):
            if not 1 <= lo <= hi:
                raise ValueError(f"invalid bound pair ({lo}, {hi})")

    @classmethod
    def from_dict(cls, d: dict) -> "EvoParams":
        return cls(**d)


@dataclass(frozen=True)
class ModelConfig:
    """Which classifier scores chromosomes, and the CNN layer sizes.

    ``classifier="proxy"`` swaps in multinomial logistic regression for speed.
    Parameter counts always describe the CNN built for that input, so fitness
    and reduction figures stay comparable between the two modes.
    """

    classifier: str = "cnn"
    filters: tuple[int, ...] = (16, 32, 64)
    kernel: int = 3
    pool: int = 2
    dense_units: int = 128
    conv_dropout: float = 0.25
    dense_dropout: float = 0.5

    def __post_init__(self):
        if self.classifier not in ("cnn", "proxy"):
            raise ValueError(f"classifier must be 'cnn' or 'proxy', got {self.classifier!r}")
        object.__setattr__(self, "filters", tuple(self.filters))

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)

    def arch(self) -> dict:
        return dict(
            filters=self.filters,
            kernel=self.kernel,
            pool=self.pool,
            dense_units=self.dense_units,
            conv_dropout=self.conv_dropout,
            dense_dropout=self.dense_dropout,
        )

    def build(self, input_dims, num_classes: int, seed: int) -> CompactCnn:
        if self.classifier == "proxy":
            return build_proxy(input_dims, num_classes, rng_seed=seed)
        return build_default(input_dims, num_classes, rng_seed=seed, **self.arch())

    def parameter_count(self, input_dims, num_classes: int) -> int:
        return default_parameter_count(input_dims, num_classes, self.filters, self.kernel, self.pool, self.dense_units)


@dataclass
class Datasets:
    """Train (already augmented), validation and test images plus the class count."""

    train: list[GrayImage]
    val: list[GrayImage]
    test: list[GrayImage]
    num_classes: int

    @property
    def image_dims(self) -> tuple[int, int]:
        return self.train[0].dims


@dataclass(frozen=True)
class Baseline:
    s_b: float
    p_b: int
    r_runs: int
    test_accuracy: float
    val_accuracies: tuple[float, ...] = ()
    test_accuracies: tuple[float, ...] = ()
    model_config: dict = field(default_factory=dict)
    model: CompactCnn | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if not 0.0 < self.s_b <= 1.0:
            raise ValueError(f"baseline validation accuracy must be in (0, 1], got {self.s_b}")
        if self.p_b < 1:
            raise ValueError("baseline parameter count must be positive")

    def to_dict(self) -> dict:
        d = asdict(replace(self, model=None))
        d.pop("model")
        d["schema"] = "evopatch.baseline/1"
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Baseline":
        d = {k: v for k, v in d.items() if k != "schema"}
        d["val_accuracies"] = tuple(d.get("val_accuracies", ()))
        d["test_accuracies"] = tuple(d.get("test_accuracies", ()))
        return cls(**d)

    @classmethod
    def load(cls, path: str | Path) -> "Baseline":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class FitnessRecord:
    chromosome: Chromosome
    s_c: float
    p_c: int
    fitness: float
    error: str | None = None
    model: CompactCnn | None = field(default=None, compare=False, repr=False)

    def to_dict(self) -> dict:
        return {
            "chromosome": self.chromosome.to_dict(),
            "s_c": self.s_c,
            "p_c": self.p_c,
            "fitness": self.fitness,
            "error": self.error,
        }


# --- fitness ----------------------------------------------------------------


def fitness_value(s_c: float, s_b: float, p_c: int, p_b: int, w_s: float = 5.0, decimals: int | None = None) -> float:
    """Scalar fitness. ``decimals`` rounds both ratios to that many places first."""
    acc_ratio = s_c / s_b
    reduction = (p_b - p_c) / p_b
    if decimals is not None:
        acc_ratio = round(acc_ratio, decimals)
        reduction = round(reduction, decimals)
    return math.exp(w_s * acc_ratio + reduction)


def chromosome_seed(run_seed: int, c: Chromosome) -> int:
    h = hashlib.blake2b(int(run_seed).to_bytes(8, "little", signed=False) + chromosome_signature(c), digest_size=8)
    return int.from_bytes(h.digest(), "little")


class FitnessCache:
    """Signature-keyed memo of fitness records; safe for concurrent use."""

    def __init__(self):
        self._store: dict[bytes, FitnessRecord] = {}
        self._lock = threading.Lock()

    def get(self, c: Chromosome) -> FitnessRecord | None:
        with self._lock:
            return self._store.get(chromosome_signature(c))

    def put(self, rec: FitnessRecord) -> FitnessRecord:
        """Insert unless present; returns whichever record is stored."""
        with self._lock:
            return self._store.setdefault(chromosome_signature(rec.chromosome), rec)

    def __len__(self) -> int:
        return len(self._store)


def eval_fitness(
    c: Chromosome,
    baseline: Baseline,
    data: Datasets,
    train_cfg: TrainConfig,
    params: EvoParams,
    model_cfg: ModelConfig = ModelConfig(),
    cache: FitnessCache | None = None,
    seed: int = 0,
    keep_model: bool = False,
) -> FitnessRecord:
    """Train on the stacked patches of ``c`` and score it against ``baseline``."""
    if cache is not None:
        hit = cache.get(c)
        if hit is not None:
            return hit
    input_dims = (c.beta, c.alpha, len(c))
    s = chromosome_seed(seed, c)
    try:
        p_c = model_cfg.parameter_count(input_dims, data.num_classes)
        xt, yt = stack_dataset(data.train, c)
        xv, yv = stack_dataset(data.val, c)
        model = model_cfg.build(input_dims, data.num_classes, seed=s)
        result = train(model, xt, yt, xv, yv, train_cfg, seed=s ^ 0x5DEECE66D)
    except (TrainingDiverged, ShapeError) as exc:
        rec = FitnessRecord(c, 0.0, 0, 0.0, error=f"{type(exc).__name__}: {exc}")
    else:
        fit = fitness_value(result.val_accuracy, baseline.s_b, p_c, baseline.p_b, params.w_s)
        rec = FitnessRecord(c, result.val_accuracy, p_c, fit, model=model if keep_model else None)
    return cache.put(rec) if cache is not None else rec


class Evaluator:
    """Binds data, baseline and configs so the GA can call ``evaluate(chromosome)``."""

    def __init__(self, baseline, data, train_cfg, params, model_cfg=ModelConfig(), seed=0, cache=None):
        self.baseline = baseline
        self.data = data
        self.train_cfg = train_cfg
        self.params = params
        self.model_cfg = model_cfg
        self.seed = seed
        self.cache = cache if cache is not None else FitnessCache()
        self.calls = 0

    def __call__(self, c: Chromosome) -> FitnessRecord:
        self.calls += 1
        return eval_fitness(c, self.baseline, self.data, self.train_cfg, self.params, self.model_cfg, self.cache, self.seed)


def compute_baseline(
    data: Datasets,
    model_cfg: ModelConfig = ModelConfig(),
    train_cfg: TrainConfig = TrainConfig(),
    r_runs: int = 3,
    seed: int = 0,
) -> Baseline:
    """Train on whole images ``r_runs`` times; s_b is the mean validation accuracy."""
    if r_runs < 1:
        raise ValueError("r_runs must be >= 1")
    xt, yt = full_dataset(data.train)
    xv, yv = full_dataset(data.val)
    xs, ys = full_dataset(data.test)
    dims = xt.shape[1:]
    vals, tests, first = [], [], None
    for r in range(r_runs):
        run_seed = int(np.random.SeedSequence([seed, r]).generate_state(1, np.uint64)[0])
        model = model_cfg.build(dims, data.num_classes, seed=run_seed)
        try:
            res = train(model, xt, yt, xv, yv, train_cfg, seed=run_seed ^ 0x5DEECE66D)
        except TrainingDiverged as exc:
            raise TrainingDiverged(f"baseline run {r + 1}/{r_runs} diverged: {exc}") from exc
        vals.append(res.val_accuracy)
        tests.append(model.accuracy(xs, ys) if len(xs) else float("nan"))
        first = first or model
    return Baseline(
        s_b=float(np.mean(vals)),
        p_b=model_cfg.parameter_count(dims, data.num_classes),
        r_runs=r_runs,
        test_accuracy=float(np.mean(tests)),
        val_accuracies=tuple(vals),
        test_accuracies=tuple(tests),
        model_config=asdict(model_cfg),
        model=first,
    )


# --- operators --------------------------------------------------------------


def _offset_bound(extent: int, size: int) -> int:
    room = extent / 2 - size
    if room <= 0:
        raise BoundError(f"patch size {size} leaves no room in extent {extent} (needs < {extent / 2})")
    return math.floor(room)


def random_offset(alpha: int, beta: int, image_dims: Sequence[int], rng: np.random.Generator) -> PatchOffset:
    bx = _offset_bound(image_dims[0], alpha)
    by = _offset_bound(image_dims[1], beta)
    return PatchOffset(int(rng.integers(-bx, bx + 1)), int(rng.integers(-by, by + 1)))


def create_chromosome(params: EvoParams, image_dims: Sequence[int], rng: np.random.Generator) -> Chromosome:
    """Random patch size within bounds and 1..max patches placed around the nose."""
    _offset_bound(image_dims[0], params.max_alpha)
    _offset_bound(image_dims[1], params.max_beta)
    alpha = int(rng.integers(params.min_alpha, params.max_alpha + 1))
    beta = int(rng.integers(params.min_beta, params.max_beta + 1))
    k = int(rng.integers(params.min_patches, params.max_patches + 1))
    return Chromosome(alpha, beta, tuple(random_offset(alpha, beta, image_dims, rng) for _ in range(k)))


MUTATIONS = ("add", "change", "remove", "shift")


def legal_mutations(c: Chromosome, params: EvoParams) -> list[str]:
    ops = []
    if len(c) < params.max_patches:
        ops.append("add")
    ops.append("change")
    if len(c) > params.min_patches:
        ops.append("remove")
    ops.append("shift")
    return ops


def apply_mutation(op: str, c: Chromosome, image_dims: Sequence[int], rng: np.random.Generator) -> Chromosome:
    genes = list(c.patches)
    if op == "add":
        genes.append(random_offset(c.alpha, c.beta, image_dims, rng))
    elif op == "remove":
        del genes[int(rng.integers(len(genes)))]
    elif op == "change":
        genes[int(rng.integers(len(genes)))] = random_offset(c.alpha, c.beta, image_dims, rng)
    elif op == "shift":
        i = int(rng.integers(len(genes)))
        dx = int(rng.integers(-c.alpha, c.alpha + 1))
        dy = int(rng.integers(-c.beta, c.beta + 1))
        genes[i] = PatchOffset(genes[i].x + dx, genes[i].y + dy)
    else:
        raise ValueError(f"unknown mutation {op!r}")
    return c.replace_patches(genes)


def mutate(c: Chromosome, params: EvoParams, image_dims: Sequence[int], rng: np.random.Generator) -> Chromosome:
    """Apply one uniformly chosen legal sub-operation; ``c`` itself is untouched."""
    ops = legal_mutations(c, params)
    return apply_mutation(ops[int(rng.integers(len(ops)))], c, image_dims, rng)


def swap_genes(p1: Chromosome, p2: Chromosome, i1: int, i2: int) -> tuple[Chromosome, Chromosome]:
    g1, g2 = list(p1.patches), list(p2.patches)
    a, b = g1[i1], g2[i2]
    g1[i1], g2[i2] = b, a
    return p1.replace_patches(g1), p2.replace_patches(g2)


def crossover(
    p1: Chromosome,
    p2: Chromosome,
    fitness_eval: Callable[[Chromosome], FitnessRecord],
    rng: np.random.Generator,
) -> Chromosome:
    """Swap one random gene between parents and return the fitter child (ties go to the first)."""
    i1 = int(rng.integers(len(p1)))
    i2 = int(rng.integers(len(p2)))
    if p1 == p2:
        i2 = i1  # same slot on both sides, so crossing a chromosome with itself is a no-op
    c1, c2 = swap_genes(p1, p2, i1, i2)
    f1 = fitness_eval(c1).fitness
    f2 = fitness_eval(c2).fitness
    return c1 if f1 >= f2 else c2


def tournament_select(population: Sequence[FitnessRecord], k: int, rng: np.random.Generator) -> FitnessRecord:
    """Best of k members drawn without replacement; ties go to the lowest population index."""
    if not population:
        raise ValueError("empty population")
    if not 1 <= k <= len(population):
        raise ValueError(f"tournament size {k} not in [1, {len(population)}]")
    picks = sorted(int(i) for i in rng.choice(len(population), size=k, replace=False))
    best = picks[0]
    for i in picks[1:]:
        if population[i].fitness > population[best].fitness:
            best = i
    return population[best]


# --- generational loop ------------------------------------------------------


@dataclass(frozen=True)
class GenerationStats:
    generation: int
    best_fitness: float
    mean_fitness: float
    best_s_c: float
    best_p_c: int
    best_patches: int
    best_ever_fitness: float
    evaluations: int
    population_size: int


@dataclass
class EvolutionResult:
    best: FitnessRecord
    history: list[GenerationStats]
    population: list[FitnessRecord]


def _best(records: Sequence[FitnessRecord]) -> FitnessRecord:
    best = records[0]
    for r in records[1:]:
        if r.fitness > best.fitness:
            best = r
    return best


def evolve(
    params: EvoParams,
    evaluate: Callable[[Chromosome], FitnessRecord],
    image_dims: Sequence[int],
    rng: np.random.Generator | None = None,
    on_generation: Callable[[GenerationStats], None] | None = None,
) -> EvolutionResult:
    """Elitist generational GA; each offspring comes from exactly one of crossover or mutation."""
    rng = np.random.default_rng(params.rng_seed) if rng is None else rng
    population = [evaluate(create_chromosome(params, image_dims, rng)) for _ in range(params.population_size)]
    best_ever = _best(population)
    history: list[GenerationStats] = []

    def record(gen):
        gen_best = _best(population)
        stats = GenerationStats(
            generation=gen,
            best_fitness=gen_best.fitness,
            mean_fitness=float(np.mean([r.fitness for r in population])),
            best_s_c=gen_best.s_c,
            best_p_c=gen_best.p_c,
            best_patches=len(gen_best.chromosome),
            best_ever_fitness=best_ever.fitness,
            evaluations=getattr(evaluate, "calls", 0),
            population_size=len(population),
        )
        history.append(stats)
        if on_generation is not None:
            on_generation(stats)

    record(0)
    p_cross = params.crossover_pct / 100.0
    for gen in range(1, params.generations + 1):
        order = sorted(range(len(population)), key=lambda i: (-population[i].fitness, i))
        nxt = [population[i] for i in order[: params.elitism]]
        while len(nxt) < params.population_size:
            if rng.random() < p_cross:
                a = tournament_select(population, params.tournament_size, rng)
                b = tournament_select(population, params.tournament_size, rng)
                child = crossover(a.chromosome, b.chromosome, evaluate, rng)
            else:
                parent = tournament_select(population, params.tournament_size, rng)
                child = mutate(parent.chromosome, params, image_dims, rng)
            nxt.append(evaluate(child))
        population = nxt
        gen_best = _best(population)
        if gen_best.fitness > best_ever.fitness:
            best_ever = gen_best
        record(gen)
    return EvolutionResult(best_ever, history, population)


# --- region agreement -------------------------------------------------------


def region_iou(c: Chromosome, image: GrayImage, regions: Sequence[Sequence[int]]) -> float:
    """Mean over patches of the IoU with the best-matching ground-truth region.

    ``regions`` are nose-relative ``(dx, dy, w, h)`` boxes.
    """
    nx, ny = image.nose
    truth = [PatchRect(nx + dx, ny + dy, w, h) for dx, dy, w, h in regions]
    rects = chromosome_rects(c, image.nose, image.dims)
    return float(np.mean([max(r.iou(t) for t in truth) for r in rects]))


def mean_region_iou(
    c: Chromosome, images: Sequence[GrayImage], regions_by_class: Sequence[Sequence[Sequence[int]]]
) -> float:
    """Average :func:`region_iou` over images, scoring each against its own class's regions."""
    return float(np.mean([region_iou(c, img, regions_by_class[img.label]) for img in images]))
