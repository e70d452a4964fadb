import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from evopatch.evolution import (
    Baseline,
    BoundError,
    Datasets,
    EvoParams,
    Evaluator,
    FitnessCache,
    FitnessRecord,
    ModelConfig,
    apply_mutation,
    chromosome_seed,
    compute_baseline,
    create_chromosome,
    crossover,
    eval_fitness,
    evolve,
    fitness_value,
    legal_mutations,
    mutate,
    mean_region_iou,
    region_iou,
    swap_genes,
    tournament_select,
)
from evopatch.geometry import Chromosome
from evopatch.imaging import GrayImage
from evopatch.nn import TrainConfig


# --- fitness ----------------------------------------------------------------


def test_fitness_reference_full_precision():
    # exp(5 * 0.31/0.65 + (12189447 - 123063)/12189447) = exp(3.374519...)
    expected = math.exp(5 * (0.31 / 0.65) + (12_189_447 - 123_063) / 12_189_447)
    got = fitness_value(0.31, 0.65, 123_063, 12_189_447, 5.0)
    assert got == expected
    assert got == pytest.approx(29.21, abs=0.01)


def test_fitness_reference_rounded_ratios():
    # rounding both ratios to 2 decimals gives 0.48 and 0.99
    assert fitness_value(0.31, 0.65, 123_063, 12_189_447, 5.0, decimals=2) == pytest.approx(29.67, abs=0.01)
    assert fitness_value(0.31, 0.65, 123_063, 12_189_447, 5.0, decimals=2) == math.exp(5 * 0.48 + 0.99)


def test_fitness_unit_ratio():
    assert fitness_value(0.7, 0.7, 1000, 1000, 5.0) == math.exp(5.0)


@settings(max_examples=300)
@given(
    st.floats(0.0, 1.0),
    st.floats(0.0, 1.0),
    st.floats(0.01, 1.0),
    st.integers(1, 10**7),
    st.integers(1, 10**7),
    st.integers(1, 10**7),
)
def test_fitness_monotone(s1, s2, s_b, p1, p2, p_b):
    # keep exp() out of underflow
    p1, p2 = min(p1, 10 * p_b), min(p2, 10 * p_b)
    lo, hi = sorted((s1, s2))
    if hi - lo > 1e-9:
        assert fitness_value(lo, s_b, p1, p_b) < fitness_value(hi, s_b, p1, p_b)
    small, big = sorted((p1, p2))
    if small != big:
        assert fitness_value(s1, s_b, small, p_b) > fitness_value(s1, s_b, big, p_b)


# --- params -----------------------------------------------------------------


def test_default_params():
    p = EvoParams()
    assert (p.population_size, p.tournament_size, p.crossover_pct, p.mutation_pct, p.generations, p.w_s) == (
        100, 7, 50, 50, 15, 5.0,
    )
    assert (p.min_alpha, p.max_alpha, p.min_beta, p.max_beta, p.min_patches, p.max_patches) == (30, 50, 30, 50, 1, 4)
    assert TrainConfig().epochs == 10 and TrainConfig().batch_size == 8


@pytest.mark.parametrize(
    "kw",
    [dict(crossover_pct=60), dict(tournament_size=200), dict(min_alpha=40, max_alpha=30), dict(min_patches=0)],
)
def test_params_validation(kw):
    with pytest.raises(ValueError):
        EvoParams(**kw)


# --- initialisation ---------------------------------------------------------


def test_create_offsets_bounded_w100_alpha30():
    p = EvoParams(min_alpha=30, max_alpha=30, min_beta=30, max_beta=30)
    rng = np.random.default_rng(0)
    xs = [g.x for _ in range(500) for g in create_chromosome(p, (100, 100), rng).patches]
    assert min(xs) >= -20 and max(xs) <= 20
    assert min(xs) == -20 and max(xs) == 20  # whole range reachable


def test_create_single_patch():
    p = EvoParams(min_patches=1, max_patches=1)
    rng = np.random.default_rng(1)
    assert all(len(create_chromosome(p, (128, 128), rng)) == 1 for _ in range(200))


def test_create_bound_error():
    p = EvoParams(min_alpha=50, max_alpha=50)
    with pytest.raises(BoundError):
        create_chromosome(p, (100, 200), np.random.default_rng(0))


def test_create_odd_width_bound():
    # 281 / 2 - 50 = 90.5 -> integer offsets in [-90, 90]
    p = EvoParams(min_alpha=50, max_alpha=50)
    rng = np.random.default_rng(2)
    xs = [g.x for _ in range(400) for g in create_chromosome(p, (281, 381), rng).patches]
    assert max(abs(x) for x in xs) <= 90


# --- mutation ---------------------------------------------------------------


def test_add_gated_at_max():
    p = EvoParams(max_patches=2)
    c = Chromosome(30, 30, ((0, 0), (1, 1)))
    assert legal_mutations(c, p) == ["change", "remove", "shift"]


def test_only_change_and_shift_when_min_equals_max():
    p = EvoParams(min_patches=2, max_patches=2)
    c = Chromosome(30, 30, ((0, 0), (1, 1)))
    assert legal_mutations(c, p) == ["change", "shift"]
    rng = np.random.default_rng(0)
    for _ in range(200):
        assert len(mutate(c, p, (128, 128), rng)) == 2


def test_remove_gated_at_min():
    assert legal_mutations(Chromosome(30, 30, ((0, 0),)), EvoParams()) == ["add", "change", "shift"]


def test_shift_within_alpha_beta():
    rng = np.random.default_rng(3)
    c = Chromosome(31, 44, ((5, -7),))
    dxs, dys = [], []
    for _ in range(2000):
        m = apply_mutation("shift", c, (128, 128), rng)
        dxs.append(m.patches[0].x - 5)
        dys.append(m.patches[0].y + 7)
    assert min(dxs) >= -31 and max(dxs) <= 31
    assert min(dys) >= -44 and max(dys) <= 44
    assert min(dxs) == -31 and max(dys) == 44


def test_mutate_copy_on_write():
    c = Chromosome(30, 30, ((0, 0), (1, 1)))
    before = c.to_dict()
    rng = np.random.default_rng(0)
    for _ in range(50):
        m = mutate(c, EvoParams(), (128, 128), rng)
        assert (m.alpha, m.beta) == (30, 30)
    assert c.to_dict() == before


def test_mutation_ops_all_reachable():
    rng = np.random.default_rng(5)
    c = Chromosome(30, 30, ((0, 0), (3, 3)))
    lens = {len(mutate(c, EvoParams(), (128, 128), rng)) for _ in range(200)}
    assert lens == {1, 2, 3}


# --- crossover --------------------------------------------------------------


def test_self_crossover_is_identity():
    c = Chromosome(30, 40, ((1, 2), (3, 4), (5, 6)))
    rng = np.random.default_rng(0)
    for _ in range(20):
        child = crossover(c, c, lambda x: FitnessRecord(x, 0, 0, 1.0), rng)
        assert child == c


def test_first_gene_swap():
    p1 = Chromosome(10, 20, ((1, 1), (2, 2), (3, 3)))
    p2 = Chromosome(12, 22, ((9, 9), (8, 8)))
    c1, c2 = swap_genes(p1, p2, 0, 0)
    assert c1 == Chromosome(10, 20, ((9, 9), (2, 2), (3, 3)))
    assert c2 == Chromosome(12, 22, ((1, 1), (8, 8)))


def test_crossover_returns_fitter_child():
    p1 = Chromosome(10, 20, ((1, 1),))
    p2 = Chromosome(12, 22, ((9, 9),))
    rng = np.random.default_rng(0)
    # fitness favours chromosomes with alpha 12 -> the second child wins
    child = crossover(p1, p2, lambda x: FitnessRecord(x, 0, 0, float(x.alpha)), rng)
    assert child == Chromosome(12, 22, ((1, 1),))
    # ties go to the first child
    child = crossover(p1, p2, lambda x: FitnessRecord(x, 0, 0, 1.0), rng)
    assert child == Chromosome(10, 20, ((9, 9),))


def test_crossover_leaves_parents_alone():
    p1 = Chromosome(10, 20, ((1, 1), (2, 2)))
    p2 = Chromosome(12, 22, ((9, 9),))
    d1, d2 = p1.to_dict(), p2.to_dict()
    crossover(p1, p2, lambda x: FitnessRecord(x, 0, 0, 1.0), np.random.default_rng(0))
    assert p1.to_dict() == d1 and p2.to_dict() == d2


# --- selection --------------------------------------------------------------


def _pop(fits):
    return [FitnessRecord(Chromosome(30, 30, ((i, 0),)), 0.0, 0, f) for i, f in enumerate(fits)]


def test_tournament_full_size_returns_best():
    pop = _pop([1.0, 5.0, 3.0, 5.0, 2.0])
    rng = np.random.default_rng(0)
    for _ in range(20):
        assert tournament_select(pop, 5, rng) is pop[1]


def test_tournament_size_one_is_uniform():
    pop = _pop([1.0, 2.0, 3.0, 4.0])
    rng = np.random.default_rng(0)
    counts = np.zeros(4)
    for _ in range(4000):
        counts[pop.index(tournament_select(pop, 1, rng))] += 1
    assert (np.abs(counts / 4000 - 0.25) < 0.04).all()


def test_tournament_ties_take_earliest_sampled():
    pop = _pop([2.0] * 10)
    rng = np.random.default_rng(1)
    for _ in range(50):
        state = rng.bit_generator.state
        picked = tournament_select(pop, 3, rng)
        rng2 = np.random.default_rng()
        rng2.bit_generator.state = state
        sampled = sorted(int(i) for i in rng2.choice(10, size=3, replace=False))
        assert pop.index(picked) == sampled[0]


def test_tournament_errors():
    with pytest.raises(ValueError):
        tournament_select([], 1, np.random.default_rng(0))
    with pytest.raises(ValueError):
        tournament_select(_pop([1.0]), 2, np.random.default_rng(0))


# --- evaluation -------------------------------------------------------------


def _tiny_data(n_subjects=6, size=64, seed=0):
    """Label is written as a bright square near the nose; the rest is noise."""
    rng = np.random.default_rng(seed)
    imgs = []
    for s in range(n_subjects):
        for label in range(2):
            data = rng.integers(0, 120, (size, size)).astype(np.uint8)
            if label:
                data[34:42, 34:42] = 255
            imgs.append(GrayImage(data, (32, 32), label, f"s{s}"))
    return imgs


def _datasets():
    imgs = _tiny_data()
    return Datasets(imgs[:8], imgs[8:10], imgs[10:], 2)


def test_eval_fitness_proxy_and_cache():
    data = _datasets()
    base = Baseline(s_b=0.5, p_b=10**6, r_runs=1, test_accuracy=0.5)
    params = EvoParams(min_alpha=22, max_alpha=24, min_beta=22, max_beta=24)
    cache = FitnessCache()
    c = Chromosome(22, 22, ((2, 2),))
    rec = eval_fitness(c, base, data, TrainConfig(epochs=3), params, ModelConfig(classifier="proxy"), cache, seed=1)
    assert rec.error is None
    assert rec.p_c == ModelConfig().parameter_count((22, 22, 1), 2)
    assert rec.fitness == fitness_value(rec.s_c, 0.5, rec.p_c, 10**6, 5.0)
    again = eval_fitness(c, base, data, TrainConfig(epochs=3), params, ModelConfig(classifier="proxy"), cache, seed=1)
    assert again is rec
    # permuted genes share the cache entry
    c2 = Chromosome(22, 22, ((5, 5), (2, 2)))
    c3 = Chromosome(22, 22, ((2, 2), (5, 5)))
    r2 = eval_fitness(c2, base, data, TrainConfig(epochs=1), params, ModelConfig(classifier="proxy"), cache, 1)
    assert eval_fitness(c3, base, data, TrainConfig(epochs=1), params, ModelConfig(classifier="proxy"), cache, 1) is r2
    assert len(cache) == 2


def test_eval_fitness_deterministic_without_cache():
    data = _datasets()
    base = Baseline(s_b=0.5, p_b=10**6, r_runs=1, test_accuracy=0.5)
    c = Chromosome(22, 22, ((2, 2),))
    args = (base, data, TrainConfig(epochs=2), EvoParams(), ModelConfig(classifier="proxy"), None, 7)
    assert eval_fitness(c, *args) == eval_fitness(c, *args)


def test_eval_fitness_cnn_patch():
    data = _datasets()
    base = Baseline(s_b=0.5, p_b=10**6, r_runs=1, test_accuracy=0.5)
    c = Chromosome(22, 22, ((0, 0), (-10, -10)))
    rec = eval_fitness(c, base, data, TrainConfig(epochs=1), EvoParams(), ModelConfig(), None, seed=3)
    assert rec.error is None and 0.0 <= rec.s_c <= 1.0
    assert rec.p_c == ModelConfig().parameter_count((22, 22, 2), 2)


def test_eval_fitness_failure_gives_zero():
    data = _datasets()
    base = Baseline(s_b=0.5, p_b=10**6, r_runs=1, test_accuracy=0.5)
    # too small for three conv/pool stages
    rec = eval_fitness(Chromosome(8, 8, ((0, 0),)), base, data, TrainConfig(epochs=1), EvoParams(), ModelConfig())
    assert rec.fitness == 0.0 and rec.error


def test_chromosome_seed_order_free():
    a = Chromosome(30, 30, ((1, 2), (3, 4)))
    b = Chromosome(30, 30, ((3, 4), (1, 2)))
    assert chromosome_seed(9, a) == chromosome_seed(9, b) != chromosome_seed(10, a)


def test_compute_baseline_reproducible():
    data = _datasets()
    cfg = ModelConfig(classifier="proxy")
    a = compute_baseline(data, cfg, TrainConfig(epochs=2), r_runs=3, seed=4)
    b = compute_baseline(data, cfg, TrainConfig(epochs=2), r_runs=3, seed=4)
    assert a == b
    assert len(a.val_accuracies) == 3
    assert a.s_b == pytest.approx(np.mean(a.val_accuracies))
    assert a.p_b == ModelConfig().parameter_count((64, 64, 1), 2)
    one = compute_baseline(data, cfg, TrainConfig(epochs=1), r_runs=1, seed=4)
    assert one.p_b == a.p_b


def test_baseline_json_roundtrip(tmp_path):
    b = Baseline(0.8, 1234, 3, 0.75, (0.7, 0.8, 0.9), (0.7, 0.75, 0.8), {"classifier": "cnn"})
    p = tmp_path / "b.json"
    import json

    p.write_text(json.dumps(b.to_dict()))
    assert Baseline.load(p) == b


def test_baseline_rejects_zero_accuracy():
    with pytest.raises(ValueError):
        Baseline(0.0, 10, 1, 0.0)


def test_parameter_ratio_full_vs_small_patches():
    cfg = ModelConfig()
    assert cfg.parameter_count((128, 128, 1), 3) / cfg.parameter_count((32, 32, 2), 3) >= 8


# --- generational loop ------------------------------------------------------


class FakeEval:
    """Deterministic cheap fitness: prefer patches near (10, 10) and fewer of them."""

    def __init__(self):
        self.calls = 0
        self.seen = []

    def __call__(self, c):
        self.calls += 1
        self.seen.append(c)
        d = np.mean([abs(p.x - 10) + abs(p.y - 10) for p in c.patches])
        return FitnessRecord(c, 1.0 / (1 + d), 0, math.exp(-0.05 * d - 0.1 * len(c)))


def test_evolve_history_and_elitism():
    p = EvoParams(population_size=20, generations=6, rng_seed=3)
    ev = FakeEval()
    res = evolve(p, ev, (128, 128))
    assert len(res.history) == p.generations + 1
    bests = [h.best_fitness for h in res.history]
    assert all(b2 >= b1 for b1, b2 in zip(bests, bests[1:]))
    ever = [h.best_ever_fitness for h in res.history]
    assert all(b2 >= b1 for b1, b2 in zip(ever, ever[1:]))
    assert res.best.fitness == ever[-1]
    assert len(res.population) == 20


def test_evolve_zero_generations():
    res = evolve(EvoParams(population_size=5, generations=0, tournament_size=3), FakeEval(), (128, 128))
    assert len(res.history) == 1


def test_evolve_deterministic():
    p = EvoParams(population_size=15, generations=4, rng_seed=11)
    a = evolve(p, FakeEval(), (128, 128))
    b = evolve(p, FakeEval(), (128, 128))
    assert a.best == b.best and a.history == b.history


def test_evolve_improves_fake_objective():
    p = EvoParams(population_size=30, generations=15, rng_seed=0)
    res = evolve(p, FakeEval(), (128, 128))
    assert res.history[-1].mean_fitness > res.history[0].mean_fitness
    assert res.history[-1].best_fitness >= res.history[0].best_fitness


def test_evolve_with_real_evaluator():
    data = _datasets()
    base = Baseline(s_b=0.5, p_b=10**6, r_runs=1, test_accuracy=0.5)
    params = EvoParams(population_size=6, generations=2, tournament_size=3, min_alpha=22, max_alpha=26,
                       min_beta=22, max_beta=26, max_patches=2, rng_seed=1)
    ev = Evaluator(base, data, TrainConfig(epochs=2), params, ModelConfig(classifier="proxy"), seed=5)
    res = evolve(params, ev, data.image_dims)
    assert len(res.history) == 3
    assert res.best.error is None
    assert len(ev.cache) <= ev.calls


def test_region_iou():
    img = GrayImage(np.zeros((100, 100), np.uint8), (50, 50))
    c = Chromosome(10, 10, ((0, 0), (30, 30)))
    # first patch matches the region exactly, second hits nothing
    assert region_iou(c, img, [(0, 0, 10, 10)]) == pytest.approx(0.5)


def test_mean_region_iou_uses_label_regions():
    imgs = [GrayImage(np.zeros((100, 100), np.uint8), (50, 50), label=k) for k in (0, 1)]
    c = Chromosome(10, 10, ((0, 0),))
    by_class = [[(0, 0, 10, 10)], [(40, 40, 10, 10)]]
    assert mean_region_iou(c, imgs, by_class) == pytest.approx(0.5)


# --- property tests ---------------------------------------------------------

bounds = st.tuples(st.integers(5, 40), st.integers(0, 12), st.integers(5, 40), st.integers(0, 12),
                   st.integers(1, 3), st.integers(0, 3))


def _params(b, **kw):
    a, da, bb, db, k, dk = b
    return EvoParams(min_alpha=a, max_alpha=a + da, min_beta=bb, max_beta=bb + db, min_patches=k,
                     max_patches=k + dk, **kw)


@settings(max_examples=200, deadline=None)
@given(bounds, st.integers(0, 2**32 - 1), st.integers(0, 120), st.integers(0, 120))
def test_prop_create_within_bounds(b, seed, extra_w, extra_h):
    p = _params(b)
    w, h = 2 * p.max_alpha + 1 + extra_w, 2 * p.max_beta + 1 + extra_h
    c = create_chromosome(p, (w, h), np.random.default_rng(seed))
    assert p.min_alpha <= c.alpha <= p.max_alpha and p.min_beta <= c.beta <= p.max_beta
    assert p.min_patches <= len(c) <= p.max_patches
    assert all(abs(g.x) <= w / 2 - c.alpha and abs(g.y) <= h / 2 - c.beta for g in c.patches)


@settings(max_examples=200, deadline=None)
@given(bounds, st.integers(0, 2**32 - 1))
def test_prop_mutation_keeps_limits_and_shape(b, seed):
    p = _params(b)
    rng = np.random.default_rng(seed)
    dims = (2 * p.max_alpha + 40, 2 * p.max_beta + 40)
    c = create_chromosome(p, dims, rng)
    for _ in range(10):
        m = mutate(c, p, dims, rng)
        assert p.min_patches <= len(m) <= p.max_patches
        assert (m.alpha, m.beta) == (c.alpha, c.beta)
        assert abs(len(m) - len(c)) <= 1
        c = m


@settings(max_examples=200, deadline=None)
@given(bounds, st.integers(0, 2**32 - 1))
def test_prop_crossover_preserves_lengths_and_sizes(b, seed):
    p = _params(b)
    rng = np.random.default_rng(seed)
    dims = (2 * p.max_alpha + 40, 2 * p.max_beta + 40)
    p1, p2 = create_chromosome(p, dims, rng), create_chromosome(p, dims, rng)
    seen = []
    crossover(p1, p2, lambda x: seen.append(x) or FitnessRecord(x, 0, 0, 0.0), rng)
    c1, c2 = seen
    assert (len(c1), c1.alpha, c1.beta) == (len(p1), p1.alpha, p1.beta)
    assert (len(c2), c2.alpha, c2.beta) == (len(p2), p2.alpha, p2.beta)
    assert sorted(c1.patches + c2.patches) == sorted(p1.patches + p2.patches)


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 10), st.integers(0, 4), st.integers(0, 2**32 - 1))
def test_prop_evolve_population_and_best_ever(n, gens, seed):
    p = EvoParams(population_size=n, generations=gens, tournament_size=min(3, n), rng_seed=seed)
    res = evolve(p, FakeEval(), (128, 128))
    assert all(h.population_size == n for h in res.history)
    ever = [h.best_ever_fitness for h in res.history]
    assert ever == sorted(ever)
