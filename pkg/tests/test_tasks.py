import numpy as np
import pytest

from pcotta import geometry as geo
from pcotta import tasks as tk
from pcotta.errors import ConfigError, ContractError
from pcotta.tasks import TaskKind


def _spec(category="sphere", style="SRC_A", seed=3, n=128):
    return geo.ShapeSpec(category, style, seed, n)


# ---- per-task pairs


def test_reconstruction_input_is_quarter_subset():
    inp, tgt = tk.make_reconstruction_sample(_spec(), seed=5)
    assert inp.shape == (32, 3) and tgt.shape == (128, 3)
    rows = {tuple(p) for p in tgt}
    assert all(tuple(p) in rows for p in inp)
    assert geo.chamfer_value(inp, tgt) > 0


def test_denoising_zero_sigma_no_outliers_is_exact():
    inp, tgt = tk.make_denoising_sample(_spec(), 0.0, seed=1, outlier_rate=0.0)
    assert inp.shape == tgt.shape
    assert geo.chamfer_value(inp, tgt) < 1e-12


def test_denoising_negative_sigma_rejected():
    with pytest.raises(ContractError):
        tk.make_denoising_sample(_spec(), -0.1, seed=1)


def test_denoising_cd_grows_with_sigma():
    # Monte-Carlo over 20 seeds, outliers included
    means = []
    for sigma in (0.01, 0.02, 0.04):
        cds = [geo.chamfer_value(*tk.make_denoising_sample(_spec(seed=s), sigma, seed=s)) for s in range(20)]
        means.append(np.mean(cds))
    assert means[0] < means[1] < means[2]


def test_registration_identity_and_determinism():
    inp, tgt = tk.make_registration_sample(_spec(), seed=2, max_angle=0.0)
    assert inp.shape == tgt.shape
    assert geo.chamfer_value(inp, tgt) < 1e-10
    inp, tgt = tk.make_registration_sample(_spec(), seed=9)
    again = geo.apply_transform(tgt, tk.registration_transform(9))
    assert geo.chamfer_value(inp, tgt) == geo.chamfer_value(again, tgt)
    np.testing.assert_array_equal(inp, again)


def test_task_kind_parse():
    assert TaskKind.parse("denoising") is TaskKind.DENOISING
    assert TaskKind.parse(TaskKind.REGISTRATION) is TaskKind.REGISTRATION
    with pytest.raises(ConfigError):
        TaskKind.parse("segmentation")


# ---- pretrain set


def test_pretrain_set_contract():
    samples = tk.build_pretrain_set(("SRC_A", "SRC_B"), 200, seed=0, n_points=32)
    assert len(samples) == 400
    assert all(s.query_domain != s.prompt_domain for s in samples)
    assert all(s.prompt_input is not None and s.task == s.task for s in samples)
    counts = np.bincount([int(s.task) for s in samples], minlength=3)
    assert counts.max() - counts.min() <= 1


def test_pretrain_set_needs_two_domains():
    with pytest.raises(ConfigError):
        tk.build_pretrain_set(("SRC_A",), 4)


# ---- prompt pool and schedule


def _toy_encoder(cloud):
    # deterministic stand-in: 4 tokens of sorted coordinate statistics
    c = np.asarray(cloud, np.float64)
    return (np.stack([c.mean(0), c.std(0), c.min(0), c.max(0)]) + 0.5).astype(np.float32)


def _pool(n_points=32):
    return tk.PromptPool.from_samples(tk.build_pretrain_set(n_per_domain=12, seed=4, n_points=n_points), _toy_encoder)


def test_schedule_blocks_and_determinism():
    a = tk.build_stream_schedule(("TGT_A", "TGT_B"), 5, rounds=3, seed=7, n_points=32)
    b = tk.build_stream_schedule(("TGT_A", "TGT_B"), 5, rounds=3, seed=7, n_points=32)
    assert a.blocks() == [(r, d) for r in (1, 2, 3) for d in ("TGT_A", "TGT_B")]
    assert len(a) == 30
    assert a.identity() == b.identity()
    # every round revisits the same samples in the same order
    first = [it.sample.uid for it in a if it.round == 1]
    assert first == [it.sample.uid for it in a if it.round == 3]


def test_schedule_rejects_bad_arguments():
    with pytest.raises(ConfigError):
        tk.build_stream_schedule(rounds=0)
    with pytest.raises(ConfigError):
        tk.build_stream_schedule(n_per_domain=2, prompt_pool=_pool(), encoder=None, n_points=32)


def test_prompt_selection_matches_exhaustive_scan():
    pool = _pool()
    sched = tk.build_stream_schedule(("TGT_A", "TGT_B"), 6, rounds=1, seed=1, prompt_pool=pool, encoder=_toy_encoder, n_points=32)
    for it in sched:
        q = _toy_encoder(it.sample.query_input).astype(np.float64)
        best, best_score = None, -np.inf
        for j in range(len(pool)):
            if pool.tasks[j] != int(it.sample.task):
                continue
            f = pool.features[j].astype(np.float64)
            score = np.mean([f[r] @ q[r] / (np.linalg.norm(f[r]) * np.linalg.norm(q[r])) for r in range(len(q))])
            if score > best_score + 1e-12:
                best, best_score = j, score
        assert it.prompt_index == best
        assert it.sample.prompt_domain == pool.domains[best]


def test_pool_round_trip_and_selection_does_not_mutate(tmp_path):
    pool = _pool()
    before = pool.checksum()
    tk.build_stream_schedule(("TGT_A",), 4, rounds=2, seed=0, prompt_pool=pool, encoder=_toy_encoder, n_points=32)
    assert pool.checksum() == before
    pool.save(tmp_path / "pool")
    back = tk.PromptPool.load(tmp_path / "pool")
    assert back.checksum() == before
    assert back.domains == pool.domains


def test_pool_missing_task():
    pool = _pool()
    keep = pool.tasks != int(TaskKind.DENOISING)
    sub = tk.PromptPool(pool.tasks[keep], [], [], [], pool.features[keep])
    with pytest.raises(ConfigError):
        sub.nearest(pool.features[0], TaskKind.DENOISING)


# ---- evaluation


def test_evaluate_hand_computed_group():
    tgt = np.zeros((1, 3))
    preds = [np.array([[0.1, 0, 0]]), np.array([[0.2, 0, 0]]), np.array([[0.0, 0.3, 0]])]
    # single-point clouds: CD = 2 * squared distance
    cds = np.array([0.02, 0.08, 0.18])
    rep = tk.evaluate(preds, [tgt] * 3, [(1, "TGT_A", "reconstruction")] * 3)
    assert len(rep) == 1
    row = rep.rows[0]
    assert row.n == 3
    # float32 Chamfer kernel
    assert row.cd_mean == pytest.approx(cds.mean(), abs=1e-7)
    assert row.cd_std == pytest.approx(np.sqrt(np.mean((cds - cds.mean()) ** 2)), abs=1e-7)


def test_evaluate_single_and_perfect():
    c = np.random.default_rng(0).normal(size=(10, 3))
    rep = tk.evaluate([c, c], [c, c], [(1, "TGT_A", "denoising"), (1, "TGT_B", "denoising")])
    assert [r.cd_mean for r in rep.rows] == [0.0, 0.0]
    assert [r.cd_std for r in rep.rows] == [0.0, 0.0]


def test_evaluate_orders_rows_and_checks_lengths():
    c = np.zeros((2, 3))
    keys = [(2, "TGT_B", "registration"), (1, "TGT_B", "denoising"), (1, "TGT_A", "reconstruction"), (1, "TGT_B", "reconstruction")]
    rep = tk.evaluate([c] * 4, [c] * 4, keys)
    assert [(r.round, r.domain, r.task) for r in rep.rows] == [
        (1, "TGT_B", "reconstruction"),
        (1, "TGT_B", "denoising"),
        (1, "TGT_A", "reconstruction"),
        (2, "TGT_B", "registration"),
    ]
    with pytest.raises(ContractError):
        tk.evaluate([c], [c, c], keys[:2])
    with pytest.raises(ContractError):
        tk.evaluate([c], [c], [(1, "TGT_A")])


def test_report_csv_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    preds = [rng.normal(size=(6, 3)) for _ in range(6)]
    tgts = [rng.normal(size=(6, 3)) for _ in range(6)]
    keys = [(1 + i % 2, "TGT_A", TaskKind(i % 3).label) for i in range(6)]
    rep = tk.evaluate(preds, tgts, keys, seconds=[0.5] * 6)
    rep.to_csv(tmp_path / "r.csv")
    back = tk.AdaptationReport.from_csv(tmp_path / "r.csv")
    assert back.rows == rep.rows
    assert back.to_csv() == rep.to_csv()
    total = sum(r.cd_mean * r.n for r in rep.rows) / 6
    assert rep.mean_cd() == pytest.approx(total)
