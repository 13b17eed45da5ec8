import csv
import loopymp as lmp
import numpy as np
import pytest

from conftest import bethe_gradient_norm, random_complete, random_tree


def test_zero_graph_stays_uniform():
    g = lmp.ising_graph(0, 0)
    beliefs, trace = lmp.cccp_minimize(g)

    assert np.allclose(beliefs.singles, 0.5)
    assert np.allclose(beliefs.pairs, 0.25)
    assert trace.free_energy.shape == (25,)
    assert np.allclose(trace.free_energy, -4 * np.log(2))


def test_exact_on_weak_trees(rng):
    cfg = lmp.CccpConfig(outer_iters=60, inner_iters=60)
    for _ in range(5):
        g = random_tree(rng, 5, scale=0.5)
        beliefs, trace = lmp.cccp_minimize(g, cfg)

        assert np.allclose(beliefs.singles, lmp.exact_marginals(g).singles, atol=1e-5)
        assert trace.consistency[-1] < 1e-8
        assert trace.free_energy[-1] == pytest.approx(
            -lmp.partition_function_log(g), abs=1e-6
        )


def test_free_energy_trace_is_monotone(rng):
    graphs = lmp.sample_spin_glasses(3.0, 1000, rng)
    beliefs, trace = lmp.cccp_minimize(graphs)

    assert trace.free_energy.shape == (25, 1000)
    assert np.all(np.diff(trace.free_energy, axis=0) <= 1e-9)

    distance = lmp.consistency_distance(beliefs)
    assert np.mean(distance <= 1e-5) >= 0.99
    assert np.allclose(trace.consistency[-1], distance)

    uniform = lmp.BeliefSet.uniform(4, graphs.pairs, (1000,))
    assert np.all(trace.free_energy[-1] <= lmp.bethe_free_energy(graphs, uniform))


def test_batch_matches_single_graphs(rng):
    graphs = [random_complete(rng) for _ in range(3)]
    cfg = lmp.CccpConfig(outer_iters=5, inner_iters=10)
    batch, _ = lmp.cccp_minimize(lmp.GraphBatch.stack(graphs), cfg)

    for i, g in enumerate(graphs):
        single, _ = lmp.cccp_minimize(g, cfg)
        assert np.allclose(batch[i].singles, single.singles)


def test_clustered_graph_uses_source(rng):
    g = random_complete(rng)
    cfg = lmp.CccpConfig(outer_iters=3, inner_iters=5)

    a, _ = lmp.cccp_minimize(g, cfg)
    b, _ = lmp.cccp_minimize(lmp.cluster_unaries(g), cfg)
    assert np.allclose(a.singles, b.singles)


def test_initial_beliefs(rng):
    g = random_tree(rng, 4, scale=0.5)
    exact = lmp.exact_marginals(g).as_beliefs()
    beliefs, trace = lmp.cccp_minimize(
        g, lmp.CccpConfig(outer_iters=1, inner_iters=200), initial=exact
    )

    # the exact marginals of a tree are a fixed point of the outer loop
    assert np.allclose(beliefs.singles, exact.singles, atol=1e-6)


def test_config_validation():
    with pytest.raises(lmp.ConfigurationError):
        lmp.CccpConfig(outer_iters=0)
    with pytest.raises(lmp.ConfigurationError):
        lmp.CccpConfig(inner_iters=0)


def test_write_trace_csv(tmp_path, rng):
    _, trace = lmp.cccp_minimize(random_complete(rng), lmp.CccpConfig(outer_iters=4))
    path = str(tmp_path / "trace.csv")
    lmp.write_trace_csv(trace, path)

    with open(path) as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["outer_iter", "f_bethe", "consistency_distance"]
    assert [r[0] for r in rows[1:]] == ["1", "2", "3", "4"]
    assert float(rows[-1][1]) == trace.free_energy[-1]


def test_antiferromagnetic_minimum_is_unique(rng):
    cfg = lmp.CccpConfig(outer_iters=100)
    starts = 10
    for theta in (-1.0, 0.0, 0.5, 1.5):
        for j in (-0.25, -1.0, -2.0):
            g = lmp.ising_graph(theta, j)
            graphs = lmp.GraphBatch.stack([g] * starts)
            p = rng.uniform(0.05, 0.95, size=(starts, 4))
            initial = lmp.BeliefSet(
                np.log(np.stack([p, 1 - p], -1)),
                np.full((starts, 6, 2, 2), -np.log(4)),
                g.pairs,
            )
            _, trace = lmp.cccp_minimize(graphs, cfg, initial=initial)

            final = trace.free_energy[-1]
            assert np.ptp(final) < 1e-6


@pytest.mark.slow
def test_cccp_and_converged_spa_are_stationary(rng):
    graphs = [random_complete(rng, scale=1.0) for _ in range(30)]
    run_cfg = lmp.RunConfig(iterations=200, keep_history=False)
    cccp_cfg = lmp.CccpConfig(outer_iters=500, inner_iters=50)

    converged = 0
    for g in graphs:
        result = lmp.run_message_passing(g, run_cfg)
        if not result.converged:
            continue
        converged += 1
        cccp_beliefs, _ = lmp.cccp_minimize(g, cccp_cfg)

        assert bethe_gradient_norm(g, result.beliefs) < 1e-4
        assert bethe_gradient_norm(g, cccp_beliefs) < 1e-4
    assert converged >= 20
