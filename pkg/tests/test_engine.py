import csv
import loopymp as lmp
import networkx as nx
import numpy as np
import pytest

from conftest import random_complete, random_tree


def _spa(iterations, **kwargs):
    return lmp.RunConfig(iterations=iterations, **kwargs)


def test_spa_exact_on_random_trees(rng):
    for _ in range(200):
        g = random_tree(rng, int(rng.integers(1, 9)))
        diameter = nx.diameter(lmp.to_networkx(g))
        result = lmp.run_message_passing(g, _spa(diameter + 1, keep_history=False))
        exact = lmp.exact_marginals(g)

        assert np.max(np.abs(result.beliefs.singles - exact.singles)) < 1e-9
        assert np.max(np.abs(result.beliefs.pairs - exact.pairs)) < 1e-9


def test_spa_on_clustered_tree_is_exact(rng):
    for _ in range(20):
        g = random_tree(rng, 6)
        result = lmp.run_message_passing(lmp.cluster_unaries(g), _spa(12))

        assert np.allclose(
            result.beliefs.singles, lmp.exact_marginals(g).singles, atol=1e-9
        )


def test_single_edge_first_iteration():
    g = lmp.build_graph([0.0, 0.4], [(0, 1, 1.0)])
    result = lmp.run_message_passing(g, _spa(1))

    # variable messages start at zero, so the factor has nothing to pass yet
    assert np.allclose(result.messages.fn_to_vn, 0.0)
    assert np.allclose(result.messages.vn_to_fn, [0.0, 0.8])
    assert np.allclose(result.beliefs.llrs, [0.0, 0.8])

    result = lmp.run_message_passing(g, _spa(2))
    assert result.beliefs.llrs[0] == pytest.approx(lmp.spa_fn_update(1.0, 0.8))


def test_isolated_variables():
    g = lmp.build_graph([0.5, -1.0], [])
    result = lmp.run_message_passing(g, _spa(3))

    assert np.allclose(result.beliefs.llrs, [1.0, -2.0])
    assert result.converged is True


def test_zero_graph_gives_uniform_beliefs():
    result = lmp.run_message_passing(lmp.ising_graph(0, 0))

    assert np.allclose(result.beliefs.singles, 0.5)
    assert np.allclose(result.beliefs.pairs, 0.25)
    assert result.converged is True


def test_spin_flip_symmetry(rng):
    g = random_complete(rng)
    flipped = lmp.build_graph(-g.unary, g.edges)

    a = lmp.run_message_passing(g, _spa(7, momentum=0.2))
    b = lmp.run_message_passing(flipped, _spa(7, momentum=0.2))

    assert np.allclose(a.beliefs.llrs, -b.beliefs.llrs)
    assert np.allclose(a.beliefs.pairs, b.beliefs.pairs[..., ::-1, ::-1])


def test_beliefs_are_normalized(rng):
    result = lmp.run_message_passing(random_complete(rng), _spa(10))

    assert np.allclose(result.beliefs.singles.sum(axis=-1), 1.0)
    assert np.allclose(result.beliefs.pairs.sum(axis=(-2, -1)), 1.0)


def test_momentum_keeps_fixed_points(rng):
    g = random_complete(rng, scale=0.3)
    fixed = lmp.run_message_passing(g, _spa(200, keep_history=False))
    assert fixed.converged

    result = lmp.run_message_passing(
        g, _spa(5, momentum=0.5), initial=fixed.messages
    )
    assert np.allclose(result.messages.fn_to_vn, fixed.messages.fn_to_vn, atol=1e-10)
    assert np.allclose(result.beliefs.singles, fixed.beliefs.singles, atol=1e-10)


def test_momentum_damps_both_directions():
    g = lmp.build_graph([1.0, 0.0], [(0, 1, 1.0)])
    plain = lmp.run_message_passing(g, _spa(1))
    one = lmp.run_message_passing(g, _spa(1, momentum=0.25))
    two = lmp.run_message_passing(g, _spa(2, momentum=0.25))

    # first iteration: zero factor messages, variable messages damped from zero
    assert np.allclose(one.messages.fn_to_vn, 0.0)
    assert np.allclose(one.messages.vn_to_fn, 0.75 * plain.messages.vn_to_fn)
    assert np.allclose(one.messages.vn_to_fn, [1.5, 0.0])

    assert np.allclose(
        two.messages.fn_to_vn, [0.0, 0.75 * lmp.spa_fn_update(1.0, 1.5)]
    )


def test_resume_continues_iteration_count(rng):
    g = random_complete(rng)
    cfg = _spa(3, momentum=0.1)
    first = lmp.run_message_passing(g, cfg)
    resumed = lmp.run_message_passing(g, _spa(2, momentum=0.1), initial=first.messages)
    full = lmp.run_message_passing(g, _spa(5, momentum=0.1))

    assert resumed.messages.iteration == 5
    assert [s.iteration for s in resumed.trace] == [4, 5]
    assert np.allclose(resumed.messages.fn_to_vn, full.messages.fn_to_vn)
    assert np.allclose(resumed.beliefs.singles, full.beliefs.singles)


def test_history_and_trace(rng):
    result = lmp.run_message_passing(random_complete(rng), _spa(4))

    assert len(result.history) == 4
    assert [s.iteration for s in result.trace] == [1, 2, 3, 4]
    assert np.allclose(result.history[-1].singles, result.beliefs.singles)

    quiet = lmp.run_message_passing(random_complete(rng), _spa(4, keep_history=False))
    assert quiet.history == [] and quiet.trace == []


def test_batch_matches_single_runs(rng):
    graphs = [random_complete(rng) for _ in range(6)]
    batch = lmp.run_message_passing(lmp.GraphBatch.stack(graphs), _spa(8))

    assert batch.converged.shape == (6,)
    for i, g in enumerate(graphs):
        single = lmp.run_message_passing(g, _spa(8))
        assert np.allclose(batch.beliefs[i].singles, single.beliefs.singles)
        assert np.allclose(batch.beliefs[i].pairs, single.beliefs.pairs)


def test_beliefs_from_messages(rng):
    g = random_complete(rng)
    result = lmp.run_message_passing(g, _spa(6))
    beliefs = lmp.beliefs_from_messages(g, result.messages)

    assert np.allclose(beliefs.singles, result.beliefs.singles)
    assert np.allclose(beliefs.pairs, result.beliefs.pairs)


def test_messages_are_clamped():
    g = lmp.build_graph([20.0, 20.0], [(0, 1, 5.0)])
    result = lmp.run_message_passing(g, _spa(5))

    assert np.all(np.abs(result.messages.vn_to_fn) <= lmp.LLR_CLAMP)
    assert np.all(np.abs(result.messages.fn_to_vn) <= lmp.LLR_CLAMP)


def test_messages_stay_clamped_on_strong_couplings(rng):
    graphs = lmp.sample_spin_glasses(3.0, 10000, rng)
    result = lmp.run_message_passing(graphs, _spa(10))

    assert len(result.trace) == 10
    for state in result.trace:
        assert np.all(np.abs(state.fn_to_vn) <= lmp.LLR_CLAMP)
        assert np.all(np.abs(state.vn_to_fn) <= lmp.LLR_CLAMP)


def test_converged_spa_is_consistent(rng):
    graphs = lmp.sample_spin_glasses(2.0, 10000, rng)
    result = lmp.run_message_passing(graphs, _spa(100, keep_history=False))
    distance = lmp.consistency_distance(result.beliefs)

    assert result.converged.sum() > 5000
    assert np.all(distance[result.converged] < 1e-6)


def test_unary_llr():
    assert lmp.unary_llr(lmp.build_graph([0.25, -1.0], []), 1) == -2.0


def test_run_config_validation():
    with pytest.raises(lmp.ConfigurationError):
        lmp.RunConfig(iterations=0)
    with pytest.raises(lmp.ConfigurationError):
        lmp.RunConfig(momentum=1.0)
    with pytest.raises(lmp.ConfigurationError):
        lmp.RunConfig(momentum=-0.1)


def test_neural_rule_requirements(rng):
    g = random_complete(rng)
    params = lmp.init_params(5, seed=0)

    with pytest.raises(lmp.ConfigurationError):
        lmp.run_message_passing(g, lmp.RunConfig(update_rule=lmp.UpdateRule.NEURAL))
    with pytest.raises(lmp.ConfigurationError):
        lmp.run_message_passing(
            g, lmp.RunConfig(update_rule=lmp.UpdateRule.NEURAL), params
        )
    with pytest.raises(lmp.ConfigurationError):
        lmp.run_message_passing(
            lmp.cluster_unaries(g),
            lmp.RunConfig(update_rule=lmp.UpdateRule.NEURAL_EXTRINSIC),
            lmp.init_params(2, seed=0),
        )


def test_neural_rule_runs(rng):
    g = random_complete(rng)
    result = lmp.run_message_passing(
        lmp.cluster_unaries(g),
        lmp.RunConfig(iterations=5, update_rule=lmp.UpdateRule.NEURAL),
        lmp.init_params(5, seed=1),
    )

    assert np.all(np.isfinite(result.beliefs.llrs))
    assert np.allclose(result.beliefs.singles.sum(axis=-1), 1.0)


def test_dump_history_csv(tmp_path, rng):
    g = random_complete(rng)
    result = lmp.run_message_passing(g, _spa(3))
    path = str(tmp_path / "history.csv")
    lmp.dump_history_csv(result.trace, path)

    with open(path) as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["iteration", "message", "llr"]
    assert len(rows) == 1 + 3 * 4 * g.num_edges
    assert float(rows[-1][2]) == result.messages.vn_to_fn[-1]
