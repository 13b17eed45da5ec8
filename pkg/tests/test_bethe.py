import loopymp as lmp
import numpy as np
import pytest

from conftest import random_complete, random_tree


def test_uniform_beliefs_on_zero_graph():
    g = lmp.ising_graph(0, 0)
    b = lmp.BeliefSet.uniform(4, g.pairs)

    assert lmp.bethe_free_energy(g, b) == pytest.approx(-4 * np.log(2), abs=1e-12)
    assert lmp.consistency_distance(b) == pytest.approx(0.0, abs=1e-15)


def test_free_energy_at_exact_tree_marginals_is_minus_log_z(rng):
    for _ in range(200):
        g = random_tree(rng, int(rng.integers(1, 9)))
        b = lmp.exact_marginals(g).as_beliefs()

        assert lmp.bethe_free_energy(g, b) == pytest.approx(
            -lmp.partition_function_log(g), abs=1e-9
        )
        assert lmp.consistency_distance(b) == pytest.approx(0.0, abs=1e-9)


def test_free_energy_of_spa_fixed_point_on_tree(rng):
    g = random_tree(rng, 6)
    result = lmp.run_message_passing(g, lmp.RunConfig(iterations=20))

    assert lmp.bethe_free_energy(g, result.beliefs) == pytest.approx(
        -lmp.partition_function_log(g), abs=1e-8
    )


def test_batch_and_clustered_evaluation(rng):
    graphs = [random_complete(rng) for _ in range(4)]
    batch = lmp.GraphBatch.stack(graphs)
    beliefs = lmp.run_message_passing(batch).beliefs

    values = lmp.bethe_free_energy(batch, beliefs)
    assert values.shape == (4,)
    for i, g in enumerate(graphs):
        assert values[i] == pytest.approx(lmp.bethe_free_energy(g, beliefs[i]))
    assert np.allclose(
        lmp.bethe_free_energy(lmp.cluster_unaries(batch), beliefs), values
    )
    assert lmp.consistency_distance(beliefs).shape == (4,)


def test_consistency_distance_detects_mismatch():
    g = lmp.build_graph([0.0, 0.0], [(0, 1, 0.0)])
    b = lmp.BeliefSet.from_probabilities(
        np.array([[0.9, 0.1], [0.5, 0.5]]), np.full((1, 2, 2), 0.25), g.pairs
    )
    # rows of the pair table are uniform, single belief of variable 0 is not
    expected = 0.5 * np.log(0.5 / 0.9) + 0.5 * np.log(0.5 / 0.1)
    assert lmp.consistency_distance(b) == pytest.approx(expected)


def test_log_potentials():
    g = lmp.build_graph([0.5, -1.0], [(0, 1, 2.0)])
    log_psi, log_phi = lmp.log_potentials(g)

    assert log_psi.tolist() == [[0.5, -0.5], [-1.0, 1.0]]
    assert log_phi[0, 0, 0] == pytest.approx(0.5 + 2.0 - 1.0)
    assert log_phi[0, 1, 0] == pytest.approx(-0.5 - 2.0 - 1.0)


def test_gradient_with_respect_to_beliefs(rng):
    g = random_complete(rng, scale=1.0)
    beliefs = lmp.run_message_passing(g, lmp.RunConfig(iterations=3)).beliefs
    ad = lmp.autodiff

    def energy(log_pairs):
        return lmp.bethe_free_energy(
            g, lmp.BeliefSet(beliefs.log_singles, log_pairs, beliefs.edges)
        )

    tape = ad.Tape()
    out = energy(tape.variable(beliefs.log_pairs, "log_pairs"))
    _, grads = ad.backward(tape, 1.0, out)

    h = 1e-6
    x = np.array(beliefs.log_pairs)
    for index in [(0, 0, 0), (2, 1, 0), (5, 1, 1)]:
        up, down = x.copy(), x.copy()
        up[index] += h
        down[index] -= h
        numeric = (energy(up) - energy(down)) / (2 * h)
        assert grads["log_pairs"][index] == pytest.approx(numeric, rel=1e-5, abs=1e-8)
