import loopymp as lmp
import numpy as np
import pytest


def random_tree(rng, num_vars, scale=2.0):
    parents = [int(rng.integers(0, i)) for i in range(1, num_vars)]
    return lmp.build_graph(
        rng.uniform(-scale, scale, num_vars),
        [(p, i, rng.uniform(-scale, scale)) for i, p in enumerate(parents, start=1)],
    )


def random_complete(rng, num_vars=4, scale=2.0):
    return lmp.build_graph(
        rng.uniform(-scale, scale, num_vars),
        [(n, m, rng.uniform(-scale, scale)) for n, m in lmp.complete_pairs(num_vars)],
    )


@pytest.fixture
def rng():
    return np.random.default_rng(20201216)


def bethe_gradient_norm(g, beliefs, h=1e-6):
    """Norm of the Bethe free energy gradient along the local polytope.

    A binary pairwise belief set is parametrized by b_n(+1) and b_nm(+1, +1);
    every other entry follows from normalization and marginalization.
    """
    coords = np.concatenate([beliefs.singles[:, 0], beliefs.pairs[:, 0, 0]])
    n, m = g.pairs[:, 0], g.pairs[:, 1]

    def free_energy(z):
        p, x = z[: g.num_vars], z[g.num_vars :]
        singles = np.stack([p, 1 - p], -1)
        pairs = np.stack(
            [
                np.stack([x, p[n] - x], -1),
                np.stack([p[m] - x, 1 - p[n] - p[m] + x], -1),
            ],
            -2,
        )
        return lmp.bethe_free_energy(
            g, lmp.BeliefSet(np.log(singles), np.log(pairs), g.pairs)
        )

    grad = np.zeros(len(coords))
    for k in range(len(coords)):
        step = np.zeros(len(coords))
        step[k] = h
        grad[k] = (free_energy(coords + step) - free_energy(coords - step)) / (2 * h)
    return float(np.linalg.norm(grad))
