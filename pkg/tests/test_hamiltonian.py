import numpy as np
import pytest

from jellium2d.hamiltonian import (
    Configuration,
    SingularConfigurationError,
    blow_up,
    eval_wn,
    grad_wn,
    interaction_potential_u,
    one_point_move_delta,
    split_energy,
)
from jellium2d.potential import power_potential, solve_equilibrium


@pytest.fixture(scope="module")
def measure():
    return solve_equilibrium(power_potential(2.0))


def test_eval_wn_hand_examples(measure):
    pot = measure.potential
    c = Configuration(np.array([[0.0, 0.0], [1.0, 0.0]]))
    assert abs(eval_wn(c, pot) - 2.0) < 1e-12
    c = Configuration(np.array([[0.5, 0.0], [-0.5, 0.0]]))
    assert abs(eval_wn(c, pot) - 1.0) < 1e-12
    c = Configuration(np.array([[0.3, 0.4]]))
    assert abs(eval_wn(c, pot) - 0.25) < 1e-15


def test_eval_wn_brute_force(measure):
    pot = measure.potential
    rng = np.random.default_rng(3)
    pts = rng.uniform(-1, 1, (6, 2))
    c = Configuration(pts)
    total = 0.0
    for i in range(6):
        total += 6 * (pts[i, 0] ** 2 + pts[i, 1] ** 2)
        for j in range(6):
            if i != j:
                total -= np.log(np.linalg.norm(pts[i] - pts[j]))
    assert abs(eval_wn(c, pot) - total) < 1e-10 * max(1, abs(total))


def test_eval_wn_permutation_invariant(measure):
    pot = measure.potential
    rng = np.random.default_rng(5)
    pts = rng.uniform(-1, 1, (12, 2))
    v0 = eval_wn(Configuration(pts), pot)
    for seed in range(5):
        perm = np.random.default_rng(seed).permutation(12)
        v = eval_wn(Configuration(pts[perm]), pot)
        assert abs(v - v0) <= 1e-12 * max(1, abs(v0))


def test_singular_configuration(measure):
    pot = measure.potential
    pts = np.array([[0.1, 0.2], [0.1, 0.2]])
    with pytest.raises(SingularConfigurationError):
        eval_wn(Configuration(pts), pot)
    with pytest.raises(SingularConfigurationError):
        grad_wn(Configuration(pts), pot)


def test_grad_symmetric_pair_stationary(measure):
    pot = measure.potential
    c = Configuration(np.array([[0.5, 0.0], [-0.5, 0.0]]))
    g = grad_wn(c, pot)
    assert np.max(np.abs(g)) < 1e-12
    c1 = Configuration(np.array([[0.0, 0.0]]))
    assert np.max(np.abs(grad_wn(c1, pot))) == 0.0


def test_grad_finite_differences(measure):
    pot = measure.potential
    h = 1e-6
    for n, seed in [(3, 0), (5, 1), (8, 2)]:
        for rep in range(7):
            rng = np.random.default_rng(100 * seed + rep)
            pts = rng.uniform(-1, 1, (n, 2))
            g = grad_wn(Configuration(pts), pot)
            fd = np.zeros_like(g)
            for i in range(n):
                for k in range(2):
                    p1 = pts.copy()
                    p1[i, k] += h
                    p2 = pts.copy()
                    p2[i, k] -= h
                    fd[i, k] = (eval_wn(Configuration(p1), pot)
                                - eval_wn(Configuration(p2), pot)) / (2 * h)
            assert np.max(np.abs(g - fd)) < 1e-5 * max(1.0, np.max(np.abs(g)))


def test_blow_up(measure):
    c = Configuration(np.array([[0.5, 0.0], [0.1, 0.2], [-0.3, 0.3], [0.0, -0.4]]))
    b = blow_up(c, measure)
    assert np.allclose(b.points_prime[0], [1.0, 0.0])
    assert abs(b.support_radius_prime - 2.0) < 1e-14
    x = np.array([0.6, -0.8])
    assert abs(b.background_density(2 * x) - measure.density(x)) < 1e-14


def test_background_field_uniform_disk(measure):
    # for V=|x|^2 the blown background is a uniform disk of density 1/pi and
    # radius sqrt(n); its field contribution is -x inside
    c = Configuration(np.random.default_rng(0).uniform(-0.5, 0.5, (9, 2)))
    b = blow_up(c, measure)
    rn = np.sqrt(9)
    for x in [np.array([0.5, 0.2]), np.array([-2.0, 1.0]), np.array([0.0, 2.9])]:
        assert np.linalg.norm(b.background_field(x) - (-x)) < 1e-12
    x = np.array([5.0, 0.0])  # outside the blown support, monopole of charge n
    assert np.linalg.norm(b.background_field(x) - (-9.0 * x / 25.0)) < 1e-10


def test_background_log_potential_n1(measure):
    c = Configuration(np.array([[0.0, 0.0]]))
    b = blow_up(c, measure)
    # n=1: (log*m0')(z) = -U(|z|) = -(1-r^2)/2 inside the unit disk
    for r in [0.0, 0.3, 0.9]:
        assert abs(b.background_log_potential(np.array([r, 0.0]))
                   - (-(1 - r ** 2) / 2)) < 1e-12
    assert abs(b.background_log_potential(np.array([3.0, 0.0])) - np.log(3.0)) < 1e-12


def test_split_energy_identity_and_n1(measure):
    c = Configuration(np.array([[0.0, 0.0]]))
    s = split_energy(c, measure)
    assert s.residual() < 1e-12
    assert abs(s.renormalized_energy - (-3 * np.pi / 4)) < 1e-10
    assert s.zeta_term == 0.0

    rng = np.random.default_rng(11)
    pts = 0.7 * rng.uniform(-1, 1, (15, 2))
    s = split_energy(Configuration(pts), measure)
    assert s.residual() < 1e-9
    assert s.zeta_term == 0.0  # all points inside the support

    pts2 = pts.copy()
    pts2[0] = [2.5, 0.0]
    s2 = split_energy(Configuration(pts2), measure)
    assert s2.zeta_term > 0


def test_one_point_move_dual_path(measure):
    rng = np.random.default_rng(21)
    pts = 0.6 * rng.uniform(-1, 1, (8, 2))
    c = Configuration(pts)
    for rep in range(20):
        i = int(rng.integers(0, 8))
        y = 0.9 * rng.uniform(-1, 1, 2)
        da, db = one_point_move_delta(c, i, y, measure)
        scale = max(1.0, abs(da))
        assert abs(da - db) < 1e-8 * scale
    # identity move
    da, db = one_point_move_delta(c, 0, pts[0], measure)
    assert abs(da) < 1e-9 and abs(db) < 1e-12
    # collision sentinel
    da, db = one_point_move_delta(c, 0, pts[1], measure)
    assert np.isinf(da) and np.isinf(db)


def test_interaction_potential_infinite_at_other_point(measure):
    pts = np.array([[0.1, 0.0], [-0.1, 0.0]])
    c = Configuration(pts)
    rn = np.sqrt(2)
    assert np.isinf(interaction_potential_u(c, 0, measure, rn * pts[1]))


def test_configuration_json_roundtrip():
    c = Configuration(np.array([[0.1, 0.2], [0.3, -0.4]]))
    c2 = Configuration.from_json(c.to_json())
    assert np.array_equal(c.points, c2.points)
    with pytest.raises(ValueError):
        Configuration.from_json('{"n": 3, "points": [[0,0]]}')
