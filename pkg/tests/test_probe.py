import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from latent_probe import env as grasp
from latent_probe.agent import Encoder, Policy, returns
from latent_probe.nn import InitScheme
from latent_probe.probe import (
    ActivationSet,
    ProbeError,
    activations_for,
    capture_activations,
    collapse_detect,
    collect_probe_episodes,
    jacobi_eigh,
    organization,
    organization_score,
    pca_fit,
    pca_project,
    permutation_baseline,
    probe_activations,
    read_projection,
    scripted_driver,
)

from oracles import knn_reward_gap, svd_pca


def random_rotation(d, rng):
    q, r = np.linalg.qr(rng.normal(size=(d, d)))
    return q * np.sign(np.diag(r))


# --- eigensolver and PCA ---------------------------------------------------------

@pytest.mark.parametrize("n", [1, 2, 5, 64])
def test_jacobi_reconstructs_matrix(n):
    rng = np.random.default_rng(n)
    A = rng.normal(size=(n, n))
    A = A + A.T
    w, V = jacobi_eigh(A)
    np.testing.assert_allclose(V @ np.diag(w) @ V.T, A, atol=1e-8)
    np.testing.assert_allclose(V.T @ V, np.eye(n), atol=1e-10)
    np.testing.assert_allclose(np.sort(w), np.linalg.eigvalsh(A), atol=1e-8)


def test_pca_matches_svd_oracle():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(50, 64)) * np.linspace(3, 0.1, 64)
    model = pca_fit(X, 3)
    _, comps, Y_ref, var = svd_pca(X, 3)
    Y = pca_project(model, X)
    for j in range(3):
        sign = np.sign(np.dot(model.components[j], comps[j]))
        np.testing.assert_allclose(Y[:, j], sign * Y_ref[:, j], atol=1e-5)
    np.testing.assert_allclose(model.explained_variance, var, rtol=1e-8)


def test_pca_axis_aligned():
    rng = np.random.default_rng(1)
    # exactly uncorrelated, centred columns so the principal axes are the coordinate axes
    q, _ = np.linalg.qr(rng.normal(size=(40, 3)) - rng.normal(size=(40, 3)).mean(axis=0))
    q -= q.mean(axis=0)
    q, _ = np.linalg.qr(q)
    X = np.zeros((40, 64))
    X[:, 1:4] = q * [50.0, 30.0, 10.0]
    model = pca_fit(X, 3)
    assert np.isclose(model.explained_variance_ratio.sum(), 1.0)
    assert np.allclose(model.components[:, [0, 4, 5, 63]], 0, atol=1e-12)
    # Y reproduces the three varying coordinates, each with its own axis
    Y = pca_project(model, X)
    np.testing.assert_allclose(np.abs(Y), np.abs(X[:, 1:4] - X[:, 1:4].mean(axis=0)), atol=1e-9)


def test_pca_duplicated_data_same_components():
    X = np.random.default_rng(2).normal(size=(30, 8))
    a, b = pca_fit(X), pca_fit(np.vstack([X, X]))
    np.testing.assert_allclose(a.components, b.components, atol=1e-8)


def test_pca_sign_convention_and_contracts():
    model = pca_fit(np.random.default_rng(3).normal(size=(20, 10)))
    for row in model.components:
        assert row[np.argmax(np.abs(row))] > 0
    np.testing.assert_allclose(model.components @ model.components.T, np.eye(3), atol=1e-5)
    r = model.explained_variance_ratio
    assert np.all(np.diff(r) <= 0) and np.all((r >= 0) & (r <= 1))
    np.testing.assert_allclose(pca_project(model, model.mean[None]), 0, atol=1e-12)


def test_pca_errors():
    with pytest.raises(ValueError):
        pca_fit(np.zeros((3, 10)), 3)
    with pytest.raises(ValueError):
        pca_fit(np.zeros((10, 2)), 3)
    with pytest.raises(ValueError):
        pca_project(pca_fit(np.random.default_rng(0).normal(size=(10, 5))), np.zeros((2, 6)))


@settings(max_examples=25)
@given(st.integers(0, 10_000), st.floats(-100, 100))
def test_pca_translation_invariant(seed, shift):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(20, 12))
    c = shift * rng.normal(size=12)
    Y1 = pca_project(pca_fit(X), X)
    Y2 = pca_project(pca_fit(X + c), X + c)
    np.testing.assert_allclose(Y1, Y2, atol=1e-5)


@settings(max_examples=25)
@given(st.integers(0, 10_000))
def test_pca_projection_energy(seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(30, 10)) * rng.uniform(0.1, 3, size=10)
    model = pca_fit(X)
    Y = pca_project(model, X)
    np.testing.assert_allclose(Y.var(axis=0, ddof=1), model.explained_variance, rtol=1e-5)


@settings(max_examples=25)
@given(st.integers(0, 10_000))
def test_pca_projection_non_expansive(seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(15, 9))
    Y = pca_project(pca_fit(X), X)
    dx = np.linalg.norm(X[:, None] - X[None], axis=-1)
    dy = np.linalg.norm(Y[:, None] - Y[None], axis=-1)
    assert np.all(dy <= dx + 1e-9)


# --- collapse and organization -------------------------------------------------------

def test_collapse_examples():
    assert collapse_detect(np.ones((5, 64)))
    X = np.ones((50, 64))
    X[:, 7] = np.random.default_rng(0).normal(scale=0.1, size=50)
    assert not collapse_detect(X)
    with pytest.raises(ValueError):
        collapse_detect(np.ones((1, 64)))


def test_collapse_constructed_dead_network():
    policy = Policy("dense", 16, InitScheme("he_normal", 0))
    dense = [layer for layer in policy.base.layers if layer.params]
    dense[-1].params["W"][:] = -np.abs(dense[-1].params["W"])
    dense[-1].params["b"][:] = -1.0
    states = np.abs(np.random.default_rng(0).normal(size=(30, 16))).astype(np.float32)
    X = policy.activations(states)
    assert np.all(X == 0) and collapse_detect(X)
    assert organization_score(X, np.arange(30.0)) == 0


def test_organization_line_example():
    x = np.linspace(0, 1, 40)[:, None]
    assert organization_score(x, x[:, 0], k=2) >= 0.8


def test_organization_identical_points():
    org = organization(np.zeros((10, 64)), np.arange(10.0))
    assert org.score == 0 and org.collapsed


def test_organization_constant_rewards_degenerate():
    org = organization(np.random.default_rng(0).normal(size=(10, 4)), np.ones(10))
    assert org.score == 0 and org.degenerate


def test_organization_errors():
    with pytest.raises(ValueError):
        organization_score(np.zeros((5, 2)), np.arange(5.0), k=5)
    with pytest.raises(ValueError):
        organization_score(np.zeros((8, 2)), np.arange(7.0))


@settings(max_examples=30)
@given(st.integers(0, 10_000), st.integers(1, 6))
def test_organization_matches_oracle(seed, k):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(25, 5))
    r = rng.normal(size=25)
    assert np.isclose(organization_score(X, r, k), knn_reward_gap(X, r, k), atol=1e-12)


def test_organization_oracle_with_ties():
    # integer lattice: many equal distances, index order decides
    X = np.array([[i % 4, i // 4] for i in range(16)], float)
    r = np.random.default_rng(0).normal(size=16)
    assert np.isclose(organization_score(X, r, 3), knn_reward_gap(X, r, 3), atol=1e-12)


@settings(max_examples=25)
@given(st.integers(0, 10_000))
def test_organization_rotation_invariant(seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(30, 6))
    r = rng.normal(size=30)
    R = random_rotation(6, rng)
    assert np.isclose(organization_score(X, r), organization_score(X @ R.T + 3.0, r), atol=1e-9)


def test_permutation_baseline_centred_on_zero():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(120, 64))
    r = X[:, 0] + 0.1 * rng.normal(size=120)
    scores = permutation_baseline(X, r, 5, 100, np.random.default_rng(1))
    assert len(scores) == 100 and -0.1 < scores.mean() < 0.1


# --- activation capture ----------------------------------------------------------------

CFG = grasp.EnvConfig()


def scripted_episodes(n=3, seed=0):
    return collect_probe_episodes(CFG, scripted_driver(CFG, 0.3), np.random.default_rng(seed), n)


def test_probe_episode_labels():
    eps = scripted_episodes(1)
    state, _ = grasp.reset(CFG, 0)
    assert eps.rewards[0] == grasp.reward(state, False, CFG)
    assert eps.successful and len(eps) < 40
    # the last captured state precedes the grasp, so no label is the success bonus
    assert np.all(eps.rewards <= 0)
    full = np.append(eps.rewards[1:], 10.0)
    np.testing.assert_allclose(eps.returns, returns(full, 0.99), atol=1e-12)
    np.testing.assert_array_equal(eps.step, np.arange(len(eps)))


def test_capture_rows_and_determinism():
    vae_free = Policy("conv", 64, InitScheme("he_normal", 0))
    enc = Encoder("image")
    a = capture_activations(vae_free, CFG, enc, np.random.default_rng(0), driver=scripted_driver(CFG, 0.3))
    b = capture_activations(vae_free, CFG, enc, np.random.default_rng(0), driver=scripted_driver(CFG, 0.3))
    assert a.X.shape[1] == 64 and len(a.X) <= 120
    assert len(set(a.episode.tolist())) == 3
    assert a.X.tobytes() == b.X.tobytes() and a.rewards.tobytes() == b.rewards.tobytes()


def test_fallback_and_error_for_never_succeeding_driver():
    never = lambda state, obs, rng: 0
    eps = collect_probe_episodes(CFG, never, np.random.default_rng(0), 3, max_attempts=5)
    assert not eps.successful and len(eps) == 120
    with pytest.raises(ProbeError):
        collect_probe_episodes(CFG, never, np.random.default_rng(0), 3, max_attempts=5, fallback=False)
    policy = Policy("dense", 4, InitScheme("he_normal", 0))
    enc = Encoder("latent", vae=_StubVAE())
    acts = activations_for(policy, enc, eps)
    assert "unsuccessful_fallback" in acts.flags


class _StubVAE:
    latent_dim = 4

    def encode_mean(self, s):
        flat = s.reshape(len(s), -1)
        return flat[:, :4], flat[:, :4]


def test_random_inputs_keep_labels():
    eps = scripted_episodes(2)
    policy = Policy("dense", 4, InitScheme("he_normal", 0))
    acts = activations_for(policy, Encoder("latent", vae=_StubVAE()), eps, random_inputs=True,
                           rng=np.random.default_rng(0))
    assert "random_inputs" in acts.flags
    np.testing.assert_array_equal(acts.rewards, eps.rewards)


def test_activation_csv_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    acts = ActivationSet(rng.normal(size=(6, 64)).astype(np.float32), rng.normal(size=6), rng.normal(size=6),
                         np.array([0, 0, 0, 1, 1, 1]), np.array([0, 1, 2, 0, 1, 2]))
    acts.write_csv(tmp_path / "a.csv")
    back = ActivationSet.read_csv(tmp_path / "a.csv")
    assert back.X.tobytes() == acts.X.tobytes()
    np.testing.assert_array_equal(back.rewards, acts.rewards)
    np.testing.assert_array_equal(back.returns, acts.returns)
    with pytest.raises(ValueError):
        ActivationSet(acts.X, acts.rewards[:5], acts.returns, acts.episode, acts.step)


def test_probe_report_contract_and_files(tmp_path):
    rng = np.random.default_rng(0)
    acts = ActivationSet(np.zeros((10, 64), np.float32), rng.normal(size=10), rng.normal(size=10),
                         np.zeros(10, int), np.arange(10))
    report = probe_activations(acts)
    assert report.collapsed and report.score == 0
    paths = report.write(tmp_path, "dead")
    Y, r = read_projection(paths["projection"])
    assert Y.shape == (10, 3)
    np.testing.assert_array_equal(r, acts.rewards)
