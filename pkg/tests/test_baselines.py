import numpy as np
import pytest

from tonel.baselines import (
    PcaModel,
    RankDeficientWarning,
    jacobi_eigh,
    load_pca,
    pca_fit,
    pca_project,
    save_pca,
)
from tonel.cim_noise import get_profile
from tonel.errors import ConfigError, DataError, ShapeMismatch
from tonel.retrieval import IdentityProjector, PcaProjector, make_grid, run_experiment


def test_line_data():
    t = np.linspace(-1, 1, 21)
    m = pca_fit(np.stack([t, t], axis=1), 2)
    assert np.allclose(m.components[:, 0], [1 / np.sqrt(2), 1 / np.sqrt(2)])
    assert m.explained_variance[1] == 0.0 and m.degenerate.tolist() == [False, True]


def test_isotropic_variances():
    x = np.random.default_rng(0).standard_normal((20000, 3)) * 2.0
    m = pca_fit(x, 3)
    assert np.allclose(m.explained_variance, 4.0, rtol=0.05)


def test_repeated_point_all_degenerate():
    with pytest.warns(RankDeficientWarning):
        m = pca_fit(np.ones((5, 3)), 2)
    assert m.degenerate.all() and not m.explained_variance.any()


def test_fit_errors():
    with pytest.raises(ConfigError):
        pca_fit(np.zeros((3, 2)), 3)
    with pytest.raises(DataError):
        pca_fit(np.zeros((1, 2)), 1)
    with pytest.raises(ConfigError):
        pca_fit(np.eye(3), 1, solver="svd")


def test_projection_examples(rng):
    x = rng.standard_normal((50, 6))
    m = pca_fit(x, 3)
    assert np.allclose(pca_project(m, m.mean), 0)
    assert np.allclose(pca_project(m, m.mean + m.components[:, 0]), [1, 0, 0])
    y = rng.standard_normal((4, 6))
    assert np.allclose(pca_project(m, y), (y - x.mean(0)) @ m.components)
    with pytest.raises(ShapeMismatch):
        pca_project(m, np.zeros(5))


def test_invariants(rng):
    x = rng.standard_normal((300, 10)) @ rng.standard_normal((10, 10))
    m = pca_fit(x, 4)
    assert np.allclose(m.components.T @ m.components, np.eye(4), atol=1e-5)
    assert (np.diff(m.explained_variance) <= 0).all()
    proj_var = pca_project(m, x).var(axis=0, ddof=1).sum()
    assert np.isclose(proj_var, m.explained_variance.sum(), rtol=1e-4)
    # reconstruction error = total variance - retained
    xc = x - x.mean(0)
    recon = pca_project(m, x) @ m.components.T
    err = ((xc - recon) ** 2).sum() / (len(x) - 1)
    total = xc.var(axis=0, ddof=1).sum()
    assert np.isclose(err, total - m.explained_variance.sum(), rtol=1e-4)
    # sign convention
    idx = np.argmax(np.abs(m.components), axis=0)
    assert (m.components[idx, np.arange(4)] > 0).all()


def test_matches_sklearn(rng):
    from sklearn.decomposition import PCA
    x = rng.standard_normal((200, 12)) @ np.diag(np.arange(12, 0, -1.0))
    m = pca_fit(x, 5)
    ref = PCA(5, svd_solver="full").fit(x)
    assert np.allclose(m.explained_variance, ref.explained_variance_, rtol=1e-8)
    assert np.allclose(np.abs(m.components.T @ ref.components_.T), np.eye(5), atol=1e-6)


@pytest.mark.parametrize("n", [1, 2, 5, 16, 33])
def test_jacobi_matches_lapack(n, rng):
    a = rng.standard_normal((n, n))
    a = a + a.T
    vals, vecs = jacobi_eigh(a)
    assert np.allclose(np.sort(vals), np.linalg.eigvalsh(a), atol=1e-10)
    assert np.allclose(vecs.T @ vecs, np.eye(n), atol=1e-10)
    assert np.allclose(a @ vecs, vecs * vals, atol=1e-9)


def test_jacobi_solver_in_pca(rng):
    x = rng.standard_normal((100, 20)) @ rng.standard_normal((20, 20))
    a, b = pca_fit(x, 6, solver="jacobi"), pca_fit(x, 6)
    assert np.allclose(a.explained_variance, b.explained_variance, rtol=1e-9)
    assert np.allclose(a.components, b.components, atol=1e-7)


def test_jacobi_rejects_asymmetric():
    with pytest.raises(DataError):
        jacobi_eigh(np.array([[1.0, 2.0], [0.0, 1.0]]))


def test_round_trip(tmp_path, rng):
    m = pca_fit(rng.standard_normal((30, 5)), 3)
    save_pca(m, tmp_path / "p.tpca")
    back = load_pca(tmp_path / "p.tpca")
    assert np.allclose(back.components, m.components, atol=1e-6)
    assert back.degenerate.tolist() == m.degenerate.tolist()


def test_shares_the_quantized_pipeline(rng):
    docs = rng.standard_normal((60, 8)).astype(np.float32)
    queries = rng.standard_normal((10, 8)).astype(np.float32)
    ident = PcaModel(np.zeros(8), np.eye(8), np.ones(8), np.zeros(8, bool))
    grid = make_grid([get_profile("Device-2")], [0.0, 1.0], [1.0, 4.0], seed=3)
    a = run_experiment(PcaProjector(ident), docs, queries, grid)
    b = run_experiment(IdentityProjector(), docs, queries, grid)
    for ra, rb in zip(a, b):
        assert (ra.acc_at_1, ra.prec_at_5, ra.ndcg_at_5) == (rb.acc_at_1, rb.prec_at_5, rb.ndcg_at_5)
