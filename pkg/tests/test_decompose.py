"""Representation losses: variational log-likelihoods against closed-form
densities, CLUB estimates against brute-force double loops, pair-weight
identities, and the stop-gradient boundaries."""

import math

import numpy as np
import pytest

from dsivcfr.cfr import DsivModel, ModelConfig
from dsivcfr.decompose import (LOG_2PI, PairWeights, ReprOutputs,
                               VariationalHead, build_tokens, club_loss,
                               club_values, cummean, cummean_exclusive,
                               decompose_history, lld_total_loss,
                               mi_total_loss, rbf_pair_weights,
                               weighted_club_loss)
from dsivcfr.errors import (ConfigurationError, ContractError, DimensionError)
from dsivcfr.nn import zero_grads
from dsivcfr.simgen import substream
from dsivcfr.tensor import Tensor, grad_check


def rng(seed=0):
    return np.random.default_rng(seed)


def gaussian_head(cond_dim=3, target_dim=2, seed=0):
    return VariationalHead("gaussian", cond_dim, target_dim, 4, rng(seed))


def bernoulli_head(cond_dim=3, target_dim=1, seed=0):
    return VariationalHead("bernoulli", cond_dim, target_dim, 4, rng(seed))


def blind_head(kind, cond_dim, target_dim):
    """Head whose output ignores its conditioning input (zeroed first layer)."""
    head = VariationalHead(kind, cond_dim, target_dim, 4, rng(3))
    head.net.layers[0].w.data[:] = 0.0
    return head


# ---- log-likelihoods against closed forms -----------------------------------


def test_gaussian_loglik_perfect_fit():
    head = gaussian_head(target_dim=3)
    target = Tensor(rng(1).standard_normal((4, 3)))

    # force mean = target, logvar = 0 by bypassing the net
    head._forward = lambda cond, frozen: (target, Tensor(np.zeros((4, 3))))
    ll = head.loglik(Tensor(np.zeros((4, 3))), target)
    np.testing.assert_allclose(ll.data, -1.5 * LOG_2PI, atol=1e-12)


def test_gaussian_loglik_standard_normal_point():
    head = gaussian_head(target_dim=1)
    head._forward = lambda cond, frozen: (Tensor(np.zeros((1, 1))), Tensor(np.zeros((1, 1))))
    ll = head.loglik(Tensor(np.zeros((1, 1))), Tensor(np.array([[2.0]])))
    np.testing.assert_allclose(ll.data, [-0.5 * LOG_2PI - 2.0], atol=1e-12)


def test_bernoulli_loglik_logit_zero():
    head = bernoulli_head()
    head._forward = lambda cond, frozen: Tensor(np.zeros((1, 1)))
    ll = head.loglik(Tensor(np.zeros((1, 3))), Tensor(np.array([[1.0]])))
    np.testing.assert_allclose(ll.data, [math.log(0.5)], atol=1e-12)


def test_bernoulli_rejects_nonbinary_target():
    head = bernoulli_head()
    with pytest.raises(ContractError):
        head.loglik(Tensor(np.zeros((2, 3))), Tensor(np.array([[0.5], [1.0]])))


def test_head_invalid_kind_and_shape():
    with pytest.raises(ConfigurationError):
        VariationalHead("poisson", 3, 1, 4, rng())
    head = gaussian_head()
    with pytest.raises(DimensionError):
        head.loglik(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 2))))


def test_logvar_clamped():
    head = gaussian_head(cond_dim=1, target_dim=1)
    head.net.layers[-1].w.data[:] = 0.0
    head.net.layers[-1].b.data[:] = np.array([0.0, 50.0])   # raw logvar 50
    _, logvar = head._forward(Tensor(np.zeros((1, 1))), frozen=False)
    assert logvar.data.max() == 8.0


# ---- CLUB against brute force -----------------------------------------------


def brute_club(head, cond, target, w=None):
    """(1/n^2) sum_ij (w_ij) [log q(t_i|c_i) - log q(t_j|c_i)] via explicit loops."""
    n = cond.shape[0]
    ll = np.zeros((n, n))   # ll[i, j] = log q(target_j | cond_i)
    for i in range(n):
        for j in range(n):
            ll[i, j] = head.loglik(Tensor(cond[i:i + 1]), Tensor(target[j:j + 1])).data[0]
    total = 0.0
    for i in range(n):
        for j in range(n):
            wij = 1.0 if w is None else w[i, j]
            total += wij * (ll[i, i] - ll[i, j])
    return total / n ** 2


@pytest.mark.parametrize("kind,target_dim", [("gaussian", 2), ("bernoulli", 2)])
def test_club_matches_brute_force(kind, target_dim):
    n = 5
    cond = rng(4).standard_normal((n, 3))
    if kind == "bernoulli":
        target = (rng(5).random((n, target_dim)) < 0.5).astype(float)
        head = bernoulli_head(target_dim=target_dim)
    else:
        target = rng(5).standard_normal((n, target_dim))
        head = gaussian_head(target_dim=target_dim)
    got = club_loss(head, Tensor(cond), Tensor(target), sign="minimize-mi").data
    np.testing.assert_allclose(got, brute_club(head, cond, target), atol=1e-10)


def test_weighted_club_matches_brute_force():
    n = 4
    cond = rng(6).standard_normal((n, 3))
    target = rng(7).standard_normal((n, 2))
    head = gaussian_head(target_dim=2)
    w = rbf_pair_weights(rng(8).standard_normal((n, 4)))
    got = weighted_club_loss(head, Tensor(cond), Tensor(target), w).data
    np.testing.assert_allclose(got, brute_club(head, cond, target, w=w.w), atol=1e-10)


def test_club_n1_exactly_zero():
    for head in (gaussian_head(), bernoulli_head()):
        target = np.array([[1.0]])
        assert club_loss(head, Tensor(np.ones((1, 3))), Tensor(target)).data == 0.0
    w = PairWeights(w=np.ones((1, 1)), sigma=1.0)
    assert weighted_club_loss(gaussian_head(target_dim=1), Tensor(np.ones((1, 3))),
                              Tensor(np.array([[1.0]])), w).data == 0.0


def test_club_condition_blind_vanishes():
    n = 6
    cond = rng(9).standard_normal((n, 3))
    target = rng(10).standard_normal((n, 2))
    head = blind_head("gaussian", 3, 2)
    assert abs(club_loss(head, Tensor(cond), Tensor(target)).data) < 1e-10
    bhead = blind_head("bernoulli", 3, 2)
    btarget = (rng(11).random((n, 2)) < 0.5).astype(float)
    assert abs(club_loss(bhead, Tensor(cond), Tensor(btarget)).data) < 1e-10


def test_club_sign_flip():
    cond = rng(12).standard_normal((3, 3))
    target = rng(13).standard_normal((3, 2))
    head = gaussian_head(target_dim=2)
    lo = club_loss(head, Tensor(cond), Tensor(target), sign="minimize-mi").data
    hi = club_loss(head, Tensor(cond), Tensor(target), sign="maximize-mi").data
    assert lo == -hi
    with pytest.raises(ConfigurationError):
        club_loss(head, Tensor(cond), Tensor(target), sign="nope")


def test_weighted_club_uniform_weights_scaling():
    # uniform rows reduce the weighted loss to (1/n) * unweighted
    n = 4
    cond = rng(14).standard_normal((n, 3))
    target = rng(15).standard_normal((n, 2))
    head = gaussian_head(target_dim=2)
    uniform = PairWeights(w=np.full((n, n), 1.0 / n), sigma=1.0)
    weighted = weighted_club_loss(head, Tensor(cond), Tensor(target), uniform).data
    plain = club_loss(head, Tensor(cond), Tensor(target)).data
    np.testing.assert_allclose(weighted, plain / n, atol=1e-12)


def test_club_weight_shape_mismatch():
    head = gaussian_head(target_dim=1)
    w = PairWeights(w=np.ones((3, 3)) / 3, sigma=1.0)
    with pytest.raises(ContractError):
        weighted_club_loss(head, Tensor(np.zeros((2, 3))),
                           Tensor(np.zeros((2, 1))), w)


# ---- pair weights -----------------------------------------------------------


def test_pair_weights_rows_sum_to_one():
    v = rng(16).standard_normal((7, 4))
    w = rbf_pair_weights(v, sigma=0.7).w
    np.testing.assert_allclose(w.sum(axis=-1), 1.0, atol=1e-12)
    assert np.all(w > 0.0)


def test_pair_weights_identical_points_uniform():
    w = rbf_pair_weights(np.ones((5, 3))).w
    np.testing.assert_allclose(w, 0.2, atol=1e-12)


def test_pair_weights_large_sigma_approaches_uniform():
    v = rng(17).standard_normal((4, 3))
    w = rbf_pair_weights(v, sigma=1e4).w
    np.testing.assert_allclose(w, 0.25, atol=1e-6)


def test_pair_weights_worked_example():
    # two points at squared distance 2 with sigma=1: row = softmax([1, e^-1])
    v = np.array([[0.0], [math.sqrt(2.0)]])
    w = rbf_pair_weights(v, sigma=1.0).w
    # exact value 0.652969...; reference figures are truncated at 4 decimals
    np.testing.assert_allclose(w[0], [0.6529, 0.3471], atol=1e-4)
    np.testing.assert_allclose(w, w[::-1, ::-1])    # kernel symmetry


def test_pair_weights_invalid_sigma():
    with pytest.raises(ConfigurationError):
        rbf_pair_weights(np.ones((2, 2)), sigma=0.0)


# ---- running means and tokens -----------------------------------------------


def test_cummean_inclusive():
    x = Tensor(np.array([[1.0, 3.0, 5.0]]).reshape(1, 3, 1))
    np.testing.assert_allclose(cummean(x, axis=1).data[0, :, 0], [1.0, 2.0, 3.0])


def test_cummean_exclusive():
    x = np.array([[2.0, 4.0, 6.0]])[..., None]
    np.testing.assert_allclose(cummean_exclusive(x, axis=1)[0, :, 0], [0.0, 2.0, 3.0])


def test_build_tokens_shift_and_mask():
    x = np.arange(12.0).reshape(1, 4, 3)
    a = np.ones((1, 4, 1))
    y = np.array([[1.0, 2.0, 3.0, 4.0]])
    tok = build_tokens(x, a, y)
    np.testing.assert_array_equal(tok[0, 0], np.zeros(5))
    np.testing.assert_array_equal(tok[0, 2], [3, 4, 5, 1, 2])
    masked = build_tokens(x, a, y, y_mask_from=2)
    np.testing.assert_array_equal(masked[0, 3, -1], 0.0)   # y[2] masked
    np.testing.assert_array_equal(masked[0, 2, -1], 2.0)   # y[1] kept


# ---- composed losses on a micro-model ---------------------------------------


def micro_model(seed=0):
    mcfg = ModelConfig(d_model=8, n_layers=1, n_heads=2, d_ff=8, d_z=2, d_c=3,
                       phi_hidden=4, head_hidden=4, bridge_hidden=4, dropout=0.0)
    return DsivModel(mcfg, d_x=4, d_a=1, rng=substream(seed, "init"))


def micro_batch(n=3, T=4, seed=1):
    g = rng(seed)
    x = g.standard_normal((n, T, 4))
    a = (g.random((n, T, 1)) < 0.5).astype(float)
    y = g.standard_normal((n, T))
    return x, a, y


def test_decompose_shapes_and_causality():
    model = micro_model()
    x, a, y = micro_batch()
    reps = decompose_history(model, x, a, y)
    assert reps.z_rep.shape == (3, 4, 2) and reps.c_rep.shape == (3, 4, 3)

    x2 = x.copy()
    x2[:, 2, :] += 10.0      # enters tokens at position 3 only
    reps2 = decompose_history(model, x2, a, y)
    np.testing.assert_array_equal(reps.z_rep.data[:, :3], reps2.z_rep.data[:, :3])
    assert not np.allclose(reps.z_rep.data[:, 3], reps2.z_rep.data[:, 3])


def test_decompose_unit_permutation():
    model = micro_model()
    x, a, y = micro_batch()
    reps = decompose_history(model, x, a, y)
    perm = [2, 0, 1]
    reps_p = decompose_history(model, x[perm], a[perm], y[perm])
    np.testing.assert_allclose(reps_p.z_rep.data, reps.z_rep.data[perm], atol=1e-12)


def test_mi_loss_blind_heads_vanish():
    # identical units make the pair weights uniform, so the weighted term
    # cancels like the unweighted ones once every head ignores its condition
    model = micro_model()
    for name in ("q_za", "q_zy", "q_ca", "q_cy", "q_zc"):
        getattr(model, name).net.layers[0].w.data[:] = 0.0
    x, a, y = micro_batch(n=1, T=4)
    x, a, y = (np.repeat(x, 3, axis=0), np.repeat(a, 3, axis=0),
               np.repeat(y, 3, axis=0))
    reps = decompose_history(model, x, a, y)
    assert abs(mi_total_loss(model, a, y, reps).data) < 1e-8


def test_mi_loss_blind_heads_unweighted_terms_vanish():
    # with distinct units only the pair-weighted term survives blind heads
    model = micro_model()
    for name in ("q_za", "q_zy", "q_ca", "q_cy", "q_zc"):
        getattr(model, name).net.layers[0].w.data[:] = 0.0
    x, a, y = micro_batch()
    reps = decompose_history(model, x, a, y)
    z, c = reps.z_rep, reps.c_rep
    cbar = cummean(c, axis=1)
    for head, cond, target in [
            (model.q_za, z, Tensor(a)), (model.q_ca, c, Tensor(a)),
            (model.q_cy, c, Tensor(y[..., None])), (model.q_zc, cbar, z)]:
        assert np.all(np.abs(club_values(head, cond, target).data) < 1e-8)


def test_mi_loss_single_unit_single_step_zero():
    model = micro_model()
    x, a, y = micro_batch(n=1, T=1)
    reps = decompose_history(model, x, a, y)
    np.testing.assert_allclose(mi_total_loss(model, a, y, reps).data, 0.0, atol=1e-12)


def test_mi_matches_per_term_recomputation():
    model = micro_model()
    x, a, y = micro_batch(n=2, T=2, seed=9)
    reps = decompose_history(model, x, a, y)
    total = mi_total_loss(model, a, y, reps).data

    z, c = reps.z_rep.data, reps.c_rep.data
    cbar = cummean(Tensor(c), axis=1).data
    from dsivcfr.decompose import _zy_pair_weights
    w_all = _zy_pair_weights(model, a, y, reps, sigma=1.0)
    per_t = []
    for t in range(2):
        zt, ct = Tensor(z[:, t]), Tensor(c[:, t])
        at, yt = Tensor(a[:, t]), Tensor(y[:, t][..., None])
        wt = PairWeights(w=w_all.w[t], sigma=1.0)
        val = (club_loss(model.q_za, zt, at, sign="maximize-mi").data
               + club_loss(model.q_ca, ct, at, sign="maximize-mi").data
               + club_loss(model.q_cy, ct, yt, sign="maximize-mi").data
               + club_loss(model.q_zc, Tensor(cbar[:, t]), zt, sign="minimize-mi").data
               + weighted_club_loss(model.q_zy, zt, yt, wt).data)
        per_t.append(val)
    np.testing.assert_allclose(total, np.mean(per_t), atol=1e-10)


def test_stop_gradient_partition():
    model = micro_model()
    x, a, y = micro_batch()
    head_params = model.head_params()
    enc_params = {**model.encoder.params("encoder"),
                  **model.phi_z.params("phi_z"), **model.phi_c.params("phi_c")}

    # L_MI: no gradient reaches variational heads
    zero_grads(model.all_params())
    reps = decompose_history(model, x, a, y)
    mi_total_loss(model, a, y, reps).backward()
    assert all(p.grad is None for p in head_params.values())
    assert any(p.grad is not None for p in enc_params.values())

    # L_LLD on detached reps: no gradient reaches encoder or phi heads
    zero_grads(model.all_params())
    reps = decompose_history(model, x, a, y)
    reps = ReprOutputs(z_rep=reps.z_rep.detach(), c_rep=reps.c_rep.detach())
    lld_total_loss(model, a, y, reps).backward()
    assert all(p.grad is None for p in enc_params.values())
    assert all(p.grad is not None for p in head_params.values())


def test_lld_descends_on_fixed_batch():
    from dsivcfr.nn import Adam
    model = micro_model()
    x, a, y = micro_batch(n=8, T=4, seed=2)
    reps = decompose_history(model, x, a, y)
    reps = ReprOutputs(z_rep=reps.z_rep.detach(), c_rep=reps.c_rep.detach())
    opt = Adam(model.head_params(), lr=1e-2)
    before = lld_total_loss(model, a, y, reps).data
    for _ in range(5):
        loss = lld_total_loss(model, a, y, reps)
        zero_grads(model.head_params())
        loss.backward()
        opt.step()
    assert lld_total_loss(model, a, y, reps).data < before


def test_loss_time_axis_errors():
    model = micro_model()
    with pytest.raises(DimensionError):
        decompose_history(model, np.zeros((0, 3, 4)), np.zeros((0, 3, 1)), np.zeros((0, 3)))
    reps = ReprOutputs(z_rep=Tensor(np.zeros((2, 0, 2))), c_rep=Tensor(np.zeros((2, 0, 3))))
    with pytest.raises(DimensionError):
        mi_total_loss(model, np.zeros((2, 0, 1)), np.zeros((2, 0)), reps)


def _randomize_biases(model, seed=42):
    """Zero-initialized biases leave relu pre-activations exactly at their
    kink for degenerate inputs; nudge them so finite differences are valid."""
    g = np.random.default_rng(seed)
    for p in model.all_params().values():
        if p.data.ndim == 1:
            p.data += 0.05 * g.standard_normal(p.shape)


def test_mi_lld_gradient_fidelity():
    model = micro_model()
    _randomize_biases(model)
    x, a, y = micro_batch(n=3, T=3, seed=5)
    main = {**model.encoder.params("encoder"), **model.phi_z.params("phi_z"),
            **model.phi_c.params("phi_c")}

    # pin the pair weights: they are constants of the loss, so the check
    # must not see them move with the parameters
    from dsivcfr.decompose import _zy_pair_weights
    w_fixed = _zy_pair_weights(model, a, y, decompose_history(model, x, a, y),
                               sigma=1.0)

    def mi_builder():
        reps = decompose_history(model, x, a, y)
        return mi_total_loss(model, a, y, reps, weights=w_fixed)

    rep = grad_check(mi_builder, main)
    assert rep.passed, max(rep.per_param.items(), key=lambda kv: kv[1])

    reps_fixed = decompose_history(model, x, a, y)
    reps_fixed = ReprOutputs(z_rep=reps_fixed.z_rep.detach(),
                             c_rep=reps_fixed.c_rep.detach())

    rep = grad_check(lambda: lld_total_loss(model, a, y, reps_fixed),
                     model.head_params())
    assert rep.passed, max(rep.per_param.items(), key=lambda kv: kv[1])
