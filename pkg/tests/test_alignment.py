import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dasid import alignment as al
from dasid import numerics as nx
from dasid.alignment import AlignBatch, MemoryBank, NegativeTruncationWarning
from dasid.numerics import Parameter


def zero_batch(n, dim=3, ad_ids=None, user_ids=None):
    z = nx.tensor(np.zeros((n, dim)))
    return AlignBatch(z, z, z, z, np.asarray(user_ids if user_ids is not None else np.arange(n)),
                      np.asarray(ad_ids if ad_ids is not None else np.arange(n)))


@pytest.mark.parametrize("n_neg", [1, 3, 8])
def test_u2i_equal_logits_is_log_one_plus_negatives(n_neg):
    batch = zero_batch(n_neg + 4)
    zu, zi = al.dual_u2i_losses(batch, n_neg, nx.make_rng(0))
    assert abs(float(zu.value) - np.log(1 + n_neg)) < 1e-9
    assert abs(float(zi.value) - np.log(1 + n_neg)) < 1e-9


@pytest.mark.parametrize("b", [2, 6, 33])
def test_view_equal_logits_is_log_batch(b):
    u2u, i2i = al.dual_view_losses(zero_batch(b))
    assert abs(float(u2u.value) - np.log(b)) < 1e-9
    assert abs(float(i2i.value) - np.log(b)) < 1e-9


def test_cooccur_equal_logits_is_log_one_plus_negatives():
    n, n_neg = 10, 4
    bank = MemoryBank(4)
    # users 0..9 all click ad 100, so every user has a partner
    bank.update(np.arange(n), np.full(n, 100), np.zeros((n, 3)), np.zeros((n, 3)))
    batch = zero_batch(n, ad_ids=np.arange(200, 200 + n))
    lu, li, nu, ni = al.dual_cooccur_losses(batch, bank, n_neg, nx.make_rng(1))
    assert nu == n and ni == 0
    assert abs(float(lu.value) - np.log(1 + n_neg)) < 1e-9
    assert float(li.value) == 0.0


def test_u2i_reference_value():
    rng = nx.make_rng(2)
    vals = [rng.normal(size=(4, 2)) for _ in range(4)]
    batch = AlignBatch(*[nx.tensor(v) for v in vals], np.arange(4), np.array([0, 1, 2, 3]))
    zu, _ = al.dual_u2i_losses(batch, 3, nx.make_rng(0))
    z_u, c_i = vals[0], vals[3]
    # with 3 negatives out of 3 candidates every other row is used
    logits = z_u @ c_i.T
    expected = np.mean([np.log(np.exp(logits[b]).sum()) - logits[b, b] for b in range(4)])
    assert float(zu.value) == pytest.approx(expected, rel=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(0, 4), min_size=2, max_size=12), st.integers(1, 6), st.integers(0, 1000))
def test_negatives_never_share_the_anchor_ad(ads, n_neg, seed):
    ads = np.array(ads)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", NegativeTruncationWarning)
        idx, mask = al.sample_negatives([(ads, ads)], n_neg, nx.make_rng(seed))
    for b in range(len(ads)):
        chosen = idx[b][mask[b]]
        assert len(set(chosen.tolist())) == chosen.size
        assert b not in chosen
        assert not np.any(ads[chosen] == ads[b])
        available = int(np.sum(ads != ads[b]))
        assert chosen.size == min(n_neg, available)


def test_truncation_warns():
    with pytest.warns(NegativeTruncationWarning):
        al.sample_negatives([(np.arange(3), np.arange(3))], 5, nx.make_rng(0))


def test_u2i_needs_two_positives():
    with pytest.raises(ValueError):
        al.dual_u2i_losses(zero_batch(1), 2, nx.make_rng(0))


def test_u2i_draws_are_seed_deterministic():
    rng = nx.make_rng(3)
    vals = [nx.tensor(rng.normal(size=(8, 3))) for _ in range(4)]
    batch = AlignBatch(*vals, np.arange(8), np.arange(8))
    a = al.dual_u2i_losses(batch, 3, nx.make_rng(5))
    b = al.dual_u2i_losses(batch, 3, nx.make_rng(5))
    assert float(a[0].value) == float(b[0].value)
    assert float(a[1].value) == float(b[1].value)


def test_memory_bank_registers_partners_symmetrically():
    bank = MemoryBank(4)
    bank.update(["u1"], ["a1"], np.ones((1, 2)), np.ones((1, 2)))
    assert bank.latest_user_partner("u1") is None
    bank.update(["u2"], ["a1"], 2 * np.ones((1, 2)), np.ones((1, 2)))
    partner, vec = bank.latest_user_partner("u1")
    assert partner == "u2" and vec.tolist() == [2.0, 2.0]
    partner, vec = bank.latest_user_partner("u2")
    assert partner == "u1" and vec.tolist() == [1.0, 1.0]


def test_memory_bank_item_side_and_latest_wins():
    bank = MemoryBank(4)
    bank.update(["u1", "u1", "u1"], ["a1", "a2", "a3"], np.zeros((3, 2)), np.arange(6.0).reshape(3, 2))
    partner, vec = bank.latest_item_partner("a1")
    assert partner == "a3" and vec.tolist() == [4.0, 5.0]
    partner, _ = bank.latest_item_partner("a3")
    assert partner == "a2"


def test_memory_bank_is_fifo_bounded():
    bank = MemoryBank(2)
    n = 6
    bank.update([f"u{k}" for k in range(n)], ["a"] * n, np.eye(n), np.zeros((n, n)))
    assert len(bank.user_bank["u0"]) == 2
    assert [p for p, _ in bank.user_bank["u0"]] == ["u1", "u2"]


def test_memory_bank_stores_detached_copies():
    bank = MemoryBank(2)
    z = np.ones((2, 2))
    bank.update(["u1", "u2"], ["a", "a"], z, z)
    z[:] = 7.0
    _, vec = bank.latest_user_partner("u1")
    assert vec.tolist() == [1.0, 1.0]


def test_cold_bank_contributes_nothing():
    lu, li, nu, ni = al.dual_cooccur_losses(zero_batch(4), MemoryBank(), 2, nx.make_rng(0))
    assert (nu, ni) == (0, 0)
    assert float(lu.value) == 0.0 and float(li.value) == 0.0


def test_cooccur_negatives_exclude_anchor_and_partner():
    n = 6
    bank = MemoryBank(4)
    bank.update([0, 1], [50, 50], np.zeros((2, 2)), np.zeros((2, 2)))
    batch = zero_batch(n, dim=2, user_ids=[0, 1, 2, 3, 4, 5])
    partner_arr = np.array([1, 0, None, None, None, None], dtype=object)
    ids = np.array(batch.user_ids, dtype=object)
    idx, mask = al.sample_negatives([(ids, ids), (ids, partner_arr)], 4, nx.make_rng(0))
    assert 1 not in idx[0][mask[0]] and 0 not in idx[0][mask[0]]
    assert 0 not in idx[1][mask[1]] and 1 not in idx[1][mask[1]]


def test_align_total_skips_ablated_terms():
    total = al.align_total({"a_u2i_zu": 1.0, "a_u2i_zi": 2.0, "a_u2u_zu": None, "a_co_i2i_zi": 0.5})
    assert total == pytest.approx(3.5)


def test_alignment_gradients_match_finite_differences():
    rng = nx.make_rng(7)
    params = {k: Parameter(k, rng.normal(size=(4, 3))) for k in ("z_u", "z_i", "c_u", "c_i")}
    users, ads = np.array([0, 1, 2, 3]), np.array([10, 11, 12, 10])
    bank = MemoryBank(3)
    bank.update([0, 9, 1, 8, 2, 7], [10, 10, 11, 11, 12, 12], rng.normal(size=(6, 3)), rng.normal(size=(6, 3)))
    bank.update([3, 3], [12, 13], rng.normal(size=(2, 3)), rng.normal(size=(2, 3)))

    def loss():
        batch = AlignBatch(params["z_u"], params["z_i"], params["c_u"], params["c_i"], users, ads)
        r = nx.make_rng(11)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", NegativeTruncationWarning)
            t = dict(zip(("a_u2i_zu", "a_u2i_zi"), al.dual_u2i_losses(batch, 2, r)))
            t.update(zip(("a_u2u_zu", "a_i2i_zi"), al.dual_view_losses(batch)))
            lu, li, _, _ = al.dual_cooccur_losses(batch, bank, 2, r)
        t["a_co_u2u_zu"], t["a_co_i2i_zi"] = lu, li
        return al.align_total(t)

    report = nx.finite_diff_check(loss, params)
    assert report.passed, report.max_rel_error


HAND_SOFTMAX = -np.log(np.exp(2.0) / (np.exp(2.0) + 1.0))


def test_u2i_hand_softmax_example():
    # row 0: positive logit 2, its one negative (row 1) logit 0
    z_u = nx.tensor(np.array([[1.0, 1.0], [0.0, 0.0]]))
    c_i = nx.tensor(np.array([[1.0, 1.0], [0.0, 0.0]]))
    batch = AlignBatch(z_u, nx.tensor(np.zeros((2, 2))), nx.tensor(np.zeros((2, 2))), c_i,
                       np.array([0, 1]), np.array([5, 6]))
    idx, mask = al.sample_negatives([(batch.ad_ids, batch.ad_ids)], 1, nx.make_rng(0))
    loss, count = al.contrastive_with_negatives(z_u[np.array([0])], c_i[np.array([0])], c_i, idx[:1], mask[:1])
    assert count == 1
    assert float(loss.value) == pytest.approx(HAND_SOFTMAX, abs=1e-12)
    assert HAND_SOFTMAX == pytest.approx(0.1269, abs=1e-4)


def test_u2i_sides_agree_on_symmetric_batch():
    rng = nx.make_rng(4)
    a, b = rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
    batch = AlignBatch(nx.tensor(a), nx.tensor(b), nx.tensor(a), nx.tensor(b), np.arange(5), np.arange(5))
    zu, zi = al.dual_u2i_losses(batch, 4, nx.make_rng(0))
    assert float(zu.value) == pytest.approx(float(zi.value), rel=1e-12)


def test_view_hand_softmax_example():
    z = nx.tensor(np.array([[np.sqrt(2.0), 0.0], [0.0, np.sqrt(2.0)]]))
    batch = AlignBatch(z, z, z, z, np.arange(2), np.arange(2))
    u2u, _ = al.dual_view_losses(batch)
    assert float(u2u.value) == pytest.approx(HAND_SOFTMAX, abs=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 9), st.integers(0, 10_000))
def test_view_loss_is_permutation_invariant(b, seed):
    rng = nx.make_rng(seed)
    vals = [rng.normal(size=(b, 3)) for _ in range(4)]
    perm = rng.permutation(b)
    plain = AlignBatch(*[nx.tensor(v) for v in vals], np.arange(b), np.arange(b))
    shuffled = AlignBatch(*[nx.tensor(v[perm]) for v in vals], perm, perm)
    for x, y in zip(al.dual_view_losses(plain), al.dual_view_losses(shuffled)):
        assert float(x.value) == pytest.approx(float(y.value), rel=1e-12)


def test_cooccur_hand_softmax_example():
    # user 0's partner is user 9 with snapshot [1, 1]; user 5 has no partner
    bank = MemoryBank(2)
    bank.update([9, 0], [3, 3], np.array([[1.0, 1.0], [0.0, 0.0]]), np.zeros((2, 2)))
    z_u = nx.tensor(np.array([[1.0, 1.0], [0.0, 0.0]]))
    batch = AlignBatch(z_u, nx.tensor(np.zeros((2, 2))), z_u, z_u, np.array([0, 5]), np.array([7, 8]))
    lu, _, nu, _ = al.dual_cooccur_losses(batch, bank, 1, nx.make_rng(0))
    assert nu == 1
    assert float(lu.value) == pytest.approx(HAND_SOFTMAX, abs=1e-12)


def test_bank_capacity_one_keeps_newest():
    bank = MemoryBank(1)
    bank.update(["u1", "u1"], ["x", "y"], np.zeros((2, 2)), np.zeros((2, 2)))
    bank.update(["u2", "u3"], ["x", "y"], np.arange(4.0).reshape(2, 2), np.zeros((2, 2)))
    assert len(bank.user_bank["u1"]) == 1
    partner, vec = bank.latest_user_partner("u1")
    assert partner == "u3" and vec.tolist() == [2.0, 3.0]


def test_three_clickers_in_one_batch_see_each_other():
    bank = MemoryBank(16)
    bank.update(["u1", "u2", "u3"], ["x", "x", "x"], np.eye(3), np.zeros((3, 3)))
    for u in ("u1", "u2", "u3"):
        partners = sorted(p for p, _ in bank.user_bank[u])
        assert partners == sorted({"u1", "u2", "u3"} - {u})
    assert [p for p, _ in bank.user_bank["u1"]] == ["u2", "u3"]


def test_consecutive_batches_link_users():
    bank = MemoryBank(4)
    bank.update(["u1"], ["x"], np.ones((1, 2)), np.ones((1, 2)))
    bank.update(["u2"], ["x"], np.ones((1, 2)), np.ones((1, 2)))
    assert bank.latest_user_partner("u1")[0] == "u2"
    assert bank.latest_user_partner("u2")[0] == "u1"


def test_align_total_arithmetic():
    assert al.align_total(dict.fromkeys(al.ALIGN_TERMS, 0.0)) == 0.0
    assert al.align_total(dict.fromkeys(al.ALIGN_TERMS, 0.1)) == pytest.approx(0.6)
    full = {k: float(i + 1) for i, k in enumerate(al.ALIGN_TERMS)}
    for k in al.ALIGN_TERMS:
        assert al.align_total({**full, k: None}) == pytest.approx(al.align_total(full) - full[k])


def test_gradients_reach_encoder_codebooks_and_towers_but_not_bank():
    from dasid.cf_debias import DebiasTowers
    from dasid.quantizer import RqVae

    rng = nx.make_rng(3)
    rq_u = RqVae("user", 5, 4, 4, 2, hidden=(6,), rng=rng)
    rq_i = RqVae("ad", 5, 4, 4, 2, hidden=(6,), rng=rng)
    towers = DebiasTowers(6, 6, 2, 2, d_align=4, emb_dim=4, width=6, rng=rng)
    users, ads = np.array([0, 1, 2, 3]), np.array([0, 1, 2, 3])
    s_u, s_i = rng.normal(size=(4, 5)), rng.normal(size=(4, 5))
    bank = MemoryBank(4)
    bank.update([0, 5], [0, 0], rng.normal(size=(2, 4)), rng.normal(size=(2, 4)))
    bank.update([1], [5], rng.normal(size=(1, 4)), rng.normal(size=(1, 4)))
    snapshot = bank.latest_user_partner(0)[1].copy()

    cf_out = towers.forward(users, ads, rng.normal(size=(4, 2)), rng.normal(size=(4, 2)))
    batch = AlignBatch(rq_u.forward(s_u).z_align, rq_i.forward(s_i).z_align, cf_out.c_u_int, cf_out.c_i_pro,
                       users, ads)
    r = nx.make_rng(0)
    terms = list(al.dual_u2i_losses(batch, 2, r)) + list(al.dual_view_losses(batch))
    terms += list(al.dual_cooccur_losses(batch, bank, 2, r)[:2])
    nx.backward(al.align_total(dict(zip(al.ALIGN_TERMS, terms))))
    for model in (rq_u, rq_i):
        params = model.parameters()
        assert params[f"{model.name}.codebook.1"].grad.any()
        assert params[f"{model.name}.encoder.0.W"].grad.any()
        assert not params[f"{model.name}.decoder.0.W"].grad.any()
    assert towers.user_int.parameters()["towers.user_int.0.W"].grad.any()
    assert towers.ad_pro.parameters()["towers.ad_pro.0.W"].grad.any()
    np.testing.assert_array_equal(bank.latest_user_partner(0)[1], snapshot)
