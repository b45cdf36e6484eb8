import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ppf import autodiff as ad
from ppf.autodiff import Tensor
from ppf.prototypes import (EPS, PrototypeBank, class_identity_fc, fuse, global_branch,
                            local_branch, log_similarity, similarity, similarity_map)

from conftest import grad_error

S_MAX = np.log(1.0 / EPS)


def test_similarity_oracle_values():
    assert similarity([1.0, 2.0], [1.0, 2.0]).item() == S_MAX
    assert S_MAX == pytest.approx(9.21034, abs=5e-6)
    assert similarity([1.0, 0.0], [0.0, 0.0]).item() == pytest.approx(np.log(2 / 1.0001), abs=1e-15)
    assert np.log(2 / 1.0001) == pytest.approx(0.69305, abs=5e-6)


def test_similarity_decreases_along_distance_ladder():
    ladder = np.array([0.0, 1e-3, 0.1, 1.0, 10.0, 1e3, 1e6, 1e9])
    s = log_similarity(ladder)
    assert np.all(np.diff(s) < 0) and np.all(s > 0) and s[-1] < 1e-8


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, 4, elements=st.floats(-5, 5)),
       arrays(np.float64, 4, elements=st.floats(-5, 5)))
def test_similarity_symmetric_and_bounded(a, b):
    sab, sba = similarity(a, b).item(), similarity(b, a).item()
    assert sab == sba
    assert sab <= S_MAX
    # below ~1e-12 the squared distance is lost against eps in float64
    if np.sum((a - b) ** 2) > 1e-10:
        assert sab < S_MAX


def test_similarity_gradient():
    rng = np.random.default_rng(21)
    for _ in range(20):
        t, p = rng.uniform(-2, 2, 5), rng.uniform(-2, 2, 5)
        assert grad_error(similarity, [t, p]) < 1e-4
        tokens, protos = rng.uniform(-2, 2, (2, 3, 5)), rng.uniform(-2, 2, (4, 5))
        w = rng.normal(size=(2, 4, 3))
        assert grad_error(lambda a, b: ad.tsum(similarity_map(a, b) * w), [tokens, protos]) < 1e-4


def test_similarity_map_layout(rng):
    tokens, protos = rng.random((2, 3, 4)), rng.random((5, 4))
    sim = similarity_map(Tensor(tokens), Tensor(protos)).data
    assert sim.shape == (2, 5, 3)
    assert sim[1, 4, 2] == pytest.approx(similarity(tokens[1, 2], protos[4]).item(), abs=1e-14)


def test_local_branch_two_token_example():
    tokens = Tensor([[[0.0, 0.0], [1.0, 0.0]]])
    res = local_branch(tokens, [[True, True]], Tensor([[0.0, 0.0]]), np.ones((1, 1)))
    assert res.pooled.item() == S_MAX
    assert res.sim.shape == (1, 1, 2)


def test_local_branch_single_kept_position(rng):
    tokens = Tensor(rng.random((1, 6, 3)))
    protos = Tensor(rng.random((4, 3)))
    keep = np.zeros((1, 6), bool)
    keep[0, 2] = True
    res = local_branch(tokens, keep, protos, class_identity_fc([0, 0, 1, 1], 2))
    np.testing.assert_array_equal(res.pooled.data[0], res.sim.data[0, :, 2])
    np.testing.assert_array_equal(res.logits.data[0], [res.pooled.data[0, :2].sum(),
                                                       res.pooled.data[0, 2:].sum()])


def test_local_branch_all_ones_is_plain_max(rng):
    tokens, protos = Tensor(rng.random((2, 5, 3))), Tensor(rng.random((3, 3)))
    res = local_branch(tokens, np.ones((2, 5), bool), protos, np.eye(3))
    np.testing.assert_array_equal(res.pooled.data, res.sim.data.max(axis=-1))


def test_local_branch_ignores_dropped_positions(rng):
    tokens = rng.random((1, 6, 3))
    keep = np.array([[True, False, True, False, False, True]])
    protos = Tensor(rng.random((3, 3)))
    a = local_branch(Tensor(tokens), keep, protos, np.eye(3)).pooled.data
    tokens[0, ~keep[0]] = rng.random((3, 3)) * 100 - 50
    tokens[0, 1] = protos.data[0]
    b = local_branch(Tensor(tokens), keep, protos, np.eye(3)).pooled.data
    assert np.array_equal(a, b)


def test_local_branch_rejects_empty_mask(rng):
    with pytest.raises(ValueError):
        local_branch(Tensor(rng.random((1, 3, 2))), np.zeros((1, 3), bool),
                     Tensor(rng.random((1, 2))), np.ones((1, 1)))


def test_global_branch_examples(rng):
    protos = rng.random((4, 3))
    cls_tok = Tensor(protos[2:3].copy())
    scores, _ = global_branch(cls_tok, Tensor(protos), class_identity_fc([0, 0, 1, 1], 2))
    assert scores.data[0, 2] == S_MAX
    same = np.tile(protos[:1], (3, 1))
    s2, z = global_branch(cls_tok, Tensor(same), class_identity_fc([0, 0, 1], 2))
    assert np.all(s2.data == s2.data[0, 0])
    assert z.data[0, 0] == 2 * z.data[0, 1]
    s3, z3 = global_branch(cls_tok, Tensor(same), class_identity_fc([0, 0, 1], 2))
    assert np.array_equal(z.data, z3.data)


def test_fuse_examples():
    assert fuse(Tensor([2.0, 0.0]), Tensor([0.0, 2.0]), 0.5, 0.5).data.tolist() == [1.0, 1.0]
    assert fuse(Tensor([1.0, 3.0]), Tensor([2.0, -1.0]), 0.5, 0.5).data.tolist() == [1.5, 1.0]
    assert fuse(Tensor([1.0, 3.0]), Tensor([2.0, -1.0]), 1.0, 0.0).data.tolist() == [1.0, 3.0]
    with pytest.raises(ad.ShapeError):
        fuse(Tensor([1.0, 2.0]), Tensor([1.0, 2.0, 3.0]), 0.5, 0.5)


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, 5, elements=st.floats(-10, 10)),
       arrays(np.float64, 5, elements=st.floats(-10, 10)),
       st.floats(0.01, 1), st.floats(0.01, 1), st.sampled_from([0.5, 2.0, 4.0]))
def test_fused_argmax_invariant_to_joint_scaling(zg, zl, lg, ll, c):
    a = fuse(Tensor(zg), Tensor(zl), lg, ll).data
    b = fuse(Tensor(zg), Tensor(zl), lg * c, ll * c).data
    assert a.argmax() == b.argmax()


def test_bank_and_identity_fc(rng):
    bank = PrototypeBank.create(3, 2, 4, 8, rng)
    assert (bank.m_global, bank.m_local) == (6, 12)
    assert bank.local_class.tolist() == [0] * 4 + [1] * 4 + [2] * 4
    fc = bank.fc_local()
    assert fc.shape == (3, 12) and set(np.unique(fc)) == {0.0, 1.0}
    assert (fc.sum(axis=0) == 1).all() and (fc.sum(axis=1) == 4).all()
    assert 0 <= bank.local_protos.data.min() and bank.local_protos.data.max() < 1
