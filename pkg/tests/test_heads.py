import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from selftaught.heads import (
    FewShotModel, RelationModule, RotationHead, classify, episode_loss, fewshot_nll, matching_scores,
    pairwise_distance, prototypes, relation_scores, rotation_loss,
)



@pytest.fixture(autouse=True)
def _float64():
    old = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(old)


def _rand(*shape, seed=0):
    return torch.from_numpy(np.random.default_rng(seed).normal(size=shape))


def test_prototype_single_shot_and_mean():
    e = _rand(3, 4)
    assert torch.equal(prototypes(e, [0, 1, 2], 3), e)
    p = prototypes(torch.tensor([[0.0, 0.0], [2.0, 2.0]]), [0, 0], 1)
    assert p.tolist() == [[1.0, 1.0]]


def test_prototype_loop_oracle():
    emb = _rand(25, 6, seed=1)
    labels = np.repeat(np.arange(5), 5)
    np.random.default_rng(2).shuffle(labels)
    got = prototypes(emb, labels, 5)
    for k in range(5):
        members = [emb[i] for i in range(25) if labels[i] == k]
        expected = [sum(float(m[d]) for m in members) / len(members) for d in range(6)]
        np.testing.assert_allclose(got[k].numpy(), expected, atol=1e-12)


def test_prototype_uneven_class_sizes_and_errors():
    emb = _rand(4, 2)
    p = prototypes(emb, [0, 0, 0, 1], 2)
    assert torch.allclose(p[0], emb[:3].mean(0))
    with pytest.raises(ValueError):
        prototypes(emb, [0, 0, 0, 0], 2)


def test_prototype_permutation_invariant():
    emb, labels = _rand(10, 3), np.repeat(np.arange(2), 5)
    perm = np.random.default_rng(3).permutation(10)
    assert torch.allclose(prototypes(emb, labels, 2), prototypes(emb[perm], labels[perm], 2))


def test_classify_dominance_and_symmetry():
    protos = torch.tensor([[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]])
    assert classify(torch.zeros(1, 2), protos)[0, 0] > 0.99
    protos = torch.tensor([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]])
    assert torch.allclose(classify(torch.zeros(1, 2), protos), torch.full((1, 4), 0.25))


def test_classify_softmax_oracle():
    q, c = _rand(7, 5, seed=4), _rand(4, 5, seed=5)
    got = classify(q, c)
    for i in range(7):
        d = [sum((float(q[i, k]) - float(c[j, k])) ** 2 for k in range(5)) for j in range(4)]
        ex = [math.exp(-x) for x in d]
        np.testing.assert_allclose(got[i].numpy(), [e / sum(ex) for e in ex], atol=1e-6)


def test_unsquared_distance_flag():
    q, c = torch.tensor([[0.0, 0.0]]), torch.tensor([[3.0, 4.0]])
    assert pairwise_distance(q, c, squared=False).item() == pytest.approx(5.0)
    assert pairwise_distance(q, c).item() == pytest.approx(25.0)
    with pytest.raises(ValueError):
        pairwise_distance(q, torch.zeros(1, 3))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(-50, 50))
def test_scores_sum_to_one_and_argmax_shift_invariant(seed, shift):
    q, c = _rand(6, 4, seed=seed), _rand(5, 4, seed=seed + 1)
    p = classify(q, c)
    assert torch.allclose(p.sum(1), torch.ones(6), atol=1e-6)
    d = pairwise_distance(q, c)
    assert torch.equal(torch.softmax(-d, 1).argmax(1), torch.softmax(-(d + shift), 1).argmax(1))


def test_nll_two_equidistant_prototypes():
    protos = torch.tensor([[1.0, 0.0], [-1.0, 0.0]])
    assert fewshot_nll(torch.zeros(1, 2), [0], protos).item() == pytest.approx(math.log(2))


def test_nll_limit_case():
    protos = torch.tensor([[0.0, 0.0], [1e3, 0.0]])
    assert fewshot_nll(torch.zeros(1, 2), [0], protos).item() == pytest.approx(0.0, abs=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_nll_equals_cross_entropy_of_scores(seed):
    q, c = _rand(12, 8, seed=seed), _rand(5, 8, seed=seed + 10)
    labels = torch.from_numpy(np.random.default_rng(seed).integers(0, 5, 12))
    oracle = -torch.log(classify(q, c)[torch.arange(12), labels]).mean()
    assert fewshot_nll(q, labels, c).item() == pytest.approx(oracle.item(), abs=1e-6)


def _fd_grad(fn, x, eps=1e-6):
    g = torch.zeros_like(x)
    flat = x.view(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + eps
        up = fn(x).item()
        flat[i] = orig - eps
        down = fn(x).item()
        flat[i] = orig
        g.view(-1)[i] = (up - down) / (2 * eps)
    return g


def test_nll_gradient_wrt_queries():
    q, c = _rand(6, 4, seed=7), _rand(3, 4, seed=8)
    labels = [0, 1, 2, 0, 1, 2]
    qg = q.clone().requires_grad_(True)
    fewshot_nll(qg, labels, c).backward()
    num = _fd_grad(lambda x: fewshot_nll(x, labels, c), q.clone())
    assert ((qg.grad - num).norm() / num.norm()).item() <= 1e-3


def test_rotation_loss_uniform_and_saturated():
    head = RotationHead(4, 8)
    for p in head.parameters():
        torch.nn.init.zeros_(p)
    assert rotation_loss(head, _rand(5, 4), [0, 1, 2, 3, 0]).item() == pytest.approx(math.log(4))
    with torch.no_grad():
        head.net[2].bias.copy_(torch.tensor([50.0, 0.0, 0.0, 0.0]))
    assert rotation_loss(head, _rand(3, 4), [0, 0, 0]).item() == pytest.approx(0.0, abs=1e-12)


def test_rotation_loss_oracle_and_gradient():
    torch.manual_seed(0)
    head = RotationHead(6, 16)
    emb, labels = _rand(10, 6, seed=3), np.random.default_rng(3).integers(0, 4, 10)
    logits = head(emb).detach()
    oracle = 0.0
    for i in range(10):
        row = [float(v) for v in logits[i]]
        oracle += -(row[labels[i]] - math.log(sum(math.exp(v) for v in row)))
    assert rotation_loss(head, emb, labels).item() == pytest.approx(oracle / 10, abs=1e-6)

    w = head.net[0].weight
    head.zero_grad()
    rotation_loss(head, emb, labels).backward()
    analytic = w.grad.clone()

    def f(_):
        return rotation_loss(head, emb, labels)

    with torch.no_grad():
        num = _fd_grad(f, w.data)
    assert ((analytic - num).norm() / num.norm()).item() <= 1e-3


def test_matching_identical_query_wins():
    s = _rand(5, 8, seed=1)
    p = matching_scores(s[2:3].clone(), s, [0, 1, 2, 3, 4], 5)
    assert p.argmax().item() == 2
    assert torch.allclose(p.sum(1), torch.ones(1))


def test_matching_loop_oracle():
    q, s = _rand(4, 6, seed=2), _rand(6, 6, seed=3)
    labels = [0, 0, 1, 1, 2, 2]
    got = matching_scores(q, s, labels, 3, scale=5.0)
    for i in range(4):
        cos = []
        for j in range(6):
            dot = sum(float(q[i, k]) * float(s[j, k]) for k in range(6))
            nq = math.sqrt(sum(float(q[i, k]) ** 2 for k in range(6)))
            ns = math.sqrt(sum(float(s[j, k]) ** 2 for k in range(6)))
            cos.append(math.exp(5.0 * dot / (nq * ns)))
        z = sum(cos)
        expected = [sum(cos[j] for j in range(6) if labels[j] == k) / z for k in range(3)]
        np.testing.assert_allclose(got[i].numpy(), expected, atol=1e-6)
    with pytest.raises(ValueError):
        matching_scores(q, s[:, :5], labels, 3)


def test_relation_zero_weights_uniform():
    mod = RelationModule(4).double()
    for p in mod.parameters():
        torch.nn.init.zeros_(p)
    p = relation_scores(_rand(3, 4, 2, 2), _rand(6, 4, 2, 2), [0, 0, 1, 1, 2, 2], 3, mod)
    assert torch.allclose(p, torch.full((3, 3), 1 / 3))
    with pytest.raises(ValueError):
        relation_scores(_rand(3, 4, 3, 3), _rand(6, 4, 2, 2), [0, 0, 1, 1, 2, 2], 3, mod)


@pytest.mark.parametrize("head", ["proto", "matching", "relation"])
def test_model_log_probs_normalised(head):
    model = FewShotModel(head, width=8, seed=1).double()
    sx, qx = torch.rand(6, 3, 32, 32), torch.rand(9, 3, 32, 32)
    lp = model.log_probs(sx, torch.tensor([0, 0, 1, 1, 2, 2]), qx, 3)
    assert lp.shape == (9, 3)
    assert torch.allclose(lp.exp().sum(1), torch.ones(9), atol=1e-6)
    loss = episode_loss(lp, torch.tensor([0, 1, 2] * 3))
    loss.backward()
    assert all(p.grad is not None for p in model.parameters())


def test_proto_model_matches_explicit_formula():
    model = FewShotModel("proto", width=8, seed=2).double()
    sx, qx = torch.rand(4, 3, 32, 32), torch.rand(5, 3, 32, 32)
    sy, qy = torch.tensor([0, 1, 0, 1]), torch.tensor([0, 1, 1, 0, 1])
    loss = episode_loss(model.log_probs(sx, sy, qx, 2), qy)
    c = prototypes(model(sx), sy, 2)
    assert loss.item() == pytest.approx(fewshot_nll(model(qx), qy, c).item(), abs=1e-10)


def test_unknown_head():
    with pytest.raises(ValueError):
        FewShotModel("graph")
