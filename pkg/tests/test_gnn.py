import json

import numpy as np
import pytest

from gnnbab import gnn
from gnnbab.autodiff import Tape
from gnnbab.bab import root_domain, split_relu
from gnnbab.bounds import alpha_beta
from gnnbab.gnn import (EmbeddingState, FeatureNorm, GnnParams, NodeFeatures, backward_pass,
                        embeddings, extract_features, forward_pass, hinge_rank_loss, infer,
                        loss_and_gradient, prepare, score_nodes)
from gnnbab.network import (InputBox, Layer, Network, VerificationProblem, encode_property,
                            linear_map_transpose, random_network)

from helpers import branching_domains, toy_problem


def _nonzero_biases(params, rng, scale=0.1):
    for k, v in params.arrays.items():
        if ".b" in k:
            params.arrays[k] = rng.normal(0.0, scale, v.shape)
    return params


# --------------------------------------------------------------------------
# features

def test_feature_layout_and_decided_nodes():
    rng = np.random.default_rng(0)
    p, d = branching_domains(rng, 1)[0]
    f = extract_features(d, p.network)
    assert f.inp.shape == (4, 3) and f.out.shape == (1, 4) and f.binp.shape == (4, 2)
    assert [a.shape[1] for a in f.act] == [9, 9]
    child = split_relu(p, d, d.candidates()[0])[1]
    fc = extract_features(child, p.network)
    k, j = d.candidates()[0].as_tuple()
    assert np.all(fc.act[k][j, 6:9] == 0) and fc.act[k][j, 2] == 0
    for a in f.act:
        amb = (a[:, 0] < 0) & (a[:, 1] > 0)
        assert np.all(a[~amb, 6:9] == 0) and np.all(a[~amb, 2] == 0)
    assert np.all(np.isfinite(np.concatenate([f.inp.ravel(), f.out.ravel()])))


def test_zero_eps_inputs_equal_primal():
    rng = np.random.default_rng(1)
    net0 = random_network([3, 5, 5, 2], rng)
    p = encode_property(net0, 0, 1, rng.uniform(size=3), 0.0)
    d = root_domain(p)
    f = extract_features(d, p.network)
    np.testing.assert_array_equal(f.inp[:, 0], f.inp[:, 1])
    np.testing.assert_allclose(f.inp[:, 2], f.inp[:, 0], atol=1e-12)


def test_features_match_independent_extraction():
    rng = np.random.default_rng(2)
    for p, d in branching_domains(rng, 5):
        f = extract_features(d, p.network)
        lp = d.lp
        for k, a in enumerate(f.act):
            for j in range(a.shape[0]):
                l, u = d.bounds.lower[k][j], d.bounds.upper[k][j]
                amb = l < 0 < u
                row = [l, u, alpha_beta(l, u).beta if amb else 0.0,
                       p.network.layers[k].bias[j], lp.pre[k][j], lp.post[k][j]]
                row += list(lp.duals[k][j]) if amb else [0.0, 0.0, 0.0]
                np.testing.assert_allclose(a[j], row, atol=1e-12)
        np.testing.assert_array_equal(f.inp[:, 2], lp.x0)
        assert f.out[0, 0] == d.lb and f.out[0, 3] == pytest.approx(lp.output)


def test_missing_lp_cache_raises():
    p, d = branching_domains(np.random.default_rng(3), 1)[0]
    d.lp = None
    with pytest.raises(ValueError):
        extract_features(d, p.network)


def test_node_features_round_trip():
    p, d = branching_domains(np.random.default_rng(4), 1)[0]
    f = extract_features(d, p.network)
    g = NodeFeatures.from_dict(json.loads(json.dumps(f.to_dict())))
    for a, b in zip(f.act, g.act):
        np.testing.assert_array_equal(a, b)
    assert f.candidates() == g.candidates()


def test_feature_norm_fit_and_dual_scaling():
    rng = np.random.default_rng(5)
    feats = [extract_features(d, p.network) for p, d in branching_domains(rng, 5)]
    norm = FeatureNorm.fit(feats)
    stacked = np.concatenate([a for f in feats for a in f.act])
    np.testing.assert_allclose(norm.apply("act", stacked).mean(axis=0), 0.0, atol=1e-9)
    F = prepare(feats[0], norm)
    # duals keep their sign and zeros: divided, never shifted
    np.testing.assert_allclose(F.duals[0] * norm.std["act"][6:9], feats[0].act[0][:, 6:9])
    assert FeatureNorm.from_dict(norm.to_dict()).mean["act"].tolist() == norm.mean["act"].tolist()


# --------------------------------------------------------------------------
# passes

def _blocked_layer_problem():
    """Hidden layer 0: unit 0 ambiguous, unit 1 blocked, unit 2 passing."""
    w1 = [[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]]
    b1 = [0.0, -5.0, 5.0]
    net = Network((Layer.dense(w1, b1), Layer.dense([[1.0, 1.0, -1.0]], [0.0])))
    box = InputBox(np.array([-1.0, -1.0]), np.array([1.0, 1.0]))
    return VerificationProblem(net, box, {"property_id": "g"})


def _np_mlp(P, name, x):
    h = x @ P[f"{name}.w1"] + P[f"{name}.b1"]
    if f"{name}.w2" not in P:
        return np.maximum(h, 0)
    return np.maximum(h, 0) @ P[f"{name}.w2"] + P[f"{name}.b2"]


def test_blocked_node_forward_gating():
    p = _blocked_layer_problem()
    d = root_domain(p)
    f = extract_features(d, p.network)
    params = _nonzero_biases(GnnParams.init(8, 1, 0), np.random.default_rng(0))
    state = forward_pass(EmbeddingState.zeros(p.network, 8), f, p.network, params, True)
    A = params.arrays
    n0 = _np_mlp(A, "act_nb", np.zeros((1, 16)))
    expected = _np_mlp(A, "act_com", np.concatenate([np.zeros((1, 8)), n0], axis=1))
    np.testing.assert_allclose(state.hidden[0][1], expected[0], atol=1e-12)
    assert not np.allclose(state.hidden[0][2], expected[0])


def test_symmetric_bounds_give_equal_gates():
    p = _blocked_layer_problem()
    f = extract_features(root_domain(p), p.network)
    F = prepare(f, FeatureNorm())
    assert F.alpha[0][0, 0] == pytest.approx(0.5) and F.alpha2[0][0, 0] == pytest.approx(0.5)
    assert F.alpha[0][1, 0] == 0.0 and F.alpha2[0][1, 0] == 0.0
    assert F.alpha[0][2, 0] == 1.0 and F.alpha2[0][2, 0] == 1.0


def test_zero_weights_give_bias_images():
    p, d = branching_domains(np.random.default_rng(6), 1)[0]
    f = extract_features(d, p.network)
    params = _nonzero_biases(GnnParams.init(8, 2, 0), np.random.default_rng(1))
    for k in params.arrays:
        if ".w" in k:
            params.arrays[k][:] = 0.0
    emb = embeddings(f, p.network, params)
    A = params.arrays
    for h in emb.hidden:
        np.testing.assert_array_equal(h, np.broadcast_to(A["bact_com.b2"], h.shape))
    np.testing.assert_array_equal(emb.inp, np.broadcast_to(A["binp_com.b2"], emb.inp.shape))
    np.testing.assert_array_equal(emb.out, A["out_com.b2"][None])
    s = infer(f, p.network, params)[1]
    assert np.all(s == s[0])


def test_backward_zero_duals_only_rb_matters():
    p, d = branching_domains(np.random.default_rng(7), 1)[0]
    f = extract_features(d, p.network)
    for a in f.act:
        a[:, 6:9] = 0.0
    params = _nonzero_biases(GnnParams.init(8, 1, 0), np.random.default_rng(2))
    st = forward_pass(EmbeddingState.zeros(p.network, 8), f, p.network, params, True)
    b1 = backward_pass(st, f, p.network, params)
    # the dual-scaled block of bact_lf2's input is zero, so its weights are irrelevant
    params2 = params.copy()
    params2.arrays["bact_lf2.w1"][:24] = np.random.default_rng(3).normal(size=(24, 8))
    b2 = backward_pass(st, f, p.network, params2)
    for x, y in zip(b1.hidden, b2.hidden):
        np.testing.assert_array_equal(x, y)


def test_dense_backward_has_no_division():
    layer = Layer.dense(np.random.default_rng(8).normal(size=(3, 4)), np.zeros(3))
    x = np.random.default_rng(9).normal(size=(3, 5))
    tape = Tape()
    e = gnn._emap_t(tape, layer, tape.leaf(x))
    np.testing.assert_array_equal(e.value, linear_map_transpose(layer, x))


def test_conv_backward_divides_by_uniform_fanout():
    rng = np.random.default_rng(10)
    # 1x1 kernel with 3 output channels: every input pixel feeds exactly 3 outputs
    layer = Layer.conv2d(rng.normal(size=(3, 2, 1, 1)), np.zeros(3), (2, 4, 4))
    x = rng.normal(size=(layer.out_size, 5))
    tape = Tape()
    e = gnn._emap_t(tape, layer, tape.leaf(x))
    np.testing.assert_allclose(e.value, linear_map_transpose(layer, x) / 3.0, atol=1e-14)


def test_infer_deterministic_and_finite_fuzz():
    rng = np.random.default_rng(11)
    params = GnnParams.init(16, 2, 0)
    for p, d in branching_domains(rng, 50, sizes=(4, 8, 8, 3)):
        f = extract_features(d, p.network)
        nodes, s = infer(f, p.network, params)
        assert nodes == [c.as_tuple() for c in d.candidates()]
        assert np.all(np.isfinite(s))
        np.testing.assert_array_equal(s, infer(f, p.network, params)[1])


def test_permutation_equivariance():
    rng = np.random.default_rng(12)
    p, d = branching_domains(rng, 1, min_amb=4)[0]
    f = extract_features(d, p.network)
    net = p.network
    params = _nonzero_biases(GnnParams.init(16, 2, 3), rng)
    perm = rng.permutation(net.layers[0].out_size)
    l0, l1 = net.layers[0], net.layers[1]
    pnet = Network((Layer.dense(l0.weight[perm], l0.bias[perm]),
                    Layer.dense(l1.weight[:, perm], l1.bias)) + net.layers[2:])
    pf = NodeFeatures(f.inp, [f.act[0][perm]] + f.act[1:], f.out, f.binp)
    inv = np.argsort(perm)
    nodes = [(0, j) for j in range(len(perm))] + [(1, j) for j in range(net.layers[1].out_size)]
    pnodes = [(0, int(inv[j])) for j in range(len(perm))] + nodes[len(perm):]
    a = score_nodes(f, net, params, nodes)
    b = score_nodes(pf, pnet, params, pnodes)
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_structural_transfer_across_architectures():
    params = GnnParams.init(8, 2, 0)
    rng = np.random.default_rng(13)
    for sizes in [(3, 5, 3), (4, 12, 6, 9, 2), (2, 20, 2)]:
        p = toy_problem(rng, sizes, 0.5)
        d = root_domain(p)
        if d.feasible and d.has_ambiguous():
            nodes, s = infer(extract_features(d, p.network), p.network, params)
            assert len(s) == len(nodes) and np.all(np.isfinite(s))
    conv = Layer.conv2d(rng.normal(size=(2, 1, 2, 2)), rng.normal(0, 0.1, 2), (1, 4, 4), (2, 2))
    net = Network((conv, Layer.dense(rng.normal(size=(3, 8)), np.zeros(3)),
                   Layer.dense(rng.normal(size=(1, 3)), [0.0])))
    p = VerificationProblem(net, InputBox(np.zeros(16), np.ones(16)), {"property_id": "c"})
    d = root_domain(p)
    nodes, s = infer(extract_features(d, net), net, params)
    assert np.all(np.isfinite(s)) and len(nodes) == d.bounds.n_ambiguous()


# --------------------------------------------------------------------------
# losses and gradients

@pytest.mark.parametrize("gap,loss", [(2.0, 0.0), (0.0, 1.0), (-1.0, 2.0)])
def test_hinge_examples(gap, loss):
    assert hinge_rank_loss([0.0, gap], [0, 1]) == pytest.approx(loss)


def test_hinge_no_pairs_warns():
    with pytest.warns(RuntimeWarning):
        assert hinge_rank_loss([0.3, 0.1], [2, 2]) == 0.0


def test_hinge_averages_over_pairs():
    s, y = [0.0, 0.5, 3.0], [0, 1, 2]
    pairs = [(0, 1), (0, 2), (1, 2)]
    expected = np.mean([max(0.0, 1 - (s[j] - s[i])) for i, j in pairs])
    assert hinge_rank_loss(s, y) == pytest.approx(expected)


def _labelled(rng, n=1, p=8, T=2):
    out = []
    for prob, d in branching_domains(rng, n):
        f = extract_features(d, prob.network)
        nodes = f.candidates()
        labels = rng.integers(0, 4, len(nodes))
        labels[0], labels[-1] = 0, 3
        out.append((prob, f, nodes, labels))
    return out


def test_loss_matches_forward_scores():
    rng = np.random.default_rng(14)
    params = GnnParams.init(8, 2, 1)
    for prob, f, nodes, labels in _labelled(rng, 3):
        loss, _ = loss_and_gradient(f, prob.network, params, nodes, labels)
        assert loss == pytest.approx(hinge_rank_loss(score_nodes(f, prob.network, params, nodes),
                                                     labels))


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(15)
    params = _nonzero_biases(GnnParams.init(8, 2, 2), rng)
    h = 1e-4
    for prob, f, nodes, labels in _labelled(rng, 2):
        _, grads = loss_and_gradient(f, prob.network, params, nodes, labels)
        names = params.names
        for _ in range(15):
            name = names[int(rng.integers(len(names)))]
            idx = tuple(int(rng.integers(s)) for s in params.arrays[name].shape)
            arr = params.arrays[name]
            old = arr[idx]
            arr[idx] = old + h
            up = hinge_rank_loss(score_nodes(f, prob.network, params, nodes), labels)
            arr[idx] = old - h
            dn = hinge_rank_loss(score_nodes(f, prob.network, params, nodes), labels)
            arr[idx] = old
            fd, an = (up - dn) / (2 * h), grads[name][idx]
            assert abs(fd - an) <= 1e-3 * max(abs(fd), abs(an), 1e-6), (name, idx, fd, an)


def test_zero_loss_gives_zero_gradient():
    rng = np.random.default_rng(16)
    prob, f, nodes, _ = _labelled(rng, 1)[0]
    params = GnnParams.init(8, 2, 0)
    s = score_nodes(f, prob.network, params, nodes)
    # labels ordered like the scores; the margin is met after a large score-head rescale
    params.arrays["score.w2"] *= 1e6 / max(np.ptp(s), 1e-12)
    s = score_nodes(f, prob.network, params, nodes)
    labels = np.argsort(np.argsort(s))
    loss, grads = loss_and_gradient(f, prob.network, params, nodes, labels)
    assert loss == 0.0
    assert all(np.all(g == 0) for g in grads.values())


def test_theta0_dead_path_when_first_layer_blocked():
    # every first-layer ReLU blocked: nothing computed by F_inp reaches a score
    rng = np.random.default_rng(17)
    w1 = rng.normal(size=(4, 3))
    net = Network((Layer.dense(w1, np.full(4, -50.0)), Layer.dense(rng.normal(size=(3, 4)),
                                                                   rng.normal(size=3)),
                   Layer.dense(rng.normal(size=(1, 3)), [0.0])))
    p = VerificationProblem(net, InputBox(np.zeros(3), np.ones(3)), {"property_id": "dead"})
    d = root_domain(p)
    f = extract_features(d, net)
    params = _nonzero_biases(GnnParams.init(8, 2, 0), rng)
    nodes = [(1, 0), (1, 1), (1, 2)]
    _, grads = loss_and_gradient(f, net, params, nodes, [0, 1, 2])
    for name, g in grads.items():
        if params.group_of(name) == "theta0":
            assert np.all(g == 0), name
    assert any(np.any(g != 0) for n, g in grads.items() if params.group_of(n) == "theta5")


def test_groups_cover_all_parameters():
    params = GnnParams.init(8, 2, 0)
    groups = {params.group_of(n) for n in params.names}
    assert groups == set(gnn.GROUPS)
    assert params.arrays["act_lf.w1"].shape == (9, 8)
    assert params.arrays["bact_lf2.w1"].shape == (32, 8)
    assert params.arrays["out_lf.w1"].shape == (4, 8) and "out_lf.w2" not in params.arrays
    assert params.arrays["score.w2"].shape == (8, 1)


def test_init_distribution():
    params = GnnParams.init(64, 2, 0)
    w = np.concatenate([v.ravel() for k, v in params.arrays.items() if ".w" in k])
    assert abs(w.std() - 0.1) < 0.005 and abs(w.mean()) < 0.005
    assert all(np.all(v == 0) for k, v in params.arrays.items() if ".b" in k)


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(18)
    params = _nonzero_biases(GnnParams.init(8, 2, 5), rng)
    p, d = branching_domains(rng, 1)[0]
    f = extract_features(d, p.network)
    params.norm = FeatureNorm.fit([f])
    path = tmp_path / "ck.json"
    params.save(path)
    back = GnnParams.load(path)
    assert back.p == 8 and back.T == 2 and back.seed == 5
    for k in params.names:
        np.testing.assert_array_equal(back.arrays[k], params.arrays[k])
    np.testing.assert_array_equal(infer(f, p.network, back)[1], infer(f, p.network, params)[1])
    raw = json.loads(path.read_text())
    raw["schema_version"] = 99
    path.write_text(json.dumps(raw))
    with pytest.raises(ValueError):
        GnnParams.load(path)
