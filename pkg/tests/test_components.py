import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from czsl.components import (
    ContextScorer,
    JointScorer,
    OracleFlagError,
    PriorScorer,
    Scorers,
    VisualScorer,
    parse_context_model,
    score_all_classes,
    score_table,
)
from czsl.datamodel import ClassVocab, ObjectInstance, Scene, SceneDataset, ZslInstance, make_instances
from czsl.diffprims import AffineParams, Mlp2Params


def _scene(classes, d_visual, rng, masked=True):
    objs = [
        ObjectInstance(f"o{k}", c, (0, 0, 2, 2), rng.normal(size=d_visual), rng.normal(size=d_visual) if masked else None)
        for k, c in enumerate(classes)
    ]
    return Scene("img", objs)


def test_parse_context_model():
    assert parse_context_model("sh") == {"sh"}
    assert parse_context_model("SH+TL") == {"sh", "tl"}
    assert parse_context_model("all") == {"sh", "sl", "tl"}
    assert parse_context_model("image") == {"i"}
    assert parse_context_model("th-union", oracle=True) == {"sh", "th"}
    with pytest.raises(OracleFlagError):
        parse_context_model("th-union")
    with pytest.raises(OracleFlagError):
        ContextScorer("sh+th", 4, 3)
    with pytest.raises(ValueError):
        parse_context_model("xx")


# --- visual -----------------------------------------------------------------


def test_visual_alignment_and_orthogonality():
    s = VisualScorer(3, 3, np.random.default_rng(0))
    s.proj.W[...] = np.eye(3)
    s.proj.b[...] = 0
    x = np.array([0.3, -1.0, 2.0])
    assert s.logscore(x, x) == pytest.approx(1.0, abs=1e-12)
    assert s.logscore(np.array([1.0, 0, 0]), np.array([0, 2.0, 0])) == 0.0


def test_visual_matches_reimplementation(rng):
    s = VisualScorer(6, 4, rng)
    feats, cv = rng.normal(size=(5, 6)), rng.normal(size=(7, 4))
    got = s.scores(feats, cv)
    for i, j in itertools.product(range(5), range(7)):
        p = s.proj.W @ feats[i] + s.proj.b
        ref = p @ cv[j] / (np.linalg.norm(p) * np.linalg.norm(cv[j]))
        assert abs(got[i, j] - ref) < 1e-9


@given(st.floats(1e-3, 1e3))
def test_visual_invariant_to_rescaling_w(lam):
    rng = np.random.default_rng(3)
    s = VisualScorer(5, 3, rng)
    x, w = rng.normal(size=5), rng.normal(size=3)
    assert s.logscore(x, lam * w) == pytest.approx(s.logscore(x, w), abs=1e-12)


def test_visual_zero_projection_flagged():
    s = VisualScorer(2, 2, np.random.default_rng(0))
    s.proj.W[...] = 0
    s.proj.b[...] = 0
    assert s.logscore(np.ones(2), np.ones(2)) == -1.0
    assert s.degenerate == 1


# --- context ----------------------------------------------------------------


def _two_label_world():
    vocab_mask = np.array([True, True, True, False, False])
    cv = np.array([[1.0, 0.0], [0.0, 1.0], [0.5, 0.5], [2.0, 2.0], [-1.0, 3.0]])
    return vocab_mask, cv


def test_aggregate_sh_mean(rng):
    mask, cv = _two_label_world()
    scene = _scene([3, 0, 1], 3, rng)
    inst = ZslInstance(scene, 0, mask)
    s = ContextScorer("sh", 2, 3, rng=rng)
    np.testing.assert_allclose(s.aggregate_context(inst, cv), [0.5, 0.5])


def test_aggregate_union_single_denominator(rng):
    mask, cv = _two_label_world()
    scene = _scene([4, 0, 3, 3], 3, rng)  # focus target, 1 source label, 2 target features
    inst = ZslInstance(scene, 0, mask)
    s = ContextScorer("sh+tl", 2, 3, rng=rng)
    p1 = s.encoder.ctx_proj.W @ scene.objects[2].feature + s.encoder.ctx_proj.b
    p2 = s.encoder.ctx_proj.W @ scene.objects[3].feature + s.encoder.ctx_proj.b
    np.testing.assert_allclose(s.aggregate_context(inst, cv), (cv[0] + p1 + p2) / 3, rtol=1e-12)


@pytest.mark.parametrize("model", ["sh", "sl", "tl", "sh+sl+tl"])
def test_empty_context_is_zero(model, rng):
    mask, cv = _two_label_world()
    inst = ZslInstance(_scene([3], 3, rng), 0, mask)
    s = ContextScorer(model, 2, 3, rng=rng)
    np.testing.assert_array_equal(s.aggregate_context(inst, cv), np.zeros(2))
    assert np.isfinite(s.logscore(inst, cv[3], cv))


@given(st.permutations(list(range(5))))
def test_aggregate_permutation_invariant(perm):
    rng = np.random.default_rng(9)
    mask, cv = _two_label_world()
    classes = [3, 0, 1, 4, 2, 3]
    scene = _scene(classes, 3, rng)
    s = ContextScorer("sh+sl+tl", 2, 3, rng=np.random.default_rng(1))
    base = s.aggregate_context(ZslInstance(scene, 0, mask), cv)
    objs = [scene.objects[0]] + [scene.objects[1 + k] for k in perm]
    shuffled = ZslInstance(Scene("img", objs), 0, mask)
    np.testing.assert_allclose(s.aggregate_context(shuffled, cv), base, rtol=1e-12, atol=1e-15)


def test_context_zero_scorer_returns_b2(rng):
    mask, cv = _two_label_world()
    inst = ZslInstance(_scene([3, 0, 4], 3, rng), 0, mask)
    s = ContextScorer("sh+tl", 2, 3, rng=rng)
    for t in s.scorer.tensors().values():
        t[...] = 0
    s.scorer.layer2.b[...] = 0.7
    assert s.logscore(inst, cv[3], cv) == 0.7
    np.testing.assert_array_equal(s.scores(s.encode([inst], cv), cv), np.full((1, 5), 0.7))


def test_context_hand_computed():
    mask, cv = _two_label_world()
    rng = np.random.default_rng(0)
    inst = ZslInstance(_scene([3, 0, 1], 3, rng), 0, mask)
    s = ContextScorer("sh", 2, 3, hidden=1, rng=rng)
    s.scorer = Mlp2Params(AffineParams(np.array([[0.1, -0.2, 0.3, 0.4]]), np.array([0.05])),
                          AffineParams(np.array([[2.0]]), np.array([-0.5])))
    w = cv[4]
    h = np.array([0.5, 0.5])
    ref = 2.0 * np.tanh(0.1 * h[0] - 0.2 * h[1] + 0.3 * w[0] + 0.4 * w[1] + 0.05) - 0.5
    assert abs(s.logscore(inst, w, cv) - ref) < 1e-9
    assert abs(s.scores(s.encode([inst], cv), cv)[0, 4] - ref) < 1e-9


def test_context_model_i_uses_masked_feature(rng):
    mask, cv = _two_label_world()
    scene = _scene([3, 0, 4], 3, rng)
    inst = ZslInstance(scene, 0, mask)
    s = ContextScorer("i", 2, 3, rng=rng)
    g = s.encoder.masked_proj.W @ scene.objects[0].masked_scene_feature + s.encoder.masked_proj.b
    from czsl.diffprims import mlp2_forward

    ref = mlp2_forward(s.scorer, np.concatenate([g, cv[3]]))[0]
    assert abs(s.logscore(inst, cv[3], cv) - ref) < 1e-12


def test_context_model_i_needs_masked_feature(rng):
    mask, cv = _two_label_world()
    inst = ZslInstance(_scene([3, 0], 3, rng, masked=False), 0, mask)
    with pytest.raises(ValueError):
        ContextScorer("i", 2, 3, rng=rng).logscore(inst, cv[3], cv)


@pytest.mark.parametrize("activation", ["sigmoid", "softplus"])
def test_context_non_tanh_path_matches_pairwise(activation, rng):
    mask, cv = _two_label_world()
    insts = [ZslInstance(_scene([3, 0, 1, 4], 3, rng), k, mask) for k in range(4)]
    s = ContextScorer("sh+tl", 2, 3, rng=rng, activation=activation)
    got = s.scores(s.encode(insts, cv), cv)
    for i, inst in enumerate(insts):
        for j in range(5):
            assert abs(got[i, j] - s.logscore(inst, cv[j], cv)) < 1e-12


# --- prior ------------------------------------------------------------------


def test_prior_zero_and_hand_computed():
    p = PriorScorer(2, 1, np.random.default_rng(0))
    for t in p.tensors().values():
        t[...] = 0
    p.net.layer2.b[...] = 1.5
    np.testing.assert_array_equal(p.scores(np.ones((3, 2))), [1.5] * 3)
    p.net.layer1.W[...] = [[0.3, -0.6]]
    p.net.layer1.b[...] = 0.1
    p.net.layer2.W[...] = [[-2.0]]
    w = np.array([1.0, 0.25])
    assert abs(p.logscore(w) - (-2.0 * np.tanh(0.3 - 0.15 + 0.1) + 1.5)) < 1e-9


# --- bundles ----------------------------------------------------------------


def _bundle(rng, d=3, dv=4, n=6):
    cv = rng.normal(size=(n, d))
    return Scorers(
        cv,
        visual=VisualScorer(dv, d, rng),
        context=ContextScorer("sh+tl", d, dv, rng=rng),
        prior=PriorScorer(d, rng=rng),
    )


def _instances(rng, dv=4):
    mask = np.array([True, True, True, False, False, False])
    scenes = [_scene(list(rng.integers(0, 6, size=4)), dv, rng) for _ in range(3)]
    vocab = ClassVocab([f"c{i}" for i in range(6)], np.ones(6, int), mask)
    ds = SceneDataset(scenes, vocab, dv, {"test": [0, 1, 2]})
    return make_instances(ds, "test", "generalized")


def test_score_all_classes_examples(rng):
    sc = _bundle(rng)
    inst = _instances(rng)[0]
    out = score_all_classes(sc, inst, [5, 1, 3])
    assert sorted(out) == [1, 3, 5]
    again = score_all_classes(sc, inst, [3, 5, 1])
    assert out == again
    cv = sc.class_vectors
    for c, (ctx, vis, pri) in out.items():
        assert ctx == pytest.approx(sc.context.logscore(inst, cv[c], cv), abs=1e-12)
        assert vis == pytest.approx(sc.visual.logscore(inst.focus_feature, cv[c]), abs=1e-12)
        assert pri == pytest.approx(sc.prior.logscore(cv[c]), abs=1e-12)


def test_score_table_restriction_consistent(rng):
    sc = _bundle(rng)
    insts = _instances(rng)
    full = score_table(sc, insts, np.arange(6))
    sub = score_table(sc, insts, [3, 4, 5])
    for name in ("context", "visual"):
        assert np.array_equal(getattr(full, name)[:, 3:], getattr(sub, name))
    assert np.array_equal(full.prior[3:], sub.prior)
    r = full.restrict([3, 4, 5])
    assert np.array_equal(r.combined((1, 2, 0.5)), sub.combined((1, 2, 0.5)))


def test_scorers_visual_joint_exclusive(rng):
    with pytest.raises(ValueError):
        Scorers(np.ones((2, 2)), visual=VisualScorer(2, 2, rng), joint=JointScorer("sh", 2, 2, rng=rng))


def test_joint_scores_and_tensor_names(rng):
    cv = rng.normal(size=(6, 3))
    j = JointScorer("sh+tl", 3, 4, rng=rng)
    insts = _instances(rng)
    sc = Scorers(cv, joint=j)
    t = score_table(sc, insts, np.arange(6))
    assert t.visual.shape == (len(insts), 6) and np.all(np.abs(t.visual) <= 1)
    assert all(k.startswith(("joint.proj", "joint.fuse", "joint.ctx_proj")) for k in j.tensors())
    assert sc.active == (False, True, False)


def test_tensor_prefixes(rng):
    sc = _bundle(rng)
    names = set(sc.tensors())
    assert {"visual.proj.W", "visual.proj.b", "prior.net.layer1.W", "context.ctx_proj.W", "context.scorer.layer2.b"} <= names
    assert {"context.masked_proj.W"} <= set(ContextScorer("i", 3, 4, rng=rng).tensors())


# --- isolation --------------------------------------------------------------


def _poison(monkeypatch):
    def boom(self):
        raise AssertionError("model code read a target-domain label")

    monkeypatch.setattr(ZslInstance, "oracle_context_labels", boom)
    monkeypatch.setattr(ZslInstance, "oracle_target_context_labels", boom)


@pytest.mark.parametrize("model", ["sh", "sl", "tl", "sh+tl", "sh+sl", "sl+tl", "sh+sl+tl", "i"])
def test_non_oracle_models_never_read_target_labels(model, monkeypatch, small_world):
    from czsl.training import TrainConfig, train

    ds, emb, _ = small_world
    _poison(monkeypatch)
    cv = emb.matrix(ds.vocab.labels)
    cfg = TrainConfig(epochs=1, context_model=model)
    res = train(["context", "joint"], ds, cv, cfg)
    for part in ("val", "test"):
        for mode in ("target", "generalized"):
            score_table(res.scorers, make_instances(ds, part, mode), np.arange(len(ds.vocab)))


def test_th_model_reads_oracle_accessor(monkeypatch, small_world):
    ds, emb, _ = small_world
    _poison(monkeypatch)
    cv = emb.matrix(ds.vocab.labels)
    s = ContextScorer("sh+th", cv.shape[1], ds.d_visual, oracle=True)
    insts = [i for i in make_instances(ds, "test", "target") if i.n_context]
    with pytest.raises(AssertionError, match="target-domain label"):
        s.encode(insts, cv)
