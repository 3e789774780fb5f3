import itertools
from dataclasses import replace

import numpy as np
import pytest
from scipy import stats

from czsl.components import score_table
from czsl.datamodel import candidate_classes, make_instances, write_scenes
from czsl.embeddings import save_embeddings
from czsl.inference import ranks_from_table
from czsl.metrics import first_relevant
from czsl.oracles import build_image_cooc
from czsl.synthgen import (
    WorldSpec,
    WorldTruth,
    expected_cooc_table,
    generate,
    object_count_pmf,
    pick_ambiguity_pairs,
    planted_context_world,
    prepare,
    zipf_prior,
)
from czsl.training import TrainConfig, train


def empirical_freq(ds):
    counts = np.zeros(len(ds.vocab))
    for s in ds.scenes:
        for o in s.objects:
            counts[o.class_idx] += 1
    return counts / counts.sum(), int(counts.sum())


def n_objects_spec(**kw):
    # about 10^4 objects: 2000 scenes of mean 5. With 20 classes multinomial noise
    # alone puts the expected TV near 0.017; at 50 classes it is already near 0.03.
    return WorldSpec(n_classes=20, n_scenes=2000, objects_per_scene_mean=5.0, **kw)


def test_uniform_prior_frequencies():
    ds, _, truth = generate(n_objects_spec(zipf_exponent=0.0, seed=1))
    freq, total = empirical_freq(ds)
    assert 9000 < total < 11000
    np.testing.assert_allclose(truth.prior, 1 / 20)
    assert 0.5 * np.abs(freq - 1 / 20).sum() < 0.03


def test_zipf_prior_frequencies():
    ds, _, truth = generate(n_objects_spec(seed=2))
    freq, _ = empirical_freq(ds)
    assert sorted(truth.prior, reverse=True) == pytest.approx(zipf_prior(20, 1.1))
    assert 0.5 * np.abs(freq - truth.prior).sum() < 0.03


def test_theme_cooccurrence_chi_square():
    spec = WorldSpec(n_classes=6, n_themes=2, n_scenes=1000, seed=3, theme_concentration=4.0)
    ds, _, truth = generate(spec)
    # first two objects of a scene are i.i.d. given the scene theme
    expected = np.einsum("t,tc,ti->ci", truth.theme_prior, truth.theme_class, truth.theme_class)
    observed = np.zeros((6, 6))
    for s in ds.scenes:
        observed[s.objects[0].class_idx, s.objects[1].class_idx] += 1
    res = stats.chisquare(observed.ravel(), expected.ravel() * len(ds.scenes))
    assert res.pvalue > 0.01


def test_truth_tables_normalized_and_roundtrip(tmp_path):
    _, _, truth = generate(WorldSpec(n_classes=12, n_themes=3, n_scenes=20))
    assert truth.prior.sum() == pytest.approx(1.0)
    assert truth.theme_prior.sum() == pytest.approx(1.0)
    np.testing.assert_allclose(truth.theme_class.sum(axis=1), 1.0)
    np.testing.assert_allclose(truth.theme_prior @ truth.theme_class, truth.prior)
    truth.save(tmp_path / "t.json")
    back = WorldTruth.load(tmp_path / "t.json")
    np.testing.assert_array_equal(back.theme_class, truth.theme_class)


def test_same_seed_identical_files(tmp_path):
    spec = WorldSpec(n_classes=10, n_scenes=50, seed=4)
    for name in ("a", "b"):
        ds, emb, _ = generate(spec)
        write_scenes(tmp_path / f"{name}.jsonl", ds.scenes, ds.vocab.labels)
        save_embeddings(emb, tmp_path / f"{name}.txt")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    assert (tmp_path / "a.txt").read_bytes() == (tmp_path / "b.txt").read_bytes()
    other = generate(replace(spec, seed=5))[0]
    write_scenes(tmp_path / "c.jsonl", other.scenes, other.vocab.labels)
    assert (tmp_path / "c.jsonl").read_bytes() != (tmp_path / "a.jsonl").read_bytes()


def test_zero_pairs_is_generate():
    spec = WorldSpec(n_classes=10, n_scenes=30, seed=6)
    a = generate(spec)
    b = planted_context_world(spec, [])
    assert [o.class_idx for s in a[0].scenes for o in s.objects] == [o.class_idx for s in b[0].scenes for o in s.objects]
    np.testing.assert_array_equal(a[0].scenes[3].objects[0].feature, b[0].scenes[3].objects[0].feature)
    np.testing.assert_array_equal(a[1].matrix(a[0].vocab.labels), b[1].matrix(b[0].vocab.labels))


def test_planted_pairs_share_visual_latent():
    spec = WorldSpec(n_classes=20, n_scenes=30, seed=7)
    pairs = pick_ambiguity_pairs(spec, 3)
    _, _, truth = planted_context_world(spec, pairs)
    for a, b in pairs:
        assert truth.home_theme[a] != truth.home_theme[b]
        np.testing.assert_array_equal(truth.visual_latent[a], truth.visual_latent[b])
    a, b = pairs[0]
    same = next(c for c in range(20) if c != a and truth.home_theme[c] == truth.home_theme[a])
    with pytest.raises(ValueError, match="home theme"):
        planted_context_world(spec, [(a, same)])


def test_spec_validation():
    for bad in (dict(n_classes=0), dict(n_themes=60), dict(objects_per_scene_mean=1.5), dict(zipf_exponent=-1)):
        with pytest.raises(ValueError):
            generate(WorldSpec(**bad))


def test_object_count_pmf():
    ks, ps = object_count_pmf(5.0)
    assert ps.sum() == pytest.approx(1.0) and ks[0] == 2
    assert (ks * ps).sum() == pytest.approx(5.0, abs=1e-9)
    ks, ps = object_count_pmf(5.0, max_objects=4)
    assert list(ks) == [2, 3, 4] and ps.sum() == pytest.approx(1.0)
    assert ps[0] == pytest.approx(np.exp(-3.0))


def test_expected_cooc_matches_monte_carlo():
    spec = WorldSpec(n_classes=6, n_themes=2, n_scenes=20000, seed=8, max_objects=4)
    ds, _, truth = generate(spec)
    emp = build_image_cooc(ds, oracle=True)
    exp = expected_cooc_table(truth, emp.M)
    np.testing.assert_allclose(emp.marginals, exp.marginals, rtol=0.05)
    np.testing.assert_allclose(emp.pairs, exp.pairs, rtol=0.15, atol=30)


def test_expected_cooc_matches_enumeration():
    spec = WorldSpec(n_classes=4, n_themes=2, n_scenes=1, seed=9, max_objects=3, objects_per_scene_mean=2.5)
    _, _, truth = generate(spec)
    marg = np.zeros(4)
    pairs = np.zeros((4, 4))
    for t, pt in enumerate(truth.theme_prior):
        for k, pk in zip(truth.k_values, truth.k_probs):
            for tup in itertools.product(range(4), repeat=int(k)):
                w = pt * pk * np.prod(truth.theme_class[t, list(tup)])
                present = set(tup)
                for c in present:
                    marg[c] += w
                for c, i in itertools.product(range(4), repeat=2):
                    if c == i:
                        pairs[c, c] += w * (tup.count(c) >= 2)
                    elif c in present and i in present:
                        pairs[c, i] += w
    exp = expected_cooc_table(truth)
    np.testing.assert_allclose(exp.marginals, marg, atol=1e-12)
    np.testing.assert_allclose(exp.pairs, pairs, atol=1e-12)


@pytest.mark.slow
def test_noiseless_visual_model_is_accurate():
    spec = WorldSpec(n_classes=50, n_scenes=2000, seed=10, visual_noise_sigma=0.0, embedding_noise_sigma=0.0)
    ds, emb, _ = generate(spec)
    ds = prepare(ds, 0.5, 10)
    cv = emb.matrix(ds.vocab.labels)
    res = train(["visual"], ds, cv, TrainConfig(epochs=100, margin_visual=0.5))
    cands = candidate_classes(ds.vocab, "target")
    insts = make_instances(ds, "test", "target")
    ranks = ranks_from_table(score_table(res.scorers, insts, cands), (0, 1, 0))
    assert np.mean(first_relevant(ranks, len(cands))) < 5.0


@pytest.mark.slow
def test_planted_pair_ranked_adjacent():
    spec = WorldSpec(n_classes=40, n_scenes=2000, seed=12, visual_noise_sigma=0.0, embedding_noise_sigma=0.0)
    (pair,) = pick_ambiguity_pairs(spec, 1)
    ds, emb, _ = planted_context_world(spec, [pair])
    ds = prepare(ds, 0.5, 12)
    cv = emb.matrix(ds.vocab.labels)
    res = train(["visual"], ds, cv, TrainConfig(epochs=30, margin_visual=0.5))
    cands = candidate_classes(ds.vocab, "generalized")
    insts = [i for i in make_instances(ds, "test", "generalized") if i.label in pair]
    t = score_table(res.scorers, insts, cands)
    r_true = ranks_from_table(t, (0, 1, 0))
    partner = {pair[0]: pair[1], pair[1]: pair[0]}
    t.true_col = np.array([partner[int(l)] for l in t.labels])
    r_conf = ranks_from_table(t, (0, 1, 0))
    assert len(insts) > 20
    assert np.mean(np.abs(r_true - r_conf) == 1) >= 0.8
