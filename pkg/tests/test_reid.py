import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from escorte import numcore as nc, reid, simworld as sw
from escorte.action import ActionState


def _model(in_dim=5, hidden=7, out_dim=4, seed=0):
    return reid.EmbeddingModel.init(in_dim, hidden, out_dim, nc.make_rng(seed))


def _straight_line(model, x):
    p = model.params
    h = [max(0.0, sum(x[i] * p["W1"][i, j] for i in range(len(x))) + p["b1"][j]) for j in range(model.hidden)]
    return [sum(h[j] * p["W2"][j, k] for j in range(model.hidden)) + p["b2"][k] for k in range(model.out_dim)]


def test_embed_zero_weights():
    m = reid.EmbeddingModel({k: np.zeros_like(v) for k, v in _model().params.items()})
    np.testing.assert_array_equal(reid.embed(m, np.ones(5)), np.zeros(4))


def test_embed_identity_composition():
    m = reid.EmbeddingModel({"W1": np.eye(4), "b1": np.zeros(4), "W2": np.eye(4), "b2": np.zeros(4)})
    x = np.array([0.0, 1.5, 2.0, 0.25])
    np.testing.assert_array_equal(reid.embed(m, x), x)


def test_embed_matches_straight_line_recomputation():
    m = _model(seed=3)
    x = nc.make_rng(4).normal(size=5)
    np.testing.assert_allclose(reid.embed(m, x), _straight_line(m, x), atol=1e-12)


def test_embed_dimension_mismatch():
    with pytest.raises(nc.ShapeError):
        reid.embed(_model(), np.ones(6))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_embed_lipschitz_bound(seed):
    m = _model(seed=seed % 1000)
    r = np.random.default_rng(seed)
    x, y = r.normal(size=5), r.normal(size=5)
    bound = np.linalg.norm(m.params["W2"], 2) * np.linalg.norm(m.params["W1"], 2) * np.linalg.norm(x - y)
    assert np.linalg.norm(reid.embed(m, x) - reid.embed(m, y)) <= bound + 1e-9


def test_triplet_loss_examples():
    z = np.zeros(2)
    assert reid.triplet_loss(z, z, np.array([2.0, 0.0]), 1.0) == 0.0
    assert reid.triplet_loss(z, np.array([1.0, 0.0]), np.array([0.0, 1.0]), 0.3) == pytest.approx(0.3, abs=1e-15)
    # |a-p| = 5, |a-n| = 1
    assert reid.triplet_loss(z, np.array([3.0, 4.0]), np.array([0.0, 1.0]), 1.0) == 5.0


def test_triplet_loss_batch_averages():
    a = np.zeros((2, 2))
    p = np.array([[3.0, 4.0], [0.0, 0.0]])
    n = np.array([[0.0, 1.0], [5.0, 0.0]])
    assert reid.triplet_loss(a, p, n, 1.0) == pytest.approx(2.5)


def test_triplet_loss_rejects_mismatched_dims():
    with pytest.raises(nc.ShapeError):
        reid.triplet_loss(np.zeros(2), np.zeros(3), np.zeros(2), 1.0)


vectors = st.lists(st.floats(-10, 10), min_size=3, max_size=3).map(np.array)


@settings(max_examples=300, deadline=None)
@given(vectors, vectors, vectors, st.floats(0, 5))
def test_triplet_loss_law(a, p, n, margin):
    dap, dan = np.linalg.norm(a - p), np.linalg.norm(a - n)
    loss = reid.triplet_loss(a, p, n, margin)
    assert loss >= 0
    assert math.isclose(loss, max(dap - dan + margin, 0.0), abs_tol=1e-12)
    if dan >= dap + margin + 1e-9:
        assert loss == 0.0
    if dan < dap + margin - 1e-9:
        assert loss > 0.0


@settings(max_examples=200, deadline=None)
@given(vectors, vectors, vectors, st.floats(0, 5), st.integers(0, 2**32 - 1))
def test_triplet_loss_isometry_invariant(a, p, n, margin, seed):
    r = np.random.default_rng(seed)
    q, _ = np.linalg.qr(r.normal(size=(3, 3)))
    shift = r.normal(scale=10, size=3)
    moved = [q @ v + shift for v in (a, p, n)]
    assert abs(reid.triplet_loss(*moved, margin) - reid.triplet_loss(a, p, n, margin)) < 1e-9


def _cands(dists):
    return np.array([[d, 0.0] for d in dists])


def test_match_subject_examples():
    ref = np.zeros(2)
    assert reid.match_subject(ref, _cands([1.2, 1.6, 2.0]), 1.5).index == 0
    assert reid.match_subject(ref, _cands([1.6, 2.0]), 1.5).absent
    assert reid.match_subject(ref, _cands([1.2, 1.2]), 1.5).index == 0
    assert reid.match_subject(ref, np.zeros((0, 2)), 1.5).absent


def test_match_subject_default_threshold():
    assert reid.DEFAULT_THRESHOLD == 1.5
    assert reid.match_subject(np.zeros(2), _cands([1.5])).index == 0


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0, 4), min_size=1, max_size=6), st.floats(0, 4), st.floats(0, 4), st.randoms())
def test_match_subject_permutation_and_threshold_monotonicity(dists, t1, t2, rnd):
    ref = np.zeros(2)
    cands = _cands(dists)
    d = np.sqrt((cands**2).sum(axis=1))
    res = reid.match_subject(ref, cands, t1)
    if res.index is not None:
        assert res.distance <= t1
    else:
        assert d.min() > t1
    perm = list(range(len(dists)))
    rnd.shuffle(perm)
    res_p = reid.match_subject(ref, cands[perm], t1)
    if (d == d.min()).sum() == 1 and res.index is not None:
        assert perm[res_p.index] == res.index
    lo, hi = sorted((t1, t2))
    if reid.match_subject(ref, cands, lo).index is not None:
        assert reid.match_subject(ref, cands, hi).index is not None


def test_identify_checks_fingerprint():
    m1, m2 = _model(seed=1), _model(seed=2)
    anchor = reid.make_anchor(m1, np.ones(5), 0)
    with pytest.raises(ValueError):
        reid.identify(m2, anchor, np.ones((2, 5)))
    assert reid.identify(m1, anchor, np.ones((1, 5))).index == 0


def _seq(subject_feats, other_feats):
    frames = []
    for k, (s, o) in enumerate(zip(subject_feats, other_feats)):
        dets = (
            sw.Detection((0.0, 0.0, 10.0, 10.0), np.asarray(s, float), True),
            sw.Detection((20.0, 0.0, 10.0, 10.0), np.asarray(o, float), False),
        )
        frames.append(sw.FrameRecord(k, k / 30, dets, ActionState.FOLLOWING, 1.5))
    return sw.Sequence_("s", frames)


def test_sample_triplets_identity_constraints():
    subj = [[1.0, 0.0], [0.9, 0.1]]
    other = [[0.0, 1.0], [0.1, 0.9]]
    pool = reid.TripletPool.from_sequences([_seq(subj, other)])
    b = reid.sample_triplets(pool, nc.make_rng(0), 4)
    assert len(b.anchors) == len(b.positives) == len(b.negatives) == 4
    subj_rows = {tuple(v) for v in subj}
    for a, p, n in zip(b.anchors, b.positives, b.negatives):
        assert tuple(a) in subj_rows and tuple(p) in subj_rows
        assert tuple(a) != tuple(p)  # different frames
        assert tuple(n) in {tuple(v) for v in other}


def test_sample_triplets_single_identity_is_config_error():
    frames = [
        sw.FrameRecord(k, 0.0, (sw.Detection((0, 0, 1, 1), np.ones(2), True),), ActionState.FOLLOWING, 1.0)
        for k in range(3)
    ]
    pool = reid.TripletPool.from_sequences([sw.Sequence_("s", frames)])
    with pytest.raises(reid.ConfigError):
        reid.sample_triplets(pool, nc.make_rng(0), 4)


def test_sample_triplets_deterministic():
    pool = reid.TripletPool.from_sequences([_seq([[1, 0], [0.9, 0.1], [0.8, 0.2]], [[0, 1]] * 3)])
    a = reid.sample_triplets(pool, nc.make_rng(5), 8)
    b = reid.sample_triplets(pool, nc.make_rng(5), 8)
    np.testing.assert_array_equal(a.anchors, b.anchors)
    np.testing.assert_array_equal(a.negatives, b.negatives)


def test_embedding_plus_triplet_gradient_check():
    r = nc.make_rng(11)
    m = reid.EmbeddingModel.init(8, 8, 8, r)
    batch = reid.TripletBatch(r.normal(size=(4, 8)), r.normal(size=(4, 8)), r.normal(size=(4, 8)), 1.0)
    names = list(m.params)
    err = nc.grad_check(lambda v: reid.batch_loss(dict(zip(names, v)), batch), [m.params[k] for k in names])
    assert err < 1e-6


@pytest.fixture(scope="module")
def small_pool():
    spec = sw.CorpusSpec(sequences=8, identities=3, sigma=0.05, dim=16, max_distractors=2, splits=(1, 0, 0))
    return reid.TripletPool.from_sequences(sw.generate_corpus(spec, 3).sequences)


def test_train_reid_reduces_loss(small_pool):
    cfg = reid.ReidConfig(in_dim=16, hidden=32, out_dim=16, steps=500, batch=32, seed=1)
    init, _ = reid.train_reid(small_pool, reid.ReidConfig(**{**cfg.__dict__, "steps": 0}))
    trained, hist = reid.train_reid(small_pool, cfg)
    assert len(hist) == 500
    probe = reid.sample_triplets(small_pool, nc.make_rng(99), 256, cfg.margin)
    before = float(reid.batch_loss(init.params, probe))
    after = float(reid.batch_loss(trained.params, probe))
    assert after < 0.1 * before


def test_train_reid_zero_margin_clamp_leaves_params(small_pool):
    # identical anchor/positive: distance 0, loss clamps to 0 with zero gradient
    pool = reid.TripletPool([np.repeat(s[:1], 2, axis=0) for s in small_pool.subjects], small_pool.negatives)
    cfg = reid.ReidConfig(in_dim=16, hidden=32, out_dim=16, margin=0.0, steps=20, batch=8, seed=4)
    init, _ = reid.train_reid(pool, reid.ReidConfig(**{**cfg.__dict__, "steps": 0}))
    trained, hist = reid.train_reid(pool, cfg)
    assert all(h == 0.0 for h in hist)
    for k in init.params:
        np.testing.assert_array_equal(init.params[k], trained.params[k])


def test_train_reid_bit_identical(small_pool):
    cfg = reid.ReidConfig(in_dim=16, hidden=32, out_dim=16, steps=30, batch=16, seed=8)
    a, _ = reid.train_reid(small_pool, cfg)
    b, _ = reid.train_reid(small_pool, cfg)
    assert a.to_bytes() == b.to_bytes()
    assert reid.EmbeddingModel.from_bytes(a.to_bytes()).to_bytes() == a.to_bytes()
