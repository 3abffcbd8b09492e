import numpy as np
import pytest

from hogs.contact import (
    AttentionWeights,
    FeatureEncoder,
    FeatureSet,
    bce_loss,
    classify,
    contact_f1,
    cross_view_attention,
    fuse,
    predict_contacts,
    train_contact,
    _forward_backward,
)
from hogs.mathcore import softmax
from hogs.physics import ContactSet


def test_single_view_attention_is_value_projection():
    rng = np.random.default_rng(0)
    w = AttentionWeights.create(6, 3, 4, seed=1)
    f = FeatureSet(rng.normal(size=(1, 6)))
    out = cross_view_attention(f, w)
    assert np.allclose(out, f.features @ w.w_v, atol=1e-12)


def test_attention_permutation_equivariant_exact():
    rng = np.random.default_rng(1)
    w = AttentionWeights.create(8, 4, 5, seed=2)
    f = FeatureSet(rng.normal(size=(5, 8)))
    out = cross_view_attention(f, w)
    perm = rng.permutation(5)
    out_p = cross_view_attention(FeatureSet(f.features[perm]), w)
    assert np.array_equal(out_p, out[perm])


def test_attention_hand_example_identity_projections():
    w = AttentionWeights(np.eye(2), np.eye(2), np.eye(2), np.zeros((2, 3)), np.zeros(3))
    f = FeatureSet(np.array([[1.0, 0.0], [0.0, 1.0]]))
    out = cross_view_attention(f, w)
    s = 1.0 / np.sqrt(2.0)
    a0 = softmax(np.array([s, 0.0]))
    a1 = softmax(np.array([0.0, s]))
    expected = np.stack([
        a0[0] * f.features[0] + a0[1] * f.features[1],
        a1[0] * f.features[0] + a1[1] * f.features[1],
    ])
    assert np.allclose(out, expected, atol=1e-12)


def test_attention_scale_dim_options():
    rng = np.random.default_rng(2)
    w = AttentionWeights.create(8, 2, 3, seed=3)
    f = FeatureSet(rng.normal(size=(3, 8)))
    a = cross_view_attention(f, w, scale_dim="projected")
    b = cross_view_attention(f, w, scale_dim="input")
    assert not np.allclose(a, b)


def test_attention_rows_are_softmax_normalized():
    rng = np.random.default_rng(3)
    w = AttentionWeights.create(5, 4, 2, seed=4)
    f = FeatureSet(rng.normal(size=(4, 5)))
    q = f.features @ w.w_q
    k = f.features @ w.w_k
    attn = softmax(q @ k.T / 2.0, axis=-1)
    assert np.allclose(attn.sum(axis=1), 1.0, atol=1e-9)


def test_fuse_basics():
    row = np.array([[1.0, 2.0, 3.0]])
    assert np.array_equal(fuse(row), row[0])
    two = np.array([[1.0, 2.0, 3.0], [1.0, 2.0, 3.0]])
    assert np.allclose(fuse(two), row[0], atol=1e-15)
    rng = np.random.default_rng(4)
    block = rng.normal(size=(6, 4))
    assert np.allclose(fuse(block), block.mean(axis=0), atol=1e-12)


def test_fuse_attention_permutation_invariant_bitwise():
    rng = np.random.default_rng(5)
    w = AttentionWeights.create(10, 4, 7, seed=6)
    f = FeatureSet(rng.normal(size=(6, 10)))
    probs0, set0 = predict_contacts(f, w)
    for _ in range(4):
        perm = rng.permutation(6)
        probs, cset = predict_contacts(FeatureSet(f.features[perm]), w)
        assert np.array_equal(probs, probs0)
        assert np.array_equal(cset.indices, set0.indices)


def test_classify_thresholds():
    w = AttentionWeights.create(4, 3, 5, seed=7)
    w.classifier_w[:] = 0.0
    w.classifier_b[:] = -50.0
    probs, cset = classify(np.zeros(3), w)
    assert len(cset) == 0
    w.classifier_b[:] = -50.0
    w.classifier_b[2] = 0.0
    probs, cset = classify(np.zeros(3), w, tau=0.5)
    assert probs[2] == 0.5
    assert 2 not in cset.indices  # strict threshold


def test_classify_monotone_in_tau():
    rng = np.random.default_rng(8)
    w = AttentionWeights.create(6, 3, 20, seed=9)
    f = FeatureSet(rng.normal(size=(4, 6)))
    fused = fuse(cross_view_attention(f, w))
    sets = [classify(fused, w, tau)[1] for tau in (0.2, 0.5, 0.8)]
    assert set(sets[2].indices) <= set(sets[1].indices) <= set(sets[0].indices)


def test_bce_gradients_match_fd():
    rng = np.random.default_rng(10)
    w = AttentionWeights.create(6, 3, 8, seed=11)
    f = FeatureSet(rng.normal(size=(2, 6)))
    labels = rng.uniform(size=8) > 0.5
    _, grads, _ = _forward_backward(f, labels, w, "projected")
    h = 1e-6
    for name in ("w_q", "w_k", "w_v", "classifier_w", "classifier_b"):
        arr = getattr(w, name)
        flat = arr.reshape(-1)
        probe = [0, flat.size // 2, flat.size - 1]
        for idx in probe:
            orig = flat[idx]
            flat[idx] = orig + h
            hi, _, _ = _forward_backward(f, labels, w, "projected")
            flat[idx] = orig - h
            lo, _, _ = _forward_backward(f, labels, w, "projected")
            flat[idx] = orig
            fd = (hi - lo) / (2 * h)
            g = grads[name].reshape(-1)[idx]
            assert abs(g - fd) < 1e-7 + 1e-4 * abs(fd), name


def test_train_zero_labels_large_negative_logits():
    rng = np.random.default_rng(12)
    w = AttentionWeights.create(6, 3, 5, seed=13)
    w.classifier_w[:] = 0.0
    w.classifier_b[:] = -12.0
    dataset = [
        (FeatureSet(rng.normal(size=(3, 6))), np.zeros(5, dtype=bool)) for _ in range(4)
    ]
    before = w.classifier_b.copy()
    trained, history = train_contact(dataset, w, epochs=20, lr=1e-3)
    assert history[0] < 1e-4
    assert np.max(np.abs(trained.classifier_b - before)) < 0.05


def test_train_separable_dataset_converges():
    rng = np.random.default_rng(14)
    v_count = 6
    d = 16
    encoder = FeatureEncoder.create(d, v_count, 3, seed=15, noise_sigma=0.01, keep_prob=1.0)
    patterns = [np.zeros(v_count, bool) for _ in range(4)]
    for i, p in enumerate(patterns):
        p[i : i + 2] = True
    dataset = [
        (encoder.encode(p, np.random.default_rng(100 + i)), p)
        for i, p in enumerate(patterns)
    ]
    w = AttentionWeights.create(d, 8, v_count, seed=16)
    trained, history = train_contact(dataset, w, epochs=200, lr=1e-2)
    assert history[-1] < 0.05
    # training loss non-increasing on a smoothed window
    s = np.convolve(history, np.ones(20) / 20, mode="valid")
    assert s[-1] <= s[0]


def test_training_never_touches_features():
    rng = np.random.default_rng(17)
    feats = FeatureSet(rng.normal(size=(3, 6)))
    blob = feats.features.tobytes()
    w = AttentionWeights.create(6, 3, 5, seed=18)
    train_contact([(feats, np.ones(5, bool))], w, epochs=10, lr=1e-2)
    assert feats.features.tobytes() == blob


def test_weights_round_trip(tmp_path):
    w = AttentionWeights.create(8, 4, 9, seed=19)
    path = tmp_path / "weights.bin"
    w.save(path)
    again = AttentionWeights.load(path)
    for name in ("w_q", "w_k", "w_v", "classifier_w", "classifier_b"):
        assert np.array_equal(getattr(again, name), getattr(w, name))


def test_feature_encoder_deterministic():
    enc = FeatureEncoder.create(12, 7, 4, seed=20)
    labels = np.array([1, 0, 0, 1, 1, 0, 0], dtype=bool)
    a = enc.encode(labels, np.random.default_rng(3))
    b = enc.encode(labels, np.random.default_rng(3))
    assert np.array_equal(a.features, b.features)
    c = enc.encode(labels, np.random.default_rng(4))
    assert not np.array_equal(a.features, c.features)
    # occlusion pattern is a fixed property of each view
    assert enc.view_masks.shape == (4, 7)
    assert not np.all(enc.view_masks)


def test_contact_f1():
    pred = ContactSet(np.array([0, 1, 2]))
    truth = ContactSet(np.array([1, 2, 3]))
    f1 = contact_f1(pred, truth, 10)
    assert abs(f1 - (2 * (2 / 3) * (2 / 3) / (4 / 3))) < 1e-12
    assert contact_f1(ContactSet(np.array([], dtype=int)), truth, 10) == 0.0


def test_bce_loss_basics():
    y = np.array([1.0, 0.0])
    assert bce_loss(np.array([1.0, 0.0]), y) < 1e-10
    assert bce_loss(np.array([0.5, 0.5]), y) > 0.5
