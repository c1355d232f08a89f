import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from segxfer import tensor as T
from segxfer.errors import ContractViolation
from segxfer.losses import ConRecWeights, conrec_loss, dice_loss, dice_score, ntxent_loss, recon_loss

from gradcheck import REL_TOL, check


def t64(a, grad=False):
    return T.Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


def unit_rows(rng, n, d):
    x = rng.standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


# ---------------------------------------------------------------- dice

def test_dice_exact_match_is_zero():
    target = (np.random.default_rng(0).random((3, 1, 5, 5)) > 0.5).astype(np.float64)
    assert dice_loss(t64(target), target).item() == 0.0


def test_dice_disjoint_hand_value():
    pred = np.zeros((1, 1, 4, 4))
    target = np.zeros((1, 1, 4, 4))
    pred[0, 0, :2] = 1
    target[0, 0, 2:] = 1
    assert dice_loss(t64(pred), target, eps=1.0).item() == pytest.approx(1 - 1 / 17, abs=1e-12)


def test_dice_half_prediction_on_full_target():
    n = 37
    assert dice_loss(t64(np.full((1, n), 0.5)), np.ones((1, n)), eps=0.0).item() == pytest.approx(1 / 3)


def test_dice_is_per_sample_mean():
    pred = np.array([[1.0, 1.0], [1.0, 0.0]])
    target = np.array([[1.0, 1.0], [0.0, 1.0]])
    # sample 0 perfect (loss 0), sample 1 disjoint: 1 - eps / (2 + eps)
    assert dice_loss(t64(pred), target, eps=1.0).item() == pytest.approx(0.5 * (1 - 1 / 3))


def test_dice_rejects_bad_inputs():
    with pytest.raises(ContractViolation):
        dice_loss(t64(np.zeros((1, 4))), np.zeros((1, 5)))
    with pytest.raises(ContractViolation, match="binary"):
        dice_loss(t64(np.zeros((1, 4))), np.full((1, 4), 0.5))


def test_dice_gradient():
    rng = np.random.default_rng(1)
    pred = rng.uniform(0.05, 0.95, size=(3, 1, 4, 4))
    target = (rng.random((3, 1, 4, 4)) > 0.5).astype(np.float64)
    assert check(lambda t: dice_loss(t[0], target), [pred]) < REL_TOL


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2 ** 20), step=st.floats(0.05, 0.9))
def test_dice_range_and_monotone_toward_target(seed, step):
    rng = np.random.default_rng(seed)
    target = (rng.random((2, 12)) > 0.5).astype(np.float64)
    target[:, 0] = 1  # nonempty
    pred = rng.uniform(0, 1, size=target.shape)
    closer = pred + step * (target - pred)
    a = dice_loss(t64(pred), target).item()
    b = dice_loss(t64(closer), target).item()
    assert 0 <= b < a < 1


def test_dice_score_thresholded_and_soft():
    pred = np.array([[0.9, 0.6, 0.2, 0.1]])
    target = np.array([[1.0, 0.0, 0.0, 0.0]])
    assert dice_score(pred, target)[0] == pytest.approx(2 / 3, abs=1e-6)
    assert dice_score(pred, target, threshold=None)[0] == pytest.approx(1.8 / 2.8, abs=1e-6)


# ---------------------------------------------------------------- NT-Xent

def test_ntxent_orthogonal_pairs_hand_value():
    e, f = [1.0, 0.0], [0.0, 1.0]
    loss = ntxent_loss(t64([e, e, f, f]), temperature=1.0).item()
    assert loss == pytest.approx(math.log(1 + 2 * math.exp(-1)), abs=1e-6)
    assert loss == pytest.approx(0.5514, abs=1e-4)


def test_ntxent_sample_permutation_invariance():
    rng = np.random.default_rng(2)
    x = unit_rows(rng, 8, 5)
    order = rng.permutation(4)
    permuted = x.reshape(4, 2, 5)[order].reshape(8, 5)
    assert ntxent_loss(t64(x)).item() == pytest.approx(ntxent_loss(t64(permuted)).item(), abs=1e-12)


def test_ntxent_matched_positives_beat_shuffled():
    rng = np.random.default_rng(3)
    anchors = unit_rows(rng, 6, 8)
    views = anchors + 0.05 * rng.standard_normal(anchors.shape)
    views /= np.linalg.norm(views, axis=1, keepdims=True)
    matched = np.stack([anchors, views], axis=1).reshape(12, 8)
    shuffled = np.stack([anchors, views[np.roll(np.arange(6), 1)]], axis=1).reshape(12, 8)
    assert ntxent_loss(t64(matched)).item() <= ntxent_loss(t64(shuffled)).item()


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2 ** 20), d=st.integers(2, 6))
def test_ntxent_rotation_invariance(seed, d):
    rng = np.random.default_rng(seed)
    x = unit_rows(rng, 6, d)
    q, _ = np.linalg.qr(rng.standard_normal((d, d)))
    assert ntxent_loss(t64(x @ q)).item() == pytest.approx(ntxent_loss(t64(x)).item(), abs=1e-9)


def test_ntxent_requires_unit_rows():
    with pytest.raises(ContractViolation, match="normalized"):
        ntxent_loss(t64(np.ones((4, 3))))


def test_ntxent_gradient_through_normalization():
    x = np.random.default_rng(4).standard_normal((6, 4))
    assert check(lambda t: ntxent_loss(T.l2_normalize(t[0])), [x]) < REL_TOL


# ---------------------------------------------------------------- reconstruction / ConRec

def test_recon_loss_values():
    rng = np.random.default_rng(5)
    a, b = rng.random((2, 3, 4, 4)), rng.random((2, 3, 4, 4))
    assert recon_loss(t64(a), a).item() == 0
    assert recon_loss(t64(a + 1), a).item() == pytest.approx(1.0)
    expected = sum((x - y) ** 2 for x, y in zip(a.ravel(), b.ravel())) / a.size
    assert recon_loss(t64(a), b).item() == pytest.approx(expected, rel=1e-12)


def _conrec_inputs(seed=6):
    rng = np.random.default_rng(seed)
    embeds = unit_rows(rng, 4, 3)
    preds = {h: rng.random((4, 1 if h == "d" else 3, 4, 4)) for h in "bcde"}
    targets = {h: rng.random(p.shape) for h, p in preds.items()}
    targets["d"] = (targets["d"] > 0.5).astype(np.float64)
    return embeds, preds, targets


def _conrec(embeds, preds, targets, w, temperature=0.5):
    return conrec_loss(t64(embeds), {h: t64(p) for h, p in preds.items()}, targets, w, temperature).item()


def test_conrec_contrastive_only():
    e, p, t = _conrec_inputs()
    w = ConRecWeights(1.0, 0, 0, 0, 0)
    assert _conrec(e, p, t, w) == ntxent_loss(t64(e), 0.5).item()


def test_conrec_single_head_zero_on_match():
    e, p, t = _conrec_inputs()
    t["b"] = p["b"]
    assert _conrec(e, p, t, ConRecWeights(0, 1, 0, 0, 0)) == 0.0


def test_conrec_equals_weighted_component_sum():
    e, p, t = _conrec_inputs()
    w = ConRecWeights(0.7, 1.3, 0.2, 2.0, 0.5)
    expected = 0.7 * ntxent_loss(t64(e), 0.5).item() + sum(
        wh * np.mean((p[h] - t[h]) ** 2) for h, wh in w.head_weights().items())
    assert _conrec(e, p, t, w) == pytest.approx(expected, rel=1e-12)


@settings(max_examples=20, deadline=None)
@given(which=st.sampled_from(["lambda_contrastive", "w_b", "w_c", "w_d", "w_e"]),
       a=st.floats(0.1, 3.0), b=st.floats(0.1, 3.0))
def test_conrec_is_linear_in_each_weight(which, a, b):
    e, p, t = _conrec_inputs()
    base = dict(lambda_contrastive=1.0, w_b=1.0, w_c=1.0, w_d=1.0, w_e=1.0)
    la = _conrec(e, p, t, ConRecWeights(**{**base, which: a}))
    lb = _conrec(e, p, t, ConRecWeights(**{**base, which: b}))
    lm = _conrec(e, p, t, ConRecWeights(**{**base, which: (a + b) / 2}))
    assert lm == pytest.approx((la + lb) / 2, rel=1e-10)


def test_conrec_weights_validation():
    with pytest.raises(ContractViolation):
        ConRecWeights(0, 0, 0, 0, 0)
    with pytest.raises(ContractViolation):
        ConRecWeights(-1, 1, 1, 1, 1)
