import numpy as np
import pytest

from segxfer import tensor as T
from segxfer import unet
from segxfer.errors import ContractViolation
from segxfer.losses import dice_loss
from segxfer.transfer import SCENARIO_PREFIXES

from gradcheck import REL_TOL, max_rel_error, numeric_grad

SMALL = unet.UNetConfig(in_channels=3, depth=2, base_channels=4, num_classes=3, embed_dim=8, input_size=8)


def block(cin, cout):
    # two 3x3 convs without bias, each followed by BN gamma + beta
    return 9 * cin * cout + 9 * cout * cout + 4 * cout


def test_param_count_closed_form_depth3():
    cfg = unet.UNetConfig(in_channels=3, depth=3, base_channels=16, num_classes=2, embed_dim=64, input_size=64)
    encoder = block(3, 16) + block(16, 32) + block(32, 64)
    decoder = block(128, 64) + block(96, 32) + block(48, 16)
    seg = 16 + 1
    cls = 64 * 2 + 2
    proj = (64 * 64 + 64) + (64 * 64 + 64)
    recon = (3 * 16 + 3) + 2 * (block(48, 16) + 3 * 16 + 3) + (block(48, 16) + 16 + 1)
    expected = encoder + decoder + seg + cls + proj + recon
    assert unet.param_count(unet.build(cfg, 0)) == expected
    buffers = 2 * 2 * (16 + 32 + 64 + 64 + 32 + 16 + 3 * 16)
    assert unet.param_count(unet.build(cfg, 0), include_buffers=True) == expected + buffers


def test_param_count_trivial_trees():
    assert unet.param_count({}) == 0
    tree = {"c/weight": T.Tensor(np.zeros((1, 1, 3, 3)), requires_grad=True),
            "c/bias": T.Tensor(np.zeros(1), requires_grad=True)}
    assert unet.param_count(tree) == 10


def test_paper_scale_config_builds():
    cfg = unet.UNetConfig(depth=4, base_channels=64, input_size=128)
    n = unet.param_count(unet.build(cfg, 0))
    assert n > 8_000_000  # reported for comparison only; see README


def test_build_is_deterministic_and_sorted():
    a, b = unet.build(SMALL, 3), unet.build(SMALL, 3)
    assert list(a) == sorted(a) == list(b)
    assert all(a[k].data.tobytes() == b[k].data.tobytes() for k in a)


def test_partition_prefixes_are_disjoint_and_exhaustive():
    top = ("encoder/", "decoder/", "heads/seg/", "heads/cls/", "heads/proj/",
           "heads/recon_b/", "heads/recon_c/", "heads/recon_d/", "heads/recon_e/")
    for name in unet.build(SMALL, 0):
        assert sum(name.startswith(p) for p in top) == 1, name
    # every scenario prefix lies inside the partition
    assert all(p in top for prefixes in SCENARIO_PREFIXES.values() for p in prefixes)


def test_he_init_statistics():
    cfg = unet.UNetConfig(depth=3, base_channels=32, input_size=32)
    w = unet.build(cfg, 1)["encoder/block2/conv2/weight"].data
    fan_in = w.shape[1] * 9
    assert abs(w.mean()) < 0.01
    assert w.var() == pytest.approx(2 / fan_in, rel=0.05)


@pytest.mark.parametrize("bad", [dict(input_size=60, depth=3), dict(depth=1), dict(base_channels=2)])
def test_invalid_config(bad):
    with pytest.raises(ContractViolation):
        unet.UNetConfig(**bad)


def _x(n=2, size=8, seed=0, dtype=np.float32):
    return T.Tensor(np.random.default_rng(seed).random((n, 3, size, size)).astype(dtype))


def test_encoder_shapes():
    cfg = unet.UNetConfig(depth=3, base_channels=16, input_size=64)
    enc = unet.forward_encoder(unet.build(cfg, 0), _x(2, 64), train=False)
    assert enc.bottleneck.shape == (2, 64, 8, 8)
    assert [s.shape for s in enc.skips] == [(2, 16, 64, 64), (2, 32, 32, 32), (2, 64, 16, 16)]


def test_encoder_rejects_wrong_input():
    params = unet.build(SMALL, 0)
    with pytest.raises(ContractViolation):
        unet.forward_encoder(params, _x(2, 6))
    with pytest.raises(ContractViolation):
        unet.forward_segmentation(params, _x(2, 16), input_size=8)


def test_seeds_change_bottleneck_and_eval_is_pure():
    x = _x()
    p0, p1 = unet.build(SMALL, 0), unet.build(SMALL, 1)
    b0 = unet.forward_encoder(p0, x).bottleneck.data
    assert not np.allclose(b0, unet.forward_encoder(p1, x).bottleneck.data)
    np.testing.assert_array_equal(b0, unet.forward_encoder(p0, x).bottleneck.data)


def test_segmentation_output_range_and_shape():
    out = unet.forward_segmentation(unet.build(SMALL, 0), _x(3))
    assert out.shape == (3, 1, 8, 8)
    assert np.all((out.data > 0) & (out.data < 1))


def test_skip_connections_are_live():
    params = unet.build(SMALL, 0)
    x = _x()
    base = unet.forward_segmentation(params, x).data
    enc = unet.forward_encoder(params, x)
    enc.skips[0] = T.Tensor(np.zeros_like(enc.skips[0].data))
    h = unet._decode(params, enc, False)
    zeroed = T.sigmoid(T.conv2d(h, params["heads/seg/weight"], params["heads/seg/bias"])).data
    assert not np.allclose(base, zeroed)


def test_dice_gradient_wrt_head_matches_finite_differences():
    params = unet.build(SMALL, 0, dtype=np.float64)
    x = _x(dtype=np.float64)
    target = (np.random.default_rng(1).random((2, 1, 8, 8)) > 0.5).astype(np.float64)

    def loss_of(head_w):
        with T.no_grad():
            p = dict(params, **{"heads/seg/weight": T.Tensor(head_w[0])})
            return dice_loss(unet.forward_segmentation(p, x), target).item()

    w = params["heads/seg/weight"]
    T.backward(dice_loss(unet.forward_segmentation(params, x), target))
    numeric = numeric_grad(loss_of, [w.data.copy()], 0)
    assert max_rel_error(w.grad, numeric) < REL_TOL


def test_full_unet_gradients_finite():
    params = unet.build(SMALL, 0)
    target = (np.random.default_rng(1).random((2, 1, 8, 8)) > 0.5).astype(np.float32)
    T.backward(dice_loss(unet.forward_segmentation(params, _x(), train=True), target))
    seg = unet.task_params(params, "seg")
    assert all(t.grad is not None and np.all(np.isfinite(t.grad)) for k, t in seg.items() if t.requires_grad)


def test_conrec_outputs():
    params = unet.build(SMALL, 0)
    embed, recon = unet.forward_conrec(params, _x(4))
    np.testing.assert_allclose(np.linalg.norm(embed.data, axis=1), 1, atol=1e-5)
    assert embed.shape == (4, SMALL.embed_dim)
    assert {k: v.shape for k, v in recon.items()} == {"b": (4, 3, 8, 8), "c": (4, 3, 8, 8),
                                                       "d": (4, 1, 8, 8), "e": (4, 3, 8, 8)}


@pytest.mark.parametrize("head,prefix", [("b", "decoder/block1/"), ("c", "heads/recon_c/block/"),
                                         ("d", "heads/recon_d/block/"), ("e", "heads/recon_e/block/")])
def test_conrec_final_blocks_are_isolated(head, prefix):
    params = unet.build(SMALL, 0)
    x = _x()
    _, before = unet.forward_conrec(params, x)
    perturbed = {k: (T.Tensor(t.data + 0.5) if k.startswith(prefix) and k.endswith("weight") else t)
                 for k, t in params.items()}
    _, after = unet.forward_conrec(perturbed, x)
    for h in unet.RECON_HEADS:
        assert np.array_equal(before[h].data, after[h].data) == (h != head), h


def test_classification_logits():
    logits = unet.forward_classification(unet.build(SMALL, 0), _x(5))
    assert logits.shape == (5, 3)
    p = np.exp(logits.data - logits.data.max(1, keepdims=True))
    np.testing.assert_allclose((p / p.sum(1, keepdims=True)).sum(1), 1, atol=1e-6)


def test_classification_overfits_separable_batch():
    params = unet.build(unet.UNetConfig(depth=2, base_channels=4, num_classes=2, input_size=8), 0)
    rng = np.random.default_rng(0)
    x = rng.random((8, 3, 8, 8)).astype(np.float32) * 0.2
    labels = np.array([0, 1] * 4)
    x[labels == 1, 0] += 0.8  # positive class: strong red channel
    trainable = unet.task_params(params, "cls")
    state = T.AdamState(lr=1e-2)
    for _ in range(50):
        T.backward(T.softmax_cross_entropy(unet.forward_classification(params, T.Tensor(x), train=True), labels))
        T.adam_step(trainable, state)
        T.zero_grad(params)
    pred = unet.forward_classification(params, T.Tensor(x), train=False).data.argmax(1)
    assert (pred == labels).mean() == 1.0


def test_segmentation_overfits_fixed_batch():
    from segxfer.datagen import DatasetSpec, make_dataset, stack
    from segxfer.losses import dice_score

    samples = make_dataset(DatasetSpec(n_samples=4, image_size=16, kinds=("disk",), seed=3))
    images, masks, _ = stack(samples)
    params = unet.build(unet.UNetConfig(depth=2, base_channels=8, input_size=16), 0)
    trainable = unet.task_params(params, "seg")
    state = T.AdamState(lr=1e-2)
    for _ in range(300):
        T.backward(dice_loss(unet.forward_segmentation(params, T.Tensor(images), train=True), masks))
        T.adam_step(trainable, state)
        T.zero_grad(params)
    pred = unet.forward_segmentation(params, T.Tensor(images), train=True).data
    assert dice_score(pred, masks).mean() >= 0.99
