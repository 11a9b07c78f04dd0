import math

import numpy as np
import pytest

from gradweave import autodiff as ad
from gradweave.autodiff import Tensor
from gradweave.network import (
    CheckpointError,
    ModelConfig,
    Sample,
    box_mean,
    box_window,
    decode,
    encode,
    final_prediction,
    forward_all,
    init_model,
    load_checkpoint,
    pixel_weights,
    save_checkpoint,
    total_loss,
    weighted_bce,
    weighted_iou,
)

SMALL = ModelConfig(H=8, W=8, patch=4, d=6, n_layers=2, hidden=5, d_hat=4)


def _sample(rng, H=8, W=8):
    gt = np.zeros((H, W))
    gt[2:6, 1:5] = 1.0
    return Sample(rng.random((H, W)), rng.random((H, W)), gt)


def _naive_box_mean(img, k):
    h, w = img.shape
    r = k // 2
    out = np.zeros_like(img)
    for i in range(h):
        for j in range(w):
            vals = [img[a, b] for a in range(i - r, i + r + 1) for b in range(j - r, j + r + 1) if 0 <= a < h and 0 <= b < w]
            out[i, j] = sum(vals) / len(vals)
    return out


class TestEncoder:
    def test_zero_adapters_leave_backbone_features(self):
        model = init_model(SMALL, 0)
        img = np.random.default_rng(1).random((8, 8))
        stack = [
            {k.rsplit(".", 1)[1]: v for k, v in model.params.items() if k.startswith(f"theta_R.layer{l}.")}
            for l in range(SMALL.n_layers)
        ]
        got = encode(img, model.backbone, stack, SMALL).data
        x = ad.patchify_array(img, 4)
        for l in range(SMALL.n_layers):
            x = ad.gelu_value(x @ model.backbone[f"backbone.layer{l}.W"] + model.backbone[f"backbone.layer{l}.b"])
        np.testing.assert_allclose(got, x, rtol=0, atol=1e-14)

    def test_mirrored_streams_are_symmetric(self):
        model = init_model(SMALL, 0)
        rng = np.random.default_rng(2)
        a, b = rng.random((8, 8)), rng.random((8, 8))
        gt = np.zeros((8, 8))
        out1 = forward_all(Sample(a, b, gt), model, track=False)
        out2 = forward_all(Sample(b, a, gt), model, track=False)
        np.testing.assert_array_equal(out1.P_R.data, out2.P_T.data)
        np.testing.assert_array_equal(out1.P_F.data, out2.P_F.data)

    def test_wrong_image_shape(self):
        model = init_model(SMALL, 0)
        with pytest.raises(ValueError):
            forward_all(Sample(np.zeros((4, 4)), np.zeros((4, 4)), np.zeros((4, 4))), model)


def test_decoder_matches_naive_oracle():
    rng = np.random.default_rng(0)
    model = init_model(SMALL, 0, zero_up=False)
    theta = {k.split(".", 1)[1]: v for k, v in model.params.items() if k.startswith("theta_D.")}
    feat = rng.normal(size=(SMALL.tokens, SMALL.d))
    got = decode(Tensor(feat), theta, SMALL).data
    want = np.zeros((8, 8))
    for t in range(SMALL.tokens):
        h = ad.gelu_value(feat[t] @ theta["W1"] + theta["b1"])
        patch = (h @ theta["W2"] + theta["b2"]).reshape(4, 4)
        r, c = divmod(t, 2)
        want[4 * r : 4 * r + 4, 4 * c : 4 * c + 4] = patch
    np.testing.assert_allclose(got, want, rtol=1e-13, atol=1e-13)


class TestPixelWeights:
    @pytest.mark.parametrize("h,k", [(8, 3), (16, 3), (24, 3), (32, 5), (64, 9), (40, 5)])
    def test_window(self, h, k):
        assert box_window(h) == k

    def test_box_mean_matches_loops(self):
        img = np.random.default_rng(0).random((11, 9))
        for k in (3, 5):
            np.testing.assert_allclose(box_mean(img, k), _naive_box_mean(img, k), rtol=1e-13)

    def test_uniform_masks_weigh_one(self):
        np.testing.assert_array_equal(pixel_weights(np.zeros((8, 8))), np.ones((8, 8)))
        np.testing.assert_array_equal(pixel_weights(np.ones((8, 8))), np.ones((8, 8)))

    def test_boundary_weights(self):
        gt = np.zeros((32, 32))
        gt[8:24, 8:24] = 1
        w = pixel_weights(gt)
        want = 1 + 5 * np.abs(_naive_box_mean(gt, 5) - gt)
        np.testing.assert_allclose(w, want, rtol=1e-13)
        assert w.max() <= 6.0 and w[16, 16] == 1.0 and w[8, 8] > 1.0


class TestLosses:
    def test_bce_zero_logits_is_ln2(self):
        gt = np.zeros((4, 4))
        gt[:2] = 1
        v = weighted_bce(Tensor(np.zeros((4, 4))), gt, np.ones((4, 4))).item()
        assert v == pytest.approx(math.log(2), abs=1e-15)

    def test_bce_matches_naive_sum(self):
        rng = np.random.default_rng(0)
        z, gt, w = rng.normal(0, 3, (5, 5)), (rng.random((5, 5)) > 0.5) * 1.0, 1 + rng.random((5, 5))
        p = 1 / (1 + np.exp(-z))
        want = -(w * (gt * np.log(p) + (1 - gt) * np.log(1 - p))).sum() / w.sum()
        assert weighted_bce(Tensor(z), gt, w).item() == pytest.approx(want, rel=1e-12)

    def test_bce_extreme_logits_stay_finite(self):
        gt = np.array([[1.0, 0.0]])
        v = weighted_bce(Tensor(np.array([[-800.0, 800.0]])), gt, np.ones((1, 2))).item()
        assert v == pytest.approx(800.0)

    def test_iou_perfect_and_empty(self):
        gt = np.zeros((4, 4))
        gt[1:3, 1:3] = 1
        perfect = np.where(gt > 0, 60.0, -60.0)
        assert weighted_iou(Tensor(perfect), gt, np.ones((4, 4))).item() == pytest.approx(0.0, abs=1e-12)
        # all-negative prediction: I = 0, U = 4 -> 1 - 1/5
        assert weighted_iou(Tensor(np.full((4, 4), -60.0)), gt, np.ones((4, 4))).item() == pytest.approx(0.8, abs=1e-12)

    def test_iou_matches_naive(self):
        rng = np.random.default_rng(1)
        z, gt, w = rng.normal(size=(6, 6)), (rng.random((6, 6)) > 0.4) * 1.0, 1 + rng.random((6, 6))
        p = 1 / (1 + np.exp(-z))
        inter = (p * gt * w).sum()
        union = ((p + gt - p * gt) * w).sum()
        assert weighted_iou(Tensor(z), gt, w).item() == pytest.approx(1 - (inter + 1) / (union + 1), rel=1e-12)

    def test_total_is_sum_of_streams(self):
        rng = np.random.default_rng(0)
        model = init_model(SMALL, 1, zero_up=False)
        s = _sample(rng)
        L, L_F, L_R, L_T = total_loss(forward_all(s, model), s.GT)
        assert L.item() == pytest.approx(L_F.item() + L_R.item() + L_T.item(), abs=1e-14)


class TestFinalPrediction:
    def test_zero_logits(self):
        z = np.zeros((2, 2))
        np.testing.assert_array_equal(final_prediction(z, z, z), np.full((2, 2), 0.5))

    def test_saturation(self):
        hi, lo = np.full((1, 1), 50.0), np.full((1, 1), -50.0)
        assert final_prediction(hi, hi, hi)[0, 0] == pytest.approx(1.0)
        assert final_prediction(hi, lo, lo)[0, 0] == pytest.approx(1 / 3)

    def test_range(self):
        rng = np.random.default_rng(0)
        p = final_prediction(*(rng.normal(0, 20, (8, 8)) for _ in range(3)))
        assert p.min() >= 0 and p.max() <= 1

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            final_prediction(np.zeros((2, 2)), np.zeros((2, 2)), np.zeros((3, 2)))


def test_sample_rejects_non_binary_gt():
    with pytest.raises(ValueError):
        Sample(np.zeros((4, 4)), np.zeros((4, 4)), np.full((4, 4), 0.5))


class TestCheckpoint:
    @pytest.mark.parametrize("kind", ["decoupled", "vanilla"])
    def test_roundtrip_bit_identical(self, tmp_path, kind):
        cfg = ModelConfig(adapter_kind=kind)
        model = init_model(cfg, 7, zero_up=False)
        save_checkpoint(model, tmp_path / "m.ckpt")
        back = load_checkpoint(tmp_path / "m.ckpt")
        assert back.config == model.config
        for src, dst in ((model.params, back.params), (model.backbone, back.backbone)):
            assert src.keys() == dst.keys()
            for k in src:
                assert src[k].tobytes() == dst[k].tobytes()

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x.ckpt").write_bytes(b"NOTACKPT" + b"\0" * 32)
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "x.ckpt")

    def test_truncated(self, tmp_path):
        save_checkpoint(init_model(SMALL, 0), tmp_path / "m.ckpt")
        data = (tmp_path / "m.ckpt").read_bytes()
        (tmp_path / "t.ckpt").write_bytes(data[: len(data) - 10])
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "t.ckpt")
