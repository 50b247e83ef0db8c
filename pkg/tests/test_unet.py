import numpy as np
import pytest

from conftest import assert_grad_close
from ocutrack import nncore, unet
from ocutrack.errors import (
    BadMagic,
    EmptyDataset,
    InfeasibleInput,
    ManifestMismatch,
    SizeMismatch,
    TruncatedPayload,
    VersionUnsupported,
)
from ocutrack.imagekit import BinaryMask, GrayImage
from ocutrack.synth import SceneDistribution, make_dataset

TINY = unet.UNetConfig(depth=1, base_channels=2, input_size=(20, 20))


def random_image(rng, size=(20, 20)):
    return GrayImage(rng.random(size, dtype=np.float32))


class TestOutputShape:
    def test_depth1_36(self):
        # 36 -> 32 -> 16 -> 12 -> 24 -> 20
        cfg = unet.UNetConfig(depth=1, base_channels=2, input_size=(36, 36))
        assert unet.output_shape(cfg) == (20, 20)

    def test_depth4_572_canonical(self):
        cfg = unet.UNetConfig(depth=4, base_channels=4, input_size=(572, 572))
        assert unet.output_shape(cfg) == (388, 388)

    def test_odd_at_pool_rejected(self):
        cfg = unet.UNetConfig(depth=1, base_channels=2, input_size=(35, 35))
        with pytest.raises(InfeasibleInput):
            unet.output_shape(cfg)

    def test_rectangular(self):
        cfg = unet.UNetConfig(depth=1, base_channels=2, input_size=(36, 20))
        assert unet.output_shape(cfg) == (20, 4)

    def test_offset_symmetric(self):
        cfg = unet.UNetConfig(depth=1, base_channels=2, input_size=(36, 36))
        assert unet.output_offset(cfg) == (8, 8)


class TestBuild:
    def test_same_seed_bit_identical(self):
        m1 = unet.build(TINY, seed=11)
        m2 = unet.build(TINY, seed=11)
        for name in m1.params.names():
            assert np.array_equal(m1.params[name].value, m2.params[name].value)

    def test_different_seed_differs(self):
        m1 = unet.build(TINY, seed=11)
        m2 = unet.build(TINY, seed=12)
        assert any(not np.array_equal(m1.params[n].value, m2.params[n].value)
                   for n in m1.params.names())

    def test_manifest_enumeration_depth2_base8(self):
        cfg = unet.UNetConfig(depth=2, base_channels=8, input_size=(108, 108))
        expected = [
            ("enc0_conv1_w", (8, 1, 3, 3)), ("enc0_conv1_b", (8,)),
            ("enc0_conv2_w", (8, 8, 3, 3)), ("enc0_conv2_b", (8,)),
            ("enc1_conv1_w", (16, 8, 3, 3)), ("enc1_conv1_b", (16,)),
            ("enc1_conv2_w", (16, 16, 3, 3)), ("enc1_conv2_b", (16,)),
            ("bott_conv1_w", (32, 16, 3, 3)), ("bott_conv1_b", (32,)),
            ("bott_conv2_w", (32, 32, 3, 3)), ("bott_conv2_b", (32,)),
            ("dec1_up_w", (16, 32, 2, 2)), ("dec1_up_b", (16,)),
            ("dec1_conv1_w", (16, 32, 3, 3)), ("dec1_conv1_b", (16,)),
            ("dec1_conv2_w", (16, 16, 3, 3)), ("dec1_conv2_b", (16,)),
            ("dec0_up_w", (8, 16, 2, 2)), ("dec0_up_b", (8,)),
            ("dec0_conv1_w", (8, 16, 3, 3)), ("dec0_conv1_b", (8,)),
            ("dec0_conv2_w", (8, 8, 3, 3)), ("dec0_conv2_b", (8,)),
            ("head_w", (1, 8, 1, 1)), ("head_b", (1,)),
        ]
        assert unet.manifest(cfg) == expected
        model = unet.build(cfg, seed=0)
        for name, shape in expected:
            assert model.params[name].value.shape == shape

    def test_infeasible_config_rejected(self):
        with pytest.raises(InfeasibleInput):
            unet.build(unet.UNetConfig(depth=1, base_channels=2, input_size=(12, 12)), 0)


class TestForward:
    def test_output_in_unit_interval(self, rng):
        model = unet.build(TINY, seed=1)
        prob, offset = unet.forward(model, random_image(rng))
        assert prob.shape == unet.output_shape(TINY)
        assert offset == unet.output_offset(TINY)
        assert (prob > 0).all() and (prob < 1).all()

    def test_shape_and_offset_match_recursion(self, rng):
        cfg = unet.UNetConfig(depth=1, base_channels=2, input_size=(36, 36))
        model = unet.build(cfg, seed=2)
        prob, offset = unet.forward(model, random_image(rng, (36, 36)))
        assert prob.shape == (20, 20)
        assert offset == (8, 8)

    def test_pure(self, rng):
        model = unet.build(TINY, seed=3)
        img = random_image(rng)
        p1, _ = unet.forward(model, img)
        p2, _ = unet.forward(model, img)
        assert np.array_equal(p1, p2)

    def test_size_mismatch(self, rng):
        model = unet.build(TINY, seed=4)
        with pytest.raises(SizeMismatch):
            unet.forward(model, random_image(rng, (36, 36)))


class TestPredictMask:
    def test_saturated_negative_head_bias(self, rng):
        model = unet.build(TINY, seed=5)
        model.params["head_b"].value[...] = -100.0
        mask = unet.predict_mask(model, random_image(rng))
        assert not mask.pixels.any()

    def test_zero_threshold_marks_window(self, rng):
        model = unet.build(TINY, seed=6)
        mask = unet.predict_mask(model, random_image(rng), prob_threshold=0.0)
        oy, ox = unet.output_offset(TINY)
        ho, wo = unet.output_shape(TINY)
        expected = np.zeros((20, 20), dtype=bool)
        expected[oy:oy + ho, ox:ox + wo] = True
        assert np.array_equal(mask.pixels, expected)


class TestEndToEndGradient:
    def test_loss_gradient_matches_finite_differences(self):
        # the loss is only piecewise smooth, so the check instance must keep
        # every relu pre-activation clear of the kink by more than the FD
        # stencil; this seed pair is verified below to leave a 100x margin
        model = unet.build(TINY, seed=0)
        params64 = model.params.astype(np.float64)
        local = np.random.default_rng(1000)
        x = local.random((1, 20, 20))
        target = (local.random(unet.output_shape(TINY)) > 0.7).astype(np.float64)[None]

        preact_margin = []
        orig_relu = nncore.relu

        def probe(v):
            preact_margin.append(float(np.abs(v).min()))
            return orig_relu(v)

        nncore.relu = probe
        try:
            unet._run_forward(params64, TINY, x)
        finally:
            nncore.relu = orig_relu
        assert min(preact_margin) > 1e-3

        def loss_at(params):
            prob, _ = unet._run_forward(params, TINY, x)
            return nncore.bce_loss(prob, target)[0]

        prob, caches = unet._run_forward(params64, TINY, x)
        _, grad = nncore.bce_loss(prob, target)
        unet._run_backward(params64, TINY, caches, grad)

        eps = 1e-5
        for name in params64.names():
            value = params64[name].value
            analytic = params64[name].grad
            numeric = np.zeros_like(value)
            flat, nflat = value.ravel(), numeric.ravel()
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                hi = loss_at(params64)
                flat[i] = orig - eps
                lo = loss_at(params64)
                flat[i] = orig
                nflat[i] = (hi - lo) / (2 * eps)
            assert_grad_close(analytic, numeric, rtol=1e-3, atol=1e-7)


class TestTrain:
    def test_overfit_single_image(self):
        dist = SceneDistribution()
        sample = make_dataset(1, dist, 42)[0]
        cfg = unet.UNetConfig(depth=2, base_channels=8, input_size=dist.image_size)
        model = unet.build(cfg, seed=3)
        hyper = unet.TrainParams(lr=0.05, momentum=0.9, epochs=200,
                                 holdout_fraction=0.0, shuffle_seed=0)
        model, rep = unet.train(model, [(sample.image, sample.pupil_mask)], hyper)
        assert rep.epochs[-1].pixel_accuracy >= 0.999
        assert rep.epochs[-1].mean_loss < rep.epochs[0].mean_loss

    def test_empty_dataset(self):
        model = unet.build(TINY, seed=1)
        with pytest.raises(EmptyDataset):
            unet.train(model, [], unet.TrainParams(epochs=1))

    def test_size_mismatch(self, rng):
        model = unet.build(TINY, seed=1)
        bad = [(random_image(rng, (36, 36)),
                BinaryMask(np.zeros((36, 36), dtype=bool)))]
        with pytest.raises(SizeMismatch):
            unet.train(model, bad, unet.TrainParams(epochs=1))

    def test_deterministic_given_seed(self, rng):
        pairs = [(random_image(rng), BinaryMask(np.zeros((20, 20), dtype=bool)))
                 for _ in range(4)]
        hyper = unet.TrainParams(lr=0.01, epochs=2, holdout_fraction=0.25, shuffle_seed=9)
        m1, r1 = unet.train(unet.build(TINY, seed=5), list(pairs), hyper)
        m2, r2 = unet.train(unet.build(TINY, seed=5), list(pairs), hyper)
        for name in m1.params.names():
            assert np.array_equal(m1.params[name].value, m2.params[name].value)
        assert [e.mean_loss for e in r1.epochs] == [e.mean_loss for e in r2.epochs]

    def test_resume_preserves_structure(self, rng):
        pairs = [(random_image(rng), BinaryMask(np.zeros((20, 20), dtype=bool)))
                 for _ in range(3)]
        hyper = unet.TrainParams(lr=0.01, epochs=1, holdout_fraction=0.0)
        model, _ = unet.train(unet.build(TINY, seed=5), pairs, hyper)
        blob_before = unet.save_weights(model)
        model2, rep2 = unet.train(unet.load_weights(blob_before), pairs, hyper)
        assert len(rep2.epochs) == 1
        blob_after = unet.save_weights(model2)
        assert len(blob_after) == len(blob_before)
        assert unet.load_weights(blob_after).config == TINY


class TestWeights:
    def test_roundtrip_bitexact(self):
        model = unet.build(TINY, seed=8)
        back = unet.load_weights(unet.save_weights(model))
        assert back.config == model.config
        for name in model.params.names():
            assert np.array_equal(back.params[name].value, model.params[name].value)

    def test_bad_magic(self):
        blob = bytearray(unet.save_weights(unet.build(TINY, seed=8)))
        blob[0] = ord("X")
        with pytest.raises(BadMagic):
            unet.load_weights(bytes(blob))

    def test_unsupported_version(self):
        blob = bytearray(unet.save_weights(unet.build(TINY, seed=8)))
        blob[4] = 99
        with pytest.raises(VersionUnsupported):
            unet.load_weights(bytes(blob))

    def test_truncated_by_one_byte(self):
        blob = unet.save_weights(unet.build(TINY, seed=8))
        with pytest.raises(TruncatedPayload):
            unet.load_weights(blob[:-1])

    def test_trailing_bytes_rejected(self):
        blob = unet.save_weights(unet.build(TINY, seed=8))
        with pytest.raises(ManifestMismatch):
            unet.load_weights(blob + b"\x00")

    def test_corrupt_header_json(self):
        blob = bytearray(unet.save_weights(unet.build(TINY, seed=8)))
        blob[12] = ord("!")
        with pytest.raises(ManifestMismatch):
            unet.load_weights(bytes(blob))
