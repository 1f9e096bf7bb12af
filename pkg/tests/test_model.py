import numpy as np
import pytest

from diststn import ops
from diststn.errors import ShapeMismatch
from diststn.gradcheck import grad_check
from diststn.model import DistStnModel, ModelConfig
from diststn.nn import mae_loss, softmax_cross_entropy
from diststn.stn import IDENTITY, warp
from diststn.tensor import Tensor
from diststn.verify import tiny_model as perturbed_tiny_model


@pytest.fixture
def images(rng):
    return rng.random((3, 16, 16)), rng.random((3, 16, 16))


class TestConfig:
    def test_default_feature_maps_are_16(self):
        cfg = ModelConfig()
        assert cfg.feature_size == 16
        assert cfg.r_channels == 24

    def test_88_pixel_chips_supported(self):
        assert ModelConfig(image_size=88).feature_size == 22

    def test_incompatible_size(self):
        with pytest.raises(ValueError):
            ModelConfig(image_size=66)

    def test_f_channels_must_leave_pose_channels(self):
        with pytest.raises(ValueError):
            ModelConfig(f_channels=48)


class TestEncoder:
    def test_default_shapes(self):
        model = DistStnModel(ModelConfig())
        f, r = model.encode(np.zeros((2, 64, 64)))
        assert f.shape == (2, 24, 16, 16)
        assert r.shape == (2, 24, 16, 16)

    def test_zero_image_with_zero_biases_gives_zero_maps(self, tiny_model):
        f, r = tiny_model.encode(np.zeros((16, 16)))
        assert not f.data.any() and not r.data.any()

    def test_zero_image_ignores_first_layer_weights(self, tiny_model):
        for name, t in tiny_model.named_parameters():
            if name.startswith("encoder") and name.endswith("bias"):
                t.data[...] = 0.3
        before = [m.data.copy() for m in tiny_model.encode(np.zeros((16, 16)))]
        tiny_model.p("encoder.conv1.weight").data[...] *= -7.0
        after = [m.data for m in tiny_model.encode(np.zeros((16, 16)))]
        for a, b in zip(before, after):
            np.testing.assert_array_equal(a, b)

    def test_deterministic(self, tiny_model, rng):
        x = rng.random((16, 16))
        f1, r1 = tiny_model.encode(x)
        f2, r2 = tiny_model.encode(x.copy())
        np.testing.assert_array_equal(f1.data, f2.data)
        np.testing.assert_array_equal(r1.data, r2.data)

    @pytest.mark.parametrize("shape", [(16, 16), (2, 16, 16), (2, 1, 16, 16)])
    def test_accepted_layouts(self, tiny_model, shape):
        f, _ = tiny_model.encode(np.ones(shape))
        assert f.shape[-3:] == (2, 4, 4)

    @pytest.mark.parametrize("shape", [(15, 15), (2, 2, 16, 16)])
    def test_rejected_layouts(self, tiny_model, shape):
        with pytest.raises(ShapeMismatch):
            tiny_model.encode(np.ones(shape))


class TestDecoder:
    def test_output_matches_image_shape(self, tiny_model, images):
        f, r = tiny_model.encode(images[0])
        assert tiny_model.decode(f, r).shape == (3, 16, 16)

    def test_zero_maps_ignore_first_layer_weights(self, tiny_model):
        zeros = Tensor(np.zeros((1, 2, 4, 4)))
        for name, t in tiny_model.named_parameters():
            if name.startswith("decoder") and name.endswith("bias"):
                t.data[...] = 0.1
        before = tiny_model.decode(zeros, zeros).data.copy()
        tiny_model.p("decoder.deconv1.weight").data[...] = 5.0
        np.testing.assert_array_equal(tiny_model.decode(zeros, zeros).data, before)

    def test_zero_maps_and_biases_give_zero_image(self, tiny_model):
        zeros = Tensor(np.zeros((1, 2, 4, 4)))
        assert not tiny_model.decode(zeros, zeros).data.any()

    def test_gradient_wrt_f(self, rng):
        model = perturbed_tiny_model(0)
        x = Tensor(rng.random((1, 16, 16)))
        f0, r0 = model.encode(x)
        f = Tensor(f0.data + rng.normal(scale=0.1, size=f0.shape), requires_grad=True)
        rep = grad_check(lambda f: mae_loss(model.decode(f, r0), x), [f])
        assert rep.passed, rep.summary()

    def test_shape_mismatch(self, tiny_model):
        with pytest.raises(ShapeMismatch):
            tiny_model.decode(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 2, 3, 3))))


class TestPoseDiscrepancy:
    def test_identity_at_init(self, tiny_model, images):
        _, r_i = tiny_model.encode(images[0])
        _, r_j = tiny_model.encode(images[1])
        theta = tiny_model.pose_discrepancy(r_i, r_j).data
        assert theta.shape == (3, 6)
        np.testing.assert_array_equal(theta, np.tile(IDENTITY, (3, 1)))

    def test_unbatched_maps_give_six(self, tiny_model, images):
        _, r_i = tiny_model.encode(images[0][0])
        _, r_j = tiny_model.encode(images[1][0])
        assert tiny_model.pose_discrepancy(Tensor(r_i.data[0]), Tensor(r_j.data[0])).shape == (6,)

    def test_hidden_widths(self):
        model = DistStnModel(ModelConfig())
        widths = [model.p(f"pose.fc{i}.weight").shape[0] for i in (1, 2, 3)]
        assert widths == [60, 30, 6]

    def test_gradient_wrt_pose_params(self, rng):
        model = perturbed_tiny_model(1)
        _, r_i = model.encode(rng.random((2, 16, 16)))
        _, r_j = model.encode(rng.random((2, 16, 16)))
        r_i, r_j = Tensor(r_i.data), Tensor(r_j.data)
        proj = Tensor(rng.normal(size=(2, 6)))
        params = list(model.groups["pose"].params.values())
        rep = grad_check(
            lambda *_: ops.reduce_sum(ops.mul(model.pose_discrepancy(r_i, r_j), proj)),
            params, max_coords=40,
        )
        assert rep.passed, rep.summary()

    def test_reset_pose_to_identity(self, rng):
        model = perturbed_tiny_model(0)
        model.reset_pose_to_identity()
        assert model.pose_params(rng.random((16, 16)), rng.random((16, 16)))[0].theta == IDENTITY


class TestClassifier:
    def test_probabilities_sum_to_one(self, tiny_model, images):
        f, _ = tiny_model.encode(images[0])
        np.testing.assert_allclose(tiny_model.classify(f).sum(axis=-1), 1.0, atol=1e-12)

    def test_zero_weights_give_uniform(self, tiny_model, images):
        tiny_model.p("classifier.fc.weight").data[...] = 0.0
        f, _ = tiny_model.encode(images[0])
        np.testing.assert_allclose(tiny_model.classify(f), 1 / 3, atol=1e-15)

    def test_argmax_shift_invariance(self, tiny_model, images):
        f, _ = tiny_model.encode(images[0])
        before = tiny_model.predict(images[0])
        tiny_model.p("classifier.fc.bias").data[...] += 11.0
        np.testing.assert_array_equal(tiny_model.predict(images[0]), before)
        np.testing.assert_array_equal(before, tiny_model.classify(f).argmax(axis=-1))

    def test_ties_go_to_lowest_index(self, tiny_model, images):
        tiny_model.p("classifier.fc.weight").data[...] = 0.0
        np.testing.assert_array_equal(tiny_model.predict(images[0]), [0, 0, 0])

    def test_predict_skips_decoder_and_pose(self, tiny_model, images):
        before = tiny_model.predict(images[0])
        for name, t in tiny_model.named_parameters():
            if name.startswith(("decoder", "pose")):
                t.data[...] = np.nan
        np.testing.assert_array_equal(tiny_model.predict(images[0]), before)

    def test_single_image_gives_scalar_class(self, tiny_model, images):
        assert tiny_model.predict(images[0][0]).shape == ()


class TestPairLoss:
    def test_zero_weights_reduce_to_classification(self, rng, images):
        model = perturbed_tiny_model(0)
        y_i, y_j = np.array([0, 1, 2]), np.array([2, 2, 1])
        loss, bd = model.pair_loss(images[0], y_i, images[1], y_j, alpha=0.0, beta=0.0)
        assert loss.item() == pytest.approx(model.classification_loss(images[0], y_i).item(), abs=1e-12)
        assert bd.total == loss.item()

    def test_terms_match_independent_recomputation(self, images):
        model = perturbed_tiny_model(2)
        xi, xj = images
        y_i = np.array([1, 0, 2])
        loss, bd = model.pair_loss(xi, y_i, xj, [0, 0, 0], alpha=0.7, beta=1.3)
        f_i, r_i = model.encode(xi)
        f_j, r_j = model.encode(xj)
        cls = softmax_cross_entropy(model.logits(f_i), y_i).item()
        theta = model.pose_discrepancy(r_i, r_j)
        cross = np.abs(xj - model.decode(f_j, warp(r_i, theta)).data).mean()
        self_i = np.abs(xi - model.decode(f_i, r_i).data).mean()
        self_j = np.abs(xj - model.decode(f_j, r_j).data).mean()
        assert bd.classification == pytest.approx(cls, abs=1e-12)
        assert bd.cross == pytest.approx(cross, abs=1e-12)
        assert bd.self_i == pytest.approx(self_i, abs=1e-12)
        assert bd.self_j == pytest.approx(self_j, abs=1e-12)
        assert loss.item() == pytest.approx(cls + 0.7 * cross + 1.3 * (self_i + self_j), abs=1e-12)

    def test_same_input_with_identity_pose(self, tiny_model, images):
        x = images[0]
        _, bd = tiny_model.pair_loss(x, [0, 1, 2], x, [0, 1, 2], alpha=2.0, beta=0.5)
        assert bd.cross == bd.self_j == bd.self_i

    @pytest.mark.parametrize("alpha,beta", [(1.0, 0.0), (0.0, 1.0), (2.5, 0.25)])
    def test_weights_scale_only_their_terms(self, images, alpha, beta):
        model = perturbed_tiny_model(3)
        y = np.array([0, 1, 2])
        loss, bd = model.pair_loss(images[0], y, images[1], y, alpha=alpha, beta=beta)
        expected = bd.classification + alpha * bd.cross + beta * (bd.self_i + bd.self_j)
        assert loss.item() == pytest.approx(expected, abs=1e-12)

    def test_defaults_come_from_config(self, images):
        model = DistStnModel(ModelConfig.tiny(alpha=0.0, beta=0.0))
        y = np.array([0, 1, 2])
        loss, _ = model.pair_loss(images[0], y, images[1], y)
        assert loss.item() == pytest.approx(model.classification_loss(images[0], y).item(), abs=1e-12)


class TestCrossReconstruct:
    def test_shapes(self, tiny_model, images):
        hat, tilde = tiny_model.cross_reconstruct(images[0], images[1])
        assert hat.shape == tilde.shape == images[0].shape
        h1, t1 = tiny_model.cross_reconstruct(images[0][0], images[1][0])
        assert h1.shape == t1.shape == (16, 16)

    def test_identity_pose_and_same_input(self, rng):
        model = perturbed_tiny_model(0)
        model.reset_pose_to_identity()
        x = rng.random((2, 16, 16))
        hat, tilde = model.cross_reconstruct(x, x.copy())
        np.testing.assert_array_equal(hat, tilde)


class TestParameters:
    def test_pose_group_is_decay_exempt(self, tiny_model):
        assert tiny_model.groups["pose"].weight_decay_exempt
        assert not any(g.weight_decay_exempt for k, g in tiny_model.groups.items() if k != "pose")

    def test_seeded_init(self):
        a = DistStnModel(ModelConfig.tiny(seed=5)).state_dict()
        b = DistStnModel(ModelConfig.tiny(seed=5)).state_dict()
        c = DistStnModel(ModelConfig.tiny(seed=6)).state_dict()
        assert all(np.array_equal(a[k], b[k]) for k in a)
        assert not np.array_equal(a["encoder.conv1.weight"], c["encoder.conv1.weight"])

    def test_copy_is_independent(self, tiny_model):
        clone = tiny_model.copy()
        clone.p("encoder.conv1.weight").data[...] = 0.0
        assert tiny_model.p("encoder.conv1.weight").data.any()

    def test_load_state_dict_shape_check(self, tiny_model):
        state = tiny_model.state_dict()
        state["encoder.conv1.bias"] = np.zeros(7)
        with pytest.raises(ShapeMismatch):
            tiny_model.load_state_dict(state)
