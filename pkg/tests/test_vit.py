import numpy as np
import pytest

from pluto import synth
from pluto.store import ModuleRecord
from pluto.vit import (LnState, OptimizerSpec, TrainingDivergedError, VitConfig, evaluate, forward, forward_batch,
                       init_params, load_backbone, patchify, pretrain_backbone, pretrain_source_module, random_module,
                       save_backbone)


class TestConfig:
    def test_patch_count(self, cfg):
        assert cfg.num_patches == 16 and cfg.patch_dim == 16

    def test_invalid(self):
        with pytest.raises(ValueError):
            VitConfig(image_size=15, patch_size=4)
        with pytest.raises(ValueError):
            VitConfig(embed_dim=30, heads=4)


class TestPatchify:
    def test_shape(self, cfg):
        assert patchify(np.zeros((16, 16, 1)), cfg).shape == (16, 16)

    def test_constant_image(self, cfg):
        p = patchify(np.full((16, 16, 1), 0.3), cfg)
        assert np.all(p == p[0])

    def test_single_patch_is_flat_image(self):
        c = VitConfig(image_size=4, patch_size=4, embed_dim=8, heads=2)
        img = np.arange(16.0).reshape(4, 4, 1)
        np.testing.assert_array_equal(patchify(img, c), img.reshape(1, 16))

    def test_row_major_order(self, cfg):
        img = np.zeros((16, 16, 1))
        img[0:4, 4:8] = 1.0  # second patch in the first row
        img[4:8, 0:4] = 2.0  # first patch in the second row
        p = patchify(img, cfg)
        assert np.all(p[1] == 1.0) and np.all(p[4] == 2.0)
        assert np.count_nonzero(p) == 32

    def test_patch_contents_row_major_inside(self, cfg):
        img = np.arange(256.0).reshape(16, 16, 1)
        np.testing.assert_array_equal(patchify(img, cfg)[0], img[:4, :4].ravel())

    def test_dimension_mismatch(self, cfg):
        with pytest.raises(ValueError):
            patchify(np.zeros((8, 8, 1)), cfg)


class TestForward:
    def test_logit_shape(self, params, images):
        assert forward(params, None, images(1)[0]).shape == (10,)

    def test_vpt_sequence_length(self, params, cfg, images):
        mod = random_module(cfg, "vpt", 8, seed=1)
        trace = {}
        forward_batch(params, mod, images(2), trace=trace)
        assert trace["layer1_seq_len"] == 1 + 8 + 16 == 25

    def test_no_module_sequence_length(self, params, images):
        trace = {}
        forward_batch(params, None, images(2), trace=trace)
        assert trace["layer1_seq_len"] == 17

    def test_adapter_zero_up_projection_is_identity(self, params, cfg, images):
        mod = random_module(cfg, "adapter", 8, seed=3)
        payload = {k: (np.zeros_like(v) if k.endswith(("W_up", "b_up")) else v) for k, v in mod.payload.items()}
        zeroed = ModuleRecord("a", "", "adapter", mod.hyper, payload, mod.head_weight, mod.head_bias)
        plain = ModuleRecord("p", "", "vpt", {"prompts": 1, "embed_dim": 32, "classes": 10},
                             {"prompts": np.zeros((1, 32))}, mod.head_weight, mod.head_bias)
        x = images(3)
        with_adapter = forward_batch(params, zeroed, x)
        # Same head, no module: swap the head into the backbone.
        w = dict(params.weights, **{"head.weight": mod.head_weight, "head.bias": mod.head_bias})
        bare = forward_batch(type(params)(params.cfg, w, params.ln), None, x)
        np.testing.assert_allclose(with_adapter, bare, atol=1e-12, rtol=0)
        assert not np.allclose(forward_batch(params, plain, x), bare)  # a prompt token does change things

    def test_module_head_replaces_base_head(self, params, cfg, images):
        mod = random_module(cfg, "vpt", 2, seed=4)
        shifted = ModuleRecord(mod.id, "", "vpt", mod.hyper, mod.payload, mod.head_weight, mod.head_bias + 1.0)
        x = images(2)
        np.testing.assert_allclose(forward_batch(params, shifted, x) - forward_batch(params, mod, x), 1.0, atol=1e-12)

    def test_pure_function(self, params, modules, images):
        x = images(4)
        np.testing.assert_array_equal(forward_batch(params, modules[0], x), forward_batch(params, modules[0], x))

    def test_batch_matches_single(self, params, modules, images):
        x = images(3)
        batch = forward_batch(params, modules[1], x)
        for i in range(3):
            np.testing.assert_allclose(forward(params, modules[1], x[i]), batch[i], atol=1e-12)

    def test_ln_state_is_read(self, params, images):
        x = images(2)
        ln = params.ln.with_flat(params.ln.flat() * 1.5)
        assert not np.allclose(forward_batch(params, None, x, ln), forward_batch(params, None, x))

    def test_incompatible_module(self, params):
        other = random_module(VitConfig(embed_dim=16, heads=2), "vpt", 2)
        with pytest.raises(ValueError, match="d=16"):
            forward_batch(params, other, np.zeros((1, 16, 16, 1)))
        deep = random_module(VitConfig(depth=3), "adapter", 2)
        with pytest.raises(ValueError, match="layers"):
            forward_batch(params, deep, np.zeros((1, 16, 16, 1)))


class TestLnState:
    def test_length_and_shapes(self, params, cfg):
        assert len(params.ln) == 2 * cfg.depth + 1
        assert all(g.shape == b.shape == (cfg.embed_dim,) for g, b in params.ln.pairs)

    def test_flat_round_trip(self, params):
        v = np.random.default_rng(0).normal(size=params.ln.flat().size)
        np.testing.assert_array_equal(params.ln.with_flat(v).flat(), v)

    def test_wrong_length(self, params):
        with pytest.raises(ValueError):
            params.ln.with_flat(np.zeros(3))

    def test_params_reject_wrong_ln_count(self, cfg):
        with pytest.raises(ValueError):
            init_params(cfg, np.random.default_rng(0)).with_ln(LnState([(np.ones(32), np.zeros(32))]))


class TestEvaluate:
    def test_single_correct(self, params, images):
        x = images(1)
        y = np.argmax(forward_batch(params, None, x), axis=1)
        assert evaluate(params, None, synth.Dataset(x, y)) == 1.0

    def test_permuted_labels_near_chance(self, params, images):
        x = images(600, seed=5)
        y = np.random.default_rng(9).integers(0, 10, size=600)
        acc = evaluate(params, None, synth.Dataset(x, y))
        assert abs(acc - 0.1) <= 0.05
        assert evaluate(params, None, synth.Dataset(x, y)) == acc

    def test_empty(self, params):
        with pytest.raises(ValueError):
            evaluate(params, None, synth.Dataset(np.zeros((0, 16, 16, 1)), np.zeros(0, dtype=int)))


def test_backbone_checkpoint_round_trip(params):
    again = load_backbone(save_backbone(params))
    assert again.backbone_digest() == params.backbone_digest()
    assert again.ln == params.ln
    assert save_backbone(again) == save_backbone(params)


FAST_OPT = OptimizerSpec("adamw", lr=3e-3, weight_decay=1e-4, epochs=3, warmup_epochs=1, batch_size=32)


@pytest.fixture(scope="module")
def base():
    return synth.make_base_dataset(200, seed=3)


@pytest.fixture(scope="module")
def backbone(base):
    return pretrain_backbone(base, VitConfig(), FAST_OPT, seed=1)


class TestPretraining:
    def test_deterministic(self, base, backbone):
        again = pretrain_backbone(base, VitConfig(), FAST_OPT, seed=1)
        assert again.backbone_digest() == backbone.backbone_digest() and again.ln == backbone.ln

    def test_empty_dataset(self):
        with pytest.raises(ValueError):
            pretrain_backbone(synth.Dataset(np.zeros((0, 16, 16, 1)), np.zeros(0, dtype=int)), VitConfig(), FAST_OPT)

    def test_label_out_of_range(self, base):
        bad = synth.Dataset(base.images[:4], np.array([0, 1, 2, 10]))
        with pytest.raises(ValueError):
            pretrain_backbone(bad, VitConfig(), FAST_OPT)

    def test_divergence_raises(self, base):
        poisoned = base.subset(slice(0, 64))
        images = poisoned.images.copy()
        images[5, 3, 3, 0] = np.nan
        with pytest.raises(TrainingDivergedError):
            pretrain_backbone(synth.Dataset(images, poisoned.labels), VitConfig(), FAST_OPT)

    @pytest.mark.parametrize("kind", ["vpt", "adapter"])
    def test_module_training_freezes_backbone(self, backbone, kind):
        src = synth.make_domain(synth.make_base_dataset(100, seed=4), synth.DomainSpec("blur", 2, 0))
        before = backbone.backbone_digest(), backbone.ln.digest()
        opt = OptimizerSpec("sgd", lr=0.5, weight_decay=0.0, epochs=2, warmup_epochs=0) if kind == "vpt" else FAST_OPT
        rec = pretrain_source_module(backbone, kind, src, opt, seed=2, size=4, domain_label="blur:sev2")
        assert (backbone.backbone_digest(), backbone.ln.digest()) == before
        again = pretrain_source_module(backbone, kind, src, opt, seed=2, size=4, domain_label="blur:sev2")
        assert all(rec.payload[n].tobytes() == again.payload[n].tobytes() for n in rec.payload)
        assert rec.domain_label == "blur:sev2" and 0.0 <= rec.meta["source_train_accuracy"] <= 1.0
        assert rec.id == f"{kind}-blur-sev2-s2"


@pytest.mark.slow
def test_backbone_reaches_training_accuracy():
    """Long-run oracle: 100 epochs on the base glyph domain fit the training set."""
    data = synth.make_base_dataset(300, seed=11)
    opt = OptimizerSpec("adamw", lr=3e-3, weight_decay=1e-4, epochs=100, warmup_epochs=10)
    params = pretrain_backbone(data, VitConfig(), opt, seed=0)
    assert evaluate(params, None, data) >= 0.9
