import numpy as np
import pytest

from acam import diffcore as dc
from acam.backbones import BACKBONES, BackboneConfig, adapt_stem, build_backbone, forward_classify, named_config
from acam.diffcore import Tensor, finite_diff_check

from conftest import t64, weighted_sum

TINY = dict(widths=[2, 3], blocks_per_stage=1, use_residual=True)


def test_deterministic_weights():
    cfg = named_config("tiny-res")
    a, b = build_backbone(cfg, 3), build_backbone(cfg, 3)
    assert a.params.keys() == b.params.keys()
    for n in a.params:
        assert a.params[n].data.tobytes() == b.params[n].data.tobytes()


def test_stems_differ_only_in_channels():
    c1 = build_backbone(named_config("tiny-res", 1), 5)
    c10 = build_backbone(named_config("tiny-res", 10), 5)
    for n in c1.params:
        if n == "stem.weight":
            assert c1.params[n].shape[1] == 1 and c10.params[n].shape[1] == 10
            assert c1.params[n].shape[0] == c10.params[n].shape[0]
        else:
            assert np.array_equal(c1.params[n].data, c10.params[n].data)


@pytest.mark.parametrize("name", sorted(BACKBONES))
def test_zero_input_gives_head_bias(name):
    c = build_backbone(named_config(name), 0)
    c.params["head.bias"].data = np.arange(6, dtype=np.float32) - 2.5
    logits = forward_classify(c, Tensor(np.zeros((2, 1, 16, 16), np.float32))).data
    np.testing.assert_array_equal(logits, np.tile(c.params["head.bias"].data, (2, 1)))


def test_invalid_config():
    with pytest.raises(ValueError):
        build_backbone(BackboneConfig(num_classes=1), 0)
    with pytest.raises(ValueError):
        build_backbone(BackboneConfig(widths=[]), 0)
    with pytest.raises(ValueError):
        named_config("resnet50")


class TestAdaptStem:
    def test_k1_unchanged(self):
        c = build_backbone(named_config("tiny-plain"), 1)
        a = adapt_stem(c, 1)
        for n in c.params:
            assert np.array_equal(a.params[n].data, c.params[n].data)

    def test_replication_preserves_response(self, rng):
        c = build_backbone(named_config("tiny-res"), 2)
        a = adapt_stem(c, 10)
        img = rng.random((1, 1, 16, 16)).astype(np.float32)
        ref = dc.conv2d(Tensor(img), c.params["stem.weight"], c.params["stem.bias"], padding=1).data
        copies = np.repeat(img, 10, axis=1)
        out = dc.conv2d(Tensor(copies), a.params["stem.weight"], a.params["stem.bias"], padding=1).data
        np.testing.assert_allclose(out, ref, atol=1e-6)

    def test_output_shape(self, rng):
        for k in (1, 3, 10):
            a = adapt_stem(build_backbone(named_config("tiny-res"), 0), k)
            cap = {}
            forward_classify(a, Tensor(rng.random((2, k, 16, 16)).astype(np.float32)), cap)
            assert cap["stem"].shape == (2, 16, 16, 16)

    def test_bad_k(self):
        with pytest.raises(ValueError):
            adapt_stem(build_backbone(named_config("tiny-res"), 0), 0)

    def test_original_untouched(self):
        c = build_backbone(named_config("tiny-res"), 0)
        before = c.params["stem.weight"].data.copy()
        adapt_stem(c, 4)
        assert np.array_equal(c.params["stem.weight"].data, before)


class TestForward:
    def test_batch_independence(self, rng):
        c = build_backbone(named_config("tiny-res"), 1)
        x = rng.random((2, 1, 16, 16)).astype(np.float32)
        both = forward_classify(c, Tensor(x)).data
        one = forward_classify(c, Tensor(x[:1])).data
        np.testing.assert_array_equal(one[0], both[0])

    @pytest.mark.parametrize("residual", [True, False])
    def test_gradient_check(self, rng, residual):
        c = build_backbone(BackboneConfig(in_channels=2, num_classes=3, **{**TINY, "use_residual": residual}), 4,
                           dtype=np.float64)
        for t in c.params.values():
            if t.name.endswith("bias"):
                t.data = rng.standard_normal(t.shape) * 0.1
        probe = rng.uniform(0.5, 1.5, (2, 3))

        def f(t):
            return weighted_sum(forward_classify(c, t), probe)

        assert finite_diff_check(f, t64(rng.random((2, 2, 8, 8))), 1e-6) < 1e-3

    def test_class_permutation(self, rng):
        c = build_backbone(named_config("tiny-plain"), 3)
        c.params["head.bias"].data = rng.standard_normal(6).astype(np.float32)
        x = Tensor(rng.random((2, 1, 16, 16)).astype(np.float32))
        base = forward_classify(c, x).data
        perm = rng.permutation(6)
        c.params["head.weight"].data = c.params["head.weight"].data[perm]
        c.params["head.bias"].data = c.params["head.bias"].data[perm]
        np.testing.assert_array_equal(forward_classify(c, x).data, base[:, perm])

    def test_channel_mismatch(self):
        c = build_backbone(named_config("tiny-res", 10), 0)
        with pytest.raises(dc.DimensionError):
            forward_classify(c, Tensor(np.zeros((1, 1, 16, 16), np.float32)))

    @pytest.mark.parametrize("name", sorted(BACKBONES))
    def test_baseline_and_acam_share_shapes(self, name):
        base = build_backbone(named_config(name, 1), 0)
        acam = build_backbone(named_config(name, 10), 0)
        assert base.params.keys() == acam.params.keys()
        for n in base.params:
            if n != "stem.weight":
                assert base.params[n].shape == acam.params[n].shape

    @pytest.mark.parametrize("name", sorted(BACKBONES))
    def test_finite_logits(self, rng, name):
        c = build_backbone(named_config(name), 9)
        out = forward_classify(c, Tensor(rng.random((3, 1, 32, 32)).astype(np.float32))).data
        assert out.shape == (3, 6) and np.all(np.isfinite(out))

    def test_capture_layers(self, rng):
        c = build_backbone(named_config("tiny-res"), 0)
        cap = {}
        forward_classify(c, Tensor(rng.random((1, 1, 32, 32)).astype(np.float32)), cap)
        assert [k for k in cap if k != "gap"] == c.spatial_layers()
        assert cap["stage3.block0"].shape == (1, 64, 4, 4)

    def test_stem_only_model(self, rng):
        c = build_backbone(BackboneConfig(in_channels=1, num_classes=2, widths=[3], blocks_per_stage=0), 0)
        assert c.spatial_layers() == ["stem"]
        assert forward_classify(c, Tensor(rng.random((1, 1, 8, 8)).astype(np.float32))).shape == (1, 2)
