import numpy as np
import pytest

from patch2img import checkpoint, graph
from patch2img.architectures import (
    FAMILIES,
    REFERENCE_PARAMETER_COUNTS,
    DenseGrowthRule,
    build_reference,
)
from patch2img.gradcheck import relative_error
from patch2img.graph import NetworkSpec, SpecError, parameter_count
from patch2img.ops import ShapeError


def _tiny_spec(**kw):
    layers = [
        {"id": "c1", "kind": "conv", "filters": 2, "kernel": 3},
        {"id": "r1", "kind": "relu"},
        {"id": "p1", "kind": "maxpool2"},
        {"id": "p2", "kind": "maxpool2"},
        {"id": "u1", "kind": "upsample2"},
        {"id": "u2", "kind": "upsample2"},
        {"id": "cat", "kind": "concat", "inputs": ["u2", "r1"]},
        {"id": "c2", "kind": "conv", "filters": 1, "kernel": 1},
        {"id": "s", "kind": "sigmoid"},
    ]
    return NetworkSpec.from_dict({"layers": layers, **kw})


class TestSpec:
    def test_single_conv_count(self):
        spec = NetworkSpec.from_dict({
            "paper_compatible": False,
            "layers": [{"id": "c", "kind": "conv", "filters": 8, "kernel": 3},
                       {"id": "t", "kind": "conv", "filters": 1, "kernel": 1},
                       {"id": "s", "kind": "sigmoid"}],
        })
        assert parameter_count(spec) == 80 + 9

    def test_count_of_1x1_head(self):
        spec = NetworkSpec.from_dict({
            "in_channels": 8, "paper_compatible": False,
            "layers": [{"id": "t", "kind": "conv", "filters": 1, "kernel": 1},
                       {"id": "s", "kind": "sigmoid"}],
        })
        assert parameter_count(spec) == 9

    def test_no_conv_counts_zero(self):
        spec = NetworkSpec.from_dict({"paper_compatible": False,
                                      "layers": [{"id": "s", "kind": "sigmoid"}]})
        assert parameter_count(spec) == 0

    def test_forward_reference_rejected(self):
        with pytest.raises(SpecError, match="not defined before"):
            NetworkSpec.from_dict({"layers": [
                {"id": "a", "kind": "relu", "inputs": ["b"]},
                {"id": "b", "kind": "sigmoid"},
            ]})

    def test_output_must_be_single_sigmoid(self):
        with pytest.raises(SpecError, match="sigmoid"):
            NetworkSpec.from_dict({"paper_compatible": False, "layers": [
                {"id": "c", "kind": "conv", "filters": 2}]})

    def test_paper_compatible_needs_two_pools(self):
        with pytest.raises(SpecError, match="two maxpool2"):
            NetworkSpec.from_dict({"layers": [
                {"id": "c", "kind": "conv", "filters": 1}, {"id": "s", "kind": "sigmoid"}]})

    def test_concat_scale_mismatch(self):
        with pytest.raises(SpecError, match="scales"):
            NetworkSpec.from_dict({"paper_compatible": False, "layers": [
                {"id": "p", "kind": "maxpool2"},
                {"id": "cat", "kind": "concat", "inputs": ["p", "input"]},
                {"id": "s", "kind": "sigmoid"}]})

    def test_yaml_round_trip(self):
        for family in FAMILIES:
            spec = build_reference(family)
            again = NetworkSpec.from_yaml(spec.to_yaml())
            assert again == spec
            assert again.hash() == spec.hash()

    def test_hash_is_32_bytes_and_sensitive(self):
        a = build_reference("light")
        assert len(a.hash()) == 32
        assert a.hash() != build_reference("mini-unet").hash()


class TestReferenceFamilies:
    @pytest.mark.parametrize("family", FAMILIES)
    def test_counts_near_published(self, family):
        count = parameter_count(build_reference(family))
        assert count == parameter_count(build_reference(family))
        assert abs(count - REFERENCE_PARAMETER_COUNTS[family]) / REFERENCE_PARAMETER_COUNTS[family] < 1e-3

    def test_light_and_mini_unet_match_exactly(self):
        assert parameter_count(build_reference("light")) == 8889
        assert parameter_count(build_reference("mini-unet")) == 316657

    def test_light_hand_count(self):
        # 1->8, nine 8->8, three 16->8 (after skip concatenations), 3x3 8->1 head
        assert 80 + 9 * 584 + 3 * 1160 + 73 == 8889

    def test_light_has_eight_filters_per_hidden_layer(self):
        spec = build_reference("light")
        filters = [l.filters for l in spec.layers if l.kind == "conv"]
        assert set(filters[:-1]) == {8} and filters[-1] == 1

    def test_dense_growth_rule(self):
        rule = DenseGrowthRule()
        assert (rule.omega, rule.delta, rule.pi) == (8, 32, 4)
        rule.grow()
        assert (rule.omega, rule.delta, rule.pi) == (10, 40, 5)

    def test_unknown_family(self):
        with pytest.raises(ValueError):
            build_reference("vgg")


class TestInit:
    def test_deterministic(self):
        spec = build_reference("light")
        a = graph.init_params(spec, 7)
        b = graph.init_params(spec, 7)
        assert a.flat().tobytes() == b.flat().tobytes()

    def test_he_uniform_bound_and_zero_bias(self):
        spec = build_reference("light")
        params = graph.init_params(spec, 0)
        for layer in spec.layers:
            if layer.kind != "conv":
                continue
            p = params[layer.id]
            fan_in = np.prod(p.kernels.shape[1:])
            assert np.abs(p.kernels).max() <= np.sqrt(6 / fan_in)
            assert not p.biases.any()

    def test_seeds_differ(self):
        spec = build_reference("light")
        assert not np.array_equal(graph.init_params(spec, 0).flat(), graph.init_params(spec, 1).flat())

    def test_keys_match_conv_ids(self):
        spec = build_reference("mini-unet")
        assert set(graph.init_params(spec, 0)) == set(spec.conv_ids)


class TestForwardBackward:
    def test_patch_shape(self):
        spec = build_reference("light")
        out, tape = graph.forward(spec, graph.init_params(spec, 0), np.zeros((3, 1, 64, 64), np.float32))
        assert out.shape == (3, 1, 64, 64) and tape is None
        assert ((out > 0) & (out < 1)).all()

    def test_drive_size_same_params(self):
        spec = build_reference("light")
        params = graph.init_params(spec, 0)
        x = np.random.default_rng(0).random((1, 1, 584, 568), dtype=np.float32)
        out, _ = graph.forward(spec, params, x)
        assert out.shape == (1, 1, 584, 568)

    def test_batch_dimension_only(self):
        spec = build_reference("light")
        params = graph.init_params(spec, 0)
        x = np.random.default_rng(0).random((1, 1, 16, 16), dtype=np.float32)
        one = graph.predict(spec, params, x)
        two = graph.predict(spec, params, np.concatenate([x, x]))
        assert two.shape == (2, 1, 16, 16)
        np.testing.assert_allclose(two[1:], one, rtol=0, atol=1e-6)

    def test_non_multiple_of_four_rejected(self):
        spec = build_reference("light")
        with pytest.raises(ShapeError, match="multiple of 4"):
            graph.forward(spec, graph.init_params(spec, 0), np.zeros((1, 1, 30, 32)))

    def test_backward_without_tape(self):
        with pytest.raises(ValueError, match="tape"):
            graph.backward(None, np.zeros(1))

    def test_zero_grad_out(self):
        spec = build_reference("light")
        params = graph.init_params(spec, 0)
        out, tape = graph.forward(spec, params, np.ones((1, 1, 8, 8)), record=True)
        grads = graph.backward(tape, np.zeros_like(out))
        assert not grads.flat().any()

    def test_gradients_deterministic(self):
        spec = build_reference("light")
        params = graph.init_params(spec, 3)
        x = np.random.default_rng(3).random((2, 1, 16, 16), dtype=np.float32)
        runs = []
        for _ in range(2):
            out, tape = graph.forward(spec, params, x, record=True)
            runs.append(graph.backward(tape, out - 0.5).flat().tobytes())
        assert runs[0] == runs[1]

    def test_tiny_graph_fd(self):
        spec = _tiny_spec()
        params = graph.init_params(spec, 0, dtype=np.float64)
        x = np.random.default_rng(0).standard_normal((1, 1, 8, 8))
        proj = np.random.default_rng(1).standard_normal((1, 1, 8, 8))
        _, tape = graph.forward(spec, params, x, record=True)
        grads, gx = graph.backward(tape, proj, return_input_grad=True)
        numeric = np.zeros_like(x)
        for idx in np.ndindex(x.shape):
            xp, xm = x.copy(), x.copy()
            xp[idx] += 1e-5
            xm[idx] -= 1e-5
            numeric[idx] = (np.sum(graph.predict(spec, params, xp) * proj)
                            - np.sum(graph.predict(spec, params, xm) * proj)) / 2e-5
        assert relative_error(gx, numeric) < 1e-6

    def test_receptive_radius_of_tiny_graph(self):
        # conv 3x3 at full resolution, then pooling/upsampling adds 1 + 2 slack
        assert graph.receptive_radius(_tiny_spec()) == 1 + 1 + 2


class TestCheckpoint:
    def test_bit_exact_round_trip(self, tmp_path):
        spec = build_reference("light")
        params = graph.init_params(spec, 5)
        path = tmp_path / "light.p2i"
        checkpoint.save(path, params, spec)
        loaded = checkpoint.load(path, spec)
        assert loaded.flat().tobytes() == params.flat().tobytes()
        blob = path.read_bytes()
        assert blob[:4] == b"P2I1" and blob[4:36] == spec.hash()
        assert checkpoint.dumps(loaded, spec.hash()) == blob

    def test_spec_mismatch(self, tmp_path):
        spec = build_reference("light")
        path = tmp_path / "c.p2i"
        checkpoint.save(path, graph.init_params(spec, 0), spec)
        with pytest.raises(checkpoint.CheckpointError, match="different network"):
            checkpoint.load(path, build_reference("mini-unet"))

    def test_bad_magic(self):
        with pytest.raises(checkpoint.CheckpointError, match="magic"):
            checkpoint.loads(b"NOPE" + bytes(40))

    def test_truncated(self):
        spec = build_reference("light")
        blob = checkpoint.dumps(graph.init_params(spec, 0), spec.hash())
        with pytest.raises(checkpoint.CheckpointError):
            checkpoint.loads(blob[:-7])


@pytest.mark.parametrize("family", FAMILIES)
def test_inference_path_matches_recorded_forward(family, rng):
    spec = build_reference(family)
    params = graph.init_params(spec, 3)
    x = rng.random((2, 1, 32, 40)).astype(np.float32)
    fast = graph.predict(spec, params, x)
    slow, tape = graph.forward(spec, params, x, record=True)
    assert tape is not None
    np.testing.assert_allclose(fast, slow, rtol=0, atol=1e-6)
