"""Graph construction, forward/backward mechanics, and the checker itself."""

import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from umc.autodiff import OPS, Graph, GraphError, grad_check, kaiming_init
from umc.rng import STREAM_CHECK, make_rng


def _linear_chain(w=None):
    g = Graph()
    x = g.input("x")
    wid = g.param("w", np.ones((3, 3), dtype=np.float32) if w is None else w)
    y = g.apply("mul", x, wid)
    g.mark_output("z", g.apply("sum", y))
    return g


class TestGraphStructure:
    def test_forward_produces_marked_outputs(self):
        g = _linear_chain()
        out = g.forward({"x": np.full((3, 3), 2.0, dtype=np.float32)})
        assert out["z"] == pytest.approx(18.0)

    def test_forward_is_referentially_transparent(self):
        rng = make_rng(0, STREAM_CHECK)
        g = _linear_chain(rng.standard_normal((3, 3)).astype(np.float32))
        x = rng.standard_normal((3, 3)).astype(np.float32)
        a = g.forward({"x": x})["z"].copy()
        b = g.forward({"x": x})["z"]
        assert np.array_equal(a, b)

    def test_missing_binding_rejected(self):
        g = _linear_chain()
        with pytest.raises(GraphError):
            g.forward({})

    def test_unknown_binding_rejected(self):
        g = _linear_chain()
        x = np.zeros((3, 3), dtype=np.float32)
        with pytest.raises(GraphError):
            g.forward({"x": x, "bogus": x})

    def test_unknown_op_kind_rejected(self):
        g = Graph()
        x = g.input("x")
        with pytest.raises(GraphError):
            g.apply("no_such_op", x)

    def test_forward_reference_rejected(self):
        # an op may only consume ids that already exist
        g = Graph()
        x = g.input("x")
        with pytest.raises(GraphError):
            g.apply("relu", x + 5)

    def test_duplicate_names_rejected(self):
        g = Graph()
        g.input("x")
        with pytest.raises(GraphError):
            g.input("x")
        g.param("w", np.zeros(2, dtype=np.float32))
        with pytest.raises(GraphError):
            g.param("w", np.zeros(3, dtype=np.float32))

    def test_set_param_shape_checked(self):
        g = Graph()
        g.param("w", np.zeros((2, 2), dtype=np.float32))
        with pytest.raises(GraphError):
            g.set_param("w", np.zeros((3, 3), dtype=np.float32))

    def test_integer_input_dtype_enforced(self):
        g = Graph()
        g.input("labels", integer=True)
        g.mark_output("y", g.inputs["labels"])
        with pytest.raises(GraphError):
            g.forward({"labels": np.zeros((2, 2), dtype=np.float32)})


class TestBackward:
    def test_fanout_accumulates_gradient(self):
        # y = x + x must differentiate identically to y = 2x
        def build(double):
            g = Graph()
            x = g.input("x", requires_grad=True)
            if double:
                y = g.apply("scale", x, factor=2.0)
            else:
                y = g.apply("add", x, x)
            g.mark_output("y", g.apply("sum", y))
            return g

        x = np.arange(6, dtype=np.float64).reshape(2, 3)
        grads = []
        for double in (False, True):
            g = build(double)
            g.forward({"x": x})
            g.backward(g.outputs["y"])
            grads.append(g.nodes[g.inputs["x"]].grad)
        np.testing.assert_allclose(grads[0], grads[1])

    def test_unused_param_gets_explicit_zeros(self):
        g = Graph()
        x = g.input("x")
        w = g.param("w", np.ones((2, 2), dtype=np.float64))
        g.param("dead", np.ones(4, dtype=np.float64))
        g.mark_output("y", g.apply("sum", g.apply("mul", x, w)))
        g.forward({"x": np.ones((2, 2), dtype=np.float64)})
        grads = g.backward(g.outputs["y"])
        assert grads["dead"].shape == (4,)
        assert not np.any(grads["dead"])

    def test_backward_before_forward_rejected(self):
        g = _linear_chain()
        with pytest.raises(GraphError):
            g.backward(g.outputs["z"])

    def test_backward_requires_scalar_loss(self):
        g = Graph()
        x = g.input("x", requires_grad=True)
        y = g.apply("relu", x)
        g.mark_output("y", y)
        g.forward({"x": np.ones((2, 2), dtype=np.float64)})
        with pytest.raises(GraphError):
            g.backward(y)


class TestGradCheckHarness:
    def test_clean_op_passes(self):
        rng = make_rng(3, STREAM_CHECK)
        err = grad_check("scale", [rng.standard_normal((4, 4))],
                         attrs={"factor": 3.0})
        assert err < 1e-10

    def test_corrupted_backward_detected(self, monkeypatch):
        # identical forward, wrong analytic gradient: checker must flag it
        rng = make_rng(4, STREAM_CHECK)
        x = rng.standard_normal((4, 4))
        assert grad_check("scale", [x], attrs={"factor": 3.0}) < 1e-10
        tampered = dataclasses.replace(
            OPS["scale"],
            backward=lambda attrs, vals, out, gout: (gout * (attrs["factor"] + 0.5),))
        monkeypatch.setitem(OPS, "scale", tampered)
        assert grad_check("scale", [x], attrs={"factor": 3.0}) > 1e-2

    def test_integer_inputs_skipped(self):
        labels = np.array([[0, 1], [2, 255]], dtype=np.int64)
        logits = make_rng(5, STREAM_CHECK).standard_normal((1, 3, 2, 2))
        err = grad_check("softmax_ce", [logits, labels[None]],
                         attrs={"ignore_index": 255})
        assert err < 1e-6


class TestKaimingInit:
    @given(st.integers(min_value=1, max_value=512))
    @settings(max_examples=20, deadline=None)
    def test_scale_tracks_fan_in(self, fan_in):
        rng = make_rng(fan_in, STREAM_CHECK)
        w = kaiming_init(fan_in, (4000,), rng, np.float64)
        expected = np.sqrt(2.0 / fan_in)
        assert np.std(w) == pytest.approx(expected, rel=0.15)

    def test_dtype_respected(self):
        rng = make_rng(0, STREAM_CHECK)
        assert kaiming_init(9, (3, 3), rng, np.float32).dtype == np.float32

    def test_bad_fan_in_rejected(self):
        rng = make_rng(0, STREAM_CHECK)
        with pytest.raises(ValueError):
            kaiming_init(0, (3, 3), rng)
