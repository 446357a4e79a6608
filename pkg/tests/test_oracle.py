import numpy as np
import pytest

from dynlin.engine import (
    augment,
    contribution_matrix,
    contribution_row,
    explain,
    freeze_network,
    model_forward,
)
from dynlin.errors import ResourceError
from dynlin.layers import freeze_layer
from dynlin.modelio import generate_random_model, random_input
from dynlin.oracle import (
    compose_fused,
    compose_unfused,
    materialize,
    oracle_explain,
    oracle_forward,
    unfused_parts,
)
from dynlin.tensor_ops import vec

from test_layers import CASES, augment as aug2  # noqa: F401  (reuse layer cases)


@pytest.mark.parametrize("name,spec,shape,x", CASES, ids=[c[0] for c in CASES])
class TestMaterialize:
    def test_dense_matches_structured_apply(self, name, spec, shape, x):
        op = freeze_layer(spec, augment(x), shape)
        m = materialize(op)
        rng = np.random.default_rng(1)
        for _ in range(5):
            v = rng.standard_normal(op.in_tokens * op.in_channels)
            np.testing.assert_allclose(m @ v, op.apply(v), rtol=1e-10, atol=1e-10)

    def test_dense_transpose_matches_adjoint(self, name, spec, shape, x):
        op = freeze_layer(spec, augment(x), shape)
        m = materialize(op)
        rng = np.random.default_rng(2)
        for _ in range(5):
            u = rng.standard_normal(op.out_tokens * op.out_channels)
            np.testing.assert_allclose(
                m.T @ u, op.apply_adjoint(u), rtol=1e-10, atol=1e-10)

    def test_actual_input_flows_identically(self, name, spec, shape, x):
        op = freeze_layer(spec, augment(x), shape)
        m = materialize(op)
        xa = vec(augment(x))
        np.testing.assert_allclose(m @ xa, op.apply(xa), rtol=1e-12, atol=1e-12)


def cases_models():
    out = []
    for template, seeds in (("mlp", range(4)), ("cnn", range(4)),
                            ("vit-block", range(4))):
        for s in seeds:
            out.append((template, s))
    return out


@pytest.mark.parametrize("template,seed", cases_models())
class TestComposition:
    def setup_model(self, template, seed):
        model = generate_random_model(template, seed)
        x = random_input(model.input_shape, np.random.default_rng(seed + 500))
        return model, x

    def test_fused_composition_reproduces_forward(self, template, seed):
        model, x = self.setup_model(template, seed)
        trace = freeze_network(model, x)
        np.testing.assert_allclose(
            oracle_forward(trace, x), model_forward(model, x),
            rtol=1e-9, atol=1e-10)

    def test_fused_and_unfused_routes_agree(self, template, seed):
        model, x = self.setup_model(template, seed)
        trace = freeze_network(model, x)
        omega = compose_fused(trace.ops)
        w, b = compose_unfused(trace.ops)
        t, d = model.input_shape.tokens, model.input_shape.channels
        k = model.logits
        np.testing.assert_allclose(omega[:k, :t * d], w, rtol=1e-10, atol=1e-10)
        np.testing.assert_allclose(
            omega[:k, t * d:] @ np.ones(t), b, rtol=1e-10, atol=1e-10)
        np.testing.assert_allclose(
            w @ vec(x) + b, model_forward(model, x), rtol=1e-9, atol=1e-10)

    def test_oracle_row_matches_engine_row(self, template, seed):
        model, x = self.setup_model(template, seed)
        trace = freeze_network(model, x)
        for k in range(model.logits):
            _, m = oracle_explain(model, x, k)
            engine_m = contribution_matrix(trace, k)
            np.testing.assert_allclose(m, engine_m, rtol=1e-8, atol=1e-10)

    def test_oracle_attribution_matches_engine(self, template, seed):
        model, x = self.setup_model(template, seed)
        for k in range(model.logits):
            attr, _ = oracle_explain(model, x, k)
            res = explain(model, x, k)
            np.testing.assert_allclose(attr, res.attribution,
                                       rtol=1e-8, atol=1e-10)
            np.testing.assert_allclose(
                attr.sum(), res.logits[k], rtol=1e-8, atol=1e-8)


class TestUnfusedParts:
    def test_dense_layer_splits_into_weight_and_bias(self):
        model = generate_random_model("mlp", 9, features=(3, 4))
        x = np.array([[0.3, -1.2, 0.8]])
        trace = freeze_network(model, x)
        w, b = unfused_parts(trace.ops[0])
        p = model.layers[0].params
        np.testing.assert_allclose(w, p.w.T, atol=1e-12)
        np.testing.assert_allclose(b, p.b, atol=1e-12)


class TestSizeCap:
    def test_materialize_refuses_oversized(self):
        model = generate_random_model("mlp", 0, features=(5000, 2))
        x = random_input(model.input_shape, np.random.default_rng(0))
        trace = freeze_network(model, x)
        with pytest.raises(ResourceError):
            materialize(trace.ops[0])

    def test_cap_is_configurable(self):
        model = generate_random_model("mlp", 0, features=(4, 3))
        x = random_input(model.input_shape, np.random.default_rng(0))
        trace = freeze_network(model, x)
        with pytest.raises(ResourceError):
            compose_fused(trace.ops, cap=3)
        compose_fused(trace.ops, cap=4096)

    def test_contribution_row_layout_is_vec(self):
        model = generate_random_model("cnn", 3)
        x = random_input(model.input_shape, np.random.default_rng(3))
        trace = freeze_network(model, x)
        row = contribution_row(trace, 0)
        omega = compose_fused(trace.ops)
        np.testing.assert_allclose(row, omega[0], rtol=1e-10, atol=1e-12)
