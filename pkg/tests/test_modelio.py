import json

import numpy as np
import pytest

from dynlin.engine import model_forward
from dynlin.errors import (
    ChecksumError,
    FormatError,
    MissingBlobError,
    ParameterError,
    ShapeChainError,
    UnknownKindError,
    VersionError,
)
from dynlin.layers import TokenShape
from dynlin.modelio import (
    generate_random_model,
    load_grid,
    load_model,
    random_input,
    save_grid,
    save_model,
)


def roundtrip(tmp_path, model, dtype=None):
    save_model(model, tmp_path / "m", dtype=dtype)
    return load_model(tmp_path / "m")


class TestBundleRoundTrip:
    @pytest.mark.parametrize("template", ["mlp", "cnn", "vit-block"])
    def test_float64_is_exact(self, template, tmp_path):
        model = generate_random_model(template, 5)
        again = roundtrip(tmp_path, model)
        x = random_input(model.input_shape, np.random.default_rng(0))
        np.testing.assert_array_equal(
            model_forward(model, x), model_forward(again, x))

    def test_float32_narrowing_stays_close(self, tmp_path):
        model = generate_random_model("cnn", 6)
        again = roundtrip(tmp_path, model, dtype="float32")
        assert again.dtype == "float32"
        x = random_input(model.input_shape, np.random.default_rng(1))
        np.testing.assert_allclose(
            model_forward(model, x), model_forward(again, x),
            rtol=1e-5, atol=1e-5)
        # loaded arrays are widened for computation
        assert again.layers[0].params.kernel.dtype == np.float64

    def test_manifest_is_deterministic(self, tmp_path):
        a = generate_random_model("vit-block", 3)
        b = generate_random_model("vit-block", 3)
        save_model(a, tmp_path / "a")
        save_model(b, tmp_path / "b")
        assert (tmp_path / "a/manifest.json").read_text() == \
            (tmp_path / "b/manifest.json").read_text()
        wa = sorted((tmp_path / "a/weights").iterdir())
        wb = sorted((tmp_path / "b/weights").iterdir())
        assert [p.name for p in wa] == [p.name for p in wb]
        assert all(x.read_bytes() == y.read_bytes() for x, y in zip(wa, wb))


class TestLoadErrors:
    def write_bundle(self, tmp_path):
        model = generate_random_model("mlp", 1)
        save_model(model, tmp_path / "m")
        return tmp_path / "m"

    def edit_manifest(self, root, fn):
        path = root / "manifest.json"
        data = json.loads(path.read_text())
        fn(data)
        path.write_text(json.dumps(data))

    def test_unsupported_version(self, tmp_path):
        root = self.write_bundle(tmp_path)
        self.edit_manifest(root, lambda d: d.update(version=99))
        with pytest.raises(VersionError):
            load_model(root)

    def test_wrong_format_tag(self, tmp_path):
        root = self.write_bundle(tmp_path)
        self.edit_manifest(root, lambda d: d.update(format="something-else"))
        with pytest.raises(FormatError):
            load_model(root)

    def test_unknown_layer_kind(self, tmp_path):
        root = self.write_bundle(tmp_path)
        self.edit_manifest(
            root, lambda d: d["layers"].insert(0, {"kind": "fourier"}))
        with pytest.raises(UnknownKindError):
            load_model(root)

    def test_missing_blob_reference(self, tmp_path):
        root = self.write_bundle(tmp_path)
        self.edit_manifest(root, lambda d: d["layers"][0].update(w="nope"))
        with pytest.raises(MissingBlobError):
            load_model(root)

    def test_missing_blob_file(self, tmp_path):
        root = self.write_bundle(tmp_path)
        next((root / "weights").iterdir()).unlink()
        with pytest.raises(MissingBlobError):
            load_model(root)

    def test_corrupted_blob(self, tmp_path):
        root = self.write_bundle(tmp_path)
        victim = sorted((root / "weights").iterdir())[0]
        raw = bytearray(victim.read_bytes())
        raw[0] ^= 0xFF
        victim.write_bytes(bytes(raw))
        with pytest.raises(ChecksumError):
            load_model(root)

    def test_shape_chain_break(self, tmp_path):
        root = self.write_bundle(tmp_path)

        def swap(d):
            d["layers"][0]["w"], d["layers"][2]["w"] = \
                d["layers"][2]["w"], d["layers"][0]["w"]
        self.edit_manifest(root, swap)
        with pytest.raises(ShapeChainError):
            load_model(root)

    def test_bad_json(self, tmp_path):
        root = self.write_bundle(tmp_path)
        (root / "manifest.json").write_text("{not json")
        with pytest.raises(FormatError):
            load_model(root)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(FormatError):
            load_model(tmp_path / "absent")


class TestGrids:
    def test_spatial_round_trip_is_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((12, 3))
        shape = TokenShape(12, 3, 4, 3)
        save_grid(tmp_path / "a.grid", x, shape)
        y, s2 = load_grid(tmp_path / "a.grid")
        np.testing.assert_array_equal(x, y)
        assert (s2.height, s2.width, s2.channels) == (4, 3, 3)

    def test_sequence_round_trip(self, tmp_path):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((5, 7))
        save_grid(tmp_path / "b.grid", x, TokenShape(5, 7))
        y, s2 = load_grid(tmp_path / "b.grid")
        np.testing.assert_array_equal(x, y)
        assert s2.height is None and s2.tokens == 5

    def test_parse_error_carries_line_number(self, tmp_path):
        p = tmp_path / "bad.grid"
        p.write_text("seq 2 3\n1.0 2.0 3.0\n1.0 oops 3.0\n")
        with pytest.raises(FormatError, match=":3"):
            load_grid(p)

    def test_wrong_value_count(self, tmp_path):
        p = tmp_path / "bad2.grid"
        p.write_text("seq 1 3\n1.0 2.0\n")
        with pytest.raises(FormatError, match="expected 3"):
            load_grid(p)

    def test_bad_header(self, tmp_path):
        p = tmp_path / "bad3.grid"
        p.write_text("matrix 2 2\n")
        with pytest.raises(FormatError, match="header"):
            load_grid(p)


class TestTemplates:
    def test_unknown_template(self):
        with pytest.raises(ParameterError):
            generate_random_model("resnet152", 0)

    def test_same_seed_same_logits(self):
        a = generate_random_model("cnn", 4)
        b = generate_random_model("cnn", 4)
        x = random_input(a.input_shape, np.random.default_rng(2))
        np.testing.assert_array_equal(model_forward(a, x), model_forward(b, x))

    def test_knobs_reach_builders(self):
        m = generate_random_model("mlp", 0, features=(6, 9, 2),
                                  activation="swish")
        assert m.input_shape.channels == 6 and m.logits == 2
        m2 = generate_random_model("vit-block", 0, heads=4, dim=8)
        assert m2.logits == 3
