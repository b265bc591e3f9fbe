import json
import struct

import numpy as np
import pytest

from groupmixer.autodiff import Variable
from groupmixer.errors import CheckpointError, ConfigError, DimensionError
from groupmixer.model import (
    ModelConfig, build, count_parameters, expected_parameter_count, load_checkpoint,
    save_checkpoint, state_items,
)

SMALL = dict(input_size=(14, 14))


def make(variant="base", seed=0, **kw):
    cfg = ModelConfig(variant=variant, **{**SMALL, **kw})
    return build(cfg, np.random.default_rng(seed))


@pytest.mark.parametrize("variant,count", [("base", 102018), ("slim_g2", 77442), ("slim_g4", 65154)])
def test_parameter_counts_table(variant, count):
    model = make(variant)
    assert count_parameters(model) == count


def test_component_breakdown():
    model = make()
    sizes = {name: p.value.size for name, p in model.named_parameters()}
    embed = sum(v for k, v in sizes.items() if k.startswith("embed."))
    layer0 = sum(v for k, v in sizes.items() if k.startswith("mixers.0."))
    head = sum(v for k, v in sizes.items() if k.startswith("head."))
    assert (embed, layer0, head) == (19200, 27520, 258)
    assert embed + 3 * layer0 + head == 102018


def test_closed_form_matches_counted():
    for variant in ("base", "slim_g2", "slim_g4"):
        for dim in (16, 128):
            m = make(variant, embed_dim=dim)
            assert count_parameters(m) == expected_parameter_count(m.config)


def test_running_stats_not_counted():
    model = make()
    buffers = sum(a.size for _, a in model.named_buffers())
    assert buffers == 2 * 128 * 7
    assert count_parameters(model) == sum(a.size for _, a in state_items(model)) - buffers


def test_slim_pointwise_shapes():
    model = make("slim_g4")
    assert all(m.pw_weight.shape == (128, 32, 1, 1) for m in model.mixers)
    assert all(m.shuffle for m in model.mixers)
    assert not any(m.shuffle for m in make("base").mixers)


def test_same_seed_identical_parameters():
    a, b = make(seed=3), make(seed=3)
    for (_, x), (_, y) in zip(state_items(a), state_items(b)):
        assert x.tobytes() == y.tobytes()


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(variant="slim_g3")
    with pytest.raises(ConfigError):
        ModelConfig(input_size=(50, 56))
    assert ModelConfig(variant="slim-g2").groups == 2
    assert [ModelConfig(variant=v).groups for v in ("base", "slim_g2", "slim_g4")] == [1, 2, 4]


class TestForward:
    def test_logit_shape(self, rng):
        model = make()
        x = rng.random((3, 3, 14, 14), dtype=np.float32)
        assert model(Variable(x)).shape == (3, 2)

    def test_rejects_wrong_size(self, rng):
        with pytest.raises(DimensionError):
            make()(Variable(np.zeros((1, 3, 21, 21), np.float32)))

    def test_224_maps_are_32x32(self, rng):
        model = make(input_size=(224, 224)).eval()
        f = model.embed(Variable(rng.random((1, 3, 224, 224), dtype=np.float32)))
        assert f.shape == (1, 128, 32, 32)
        for layer in model.mixers:
            f = layer(f)
            assert f.shape == (1, 128, 32, 32)

    def test_eval_batch_independent(self, rng):
        model = make("slim_g2", input_size=(28, 28))
        x = rng.random((5, 3, 28, 28), dtype=np.float32)
        model(Variable(x))  # move running stats away from their initial values
        batch = model.predict_logits(x)
        for i in range(5):
            np.testing.assert_allclose(model.predict_logits(x[i:i + 1])[0], batch[i], atol=1e-6, rtol=0)

    def test_eval_pure(self, rng):
        model = make().eval()
        x = rng.random((2, 3, 14, 14), dtype=np.float32)
        assert model(Variable(x)).value.tobytes() == model(Variable(x)).value.tobytes()


class TestCheckpoint:
    def _trained(self, rng, variant="slim_g4"):
        model = make(variant)
        model(Variable(rng.random((4, 3, 14, 14), dtype=np.float32)))
        return model.eval()

    def test_round_trip(self, tmp_path, rng):
        model = self._trained(rng)
        path = save_checkpoint(model, tmp_path / "m.gmxr")
        loaded = load_checkpoint(path)
        assert loaded.config == model.config
        assert count_parameters(loaded) == count_parameters(model)
        for (n1, a), (n2, b) in zip(state_items(model), state_items(loaded)):
            assert n1 == n2 and a.tobytes() == b.tobytes()
        x = rng.random((3, 3, 14, 14), dtype=np.float32)
        assert loaded.predict_logits(x).tobytes() == model.predict_logits(x).tobytes()

    def test_header_layout(self, tmp_path, rng):
        model = self._trained(rng)
        path = save_checkpoint(model, tmp_path / "m.gmxr")
        blob = path.read_bytes()
        assert blob[:4] == b"GMXR"
        version, mlen = struct.unpack_from("<IQ", blob, 4)
        assert version == 1
        manifest = json.loads(blob[16:16 + mlen])
        assert manifest["config"]["variant"] == "slim_g4"
        last = manifest["tensors"][-1]
        assert len(blob) == 16 + mlen + last["offset"] + last["nbytes"]
        first = manifest["tensors"][0]
        w = np.frombuffer(blob, "<f4", count=int(np.prod(first["shape"])), offset=16 + mlen)
        assert first["name"] == "embed.weight"
        np.testing.assert_array_equal(w.reshape(first["shape"]), model.embed.weight.value)

    def test_saving_twice_is_byte_identical(self, tmp_path, rng):
        model = self._trained(rng)
        a = save_checkpoint(model, tmp_path / "a").read_bytes()
        b = save_checkpoint(model, tmp_path / "b").read_bytes()
        assert a == b

    def test_tampered_magic(self, tmp_path, rng):
        path = save_checkpoint(self._trained(rng), tmp_path / "m.gmxr")
        blob = bytearray(path.read_bytes())
        blob[:4] = b"XXXX"
        path.write_bytes(bytes(blob))
        with pytest.raises(CheckpointError) as exc:
            load_checkpoint(path)
        assert exc.value.field == "magic"

    def test_truncated(self, tmp_path, rng):
        path = save_checkpoint(self._trained(rng), tmp_path / "m.gmxr")
        path.write_bytes(path.read_bytes()[:-10])
        with pytest.raises(CheckpointError) as exc:
            load_checkpoint(path)
        assert exc.value.field == "head.bias" or exc.value.field.startswith("mixers.")

    def test_config_mismatch_names_field(self, tmp_path, rng):
        path = save_checkpoint(self._trained(rng), tmp_path / "m.gmxr")
        blob = path.read_bytes()
        mlen = struct.unpack_from("<Q", blob, 8)[0]
        manifest = json.loads(blob[16:16 + mlen])
        manifest["config"]["variant"] = "base"  # weights are for slim_g4
        new = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
        path.write_bytes(blob[:8] + struct.pack("<Q", len(new)) + new + blob[16 + mlen:])
        with pytest.raises(CheckpointError) as exc:
            load_checkpoint(path)
        assert exc.value.field.endswith("pw_weight")

    def test_float64_round_trip(self, tmp_path, rng):
        model = make().astype(np.float64)
        loaded = load_checkpoint(save_checkpoint(model, tmp_path / "m"))
        assert loaded.head.weight.dtype == np.float64
