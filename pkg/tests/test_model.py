import numpy as np
import pytest

from threeet import tensor as T
from threeet.cells import CHANGE_BASED, VANILLA, CellState, cell_step
from threeet.errors import ShapeError, WeightFileError
from threeet.events import slice_clips
from threeet.model import (
    ModelConfig,
    build_model,
    decode_weights,
    encode_weights,
    forward_sequence,
    load_weights,
    parameter_count,
    save_weights,
)

TINY = dict(width=8, height=6, channels=(2, 4), fc_hidden=8, dtype="float64")


def sparse_frames(rng, shape, density=0.2):
    return rng.integers(-2, 3, shape) * (rng.random(shape) < density)


def closed_form_count(cfg):
    # sum over layers of 4*9*(in+h)*h gate weights + 4h biases + 2h BN, plus the FC head
    total, in_ch = 0, cfg.in_channels
    for h in cfg.channels:
        total += 4 * 9 * (in_ch + h) * h + 4 * h + 2 * h
        in_ch = h
    ph, pw = cfg.height, cfg.width
    for _ in cfg.channels:
        ph, pw = ph // 2, pw // 2
    flat = cfg.channels[-1] * ph * pw
    return total + flat * cfg.fc_hidden + cfg.fc_hidden + cfg.fc_hidden * cfg.outputs + cfg.outputs


class TestTopology:
    def test_default_parameter_count(self):
        cfg = ModelConfig()
        assert parameter_count(cfg) == 416_882
        m = build_model(cfg, 0)
        assert m.num_parameters() == 416_882
        gates = sum(m.params[f"layer{l}.{k}"].size for l in range(1, 5) for k in ("wx", "wh"))
        biases = sum(m.params[f"layer{l}.b"].size for l in range(1, 5))
        bn = sum(m.params[f"bn{l}.{k}"].size for l in range(1, 5) for k in ("gamma", "beta"))
        fc1 = m.params["fc1.w"].size + m.params["fc1.b"].size
        fc2 = m.params["fc2.w"].size + m.params["fc2.b"].size
        assert (gates, biases, bn, fc1, fc2) == (292_896, 480, 240, 123_008, 258)

    def test_default_flatten(self):
        cfg = ModelConfig()
        assert cfg.pooled_size == (3, 5)
        assert cfg.flat_features == 960

    def test_half_resolution_flatten(self):
        cfg = ModelConfig(width=40, height=30)
        assert cfg.flat_features == 64 * 2 * 1 == 128
        assert build_model(cfg, 0).params["fc1.w"].shape == (128, 128)

    @pytest.mark.parametrize(
        "kw",
        [
            dict(channels=(3,), width=4, height=4),
            dict(channels=(2, 5, 7), width=17, height=9, fc_hidden=5, outputs=3),
            dict(channels=(8, 16, 32, 64), width=160, height=120),
            dict(in_channels=2, channels=(4, 4), width=10, height=10),
        ],
    )
    def test_count_formula_on_other_configs(self, kw):
        cfg = ModelConfig(**kw)
        assert build_model(cfg, 1).num_parameters() == parameter_count(cfg) == closed_form_count(cfg)

    def test_collapsing_resolution_is_rejected(self):
        with pytest.raises(ValueError, match="collapses before pool 4"):
            ModelConfig(width=12, height=8)

    def test_bad_cell_kind(self):
        with pytest.raises(ValueError):
            ModelConfig(cell="gru")

    def test_same_seed_same_weights(self):
        a, b = build_model(ModelConfig(), 3), build_model(ModelConfig(), 3)
        c = build_model(ModelConfig(), 4)
        assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
        assert not np.array_equal(a.params["layer1.wx"], c.params["layer1.wx"])

    def test_init_ranges(self):
        m = build_model(ModelConfig(), 0)
        assert np.abs(m.params["layer2.wx"]).max() <= 1 / np.sqrt(8 * 9)
        assert np.abs(m.params["fc1.w"]).max() <= 1 / np.sqrt(960)
        b = m.params["layer1.b"]
        np.testing.assert_array_equal(b[8:16], 1.0)
        assert not b[:8].any() and not b[16:].any()


def composed_oracle(model, frames):
    """Per-clip evaluation built from module primitives, one sample at a time."""
    cfg = model.config
    out = []
    for clip in frames:
        states = []
        h, w = cfg.height, cfg.width
        for hid in cfg.channels:
            states.append(CellState.zeros((hid, h, w), np.float64))
            h, w = h // 2, w // 2
        preds = []
        for frame in clip:
            x = frame[None].astype(np.float64)
            for l in range(1, len(cfg.channels) + 1):
                H, states[l - 1], _ = cell_step(model.cell_params(l), x, states[l - 1], cfg.cell, cfg.theta)
                s = model.bn_stats[l - 1]
                gamma, beta = model.params[f"bn{l}.gamma"], model.params[f"bn{l}.beta"]
                y = (H - s.running_mean[:, None, None]) / np.sqrt(s.running_var[:, None, None] + s.eps)
                y = gamma[:, None, None] * y + beta[:, None, None]
                x = T.maxpool2x2_forward(np.maximum(y, 0))[0]
            a = np.maximum(model.params["fc1.w"] @ x.reshape(-1) + model.params["fc1.b"], 0)
            preds.append(model.params["fc2.w"] @ a + model.params["fc2.b"])
        out.append(preds)
    return np.array(out)


def randomise_bn(model, rng):
    for s in model.bn_stats:
        s.running_mean[...] = rng.standard_normal(s.running_mean.shape) * 0.1
        s.running_var[...] = rng.uniform(0.5, 2.0, s.running_var.shape)
    for l in range(1, model.num_layers + 1):
        model.params[f"bn{l}.gamma"][...] = rng.uniform(0.5, 1.5, model.params[f"bn{l}.gamma"].shape)
        model.params[f"bn{l}.beta"][...] = rng.standard_normal(model.params[f"bn{l}.beta"].shape) * 0.1


class TestForward:
    @pytest.mark.parametrize("cell,theta", [(VANILLA, 0.0), (CHANGE_BASED, 0.0), (CHANGE_BASED, 0.05)])
    def test_composition_oracle(self, cell, theta):
        rng = np.random.default_rng(0)
        cfg = ModelConfig(width=16, height=12, channels=(3, 4), fc_hidden=6, cell=cell, theta=theta, dtype="float64")
        m = build_model(cfg, 5)
        randomise_bn(m, rng)
        frames = sparse_frames(rng, (2, 4, 12, 16))
        preds, _ = m.forward(frames, "eval")
        np.testing.assert_allclose(preds, composed_oracle(m, frames), rtol=0, atol=1e-12)

    def test_zero_frames_give_constant_prediction(self):
        # a fresh cell with zero input sits at H = C = 0 (i * tanh(0) = 0), so
        # every step sees the same state
        m = build_model(ModelConfig(), 0)
        m.params["fc2.b"][...] = [0.25, 0.75]
        preds, _ = m.forward(np.zeros((1, 6, 60, 80)), "eval")
        assert np.all(preds[0] == preds[0, 0])
        np.testing.assert_array_equal(preds[0, 0], [0.25, 0.75])

    @pytest.mark.parametrize("cell", [VANILLA, CHANGE_BASED])
    def test_causality(self, cell):
        rng = np.random.default_rng(1)
        m = build_model(ModelConfig(**TINY, cell=cell, theta=0.01), 2)
        frames = sparse_frames(rng, (1, 6, 6, 8))
        full, _ = m.forward(frames, "eval")
        for t in (1, 2, 4):
            prefix, _ = m.forward(frames[:, :t], "eval")
            np.testing.assert_array_equal(prefix[0], full[0, :t])
        other = frames.copy()
        other[:, 3:] = sparse_frames(rng, (1, 3, 6, 8))
        changed, _ = m.forward(other, "eval")
        np.testing.assert_array_equal(changed[0, :3], full[0, :3])

    def test_cell_kinds_agree_at_first_step(self):
        rng = np.random.default_rng(2)
        m = build_model(ModelConfig(), 0)
        frames = sparse_frames(rng, (2, 3, 60, 80), 0.05)
        van, _ = m.forward(frames, "eval")
        for theta in (0.0, 0.5):
            cb, _ = m.with_cell(CHANGE_BASED, theta).forward(frames, "eval")
            np.testing.assert_array_equal(van[:, 0], cb[:, 0])

    def test_deterministic(self):
        rng = np.random.default_rng(3)
        m = build_model(ModelConfig(), 0)
        frames = sparse_frames(rng, (2, 3, 60, 80), 0.05)
        a, _ = m.forward(frames, "eval")
        b, _ = m.forward(frames, "eval")
        assert a.tobytes() == b.tobytes()

    def test_forward_sequence_output(self):
        rng = np.random.default_rng(4)
        cfg = ModelConfig()
        m = build_model(cfg, 0)
        frames = sparse_frames(rng, (7, 60, 80), 0.02)
        sample = slice_clips(frames, np.zeros((7, 2)), 5, 1)[0]
        out = forward_sequence(m, sample)
        assert out.predictions.shape == (5, 2)
        np.testing.assert_allclose(out.predictions, out.normalized * [80, 60])
        assert set(out.trace.layers) >= {"layer1", "layer4"}
        for key in out.trace.steps:
            assert len(out.trace.per_step(key)) == 5

    def test_wrong_resolution(self):
        m = build_model(ModelConfig(**TINY), 0)
        with pytest.raises(ShapeError):
            m.forward(np.zeros((1, 2, 8, 6)))

    def test_nan_input_is_caught(self):
        m = build_model(ModelConfig(**TINY), 0)
        frames = np.zeros((1, 2, 6, 8))
        frames[0, 1, 2, 2] = np.nan
        with pytest.raises(Exception) as err:
            m.forward(frames)
        assert "non-finite" in str(err.value)


class TestWeightFiles:
    def test_round_trip_is_bit_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        m = build_model(ModelConfig(cell=CHANGE_BASED, theta=0.2), 9)
        randomise_bn(m, rng)
        save_weights(m, tmp_path / "w.bin")
        back = load_weights(tmp_path / "w.bin")
        assert back.config == m.config
        for k, v in m.state_dict().items():
            assert np.array_equal(back.state_dict()[k], v), k
        save_weights(back, tmp_path / "w2.bin")
        assert (tmp_path / "w.bin").read_bytes() == (tmp_path / "w2.bin").read_bytes()
        frames = sparse_frames(rng, (1, 3, 60, 80), 0.05)
        assert m.forward(frames)[0].tobytes() == back.forward(frames)[0].tobytes()

    def test_layout(self):
        m = build_model(ModelConfig(**TINY), 0)
        raw = encode_weights(m)
        assert raw[:8] == b"3ETW0001"
        hlen = int.from_bytes(raw[8:12], "little")
        header = raw[12 : 12 + hlen].decode()
        names = [line.split()[1] for line in header.splitlines() if line.startswith("tensor")]
        assert names[:5] == ["layer1.wx", "layer1.wh", "layer1.b", "bn1.gamma", "bn1.beta"]
        assert names[5:7] == ["bn1.running_mean", "bn1.running_var"]
        n = sum(v.size for v in m.state_dict().values())
        assert len(raw) == 12 + hlen + 4 * n
        first = np.frombuffer(raw[12 + hlen : 12 + hlen + 4], "<f4")[0]
        assert first == np.float32(m.params["layer1.wx"].reshape(-1)[0])

    def test_wrong_channel_plan_names_tensor(self):
        raw = encode_weights(build_model(ModelConfig(), 0))
        with pytest.raises(WeightFileError) as err:
            decode_weights(raw, ModelConfig(channels=(8, 16, 32, 32)))
        assert err.value.tensor == "layer4.wx"
        assert "layer4.wx" in str(err.value)

    def test_version_mismatch(self):
        raw = bytearray(encode_weights(build_model(ModelConfig(**TINY), 0)))
        raw[4:8] = b"0002"
        with pytest.raises(WeightFileError, match="version"):
            decode_weights(bytes(raw))

    def test_bad_magic(self):
        with pytest.raises(WeightFileError, match="magic"):
            decode_weights(b"GARBAGE!" + bytes(16))

    def test_truncated_payload(self):
        raw = encode_weights(build_model(ModelConfig(**TINY), 0))
        with pytest.raises(WeightFileError, match="truncated"):
            decode_weights(raw[:-4])
