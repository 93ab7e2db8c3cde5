import numpy as np
import pytest

from gastnet.errors import CheckpointError, ConfigError, ShapeError
from gastnet.model import (GastNetConfig, StreamingPredictor, build_model, checkpoint_bytes,
                           infer_sequence, load_checkpoint, model_from_bytes, pad_frames,
                           param_count, parse_checkpoint, predict_frames, save_checkpoint)
from gastnet.data import Pose2DSequence

from helpers import closed_form_param_count, random_model


def poses(rng, B, T, scale=0.3):
    return rng.normal(size=(B, T, 17, 2)) * scale


def test_rf27_structure():
    m = build_model(GastNetConfig(receptive_field=27))
    assert len(m.tcb) == 2 and len(m.gab) == 3
    assert [t.dilation for t in m.tcb] == [3, 9]
    assert m.cfg.channels == 128


@pytest.mark.parametrize("rf,channels", [(9, 128), (27, 128), (81, 64), (243, 32)])
def test_default_channels(rf, channels):
    assert GastNetConfig(receptive_field=rf).channels == channels


def test_invalid_configs():
    with pytest.raises(ConfigError):
        GastNetConfig(receptive_field=28)
    with pytest.raises(ConfigError):
        GastNetConfig(channels=30, heads=4)
    with pytest.raises(ConfigError):
        GastNetConfig(skeleton="coco")


def test_strided_output_shape():
    m = build_model(GastNetConfig(receptive_field=27, channels=16, heads=2))
    out = m.predict(np.zeros((3, 27, 17, 2), dtype=np.float32), strided=True)
    assert out.shape == (3, 1, 17, 3)


def test_seeded_build_is_deterministic():
    cfg = GastNetConfig(receptive_field=9, channels=16, heads=2)
    a = dict(build_model(cfg, seed=3).named_parameters())
    b = dict(build_model(cfg, seed=3).named_parameters())
    c = dict(build_model(cfg, seed=4).named_parameters())
    assert all(np.array_equal(a[k].data, b[k].data) for k in a)
    assert any(not np.array_equal(a[k].data, c[k].data) for k in a)


def test_parameter_names():
    names = [n for n, _ in build_model(GastNetConfig(receptive_field=27, channels=16, heads=2)).named_parameters()]
    assert names[0].startswith("input.")
    assert "block0.sym.W" in names and "block2.global.C" in names
    assert "temporal1.conv1" in names and "output.conv" in names
    assert len(names) == len(set(names))


def test_baseline_config_has_single_first_order_stream():
    m = build_model(GastNetConfig.baseline(receptive_field=9, channels=16, heads=2))
    for g in m.gab:
        assert g.stream_names == ("kin",)
        np.testing.assert_array_equal(g.streams[0].kernel_mask, m.skeleton.adjacency != 0)


# -- inference --------------------------------------------------------------

@pytest.mark.parametrize("rf", [9, 27])
def test_modes_agree(rf):
    m = random_model(rf)
    frames = poses(np.random.default_rng(rf), 1, 40)[0]
    a = predict_frames(m, frames, "layer_by_layer")
    b = predict_frames(m, frames, "single_frame")
    np.testing.assert_allclose(a, b, atol=1e-9)


def test_modes_agree_float32():
    m = random_model(27, dtype=np.float32)
    frames = poses(np.random.default_rng(0), 1, 30)[0]
    a = predict_frames(m, frames, "layer")
    b = predict_frames(m, frames, "frame")
    # float32 rounding on metre-scale outputs times 1000
    np.testing.assert_allclose(a, b, atol=1e-2)


def test_root_is_origin_and_constant_input_gives_constant_output():
    m = random_model(9)
    frames = np.repeat(poses(np.random.default_rng(1), 1, 1)[0], 20, axis=0)
    out = predict_frames(m, frames)
    np.testing.assert_array_equal(out[:, 0], 0.0)
    np.testing.assert_allclose(out, np.repeat(out[:1], 20, axis=0), atol=1e-9)


def test_one_frame_sequence():
    m = random_model(27)
    assert predict_frames(m, poses(np.random.default_rng(2), 1, 1)[0]).shape == (1, 17, 3)


def test_unknown_mode_and_short_input():
    m = random_model(9)
    with pytest.raises(ValueError):
        predict_frames(m, np.zeros((3, 17, 2)), "fast")
    with pytest.raises(ShapeError):
        m.predict(np.zeros((1, 8, 17, 2)))


def test_infer_sequence_checks_skeleton():
    m = random_model(9)
    seq = Pose2DSequence("humaneva15", 50.0, np.zeros((3, 15, 2)), normalized=True)
    with pytest.raises(ConfigError):
        infer_sequence(m, seq)


def test_streaming_equals_causal_batch():
    m = random_model(27, causal=True)
    frames = poses(np.random.default_rng(3), 1, 35)[0]
    batch = predict_frames(m, frames)
    stream = StreamingPredictor(m).run(frames)
    np.testing.assert_allclose(stream, batch, atol=1e-9)


def test_streaming_needs_causal_model():
    with pytest.raises(ConfigError):
        StreamingPredictor(random_model(9))


def test_causal_ignores_future_frames():
    m = random_model(9, causal=True)
    x = poses(np.random.default_rng(4), 1, 20)
    y0 = m.predict(x)
    x[0, 15] += 1.0
    y1 = m.predict(x)
    # output frame t covers inputs t .. t+8; frame 15 feeds outputs 7..
    np.testing.assert_array_equal(y0[0, :7], y1[0, :7])
    assert np.abs(y0[0, 7] - y1[0, 7]).max() > 0


def test_pad_frames():
    f = np.arange(5.0).reshape(5, 1, 1)
    assert pad_frames(f, 27, False).shape[0] == 31
    c = pad_frames(f, 27, True)
    assert c.shape[0] == 31 and (c[:27] == 0).all()
    assert pad_frames(f, 1, False) is f


# -- parameters ---------------------------------------------------------------

@pytest.mark.parametrize("rf,C", [(27, 128), (243, 32), (9, 16), (81, 64)])
def test_param_count_matches_closed_form(rf, C):
    m = build_model(GastNetConfig(receptive_field=rf, channels=C))
    nb = m.cfg.num_blocks
    total, groups = param_count(m, per_module=True)
    assert total == closed_form_param_count(C, nb)
    assert total == sum(groups.values())
    manifest, _ = parse_checkpoint(checkpoint_bytes(m))
    n_params = sum(int(np.prod(e["shape"])) for e in manifest["tensors"]
                   if e["name"] in dict(m.named_parameters()))
    assert total == n_params


def test_param_count_ordering_at_default_widths():
    small = param_count(build_model(GastNetConfig(receptive_field=27)))
    large = param_count(build_model(GastNetConfig(receptive_field=243)))
    assert (small < large) == (closed_form_param_count(128, 2) < closed_form_param_count(32, 4))


def test_param_count_monotone_in_channels():
    counts = [param_count(build_model(GastNetConfig(receptive_field=9, channels=c, heads=4)))
              for c in (8, 16, 32, 64)]
    assert counts == sorted(counts) and len(set(counts)) == 4


# -- checkpoints -----------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path):
    m = random_model(27, dtype=np.float32)
    path = tmp_path / "m.gast"
    blob = save_checkpoint(m, path)
    m2 = load_checkpoint(path)
    assert checkpoint_bytes(m2) == blob
    x = poses(np.random.default_rng(5), 2, 30).astype(np.float32)
    np.testing.assert_array_equal(m.predict(x), m2.predict(x))
    assert m2.cfg == m.cfg


def test_checkpoint_header_layout():
    blob = checkpoint_bytes(random_model(9, dtype=np.float32))
    assert blob[:8] == b"GASTCKPT"
    assert int.from_bytes(blob[8:12], "little") == 1
    mlen = int.from_bytes(blob[12:20], "little")
    manifest, payload = parse_checkpoint(blob)
    assert len(payload) == len(blob) - 20 - mlen
    offsets = [e["offset"] for e in manifest["tensors"]]
    assert offsets == sorted(offsets) and offsets[0] == 0


def test_checkpoint_rejects_damage():
    blob = checkpoint_bytes(random_model(9, dtype=np.float32))
    with pytest.raises(CheckpointError, match="payload length"):
        model_from_bytes(blob[:-1])
    with pytest.raises(CheckpointError, match="magic"):
        model_from_bytes(b"XXXXXXXX" + blob[8:])
    bad_version = blob[:8] + (2).to_bytes(4, "little") + blob[12:]
    with pytest.raises(CheckpointError, match="version"):
        model_from_bytes(bad_version)
    with pytest.raises(CheckpointError):
        model_from_bytes(blob[:30])
