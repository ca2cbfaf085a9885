import numpy as np
import pytest

from ssfmamba import diffcore as dc
from ssfmamba import network
from ssfmamba.blocks import ParamScope
from ssfmamba.network import ABLATIONS, Checkpoint, ModelConfig, ablation_config, build_model

TINY = dict(base_channels=2, num_stages=2, mdif_blocks_per_stage=1)


def naive_conv3d(x, w, b, stride, pad):
    c_out, c_in, k = w.shape[:3]
    xp = np.pad(x, ((0, 0),) + ((pad, pad),) * 3)
    n = [(xp.shape[i + 1] - k) // stride + 1 for i in range(3)]
    out = np.zeros([c_out] + n)
    for o in range(c_out):
        for i, j, l in np.ndindex(*n):
            patch = xp[:, i * stride:i * stride + k, j * stride:j * stride + k, l * stride:l * stride + k]
            out[o, i, j, l] = np.sum(patch * w[o]) + b[o]
    return out


@pytest.mark.parametrize("stride", [1, 2])
def test_conv3d_matches_loops_and_gradients(stride):
    rng = np.random.default_rng(stride)
    x, w, b = rng.normal(size=(2, 4, 4, 6)), rng.normal(size=(3, 2, 3, 3, 3)), rng.normal(size=3)
    tape = dc.Tape()
    y = network.conv3d(tape.input("x", x), tape.param("w", w), tape.param("b", b), stride=stride)
    np.testing.assert_allclose(y.value, naive_conv3d(x, w, b, stride, 1), atol=1e-12)
    tape.output("f", (y * rng.normal(size=y.shape)).sum())
    assert dc.finite_difference_check(tape, step=1e-5) < 1e-6


def test_transposed_conv_matches_scatter_and_gradients():
    rng = np.random.default_rng(3)
    x, w, b = rng.normal(size=(3, 2, 2, 3)), rng.normal(size=(3, 2, 2, 2, 2)), rng.normal(size=2)
    expected = np.zeros((2, 4, 4, 6)) + b[:, None, None, None]
    for c, i, j, l in np.ndindex(x.shape):
        expected[:, 2 * i:2 * i + 2, 2 * j:2 * j + 2, 2 * l:2 * l + 2] += x[c, i, j, l] * w[c]
    tape = dc.Tape()
    y = network.conv_transpose3d(tape.input("x", x), tape.param("w", w), tape.param("b", b))
    np.testing.assert_allclose(y.value, expected, atol=1e-12)
    tape.output("f", (y * rng.normal(size=y.shape)).sum())
    assert dc.finite_difference_check(tape, step=1e-5) < 1e-6


def test_cross_entropy_matches_numpy():
    rng = np.random.default_rng(0)
    logits = rng.normal(size=(4, 3, 3, 2)) * 3
    labels = rng.integers(0, 4, size=(3, 3, 2))
    logp = logits - np.log(np.exp(logits).sum(axis=0, keepdims=True))
    expected = -np.mean(np.take_along_axis(logp, labels[None], axis=0))
    assert abs(network.cross_entropy_loss(logits, labels) - expected) < 1e-12
    assert abs(network.cross_entropy_loss(np.zeros((4, 2, 2, 2)), np.zeros((2, 2, 2), int)) - np.log(4)) < 1e-15
    with pytest.raises(ValueError, match="label 5"):
        network.cross_entropy_loss(logits, np.full((3, 3, 2), 5))


def test_initial_logits_are_uniform_per_class():
    model = build_model(ModelConfig(**TINY), seed=0)
    logits = model.forward(np.random.default_rng(0).normal(size=(4, 8, 8, 8)))
    assert logits.shape == (4, 8, 8, 8)
    for k in range(4):
        assert np.all(logits[k] == logits[k].flat[0])


def test_input_shape_contract():
    model = build_model(ModelConfig(num_stages=3), seed=0)
    with pytest.raises(ValueError, match="divisible"):
        model.forward(np.zeros((4, 8, 8, 6)))
    with pytest.raises(ValueError, match="expected volume"):
        model.forward(np.zeros((3, 8, 8, 8)))


def test_decoder_stage_shapes_and_skip_mismatch():
    rng = np.random.default_rng(0)
    params = {"d.up.w": rng.normal(size=(4, 2, 2, 2, 2)), "d.up.b": np.zeros(2),
              "d.conv1.w": rng.normal(size=(2, 4, 3, 3, 3)), "d.conv1.b": np.zeros(2),
              "d.conv2.w": rng.normal(size=(2, 2, 3, 3, 3)), "d.conv2.b": np.zeros(2)}
    tape = dc.Tape()
    scope = ParamScope(tape, params, "d")
    out = network.decoder_stage(tape.input("x", rng.normal(size=(4, 2, 2, 2))),
                                tape.input("s", rng.normal(size=(2, 4, 4, 4))), scope)
    assert out.shape == (2, 4, 4, 4)
    with pytest.raises(ValueError, match="skip grid"):
        network.decoder_stage(tape.input("x2", rng.normal(size=(4, 2, 2, 2))),
                              tape.input("s2", rng.normal(size=(2, 4, 4, 6))), scope)


def _mamba_sets(params):
    return sorted({k.rsplit(".", 1)[0] for k in params if ".mamba" in k})


@pytest.mark.parametrize("name", sorted(ABLATIONS))
def test_ablations_build_and_train_one_step(name):
    cfg = ablation_config(name, **TINY)
    model = build_model(cfg, seed=0)
    rng = np.random.default_rng(1)
    tape, logits = model.trace(rng.normal(size=(4, 8, 8, 8)))
    loss = network.cross_entropy_loss(logits, rng.integers(0, 4, size=(8, 8, 8)))
    grads = dc.backward(tape, np.ones(()), output=loss)
    assert np.isfinite(loss.value) and set(grads) <= set(model.params)
    assert grads and all(np.all(np.isfinite(g)) for g in grads.values())


def test_ablation_inventories_follow_flags():
    def blk(name, **kw):
        params = build_model(ablation_config(name, **{**TINY, **kw}), 0).params
        return {k.split(".", 2)[2] for k in params if k.startswith("enc0.blk0.")}, params

    base, _ = blk("baseline")
    assert {k.rsplit(".", 1)[0] for k in base if "mamba" in k} == {"spa.mamba0"}
    assert not any(k.startswith("freq.") for k in base)

    fdb, _ = blk("baseline+fdb")
    assert {k.rsplit(".", 1)[0] for k in fdb if "mamba" in k} == {"spa.mamba0", "freq.mamba0"}

    mdsm, _ = blk("baseline+mdsm")
    assert {k.rsplit(".", 1)[0] for k in mdsm if "mamba" in k} == {"spa.mamba0", "spa.mamba1", "spa.mamba2"}
    mdsm2, _ = blk("baseline+mdsm2")
    assert {k.rsplit(".", 1)[0] for k in mdsm2 if "mamba" in k} == {"spa.mamba0", "spa.mamba1"}

    full, _ = blk("ssfmamba")
    assert {k.rsplit(".", 1)[0] for k in full if "mamba" in k} == {
        "spa.mamba0", "freq.mamba0", "freq.mamba1", "freq.mamba2"}
    assert fdb < full

    counts = [build_model(ablation_config(f"{n}-layer{'s' if n > 1 else ''}", **{**TINY, "mdif_blocks_per_stage": n}), 0)
              for n in (1, 2, 3)]
    per_block = [m.parameter_count for m in counts]
    assert per_block[1] - per_block[0] == per_block[2] - per_block[1] > 0
    for n, m in zip((1, 2, 3), counts):
        assert {k.split(".")[1] for k in m.params if k.startswith("enc0.blk")} == {f"blk{j}" for j in range(n)}


def test_layer_ablations_set_block_count():
    for n, name in ((1, "1-layer"), (2, "2-layers"), (3, "3-layers")):
        assert ablation_config(name).mdif_blocks_per_stage == n
    with pytest.raises(ValueError, match="mdsm2_mode"):
        ModelConfig(mdsm_enabled=False, mdsm2_mode=True).validate()
    with pytest.raises(ValueError, match="unknown"):
        ModelConfig.from_dict({"channels": 3})


def test_build_is_deterministic_and_seeded():
    a, b = build_model(ModelConfig(**TINY), 4), build_model(ModelConfig(**TINY), 4)
    c = build_model(ModelConfig(**TINY), 5)
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
    assert any(not np.array_equal(a.params[k], c.params[k]) for k in a.params if a.params[k].any())


def test_checkpoint_round_trip_is_bitwise(tmp_path):
    model = build_model(ModelConfig(**TINY), 0)
    model.params["head.w"] = np.random.default_rng(0).normal(size=model.params["head.w"].shape)
    ckpt = Checkpoint.from_model(model, step=17, seed=3)
    path = tmp_path / "m.ssfc"
    network.save_checkpoint(ckpt, path)
    back = network.load_checkpoint(path)
    assert back.config == ckpt.config and back.step == 17 and back.seed == 3
    assert list(back.params) == list(ckpt.params)
    assert all(back.params[k].tobytes() == ckpt.params[k].tobytes() for k in ckpt.params)
    assert network.checkpoint_bytes(back) == path.read_bytes()


def test_checkpoint_errors(tmp_path):
    ckpt = Checkpoint.from_model(build_model(ModelConfig(**TINY), 0))
    raw = network.checkpoint_bytes(ckpt)
    path = tmp_path / "bad.ssfc"
    path.write_bytes(b"XXXXX" + raw[5:])
    with pytest.raises(ValueError, match="bad magic"):
        network.load_checkpoint(path)
    path.write_bytes(raw[:-5])
    with pytest.raises(ValueError, match="truncated"):
        network.load_checkpoint(path)


def test_argmax_invariant_to_per_voxel_shift():
    rng = np.random.default_rng(0)
    logits = rng.normal(size=(4, 5, 5, 5))
    shift = rng.normal(size=(1, 5, 5, 5)) * 10
    assert np.array_equal(np.argmax(logits, axis=0), np.argmax(logits + shift, axis=0))
