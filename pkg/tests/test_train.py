import os

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import haris.train as tr
from haris import cli
from haris.config import Config, parse_config, tiny_config
from haris.model import build_model
from haris.synthetic import EncodedSample, encode_image_stub, encode_text_stub, generate_scene, object_mask
from haris.tensor import ContractError, Parameter

TINY_TEXT = """\
# tiny desk run
image_size = 16
dim = 8
text_dim = 8
decoder_layers = 1
n_train = 6
n_val = 3
batch_size = 2
epochs = 2
decay_epoch = 1
steps_per_epoch = 2
"""


@pytest.fixture
def tiny_cfg_file(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY_TEXT)
    return str(path)


@pytest.fixture(scope="module")
def tiny_run():
    return tr.train(parse_config(TINY_TEXT, apply_env=False), config_echo=TINY_TEXT)


def adam_reference(x0, grad_fn, steps, lr, b1=0.9, b2=0.999, eps=1e-8):
    x, m, v = list(x0), [0.0] * len(x0), [0.0] * len(x0)
    for t in range(1, steps + 1):
        g = grad_fn(x)
        for i in range(len(x)):
            m[i] = b1 * m[i] + (1 - b1) * g[i]
            v[i] = b2 * v[i] + (1 - b2) * g[i] ** 2
            mh, vh = m[i] / (1 - b1**t), v[i] / (1 - b2**t)
            x[i] -= lr * mh / (vh**0.5 + eps)
    return x


# ---------------------------------------------------------------- optimiser


def test_adam_zero_gradient():
    p = Parameter("p", np.array([1.0, -2.0]))
    state = tr.AdamState()
    tr.adam_step([p], [np.array([0.5, 0.5])], state, 0.1)
    m_before = state.m["p"].copy()
    x_before = p.data.copy()
    tr.adam_step([p], [np.zeros(2)], state, 0.0)
    np.testing.assert_array_equal(p.data, x_before)
    np.testing.assert_allclose(state.m["p"], 0.9 * m_before, rtol=1e-15)
    q = Parameter("q", np.array([3.0]))
    tr.adam_step([q], [np.zeros(1)], tr.AdamState(), 0.1)
    assert q.data[0] == 3.0


@pytest.mark.parametrize("g", [0.37, -12.0])
def test_adam_first_step_is_lr(g):
    p = Parameter("p", np.array([0.0]))
    tr.adam_step([p], [np.array([g])], tr.AdamState(), 1e-3)
    assert p.data[0] == pytest.approx(-np.sign(g) * 1e-3, rel=1e-6)


def test_adam_quadratic_matches_reference():
    a = np.array([1.0, 3.0, 0.5])
    x0 = np.array([2.0, -1.0, 0.3])

    def grad(x):
        return [2 * a[i] * (x[i] - 1.0) for i in range(3)]

    p = Parameter("p", x0.copy())
    state = tr.AdamState()
    for _ in range(5):
        tr.adam_step([p], [np.array(grad(p.data))], state, 0.05)
    np.testing.assert_allclose(p.data, adam_reference(x0, grad, 5, 0.05), rtol=0, atol=1e-12)
    assert state.t == 5


def test_adam_frozen_and_shape_errors():
    frozen = Parameter("f", np.ones(2), trainable=False)
    tr.adam_step([frozen], [np.ones(2)], tr.AdamState(), 1.0)
    assert (frozen.data == 1).all()
    p = Parameter("p", np.ones(2))
    with pytest.raises(ContractError):
        tr.adam_step([p], [np.ones(3)], tr.AdamState(), 0.1)
    with pytest.raises(ContractError):
        tr.adam_step([p], [], tr.AdamState(), 0.1)


def test_lr_schedule_step_decay():
    cfg = Config(lr=1e-4, decay_factor=0.1, decay_epoch=30, epochs=50)
    assert tr.lr_at(29, cfg) == 1e-4
    assert tr.lr_at(30, cfg) == pytest.approx(1e-5, rel=1e-12)
    flat = cfg.replace(decay_factor=1.0)
    assert {tr.lr_at(e, flat) for e in range(50)} == {1e-4}
    with pytest.raises(ContractError):
        tr.lr_at(50, cfg)


@given(st.floats(0.0, 1.0), st.integers(1, 40), st.floats(1e-6, 1.0))
def test_lr_non_increasing(decay, decay_epoch, lr):
    cfg = Config(lr=lr, decay_factor=decay, decay_epoch=decay_epoch, epochs=decay_epoch + 5)
    rates = [tr.lr_at(e, cfg) for e in range(cfg.epochs)]
    assert all(b <= a for a, b in zip(rates, rates[1:]))


# ---------------------------------------------------------------- config


def test_config_parse_and_errors(monkeypatch):
    monkeypatch.delenv("HARIS_SEED", raising=False)
    cfg = parse_config("lr = 0.01  # comment\nwo_fb = true\n")
    assert cfg.lr == 0.01 and cfg.wo_fb and not cfg.wo_hs
    assert parse_config(cfg.to_text()) == cfg
    for bad in ("nonsense = 1", "lr 0.1", "lr = fast", "lr = -1", "epochs = 10\ndecay_epoch = 10",
                "wo_fb = maybe"):
        with pytest.raises(ContractError):
            parse_config(bad)


def test_seed_environment_override(monkeypatch):
    monkeypatch.setenv("HARIS_SEED", "7")
    cfg = parse_config("stub_seed = 99\n")
    assert (cfg.data_seed, cfg.init_seed, cfg.stub_seed) == (7, 7, 99)
    monkeypatch.setenv("HARIS_SEED", "x")
    with pytest.raises(ContractError):
        parse_config("")


# ---------------------------------------------------------------- checkpoints


def test_checkpoint_round_trip_is_byte_identical(tiny_run, tmp_path):
    raw = tr.checkpoint_bytes(tiny_run.checkpoint)
    assert raw[:8] == b"HARISCKP" and raw[8:12] == (1).to_bytes(4, "little")
    path = str(tmp_path / "a.bin")
    tr.save_checkpoint(path, tiny_run.checkpoint)
    again = tr.load_checkpoint(path)
    assert tr.checkpoint_bytes(again) == raw
    assert again.config_echo == TINY_TEXT
    assert again.step == 4 and again.adam.t == 4
    model, _ = tr.restore_model(again)
    for p in model.parameters():
        assert p.data.tobytes() == tiny_run.checkpoint.params[p.name].tobytes()


def test_checkpoint_corruption(tiny_run):
    raw = tr.checkpoint_bytes(tiny_run.checkpoint)
    bad_version = raw[:8] + (2).to_bytes(4, "little") + raw[12:]
    for blob in (b"NOTACKPT" + raw[8:], bad_version, raw[:-5], raw + b"\0"):
        with pytest.raises(tr.CheckpointError):
            tr.parse_checkpoint(blob)
    with pytest.raises(tr.CheckpointError, match="version"):
        tr.parse_checkpoint(bad_version)


def test_zero_epochs_is_initialisation():
    cfg = tiny_config(epochs=0)
    res = tr.train(cfg)
    init = build_model(cfg)
    assert res.history == [] and res.checkpoint.step == 0
    for p in init.parameters():
        assert res.checkpoint.params[p.name].tobytes() == p.data.tobytes()


def test_short_run_keeps_frozen_and_moves_trainable(tiny_run):
    init = build_model(tiny_run.checkpoint.config())
    for p in init.parameters():
        same = tiny_run.checkpoint.params[p.name].tobytes() == p.data.tobytes()
        if not p.trainable:
            assert same, p.name
    moved = [p.name for p in init.trainable()
             if tiny_run.checkpoint.params[p.name].tobytes() != p.data.tobytes()]
    assert "decoder.query_token" in moved and any(n.startswith("fusion.blocks.0") for n in moved)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nan_loss_aborts(monkeypatch):
    real = tr.build_model

    def poisoned(cfg):
        model = real(cfg)
        model.decoder.query_token.data[0, 0] = np.nan
        return model

    monkeypatch.setattr(tr, "build_model", poisoned)
    with pytest.raises(tr.NaNLossError) as info:
        tr.train(tiny_config())
    assert info.value.step == 0


# ---------------------------------------------------------------- evaluation


def test_empty_prediction_model_has_zero_cumulative_iou():
    cfg = tiny_config()
    model = build_model(cfg)
    # decoder layers zeroed so the query passes through; a negative query and a
    # constant positive head output make every logit negative
    for p in model.parameters():
        if p.name.startswith("decoder.layers"):
            p.data[...] = 0.0
    model.decoder.query_token.data[...] = -1.0
    last = model.decoder.head[-1]
    last.bn_scale.data[...] = 0.0
    last.bn_shift.data[...] = 1.0
    samples = tr.load_split(cfg, "val", model, 5)
    rep = tr.evaluate_samples(model, samples, cfg)
    assert rep.cumulative_iou == 0.0 and rep.mean_iou == 0.0


def test_untrained_model_below_half():
    cfg = Config()
    model = build_model(cfg)
    rep = tr.evaluate_samples(model, tr.load_split(cfg, "val", model, 50), cfg)
    assert rep.mean_iou < 0.5


def test_split_seeds_disjoint():
    cfg = Config()
    seeds = {s: tr.split_seed(cfg, s) for s in ("train", "val", "test")}
    assert seeds == {"train": 0, "val": 10**6, "test": 2 * 10**6}
    with pytest.raises(ContractError):
        tr.split_seed(cfg, "dev")


# ---------------------------------------------------------------- attention dumps


def test_normalize_map():
    np.testing.assert_array_equal(tr.normalize_map(np.array([[0.0, 0.5], [1.0, 0.25]])),
                                  [[0, 128], [255, 64]])
    assert (tr.normalize_map(np.full((3, 3), 0.7)) == 128).all()


def test_single_word_round_one_maps_are_mid_gray():
    cfg = tiny_config()
    model = build_model(cfg)
    scene, image = generate_scene(3, cfg.image_size)
    f_w, f_s = encode_text_stub(["red"], model.stubs)
    sample = EncodedSample(3, *encode_image_stub(image, model.stubs), f_w, f_s,
                           object_mask(scene.objects[0], cfg.image_size), ["red"], scene)
    maps = tr.attention_maps(model, cfg, sample)
    assert sorted(maps) == [(b, r, 0) for b in (1, 2, 3) for r in (1, 2)]
    for b in (1, 2, 3):
        assert (tr.normalize_map(maps[(b, 1, 0)]) == 128).all()


def test_dump_attention_files(tiny_run, tmp_path):
    ck = str(tmp_path / "ck.bin")
    tr.save_checkpoint(ck, tiny_run.checkpoint)
    a = tr.dump_attention(ck, 1, str(tmp_path / "a"))
    b = tr.dump_attention(ck, 1, str(tmp_path / "b"))
    cfg = tiny_run.checkpoint.config()
    tokens = tr.load_split(cfg, "val", build_model(cfg), 2)[1].tokens
    want = {f"block{i}_round{r}_word{j}_{t}.pgm" for i in (1, 2, 3) for r in (1, 2)
            for j, t in enumerate(tokens)}
    assert {os.path.basename(p) for p in a} == want
    for pa, pb in zip(a, b):
        with open(pa, "rb") as fa, open(pb, "rb") as fb:
            data = fa.read()
            assert data == fb.read()
        assert data.startswith(b"P5\n4 4\n255\n")
    with pytest.raises(ContractError):
        tr.dump_attention(ck, 3, str(tmp_path / "c"))


# ---------------------------------------------------------------- ablation


def test_parse_flags():
    assert tr.parse_flags("wo_fb, w/o HS,,wo_fb") == ["wo_fb", "wo_hs"]
    assert tr.parse_flags("") == []
    with pytest.raises(ContractError):
        tr.parse_flags("wo_everything")


def test_ablate_empty_flags_gives_baseline_only(tmp_path):
    out = tmp_path / "abl.csv"
    res = tr.ablate(tiny_config(), [], seeds=(0, 1), out_path=str(out))
    lines = out.read_text().splitlines()
    assert list(res) == ["baseline"]
    assert lines[0] == "variant,seeds,n_samples,mean_iou,cumulative_iou,pr70,pr80,pr90"
    assert len(lines) == 2 and lines[1].startswith("baseline,0 1,2,")


# ---------------------------------------------------------------- command line


def test_cli_train_eval_round_trip(tiny_cfg_file, tmp_path, capsys, monkeypatch):
    monkeypatch.delenv("HARIS_SEED", raising=False)
    out = str(tmp_path / "run")
    assert cli.main(["train", "--config", tiny_cfg_file, "--out", out]) == 0
    printed = capsys.readouterr().out.splitlines()
    csv = open(os.path.join(out, "metrics.csv")).read().splitlines()
    assert csv[0] == printed[0] == "n_samples,mean_iou,cumulative_iou,pr70,pr80,pr90"
    assert len(csv) == 3 and printed[1] == csv[-1]
    assert all(len(f.split(".")[1]) == 6 for f in csv[-1].split(",")[1:])
    ck = os.path.join(out, "checkpoint.bin")
    assert tr.load_checkpoint(ck).config_echo == TINY_TEXT
    assert cli.main(["eval", "--checkpoint", ck, "--split", "val"]) == 0
    assert capsys.readouterr().out.splitlines()[1] == csv[-1]
    assert cli.main(["dump-attention", "--checkpoint", ck, "--sample", "0",
                     "--out", str(tmp_path / "maps")]) == 0


def test_cli_gen_data(tmp_path):
    assert cli.main(["gen-data", "--n", "12", "--seed", "5", "--out", str(tmp_path)]) == 0
    train_ids = [ln.split()[0] for ln in (tmp_path / "train" / "samples.txt").read_text().splitlines()]
    val_ids = [ln.split()[0] for ln in (tmp_path / "val" / "samples.txt").read_text().splitlines()]
    assert train_ids == [str(s) for s in range(5, 17)]
    assert val_ids == [str(10**6 + 5)]


def test_cli_exit_codes(tiny_cfg_file, tmp_path, monkeypatch):
    monkeypatch.delenv("HARIS_SEED", raising=False)
    bad_cfg = tmp_path / "bad.cfg"
    bad_cfg.write_text("unknown_key = 3\n")
    corrupt = tmp_path / "corrupt.bin"
    corrupt.write_bytes(b"HARISCKP\x07\0\0\0")
    missing = str(tmp_path / "nope")
    assert cli.main(["train", "--config", str(bad_cfg), "--out", str(tmp_path / "x")]) == 1
    assert cli.main(["train", "--config", missing, "--out", str(tmp_path / "x")]) == 2
    assert cli.main(["eval", "--checkpoint", missing]) == 2
    assert cli.main(["eval", "--checkpoint", str(corrupt)]) == 1
    assert cli.main(["gen-data", "--n", "0", "--out", str(tmp_path)]) == 1
    assert cli.main(["ablate", "--config", tiny_cfg_file, "--flags", "bogus", "--out", "x.csv"]) == 1
    with pytest.raises(SystemExit) as info:
        cli.main(["train", "--config"])
    assert info.value.code == 1
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert cli.main(["gen-data", "--n", "1", "--out", str(blocker / "sub")]) == 2
