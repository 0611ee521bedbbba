import hashlib

import numpy as np
import pytest

from evolve_ehr import model as M


def tiny_config(**kw):
    opts = dict(vocab_size=12, n_classes=3, d_model=8, n_heads=2, n_layers=1, max_seq_len=10, n_ages=20, n_t2f=6, dropout=0.0)
    opts.update(kw)
    return M.ModelConfig(**opts)


def random_seq(rng, T, vocab=12):
    codes = rng.integers(M.CODE_OFFSET, vocab, size=T)
    ages = np.sort(rng.integers(0, 20, size=T))
    t2f = np.sort(rng.integers(0, 6, size=T))[::-1]
    return M.InputSequence(codes, ages, t2f)


def test_parameter_count_matches_closed_form():
    for kw in ({}, {"n_layers": 3, "d_model": 12, "n_heads": 3}):
        cfg = tiny_config(**kw)
        assert M.EvolveModel(cfg).n_parameters() == cfg.n_parameters()


@pytest.mark.parametrize(
    "kw",
    [{"d_model": 10, "n_heads": 3}, {"vocab_size": 0}, {"mode": "bert"}, {"dropout": 1.0}, {"max_seq_len": 1}],
)
def test_invalid_config(kw):
    with pytest.raises(ValueError):
        tiny_config(**kw)


def test_evolve_forward_is_causal():
    rng = np.random.default_rng(0)
    model = M.EvolveModel(tiny_config(), seed=1, dtype=np.float64)
    seq = random_seq(rng, 8)
    full = model.forward(seq)
    assert full.shape == (8, 3)
    for t in range(1, 9):
        np.testing.assert_allclose(model.forward(seq.prefix(t)), full[:t], atol=1e-12)


def test_cls_mode_sees_whole_sequence():
    rng = np.random.default_rng(1)
    cfg = tiny_config(mode="cls")
    model = M.EvolveModel(cfg, seed=1, dtype=np.float64)
    seq = M.prepare_sequence(random_seq(rng, 5), cfg)
    assert seq.codes[0] == M.CLS_ID and len(seq) == 6
    out = model.forward(seq)
    assert out.shape == (1, 3)
    changed = M.InputSequence(seq.codes.copy(), seq.ages, seq.t2f)
    changed.codes[-1] = M.CODE_OFFSET + (changed.codes[-1] - M.CODE_OFFSET + 1) % 10
    assert not np.allclose(model.forward(changed), out)


def test_cls_mode_rejects_missing_cls_token():
    model = M.EvolveModel(tiny_config(mode="cls"))
    with pytest.raises(ValueError):
        model.forward(M.InputSequence([3, 4], [1, 2], [2, 1]))


def test_prepare_keeps_latest_codes_and_clips():
    cfg = tiny_config(max_seq_len=4)
    clips = M.ClipCounter()
    raw = M.InputSequence(np.arange(2, 9), [1, 2, 3, 4, 5, 25, 30], [9, 5, 4, 3, 2, 1, 0])
    out = M.prepare_sequence(raw, cfg, clips)
    assert out.codes.tolist() == [5, 6, 7, 8]
    assert out.ages.tolist() == [4, 5, 19, 19]
    assert out.positions.tolist() == [0, 1, 2, 3]
    assert (clips.ages, clips.t2f) == (2, 0)
    with pytest.raises(ValueError):
        M.prepare_sequence(M.InputSequence([], [], []), cfg)


def test_sequence_validation_errors():
    model = M.EvolveModel(tiny_config(max_seq_len=3))
    with pytest.raises(ValueError, match="max_seq_len"):
        model.forward(M.InputSequence([2, 3, 4, 5], [1, 1, 1, 1], [0, 0, 0, 0]))
    with pytest.raises(ValueError, match="ages"):
        model.forward(M.InputSequence([2, 3], [5, 4], [0, 0]))
    with pytest.raises(ValueError, match="t2f"):
        model.forward(M.InputSequence([2, 3], [4, 5], [0, 1]))
    with pytest.raises(ValueError):
        M.InputSequence([2, 3], [4], [0, 0])


def test_padding_does_not_change_predictions():
    rng = np.random.default_rng(2)
    model = M.EvolveModel(tiny_config(), seed=3, dtype=np.float64)
    seqs = [random_seq(rng, T) for T in (3, 7, 1, 10)]
    batched = model.predict_series(seqs, batch_size=4)
    for s, b in zip(seqs, batched):
        np.testing.assert_allclose(b, model.forward(s), atol=1e-12)
    np.testing.assert_allclose(model.predict_final(seqs), np.stack([b[-1] for b in batched]))


def test_pad_sequences_layout():
    seqs = [M.InputSequence([2, 3], [1, 2], [1, 0]), M.InputSequence([4], [5], [0])]
    b = M.pad_sequences(seqs)
    assert b["codes"].tolist() == [[2, 3], [4, M.PAD_ID]]
    assert b["lengths"].tolist() == [2, 1]


def test_attention_mask_modes():
    assert M.attention_mask(3, "evolve").tolist() == [[True, False, False], [True, True, False], [True, True, True]]
    assert M.attention_mask(2, "cls").all()
    with pytest.raises(ValueError):
        M.attention_mask(2, "other")


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    model = M.EvolveModel(tiny_config(), seed=4)
    a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    M.save_checkpoint(model, a, extra={"mode": "evolve"})
    loaded = M.load_checkpoint(a)
    M.save_checkpoint(loaded, b, extra={"mode": "evolve"})
    assert hashlib.sha256(a.read_bytes()).digest() == hashlib.sha256(b.read_bytes()).digest()
    for k, v in model.state_dict().items():
        np.testing.assert_array_equal(v, loaded.state_dict()[k])
    assert M.read_checkpoint(a)[2] == {"mode": "evolve"}


def test_checkpoint_corruption_detected(tmp_path):
    path = tmp_path / "m.ckpt"
    M.save_checkpoint(M.EvolveModel(tiny_config()), path)
    raw = path.read_bytes()
    (tmp_path / "bad.ckpt").write_bytes(b"XXXX" + raw[4:])
    (tmp_path / "long.ckpt").write_bytes(raw + b"\0")
    with pytest.raises(ValueError, match="magic"):
        M.load_checkpoint(tmp_path / "bad.ckpt")
    with pytest.raises(ValueError, match="trailing"):
        M.load_checkpoint(tmp_path / "long.ckpt")


def test_state_dict_mismatch():
    model = M.EvolveModel(tiny_config())
    state = model.state_dict()
    state.pop("head.bias")
    with pytest.raises(ValueError, match="missing"):
        model.load_state_dict(state)


def test_astype_keeps_values():
    model = M.EvolveModel(tiny_config(), seed=5)
    m64 = model.astype(np.float64)
    seq = random_seq(np.random.default_rng(5), 6)
    np.testing.assert_allclose(m64.forward(seq), model.forward(seq), atol=1e-5)
