import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from unlearn_forge.model import (
    BOS,
    EOS,
    MAGIC,
    AdamWState,
    CheckpointHeaderError,
    CheckpointShapeError,
    CheckpointTruncatedError,
    ContractError,
    Gradients,
    ModelConfig,
    NonFiniteGradientError,
    SequenceLengthError,
    Vocabulary,
    adamw_step,
    avg_correct_prob,
    batch_avg_correct_prob,
    batch_sequence_log_prob,
    forward,
    init_params,
    load_checkpoint,
    next_token_logprobs,
    pack_pairs,
    save_checkpoint,
    sequence_cross_entropy,
    sequence_log_prob,
    token_logprobs,
    value_and_grad,
    watch,
)


@given(st.text(max_size=40))
def test_vocabulary_round_trip(s):
    assert Vocabulary.decode(Vocabulary.encode(s)) == s


def test_vocabulary_drops_specials():
    assert Vocabulary.decode([104, 105, EOS]) == "hi"
    with pytest.raises(ValueError):
        Vocabulary.decode([400])


def test_forward_is_normalised(tiny_params):
    p = forward(tiny_params, [5, 9, 200, 3])
    assert p.shape == (4, Vocabulary.size)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(p > 0)


@given(st.lists(st.integers(0, 255), min_size=2, max_size=20), st.data())
@settings(max_examples=25, deadline=None)
def test_forward_is_causal(tokens, data):
    params = init_params(ModelConfig(embed_dim=8, n_layers=1, n_heads=2, context_len=24, seed=1,
                                     init_std=0.3), "double")
    k = data.draw(st.integers(1, len(tokens) - 1))
    changed = list(tokens)
    changed[k] = (changed[k] + 1) % 256
    a, b = forward(params, tokens), forward(params, changed)
    np.testing.assert_allclose(a[:k + 1], b[:k + 1], atol=1e-12)


def test_first_row_is_conditioned_on_bos_only(tiny_params):
    a = forward(tiny_params, [1, 2, 3])[0]
    b = forward(tiny_params, [7])[0]
    np.testing.assert_allclose(a, b, atol=1e-12)
    np.testing.assert_allclose(np.log(b), next_token_logprobs(tiny_params, []), atol=1e-12)


def test_sequence_scores_match_forward(tiny_params):
    x, y = [10, 11, 12], [40, 41]
    p = forward(tiny_params, x + y)
    true = [p[3, 40], p[4, 41]]
    assert sequence_log_prob(tiny_params, x, y) == pytest.approx(sum(map(math.log, true)), abs=1e-12)
    assert sequence_cross_entropy(tiny_params, x, y) == pytest.approx(-sum(map(math.log, true)), abs=1e-12)
    assert avg_correct_prob(tiny_params, x, y) == pytest.approx(np.mean(true), abs=1e-12)
    np.testing.assert_allclose(token_logprobs(tiny_params, x, y), np.log(true), atol=1e-12)


def test_padding_does_not_leak(tiny_params):
    pairs = [([1, 2], [3]), ([4, 5, 6, 7, 8], [9, 10, 11]), ([12], [13, 14])]
    bp = watch(tiny_params)
    batch = pack_pairs(pairs, tiny_params.config.context_len)
    lp = batch_sequence_log_prob(bp, batch).data
    avg = batch_avg_correct_prob(bp, batch).data
    for i, (x, y) in enumerate(pairs):
        assert lp[i] == pytest.approx(sequence_log_prob(tiny_params, x, y), abs=1e-12)
        assert avg[i] == pytest.approx(avg_correct_prob(tiny_params, x, y), abs=1e-12)


def test_pack_pairs_mask():
    b = pack_pairs([([1, 2], [3, 4, 5])])
    assert b.inputs[0].tolist() == [BOS, 1, 2, 3, 4]
    assert b.targets[0].tolist() == [1, 2, 3, 4, 5]
    assert b.mask[0].tolist() == [0, 0, 1, 1, 1]


def test_length_and_contract_errors(tiny_params):
    with pytest.raises(SequenceLengthError):
        forward(tiny_params, list(range(30)))
    with pytest.raises(SequenceLengthError):
        sequence_log_prob(tiny_params, list(range(20)), list(range(10)))
    with pytest.raises(ContractError):
        sequence_log_prob(tiny_params, [1], [])
    with pytest.raises(ContractError):
        value_and_grad(tiny_params, lambda bp: 1.0)


def test_single_precision_close_to_double(tiny_config):
    d = init_params(tiny_config, "double")
    s = d.astype("single")
    assert s[next(iter(s.tensors))].dtype == np.float32
    assert sequence_log_prob(s, [1, 2], [3, 4]) == pytest.approx(sequence_log_prob(d, [1, 2], [3, 4]), rel=1e-5)


def test_checkpoint_round_trip(tmp_path, tiny_params):
    path = tmp_path / "m.ckpt"
    save_checkpoint(tiny_params, path)
    back = load_checkpoint(path, tiny_params.config)
    assert back.to_bytes() == tiny_params.to_bytes()
    assert back.precision == "double"
    save_checkpoint(back, tmp_path / "again.ckpt")
    assert (tmp_path / "again.ckpt").read_bytes() == path.read_bytes()


def test_checkpoint_layout(tmp_path, tiny_params):
    path = tmp_path / "m.ckpt"
    save_checkpoint(tiny_params, path)
    raw = path.read_bytes()
    assert raw[:8] == MAGIC
    (n,) = struct.unpack("<Q", raw[8:16])
    assert len(raw) == 16 + n + 8 * tiny_params.num_parameters()


def test_checkpoint_errors(tmp_path, tiny_params):
    path = tmp_path / "m.ckpt"
    save_checkpoint(tiny_params, path)
    raw = path.read_bytes()
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"NOTMAGIC" + raw[8:])
    with pytest.raises(CheckpointHeaderError):
        load_checkpoint(bad)
    bad.write_bytes(raw[:-5])
    with pytest.raises(CheckpointTruncatedError):
        load_checkpoint(bad)
    other = ModelConfig(**{**tiny_params.config.to_dict(), "embed_dim": 12})
    with pytest.raises(CheckpointShapeError):
        load_checkpoint(path, other)


def test_model_config_rejects_unknown_keys():
    with pytest.raises(ValueError):
        ModelConfig.from_dict({"embed_dim": 8, "depth": 3})
    with pytest.raises(ValueError):
        ModelConfig(embed_dim=10, n_heads=3)


def _grads_like(params, value):
    g = Gradients(params)
    for t in g.tensors.values():
        t.fill(value)
    return g


def test_adamw_first_step_moves_by_lr(tiny_params):
    # after bias correction the first update is lr * sign(g) (up to eps)
    new, state = adamw_step(tiny_params, _grads_like(tiny_params, 0.5), AdamWState.zeros_like(tiny_params), 1e-2)
    for k in tiny_params.names():
        np.testing.assert_allclose(new[k] - tiny_params[k], -1e-2, rtol=1e-6)
    assert state.step == 1


def test_adamw_matches_reference_loop(tiny_params, rng):
    lr, b1, b2, eps, wd = 1e-3, 0.9, 0.99, 1e-8, 0.1
    params, state = tiny_params, AdamWState.zeros_like(tiny_params)
    name = params.names()[0]
    p = params[name].copy()
    m = np.zeros_like(p)
    v = np.zeros_like(p)
    for t in range(1, 4):
        g = Gradients(params)
        for k in g.tensors:
            g.tensors[k] = rng.normal(size=params[k].shape)
        params, state = adamw_step(params, g, state, lr, b1, b2, eps, wd)
        gg = g[name]
        m = b1 * m + (1 - b1) * gg
        v = b2 * v + (1 - b2) * gg * gg
        p = p - lr * wd * p - lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
    np.testing.assert_allclose(params[name], p, rtol=1e-12)


def test_adamw_decay_is_decoupled(tiny_params):
    new, _ = adamw_step(tiny_params, _grads_like(tiny_params, 0.0), AdamWState.zeros_like(tiny_params), 0.1,
                        weight_decay=0.5)
    for k in tiny_params.names():
        np.testing.assert_allclose(new[k], tiny_params[k] * 0.95, rtol=1e-12)


def test_adamw_rejects_non_finite(tiny_params):
    g = _grads_like(tiny_params, 0.0)
    g.tensors[tiny_params.names()[1]].reshape(-1)[0] = np.nan
    with pytest.raises(NonFiniteGradientError):
        adamw_step(tiny_params, g, AdamWState.zeros_like(tiny_params), 1e-3)


def test_training_reduces_loss(tiny_params):
    pairs = [([1, 2, 3], [4, 5, 6, EOS])]

    def loss(bp):
        return -batch_sequence_log_prob(bp, pack_pairs(pairs)).mean()

    params, state = tiny_params, AdamWState.zeros_like(tiny_params)
    first, _ = value_and_grad(params, loss)
    for _ in range(30):
        val, g = value_and_grad(params, loss)
        params, state = adamw_step(params, g, state, 1e-2)
    assert val < 0.5 * first
