import numpy as np
import pytest

from multinav.autodiff import Tape, constant, finite_diff_check
from multinav.model import EmptySequence, ModelConfig, NavModel
from multinav.world import DirectionOption

SOFTMAX_1_0 = (0.7310585786300049, 0.2689414213699951)


def tiny_cfg(**kw):
    base = dict(vocab_size=12, num_houses=4, view_dim=6, word_dim=3, lang_hidden=2,
                lang_layers=2, traj_hidden=4, traj_layers=2, attn_dim=3,
                classifier_hidden=5)
    base.update(kw)
    return ModelConfig(**base)


def make_options(rng, count, view_dim, with_stop=True):
    opts = [DirectionOption(i + 1, rng.normal(size=view_dim)) for i in range(count)]
    if with_stop:
        opts.append(DirectionOption(None, np.zeros(view_dim)))
    return opts


def test_language_states_shape_with_default_hidden_sizes():
    # defaults: 2 x 256 per-direction cells concatenated -> 512 wide
    cfg = ModelConfig(vocab_size=30, num_houses=3, view_dim=12)
    model = NavModel(cfg, np.random.default_rng(0))
    enc = model.encode_language(Tape(), [5])
    assert enc.states.shape == (1, 512)


def test_trajectory_state_dim_default():
    cfg = ModelConfig(vocab_size=10, num_houses=3, view_dim=12)
    model = NavModel(cfg, np.random.default_rng(0))
    tape = Tape()
    state = model.initial_state(tape)
    _, _, state = model.encode_panorama_step(tape, state, np.zeros((36, 12)))
    assert state.h_top.shape == (512,)


def test_zero_parameters_give_zero_states():
    model = NavModel(tiny_cfg(), np.random.default_rng(1))
    model.zero_parameters()
    enc = model.encode_language(Tape(), [1, 2, 3])
    assert np.array_equal(enc.states.data, np.zeros_like(enc.states.data))


def test_empty_sequence_rejected():
    model = NavModel(tiny_cfg(), np.random.default_rng(1))
    with pytest.raises(EmptySequence):
        model.encode_language(Tape(), [])


def _np_sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _np_lstm_stream(xs, w_ih, w_hh, b, reverse):
    hid = w_hh.shape[0]
    h = np.zeros(hid)
    c = np.zeros(hid)
    out = [None] * len(xs)
    order = range(len(xs) - 1, -1, -1) if reverse else range(len(xs))
    for t in order:
        z = xs[t] @ w_ih + h @ w_hh + b
        i, f = _np_sigmoid(z[:hid]), _np_sigmoid(z[hid:2 * hid])
        g, o = np.tanh(z[2 * hid:3 * hid]), _np_sigmoid(z[3 * hid:])
        c = f * c + i * g
        h = o * np.tanh(c)
        out[t] = h
    return out


def _np_encode(model, ids):
    cfg = model.cfg
    xs = [model.params["embed"].data[i] for i in ids]
    for li in range(cfg.lang_layers):
        streams = {}
        for direction, rev in (("fwd", False), ("bwd", True)):
            base = f"lang.l{li}.{direction}"
            streams[direction] = _np_lstm_stream(
                xs, model.params[f"{base}.w_ih"].data,
                model.params[f"{base}.w_hh"].data,
                model.params[f"{base}.b"].data, rev)
        xs = [np.concatenate([f, b]) for f, b in zip(streams["fwd"], streams["bwd"])]
    return np.stack(xs)


def test_bilstm_matches_hand_unrolled_oracle():
    model = NavModel(tiny_cfg(), np.random.default_rng(3))
    for ids in ([4, 7], [7, 4], [1, 2, 3, 4]):
        enc = model.encode_language(Tape(), ids)
        assert np.allclose(enc.states.data, _np_encode(model, ids), rtol=1e-10)


def test_backward_stream_alignment_under_input_reversal():
    # backward states on [a, b] equal forward states on [b, a], reversed
    model = NavModel(tiny_cfg(lang_layers=1), np.random.default_rng(4))
    base = "lang.l0"
    emb = model.params["embed"].data
    xs = [emb[4], emb[7]]
    bwd = _np_lstm_stream(xs, model.params[f"{base}.bwd.w_ih"].data,
                          model.params[f"{base}.bwd.w_hh"].data,
                          model.params[f"{base}.bwd.b"].data, reverse=True)
    fwd_rev = _np_lstm_stream(xs[::-1], model.params[f"{base}.bwd.w_ih"].data,
                              model.params[f"{base}.bwd.w_hh"].data,
                              model.params[f"{base}.bwd.b"].data, reverse=False)
    assert np.allclose(bwd[0], fwd_rev[1], rtol=1e-12)
    assert np.allclose(bwd[1], fwd_rev[0], rtol=1e-12)


def test_panorama_attention_with_identical_rows_returns_the_row():
    model = NavModel(tiny_cfg(), np.random.default_rng(5))
    tape = Tape()
    row = np.arange(6, dtype=float) / 3.0
    pan = np.tile(row, (36, 1))
    v_t, _, _ = model.encode_panorama_step(tape, model.initial_state(tape), pan)
    assert np.allclose(v_t.data, row, rtol=1e-12)


def test_zero_initial_query_pools_uniformly():
    model = NavModel(tiny_cfg(), np.random.default_rng(6))
    tape = Tape()
    pan = np.random.default_rng(0).normal(size=(36, 6))
    v_t, _, _ = model.encode_panorama_step(tape, model.initial_state(tape), pan)
    assert np.allclose(v_t.data, pan.mean(axis=0), rtol=1e-10)


def run_step(model, tape, ids, pan, options):
    enc = model.encode_language(tape, ids)
    state = model.initial_state(tape)
    _, pan_t, state = model.encode_panorama_step(tape, state, pan)
    return enc, state, pan_t, model.predict_action(tape, state, enc, pan_t, options)


def test_single_option_gets_probability_one():
    model = NavModel(tiny_cfg(), np.random.default_rng(7))
    rng = np.random.default_rng(0)
    tape = Tape()
    _, _, _, dist = run_step(model, tape, [3, 4], rng.normal(size=(36, 6)),
                             make_options(rng, 0, 6))
    assert dist.probs.data == pytest.approx([1.0])


def test_action_distribution_normalized():
    rng = np.random.default_rng(8)
    for trial in range(5):
        model = NavModel(tiny_cfg(), np.random.default_rng(trial))
        tape = Tape()
        _, _, _, dist = run_step(model, tape, [1, 2, 3], rng.normal(size=(36, 6)),
                                 make_options(rng, trial + 1, 6))
        assert (dist.probs.data >= 0).all()
        assert abs(dist.probs.data.sum() - 1.0) < 1e-6
        assert np.allclose(np.exp(dist.log_probs.data), dist.probs.data, rtol=1e-10)


def test_bilinear_scores_hand_case():
    # frozen weights chosen so the projected context is [1, 0] and the two
    # direction projections are the basis vectors: probs = softmax([1, 0])
    cfg = tiny_cfg(lang_hidden=1, lang_layers=1, traj_hidden=1, traj_layers=1,
                   view_dim=2, attn_dim=2)
    model = NavModel(cfg, np.random.default_rng(9))
    model.zero_parameters()
    model.params["act.w_ctx"].data[3] = [0.5, 0.0]  # c_vis rows of [h; c_text; c_vis]
    model.params["act.w_dir"].data = np.eye(2)
    tape = Tape()
    pan = np.tile([2.0, 0.5], (36, 1))
    options = [DirectionOption(1, np.array([1.0, 0.0])),
               DirectionOption(2, np.array([0.0, 1.0]))]
    _, _, _, dist = run_step(model, tape, [1], pan, options)
    assert dist.probs.data == pytest.approx(SOFTMAX_1_0, abs=1e-4)


def test_permuting_options_permutes_probabilities():
    model = NavModel(tiny_cfg(), np.random.default_rng(10))
    rng = np.random.default_rng(1)
    pan = rng.normal(size=(36, 6))
    options = make_options(rng, 3, 6)
    tape = Tape()
    _, _, _, dist = run_step(model, tape, [2, 5], pan, options)
    perm = [2, 0, 3, 1]
    tape2 = Tape()
    _, _, _, dist2 = run_step(model, tape2, [2, 5], pan, [options[i] for i in perm])
    assert np.allclose(dist2.probs.data, dist.probs.data[perm], rtol=1e-10)


def test_classifier_uniform_under_zero_weights():
    model = NavModel(tiny_cfg(num_houses=8), np.random.default_rng(11))
    model.zero_parameters()
    tape = Tape()
    state = model.initial_state(tape)
    _, _, state = model.encode_panorama_step(tape, state, np.zeros((36, 6)))
    probs, _ = model.classify_environment(tape, state)
    assert probs.shape == (8,)
    assert np.allclose(probs.data, np.full(8, 1 / 8))


def test_classifier_reversal_scales_trunk_gradients_by_minus_lambda():
    model = NavModel(tiny_cfg(), np.random.default_rng(12))
    rng = np.random.default_rng(2)
    pan = rng.normal(size=(36, 6))

    def env_grads(reverse):
        tape = Tape()
        state = model.initial_state(tape)
        for _ in range(2):
            _, _, state = model.encode_panorama_step(tape, state, pan)
        _, logp = model.classify_environment(tape, state, reverse=reverse, lam=1.3)
        loss = tape.scale(tape.pick(logp, 1), -1.0)
        return tape.backward(loss, dict(model.params.items()))

    reversed_grads = {k: v.copy() for k, v in env_grads(True).items()}
    plain_grads = env_grads(False)
    for name in model.params.names():
        if name.startswith("cls."):
            assert np.allclose(reversed_grads[name], plain_grads[name], rtol=1e-12)
        else:
            assert np.allclose(reversed_grads[name], -1.3 * plain_grads[name],
                               rtol=1e-9, atol=1e-15)


def test_lambda_zero_matches_detached_classifier_head():
    model = NavModel(tiny_cfg(), np.random.default_rng(13))
    rng = np.random.default_rng(3)
    pan = rng.normal(size=(36, 6))
    options = make_options(rng, 2, 6)

    def nav_grads(with_env):
        tape = Tape()
        enc = model.encode_language(tape, [3, 1])
        state = model.initial_state(tape)
        _, pan_t, state = model.encode_panorama_step(tape, state, pan)
        dist = model.predict_action(tape, state, enc, pan_t, options)
        loss = tape.scale(tape.pick(dist.log_probs, 0), -1.0)
        if with_env:
            _, logp = model.classify_environment(tape, state, reverse=True, lam=0.0)
            loss = tape.add(loss, tape.scale(tape.pick(logp, 2), -1.0))
        return tape.backward(loss, dict(model.params.items()))

    with_env = {k: v.copy() for k, v in nav_grads(True).items()}
    detached = nav_grads(False)
    for name in model.params.names():
        if not name.startswith("cls."):
            assert np.allclose(with_env[name], detached[name], rtol=1e-12, atol=0)


def test_shared_encoder_uses_one_parameter_set():
    shared = NavModel(tiny_cfg(share_language_encoder=True), np.random.default_rng(14))
    assert shared._lang_prefix("vln") == shared._lang_prefix("ndh")
    separate = NavModel(tiny_cfg(share_language_encoder=False), np.random.default_rng(14))
    assert separate._lang_prefix("vln") != separate._lang_prefix("ndh")
    assert shared.params.entry_count() < separate.params.entry_count()


def test_two_step_episode_full_finite_diff():
    cfg = tiny_cfg(vocab_size=6, num_houses=3, view_dim=4, word_dim=2, lang_hidden=2,
                   lang_layers=1, traj_hidden=3, traj_layers=1, attn_dim=2,
                   classifier_hidden=3)
    model = NavModel(cfg, np.random.default_rng(15))
    rng = np.random.default_rng(4)
    tape = Tape()
    enc = model.encode_language(tape, [1, 3, 2])
    state = model.initial_state(tape)
    terms = []
    for step_idx in range(2):
        pan = rng.normal(size=(5, 4))  # few view rows keep the graph small
        _, pan_t, state = model.encode_panorama_step(tape, state, pan)
        dist = model.predict_action(tape, state, enc, pan_t,
                                    make_options(rng, 2, 4))
        terms.append(tape.scale(tape.pick(dist.log_probs, step_idx), -1.0))
        _, logp = model.classify_environment(tape, state, reverse=False)
        terms.append(tape.scale(tape.pick(logp, 1), -0.5))
    loss = tape.add_n(terms)
    err = finite_diff_check(tape, loss, dict(model.params.items()))
    assert err < 1e-3
