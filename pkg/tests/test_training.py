"""Twin-model training: EMA algebra, stop-gradients, SCST mechanics, resume."""

import numpy as np
import pytest

from gradcheck import check_gradients
from meancap import tensor as T
from meancap import training as tr
from meancap.assignment import BagEmbedder
from meancap.checkpoint import load_checkpoint
from meancap.data import caption_corpus, generate_synthetic_dataset, split_dataset
from meancap.decoding import Hypothesis, beam_search
from meancap.fastdecode import FastDecoder
from meancap.metrics import DocumentFrequency
from meancap.model import ModelConfig, decode_logits, encode, init_params
from meancap.rng import KeyedRng, ROLE_BATCH, ROLE_ONLINE, generator
from meancap.tokenizer import EOS_ID, build_vocab, tokenize


def tiny_setup(seed=3, num_images=10, model_dim=16, **cfg_over):
    samples = generate_synthetic_dataset(seed=seed, num_images=num_images,
                                         objects_per_image=(1, 2), refs_per_image=3)
    vocab = build_vocab(caption_corpus(), 100)
    defaults = dict(vocab_size=len(vocab.tokens), model_dim=model_dim,
                    feedforward_dim=2 * model_dim, num_heads=2,
                    num_encoder_layers=1, num_decoder_layers=1,
                    num_memory_slots=2, max_length=24)
    defaults.update(cfg_over)
    return samples, vocab, ModelConfig(**defaults)


def snapshot(params):
    return {n: p.data.tobytes() for n, p in params.items()}


# ---------------------------------------------------------------------------
# schedule and optimizer
# ---------------------------------------------------------------------------


def test_noam_schedule_shape():
    d, w = 64, 400
    assert tr.noam_lr(1, d, w) == d ** -0.5 * w ** -1.5
    assert tr.noam_lr(w, d, w) == d ** -0.5 * w ** -0.5  # both branches meet here
    before = [tr.noam_lr(s, d, w) for s in range(1, w + 1)]
    assert all(a < b for a, b in zip(before, before[1:]))
    assert tr.noam_lr(w + 1, d, w) < tr.noam_lr(w, d, w) > tr.noam_lr(4 * w, d, w)
    with pytest.raises(ValueError):
        tr.noam_lr(0, d, w)


def test_adam_zero_gradient_is_identity():
    rng = np.random.default_rng(0)
    p = T.parameter(rng.normal(size=(5, 3)).astype(np.float32))
    before = p.data.tobytes()
    m = {"p": np.zeros_like(p.data)}
    v = {"p": np.zeros_like(p.data)}
    tr.adam_update({"p": p}, m, v, t=1, lr=1e-3)
    assert p.data.tobytes() == before
    assert not m["p"].any() and not v["p"].any()


def test_adam_matches_manual_reference():
    rng = np.random.default_rng(1)
    x = rng.normal(size=7)
    g1, g2 = rng.normal(size=7), rng.normal(size=7)
    p = T.parameter(x.copy())
    m = {"p": np.zeros(7)}
    v = {"p": np.zeros(7)}
    ref, rm, rv = x.copy(), np.zeros(7), np.zeros(7)
    for t, g in [(1, g1), (2, g2)]:
        p.grad = g.copy()
        tr.adam_update({"p": p}, m, v, t=t, lr=0.01)
        rm = 0.9 * rm + 0.1 * g
        rv = 0.98 * rv + 0.02 * g * g
        ref = ref - 0.01 * (rm / (1 - 0.9 ** t)) / (np.sqrt(rv / (1 - 0.98 ** t)) + 1e-9)
    assert np.allclose(p.data, ref, rtol=0, atol=1e-15)


# ---------------------------------------------------------------------------
# EMA: closed form and ordering
# ---------------------------------------------------------------------------


def unrolled_ema(theta_t0, onlines, lam):
    """theta_t after T steps, written as the explicit weighted sum."""
    steps = len(onlines)
    acc = (lam ** steps) * theta_t0
    for s, o in enumerate(onlines, start=1):
        acc = acc + (1.0 - lam) * (lam ** (steps - s)) * o
    return acc


@pytest.mark.parametrize("lam", [0.0, 0.5, 0.999, 1.0])
@pytest.mark.parametrize("steps", [1, 5, 50])
def test_ema_closed_form(lam, steps):
    rng = np.random.default_rng(1000 * steps + int(lam * 10))
    shapes = {"w": (3, 4), "b": (6,)}
    target = {n: T.parameter(rng.normal(size=s)) for n, s in shapes.items()}
    online = {n: T.parameter(rng.normal(size=s)) for n, s in shapes.items()}
    t0 = {n: p.data.copy() for n, p in target.items()}
    t0_bytes = {n: p.data.tobytes() for n, p in target.items()}
    history = {n: [] for n in shapes}
    for _ in range(steps):
        for n in shapes:
            online[n].data = rng.normal(size=shapes[n])
            history[n].append(online[n].data.copy())
        tr.ema_update(target, online, lam)
    for n in shapes:
        want = unrolled_ema(t0[n], history[n], lam)
        assert np.max(np.abs(target[n].data - want)) < 1e-12
        if lam == 1.0:
            assert target[n].data.tobytes() == t0_bytes[n]
        if lam == 0.0:
            assert target[n].data.tobytes() == history[n][-1].tobytes()


def test_ema_momentum_validated():
    p = {"x": T.parameter(np.ones(2))}
    with pytest.raises(ValueError):
        tr.ema_update(p, p, 1.5)
    with pytest.raises(ValueError):
        tr.ema_update(p, p, -0.1)


def test_ema_uses_post_update_online():
    # after one xe step the target must blend the *new* online weights
    samples, vocab, cfg = tiny_setup()
    state = tr.TrainState.create(cfg, seed=9)
    t_before = {n: p.data.copy() for n, p in state.target.items()}
    ids = tr.sequence_ids(samples[0].references[0], vocab, cfg.max_length)
    ro, rt = KeyedRng(9, ROLE_ONLINE), KeyedRng(9, 3)
    ro.begin_step(1)
    rt.begin_step(1)
    tr.xe_step(state, [(samples[0].features.grid, ids)], 1e-3, ro, rt)
    for n, p in state.target.items():
        want = 0.999 * t_before[n] + 0.001 * state.online[n].data
        assert p.data.tobytes() == want.tobytes()


# ---------------------------------------------------------------------------
# stop-gradient into the target model
# ---------------------------------------------------------------------------


def test_xe_loss_never_reaches_target():
    samples, vocab, cfg = tiny_setup()
    state = tr.TrainState.create(cfg, seed=4)
    batch = [(s.features.grid, tr.sequence_ids(s.references[0], vocab, cfg.max_length))
             for s in samples[:2]]
    ro, rt = KeyedRng(4, ROLE_ONLINE), KeyedRng(4, 3)
    ro.begin_step(1)
    rt.begin_step(1)
    tr.xe_step(state, batch, 1e-3, ro, rt)
    assert all(p.grad is None for p in state.target.values())
    # the online side did receive gradient
    assert any(p.grad is not None and np.abs(p.grad).max() > 0
               for p in state.online.values())


def test_scst_loss_never_reaches_target():
    samples, vocab, cfg = tiny_setup()
    state = tr.TrainState.create(cfg, seed=6)
    train = samples[:4]
    df = DocumentFrequency([s.references for s in train])
    emb = BagEmbedder.from_corpus(
        [tokenize(r, vocab).ids for s in train for r in s.references],
        len(vocab.tokens))
    scst = tr.ScstConfig(strategy="all", beam_size=3, learning_rate=1e-4)
    batch = [(s.features.grid, s.references) for s in train[:2]]
    tr.scst_step(state, batch, scst, df, vocab, emb)
    assert all(p.grad is None for p in state.target.values())


# ---------------------------------------------------------------------------
# reduction: lambda_kd = 0 is plain single-model XE, bit for bit
# ---------------------------------------------------------------------------


def plain_xe_loop(samples, vocab, cfg, seed, steps, batch_size, warmup):
    """Single-model XE trainer written independently of TrainState.

    Shares the leaf building blocks (forward ops, Adam, schedule) but none
    of the twin-model plumbing; used to pin down what the full pipeline
    must collapse to when distillation and the target model are inert.
    """
    params = init_params(cfg, seed, np.float32)
    m = {n: np.zeros_like(p.data) for n, p in params.items()}
    v = {n: np.zeros_like(p.data) for n, p in params.items()}
    rng = KeyedRng(seed, ROLE_ONLINE)
    losses = []
    for step in range(1, steps + 1):
        idx = generator(seed, ROLE_BATCH, step, 0).permutation(len(samples))[:batch_size]
        u = generator(seed, ROLE_BATCH, step, 1).random(len(idx))
        rng.begin_step(step)
        ces = []
        for j, i in enumerate(idx):
            s = samples[int(i)]
            ref = s.references[int(u[j] * len(s.references))]
            ids = tokenize(ref, vocab).ids
            if len(ids) > cfg.max_length:
                ids = ids[:cfg.max_length - 1] + [EOS_ID]
            enc = encode(s.features.grid, params, cfg, training=True, rng=rng)
            logits = decode_logits(ids[:-1], enc, params, cfg, training=True, rng=rng)
            ces.append(T.cross_entropy(logits, ids[1:], np.ones(len(ids) - 1)))
        loss = T.scale(T.add_n(ces), 1.0 / len(ces))
        losses.append(float(loss.data))
        for p in params.values():
            p.zero_grad()
        T.backward(loss)
        tr.adam_update(params, m, v, step, tr.noam_lr(step, cfg.model_dim, warmup))
    return params, losses


def test_lambda_zero_reduces_to_plain_xe():
    samples, vocab, cfg = tiny_setup(num_images=8)
    seed, steps, bs, warmup = 11, 5, 3, 50

    state = tr.TrainState.create(cfg, seed, lambda_kd=0.0)
    loop = tr.LoopConfig(steps=steps, batch_size=bs, warmup=warmup)
    out = tr.train_xe(state, samples, [], vocab, loop)

    ref_params, _ = plain_xe_loop(samples, vocab, cfg, seed, steps, bs, warmup)
    assert snapshot(out["state"].online) == snapshot(ref_params)


def test_lambda_positive_diverges_from_plain_xe():
    # guard against the reduction test passing because KD is silently dead
    samples, vocab, cfg = tiny_setup(num_images=8)
    seed, steps, bs, warmup = 11, 3, 3, 50
    state = tr.TrainState.create(cfg, seed, lambda_kd=0.5)
    # decouple target so its logits differ and the KD term has teeth
    for p in state.target.values():
        p.data = p.data + np.float32(0.01)
    tr.train_xe(state, samples, [], vocab,
                tr.LoopConfig(steps=steps, batch_size=bs, warmup=warmup))
    ref_params, _ = plain_xe_loop(samples, vocab, cfg, seed, steps, bs, warmup)
    assert snapshot(state.online) != snapshot(ref_params)


# ---------------------------------------------------------------------------
# SCST mechanics
# ---------------------------------------------------------------------------


def test_advantage_coefficients_exact():
    assert tr.advantage([1.0, 0.0]) == [0.5, -0.5]
    assert tr.advantage([0.3, 0.3, 0.3]) == [0.0, 0.0, 0.0]
    rng = np.random.default_rng(2)
    for _ in range(20):
        r = rng.random(5).tolist()
        adv = tr.advantage(r)
        assert abs(sum(adv)) < 1e-12


def test_equal_rewards_leave_online_bit_unchanged():
    # references share no tokens with anything the model can emit, so every
    # hypothesis scores exactly zero and the baseline absorbs it all
    samples, vocab, cfg = tiny_setup()
    state = tr.TrainState.create(cfg, seed=7)
    alien_refs = ["zzz qqq xxx", "qqq zzz"]
    df = DocumentFrequency([alien_refs])
    emb = BagEmbedder(len(vocab.tokens))
    before = snapshot(state.online)
    scst = tr.ScstConfig(strategy="best", beam_size=3, learning_rate=1e-3, lambda_kd=0.0)
    report = tr.scst_step(state, [(samples[0].features.grid, alien_refs)],
                          scst, df, vocab, emb)
    assert report["baseline"] == 0.0 and report["reward_mean"] == 0.0
    assert snapshot(state.online) == before
    assert state.step == 1 and state.adam_t == 1


def test_policy_gradient_matches_finite_differences():
    """Frozen trajectory: with hypotheses and advantages held fixed, the
    teacher-forced policy loss must gradcheck like any other op chain."""
    samples, vocab, cfg = tiny_setup(model_dim=8)
    params = init_params(cfg, seed=13, dtype=np.float64)
    grid = samples[0].features.grid
    with T.no_grad():
        enc_frozen = encode(grid, params, cfg)
    beam = beam_search(FastDecoder(params, cfg, enc_frozen).expand, 3, cfg.max_length)
    adv = [0.7, -0.2, -0.5]

    def make_loss():
        enc = encode(grid, params, cfg)
        terms = []
        for h, a in zip(beam, adv):
            logits = decode_logits(h.ids[:-1], enc, params, cfg)
            lp = T.sequence_log_prob(logits, h.ids[1:], np.ones(len(h.ids) - 1))
            terms.append(T.scale(lp, -a / len(beam)))
        return T.add_n(terms)

    leaves = [params["output.bias"], params["enc0.norm1.gain"],
              params["dec0.cross.wq.weight"]]
    check_gradients(make_loss, leaves, tol=1e-4)


def test_distill_pair_identical_hypotheses_is_zero():
    rng = np.random.default_rng(3)
    rows = [rng.normal(size=9) for _ in range(4)]
    h = Hypothesis(ids=[1, 5, 6, 7, 2], logprob=-1.0, logits=rows, finished=True)
    loss = tr.distill_pair_logits(h, h)
    assert float(loss.data) == 0.0


def test_distill_pair_masks_extra_rows():
    rng = np.random.default_rng(4)
    t_rows = [rng.normal(size=6) for _ in range(3)]
    o_rows = [rng.normal(size=6) for _ in range(5)]
    h_t = Hypothesis(ids=[1, 4, 5, 2], logprob=-1.0, logits=t_rows, finished=True)
    h_o = Hypothesis(ids=[1, 4, 5, 6, 7, 2], logprob=-2.0, logits=o_rows, finished=True)
    online = T.parameter(np.stack(o_rows))
    loss = tr.distill_pair_logits(h_t, h_o, online)
    want = np.mean((np.stack(t_rows) - np.stack(o_rows)[:3]) ** 2)
    assert abs(float(loss.data) - want) < 1e-12
    T.backward(loss)
    assert np.abs(online.grad[:3]).max() > 0
    assert not online.grad[3:].any()  # rows past the shared length are masked


def test_scst_config_validation():
    with pytest.raises(ValueError, match="strategy"):
        tr.ScstConfig(strategy="nearest")
    with pytest.raises(ValueError, match="beam_size"):
        tr.ScstConfig(beam_size=1)


def test_xe_divergence_raises():
    samples, vocab, cfg = tiny_setup()
    state = tr.TrainState.create(cfg, seed=5)
    state.online["output.bias"].data[:] = np.nan
    ids = tr.sequence_ids(samples[0].references[0], vocab, cfg.max_length)
    ro, rt = KeyedRng(5, ROLE_ONLINE), KeyedRng(5, 3)
    ro.begin_step(1)
    rt.begin_step(1)
    with pytest.raises(tr.TrainingDiverged):
        tr.xe_step(state, [(samples[0].features.grid, ids)], 1e-3, ro, rt)


def test_scst_all_empty_hypotheses_abort():
    samples, vocab, cfg = tiny_setup()
    state = tr.TrainState.create(cfg, seed=5)
    # pin EOS and PAD so both beam slots detokenize to "" (PAD is dropped)
    state.online["output.bias"].data[EOS_ID] = 60.0
    state.online["output.bias"].data[0] = 50.0
    df = DocumentFrequency([samples[0].references])
    emb = BagEmbedder(len(vocab.tokens))
    scst = tr.ScstConfig(strategy="best", beam_size=2, lambda_kd=0.0)
    with pytest.raises(tr.TrainingDiverged, match="empty"):
        tr.scst_step(state, [(samples[0].features.grid, samples[0].references)],
                     scst, df, vocab, emb)


# ---------------------------------------------------------------------------
# checkpoint resume
# ---------------------------------------------------------------------------


def _read_log(path):
    with open(path) as fh:
        return fh.read()


def test_xe_resume_is_bitwise_identical(tmp_path):
    samples, vocab, cfg = tiny_setup(num_images=8)
    train, val = samples[:6], samples[6:]
    seed, total = 21, 6

    def loop_cfg(d, steps):
        d.mkdir(exist_ok=True)
        return tr.LoopConfig(steps=steps, batch_size=3, warmup=50, val_every=3,
                             val_beam=3, log_path=str(d / "log.jsonl"),
                             ckpt_dir=str(d))

    a = tmp_path / "straight"
    tr.train_xe(tr.TrainState.create(cfg, seed), train, val, vocab, loop_cfg(a, total))

    b = tmp_path / "resumed"
    tr.train_xe(tr.TrainState.create(cfg, seed), train, val, vocab, loop_cfg(b, 3))
    ckpt = load_checkpoint(b / "last.ckpt")
    state, vocab_back = tr.state_from_checkpoint(ckpt)
    assert vocab_back.tokens == vocab.tokens
    tr.train_xe(state, train, val, vocab_back, loop_cfg(b, total), best=ckpt.best)

    assert (a / "last.ckpt").read_bytes() == (b / "last.ckpt").read_bytes()
    assert (a / "best.ckpt").read_bytes() == (b / "best.ckpt").read_bytes()
    assert _read_log(a / "log.jsonl") == _read_log(b / "log.jsonl")


def test_scst_resume_is_bitwise_identical(tmp_path):
    samples, vocab, cfg = tiny_setup(num_images=8)
    train, val = samples[:6], samples[6:]
    seed = 22
    scst = tr.ScstConfig(strategy="best", beam_size=3, learning_rate=1e-4)

    def warm_state():
        st = tr.TrainState.create(cfg, seed)
        tr.train_xe(st, train, val, vocab, tr.LoopConfig(steps=2, batch_size=3, warmup=50))
        tr.prepare_for_scst(st, scst)
        return st

    def loop_cfg(d, steps):
        d.mkdir(exist_ok=True)
        return tr.LoopConfig(steps=steps, batch_size=2, val_every=0,
                             log_path=str(d / "log.jsonl"), ckpt_dir=str(d))

    a = tmp_path / "straight"
    tr.train_scst(warm_state(), train, val, vocab, scst, loop_cfg(a, 5))

    b = tmp_path / "resumed"
    tr.train_scst(warm_state(), train, val, vocab, scst, loop_cfg(b, 3))
    ckpt = load_checkpoint(b / "last.ckpt")
    assert ckpt.stage == "scst"
    state, _ = tr.state_from_checkpoint(ckpt)
    tr.train_scst(state, train, val, vocab, scst, loop_cfg(b, 5))

    assert (a / "last.ckpt").read_bytes() == (b / "last.ckpt").read_bytes()
    assert _read_log(a / "log.jsonl") == _read_log(b / "log.jsonl")


def test_prepare_for_scst_resets_optimizer():
    samples, vocab, cfg = tiny_setup()
    state = tr.TrainState.create(cfg, seed=8)
    tr.train_xe(state, samples, [], vocab, tr.LoopConfig(steps=2, batch_size=2, warmup=50))
    assert state.adam_t == 2 and any(state.m[n].any() for n in state.m)
    tr.prepare_for_scst(state, tr.ScstConfig(lambda_kd=0.25))
    assert state.adam_t == 0
    assert not any(state.m[n].any() for n in state.m)
    assert not any(state.v[n].any() for n in state.v)
    assert state.lambda_kd == 0.25
    assert state.step == 2  # the global step keeps counting across stages


def test_sequence_ids_truncates_with_eos():
    samples, vocab, _ = tiny_setup()
    text = samples[0].references[0]
    full = tokenize(text, vocab).ids
    short = tr.sequence_ids(text, vocab, 6)
    assert len(short) == 6
    assert short[0] == full[0] and short[-1] == EOS_ID
    assert tr.sequence_ids(text, vocab, len(full)) == full
