import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from xmlr import encoder as enc
from xmlr.featstore import ClipContext
from xmlr.numkit import Rng, rng_gaussian


def rand(r, *shape, scale=1.0):
    return rng_gaussian(r, int(np.prod(shape))).reshape(shape) * scale


def random_block(r, d):
    return {"wq": rand(r, d, d, scale=0.5), "wk": rand(r, d, d, scale=0.5), "wv": rand(r, d, d, scale=0.5),
            "wo": rand(r, d, d, scale=0.5), "bo": rand(r, d, scale=0.1), "ln_g": 1 + rand(r, d, scale=0.1),
            "ln_b": rand(r, d, scale=0.1)}


def randomized_params(seed=0, dims=(5, 4, 3), d=6, k=3, max_len=8):
    p = enc.ModelParams.init(Rng(seed), *dims, d=d, kernel_size=k, max_len=max_len)
    r = Rng(seed + 1000)
    for name in p:
        p[name] = p[name] + rand(r, *p[name].shape, scale=0.3)
    return p


# straight-line oracle helpers written with explicit loops

def oracle_softmax(xs):
    m = max(xs)
    e = [math.exp(x - m) for x in xs]
    s = sum(e)
    return [x / s for x in e]


def oracle_ln(row, g, b, eps=1e-5):
    mu = sum(row) / len(row)
    var = sum((x - mu) ** 2 for x in row) / len(row)
    return [(x - mu) / math.sqrt(var + eps) * gi + bi for x, gi, bi in zip(row, g, b)]


def oracle_attention(x, ctx, p):
    d = x.shape[1]
    q, k, v = x @ p["wq"], ctx @ p["wk"], ctx @ p["wv"]
    out = []
    for i in range(x.shape[0]):
        w = oracle_softmax([float(q[i] @ k[j]) / math.sqrt(d) for j in range(ctx.shape[0])])
        mixed = sum(wj * v[j] for j, wj in enumerate(w))
        out.append(oracle_ln(list(x[i] + mixed @ p["wo"] + p["bo"]), p["ln_g"], p["ln_b"]))
    return np.array(out)


# ---------------------------------------------------------------- init and params

def test_init_shapes_and_values():
    p = enc.ModelParams.init(Rng(0), 10, 11, 12, d=16, kernel_size=5, max_len=30)
    assert p["proj_v.w"].shape == (10, 16) and p["proj_s.w"].shape == (11, 16) and p["proj_q.w"].shape == (12, 16)
    assert p["pos_enc"].shape == (30, 16)
    assert p["k_st"].shape == (5,) and p["w_v"].shape == (16,)
    assert np.all(p["proj_v.b"] == 0) and np.all(p["self_v.ln_g"] == 1) and np.all(p["cross_s.inner.ln_b"] == 0)
    assert abs(p["pos_enc"].std() - 0.02) < 0.003
    assert (p.d, p.kernel_size, p.max_len, p.raw_dims) == (16, 5, 30, (10, 11, 12))


def test_every_norm_has_own_parameters():
    p = enc.ModelParams.init(Rng(0), 3, 3, 3, d=4)
    norms = [n for n in p if n.endswith(".ln_g")]
    assert len(norms) == 7
    assert len({id(p[n]) for n in norms}) == 7


def test_init_even_kernel_rejected():
    with pytest.raises(ValueError):
        enc.ModelParams.init(Rng(0), 3, 3, 3, d=4, kernel_size=4)


def test_checkpoint_round_trip(tmp_path):
    p = randomized_params()
    enc.save_checkpoint(p, tmp_path / "m.ckpt")
    back = enc.load_checkpoint(tmp_path / "m.ckpt")
    assert list(back) == list(p)
    for name in p:
        assert back[name].tobytes() == p[name].tobytes()


def test_checkpoint_bad_magic(tmp_path):
    (tmp_path / "m.ckpt").write_bytes(b"JUNK" + b"\0" * 20)
    with pytest.raises(enc.CheckpointError):
        enc.load_checkpoint(tmp_path / "m.ckpt")


def test_checkpoint_truncated(tmp_path):
    enc.save_checkpoint(randomized_params(), tmp_path / "m.ckpt")
    buf = (tmp_path / "m.ckpt").read_bytes()
    (tmp_path / "m.ckpt").write_bytes(buf[:-3])
    with pytest.raises(enc.CheckpointError):
        enc.load_checkpoint(tmp_path / "m.ckpt")


# ---------------------------------------------------------------- projection

def test_project_zero_everything():
    out = enc.project_inputs(rand(Rng(0), 4, 3), (np.zeros((3, 5)), np.zeros(5)), np.zeros((8, 5)))
    assert np.array_equal(out, np.zeros((4, 5)))


def test_project_relu_exact_zero():
    w = np.array([[1.0, -1.0]])
    out = enc.project_inputs(np.array([[2.0]]), (w, np.zeros(2)), np.zeros((1, 2)))
    assert out[0, 1] == 0.0 and out[0, 0] == 2.0


def test_project_per_row_oracle():
    r = Rng(1)
    raw, w, b, pe = rand(r, 5, 3), rand(r, 3, 4), rand(r, 4), rand(r, 9, 4)
    out = enc.project_inputs(raw, (w, b), pe)
    for i in range(5):
        lin = [sum(raw[i, t] * w[t, j] for t in range(3)) + b[j] for j in range(4)]
        np.testing.assert_allclose(out[i] - pe[i], [max(0.0, x) for x in lin], atol=1e-12)


def test_project_overflow_names_max_len():
    with pytest.raises(ValueError, match="max_len=4"):
        enc.project_inputs(np.zeros((5, 3)), (np.zeros((3, 2)), np.zeros(2)), np.zeros((4, 2)))


# ---------------------------------------------------------------- self / cross encoder

def test_self_encoder_matches_oracle():
    r = Rng(2)
    x, p = rand(r, 4, 6), random_block(r, 6)
    np.testing.assert_allclose(enc.self_encoder(x, p), oracle_attention(x, x, p), atol=1e-12)


def test_self_encoder_singleton_attention():
    r = Rng(3)
    x, p = rand(r, 1, 6), random_block(r, 6)
    _, cache = enc.self_encoder_fwd(x, p)
    assert cache["attn"].tolist() == [[1.0]]


def test_self_encoder_attention_rows_sum_to_one():
    r = Rng(4)
    x, p = rand(r, 7, 6, scale=3.0), random_block(r, 6)
    _, cache = enc.self_encoder_fwd(x, p)
    assert np.all(cache["attn"] >= 0)
    np.testing.assert_allclose(cache["attn"].sum(axis=-1), 1.0, atol=1e-9)


def test_self_encoder_empty_raises():
    with pytest.raises(ValueError):
        enc.self_encoder(np.zeros((0, 4)), random_block(Rng(0), 4))


def test_self_encoder_permutation_equivariant():
    r = Rng(5)
    x, p = rand(r, 4, 6), random_block(r, 6)
    perm = np.array([2, 0, 3, 1])
    np.testing.assert_allclose(enc.self_encoder(x[perm], p), enc.self_encoder(x, p)[perm], atol=1e-12)


def test_cross_encoder_matches_oracle():
    r = Rng(6)
    x, c, pc, pi = rand(r, 3, 6), rand(r, 5, 6), random_block(r, 6), random_block(r, 6)
    mid = oracle_attention(x, c, pc)
    np.testing.assert_allclose(enc.cross_encoder(x, c, pc, pi), oracle_attention(mid, mid, pi), atol=1e-12)


def test_cross_encoder_single_cross_row():
    r = Rng(7)
    x, c, pc, pi = rand(r, 4, 6), rand(r, 1, 6), random_block(r, 6), random_block(r, 6)
    _, (c1, _) = enc.cross_encoder_fwd(x, c, pc, pi)
    assert np.all(c1["attn"] == 1.0)


def test_cross_encoder_identical_cross_rows():
    r = Rng(8)
    row = rand(r, 1, 6)
    x, c, pc, pi = rand(r, 4, 6), np.repeat(row, 3, axis=0), random_block(r, 6), random_block(r, 6)
    _, (c1, _) = enc.cross_encoder_fwd(x, c, pc, pi)
    expect = row[0] @ pc["wv"]  # any attention mix of identical values is that value
    for i in range(4):
        np.testing.assert_allclose(c1["mixed"][i], expect, atol=1e-12)


def test_cross_encoder_shape_and_empty():
    r = Rng(9)
    pc, pi = random_block(r, 6), random_block(r, 6)
    assert enc.cross_encoder(rand(r, 3, 6), rand(r, 8, 6), pc, pi).shape == (3, 6)
    with pytest.raises(ValueError):
        enc.cross_encoder(rand(r, 3, 6), np.zeros((0, 6)), pc, pi)


# ---------------------------------------------------------------- modular query

def test_modular_zero_weights_mean():
    h = rand(Rng(10), 5, 4)
    eq = enc.modular_query(h, np.zeros(4), np.zeros(4))
    np.testing.assert_allclose(eq.attn_v, np.full(5, 0.2), atol=1e-15)
    np.testing.assert_allclose(eq.q_v, h.mean(axis=0), atol=1e-12)


def test_modular_single_row():
    h = rand(Rng(11), 1, 4)
    eq = enc.modular_query(h, rand(Rng(12), 4), rand(Rng(13), 4))
    np.testing.assert_allclose(eq.q_v, h[0], atol=1e-15)
    np.testing.assert_allclose(eq.q_s, h[0], atol=1e-15)


@settings(max_examples=50)
@given(st.integers(1, 10), st.integers(0, 2**32))
def test_modular_convex_combination(lq, seed):
    r = Rng(seed)
    h, wv, ws = rand(r, lq, 5), rand(r, 5, scale=3.0), rand(r, 5, scale=3.0)
    eq = enc.modular_query(h, wv, ws)
    for q, a in ((eq.q_v, eq.attn_v), (eq.q_s, eq.attn_s)):
        assert np.all(a >= 0) and abs(a.sum() - 1) < 1e-9
        assert np.all(q >= h.min(axis=0) - 1e-12) and np.all(q <= h.max(axis=0) + 1e-12)


@given(st.floats(0.01, 100), st.integers(0, 2**32))
def test_modular_argmax_scale_invariant(c, seed):
    r = Rng(seed)
    h, w = rand(r, 6, 5), rand(r, 5)
    a1 = enc.modular_query(h, w, w).attn_v
    a2 = enc.modular_query(h, c * w, w).attn_v
    assert np.argmax(a1) == np.argmax(a2) == np.argmax(h @ w)


# ---------------------------------------------------------------- compositions

def test_encode_context_single_clip():
    p = randomized_params()
    ev = enc.encode_context(ClipContext("a", rand(Rng(1), 1, 5), rand(Rng(2), 1, 4)), p)
    for h in (ev.H_v0, ev.H_s0, ev.H_v1, ev.H_s1):
        assert h.shape == (1, 6)


def test_encode_context_deterministic():
    p = randomized_params()
    ctx = ClipContext("a", rand(Rng(1), 3, 5), rand(Rng(2), 3, 4))
    a, b = enc.encode_context(ctx, p), enc.encode_context(ctx, p)
    for x, y in zip((a.H_v0, a.H_s0, a.H_v1, a.H_s1), (b.H_v0, b.H_s0, b.H_v1, b.H_s1)):
        assert x.tobytes() == y.tobytes()


def test_encode_context_composition_oracle():
    p = randomized_params()
    vf, sf = rand(Rng(1), 3, 5), rand(Rng(2), 3, 4)
    ev = enc.encode_context(ClipContext("a", vf, sf), p)
    pe = p["pos_enc"]
    e_v = np.maximum(vf @ p["proj_v.w"] + p["proj_v.b"], 0) + pe[:3]
    e_s = np.maximum(sf @ p["proj_s.w"] + p["proj_s.b"], 0) + pe[:3]
    hv0 = oracle_attention(e_v, e_v, p.block("self_v"))
    hs0 = oracle_attention(e_s, e_s, p.block("self_s"))
    mid_v = oracle_attention(hv0, hs0, p.block("cross_v"))
    hv1 = oracle_attention(mid_v, mid_v, p.block("cross_v.inner"))
    mid_s = oracle_attention(hs0, hv0, p.block("cross_s"))
    hs1 = oracle_attention(mid_s, mid_s, p.block("cross_s.inner"))
    for got, want in ((ev.H_v0, hv0), (ev.H_s0, hs0), (ev.H_v1, hv1), (ev.H_s1, hs1)):
        np.testing.assert_allclose(got, want, atol=1e-12)


def test_encode_query_composition():
    p = randomized_params()
    tokens = rand(Rng(3), 4, 3)
    eq = enc.encode_query(tokens, p)
    e_q = np.maximum(tokens @ p["proj_q.w"] + p["proj_q.b"], 0) + p["pos_enc"][:4]
    hq = oracle_attention(e_q, e_q, p.block("self_q"))
    np.testing.assert_allclose(eq.H_q, hq, atol=1e-12)
    a = oracle_softmax(list(hq @ p["w_s"]))
    np.testing.assert_allclose(eq.q_s, sum(ai * row for ai, row in zip(a, hq)), atol=1e-12)


def test_encode_context_no_nan_on_extreme_input():
    p = randomized_params()
    vf = np.full((4, 5), 1e6)
    vf[1] = -1e6
    ev = enc.encode_context(ClipContext("a", vf, np.zeros((4, 4))), p)
    assert all(np.all(np.isfinite(h)) for h in (ev.H_v0, ev.H_s0, ev.H_v1, ev.H_s1))


def test_encode_corpus_matches_per_video():
    p = randomized_params()
    r = Rng(4)
    videos = [ClipContext(f"v{i}", rand(r, l, 5), rand(r, l, 4)) for i, l in enumerate((3, 2, 3, 1, 3))]
    batched = enc.encode_corpus(videos, p, chunk=2)
    assert [e.video_id for e in batched] == [v.video_id for v in videos]
    for v, e in zip(videos, batched):
        one = enc.encode_context(v, p)
        for x, y in zip((one.H_v0, one.H_s0, one.H_v1, one.H_s1), (e.H_v0, e.H_s0, e.H_v1, e.H_s1)):
            np.testing.assert_allclose(x, y, atol=1e-12)
