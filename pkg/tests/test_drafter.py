import math

import numpy as np
import pytest

from specpv.drafter import (
    MockIdentical,
    MockNoisy,
    MockRandom,
    TreeTemplate,
    binary,
    build_tree_mask,
    chain,
    eagle_like,
    fuse_features,
    init_draft_module,
    make_drafter,
    template_from_spec,
    tree_draft,
)
from specpv.engine import GenerationConfig, autoregressive_generate, generate
from specpv.model import init_random
from specpv.numerics import seeded_rng

from .helpers import small_config

# -- templates and masks ---------------------------------------------------


def test_chain_mask_lower_triangular():
    m = build_tree_mask(chain(3), 5)
    assert m.shape == (3, 8)
    assert m[:, :5].all()
    np.testing.assert_array_equal(m[:, 5:], np.tril(np.ones((3, 3), bool)))


def test_root_siblings_masked():
    m = build_tree_mask(TreeTemplate((-1, -1)), 2)
    assert not m[0, 3] and not m[1, 2]


@pytest.mark.parametrize("tpl", [chain(4), binary(3), eagle_like(), TreeTemplate((-1, 0, 0, -1, 3, 1, 5))])
def test_mask_row_counts(tpl, ctx=7):
    m = build_tree_mask(tpl, ctx)
    assert m.sum(axis=1).tolist() == [ctx + d + 1 for d in tpl.depths]


def test_template_validation():
    with pytest.raises(ValueError):
        TreeTemplate((0,))  # self parent
    with pytest.raises(ValueError):
        TreeTemplate((-1, 2, 0))  # forward link
    with pytest.raises(ValueError):
        TreeTemplate(())
    with pytest.raises(ValueError):
        template_from_spec("star(3)")


def test_canonical_templates():
    e = eagle_like()
    assert e.n_nodes == 10 and e.depth == 4
    # the first (top-ranked) node at each level branches 3, 2, 2, 1
    node, widths = -1, []
    while True:
        kids = e.children(node)
        if not kids:
            break
        widths.append(len(kids))
        node = kids[0]
    assert widths == [3, 2, 2, 1]
    assert binary(3).n_nodes == 14 and binary(3).depth == 3
    assert chain(5).is_chain and not e.is_chain
    assert template_from_spec("chain(3)") == chain(3)
    assert template_from_spec([-1, 0, 0]).parents == (-1, 0, 0)
    assert template_from_spec("eagle-like") == e


# -- fusion ----------------------------------------------------------------


def test_fuse_linearity():
    rng = np.random.default_rng(0)
    w = rng.standard_normal((24, 8)).astype(np.float32)
    np.testing.assert_array_equal(fuse_features(np.zeros(24), np.zeros(8), w), np.zeros((1, 8)))
    taps = rng.standard_normal(24).astype(np.float32)
    base = fuse_features(taps, np.zeros(8), w)
    np.testing.assert_allclose(fuse_features(2.5 * taps, np.zeros(8), w), 2.5 * base, rtol=1e-6, atol=1e-5)
    with pytest.raises(ValueError, match="tapped features"):
        fuse_features(np.zeros(16), np.zeros(8), w)


def test_fuse_pinned_fixture(default_model):
    d = init_draft_module(default_model, 0)
    r = seeded_rng(99)
    taps = (r.uniform_array(192) * 2 - 1).astype(np.float32)
    emb = default_model.embed[17]
    out = fuse_features(taps, emb, d.w_fuse)[0]
    # reference path: explicit float64 dot products, one output at a time
    ref = [sum(float(taps[i]) * float(d.w_fuse[i, j]) for i in range(192)) + float(emb[j]) for j in range(64)]
    np.testing.assert_allclose(out, ref, atol=1e-6)
    pinned = [-0.23667088150978088, -0.3913283348083496, 0.10129272937774658, 0.24595025181770325,
              0.20493999123573303, 0.6333073973655701, 0.1220783069729805, 0.3614656925201416]
    assert out[:8].tolist() == pinned


# -- drafting --------------------------------------------------------------


def _state_after(drafter, model, prompt):
    st = drafter.new_state()
    drafter.commit(st, None, prompt)
    return st


def test_mock_identical_chain_equals_greedy_continuation(small_model):
    prompt = [3, 1, 4, 1, 5, 9, 2, 6]
    cfg = GenerationConfig(max_new_tokens=5, cache=GenerationConfig().cache)
    ar = autoregressive_generate(small_model, prompt, cfg).new_tokens
    d = MockIdentical(small_model)
    st = _state_after(d, small_model, prompt + [ar[0]])
    cand = tree_draft(d, st, chain(4))
    assert cand.tokens.tolist() == ar[1:5]
    assert cand.positions.tolist() == [9, 10, 11, 12]


def test_chain1_position(small_model):
    d = MockIdentical(small_model)
    st = _state_after(d, small_model, [1, 2, 3])
    cand = d.draft(st, chain(1))
    assert len(cand) == 1 and cand.positions.tolist() == [3]


def test_greedy_draft_is_pure(small_model):
    for d in (init_draft_module(small_model, 1), MockIdentical(small_model)):
        st = _state_after(d, small_model, [5, 6, 7, 8])
        a = d.draft(st, eagle_like())
        st.truncate_from_position(4)
        b = d.draft(st, eagle_like())
        np.testing.assert_array_equal(a.tokens, b.tokens)
        np.testing.assert_array_equal(a.probs, b.probs)


def test_tree_siblings_take_ranked_tokens(small_model):
    d = MockIdentical(small_model)
    st = _state_after(d, small_model, [9, 8, 7])
    cand = d.draft(st, eagle_like())
    ranked = np.argsort(-st.last_logits.astype(np.float64), kind="stable")[:3]
    assert cand.tokens[:3].tolist() == ranked.tolist()


def test_draft_depth_beyond_length_budget(small_model):
    d = MockIdentical(small_model)
    st = _state_after(d, small_model, list(range(10)))
    st.length = small_model.config.max_position - 2
    with pytest.raises(ValueError, match="depth"):
        d.draft(st, chain(4))


def test_sampling_needs_chain(small_model):
    d = MockIdentical(small_model)
    st = _state_after(d, small_model, [1, 2])
    with pytest.raises(ValueError):
        d.draft(st, eagle_like(), temperature=1.0, rng=seeded_rng(0))


def test_make_drafter_kinds(small_model):
    assert isinstance(make_drafter("mock-noisy", small_model, p=0.3), MockNoisy)
    assert isinstance(make_drafter("mock-random", small_model), MockRandom)
    assert make_drafter("eagle-like", small_model).kind == "eagle-like"
    with pytest.raises(ValueError):
        make_drafter("oracle", small_model)
    with pytest.raises(ValueError):
        MockNoisy(small_model, 1.5)


def test_draft_cache_tracks_committed_length(small_model):
    for kind in ("eagle-like", "mock-identical", "mock-noisy", "mock-random"):
        d = make_drafter(kind, small_model, p=0.6)

        def check(session, rec):
            assert session.draft.length == len(session.y)
            if session.draft.kv is not None:
                assert len(session.draft.kv) == session.draft.length

        generate(small_model, d, [1, 2, 3, 4], GenerationConfig(max_new_tokens=30), observer=check)


def test_mock_random_accept_length():
    # four-token vocabulary so the geometric series is large enough to measure
    m = init_random(small_config(vocab_size=4, dim=16, n_heads=1, ffn_dim=16, feature_tap_layers=(1,), max_position=16384), 0)
    d = MockRandom(4, seed=3)
    depth, p = 3, 0.25
    res = generate(m, d, [0, 1, 2], GenerationConfig(max_length=16384, max_new_tokens=8000, template=chain(depth)))
    acc = np.array([r.accepted for r in res.records])
    mean = sum(p**k for k in range(1, depth + 1))
    second = sum((2 * k - 1) * p**k for k in range(1, depth + 1))
    sigma = math.sqrt((second - mean**2) / len(acc))
    assert len(acc) >= 5000
    assert abs(acc.mean() - mean) <= 3 * sigma
