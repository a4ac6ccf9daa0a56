import numpy as np
import pytest
from gradutil import check_input_grad, check_param_grads, randomize
from hypothesis import given, settings
from hypothesis import strategies as st
from test_layers import bilstm_loop, se_loop

from sevit_ids import layers as L
from sevit_ids.errors import ConfigError, ShapeError
from sevit_ids.model import (
    VARIANTS,
    ModelSpec,
    build_model,
    count_params,
    load_model,
    predict_from_scores,
    save_model,
)
from sevit_ids.numkernel import make_rng
from sevit_ids.trainer import cross_entropy

TINY = dict(steps=5, embed=4, hidden=3, n_classes=3)


def tiny(variant, seed=0):
    return build_model(ModelSpec(variant, **TINY), make_rng(seed))


def straight_line_logits(m, x):
    """Recompute logits from the loop oracles, without the model's wiring code."""
    spec = m.spec
    b, t, _ = x.shape

    def vit(tokens):
        c = tokens.shape[2]
        e = np.maximum(tokens.reshape(b * t, c) @ m.embed.weight + m.embed.bias, 0).reshape(b, t, -1)
        a, _ = se_loop(m.se, e)
        r = e + a
        mu = r.mean(axis=2, keepdims=True)
        var = ((r - mu) ** 2).mean(axis=2, keepdims=True)
        return ((r - mu) / np.sqrt(var + m.ln.eps) * m.ln.gain + m.ln.bias).reshape(b, -1)

    if spec.variant.startswith("Parallel"):
        feats = np.hstack([vit(x), bilstm_loop(m.bilstm, x).reshape(b, -1)])
    elif spec.variant == "Seq_ViT_then_BiLSTM":
        feats = bilstm_loop(m.bilstm, vit(x).reshape(b, t, spec.embed)).reshape(b, -1)
    else:
        feats = vit(bilstm_loop(m.bilstm, x))
    return feats @ m.head.weight + m.head.bias


# -- build -------------------------------------------------------------------


@pytest.mark.parametrize("variant,width", [("Parallel_H32", 5760), ("Parallel_H64", 9600)])
def test_head_input_width(variant, width):
    m = build_model(ModelSpec(variant, steps=60), make_rng(0))
    assert m.head.weight.shape == (width, 6)


def test_sequential_head_widths():
    assert build_model(ModelSpec(1, steps=60), make_rng(0)).head.n_in == 60 * 64
    assert build_model(ModelSpec(2, steps=60), make_rng(0)).head.n_in == 60 * 32


def test_default_hidden_per_variant():
    assert ModelSpec("Parallel_H64").hidden == 64
    assert ModelSpec("Parallel_H32").hidden == 32
    assert ModelSpec(1).variant == "Seq_ViT_then_BiLSTM"


@pytest.mark.parametrize(
    "kwargs,field",
    [({"steps": 0}, "steps"), ({"n_classes": 1}, "n_classes"), ({"embed": -2}, "embed"), ({"variant": 7}, "variant")],
)
def test_invalid_spec_names_field(kwargs, field):
    with pytest.raises(ConfigError, match=field):
        ModelSpec(**kwargs)


def test_build_is_deterministic():
    a = build_model(ModelSpec("Parallel_H32", steps=20), make_rng(5))
    b = build_model(ModelSpec("Parallel_H32", steps=20), make_rng(5))
    assert count_params(a) == count_params(b)
    for (na, pa), (nb, pb) in zip(a.named_parameters().items(), b.named_parameters().items()):
        assert na == nb and np.array_equal(pa, pb)
    c = build_model(ModelSpec("Parallel_H32", steps=20), make_rng(6))
    assert not np.array_equal(a.head.weight, c.head.weight)


def test_registry_order_is_stable():
    names = list(tiny(3).named_parameters())
    assert names == [
        "vit.embed.weight",
        "vit.embed.bias",
        "vit.se.reduce.weight",
        "vit.se.reduce.bias",
        "vit.se.expand.weight",
        "vit.se.expand.bias",
        "vit.ln.gain",
        "vit.ln.bias",
        "bilstm.forward_dir.input_weights",
        "bilstm.forward_dir.recurrent_weights",
        "bilstm.forward_dir.bias",
        "bilstm.backward_dir.input_weights",
        "bilstm.backward_dir.recurrent_weights",
        "bilstm.backward_dir.bias",
        "head.weight",
        "head.bias",
    ]


# -- count_params ------------------------------------------------------------


def test_count_dense():
    assert L.init_dense(make_rng(0), 2, 3).size == 9


def test_count_lstm():
    assert L.init_lstm(make_rng(0), 1, 2).size == 32


def test_count_parallel_h32_reference_shape():
    t, e, r, h, k = 60, 32, 4, 32, 6
    mid = e // r
    embed = 1 * e + e
    se = (e * mid + mid) + (mid * e + e)
    ln = 2 * e
    lstm = 2 * (1 * 4 * h + h * 4 * h + 4 * h)
    head = (t * e + t * 2 * h) * k + k
    expected = embed + se + ln + lstm + head
    assert expected == 43950
    assert count_params(build_model(ModelSpec("Parallel_H32", steps=60), make_rng(0))) == expected


# -- forward -----------------------------------------------------------------


@pytest.mark.parametrize("variant", list(VARIANTS))
def test_probs_are_distributions(variant):
    m = build_model(ModelSpec(variant, steps=12, embed=8, hidden=4), make_rng(variant))
    probs, _ = m.forward(make_rng(9).normal(size=(5, 12, 1)))
    assert probs.shape == (5, 6)
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-9)
    assert np.all((probs > 0) & (probs < 1))


@pytest.mark.parametrize("variant", list(VARIANTS))
def test_identical_rows_identical_outputs(variant):
    m = tiny(variant)
    row = make_rng(3).normal(size=(1, 5, 1))
    probs, _ = m.forward(np.repeat(row, 4, axis=0))
    assert np.all(probs == probs[0])


@pytest.mark.parametrize("variant", list(VARIANTS))
def test_batch_permutation_equivariance(variant):
    m = tiny(variant)
    rng = make_rng(4)
    x = rng.normal(size=(6, 5, 1))
    perm = rng.permutation(6)
    np.testing.assert_allclose(m.forward(x[perm])[0], m.forward(x)[0][perm], rtol=0, atol=1e-15)


@pytest.mark.parametrize("variant", list(VARIANTS))
@pytest.mark.parametrize("seed", range(3))
def test_forward_matches_straight_line_oracle(variant, seed):
    m = tiny(variant, seed)
    randomize(m.named_parameters(), make_rng(100 + seed), 0.3)
    x = make_rng(200 + seed).normal(size=(3, 5, 1))
    logits, _ = m.logits(x)
    np.testing.assert_allclose(logits, straight_line_logits(m, x), rtol=0, atol=1e-12)


def test_forward_shape_error():
    with pytest.raises(ShapeError):
        tiny(3).forward(np.zeros((2, 6, 1)))


def test_forward_is_deterministic():
    m = tiny(3)
    x = make_rng(1).normal(size=(4, 5, 1))
    assert np.array_equal(m.forward(x)[0], m.forward(x)[0])


# -- predict -----------------------------------------------------------------


def test_predict_argmax():
    assert predict_from_scores([[0.1, 0.6, 0.1, 0.1, 0.05, 0.05]])[0] == 1


def test_predict_tie_goes_low():
    assert predict_from_scores([[0.1, 0.1, 0.3, 0.1, 0.3, 0.1]])[0] == 2


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32), st.floats(0.1, 10), st.floats(-5, 5))
def test_predict_invariant_under_increasing_transform(seed, scale, shift):
    logits = make_rng(seed).normal(size=(8, 6))
    base = predict_from_scores(logits)
    for f in (lambda z: scale * z + shift, np.exp, lambda z: z**3, np.tanh):
        assert np.array_equal(predict_from_scores(f(logits)), base)


def test_model_predict_matches_forward():
    m = tiny(3)
    x = make_rng(2).normal(size=(7, 5, 1))
    assert np.array_equal(m.predict(x, batch_size=3), np.argmax(m.forward(x)[0], axis=1))


# -- full-model gradient -----------------------------------------------------


@pytest.mark.parametrize("variant", list(VARIANTS))
@pytest.mark.parametrize("seed", range(2))
def test_full_model_gradcheck(variant, seed):
    m = tiny(variant, seed)
    rng = make_rng(50 + seed)
    randomize(m.named_parameters(), rng, 0.3)
    x = rng.normal(size=(4, 5, 1))
    y = np.array([0, 1, 2, 1])
    probs, cache = m.forward(x)
    _, dlogits = cross_entropy(probs, y)
    grads, dx = m.backward(cache, dlogits)
    loss = lambda: cross_entropy(m.forward(x)[0], y)[0]
    assert check_param_grads(m.named_parameters(), grads, loss) < 1e-4
    assert check_input_grad(x, dx, lambda v: cross_entropy(m.forward(v)[0], y)[0]) < 1e-4


# -- weights file ------------------------------------------------------------


@pytest.mark.parametrize("variant", list(VARIANTS))
def test_save_load_round_trip(tmp_path, variant):
    m = build_model(ModelSpec(variant, steps=60, hidden=8 if variant != 4 else None), make_rng(3))
    path = tmp_path / "w.npz"
    save_model(m, path)
    back = load_model(path)
    assert back.spec == m.spec
    for name, arr in m.named_parameters().items():
        assert np.array_equal(back.named_parameters()[name], arr)
        assert back.named_parameters()[name].tobytes() == arr.tobytes()


def test_save_is_byte_stable(tmp_path):
    m = tiny(3)
    save_model(m, tmp_path / "a.npz")
    save_model(m, tmp_path / "b.npz")
    assert (tmp_path / "a.npz").read_bytes() == (tmp_path / "b.npz").read_bytes()


def test_load_rejects_non_weights(tmp_path):
    path = tmp_path / "x.npz"
    np.savez(path, a=np.zeros(2))
    with pytest.raises(ConfigError):
        load_model(path)
