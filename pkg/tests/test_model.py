import math
import os
import subprocess
import sys

import numpy as np
import pytest
from builders import I, R, U, tiny_graph

from ecfkg import backend
from ecfkg.errors import ConfigError, FormatError, SchemaViolation
from ecfkg.graph import EntityId, EntityType, Triplet
from ecfkg.model import (
    EmbeddingModel,
    Hyperparams,
    check_chain,
    draw_epoch_negatives,
    init_model,
    load_checkpoint,
    ns_gradients,
    ns_loss,
    parse_checkpoint,
    save_checkpoint,
    softmax_prob,
    softmax_scores,
    train,
    trans,
)
from ecfkg.seeding import rng_for

BACKENDS = backend.available()


def _random_model(kg, dim, seed, scale=1.0):
    m = init_model(kg, dim, seed)
    rng = np.random.default_rng(seed)
    m.E[:] = rng.normal(scale=scale, size=m.E.shape)
    m.R[:] = rng.normal(scale=scale, size=m.R.shape)
    return m


def _fd_gradient(model, t, negs, h=1e-5):
    """Central differences on every row the loss touches."""
    out = {}
    rows = {("E", model.row(e)) for e in [t.head, t.tail, *negs]} | {("R", int(t.relation))}
    for table, row in rows:
        M = model.E if table == "E" else model.R
        g = np.zeros(model.dim)
        for j in range(model.dim):
            old = M[row, j]
            M[row, j] = old + h
            up = ns_loss(model, t, negs)
            M[row, j] = old - h
            down = ns_loss(model, t, negs)
            M[row, j] = old
            g[j] = (up - down) / (2 * h)
        out[(table, row)] = g
    return out


def _dense(model, grad):
    out = {}
    for e, g in grad.entities.items():
        out[("E", model.row(e))] = g
    for r, g in grad.relations.items():
        out[("R", int(r))] = g
    return out


def test_gradients_match_finite_differences():
    kg = tiny_graph()
    rng = np.random.default_rng(3)
    for trial in range(10):
        m = _random_model(kg, 6, trial, scale=0.5)
        t = kg.triplets()[rng.integers(len(kg))]
        negs = [EntityId(t.tail.type, int(j))
                for j in rng.integers(kg.vocab_size(t.tail.type), size=3)]
        fd = _fd_gradient(m, t, negs)
        an = _dense(m, ns_gradients(m, t, negs))
        assert fd.keys() == an.keys()
        for key in fd:
            np.testing.assert_allclose(an[key], fd[key], rtol=1e-6, atol=1e-8)


def test_repeated_negative_accumulates():
    kg = tiny_graph()
    m = _random_model(kg, 4, 0)
    t = next(x for x in kg if x.relation is R.PURCHASE)
    n = EntityId(I, 1)
    once = ns_gradients(m, t, [n]).entities[n]
    twice = ns_gradients(m, t, [n, n]).entities[n]
    np.testing.assert_allclose(twice, 2 * once)


def test_trans_and_chain():
    kg = tiny_graph()
    m = _random_model(kg, 5, 1)
    u = kg.entity(U, "u0")
    np.testing.assert_allclose(trans(m, u, [R.PURCHASE, R.PRODUCED_BY]),
                               m.vector(u) + m.R[R.PURCHASE] + m.R[R.PRODUCED_BY])
    assert check_chain(EntityType.USER, [R.PURCHASE, R.BELONGS_TO]) is EntityType.CATEGORY
    with pytest.raises(SchemaViolation):
        check_chain(EntityType.USER, [R.BELONGS_TO])


def test_softmax_sums_to_one_and_matches_prob():
    kg = tiny_graph()
    m = _random_model(kg, 5, 2)
    u = kg.entity(U, "u1")
    p = softmax_scores(m, trans(m, u, [R.PURCHASE]), EntityType.ITEM)
    assert p.sum() == pytest.approx(1.0)
    assert softmax_prob(m, u, [R.PURCHASE], EntityId(I, 2)) == pytest.approx(p[2])


@pytest.mark.parametrize("name", BACKENDS)
def test_kernel_matches_reference_update(name):
    """One batch through the kernel equals summed ns_gradients, clipped, times lr."""
    kg = tiny_graph()
    heads, rels, tails = kg.arrays()
    for clip in (1e6, 0.05):
        m = _random_model(kg, 6, 4, scale=0.3)
        ref = m.copy()
        negs = draw_epoch_negatives(kg, 3, rng_for(0, "negatives"))
        order = rng_for(0, "shuffle").permutation(len(kg)).astype(np.int64)
        bs = 7
        loss = backend.get(name).sgd_batches(
            m.E, m.R, heads, rels, tails, negs, order, bs, 0.4, 0.1, 2, 10, clip, 0, 1)

        flat = [e for t in EntityType for e in kg.entities(t)]
        total = None
        exp_loss = 0.0
        for j in order[:bs]:
            t = kg.triplets()[j]
            ng = [flat[x] for x in negs[j]]
            g = ns_gradients(ref, t, ng)
            exp_loss += ns_loss(ref, t, ng)
            total = g if total is None else (total.merge(g) or total)
        norm = total.norm()
        scale = clip / norm if norm > clip else 1.0
        lr = 0.4 + (0.1 - 0.4) * 2 / 10
        for e, g in total.entities.items():
            ref.E[ref.row(e)] -= lr * scale * g
        for r, g in total.relations.items():
            ref.R[r] -= lr * scale * g
        np.testing.assert_allclose(m.E, ref.E, rtol=0, atol=1e-12)
        np.testing.assert_allclose(m.R, ref.R, rtol=0, atol=1e-12)
        assert loss == pytest.approx(exp_loss, rel=1e-12)


def test_backends_agree_on_full_training():
    if len(BACKENDS) < 2:
        pytest.skip("compiled kernel not built")
    kg = tiny_graph()
    hp = Hyperparams(dim=8, epochs=5, batch_size=4, seed=3)
    a, ra = train(kg, hp, backend="cython")
    b, rb = train(kg, hp, backend="python")
    np.testing.assert_allclose(a.E, b.E, atol=1e-10)
    np.testing.assert_allclose(ra.epoch_losses, rb.epoch_losses, rtol=1e-10)


def test_zero_learning_rate_is_noop():
    kg = tiny_graph()
    hp = Hyperparams(dim=4, epochs=2, lr_initial=0.0, lr_final=0.0)
    m, _ = train(kg, hp)
    assert m == init_model(kg, 4, hp.seed)


def test_training_is_deterministic_and_seed_sensitive():
    kg = tiny_graph()
    hp = Hyperparams(dim=8, epochs=3, seed=11)
    a, _ = train(kg, hp)
    b, _ = train(kg, hp)
    c, _ = train(kg, Hyperparams(dim=8, epochs=3, seed=12))
    assert a == b
    assert a != c


def test_loss_decreases():
    kg = tiny_graph()
    _, rep = train(kg, Hyperparams(dim=16, epochs=30, batch_size=8))
    assert rep.epoch_losses[-1] < rep.epoch_losses[0]
    assert rep.triplets_processed == 30 * len(kg)


def test_fast_mode_threads_runs():
    kg = tiny_graph()
    m, rep = train(kg, Hyperparams(dim=8, epochs=3, batch_size=2, mode="fast", threads=3))
    assert m.E.dtype == np.float32
    assert all(math.isfinite(x) for x in rep.epoch_losses)


@pytest.mark.parametrize("kwargs", [
    dict(dim=0), dict(epochs=0), dict(batch_size=0), dict(negatives=-1),
    dict(lr_initial=0.1, lr_final=0.2), dict(lr_final=-0.1, lr_initial=0.0),
    dict(clip_norm=0.0), dict(mode="turbo"), dict(threads=0),
])
def test_hyperparams_validation(kwargs):
    with pytest.raises(ConfigError):
        Hyperparams(**kwargs).validate()


def test_checkpoint_roundtrip_bitwise(tmp_path):
    kg = tiny_graph()
    m, _ = train(kg, Hyperparams(dim=8, epochs=2))
    p = tmp_path / "m.ckpt"
    save_checkpoint(m, p)
    back = load_checkpoint(p)
    assert back == m
    save_checkpoint(back, tmp_path / "again.ckpt")
    assert (tmp_path / "again.ckpt").read_bytes() == p.read_bytes()
    assert back.matches_vocab(kg)


def test_checkpoint_corruption(tmp_path):
    kg = tiny_graph()
    m = init_model(kg, 3, 0)
    p = tmp_path / "m.ckpt"
    save_checkpoint(m, p)
    data = p.read_bytes()
    with pytest.raises(FormatError, match="magic"):
        parse_checkpoint(b"XXXXXX\n" + data[7:])
    with pytest.raises(FormatError, match="bytes"):
        parse_checkpoint(data[:-8])
    with pytest.raises(FormatError):
        parse_checkpoint(data.replace(b"dim=3", b"dim=x"))
    nan = data[:-8] + np.array([np.nan], dtype="<f8").tobytes()
    with pytest.raises(FormatError, match="non-finite"):
        parse_checkpoint(nan)


def test_checkpoint_rejects_tab_keys(tmp_path):
    keys = {t: [] for t in EntityType}
    keys[EntityType.USER] = ["bad\tkey"]
    m = EmbeddingModel(keys, np.zeros((1, 2)), np.zeros((7, 2)))
    with pytest.raises(FormatError):
        save_checkpoint(m, tmp_path / "x.ckpt")


def test_ns_loss_matches_formula():
    kg = tiny_graph()
    m = _random_model(kg, 4, 5)
    t = Triplet(kg.entity(U, "u0"), kg.entity(I, "i0"), R.PURCHASE)
    q = m.vector(t.head) + m.R[R.PURCHASE]
    n = [EntityId(I, 1), EntityId(I, 2)]
    sig = lambda x: 1 / (1 + math.exp(-x))
    expected = -math.log(sig(m.vector(t.tail) @ q)) - sum(math.log(sig(-(m.vector(e) @ q))) for e in n)
    assert ns_loss(m, t, n) == pytest.approx(expected, rel=1e-12)


def test_env_var_forces_python_backend():
    code = "from ecfkg import backend; print(backend.DEFAULT)"
    env = dict(os.environ, ECFKG_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True)
    assert out.stdout.strip() == "python"
