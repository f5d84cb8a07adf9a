import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mtl_forge import autodiff as ad
from mtl_forge.architectures import (AlphaUnit, BetaUnit, ModelConfig, alpha_combine,
                                     beta_combine, build_layer_plan, build_model, forward,
                                     init_alpha, load_checkpoint, save_checkpoint)
from mtl_forge.autodiff import Tape, Tensor
from mtl_forge.gradcheck import check_gradients, numeric_grad

from conftest import random_batch, randomize_model


# --- layer plan -------------------------------------------------------------------------

@pytest.mark.parametrize("n,expected", [(12, (120, 60, 30, 15, 7, 5)), (1, (10, 5)),
                                        (4, (40, 20, 10, 5))])
def test_layer_plan_goldens(n, expected):
    assert build_layer_plan(n).widths == expected


def test_layer_plan_rejects_zero():
    with pytest.raises(ValueError):
        build_layer_plan(0)


@given(st.integers(1, 500))
def test_layer_plan_rule(n):
    w = build_layer_plan(n).widths
    assert w[0] == 10 * n
    assert w[-1] == 5
    assert all(b == max(5, a // 2) for a, b in zip(w, w[1:]))
    assert all(b <= a for a, b in zip(w, w[1:]))
    assert w.count(5) == 1


# --- alpha units -------------------------------------------------------------------------

def test_init_alpha_cross_stitch():
    unit = init_alpha("cross_stitch", 2, widths=(4, 4))
    assert np.array_equal(unit.matrix.data, [[0.9, 0.05], [0.05, 0.9]])


def test_init_alpha_sluice():
    m = init_alpha("sluice", 2, 2, widths=(4, 4)).matrix.data
    assert m.shape == (4, 4)
    off = m[~np.eye(4, dtype=bool)]
    assert np.all(off == 0.1 / 12)
    assert off[0] == pytest.approx(0.008333, abs=1e-6)


def test_init_alpha_ern():
    m = init_alpha("ern", 2, widths=(3, 2)).matrix.data
    assert m.shape == (5, 5)
    assert np.all(m[~np.eye(5, dtype=bool)] == 0.005)
    assert np.all(np.diag(m) == 0.9)


def test_init_alpha_sluice_indivisible():
    with pytest.raises(ValueError):
        init_alpha("sluice", 2, 2, widths=(5, 5))


@given(st.sampled_from(["cross_stitch", "sluice", "ern"]), st.integers(2, 5), st.integers(1, 3),
       st.integers(1, 4))
def test_alpha_init_entry_rule(kind, T, S, chunk):
    width = S * chunk
    unit = init_alpha(kind, T, S if kind == "sluice" else 1, widths=(width,) * T)
    m = unit.matrix.data
    dim = m.shape[0]
    assert dim == {"cross_stitch": T, "sluice": T * S, "ern": T * width}[kind]
    assert np.trace(m) == pytest.approx(0.9 * dim)
    assert np.all(m[~np.eye(dim, dtype=bool)] == 0.1 / (dim * dim - dim))
    assert len(unit.block_map()) == dim


@pytest.mark.parametrize("kind,S", [("cross_stitch", 1), ("sluice", 2), ("ern", 1)])
def test_alpha_identity_passthrough(kind, S):
    rng = np.random.default_rng(0)
    unit = init_alpha(kind, 3, S, widths=(4, 4, 4))
    unit.matrix.data = np.eye(unit.matrix.shape[0])
    hs = [Tensor(rng.standard_normal((5, 4))) for _ in range(3)]
    out = alpha_combine(unit, hs)
    for a, b in zip(out, hs):
        assert np.array_equal(a.data, b.data)


def test_alpha_cross_stitch_swap():
    rng = np.random.default_rng(1)
    unit = AlphaUnit("cross_stitch", Tensor([[0.0, 1.0], [1.0, 0.0]]), (3, 3))
    a, b = Tensor(rng.standard_normal((2, 3))), Tensor(rng.standard_normal((2, 3)))
    out = alpha_combine(unit, [a, b])
    assert np.array_equal(out[0].data, b.data) and np.array_equal(out[1].data, a.data)


def test_alpha_ern_hand_example():
    unit = AlphaUnit("ern", Tensor([[0.9, 0.05], [0.05, 0.9]]), (1, 1))
    out = alpha_combine(unit, [Tensor([[2.0]]), Tensor([[4.0]])])
    assert out[0].data[0, 0] == pytest.approx(2.0, abs=1e-15)
    assert out[1].data[0, 0] == pytest.approx(3.7, abs=1e-15)


def test_alpha_width_mismatch():
    unit = init_alpha("ern", 2, widths=(3, 2))
    with pytest.raises(ValueError):
        alpha_combine(unit, [Tensor(np.ones((1, 3))), Tensor(np.ones((1, 3)))])


def test_alpha_cross_stitch_formula():
    rng = np.random.default_rng(2)
    alpha = rng.standard_normal((3, 3))
    hs = [rng.standard_normal((4, 5)) for _ in range(3)]
    out = alpha_combine(AlphaUnit("cross_stitch", Tensor(alpha), (5, 5, 5)), [Tensor(h) for h in hs])
    for t in range(3):
        expect = sum(alpha[t, u] * hs[u] for u in range(3))
        assert np.allclose(out[t].data, expect, atol=1e-13)


def test_alpha_sluice_formula():
    rng = np.random.default_rng(3)
    T, S, c = 2, 3, 2
    alpha = rng.standard_normal((T * S, T * S))
    hs = [rng.standard_normal((4, S * c)) for _ in range(T)]
    out = alpha_combine(AlphaUnit("sluice", Tensor(alpha), (S * c,) * T, S), [Tensor(h) for h in hs])
    chunks = [hs[t][:, s * c:(s + 1) * c] for t in range(T) for s in range(S)]
    for t in range(T):
        for s in range(S):
            i = t * S + s
            expect = sum(alpha[i, j] * chunks[j] for j in range(T * S))
            assert np.allclose(out[t].data[:, s * c:(s + 1) * c], expect, atol=1e-13)


@pytest.mark.parametrize("trial", range(20))
def test_sluice_single_subspace_equals_cross_stitch(trial):
    rng = np.random.default_rng(100 + trial)
    T, w = 3, 4
    alpha = Tensor(rng.standard_normal((T, T)))
    hs = [Tensor(rng.standard_normal((6, w))) for _ in range(T)]
    a = alpha_combine(AlphaUnit("cross_stitch", alpha, (w,) * T), hs)
    b = alpha_combine(AlphaUnit("sluice", alpha, (w,) * T, 1), hs)
    for x, y in zip(a, b):
        assert np.array_equal(x.data, y.data)


# --- beta units ------------------------------------------------------------------------

def test_beta_examples():
    skips = [Tensor([[1.0, 2.0]]), Tensor([[3.0]])]
    assert beta_combine(skips, BetaUnit(Tensor([[0.5], [0.5], [0.0]]))).data[0, 0] == 1.5
    assert beta_combine(skips, BetaUnit(Tensor(np.zeros((3, 1))))).data[0, 0] == 0.0
    onehot = BetaUnit(Tensor([[0.0], [0.0], [1.0]]))
    assert beta_combine(skips, onehot).data[0, 0] == 3.0
    with pytest.raises(ValueError):
        beta_combine(skips, BetaUnit(Tensor(np.ones((2, 1)))))


def test_beta_uniform_init():
    b = BetaUnit.uniform(8)
    assert np.all(b.weights.data == 1 / 8)


# --- model construction -----------------------------------------------------------------

def _dense_count(fan_in, fan_out):
    return fan_in * fan_out + fan_out


def test_baseline_parameter_count_and_smoke():
    cfg = ModelConfig("baseline", 1, 12, seed=0)
    model = build_model(cfg)
    widths = (120, 60, 30, 15, 7, 5)
    emb = 24 * cfg.hour_emb_dim + 53 * cfg.week_emb_dim + 31 * cfg.day_emb_dim
    dense, fan_in = 0, cfg.input_width
    for w in widths:
        dense += _dense_count(fan_in, w) + 2 * w
        fan_in = w
    dense += _dense_count(5, 1)
    assert model.n_parameters() == emb + dense
    rng = np.random.default_rng(0)
    batch = random_batch(rng, 1, 4, 12)
    batch.features[:] = 0
    out = forward(model, batch, "eval")
    assert out.shape == (4, 1) and np.isfinite(out.data).all()


def test_hps_heads():
    cfg = ModelConfig("hps", 3, 2, seed=0)
    model = build_model(cfg)
    heads = sorted({k.split(".")[0] for k in model.params if k.startswith("head")})
    assert heads == ["head0", "head1", "head2"]
    for t in range(3):
        assert model.params[f"head{t}.hidden.W"].shape == (5, 5)
        assert model.params[f"head{t}.out.W"].shape == (5, 1)
    trunk = build_model(ModelConfig("mlpnp", 3, 2, seed=0))
    trunk_only = trunk.n_parameters() - _dense_count(5, 1)
    per_head = _dense_count(5, 5) + 2 * 5 + _dense_count(5, 1)
    assert model.n_parameters() == trunk_only + 3 * per_head


def test_sluice_explicit_indivisible_width_errors():
    with pytest.raises(ValueError):
        ModelConfig("sn", 2, 3, subspaces=2, widths=(30, 15))


def test_sluice_rule_widths_rounded_to_subspaces():
    assert ModelConfig("sn", 2, 4, subspaces=2).plan.widths == (40, 20, 10, 6)
    assert ModelConfig("sn", 2, 4, subspaces=5).plan.widths == (40, 20, 10, 5)


def test_task_embedding_only_for_mlpwp():
    for arch in ("baseline", "mlpnp", "mlpwp", "hps", "csn", "sn", "ern"):
        model = build_model(ModelConfig(arch, 2, 3, widths=(6, 4, 2)))
        has = any(k.endswith("emb_task") for k in model.params)
        assert has == (arch == "mlpwp")


def test_unknown_arch_and_task_id():
    with pytest.raises(ValueError):
        ModelConfig("lstm", 2, 3)
    model = build_model(ModelConfig("mlpwp", 2, 3, widths=(6, 4)))
    batch = random_batch(np.random.default_rng(0), 3, 2, 3)
    with pytest.raises(ValueError):
        forward(model, batch, "eval")


def test_parameter_count_ordering():
    for T in (2, 3, 5):
        counts = {a: build_model(ModelConfig(a, T, 3, subspaces=2, widths=(12, 6, 4, 2))).n_parameters()
                  for a in ("csn", "sn", "ern")}
        assert counts["ern"] >= counts["sn"] >= counts["csn"]


def test_mlpwp_shared_embedding_rows_identical_predictions():
    rng = np.random.default_rng(4)
    model = build_model(ModelConfig("mlpwp", 3, 3, widths=(6, 4), seed=1))
    table = model.params["tower0.emb_task"].data
    table[2] = table[0]
    batch = random_batch(rng, 1, 5, 3)
    other = random_batch(rng, 1, 5, 3)
    other.features, other.temporal = batch.features, batch.temporal
    other.task_ids[:] = 2
    assert np.array_equal(forward(model, batch).data, forward(model, other).data)


# --- equivalences -----------------------------------------------------------------------

def transplant_tower(sps, t, mlp):
    for key, p in mlp.params.items():
        src = key.replace("tower0.", f"tower{t}.")
        if src in sps.params:
            p.data = sps.params[src].data.copy()
    for key, s in mlp.bn.items():
        src = sps.bn[key.replace("tower0.", f"tower{t}.")]
        s.mean, s.var = src.mean.copy(), src.var.copy()


def identity_alpha_gap(arch, seed, T=3, D=3, widths=(8, 6, 4)):
    rng = np.random.default_rng(seed)
    sps = build_model(ModelConfig(arch, T, D, subspaces=2, widths=widths, seed=seed))
    randomize_model(sps, rng)
    for layer in range(len(widths)):
        a = sps.params[f"alpha{layer}"]
        a.data = np.eye(a.shape[0])
    mlps = []
    for t in range(T):
        mlp = build_model(ModelConfig("baseline", 1, D, widths=widths, seed=seed))
        transplant_tower(sps, t, mlp)
        if arch in ("sn", "ern"):
            beta = np.zeros((sum(widths), 1))
            beta[-widths[-1]:, 0] = rng.standard_normal(widths[-1])
            sps.params[f"beta{t}"].data = beta
            mlp.params["tower0.out.W"].data = beta[-widths[-1]:].copy()
            mlp.params["tower0.out.b"].data = np.zeros(1)
        else:
            mlp.params["tower0.out.W"].data = sps.params[f"tower{t}.out.W"].data.copy()
            mlp.params["tower0.out.b"].data = sps.params[f"tower{t}.out.b"].data.copy()
        mlps.append(mlp)
    batch = random_batch(rng, T, 7, D)
    joint = forward(sps, batch, "eval").data[:, 0]
    gap = 0.0
    for t in range(T):
        rows = np.flatnonzero(batch.task_ids == t)
        sub = batch.take(rows)
        sub.task_ids[:] = 0
        alone = forward(mlps[t], sub, "eval").data[:, 0]
        gap = max(gap, float(np.max(np.abs(alone - joint[rows]))))
    return gap


@pytest.mark.parametrize("arch", ["csn", "sn", "ern"])
@pytest.mark.parametrize("seed", range(20))
def test_identity_alpha_equals_independent_towers(arch, seed):
    assert identity_alpha_gap(arch, seed) < 1e-10


def block_constant_ern_gap(seed, T=3, S=2, widths=(8, 6, 4)):
    rng = np.random.default_rng(seed)
    sn = build_model(ModelConfig("sn", T, 3, subspaces=S, widths=widths, seed=seed))
    randomize_model(sn, rng)
    ern = build_model(ModelConfig("ern", T, 3, widths=widths, seed=seed))
    for key, p in sn.params.items():
        if key.startswith("alpha"):
            layer = int(key[5:])
            chunk = widths[layer] // S
            ern.params[key].data = np.kron(p.data, np.eye(chunk))
        else:
            ern.params[key].data = p.data.copy()
    for key, s in sn.bn.items():
        ern.bn[key].mean, ern.bn[key].var = s.mean.copy(), s.var.copy()
    batch = random_batch(rng, T, 6, 3)
    return float(np.max(np.abs(forward(sn, batch).data - forward(ern, batch).data)))


@pytest.mark.parametrize("seed", range(20))
def test_block_constant_ern_equals_sluice(seed):
    assert block_constant_ern_gap(seed) < 1e-10


# --- gradients through full models ------------------------------------------------------

TINY = {"baseline": 1, "mlpnp": 2, "mlpwp": 2, "hps": 2, "csn": 2, "sn": 2, "ern": 2}


def full_model_grad_error(arch, seed=0, samples=60):
    rng = np.random.default_rng(seed)
    T = TINY[arch]
    model = build_model(ModelConfig(arch, T, 2, subspaces=2, widths=(6, 4, 2),
                                    hour_emb_dim=2, week_emb_dim=2, day_emb_dim=2, seed=seed))
    randomize_model(model, rng, 0.1)
    batch = random_batch(rng, T, 5, 2)
    y = rng.standard_normal((batch.features.shape[0], 1))

    def loss():
        return ad.mse_loss(forward(model, batch, "train", np.random.default_rng(seed + 1)), y)

    return check_gradients(loss, model.parameters(), n_samples=samples, rng=rng)


@pytest.mark.parametrize("arch", sorted(TINY))
def test_full_model_gradients(arch):
    assert full_model_grad_error(arch) < 1e-4


def test_cross_task_gradient_flow():
    rng = np.random.default_rng(8)
    model = build_model(ModelConfig("csn", 2, 2, widths=(4, 2), seed=3))
    randomize_model(model, rng, 0.1)
    batch = random_batch(rng, 2, 6, 2)
    y = rng.standard_normal((6, 1))
    rows_a = np.flatnonzero(batch.task_ids == 0)
    assert model.params["alpha0"].data[1, 0] != 0

    def task_a_loss():
        return ad.mse_loss(ad.embedding_forward(forward(model, batch, "eval"), rows_a), y)

    with Tape() as tape:
        loss = task_a_loss()
    tape.backward(loss)
    W = model.params["tower1.hidden0.W"]
    assert np.abs(W.grad).max() > 0
    fd = numeric_grad(lambda: float(task_a_loss().data[0]), W)
    assert np.abs(fd).max() > 0
    assert np.allclose(W.grad, fd, rtol=1e-5, atol=1e-9)


def test_no_cross_task_gradient_with_identity_alpha():
    rng = np.random.default_rng(9)
    model = build_model(ModelConfig("csn", 2, 2, widths=(4, 2), seed=3))
    for layer in range(2):
        model.params[f"alpha{layer}"].data = np.eye(2)
    batch = random_batch(rng, 2, 6, 2)
    rows_a = np.flatnonzero(batch.task_ids == 0)
    with Tape() as tape:
        loss = ad.mse_loss(ad.embedding_forward(forward(model, batch, "eval"), rows_a), np.zeros((6, 1)))
    tape.backward(loss)
    assert model.params["tower1.hidden0.W"].grad is None or \
        np.all(model.params["tower1.hidden0.W"].grad == 0)


# --- checkpoints -------------------------------------------------------------------------

@pytest.mark.parametrize("arch", sorted(TINY))
def test_checkpoint_round_trip_bit_exact(arch, tmp_path):
    rng = np.random.default_rng(1)
    model = build_model(ModelConfig(arch, TINY[arch], 2, widths=(6, 4, 2), seed=5))
    randomize_model(model, rng)
    path = tmp_path / "m.npz"
    save_checkpoint(model, path)
    back = load_checkpoint(path)
    assert back.cfg == model.cfg
    assert set(back.params) == set(model.params)
    for k, p in model.params.items():
        assert np.array_equal(back.params[k].data, p.data)
        assert back.params[k].data.tobytes() == p.data.tobytes()
    for k, s in model.bn.items():
        assert np.array_equal(back.bn[k].mean, s.mean) and np.array_equal(back.bn[k].var, s.var)
    save_checkpoint(back, tmp_path / "again.npz")
    assert path.read_bytes() == (tmp_path / "again.npz").read_bytes()
