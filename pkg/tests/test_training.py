import dataclasses

import numpy as np
import pytest

from gradsdf.config import LossWeights, make_config
from gradsdf.errors import NonFiniteLossError
from gradsdf.formats import shipped_scene
from gradsdf.geometry import Frame, generate_frames
from gradsdf.sampling import SampleBatch
from gradsdf.training import (HybridSdf, TrainState, loss_eik, loss_proj, loss_recon,
                              numerical_gradient, objective, predict, run_online, train_step)

from gradcheck import SMALL, TERMS, check_gradients, small_problem

W = LossWeights()


def empty():
    return np.zeros((0, 3))


def batch(surface=None, perturbed=None, p_target=(), p_sign=(), free=None, f_target=()):
    return SampleBatch(
        surface=empty() if surface is None else np.asarray(surface, float),
        perturbed=empty() if perturbed is None else np.asarray(perturbed, float),
        perturbed_target=np.asarray(p_target, float), perturbed_sign=np.asarray(p_sign, float),
        free=empty() if free is None else np.asarray(free, float),
        free_target=np.asarray(f_target, float))


def field_model(fn, grad_fn, seed=0):
    """Small model whose octree holds an exact field at every vertex."""
    cfg = make_config("desk-scale", SMALL)
    model = HybridSdf.from_config(cfg)
    pts = np.random.default_rng(seed).uniform(-1.2, 1.2, size=(300, 3))
    model.octree.insert_points(pts)
    v = model.octree.vertex_positions()
    model.octree.set_vertex_data(fn(v), grad_fn(v))
    return cfg, model


def affine(n, c):
    n = np.asarray(n, float)
    return (lambda x: x @ n + c), (lambda x: np.broadcast_to(n, x.shape))


def constant(c):
    return (lambda x: np.full(len(x), c)), (lambda x: np.zeros(x.shape))


# ------------------------------------------------------------ loss arithmetic


def test_recon_single_surface_point():
    _, model = field_model(*constant(0.02))
    res = loss_recon(model, batch(surface=[[0.1, 0.2, 0.3]]), W)
    assert res.total == pytest.approx(20.0, rel=1e-6)


def test_recon_zero_when_fitted():
    fn, gfn = affine([0.0, 0.0, 1.0], 0.0)
    _, model = field_model(fn, gfn)
    p = np.array([[0.1, 0.2, 0.3], [0.3, -0.2, -0.25]])
    b = batch(surface=[[0.4, 0.1, 0.0]], perturbed=p, p_target=np.abs(p[:, 2]),
              p_sign=np.sign(p[:, 2]))
    assert loss_recon(model, b, W).total == pytest.approx(0.0, abs=1e-4)


def test_proj_single_point():
    _, model = field_model(*constant(0.5))
    res = loss_proj(model, batch(free=[[0.0, 0.1, 0.2]], f_target=[0.7]), W)
    assert res.total == pytest.approx(20.0, rel=1e-6)


def test_eik_constant_and_unit_affine():
    pts = [[0.1, 0.2, 0.3], [0.5, -0.5, 0.0]]
    _, model = field_model(*constant(0.3))
    res = loss_eik(model, batch(surface=pts), W, 0.01)
    assert res.total == pytest.approx(W.eik_surface * 1.0)
    _, model = field_model(*constant(0.3))
    res = loss_eik(model, batch(free=pts, f_target=[1, 1]), W, 0.01)
    assert res.total == pytest.approx(W.eik_free * 1.0)
    n = np.array([2.0, -1.0, 2.0]) / 3.0
    _, model = field_model(*affine(n, 0.1))
    assert loss_eik(model, batch(surface=pts), W, 0.01).total == pytest.approx(0.0, abs=1e-4)


def test_out_of_root_samples_dropped_and_counted():
    _, model = field_model(*constant(0.02))
    b = batch(surface=[[0.1, 0.2, 0.3], [5.0, 0.0, 0.0]])
    res = objective(model, b, W, 0.01, terms=("recon",))
    assert res.total == pytest.approx(20.0, rel=1e-6) and res.dropped == 1
    # a stencil that pokes out of the root drops the Eikonal sample only
    edge = [[1.6 - 0.005, 0.0, 0.0]]
    res = objective(model, batch(surface=edge), W, 0.01, terms=("eik",))
    assert res.dropped == 1 and res.total == 0.0


def test_losses_invariant_to_sample_order():
    _, model, b = small_problem(3)
    rng = np.random.default_rng(0)
    ps, pp, pf = (rng.permutation(n) for n in (len(b.surface), len(b.perturbed), len(b.free)))
    shuffled = dataclasses.replace(
        b, surface=b.surface[ps], perturbed=b.perturbed[pp], perturbed_target=b.perturbed_target[pp],
        perturbed_sign=b.perturbed_sign[pp], free=b.free[pf], free_target=b.free_target[pf])
    for terms in TERMS.values():
        a = objective(model, b, W, 0.01, terms=terms, with_grad=False).total
        c = objective(model, shuffled, W, 0.01, terms=terms, with_grad=False).total
        assert abs(a - c) <= 1e-12 * max(1.0, abs(a))


# ------------------------------------------------------------------ gradients


@pytest.mark.parametrize("name", list(TERMS))
def test_parameter_gradients_match_finite_differences(name):
    checked, failures, _ = check_gradients(TERMS[name], n_params=80, seed=1)
    assert checked == 80
    assert not failures, failures[:5]


def test_numerical_gradient_affine_exact_for_any_eps():
    n = np.array([0.48, -0.6, 0.64])
    _, model = field_model(*affine(n, -0.2))
    model = model.astype(np.float64)  # float32 storage would round the vertex values
    v = model.octree.vertex_positions()
    model.octree.d[:] = v @ n - 0.2
    model.octree.g[:] = n
    x = np.random.default_rng(1).uniform(-1.0, 1.0, size=(50, 3))
    for eps in (1e-3, 0.01, 0.2):
        np.testing.assert_allclose(numerical_gradient(model, x, eps), np.tile(n, (50, 1)),
                                   atol=1e-9)
    _, flat = field_model(*constant(0.4))
    np.testing.assert_allclose(numerical_gradient(flat, x, 0.01), 0.0, atol=1e-12)


def test_predict_constant_field_and_zero_residual_start():
    _, model = field_model(*constant(0.25))
    x = np.random.default_rng(2).uniform(-1, 1, size=(100, 3))
    np.testing.assert_allclose(predict(model, x), 0.25, rtol=1e-6)
    cfg, model, _ = small_problem(4)
    fresh = HybridSdf.from_config(cfg)  # zero final layer
    fresh.octree = model.octree
    prior, _ = fresh.octree.interpolate_ga(x)
    assert np.array_equal(predict(fresh, x), prior)


# --------------------------------------------------------------- train steps


def tiny_state(seed=0, **over):
    doc = {**SMALL, "train": {"iters_per_frame": 3, "seed": seed}, **over}
    return TrainState.create(make_config("desk-scale", doc))


def frames(n=2, rays=300, seed=0):
    sc = shipped_scene()
    return generate_frames(sc, sc.trajectory[:n], rays, seed)


def test_one_frame_stream_runs_iters_steps():
    state, recs = run_online(frames(1), state=tiny_state())
    assert state.step == 3 and state.frames_done == 1 and len(recs) == 1
    rec = recs[0]
    assert rec.inserted and rec.keyframes == 1 and rec.octants_created > 0
    assert set(rec.losses) == {"recon", "eik", "proj"} and rec.wall_ms > 0


def test_same_seed_same_trajectory():
    fs = frames()
    a, ra = run_online(fs, state=tiny_state())
    b, rb = run_online(fs, state=tiny_state())
    assert [r.losses for r in ra] == [r.losses for r in rb]
    for x, y in zip(a.model.param_arrays(), b.model.param_arrays()):
        assert x.tobytes() == y.tobytes()


def test_zero_weights_leave_parameters_unchanged():
    zero = {"recon_surface": 0, "recon_perturbed": 0, "eik_surface": 0, "eik_free": 0, "proj": 0}
    state = tiny_state(weights=zero)
    state.model.net.mlp.weights[-1][:] = 0.1  # make the residual branch live
    fr = frames(1)[0]
    state.model.octree.insert_points(fr.points)
    state.sync_octree()
    before = [p.copy() for p in state.model.param_arrays()]
    _, _, b = small_problem(0)
    train_step(state, b)
    for p, q in zip(before, state.model.param_arrays()):
        assert p.tobytes() == q.tobytes()


def test_loss_mostly_non_increasing_on_fixed_batch():
    state = tiny_state()
    fr = frames(1, rays=400)[0]
    state.model.octree.insert_points(fr.points)
    from gradsdf.sampling import generate_batch
    b = generate_batch([fr], 256, state.config.sampling, seed=[0, 0])
    totals = [train_step(state, b).total for _ in range(51)]
    drops = sum(t1 <= t0 for t0, t1 in zip(totals, totals[1:]))
    assert drops >= 45
    assert totals[-1] < totals[0]


def test_non_finite_loss_raises():
    state = tiny_state(debug_inject_nan=True)
    with pytest.raises(NonFiniteLossError):
        run_online(frames(1), state=state)


def test_empty_frame_skipped_with_warning(caplog):
    fs = frames(2)
    empty_frame = Frame(fs[0].origin, np.zeros((0, 3)), id=9)
    state, recs = run_online([fs[0], empty_frame, fs[1]], state=tiny_state())
    assert [r.frame_id for r in recs] == [fs[0].id, fs[1].id]
    assert state.frames_done == 3
    assert "skipping frame 9" in caplog.text
