import json
import math

import numpy as np
import pytest

from rfn.autodiff import Tape
from rfn.cells import Batch, make_cell
from rfn.data import Dataset, Instance, split
from rfn.flow import BaseHead, FlowField
from rfn.gbm import GbmConfig, simulate, subsample_asyn, subsample_syn
from rfn.model import Model
from rfn.ode import IntegrationSpec
from rfn.train import (Adam, Checkpoint, RunConfig, TrainingDiverged, build_model, evaluate,
                       forecast, make_report, one_step_samples, read_report, rollout, train,
                       write_json)
from conftest import random_instance


@pytest.fixture(scope="module")
def gbm_syn():
    return split(subsample_syn(simulate(GbmConfig(n_instances=40, seed=0)), 0.3, 1), seed=0)


@pytest.fixture(scope="module")
def gbm_asyn():
    return split(subsample_asyn(simulate(GbmConfig(n_instances=40, seed=0)), 0.3, 1), seed=0)


def small(**kw):
    base = dict(hidden=8, epochs=2, batch_size=16, flow_steps=4, standardize=True, n_samples=20)
    return RunConfig(**dict(base, **kw))


def test_single_observation_mle():
    x = np.array([0.7, -1.2])
    cell = make_cell("gruode", 2, 4, seed=0)
    # one point with a full covariance only pins mu to a line through x; the
    # per-dimension base makes the maximizer unique
    head = BaseHead(2, 4, full_cov=False, seed=1)
    field = FlowField(2, 4)
    field.params = {k: np.zeros_like(v) for k, v in field.params.items()}
    model = Model(cell, head, field, "syn", IntegrationSpec(0, 1, 1))
    batch = Batch.from_instances([Instance([0.5], x[:, None], np.ones((2, 1)))])
    params = dict(head.params)
    opt = Adam(params, lr=0.02, clip=None)
    for i in range(1500):
        opt.lr = 0.02 * 0.997 ** i  # the variance collapses to the floor; decay avoids oscillation
        tape = Tape()
        P = tape.params_from(dict(model.params, **params))
        grads = tape.backward(model.loss(P, batch, tape))
        opt.step(params, {k: grads[k] for k in params})
    model.set_params(dict(model.params, **params))
    t = Tape(record=False)
    mu, _ = head.forward(t.params_from(head.params), t.const(_pre_state(model, batch)))
    assert np.max(np.abs(mu.data[0] - x)) < 1e-3


def _pre_state(model, batch):
    from rfn.cells import gather_events, run_batch
    t = Tape(record=False)
    P = t.params_from(model.params)
    pre, _ = run_batch(model.cell, P, batch, t)
    return gather_events(pre, batch).data


def test_gaussian_baseline_smoke(gbm_syn):
    ckpt = train(small(joint="gaussian", epochs=5, lr=5e-3), gbm_syn)
    losses = [tr for _, tr, _ in ckpt.history]
    assert all(math.isfinite(v) for v in losses)
    assert losses[-1] < losses[0]
    assert all(b <= a + 1e-9 for a, b in zip(losses, losses[1:]))


def test_asyn_objective_is_syn_objective_over_d(rng):
    insts = [random_instance(rng, dim=3, n_events=int(n), iid=str(i))
             for i, n in enumerate(rng.integers(1, 6, size=5))]
    cell = make_cell("gruode", 3, 4, seed=2)
    head = BaseHead(3, 4, full_cov=False, seed=3)
    field = FlowField(3, 4, seed=4, init_scale=1.0)
    batch = Batch.from_instances(insts)
    syn = Model(cell, head, field, "syn").loss_value(batch)
    asyn = Model(cell, head, field, "asyn").loss_value(batch)
    assert abs(asyn - syn / 3) < 1e-8


def test_loss_weights_each_instance_equally(rng):
    cell = make_cell("gruode", 2, 3, seed=0)
    model = Model(cell, BaseHead(2, 3, seed=1), None, "syn")
    a = random_instance(rng, dim=2, n_events=1, iid="a")
    b = random_instance(rng, dim=2, n_events=6, iid="b")
    both = model.loss_value(Batch.from_instances([a, b]))
    sep = [model.loss_value(Batch.from_instances([i])) for i in (a, b)]
    assert abs(both - np.mean(sep)) < 1e-12


def test_masked_values_change_neither_loss_nor_gradients(rng):
    inst = random_instance(rng, dim=3, n_events=4, p_obs=0.5)
    model = build_model(RunConfig(mode="asyn", hidden=4, flow_steps=5), 3)
    b1 = Batch.from_instances([inst])
    b2 = Batch.from_instances([inst])
    b2.x = b2.x + (1 - b2.m) * rng.normal(size=b2.x.shape) * 100

    def run(batch):
        t = Tape()
        loss = model.loss(t.params_from(model.params), batch, t)
        return float(loss.data), t.backward(loss)
    (la, ga), (lb, gb) = run(b1), run(b2)
    assert la == lb and all(np.array_equal(ga[k], gb[k]) for k in ga)


def test_syn_mode_rejects_asyn_data(gbm_asyn):
    with pytest.raises(ValueError, match="syn mode"):
        train(small(mode="syn"), gbm_asyn)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_reports_epoch_and_batch():
    inst = Instance([0.5], [[1e200]], [[1.0]])
    ds = Dataset([inst], 1, splits={"0": "train"})
    with pytest.raises(TrainingDiverged) as info:
        train(RunConfig(hidden=2, epochs=1, standardize=False), ds)
    assert info.value.epoch == 1 and info.value.batch == 0


def test_run_config_round_trip_and_validation():
    cfg = small(cell="odelstm", joint="gaussian", mode="asyn")
    assert RunConfig.from_json(json.loads(json.dumps(cfg.to_json()))) == cfg
    assert cfg.name == "ODELSTM" and small().name == "RFN-GRUODE"
    with pytest.raises(ValueError):
        RunConfig(cell="lstm")


@pytest.mark.parametrize("mode", ["syn", "asyn"])
def test_seeded_runs_are_identical(mode, gbm_syn, gbm_asyn):
    ds = gbm_syn if mode == "syn" else gbm_asyn
    a, b = train(small(mode=mode, seed=3), ds), train(small(mode=mode, seed=3), ds)
    assert a.history == b.history
    assert evaluate(a, ds, 20) == evaluate(b, ds, 20)


@pytest.mark.parametrize("cell", ["gruode", "gru-d", "odernn", "odelstm"])
def test_every_cell_trains_in_both_modes(cell, gbm_syn, gbm_asyn):
    for mode, ds in (("syn", gbm_syn), ("asyn", gbm_asyn)):
        ckpt = train(small(cell=cell, mode=mode, epochs=1), ds)
        res = evaluate(ckpt, ds, 10)
        assert all(math.isfinite(res[k]) for k in ("crps", "crps_sum", "cs"))


def test_checkpoint_reload_is_bit_identical(tmp_path, gbm_asyn):
    ckpt = train(small(mode="asyn"), gbm_asyn)
    ckpt.save(tmp_path / "ckpt")
    back = Checkpoint.load(tmp_path / "ckpt")
    assert back.config == ckpt.config and back.epoch == ckpt.epoch
    insts = gbm_asyn.subset("test").instances
    a = one_step_samples(ckpt, insts, 7, np.random.default_rng(0))
    b = one_step_samples(back, insts, 7, np.random.default_rng(0))
    assert np.array_equal(a[0], b[0])
    batch = Batch.from_instances(insts)
    assert ckpt.model.loss_value(batch) == back.model.loss_value(batch)


def test_report_round_trip(tmp_path, gbm_syn):
    ckpt = train(small(joint="gaussian"), gbm_syn)
    res = evaluate(ckpt, gbm_syn, 10)
    report = make_report({res["model"]: [res, res]})
    write_json(report, tmp_path / "r.json")
    assert read_report(tmp_path / "r.json") == json.loads(json.dumps(report))
    assert report["models"]["GRUODE"]["crps"]["std"] == 0.0
    assert "one-step-ahead" in report["protocol"]
    (tmp_path / "bad.json").write_text("{}")
    with pytest.raises(ValueError):
        read_report(tmp_path / "bad.json")


def test_oracle_ensembles_score_zero():
    from rfn.metrics import score_all
    obs = np.random.default_rng(0).normal(size=(6, 2))
    scores = score_all(np.repeat(obs[:, None, :], 5, axis=1), obs)
    assert scores["crps"] < 1e-15 and scores["crps_sum"] < 1e-15


def test_forecast_index_checks_and_single_draw(gbm_syn):
    ckpt = train(small(), gbm_syn)
    inst = gbm_syn.subset("test").instances[0]
    with pytest.raises(IndexError):
        forecast(ckpt, inst, inst.n_events, 5)
    ens = forecast(ckpt, inst, 2, 1, np.random.default_rng(0))
    assert ens.samples.shape == (1, 5)


def test_zero_flow_forecast_is_one_base_draw(gbm_syn):
    ckpt = train(small(), gbm_syn)
    ckpt.model.field.params = {k: np.zeros_like(v) for k, v in ckpt.model.field.params.items()}
    inst = gbm_syn.subset("test").instances[0]
    ens = forecast(ckpt, inst, 3, 1, np.random.default_rng(5))
    model = ckpt.model
    head_inst = Instance(inst.times[:4], inst.values[:, :4], inst.mask[:, :4])
    s = ckpt.standardization
    h = _pre_state(model, Batch.from_instances([Instance(head_inst.times,
                   (head_inst.values - s.mean[:, None]) / s.std[:, None], head_inst.mask)]))
    t = Tape(record=False)
    mu, L = model.head.forward(t.params_from(model.params), t.const(h))
    eps = np.random.default_rng(5).standard_normal((4, 1, 5))[3, 0]
    expected = s.invert(mu.data[3] + L.data[3] @ eps)
    assert np.max(np.abs(ens.samples[0] - expected)) < 1e-12


def test_forecast_ignores_current_and_future_values(gbm_asyn):
    ckpt = train(small(mode="asyn"), gbm_asyn)
    inst = gbm_asyn.subset("test").instances[0]
    k = 4
    v = inst.values.copy()
    v[:, k:] *= 3.0
    a = forecast(ckpt, inst, k, 10, np.random.default_rng(1))
    b = forecast(ckpt, Instance(inst.times, v, inst.mask), k, 10, np.random.default_rng(1))
    assert np.array_equal(a.samples, b.samples)


def test_rollout_spread_grows_with_horizon():
    ds = split(subsample_syn(simulate(GbmConfig(n_instances=120, seed=3)), 0.3, 1), seed=0)
    ckpt = train(small(epochs=6, lr=5e-3, hidden=16), ds)
    inst = ds.subset("test").instances[0]
    paths = rollout(ckpt, inst, 1, 200, np.random.default_rng(0))
    width = np.quantile(paths, 0.9, axis=0) - np.quantile(paths, 0.1, axis=0)  # (steps, D)
    assert np.all(width[-1] > width[0])
