import csv
import io

import numpy as np
import pytest

from orthovox.benchkit import (CostPoint, CostReport, StageTimer, count_macs, network_macs, sweep_cameras,
                               sweep_granularity, sweep_persons)
from orthovox.config import RunConfig
from orthovox.nncore import BatchNorm, Conv2d, ConvTranspose2d, Linear, ReLU, Sequential
from orthovox.pipeline import build_models


def conv(cin, cout, k, rng=None):
    return Conv2d(cin, cout, k, rng or np.random.default_rng(0))


def test_conv_macs_example():
    assert count_macs(conv(32, 32, 3), (1, 32, 64, 64)) == 37_748_736


def test_unit_conv_is_one_mac():
    assert count_macs(conv(1, 1, 1), (1, 1, 1, 1)) == 1


def test_halving_spatial_quarters_macs():
    net = Sequential(conv(8, 8, 3), BatchNorm(8), ReLU(), conv(8, 4, 1))
    assert count_macs(net, (1, 8, 32, 32)) * 4 == count_macs(net, (1, 8, 64, 64))


def test_deconv_and_linear_formulas():
    rng = np.random.default_rng(0)
    assert count_macs(ConvTranspose2d(4, 6, 2, rng), (1, 4, 5, 5)) == 5 * 5 * 4 * 6 * 4
    assert count_macs(Linear(7, 3, rng), (2, 7)) == 2 * 7 * 3


def test_batch_scales_macs():
    assert count_macs(conv(3, 5, 3), (4, 3, 8, 8)) == 4 * count_macs(conv(3, 5, 3), (1, 3, 8, 8))


def test_count_macs_restores_mode():
    net = conv(2, 2, 3)
    net.train()
    count_macs(net, (1, 2, 4, 4))
    assert net.training


def test_pose_net_resolution_ratio():
    models = build_models(RunConfig())
    ratio = count_macs(models.pose, (3, 15, 32, 32)) / count_macs(models.pose, (3, 15, 64, 64))
    assert ratio == pytest.approx(0.25, rel=0.10)


def test_stage_timer_nesting():
    ticks = iter([0.0, 1.0, 1.5, 4.0, 10.0, 10.25])
    t = StageTimer(clock=lambda: next(ticks))
    with t.stage("outer"):
        with t.stage("inner"):
            pass
    with t.stage("inner"):
        pass
    assert t.seconds == {"inner": 0.75, "outer": 4.0}
    assert t.ms()["inner"] == 750.0


def test_stage_timer_records_on_error():
    ticks = iter([0.0, 2.0])
    t = StageTimer(clock=lambda: next(ticks))
    with pytest.raises(RuntimeError):
        with t.stage("boom"):
            raise RuntimeError
    assert t.seconds == {"boom": 2.0}


def test_cost_report_csv():
    rep = CostReport([CostPoint("persons", 3, {"hdn": 1.23456, "jln": 2.0}, {"hdn": 10}, runs=5)], "abc")
    rows = list(csv.DictReader(io.StringIO(rep.to_csv())))
    assert rows[0] == {"sweep": "persons", "axis_value": "3", "stage": "hdn", "best_ms": "1.2346",
                       "macs": "10", "params": "", "runs": "5", "config_digest": "abc"}
    assert rep.series("persons", "jln") == ([3], [2.0])


def test_camera_sweep_macs_constant(small_cfg):
    rep = sweep_cameras(small_cfg, counts=[1, 3, 6], runs=1)
    macs = [p.macs for p in rep.points]
    assert all(m == macs[0] for m in macs) and macs[0]["hdn"] > 0


def test_person_sweep_handles_zero(small_cfg):
    rep = sweep_persons(small_cfg, counts=[0, 1, 2], runs=1)
    assert [p.axis_value for p in rep.points] == [0, 1, 2]
    assert all(p.stage_ms["jln"] >= 0 for p in rep.points)


def test_granularity_sweep_points(small_cfg):
    rep = sweep_granularity(small_cfg, resolutions=(16, 8), runs=1)
    a, b = rep.points
    assert a.macs["jln"] == 4 * b.macs["jln"]
    assert set(a.stage_ms) == {"jln_features", "jln", "jln_total"}


def test_network_macs_keys(small_cfg):
    m = network_macs(build_models(small_cfg), small_cfg)
    assert set(m) == {"hdn", "jln", "fusion"} and all(v > 0 for v in m.values())
