import json

import numpy as np
import pytest

from sahmr.bench import (Models, make_frames, ordering_checks, predict, run_benchmark, summary_csv,
                         train_models, write_reports)
from sahmr.config import VARIANTS, RunConfig
from sahmr.errors import ConfigError, MissingCheckpoint

TINY = dict(n_pretrain=16, n_train=4, n_test=4, stage1_steps=5, stage1_hidden=16, voxels_per_frame=32,
            mesh_steps=5, mesh_batch=2, saopt_iters=15)


@pytest.fixture(scope="module")
def cfg():
    return RunConfig(**TINY)


@pytest.fixture(scope="module")
def models(cfg, body):
    return train_models(cfg, body)


@pytest.fixture(scope="module")
def bench(cfg, models, body):
    return run_benchmark(cfg, models=models, body=body)


def test_make_frames_deterministic(cfg):
    a, b = make_frames(cfg, "test", 2), make_frames(cfg, "test", 2)
    for fa, fb in zip(a, b):
        assert np.array_equal(fa.body_gt, fb.body_gt)
    assert not np.array_equal(a[0].body_gt, make_frames(cfg, "train", 1)[0].body_gt)


def test_empty_frames(cfg, models, body):
    with pytest.raises(ConfigError):
        run_benchmark(cfg, frames=[], models=models, body=body)


def test_all_variants_reported(bench, cfg):
    reports, timing = bench
    assert tuple(reports) == VARIANTS
    for v, rep in reports.items():
        agg = rep.aggregate()
        assert np.isfinite(agg["g_mpjpe"]) and np.isfinite(agg["pen_e"])
        assert timing[v]["stage2"] >= 0
    assert np.isnan(reports["trunk-only"].aggregate()["precision"])
    assert reports["oracle-both"].aggregate()["precision"] == 1.0


def test_ordering_keys(bench):
    checks = ordering_checks(bench[0])
    assert set(checks) == {"scene_aware_beats_trunk_gmpjpe", "scene_aware_beats_trunk_pene",
                           "oracle_both_best_cerr"}


def test_checkpoint_round_trip(cfg, models, body, tmp_path):
    models.save(tmp_path)
    back = Models.load(tmp_path, cfg, body)
    frame = make_frames(cfg, "test", 1)[0]
    for v in ("sa-hmr", "trunk-only"):
        a, _, _ = predict(v, frame, models, body, cfg)
        b, _, _ = predict(v, frame, back, body, cfg)
        assert np.array_equal(a, b)


def test_missing_checkpoint(cfg, body, tmp_path):
    with pytest.raises(MissingCheckpoint):
        Models.load(tmp_path, cfg, body)
    with pytest.raises(MissingCheckpoint):
        run_benchmark(cfg.with_overrides(checkpoint_dir=str(tmp_path)), train=False, body=body)


def test_reports_written(bench, tmp_path):
    out = write_reports(bench[0], tmp_path, figures=True)
    assert (out / "summary.png").stat().st_size > 0
    assert (out / "summary.csv").read_text() == summary_csv(bench[0])
    agg = json.loads((out / "summary.json").read_text())
    assert set(agg) == set(VARIANTS)
    for v in VARIANTS:
        assert (out / "reports" / f"{v}.csv").exists()
        assert (out / "reports" / f"{v}.json").exists()


def test_rerun_is_identical(bench, cfg, models, body):
    again, _ = run_benchmark(cfg, models=models, body=body)
    assert summary_csv(again) == summary_csv(bench[0])


def test_workers_match_serial(bench, cfg, models, body):
    par, _ = run_benchmark(cfg.with_overrides(workers=2, variant="sa-hmr"), models=models, body=body)
    assert summary_csv(par) == summary_csv({"sa-hmr": bench[0]["sa-hmr"]})
