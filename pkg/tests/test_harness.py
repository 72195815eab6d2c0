import json
import math

import numpy as np
import pytest

from protoshape import checkpoint, cli, harness
from protoshape import data as D
from protoshape import pretext as P
from protoshape.config import ConfigError, load_config, override


def run_cfg(small_cfg, out, **changes):
    base = load_config(small_cfg)
    cfg = override(base, {"out_dir": str(out), "workers": 1, **changes})
    harness._share_pretext(base, cfg)
    return cfg


@pytest.fixture(scope="module")
def trained(small_cfg, tmp_path_factory):
    cfg = run_cfg(small_cfg, tmp_path_factory.mktemp("trained"))
    harness.write_config(cfg)
    return cfg, harness.train(cfg)


# pretext and prototypes

def test_pretext_report(small_cfg):
    cfg = load_config(small_cfg)
    rep = json.loads(harness._paths(cfg)["pretext_report"].read_text())
    assert rep["finished"] and rep["epochs"] == 4 and 0 <= rep["held_out_accuracy"] <= 1


def test_pretext_zero_epochs_writes_checkpoint(small_cfg, tmp_path):
    cfg = override(load_config(small_cfg), {"out_dir": str(tmp_path), "pretext.epochs": 0})
    rep = harness.train_pretext(cfg)
    ext = harness.load_extractor(cfg)
    with pytest.warns(RuntimeWarning):
        P.extract_features(ext, [np.zeros((64, 3))])
    # 24 held-out shapes: three binomial sigmas around chance
    assert abs(rep["held_out_accuracy"] - 0.25) <= 3 * math.sqrt(0.25 * 0.75 / rep["n_held_out"])


def test_pretext_resume_matches_uninterrupted(small_cfg, tmp_path):
    full = override(load_config(small_cfg), {"out_dir": str(tmp_path / "full")})
    part = override(load_config(small_cfg), {"out_dir": str(tmp_path / "part")})
    harness.train_pretext(full)
    rep = harness.train_pretext(part, stop_after=2)
    assert not rep["finished"] and not harness._paths(part)["extractor"].exists()
    harness.train_pretext(part, resume=True)
    a, b = harness._paths(full)["extractor"], harness._paths(part)["extractor"]
    assert a.read_bytes() == b.read_bytes()


def test_pretext_resume_refuses_other_config(small_cfg, tmp_path):
    cfg = override(load_config(small_cfg), {"out_dir": str(tmp_path)})
    harness.train_pretext(cfg, stop_after=1)
    other = override(cfg, {"pretext.lr": 1e-2})
    assert cli.main(["train-pretext", "--config", str(small_cfg), "--out", str(tmp_path),
                     "--set", "pretext.lr=0.01", "--resume"]) == cli.EXIT_CONFIG
    with pytest.raises(ConfigError):
        harness.train_pretext(other, resume=True)


def test_prototype_records(small_cfg):
    cfg = load_config(small_cfg)
    protos = P.load_prototypes(harness._paths(cfg)["prototypes"])
    assert len(protos) == 4 and all(p.radius > 0 for p in protos)
    em = json.loads(harness._paths(cfg)["prototype_log"].read_text())
    assert all(e["monotone"] and P.loglik_is_monotone(e["loglik"]) for e in em)
    assert all(len(e["loglik"]) == 21 for e in em)


def test_prototypes_rerun_identical(small_cfg, tmp_path):
    cfg = run_cfg(small_cfg, tmp_path)
    before = harness._paths(cfg)["prototypes"].read_bytes()
    harness.fit_prototypes(cfg)
    assert harness._paths(cfg)["prototypes"].read_bytes() == before


# training

def test_ledger_structure(trained):
    cfg, out = trained
    rows = harness.read_ledger(harness._paths(cfg)["ledger"])
    assert rows[0]["kind"] == "header" and rows[0]["config_hash"] == cfg.hash()
    assert [r["epoch"] for r in rows if r["kind"] == "epoch"] == [1, 2]
    assert rows[-1]["kind"] == "final" and rows[-1]["n_test"] == 3 * len(
        D.split_ids(D.load_manifest(cfg.data_root), "test"))
    for r in rows[1:-1]:
        assert all(np.isfinite(r[k]) for k in harness.LEDGER_METRICS)
    arrays, meta = checkpoint.load(harness._paths(cfg)["model"])
    assert meta["config_hash"] == cfg.hash()


def test_timing_isolated_in_sidecar(trained):
    cfg, _ = trained
    assert "wall" not in harness._paths(cfg)["ledger"].read_text()
    timing = harness.read_ledger(harness._paths(cfg)["timing"])
    assert timing[-1]["total_wall_s"] > 0


def test_ledger_reader_rejects_disorder(tmp_path):
    (tmp_path / "l.jsonl").write_text('{"kind": "epoch", "epoch": 2}\n{"kind": "epoch", "epoch": 1}\n')
    with pytest.raises(ValueError):
        harness.read_ledger(tmp_path / "l.jsonl")
    with pytest.raises(OSError):
        harness.read_ledger(tmp_path / "missing.jsonl")


def test_sampling_none_means_unit_weights(small_cfg, tmp_path):
    cfg = run_cfg(small_cfg, tmp_path, **{"loss.sampling": "none", "completion.epochs": 1})
    harness.train(cfg)
    arrays, _ = checkpoint.load(harness._paths(cfg)["cache"])
    assert np.all(arrays["weight"] == 1.0)
    cos_cfg = override(cfg, {"loss.sampling": "cos"})
    assert np.all(harness._weights(cos_cfg, arrays["cos"], None, None) > 1.0)


def test_prior_cache_check(trained):
    cfg, _ = trained
    m = D.load_manifest(cfg.data_root)
    ext = harness.load_extractor(cfg)
    protos = P.load_prototypes(harness._paths(cfg)["prototypes"])
    keys = [(i, v) for i in D.split_ids(m, "val") for v in range(3)]
    cache = harness.compute_priors(cfg, m, ext, protos, keys)
    harness.check_prior_cache(cfg, m, ext, protos, cache)
    cache.u[0] += 1e-9
    with pytest.raises(harness.NumericFailure):
        harness.check_prior_cache(cfg, m, ext, protos, cache)


def test_worker_count_does_not_change_results(trained, tmp_path):
    cfg, _ = trained
    threaded = override(cfg, {"out_dir": str(tmp_path), "workers": 3})
    harness._share_pretext(cfg, threaded)
    harness.train(threaded)
    for key in ("ledger", "model"):
        assert harness._paths(threaded)[key].read_bytes() == harness._paths(cfg)[key].read_bytes()


def test_split_tags():
    tags = harness._split_tags(np.arange(10.0)[::-1])
    assert list(tags[:2]) == ["nonstandard"] * 2 and list(tags[-2:]) == ["standard"] * 2
    assert list(tags[2:8]) == ["mid"] * 6


# evaluation

def test_eval_oracle(trained):
    cfg, _ = trained
    res = harness.evaluate(override(cfg, {"eval.oracle": True}))
    rows = (harness._paths(cfg)["eval_csv"]).read_text().splitlines()[1:]
    assert len(rows) == res["n"] == len(D.split_ids(D.load_manifest(cfg.data_root), "test"))
    for line in rows:
        _, _, cd, f, *_ = line.split(",")
        assert float(cd) == 0.0 and float(f) == 1.0
    assert res["consistency"] == 0.0


def test_eval_model(trained):
    cfg, _ = trained
    res = harness.evaluate(override(cfg, {"eval.split": "val"}))
    assert res["n"] == len(D.split_ids(D.load_manifest(cfg.data_root), "val"))
    assert np.isfinite(res["consistency"]) and res["consistency"] >= 0
    assert 0 <= res["f_score"] <= 1 and res["cd_dense"] > 0


# ablation and report

def test_ablation_rows(small_cfg, tmp_path):
    cfg = run_cfg(small_cfg, tmp_path, **{"completion.epochs": 1})
    rows = harness.ablate(cfg)
    assert [r["method"] for r in rows] == list("ABCDEFGH")
    cols = (tmp_path / "ablate" / "report.csv").read_text().splitlines()[0].split(",")
    assert cols[:8] == ["method", "seed", "SPF", "Pri", "DS", "Proj", "CD", "F-Score"]
    by = {r["method"]: r for r in rows}
    assert (by["A"]["reference_CD_x1e3"], by["H"]["reference_CD_x1e3"]) == (9.16, 8.05)
    assert (by["A"]["reference_F-Score"], by["H"]["reference_F-Score"]) == (0.635, 0.709)
    assert (by["A"]["SPF"], by["A"]["Pri"], by["A"]["DS"], by["A"]["Proj"]) == ("-", "-", "-", "-")
    assert (by["H"]["SPF"], by["H"]["Pri"], by["H"]["DS"], by["H"]["Proj"]) == (3, "yes", "Cos", "yes")
    assert by["F"]["Pri"] == "-" and by["G"]["DS"] == "L2"


def test_ablation_f_neutralises_prior(small_cfg):
    cfg = harness.ablation_config(load_config(small_cfg), "F")
    assert cfg.loss.spf_levels == 3 and not cfg.loss.use_prior


def test_report_four_series(trained, tmp_path):
    cfg, _ = trained
    ledger = harness._paths(cfg)["ledger"]
    res = harness.report([ledger, ledger], tmp_path)
    assert res["series"] == ["baseline/nonstandard", "baseline/standard", "ours/nonstandard", "ours/standard"]
    lines = (tmp_path / "curves.csv").read_text().splitlines()
    assert lines[0] == "run,epoch,metric,value"
    assert len(lines) - 1 == 2 * 2 * len(harness.LEDGER_METRICS)
    assert {ln.split(",")[0] for ln in lines[1:]} == {"baseline", "ours"}
