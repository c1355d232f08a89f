import math
import warnings

import numpy as np
import pytest

from segxfer.datagen import DatasetSpec, Sample, make_dataset
from segxfer.errors import ContractViolation
from segxfer.harness import cli
from segxfer.harness.config import build_config, load_config, parse_config_text, parse_value
from segxfer.harness.experiments import sign_test
from segxfer.harness.report import aggregate, epochs_to_fraction, mean_curve, write_report
from segxfer.harness.training import RunLog, RunRecord, finetune, pretrain
from segxfer.transfer import decode_checkpoint, encode_checkpoint

TINY = {"data.image_size": 16, "data.n_samples": 24, "unet.depth": 2, "unet.base_channels": 4,
        "unet.embed_dim": 8, "epochs": 2, "batch_size": 8, "eval_period": 1, "log.wallclock": False}


def tiny(**kw):
    return build_config({**TINY, **kw})


def rec(seed, epoch, thr, soft=None):
    return RunRecord(seed, epoch, 0.5, thr if soft is None else soft, thr, 0.0)


# ---------------------------------------------------------------- config

def test_parse_values():
    assert parse_value("3") == 3 and parse_value("1e-3") == 1e-3 and parse_value("true") is True
    assert parse_value("0, 1, 2") == [0, 1, 2] and parse_value("disk") == "disk" and parse_value("none") is None


def test_config_text_and_nesting(tmp_path):
    text = "# comment\ntask = conrec\nunet.depth = 2   # trailing\ndata.image_size = 32\nseeds = 0, 1\n"
    assert parse_config_text(text) == {"task": "conrec", "unet.depth": 2, "data.image_size": 32, "seeds": [0, 1]}
    path = tmp_path / "c.cfg"
    path.write_text(text)
    cfg = load_config(path, {"epochs": 3})
    assert cfg.task == "conrec" and cfg.unet.depth == 2 and cfg.unet.input_size == 32 and cfg.epochs == 3
    assert cfg.seeds == [0, 1]


@pytest.mark.parametrize("bad", [{"unet.depht": 3}, {"bogus": 1}, {"zzz.a": 1}, {"task": "moco"}])
def test_config_rejects_unknown(bad):
    with pytest.raises(ContractViolation):
        build_config(bad)


def test_cosine_schedule_endpoints():
    cfg = tiny(**{"optim.schedule": "cosine", "optim.lr": 0.1})
    assert cfg.optim.lr_at(1, 10) == pytest.approx(0.1)
    assert cfg.optim.lr_at(6, 10) == pytest.approx(0.05)
    lrs = [cfg.optim.lr_at(e, 10) for e in range(1, 11)]
    assert all(a > b for a, b in zip(lrs, lrs[1:])) and lrs[-1] > 0
    assert tiny().optim.lr_at(7, 10) == tiny().optim.lr
    with pytest.raises(ContractViolation):
        tiny(**{"optim.schedule": "step"})


def test_config_line_without_equals():
    with pytest.raises(ContractViolation, match=":2:"):
        parse_config_text("task = seg\njunk line\n")


# ---------------------------------------------------------------- RunLog and report

def test_runlog_csv_round_trip_and_ordering():
    log = RunLog()
    log.add(rec(0, 2, 0.5))
    log.add(rec(0, 4, 0.75))
    log.add(rec(1, 2, 0.25))
    assert log.to_csv().splitlines()[0] == "seed,epoch,train_loss,soft_dice,thr_dice,seconds"
    assert RunLog.from_csv(log.to_csv()).to_csv() == log.to_csv()
    with pytest.raises(ContractViolation):
        log.add(rec(0, 4, 0.1))


def test_report_single_run_has_zero_std():
    log = RunLog([rec(0, 1, 0.3), rec(0, 2, 0.6)])
    a = aggregate("x", log)
    assert a.n_seeds == 1 and a.mean == pytest.approx(0.6) and a.std == 0.0


def test_report_mean_and_population_std():
    log = RunLog([rec(0, 1, 0.5), rec(0, 2, 0.8), rec(1, 1, 0.5), rec(1, 2, 0.9)])
    a = aggregate("x", log)
    assert a.mean == pytest.approx(0.85) and a.std == pytest.approx(0.05)
    assert mean_curve(log) == [(1, 0.5, 0.5), (2, pytest.approx(0.85), pytest.approx(0.85))]


def test_epochs_to_ninety_percent_is_first_crossing():
    curve = [rec(0, e, v) for e, v in zip(range(2, 22, 2), np.linspace(0.1, 1.0, 10))]
    expected = next(r.epoch for r in curve if r.thr_dice >= 0.9 * curve[-1].thr_dice)
    assert epochs_to_fraction(curve) == expected == 18


def test_write_report(tmp_path):
    logs = {"a": RunLog([rec(0, 1, 0.4), rec(0, 2, 0.8)]), "b": RunLog([rec(0, 1, 0.2), rec(0, 2, 0.4)])}
    curves, table = write_report(logs, tmp_path)
    assert table.read_text().splitlines()[1].startswith("a,1,0.800000,0.000000,2.000,2.000")
    assert len(curves.read_text().splitlines()) == 5


def test_sign_test():
    assert sign_test(np.ones(5), np.zeros(5)) == pytest.approx(1 / 32)
    assert sign_test(np.array([1, 0, 1]), np.array([0, 1, 0])) == pytest.approx(0.5)
    assert sign_test(np.zeros(3), np.zeros(3)) == 1.0


# ---------------------------------------------------------------- training loops

def test_pretrain_best_epoch_and_meta():
    cfg = tiny(task="seg", epochs=3)
    result = pretrain(cfg, make_dataset(cfg.data), seed=0)
    assert 1 <= result.best_epoch <= 3
    assert [r.epoch for r in result.runlog.records] == [1, 2, 3]
    vals = [r.val_loss for r in result.runlog.records]
    assert result.meta["best_val_loss"] == min(vals)
    assert all(0 <= r.thr_dice <= 1 for r in result.runlog.records)


def test_simclr_never_touches_decoder():
    cfg = tiny(task="simclr")
    result = pretrain(cfg, make_dataset(cfg.data), seed=0)
    assert result.optimizer_keys and not any(k.startswith(("decoder/", "heads/recon")) for k in result.optimizer_keys)
    assert all(k.startswith(("encoder/", "heads/proj/")) for k in result.optimizer_keys)


def test_conrec_loss_decreases():
    cfg = tiny(task="conrec", epochs=10, **{"data.n_samples": 32, "optim.lr": 3e-3})
    result = pretrain(cfg, make_dataset(cfg.data), seed=0)
    losses = [r.train_loss for r in result.runlog.records]
    assert losses[9] < losses[0]


def test_nan_loss_aborts_with_history():
    cfg = tiny(task="seg", epochs=3)
    samples = make_dataset(cfg.data)
    samples = [Sample(image=np.full_like(s.image, np.nan), mask=s.mask) for s in samples]
    with pytest.raises(ContractViolation, match="last finite") as e:
        pretrain(cfg, samples, seed=0)
    assert e.value.code == "nan_loss"


def test_finetune_is_deterministic_and_scenario_aware():
    cfg = tiny(task="seg", fraction=0.5)
    samples = make_dataset(cfg.data)
    a = finetune(cfg, samples, 0, None, "random-init").to_csv()
    b = finetune(cfg, samples, 0, None, "random-init").to_csv()
    assert a == b
    ckpt = decode_checkpoint(encode_checkpoint(pretrain(tiny(task="seg"), samples, 1).params, meta={"task": "seg"}))
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        c = finetune(cfg, samples, 0, ckpt, "random-init").to_csv()
    assert c == a and any("ignores" in str(w.message) for w in caught)
    assert finetune(cfg, samples, 0, ckpt, "seg-enc").to_csv() != a


def test_finetune_rejects_tiny_split():
    cfg = tiny(task="seg", fraction=0.05)
    with pytest.raises(ContractViolation):
        finetune(cfg, make_dataset(cfg.data), 0, None, "random-init")


# ---------------------------------------------------------------- CLI

def write_cfg(path, **kw):
    items = {**TINY, **kw}
    path.write_text("".join(f"{k} = {', '.join(map(str, v)) if isinstance(v, list) else v}\n"
                            for k, v in items.items()))
    return path


def test_cli_pipeline(tmp_path, capsys):
    data = tmp_path / "data"
    cfg = write_cfg(tmp_path / "seg.cfg", task="seg")
    assert cli.main(["datagen", "--config", str(cfg), "--out", str(data)]) == 0
    assert "empty_masks=0" in capsys.readouterr().out
    manifest = (data / "manifest.txt").read_bytes()
    cli.main(["datagen", "--config", str(cfg), "--out", str(data)])
    assert (data / "manifest.txt").read_bytes() == manifest

    pre = write_cfg(tmp_path / "pre.cfg", task="seg", dataset=str(data))
    assert cli.main(["pretrain", "--config", str(pre), "--seed", "3", "--out", str(tmp_path / "ck")]) == 0
    ckpt = tmp_path / "ck" / "seg_seed3.sxl"
    assert ckpt.exists() and (tmp_path / "ck/runlogs/seg_seed3.csv").exists()

    ft = write_cfg(tmp_path / "ft.cfg", task="seg", dataset=str(data), scenario="seg-enc", checkpoint=str(ckpt),
                   fraction=0.5, seeds=[0, 1], name="enc")
    assert cli.main(["finetune", "--config", str(ft), "--out", str(tmp_path / "runs")]) == 0
    out = capsys.readouterr().out
    assert "mean=" in out and (tmp_path / "runs/enc.csv").exists()

    rep = write_cfg(tmp_path / "rep.cfg", runlog_dir=str(tmp_path / "runs"))
    assert cli.main(["report", "--config", str(rep), "--out", str(tmp_path / "rep")]) == 0
    lines = (tmp_path / "rep/aggregate.csv").read_text().splitlines()
    assert lines[1].startswith("enc,2,")

    models = [f"a:{ckpt}", f"b:{ckpt}"]
    ck = write_cfg(tmp_path / "cka.cfg", models=models, probe=str(data))
    assert cli.main(["cka", "--config", str(ck), "--out", str(tmp_path / "cka")]) == 0
    rows = (tmp_path / "cka/similarity.csv").read_text().splitlines()
    assert rows[0] == "model,a,b" and rows[1].split(",")[2] == "1.000000"


def test_cli_error_line(tmp_path, capsys):
    cfg = write_cfg(tmp_path / "bad.cfg", **{"unet.depht": 3})
    assert cli.main(["pretrain", "--config", str(cfg)]) != 0
    err = capsys.readouterr().err.strip()
    assert err.startswith("ERR harness:config ") and "\n" not in err
    cfg = write_cfg(tmp_path / "ft.cfg", scenario="seg-enc", checkpoint=str(tmp_path / "none.sxl"))
    assert cli.main(["finetune", "--config", str(cfg)]) != 0
    assert capsys.readouterr().err.startswith("ERR transfer:missing")


def test_cli_checksum_error(tmp_path, capsys):
    cfg = tiny(task="seg")
    raw = bytearray(encode_checkpoint(pretrain(cfg, make_dataset(cfg.data), 0).params, meta={"task": "seg"}))
    raw[100] ^= 0xFF
    (tmp_path / "bad.sxl").write_bytes(bytes(raw))
    ft = write_cfg(tmp_path / "ft.cfg", scenario="seg-enc", checkpoint=str(tmp_path / "bad.sxl"), fraction=0.5)
    assert cli.main(["finetune", "--config", str(ft)]) != 0
    assert capsys.readouterr().err.startswith("ERR transfer:checksum")


def test_math_sanity():
    assert math.isclose(0.5 * (0.8 + 0.9), 0.85)
