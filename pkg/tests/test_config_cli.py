import csv
import hashlib
import re
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fsnet.cli import main
from fsnet.config import Config, LossWeights, PrepareConfig, TrainConfig, config_from_dict, dump_config, load_config
from fsnet.dataset_prep import FaceRecord, prepare_record, read_image
from fsnet.errors import ParseError, ValidationError
from fsnet.swapper import sample_random_face
from fsnet.synthetic import generate_synthetic_corpus
from fsnet.trainer import init_state, load_checkpoint, save_checkpoint
from conftest import micro_arch, small_arch, train_config


# ------------------------------------------------------------ config


def test_empty_file_gives_defaults(tmp_path):
    (tmp_path / "c.yaml").write_text("")
    cfg = load_config(tmp_path / "c.yaml")
    assert cfg == Config()
    assert cfg.train.lr == 2e-4 and cfg.train.beta1 == 0.5 and cfg.train.per_role_batch == 20
    w = cfg.loss
    assert (w.lambda_f_rec, w.lambda_M_rec, w.lambda_l_rec, w.lambda_lat, w.lambda_adv_g, w.lambda_adv_p, w.lambda_id) == (4000, 4000, 2000, 30, 20, 30, 100)
    assert cfg.arch.image_size == 128 and cfg.arch.d_f == 128 and cfg.arch.d_l == 8


def test_negative_lr_rejected(tmp_path):
    (tmp_path / "c.yaml").write_text("train:\n  lr: -1\n")
    with pytest.raises(ValidationError) as info:
        load_config(tmp_path / "c.yaml")
    assert any("lr" in p for p in info.value.problems)


def test_every_problem_is_listed():
    with pytest.raises(ValidationError) as info:
        config_from_dict({"train": {"lr": -1, "per_role_batch": 0, "bogus": 1}, "extra": {}})
    text = " ".join(info.value.problems)
    for needle in ("lr", "per_role_batch", "bogus", "extra"):
        assert needle in text


def test_parse_error_has_line(tmp_path):
    (tmp_path / "c.yaml").write_text("train:\n  lr: 0.1\n  seed: [1, 2\n")
    with pytest.raises(ParseError) as info:
        load_config(tmp_path / "c.yaml")
    assert info.value.line is not None and info.value.line >= 3


def test_type_errors_rejected():
    with pytest.raises(ValidationError):
        config_from_dict({"train": {"seed": "zero"}})
    with pytest.raises(ValidationError):
        config_from_dict({"arch": {"encoder_channels": [8, "x"]}})
    with pytest.raises(ValidationError):
        config_from_dict({"arch": {"image_size": 100}})  # not divisible by 2**depth


@settings(max_examples=30, deadline=None)
@given(
    st.floats(1e-6, 1.0), st.integers(1, 64), st.integers(0, 2**31), st.floats(0.0, 1e4),
    st.sampled_from([32, 64, 128]), st.sampled_from(["fail", "ones"]),
)
def test_round_trip(lr, batch, seed, lam, size, fallback):
    import tempfile

    cfg = Config(
        arch=small_arch(size),
        loss=LossWeights(lambda_id=lam),
        train=TrainConfig(lr=lr, per_role_batch=batch, seed=seed),
        prepare=PrepareConfig(image_size=size, fallback_foreground=fallback),
    )
    with tempfile.TemporaryDirectory() as d:
        dump_config(cfg, Path(d) / "c.yaml")
        assert load_config(Path(d) / "c.yaml") == cfg
    assert config_from_dict(cfg.to_dict()) == cfg


# ------------------------------------------------------------ synthetic corpus


def tree_hash(root):
    h = hashlib.sha256()
    for p in sorted(Path(root).rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_synthetic_corpus_deterministic(tmp_path):
    generate_synthetic_corpus(5, 4, 11, tmp_path / "a")
    generate_synthetic_corpus(5, 4, 11, tmp_path / "b")
    generate_synthetic_corpus(5, 4, 12, tmp_path / "c")
    assert tree_hash(tmp_path / "a") == tree_hash(tmp_path / "b") != tree_hash(tmp_path / "c")


def test_synthetic_records_pass_preparation(raw_corpus):
    import json

    from fsnet.dataset_prep import Annotation

    manifest = json.loads((raw_corpus / "manifest.json").read_text())
    faces = [r for r in manifest["records"] if r["identity"] >= 0]
    assert len(faces) == 20
    for r in faces:
        ann = Annotation.from_file(raw_corpus / f"{r['name']}.json")
        img = read_image(raw_corpus / f"{r['name']}.png")
        rec = prepare_record(img, ann, PrepareConfig(image_size=32))
        assert isinstance(rec, FaceRecord) and rec.face_mask.any() and rec.foreground_mask.any()
    params = [json.dumps(r["params"], sort_keys=True) for r in faces[::4]]
    assert len(set(params)) == 5


# ------------------------------------------------------------ CLI


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def test_unknown_subcommand_exits_2(capsys):
    with pytest.raises(SystemExit) as info:
        main(["frobnicate"])
    assert info.value.code == 2
    assert "usage" in capsys.readouterr().err


def test_version(capsys):
    with pytest.raises(SystemExit) as info:
        main(["--version"])
    assert info.value.code == 0
    assert re.match(r"fsnet \d+\.\d+", capsys.readouterr().out)


@pytest.fixture(scope="module")
def cli_ckpt(tmp_path_factory):
    st_ = init_state(train_config(small_arch(32)))
    return save_checkpoint(st_, tmp_path_factory.mktemp("cli") / "m.pt")


def test_swap_and_sample(capsys, cli_ckpt, raw_corpus, tmp_path):
    src, tgt = raw_corpus / "id000_img00.png", raw_corpus / "id001_img00.png"
    code, out, _ = run(capsys, "swap", "--ckpt", cli_ckpt, "--source", src, "--target", tgt, "--out", tmp_path / "s.png")
    assert code == 0 and (tmp_path / "s.png").exists()
    assert read_image(tmp_path / "s.png").shape == (32, 32, 3)
    code, _, _ = run(capsys, "sample", "--ckpt", cli_ckpt, "--target", tgt, "--out", tmp_path / "r.png", "--seed", 4)
    assert code == 0
    expected = np.floor(sample_random_face(cli_ckpt, read_image(tgt), seed=4) * 255 + 0.5)
    assert np.array_equal(read_image(tmp_path / "r.png"), expected.astype(np.uint8))


def test_error_paths_exit_nonzero(capsys, cli_ckpt, tmp_path):
    code, _, err = run(capsys, "swap", "--ckpt", tmp_path / "missing.pt", "--source", "a.png", "--target", "b.png", "--out", tmp_path / "o.png")
    assert code == 1 and "error" in err
    (tmp_path / "bad.yaml").write_text("train: {lr: -1}\n")
    code, _, err = run(capsys, "train", "--config", tmp_path / "bad.yaml", "--data", tmp_path, "--out", tmp_path / "o")
    assert code == 1 and "lr" in err
    code, _, _ = run(capsys, "evaluate", "--ckpt", cli_ckpt, "--data", tmp_path / "nowhere", "--pairs", 1, "--out", tmp_path / "r.csv")
    assert code == 1


@pytest.fixture(scope="module")
def cli_data(raw_corpus, tmp_path_factory):
    root = tmp_path_factory.mktemp("clidata")
    cfg = Config(arch=micro_arch(32), train=TrainConfig(per_role_batch=1, checkpoint_interval=10**6),
                 prepare=PrepareConfig(image_size=32, test_fraction=0.3))
    dump_config(cfg, root / "cfg.yaml")
    code = main(["prepare", "--input", str(raw_corpus), "--output", str(root / "prep"), "--config", str(root / "cfg.yaml")])
    assert code == 0
    return root


def test_prepare_reports_skips(capsys, raw_corpus, tmp_path, cli_data):
    code, out, _ = run(capsys, "prepare", "--input", raw_corpus, "--output", tmp_path / "p", "--config", cli_data / "cfg.yaml", "--workers", 2)
    assert code == 0
    assert "prepared 20 records, skipped 1" in out
    assert tree_hash(tmp_path / "p") == tree_hash(cli_data / "prep")


def test_train_resume_and_evaluate(capsys, cli_data, tmp_path):
    cfg = cli_data / "cfg.yaml"
    code, out, _ = run(capsys, "train", "--config", cfg, "--data", cli_data / "prep", "--out", tmp_path / "run", "--steps", 2, "--seed", 5)
    assert code == 0
    first = Path(out.strip().splitlines()[-1])
    st_ = load_checkpoint(first)
    assert st_.step == 2 and st_.config.train.seed == 5
    code, out, _ = run(capsys, "train", "--config", cfg, "--data", cli_data / "prep", "--out", tmp_path / "run", "--resume", first, "--steps", 1)
    assert code == 0 and load_checkpoint(out.strip().splitlines()[-1]).step == 3

    report = tmp_path / "report.csv"
    code, out, _ = run(capsys, "evaluate", "--ckpt", first, "--data", cli_data / "prep", "--split", "train", "--pairs", 3, "--out", report)
    assert code == 0 and "not comparable" in out
    rows = list(csv.DictReader(report.open()))
    assert sum(r["row_type"] == "pair" for r in rows) == 6
    assert {r["statistic"] for r in rows if r["row_type"] == "summary"} == {"mean", "std"}


def test_train_nonfinite_exits_1_with_diagnostics(capsys, cli_data, tmp_path):
    cfg = load_config(cli_data / "cfg.yaml")
    dump_config(cfg.replace(train=replace(cfg.train, lr=1e20)), tmp_path / "hot.yaml")
    code, _, err = run(capsys, "train", "--config", tmp_path / "hot.yaml", "--data", cli_data / "prep", "--out", tmp_path / "run", "--steps", 5)
    assert code == 1
    m = re.search(r"diagnostics: (\S+)", err)
    assert m and Path(m.group(1)).exists()


def test_synth_command(capsys, tmp_path):
    code, out, _ = run(capsys, "synth", "--out", tmp_path / "s", "--identities", 2, "--per-identity", 2, "--faceless", 1)
    assert code == 0 and "wrote 5 images" in out
