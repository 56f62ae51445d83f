import json
import zlib

import numpy as np
import pytest

from adfuse.banks import FeatureBank, load_bank, save_bank
from adfuse.cli import main
from adfuse.kb import BrandEntry, KnowledgeBase, save_kb_cache
from adfuse.manifest import read_manifest
from adfuse.training import sample_excluding
from adfuse.vision import PROMPTS_PER_ENTRY
from helpers import random_unit


def run_cli(*args):
    return main([str(a) for a in args])


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    code = run_cli(
        "synth-data", "--outdir", out, "--seed", 5,
        "--n-train", 60, "--n-val", 30, "--n-test", 30, "--dim", 16,
    )
    assert code == 0
    return out


# -- ingest -----------------------------------------------------------------


def test_ingest_counts_and_determinism(tmp_path, capsys):
    src = tmp_path / "raw.jsonl"
    rows = [
        {"name": "Everyday", "description": "Everyday brand", "source": "knowledge_graph"},
        {"name": "X", "description": None, "source": "curated_list"},
        {"name": "Acme", "description": "Acme makes anvils. Est 1949.", "source": "curated_list"},
        {"name": "Brio", "description": None, "source": "curated_list"},
        {"name": "Zest9", "description": "Zest9 is a drink.", "source": "knowledge_graph"},
    ]
    src.write_text("\n".join(json.dumps(r) for r in rows) + "\n")
    words = tmp_path / "words.txt"
    words.write_text("everyday\n")
    out1, out2 = tmp_path / "kb1.json", tmp_path / "kb2.json"
    assert run_cli("ingest", "--kb-source", src, "--word-list", words, "--output", out1) == 0
    assert "3 entries retained" in capsys.readouterr().out
    assert run_cli("ingest", "--kb-source", src, "--word-list", words, "--output", out2) == 0
    assert out1.read_bytes() == out2.read_bytes()


def test_ingest_missing_file(tmp_path, capsys):
    missing = tmp_path / "nope.jsonl"
    code = run_cli("ingest", "--kb-source", missing, "--output", tmp_path / "kb.json")
    assert code == 2
    assert str(missing) in capsys.readouterr().err


# -- synth-data + train -------------------------------------------------------


def test_synth_data_outputs_load(synth_dir):
    bank = load_bank(synth_dir / "image.adfb")
    assert bank.dim == 16 and len(bank) == 120
    rows = read_manifest(synth_dir / "manifest.jsonl")
    assert sum(r.split == "train" for r in rows) == 60
    meta = json.loads((synth_dir / "dataset.json").read_text())
    assert meta["seed"] == 5


def train_args(synth_dir, outdir, *extra):
    return [
        "train",
        "--image-bank", synth_dir / "image.adfb",
        "--label-bank", synth_dir / "label_text.adfb",
        "--scene-bank", synth_dir / "scene_text.adfb",
        "--brand-bank", synth_dir / "brand.adfb",
        "--manifest", synth_dir / "manifest.jsonl",
        "--outdir", outdir,
        "--val-k", 10,
        "--heads", 2,
        "--max-epochs", 1,
        "--n-cand", 16,
        "--n-hard", 4,
        *extra,
    ]


def test_train_lr_zero_matches_zero_shot(synth_dir, tmp_path, capsys):
    code = run_cli(*train_args(synth_dir, tmp_path / "run", "--lr", 0.0, "--seed", 3))
    assert code == 0
    out = capsys.readouterr().out
    zs = [l for l in out.splitlines() if l.startswith("zero-shot:")][0]
    zs_acc = float(zs.split("accuracy=")[1].split()[0])
    best = [l for l in out.splitlines() if l.startswith("best epoch")][0]
    assert float(best.rsplit(" ", 1)[1]) == zs_acc


def test_train_determinism(synth_dir, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run_cli(*train_args(synth_dir, a, "--seed", 4, "--log-hnm")) == 0
    assert run_cli(*train_args(synth_dir, b, "--seed", 4, "--log-hnm")) == 0
    for name in ("history.csv", "hnm_log.jsonl", "checkpoint.ckpt", "run.json"):
        assert (a / "run-seed4" / name).read_bytes() == (b / "run-seed4" / name).read_bytes()


def test_train_config_file_and_flag_precedence(synth_dir, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"seed": 9, "max_epochs": 1, "n_cand": 16, "n_hard": 4, "heads": 2}))
    out = tmp_path / "run"
    code = run_cli(
        "train", "--config", cfg,
        "--image-bank", synth_dir / "image.adfb",
        "--label-bank", synth_dir / "label_text.adfb",
        "--scene-bank", synth_dir / "scene_text.adfb",
        "--brand-bank", synth_dir / "brand.adfb",
        "--manifest", synth_dir / "manifest.jsonl",
        "--outdir", out, "--val-k", 10,
        "--seed", 11,  # flag beats file
    )
    assert code == 0
    assert (out / "run-seed11").is_dir()
    run_doc = json.loads((out / "run-seed11" / "run.json").read_text())
    assert run_doc["config"]["seed"] == 11
    assert run_doc["config"]["n_cand"] == 16


def test_hnm_log_matches_bruteforce_replay(synth_dir, tmp_path):
    out = tmp_path / "run"
    seed = 7
    n_cand, n_hard = 16, 4
    code = run_cli(*train_args(synth_dir, out, "--seed", seed, "--hnm", "full", "--log-hnm"))
    assert code == 0
    label_bank = load_bank(synth_dir / "label_text.adfb")
    rows = [r for r in read_manifest(synth_dir / "manifest.jsonl") if r.split == "train"]
    pool_rows = sorted({label_bank.row(r.label_text_id) for r in rows})
    pos_of_row = {r: i for i, r in enumerate(pool_rows)}
    own = {}
    for r in rows:
        own.setdefault(r.image_id, []).append(pos_of_row[label_bank.row(r.label_text_id)])
    log_lines = (out / f"run-seed{seed}" / "hnm_log.jsonl").read_text().splitlines()
    assert log_lines
    for line in log_lines:
        entry = json.loads(line)
        rng = np.random.default_rng(
            np.random.SeedSequence(
                [seed, entry["epoch"], entry["step"], zlib.crc32(entry["image_id"].encode())]
            )
        )
        idx = sample_excluding(len(pool_rows), sorted(own[entry["image_id"]]), n_cand, rng)
        cand_ids = [label_bank.ids[pool_rows[int(i)]] for i in idx]
        feature = np.array(entry["feature"])
        scores = [float(label_bank.get(c).astype(np.float64) @ feature) for c in cand_ids]
        expected = [
            cand_ids[i]
            for i in sorted(range(len(cand_ids)), key=lambda i: (-scores[i], cand_ids[i]))[: n_hard - 1]
        ]
        assert expected == entry["selected"]


# -- eval ---------------------------------------------------------------------


def eval_args(synth_dir, output, *extra):
    return [
        "eval",
        "--image-bank", synth_dir / "image.adfb",
        "--label-bank", synth_dir / "label_text.adfb",
        "--scene-bank", synth_dir / "scene_text.adfb",
        "--brand-bank", synth_dir / "brand.adfb",
        "--manifest", synth_dir / "manifest.jsonl",
        "--output", output,
        *extra,
    ]


def test_eval_zero_shot_deterministic(synth_dir, tmp_path):
    m1, m2 = tmp_path / "m1.json", tmp_path / "m2.json"
    args = ["--protocol", "k_candidate", "--k", 10, "--seed", 3]
    assert run_cli(*eval_args(synth_dir, m1, *args)) == 0
    assert run_cli(*eval_args(synth_dir, m2, *args)) == 0
    assert m1.read_bytes() == m2.read_bytes()
    doc = json.loads(m1.read_text())
    assert doc["protocol"] == "k_candidate" and doc["K"] == 10
    assert doc["config"]["seed"] == 3
    assert 0 <= doc["accuracy"] <= 100


def test_eval_checkpoint_and_modality_mismatch(synth_dir, tmp_path, capsys):
    out = tmp_path / "run"
    assert run_cli(*train_args(synth_dir, out, "--seed", 2)) == 0
    ckpt = out / "run-seed2" / "checkpoint.ckpt"
    metrics = tmp_path / "m.json"
    code = run_cli(
        *eval_args(synth_dir, metrics, "--checkpoint", ckpt, "--protocol", "k_candidate", "--k", 10)
    )
    assert code == 0
    doc = json.loads(metrics.read_text())
    assert doc["config"]["inputs"] == "I+ST+K"
    capsys.readouterr()
    code = run_cli(
        *eval_args(
            synth_dir, tmp_path / "m2.json",
            "--checkpoint", ckpt, "--protocol", "k_candidate", "--k", 10, "--inputs", "I",
        )
    )
    assert code == 2
    assert "checkpoint modality mismatch" in capsys.readouterr().err


def test_eval_per_image_csv(synth_dir, tmp_path):
    metrics = tmp_path / "m.json"
    ranks = tmp_path / "ranks.csv"
    assert (
        run_cli(
            *eval_args(
                synth_dir, metrics,
                "--protocol", "k_candidate", "--k", 10, "--seed", 0, "--per-image", ranks,
            )
        )
        == 0
    )
    lines = ranks.read_text().splitlines()
    assert lines[0] == "image_id,best_rank,mean_rank,top1_hit"
    assert len(lines) == 31  # 30 test images + header


def test_eval_official_protocol_random_features(tmp_path):
    # 60 images x 3 ground-truth texts with random unit features: the official
    # protocol hands a random scorer 3 positives among 15 candidates
    rng = np.random.default_rng(0)
    d = 8
    image_ids = [f"im{i:03d}" for i in range(60)]
    text_ids = [f"tx{i:03d}_{t}" for i in range(60) for t in range(3)]
    save_bank(FeatureBank(image_ids, random_unit(rng, 60, d).astype(np.float32), "image"), tmp_path / "img.adfb")
    save_bank(
        FeatureBank(text_ids, random_unit(rng, 180, d).astype(np.float32), "label_text"),
        tmp_path / "txt.adfb",
    )
    manifest = tmp_path / "m.jsonl"
    manifest.write_text(
        "\n".join(
            json.dumps({"image_id": f"im{i:03d}", "label_text_id": f"tx{i:03d}_{t}", "split": "test"})
            for i in range(60)
            for t in range(3)
        )
        + "\n"
    )
    out = tmp_path / "metrics.json"
    code = run_cli(
        "eval", "--protocol", "official", "--seed", 2,
        "--image-bank", tmp_path / "img.adfb", "--label-bank", tmp_path / "txt.adfb",
        "--manifest", manifest, "--output", out,
    )
    assert code == 0
    doc = json.loads(out.read_text())
    assert doc["protocol"] == "official" and doc["n_images"] == 60
    assert 0 < doc["accuracy"] < 60  # random scorer hovers near 20%
    assert doc["rank"] <= doc["mean_rank"]


def test_eval_usage_errors(synth_dir, tmp_path, capsys):
    code = run_cli(*eval_args(synth_dir, tmp_path / "m.json", "--protocol", "k_candidate"))
    assert code == 1  # k_candidate without --k
    code = run_cli(
        *eval_args(synth_dir, tmp_path / "m.json", "--protocol", "k_candidate", "--k", 10, "--inputs", "I+ST")
    )
    assert code == 1  # zero-shot only evaluates raw image features


# -- brand ----------------------------------------------------------------------


@pytest.fixture()
def brand_fixture(tmp_path):
    rng = np.random.default_rng(0)
    d = 8
    names = ["Acme", "Brio", "Zint"]
    kb = KnowledgeBase([BrandEntry(n, f"{n} is a brand", "curated_list") for n in names])
    kb_path = tmp_path / "kb.json"
    save_kb_cache(kb, kb_path)

    prompt_ids, prompt_vecs = [], []
    for n in names:
        for k in range(PROMPTS_PER_ENTRY):
            prompt_ids.append(f"{n}/prompt/{k}")
            prompt_vecs.append(random_unit(rng, d))
        prompt_ids.append(f"{n}/ad")
        prompt_vecs.append(random_unit(rng, d))
    prompt_path = tmp_path / "prompts.adfb"
    save_bank(FeatureBank(prompt_ids, np.array(prompt_vecs, dtype=np.float32), "brand_prompt"), prompt_path)

    region_ids, region_vecs = [], []
    for img in ("img1", "img2", "img3"):
        region_ids.append(f"{img}/region/0")
        region_vecs.append(random_unit(rng, d))
        region_ids.append(f"{img}/global")
        region_vecs.append(random_unit(rng, d))
    region_path = tmp_path / "regions.adfb"
    save_bank(FeatureBank(region_ids, np.array(region_vecs, dtype=np.float32), "region"), region_path)

    scene_path = tmp_path / "scene.jsonl"
    scene_rows = [
        {"image_id": "img1", "texts": ["big Acme sale today"]},  # single match -> text
        {"image_id": "img3", "texts": ["Acme and Brio together"]},  # two matches -> ensemble
    ]
    scene_path.write_text("\n".join(json.dumps(r) for r in scene_rows) + "\n")
    return kb_path, prompt_path, region_path, scene_path


def test_brand_pipeline(brand_fixture, tmp_path, capsys):
    kb_path, prompt_path, region_path, scene_path = brand_fixture
    out = tmp_path / "pred.jsonl"
    code = run_cli(
        "brand",
        "--region-bank", region_path,
        "--prompt-bank", prompt_path,
        "--kb", kb_path,
        "--scene-texts", scene_path,
        "--output", out,
    )
    assert code == 0
    lines = [json.loads(l) for l in out.read_text().splitlines()]
    assert len(lines) == 3
    assert [l["image_id"] for l in lines] == ["img1", "img2", "img3"]
    by_img = {l["image_id"]: l for l in lines}
    assert by_img["img1"]["path"] == "text" and by_img["img1"]["prediction"] == "Acme"
    assert by_img["img2"]["path"] == "vision"
    assert by_img["img3"]["path"] == "ensemble"
    assert by_img["img3"]["prediction"] in {"Acme", "Brio", "Zint"}
    printed = capsys.readouterr().out
    assert "text=1" in printed and "vision=1" in printed and "ensemble=1" in printed
    # determinism
    out2 = tmp_path / "pred2.jsonl"
    run_cli(
        "brand", "--region-bank", region_path, "--prompt-bank", prompt_path,
        "--kb", kb_path, "--scene-texts", scene_path, "--output", out2,
    )
    assert out.read_bytes() == out2.read_bytes()
