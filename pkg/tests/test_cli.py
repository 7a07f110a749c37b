import json
import shutil

import pytest

from guidelearn.cli import main
from guidelearn.store import GuidelineStore, load, save
from guidelearn.synthlab import demo_world, generate_dataset

from conftest import FIXTURES, RE_TOY, unit, write_jsonl

SCRIPTED = ["--task", str(RE_TOY / "task.yaml"), "--backend", f"scripted:{RE_TOY / 'fixture.jsonl'}"]
DATA = str(RE_TOY / "dataset.jsonl")


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def synthetic_file(path, n, stream):
    recs = [{"id": x.id, "text": x.text, "gold": x.gold} for x in generate_dataset(demo_world(), n, stream=stream)]
    return write_jsonl(path, recs)


# -- train / predict ---------------------------------------------------------------------

def test_train_matches_golden_store(tmp_path, capsys):
    code, out, _ = run(capsys, "train", DATA, *SCRIPTED, "--output-dir", tmp_path, "--seed", 0)
    assert code == 0, out
    assert (tmp_path / "store.jsonl").read_bytes() == (FIXTURES / "re_toy_store.golden.jsonl").read_bytes()
    reports = [json.loads(line) for line in (tmp_path / "epoch_reports.jsonl").read_text().splitlines()]
    assert [r["n_errors"] for r in reports] == [3, 0]
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["command"] == "train" and len(manifest["outputs"]) == 3
    assert manifest["config"]["seed"] == 0


def test_epochs_override(tmp_path, capsys):
    code, _, _ = run(capsys, "train", DATA, *SCRIPTED, "--output-dir", tmp_path, "--epochs", 5)
    assert code == 0
    assert len((tmp_path / "epoch_reports.jsonl").read_text().splitlines()) == 5


def test_config_file_and_flag_precedence(tmp_path, capsys):
    cfg = tmp_path / "run.yaml"
    cfg.write_text(f"task: {RE_TOY / 'task.yaml'}\nbackend: scripted:{RE_TOY / 'fixture.jsonl'}\n"
                   f"output_dir: {tmp_path / 'out'}\nhyper:\n  epochs: 4\n")
    assert run(capsys, "train", DATA, "--config", cfg)[0] == 0
    assert len((tmp_path / "out" / "epoch_reports.jsonl").read_text().splitlines()) == 4
    assert run(capsys, "train", DATA, "--config", cfg, "--epochs", 1, "--store", tmp_path / "s2.jsonl")[0] == 0
    assert len((tmp_path / "out" / "epoch_reports.jsonl").read_text().splitlines()) == 1
    cfg.write_text("bogus_key: 1\n")
    assert run(capsys, "train", DATA, "--config", cfg)[0] == 1


def test_missing_dataset_names_path(tmp_path, capsys):
    code, _, err = run(capsys, "train", tmp_path / "nope.jsonl", *SCRIPTED, "--output-dir", tmp_path)
    assert code == 2 and "nope.jsonl" in err


def test_predict_empty_store_matches_baseline(tmp_path, capsys):
    code, _, _ = run(capsys, "predict", DATA, *SCRIPTED, "--output-dir", tmp_path)
    assert code == 0
    got = (tmp_path / "predictions.jsonl").read_bytes()
    assert got == (FIXTURES / "re_toy_baseline_predictions.jsonl").read_bytes()
    assert (tmp_path / "audit.jsonl").exists()


def test_predict_after_training_fixes_errors(tmp_path, capsys):
    run(capsys, "train", DATA, *SCRIPTED, "--output-dir", tmp_path)
    run(capsys, "predict", DATA, *SCRIPTED, "--output-dir", tmp_path, "--store", tmp_path / "store.jsonl")
    code, out, _ = run(capsys, "eval", DATA, tmp_path / "predictions.jsonl", "--task-kind", "re",
                       "--output-dir", tmp_path)
    assert code == 0 and "F1=1.0000" in out


def test_predict_is_byte_deterministic(tmp_path, capsys):
    for d in ("a", "b"):
        run(capsys, "predict", DATA, *SCRIPTED, "--output-dir", tmp_path / d, "--seed", 5)
    for name in ("predictions.jsonl", "audit.jsonl"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    digests = [sorted(json.loads((tmp_path / d / "manifest.json").read_text())["outputs"].values()) for d in "ab"]
    assert digests[0] == digests[1]


def test_dimension_mismatch(tmp_path, capsys):
    save(GuidelineStore(32, "re-toy"), tmp_path / "s.jsonl")
    code, _, err = run(capsys, "predict", DATA, *SCRIPTED, "--store", tmp_path / "s.jsonl", "--output-dir", tmp_path)
    assert code == 2 and "32" in err and "256" in err


def test_backend_usage_errors(tmp_path, capsys):
    assert run(capsys, "predict", DATA, "--task", RE_TOY / "task.yaml", "--backend", "remote")[0] == 1
    assert run(capsys, "predict", DATA, "--task", RE_TOY / "task.yaml", "--backend", "carrier-pigeon")[0] == 1
    with pytest.raises(SystemExit) as exc:
        main(["predict", DATA, *SCRIPTED, "--api-key", "secret"])
    assert exc.value.code == 1


def test_scripted_fixture_without_match_is_backend_error(tmp_path, capsys):
    fx = write_jsonl(tmp_path / "fx.jsonl", [{"match": {"contains": "never"}, "reply": "x"}])
    code, _, err = run(capsys, "train", DATA, "--task", RE_TOY / "task.yaml", "--backend", f"scripted:{fx}",
                       "--output-dir", tmp_path)
    assert code == 3 and "backend" in err


def test_synthetic_train_and_predict_deterministic(tmp_path, capsys):
    train = synthetic_file(tmp_path / "train.jsonl", 80, 1)
    test = synthetic_file(tmp_path / "test.jsonl", 40, 2)
    for d in ("a", "b"):
        out = tmp_path / d
        assert run(capsys, "train", train, "--backend", "synthetic:demo", "--output-dir", out, "--seed", 1)[0] == 0
        assert run(capsys, "predict", test, "--backend", "synthetic:demo", "--output-dir", out, "--seed", 1)[0] == 0
    for name in ("store.jsonl", "epoch_reports.jsonl", "predictions.jsonl", "audit.jsonl"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name


# -- select ----------------------------------------------------------------------------------

def test_select_budget_errors(tmp_path, capsys):
    assert run(capsys, "select", DATA, *SCRIPTED, "--budget", 7, "--output-dir", tmp_path)[0] == 2
    assert run(capsys, "select", DATA, *SCRIPTED, "--budget", 0, "--output-dir", tmp_path)[0] == 1


def test_select_outputs(tmp_path, capsys):
    assert run(capsys, "select", DATA, *SCRIPTED, "--budget", 2, "--output-dir", tmp_path)[0] == 0
    assert json.loads((tmp_path / "selected.json").read_text()) == ["r1", "r4"]
    table = [json.loads(line) for line in (tmp_path / "confidence_table.jsonl").read_text().splitlines()]
    assert [r["id"] for r in table] == ["r1", "r2", "r3", "r4", "r5", "r6"]
    assert set(table[0]) == {"id", "confidence", "distribution"}


def test_select_synthetic_pool_matches_resort(tmp_path, capsys):
    pool = synthetic_file(tmp_path / "pool.jsonl", 1000, 7)
    code, _, _ = run(capsys, "select", pool, "--backend", "synthetic:demo", "--sc-trials", 5,
                     "--budget", 500, "--output-dir", tmp_path)
    assert code == 0
    table = [json.loads(line) for line in (tmp_path / "confidence_table.jsonl").read_text().splitlines()]
    oracle = [r["id"] for r in sorted(table, key=lambda r: (r["confidence"], r["id"]))[:500]]
    assert json.loads((tmp_path / "selected.json").read_text()) == oracle


# -- eval ----------------------------------------------------------------------------------

def test_eval_identical_re(tmp_path, capsys):
    preds = [{"id": json.loads(line)["id"], "answer": json.loads(line)["label"]}
             for line in (RE_TOY / "dataset.jsonl").read_text().splitlines()]
    write_jsonl(tmp_path / "p.jsonl", preds)
    code, out, _ = run(capsys, "eval", DATA, tmp_path / "p.jsonl", "--task-kind", "re", "--output-dir", tmp_path)
    assert code == 0 and "P=1.0000 R=1.0000 F1=1.0000" in out
    metrics = json.loads((tmp_path / "metrics.json").read_text())
    assert metrics["micro"]["f1"] == 1.0 and "Other" not in metrics["per_class"]


def test_eval_ee_split(tmp_path, capsys):
    code, out, _ = run(capsys, "eval", FIXTURES / "ee_gold.jsonl", FIXTURES / "ee_pred.jsonl",
                       "--task-kind", "ee", "--output-dir", tmp_path)
    assert code == 0 and "single" in out and "multi" in out
    m = json.loads((tmp_path / "metrics.json").read_text())
    o = m["overall"]
    assert (o["all"]["tp"], o["all"]["fp"], o["all"]["fn"]) == (5, 1, 4)
    assert (o["single"]["tp"], o["single"]["fn"]) == (4, 1)
    assert (o["multi"]["tp"], o["multi"]["fp"], o["multi"]["fn"]) == (1, 1, 3)


def test_eval_ee_identical(tmp_path, capsys):
    recs = [{"id": json.loads(line)["id"], "records": json.loads(line)["gold_events"]}
            for line in (FIXTURES / "ee_gold.jsonl").read_text().splitlines()]
    write_jsonl(tmp_path / "p.jsonl", recs)
    code, out, _ = run(capsys, "eval", FIXTURES / "ee_gold.jsonl", tmp_path / "p.jsonl", "--task-kind", "ee",
                       "--output-dir", tmp_path)
    assert code == 0 and out.startswith("P=1.0000 R=1.0000 F1=1.0000")


def test_eval_malformed_line(tmp_path, capsys):
    p = tmp_path / "p.jsonl"
    p.write_text('{"id": "r1", "answer": "Other"}\n{"id": "r2" "answer"}\n')
    code, _, err = run(capsys, "eval", DATA, p, "--task-kind", "re", "--output-dir", tmp_path)
    assert code == 2 and ":2:" in err
    p.write_text('{"id": "r1"}\n')
    code, _, err = run(capsys, "eval", DATA, p, "--task-kind", "re", "--output-dir", tmp_path)
    assert code == 2 and ":1:" in err


# -- guidelines ------------------------------------------------------------------------------

def test_guidelines_list_empty(tmp_path, capsys):
    save(GuidelineStore(4), tmp_path / "s.jsonl")
    code, out, _ = run(capsys, "guidelines", tmp_path / "s.jsonl", "list")
    assert code == 0 and out.splitlines() == ["id\tscore\tretrieved\thit\twrong\ttext"]


def test_guidelines_show_and_prune(tmp_path, capsys):
    s = GuidelineStore(2)
    s.insert("helpful", unit(1, 0), stats=(3, 3, 0))
    bad = s.insert("harmful " + "x" * 80, unit(0, 1), stats=(4, 0, 3))
    path = tmp_path / "s.jsonl"
    save(s, path)
    code, out, _ = run(capsys, "guidelines", path, "list")
    assert code == 0 and "harmful xxx" in out and "..." in out and "-0.750" in out
    code, out, _ = run(capsys, "guidelines", path, "show", 1)
    assert code == 0 and json.loads(out)["text"] == "helpful"
    assert run(capsys, "guidelines", path, "show", 99)[0] == 2
    code, out, _ = run(capsys, "guidelines", path, "prune", "--threshold", 0)
    assert code == 0 and out.split() == [str(bad.id)]
    assert len(load(path)) == 1


def test_guidelines_corrupted_store(tmp_path, capsys):
    p = tmp_path / "s.jsonl"
    p.write_text('{"type": "header"')
    assert run(capsys, "guidelines", p, "list")[0] == 2


# -- simulate ------------------------------------------------------------------------------

def parse_sim(out):
    lines = dict(line.split(":", 1) for line in out.splitlines())
    return float(lines["baseline accuracy"]), float(lines["trained accuracy"])


def test_simulate_demo(tmp_path, capsys):
    code, out, _ = run(capsys, "simulate", "demo", "--train", 200, "--test", 200, "--seed", 0,
                       "--output-dir", tmp_path)
    assert code == 0
    base, trained = parse_sim(out)
    assert trained > base
    rep = json.loads((tmp_path / "experiment.json").read_text())
    assert rep["trained_accuracy"] == trained


def test_simulate_flat_world(tmp_path, capsys):
    code, out, _ = run(capsys, "simulate", FIXTURES / "world_flat.yaml", "--train", 100, "--test", 200,
                       "--output-dir", tmp_path)
    base, trained = parse_sim(out)
    assert code == 0 and abs(trained - base) <= 0.03


def test_simulate_invalid_world(tmp_path, capsys):
    bad = tmp_path / "w.yaml"
    bad.write_text("rules: [{pattern: [a], label: X}]\n")
    assert run(capsys, "simulate", bad, "--output-dir", tmp_path)[0] == 2
    assert run(capsys, "simulate", tmp_path / "missing.yaml", "--output-dir", tmp_path)[0] == 2


def test_simulate_byte_deterministic(tmp_path, capsys):
    for d in ("a", "b"):
        run(capsys, "simulate", "demo", "--train", 50, "--test", 50, "--seed", 2, "--output-dir", tmp_path / d)
    for name in ("experiment.json", "manifest.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_inputs_not_mutated(tmp_path, capsys):
    shutil.copytree(RE_TOY, tmp_path / "toy")
    before = {p.name: p.read_bytes() for p in (tmp_path / "toy").iterdir()}
    toy = tmp_path / "toy"
    run(capsys, "train", toy / "dataset.jsonl", "--task", toy / "task.yaml", "--backend",
        f"scripted:{toy / 'fixture.jsonl'}", "--output-dir", tmp_path / "out")
    assert {p.name: p.read_bytes() for p in toy.iterdir()} == before
