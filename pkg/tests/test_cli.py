import json
import socket

import pytest

from toolgrad.cli import derive_seed, main, run_ordered
from toolgrad.models import CostLedger, ledger_sum
from toolgrad.persistence import (
    EVAL_SCHEMA,
    SAMPLE_SCHEMA,
    OrderedWriter,
    RunManifest,
    completed_prefix,
    file_digest,
    manifest_path,
    read_jsonl,
    read_samples,
    validate_eval_record,
    validate_sample_record,
    verify_manifest,
)
from toolgrad.simdata import write_sim_workspace
from toolgrad.tools import load_registry


@pytest.fixture(scope="module")
def ws(tmp_path_factory):
    root = tmp_path_factory.mktemp("ws")
    cfg = write_sim_workspace(root, apis=120, seed=1, unsolvable=0.1, failure_rate=0.1, junk=6)
    return root, cfg


def run(*argv) -> int:
    return main([str(a) for a in argv])


def edit_config(cfg, path, **sections):
    raw = json.loads(cfg.read_text())
    for k, v in sections.items():
        raw[k] = v if not isinstance(v, dict) else {**raw.get(k, {}), **v}
    path.write_text(json.dumps(raw))
    return path


# ---------------------------------------------------------------------------
# helpers


def test_derive_seed_is_stable():
    assert derive_seed(0, 0) == derive_seed(0, 0)
    assert derive_seed(0, 1) != derive_seed(0, 0) != derive_seed(1, 0)
    assert 0 <= derive_seed(5, 7) < 2**32


def test_ordered_writer_reorders(tmp_path):
    path = tmp_path / "o.jsonl"
    with OrderedWriter(path) as w:
        for i in (2, 0, 3, 1):
            w.put(i, str(i))
        with pytest.raises(ValueError):
            w.put(1, "again")
    assert path.read_text().split() == ["0", "1", "2", "3"]


def test_run_ordered_writes_finished_lines_before_raising(tmp_path):
    def job(i):
        if i == 5:
            raise RuntimeError("boom")
        return json.dumps({"i": i})

    path = tmp_path / "o.jsonl"
    with OrderedWriter(path) as w, pytest.raises(RuntimeError):
        run_ordered(10, 0, 3, job, w)
    lines = [json.loads(x)["i"] for x in path.read_text().splitlines()]
    assert lines == list(range(len(lines))) and len(lines) <= 5


def test_completed_prefix_truncates_torn_tail(tmp_path):
    path = tmp_path / "d.jsonl"
    good = [json.dumps({"schema_id": SAMPLE_SCHEMA, "index": i}) for i in range(3)]
    path.write_text("\n".join(good) + "\n" + '{"schema_id": "toolgr')
    assert completed_prefix(path, SAMPLE_SCHEMA) == 3
    assert path.read_text() == "\n".join(good) + "\n"
    assert completed_prefix(tmp_path / "missing.jsonl", SAMPLE_SCHEMA) == 0


# ---------------------------------------------------------------------------
# filter-apis


def test_filter_apis(ws, tmp_path):
    root, cfg = ws
    assert run("filter-apis", "--config", cfg, "--out", tmp_path) == 0
    kept = load_registry(tmp_path / "apis.filtered.json")
    rejected = [json.loads(x)["id"] for x in (tmp_path / "rejected.jsonl").read_text().splitlines()]
    assert len(kept) == 120 and sorted(rejected) == sorted(i for i in load_registry(root / "apis.json").ids() if i.startswith("junk_"))
    report = json.loads((tmp_path / "filter_report.json").read_text())
    assert report == {**report, "total": 126, "kept": 120, "rejected": 6}
    man = RunManifest.load(tmp_path / "filter.manifest.json")
    assert verify_manifest(man, tmp_path / "apis.filtered.json") == []


# ---------------------------------------------------------------------------
# generate


@pytest.fixture(scope="module")
def dataset(ws, tmp_path_factory):
    _, cfg = ws
    out = tmp_path_factory.mktemp("gen") / "data.jsonl"
    assert run("generate", "--config", cfg, "--out", out, "--count", 20, "--seed", 3) == 0
    return out


def test_generate_writes_valid_lines(dataset):
    recs = read_jsonl(dataset, SAMPLE_SCHEMA)
    assert [r["index"] for r in recs] == list(range(20))
    assert [r["sample_id"] for r in recs[:2]] == ["tg-000000", "tg-000001"]
    for r in recs:
        assert validate_sample_record(r) == []


def test_manifest_ledger_is_fold_of_lines(ws, dataset):
    man = RunManifest.load(manifest_path(dataset))
    total = ledger_sum(s.ledger for _, s in read_samples(dataset))
    assert CostLedger.from_dict(man.ledger) == total
    assert man.output_digest == file_digest(dataset) and man.stats["count"] == 20
    digest = load_registry(ws[0] / "apis.json").digest()
    assert verify_manifest(man, dataset, digest) == []
    assert verify_manifest(man, dataset, "0" * 64) == ["registry digest mismatch"]


def test_zero_count_writes_empty_dataset(ws, tmp_path):
    _, cfg = ws
    out = tmp_path / "empty.jsonl"
    assert run("generate", "--config", cfg, "--out", out, "--count", 0) == 0
    assert out.read_text() == ""
    assert RunManifest.load(manifest_path(out)).stats["count"] == 0


def test_resume_after_torn_write_matches_full_run(ws, dataset, tmp_path):
    _, cfg = ws
    out = tmp_path / "part.jsonl"
    lines = dataset.read_text().splitlines(keepends=True)
    out.write_text("".join(lines[:7]) + lines[7][:40])
    assert run("generate", "--config", cfg, "--out", out, "--count", 20, "--seed", 3, "--resume") == 0
    assert out.read_bytes() == dataset.read_bytes()


def test_backend_outage_exits_resumable(ws, tmp_path):
    _, cfg = ws
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        port = s.getsockname()[1]
    bad = edit_config(cfg, tmp_path / "c.json", backend={"kind": "http", "base_url": f"http://127.0.0.1:{port}/v1",
                      "request_timeout_ms": 500}, gateway={"max_retries": 0, "backoff_s": 0})
    bad_raw = json.loads(bad.read_text())
    bad_raw["registry"] = str(cfg.parent / "apis.json")
    bad_raw["env"]["profile"] = str(cfg.parent / "profile.json")
    bad.write_text(json.dumps(bad_raw))
    out = tmp_path / "d.jsonl"
    assert run("generate", "--config", bad, "--out", out, "--count", 2) == 3
    assert out.read_text() == ""


def test_bad_inputs_exit_codes(ws, tmp_path):
    _, cfg = ws
    assert run("generate", "--config", tmp_path / "nope.json", "--out", tmp_path / "x") == 2
    assert run("generate", "--config", cfg, "--out", tmp_path / "x", "--count", -1) == 2
    broken = tmp_path / "reg.json"
    broken.write_text(json.dumps([{"id": "a", "description": "d"}, {"id": "a", "description": "d"}]))
    assert run("generate", "--config", cfg, "--registry", broken, "--out", tmp_path / "x", "--count", 1) == 1
    with pytest.raises(SystemExit):
        run("generate", "--out", tmp_path / "x")


def test_manifest_never_holds_secrets(ws, tmp_path):
    _, cfg = ws
    raw = json.loads(cfg.read_text())
    raw["backend"]["api_key"] = "sk-very-secret"
    raw["backend"]["extra"] = {"Authorization": "Bearer sk-very-secret"}
    raw["registry"] = str(cfg.parent / raw["registry"])
    raw["backend"]["script"] = str(cfg.parent / "script.json")
    raw["env"]["profile"] = str(cfg.parent / "profile.json")
    path = tmp_path / "c.json"
    path.write_text(json.dumps(raw))
    out = tmp_path / "d.jsonl"
    assert run("generate", "--config", path, "--out", out, "--count", 1) == 0
    assert "sk-very-secret" not in manifest_path(out).read_text()


# ---------------------------------------------------------------------------
# negatives, evaluate, report


@pytest.fixture(scope="module")
def with_negatives(ws, dataset, tmp_path_factory):
    _, cfg = ws
    out = tmp_path_factory.mktemp("neg") / "data.neg.jsonl"
    assert run("negatives", "--config", cfg, "--in", dataset, "--out", out, "--p", 20) == 0
    return out


def test_negatives_fill_every_line(with_negatives):
    for r in read_jsonl(with_negatives, SAMPLE_SCHEMA):
        assert validate_sample_record(r, p=20, library_size=126) == []
        if r["passed"]:
            n = sum(len(c["steps"]) for c in r["workflow"]["chains"])
            assert len(r["negative_api_ids"]) == 20 - n


def test_negatives_are_idempotent(ws, with_negatives, tmp_path):
    _, cfg = ws
    again = tmp_path / "again.jsonl"
    assert run("negatives", "--config", cfg, "--in", with_negatives, "--out", again, "--p", 20) == 0
    assert again.read_bytes() == with_negatives.read_bytes()


def test_negatives_report_skips_oversized(ws, with_negatives, tmp_path):
    _, cfg = ws
    out = tmp_path / "p3.jsonl"
    assert run("negatives", "--config", cfg, "--in", with_negatives, "--out", out, "--p", 3) == 0
    report = json.loads((tmp_path / "p3.jsonl.negatives.json").read_text())
    sizes = [sum(len(c["steps"]) for c in r["workflow"]["chains"]) for r in read_jsonl(with_negatives)]
    assert len(report["skipped"]) == sum(1 for n in sizes if n > 3)


@pytest.fixture(scope="module")
def evals(ws, with_negatives, tmp_path_factory):
    _, cfg = ws
    small = tmp_path_factory.mktemp("ev") / "ten.jsonl"
    lines = [x for x in with_negatives.read_text().splitlines() if json.loads(x)["passed"]][:10]
    small.write_text("\n".join(lines) + "\n")
    out = small.with_name("evals.jsonl")
    assert run("evaluate", "--config", cfg, "--in", small, "--out", out) == 0
    return out


def test_evaluate_writes_one_record_per_pair(evals):
    recs = read_jsonl(evals, EVAL_SCHEMA)
    assert len(recs) == 30
    assert [r["framework"] for r in recs[:3]] == ["standard", "react", "dfs"]
    assert all(validate_eval_record(r) == [] for r in recs)
    assert all(r["llm_steps"] == 1 for r in recs if r["framework"] == "standard")


def test_evaluate_needs_passed_samples(ws, tmp_path):
    _, cfg = ws
    empty = tmp_path / "e.jsonl"
    empty.write_text("")
    assert run("evaluate", "--config", cfg, "--in", empty, "--out", tmp_path / "o.jsonl") == 2


def test_evaluate_rejects_unknown_framework(ws, evals, tmp_path):
    _, cfg = ws
    src = evals.with_name("ten.jsonl")
    assert run("evaluate", "--config", cfg, "--in", src, "--out", tmp_path / "o.jsonl", "--frameworks", "cot") == 2


def test_baseline_and_report(ws, dataset, evals, tmp_path, capsys):
    _, cfg = ws
    base = tmp_path / "base.jsonl"
    assert run("baseline-dfs", "--config", cfg, "--out", base, "--count", 6) == 0
    assert len(read_jsonl(base)) == 6
    summary = tmp_path / "report.json"
    capsys.readouterr()
    assert run("report", "--in", evals, "--dataset", dataset, "--baseline", base, "--out", summary) == 0
    text = capsys.readouterr().out
    assert "toolgrad" in text and "dfs-baseline" in text and "react" in text
    report = json.loads(summary.read_text())
    assert set(report) == {"generation", "baseline", "evaluation"}
    assert run("report") == 2


def test_make_sim(tmp_path):
    assert run("make-sim", "--out", tmp_path, "--apis", 30, "--junk", 2) == 0
    assert len(load_registry(tmp_path / "apis.json")) == 32
    assert json.loads((tmp_path / "config.json").read_text())["registry"] == "apis.json"
