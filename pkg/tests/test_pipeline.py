"""End-to-end orchestration: modes, batch runs, resume, eval, replay, CLI."""

import json
import os
import stat
from dataclasses import replace
from pathlib import Path

import pytest
import yaml

from conftest import FIXTURES, make_pipeline_config
from homorag import cli
from homorag.config import ConfigError, PipelineConfig, load_config
from homorag.gateway import ECHO_EMPTY
from homorag.metrics import EntityLexicon
from homorag.pipeline import (
    BlastInvocationError,
    DatasetError,
    NO_EVIDENCE_NOTE,
    Pipeline,
    QARecord,
    read_dataset,
    replay_context,
    run_blast,
    run_eval,
)


@pytest.fixture(scope="module")
def module_work(tmp_path_factory):
    return tmp_path_factory.mktemp("pipework")


@pytest.fixture(scope="module")
def pipeline(index_dir_module, filter_model_module, module_work):
    config = make_pipeline_config(index_dir_module, filter_model_module, module_work)
    return Pipeline(config)


@pytest.fixture(scope="module")
def index_dir_module(tmp_path_factory):
    from homorag.annotations import build_index

    out = tmp_path_factory.mktemp("index-module")
    build_index(FIXTURES / "swissprot_mini.dat", FIXTURES / "go_mini.obo", out)
    return out


@pytest.fixture(scope="module")
def filter_model_module(tmp_path_factory):
    from conftest import PIPELINE_TYPES, make_synthetic_examples, split_examples
    from homorag.tag_filter import train_filter

    examples = make_synthetic_examples(PIPELINE_TYPES, per_type=100, seed=11)
    train_set, test_set = split_examples(examples, seed=11)
    model = train_filter(train_set, epochs=4, learning_rate=1.0, batch_size=64,
                         seed=11, heldout=test_set)
    path = tmp_path_factory.mktemp("model-module") / "tag_filter.json"
    model.save(path)
    return path


@pytest.fixture(scope="module")
def records():
    return {r.id: r for r in read_dataset(FIXTURES / "qa_records.jsonl")}


# -- records -----------------------------------------------------------------------

def test_read_dataset(records):
    assert len(records) == 10
    assert records["case-r1"].task == "Catalytic Activity"


def test_record_validation():
    with pytest.raises(ValueError, match="invalid residues"):
        QARecord(id="x", instruction="valid", sequence="AC1DE",
                 task="t", instruction_type="i")
    with pytest.raises(ValueError, match="instruction is empty"):
        QARecord(id="x", instruction="  ", sequence="ACDE", task="t", instruction_type="i")


def test_read_dataset_strict_raises(tmp_path):
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"id": "a"}\n', encoding="utf-8")
    with pytest.raises(DatasetError, match="missing fields"):
        read_dataset(bad)


# -- run_query ----------------------------------------------------------------------

def test_case_study_full_pipeline(pipeline, records):
    artifact = pipeline.run_query(records["case-r1"])
    lines = artifact.context.splitlines()
    assert len(lines) == 2
    assert lines[0].startswith("Homolog 1 (Q55C17): [CATALYTIC ACTIVITY]:")
    assert lines[1].startswith("Homolog 3 (Q9N5Y2): [CATALYTIC ACTIVITY]:")
    assert artifact.errors == []
    assert artifact.answer is not None
    for line in lines:
        assert line in artifact.answer


def test_raw_only_mode_has_no_filter_snapshots(index_dir_module, filter_model_module, tmp_path, records):
    config = make_pipeline_config(index_dir_module, filter_model_module, tmp_path, mode="raw_only")
    artifact = Pipeline(config).run_query(records["case-r1"])
    assert set(artifact.pools) == {"raw"}
    # context renders every raw snippet
    raw_count = sum(len(h["snippets"]) for h in artifact.pools["raw"]["homologs"])
    assert len(artifact.context.splitlines()) == raw_count


def test_horizontal_only_mode(index_dir_module, filter_model_module, tmp_path, records):
    config = make_pipeline_config(index_dir_module, filter_model_module, tmp_path,
                                  mode="horizontal_only")
    artifact = Pipeline(config).run_query(records["case-r1"])
    assert set(artifact.pools) == {"raw", "horizontal"}
    kept_tags = {s["tag"] for h in artifact.pools["horizontal"]["homologs"]
                 for s in h["snippets"]}
    assert kept_tags == {"CATALYTIC ACTIVITY"}


def test_vertical_only_clusters_raw_pool(index_dir_module, filter_model_module, tmp_path, records):
    config = make_pipeline_config(index_dir_module, filter_model_module, tmp_path,
                                  mode="vertical_only")
    artifact = Pipeline(config).run_query(records["case-r1"])
    assert set(artifact.pools) == {"raw", "vertical"}


def stage_counter(pool_dict):
    from collections import Counter

    return Counter(
        (s["tag"], s["value"], s["source_accession"], s["homolog_rank"])
        for h in pool_dict["homologs"] for s in h["snippets"]
    )


def test_mode_lattice_on_fixture_records(index_dir_module, filter_model_module, tmp_path, records):
    config = make_pipeline_config(index_dir_module, filter_model_module, tmp_path)
    pipe = Pipeline(config)
    for record in records.values():
        artifact = pipe.run_query(record)
        raw = stage_counter(artifact.pools["raw"])
        hor = stage_counter(artifact.pools["horizontal"])
        ver = stage_counter(artifact.pools["vertical"])
        assert ver <= hor <= raw


def test_self_hit_excluded_in_selection(pipeline, records):
    artifact = pipeline.run_query(records["func-r2"])
    assert len(artifact.hits) == 2
    assert [h.subject_accession for h in artifact.selected_hits] == ["Q3ZCD7"]


def test_missing_accession_warns_and_continues(pipeline, records):
    artifact = pipeline.run_query(records["func-r3"])
    assert any("A9X9X9" in w for w in artifact.warnings)
    assert artifact.context == ""
    assert NO_EVIDENCE_NOTE in artifact.prompt
    assert artifact.answer == ECHO_EMPTY


def test_no_hits_falls_back_to_no_evidence_prompt(pipeline, records):
    artifact = pipeline.run_query(records["desc-r2"])
    assert artifact.hits == []
    assert NO_EVIDENCE_NOTE in artifact.prompt
    assert artifact.answer == ECHO_EMPTY
    assert artifact.errors == []


def test_replay_matches_stored_context(pipeline, records):
    for rid in ("case-r1", "func-r1", "desc-r1", "desc-r2"):
        artifact = pipeline.run_query(records[rid])
        assert replay_context(artifact.to_dict()) == artifact.context


def test_config_requires_filter_model_for_horizontal_modes(index_dir_module, tmp_path):
    config = PipelineConfig(mode="full_2d")
    with pytest.raises(ConfigError, match="filter_model"):
        Pipeline(config)


# -- batch ---------------------------------------------------------------------------

def test_batch_writes_artifacts_and_summary(index_dir_module, filter_model_module, tmp_path, records):
    config = make_pipeline_config(index_dir_module, filter_model_module, tmp_path)
    out = tmp_path / "run1"
    summary = Pipeline(config).run_batch(FIXTURES / "qa_records.jsonl", out)
    artifacts = sorted((out / "artifacts").glob("*.json"))
    assert len(artifacts) == 10
    assert summary["processed"] == 10
    assert summary["skipped_existing"] == 0
    assert summary["records_with_errors"] == 0
    assert (out / "summary.json").exists()
    assert summary["defaults"]["retrieval.top_k"]["value"] == 3


def test_batch_is_resumable(index_dir_module, filter_model_module, tmp_path):
    config = make_pipeline_config(index_dir_module, filter_model_module, tmp_path)
    out = tmp_path / "run"
    pipe = Pipeline(config)
    pipe.run_batch(FIXTURES / "qa_records.jsonl", out)
    summary2 = pipe.run_batch(FIXTURES / "qa_records.jsonl", out)
    assert summary2["processed"] == 0
    assert summary2["skipped_existing"] == 10
    for name in ("case-r1", "func-r1", "dom-r2"):
        (out / "artifacts" / f"{name}.json").unlink()
    summary3 = pipe.run_batch(FIXTURES / "qa_records.jsonl", out)
    assert summary3["processed"] == 3
    assert summary3["skipped_existing"] == 7


def test_batch_changed_config_recomputes(index_dir_module, filter_model_module, tmp_path):
    config = make_pipeline_config(index_dir_module, filter_model_module, tmp_path)
    out = tmp_path / "run"
    Pipeline(config).run_batch(FIXTURES / "qa_records.jsonl", out)
    changed = replace(config, mode="raw_only")
    summary = Pipeline(changed).run_batch(FIXTURES / "qa_records.jsonl", out)
    assert summary["processed"] == 10
    assert summary["skipped_existing"] == 0


def test_batch_skips_malformed_records(index_dir_module, filter_model_module, tmp_path):
    dataset = tmp_path / "data.jsonl"
    good = (FIXTURES / "qa_records.jsonl").read_text(encoding="utf-8").splitlines()[:2]
    dataset.write_text(
        good[0] + "\n" + "not json at all\n" + good[1] + "\n"
        + '{"id": "bad-1", "instruction": "x", "sequence": "AC1", "task": "t", "instruction_type": "i"}\n',
        encoding="utf-8",
    )
    config = make_pipeline_config(index_dir_module, filter_model_module, tmp_path)
    summary = Pipeline(config).run_batch(dataset, tmp_path / "out")
    assert summary["processed"] == 2
    assert summary["skipped_malformed"] == ["bad-1", "line-2"]


def test_batch_summary_counts_match_directory_census(index_dir_module, filter_model_module, tmp_path):
    config = make_pipeline_config(index_dir_module, filter_model_module, tmp_path)
    out = tmp_path / "census"
    summary = Pipeline(config).run_batch(FIXTURES / "qa_records.jsonl", out)
    census = len(list((out / "artifacts").glob("*.json")))
    assert summary["processed"] + summary["skipped_existing"] == census


# -- eval -------------------------------------------------------------------------------

def test_run_eval_over_batch(index_dir_module, filter_model_module, tmp_path):
    config = make_pipeline_config(index_dir_module, filter_model_module, tmp_path)
    out = tmp_path / "run"
    Pipeline(config).run_batch(FIXTURES / "qa_records.jsonl", out)
    lexicon = EntityLexicon.from_file(FIXTURES / "lexicon.txt")
    table = run_eval(out, lexicon, out_prefix=tmp_path / "report")
    tasks = [row.task for row in table]
    assert tasks == sorted(tasks)
    assert {row.task for row in table} == {
        "Catalytic Activity", "Protein Function", "Domain/Motif", "General Description",
    }
    assert (tmp_path / "report.jsonl").exists()
    assert (tmp_path / "report.txt").exists()


def test_run_eval_identical_answers_score_100(tmp_path):
    art_dir = tmp_path / "artifacts"
    art_dir.mkdir()
    for i in range(3):
        text = "the kinase binds ATP and NADPH strongly"
        (art_dir / f"r{i}.json").write_text(json.dumps({
            "record_id": f"r{i}", "task": "t", "answer": text, "reference": text,
        }), encoding="utf-8")
    lexicon = EntityLexicon(["kinase", "ATP", "NADPH"])
    table = run_eval(tmp_path, lexicon)
    assert table[0].display() == {
        "bleu4": 100.0, "rouge_l": 100.0, "e_bleu2": 100.0, "e_bleu4": 100.0,
    }


def test_run_eval_empty_dir_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        run_eval(tmp_path, EntityLexicon(["x"]))


def test_run_eval_counts_missing_references(tmp_path):
    art_dir = tmp_path / "artifacts"
    art_dir.mkdir()
    (art_dir / "a.json").write_text(json.dumps({
        "record_id": "a", "task": "t", "answer": "x", "reference": "x",
    }), encoding="utf-8")
    (art_dir / "b.json").write_text(json.dumps({
        "record_id": "b", "task": "t", "answer": "x", "reference": None,
    }), encoding="utf-8")
    table = run_eval(tmp_path, EntityLexicon(["x"]), out_prefix=tmp_path / "rep")
    assert table[0].n_records == 1
    assert "excluded (no reference): 1" in (tmp_path / "rep.txt").read_text(encoding="utf-8")


# -- blast invocation ----------------------------------------------------------------------

def test_run_blast_missing_binary_mentions_bypass():
    config = PipelineConfig()
    with pytest.raises(BlastInvocationError, match="--hits"):
        run_blast(config, FIXTURES / "query.fasta", "out.tsv")


def make_fake_blast(tmp_path, payload, exit_code=0):
    script = tmp_path / "fake_blastp"
    script.write_text(
        "#!/bin/sh\n"
        'out=""\n'
        'while [ $# -gt 0 ]; do\n'
        '  if [ "$1" = "-out" ]; then shift; out="$1"; fi\n'
        "  shift\n"
        "done\n"
        f"printf '{payload}' > \"$out\"\n"
        f"exit {exit_code}\n",
        encoding="utf-8",
    )
    script.chmod(script.stat().st_mode | stat.S_IEXEC)
    return script


def test_run_blast_records_command_and_output(tmp_path):
    row = "case-r1\\tQ55C17\\t98.44\\t64\\t63\\t1e-150\\t880\\n"
    binary = make_fake_blast(tmp_path, row)
    config = PipelineConfig()
    config = replace(config, blast=replace(config.blast, binary=str(binary), db="mini"))
    out = tmp_path / "hits.tsv"
    meta = run_blast(config, FIXTURES / "query.fasta", out)
    assert meta["command"][0] == str(binary)
    assert "-outfmt" in meta["command"]
    from homorag.homology import parse_blast_tabular

    hits = parse_blast_tabular(out.read_text(encoding="utf-8").splitlines(keepends=True))
    assert hits[0].subject_accession == "Q55C17"


def test_run_blast_nonzero_exit(tmp_path):
    binary = make_fake_blast(tmp_path, "", exit_code=3)
    config = PipelineConfig()
    config = replace(config, blast=replace(config.blast, binary=str(binary), db="mini"))
    with pytest.raises(BlastInvocationError, match="exit code 3"):
        run_blast(config, FIXTURES / "query.fasta", tmp_path / "x.tsv")


def test_run_blast_recorded_command_replays_identically(tmp_path):
    import subprocess

    row = "case-r1\\tQ55C17\\t98.44\\t64\\t63\\t1e-150\\t880\\n"
    binary = make_fake_blast(tmp_path, row)
    config = PipelineConfig()
    config = replace(config, blast=replace(config.blast, binary=str(binary), db="mini"))
    out = tmp_path / "hits.tsv"
    meta = run_blast(config, FIXTURES / "query.fasta", out)
    first = out.read_bytes()
    subprocess.run(meta["command"], check=True, capture_output=True)
    assert out.read_bytes() == first


@pytest.mark.skipif(__import__("shutil").which("blastp") is None,
                    reason="live alignment binary not installed")
def test_run_blast_live_tool(tmp_path):
    # optional: exercises the real binary when present
    config = PipelineConfig()
    config = replace(config, blast=replace(config.blast, binary="blastp", db="nonexistent-db"))
    with pytest.raises(BlastInvocationError):
        run_blast(config, FIXTURES / "query.fasta", tmp_path / "x.tsv")


# -- CLI -------------------------------------------------------------------------------------

def write_cli_config(path, index_dir, model_path, cache_dir, hits=FIXTURES / "hits_fixture.tsv"):
    payload = {
        "mode": "full_2d",
        "seed": 0,
        "paths": {
            "index_dir": str(index_dir),
            "filter_model": str(model_path),
            "cache_dir": str(cache_dir),
            "hits": str(hits),
        },
        "backends": {
            "scorer": {"endpoint": "mock:keyword-boost"},
            "embedder": {"endpoint": "mock:hash(dim=32)"},
            "generator": {"endpoint": "mock:echo"},
        },
    }
    path.write_text(yaml.safe_dump(payload), encoding="utf-8")
    return path


def test_cli_index_build_and_lookup(tmp_path, capsys):
    out = tmp_path / "idx"
    rc = cli.main(["index", "build", "--dat", str(FIXTURES / "swissprot_mini.dat"),
                   "--go", str(FIXTURES / "go_mini.obo"), "--out", str(out)])
    assert rc == 0
    assert "indexed 6 records" in capsys.readouterr().out
    rc = cli.main(["index", "lookup", "--index", str(out), "--accession", "Q55C17"])
    assert rc == 0
    dump = capsys.readouterr().out
    assert "accession: Q55C17" in dump
    assert "[CATALYTIC ACTIVITY]" in dump


def test_cli_retrieve(tmp_path, capsys):
    rc = cli.main(["retrieve", "--query", str(FIXTURES / "query.fasta"),
                   "--hits", str(FIXTURES / "hits_fixture.tsv"), "--k", "3"])
    assert rc == 0
    lines = [l for l in capsys.readouterr().out.splitlines() if l]
    assert len(lines) == 3
    assert lines[0].split("\t")[1] == "Q55C17"


def test_cli_retrieve_identity_ceiling(capsys):
    rc = cli.main(["retrieve", "--query", str(FIXTURES / "query.fasta"),
                   "--hits", str(FIXTURES / "hits_fixture.tsv"),
                   "--k", "3", "--identity-ceiling", "0.8"])
    assert rc == 0
    lines = [l for l in capsys.readouterr().out.splitlines() if l]
    # only the 79.69% hit for this query survives a 0.8 ceiling
    assert [l.split("\t")[1] for l in lines] == ["Q9N5Y2"]


def test_cli_filter_label_train_score(index_dir_module, tmp_path, capsys):
    label_dir = tmp_path / "labels"
    rc = cli.main(["--offline", "filter", "label",
                   "--dataset", str(FIXTURES / "label_records.jsonl"),
                   "--index", str(index_dir_module),
                   "--hits", str(FIXTURES / "hits_fixture.tsv"),
                   "--out", str(label_dir)])
    assert rc == 0
    assert (label_dir / "train.jsonl").exists()
    assert (label_dir / "test.jsonl").exists()
    out = capsys.readouterr().out
    assert "labeled" in out

    examples = [json.loads(l) for l in (label_dir / "train.jsonl").read_text().splitlines()]
    labels = {e["label"] for e in examples}
    assert labels <= {0, 1} and len(labels) == 2

    model_path = tmp_path / "model.json"
    rc = cli.main(["filter", "train", "--examples", str(label_dir),
                   "--out", str(model_path), "--epochs", "4"])
    assert rc == 0
    assert model_path.exists()
    assert "trained on" in capsys.readouterr().out

    rc = cli.main(["filter", "score", "--model", str(model_path),
                   "--instruction", "Identify the chemical transformation promoted by this enzyme.",
                   "--tag", "CATALYTIC ACTIVITY"])
    assert rc == 0
    value = float(capsys.readouterr().out.strip())
    assert 0.0 <= value <= 1.0


def test_cli_denoise(index_dir_module, filter_model_module, tmp_path, capsys, records):
    config = make_pipeline_config(index_dir_module, filter_model_module, tmp_path)
    pipe = Pipeline(config)
    artifact = pipe.run_query(records["case-r1"])
    pool_path = tmp_path / "pool.json"
    pool_path.write_text(json.dumps(artifact.pools["horizontal"]), encoding="utf-8")
    rc = cli.main(["--offline", "denoise", "--pool", str(pool_path),
                   "--eps", "0.35", "--min-pts", "2", "--anchor-top", "1"])
    assert rc == 0
    out = capsys.readouterr().out
    assert "Homolog 1 (Q55C17)" in out
    assert "Q3ZCD7" not in out


def test_cli_denoise_accepts_handwritten_pool(tmp_path, capsys):
    # snippet ranks may be omitted in hand-written pool files
    pool = {
        "stage": "HORIZONTAL",
        "homologs": [
            {"rank": 1,
             "hit": {"query_id": "q", "subject_accession": "P00001",
                     "percent_identity": 90.0, "alignment_length": 100,
                     "identity_count": 90, "e_value": 1e-30, "bitscore": 250.0},
             "snippets": [{"tag": "FUNCTION", "value": "shared fact",
                           "source_accession": "P00001"}]},
            {"rank": 2,
             "hit": {"query_id": "q", "subject_accession": "P00002",
                     "percent_identity": 80.0, "alignment_length": 100,
                     "identity_count": 80, "e_value": 1e-20, "bitscore": 200.0},
             "snippets": [{"tag": "FUNCTION", "value": "shared fact",
                           "source_accession": "P00002"}]},
        ],
    }
    pool_path = tmp_path / "pool.json"
    pool_path.write_text(json.dumps(pool), encoding="utf-8")
    rc = cli.main(["--offline", "denoise", "--pool", str(pool_path)])
    assert rc == 0
    out = capsys.readouterr().out
    assert "Homolog 1 (P00001)" in out and "Homolog 2 (P00002)" in out


def test_cli_qa_run_batch_eval(index_dir_module, filter_model_module, tmp_path, capsys):
    config_path = write_cli_config(tmp_path / "config.yaml", index_dir_module,
                                   filter_model_module, tmp_path / "cache")
    rc = cli.main(["--config", str(config_path), "qa", "run",
                   "--dataset", str(FIXTURES / "qa_records.jsonl"), "--id", "case-r1",
                   "--out", str(tmp_path / "single")])
    assert rc == 0
    out = capsys.readouterr().out
    assert "Q55C17" in out and "=== answer ===" in out

    batch_dir = tmp_path / "batch"
    rc = cli.main(["--config", str(config_path), "qa", "batch",
                   "--dataset", str(FIXTURES / "qa_records.jsonl"), "--out", str(batch_dir)])
    assert rc == 0
    assert json.loads(capsys.readouterr().out)["processed"] == 10

    rc = cli.main(["qa", "eval", "--artifacts", str(batch_dir),
                   "--lexicon", str(FIXTURES / "lexicon.txt"),
                   "--index", str(index_dir_module),
                   "--out", str(tmp_path / "report")])
    assert rc == 0
    assert "Catalytic Activity" in capsys.readouterr().out


def test_cli_blast_missing_binary(capsys):
    rc = cli.main(["blast", "run", "--query", str(FIXTURES / "query.fasta"),
                   "--out", "unused.tsv"])
    assert rc == 2
    assert "--hits" in capsys.readouterr().err


def test_cli_error_paths(tmp_path, capsys):
    rc = cli.main(["index", "lookup", "--index", str(tmp_path / "missing"),
                   "--accession", "Q55C17"])
    assert rc == 2
    assert "error:" in capsys.readouterr().err


def test_load_config_offline_and_env_override(tmp_path, monkeypatch):
    config_path = tmp_path / "c.yaml"
    config_path.write_text(yaml.safe_dump({
        "backends": {"generator": {"endpoint": "http://real.backend/gen"}},
    }), encoding="utf-8")
    config = load_config(config_path)
    assert config.generator.endpoint == "http://real.backend/gen"
    offline = load_config(config_path, offline=True)
    assert offline.generator.endpoint.startswith("mock:")
    monkeypatch.setenv("HOMORAG_SCORER_ENDPOINT", "http://scorer.env/score")
    with_env = load_config(config_path)
    assert with_env.scorer.endpoint == "http://scorer.env/score"


def test_load_config_rejects_unknown_keys(tmp_path):
    config_path = tmp_path / "c.yaml"
    config_path.write_text(yaml.safe_dump({"retrieval": {"topk": 3}}), encoding="utf-8")
    with pytest.raises(ConfigError, match="unknown key 'retrieval.topk'"):
        load_config(config_path)


def test_load_config_seed_override(tmp_path):
    config_path = tmp_path / "c.yaml"
    config_path.write_text(yaml.safe_dump({"seed": 7}), encoding="utf-8")
    assert load_config(config_path).seed == 7
    assert load_config(config_path, seed=42).seed == 42


def test_cli_retrieve_rejects_invalid_query_sequence(tmp_path, capsys):
    bad = tmp_path / "bad.fasta"
    bad.write_text(">q1\nACDJ123\n", encoding="utf-8")
    rc = cli.main(["retrieve", "--query", str(bad),
                   "--hits", str(FIXTURES / "hits_fixture.tsv")])
    assert rc == 2
    assert "invalid residues" in capsys.readouterr().err
