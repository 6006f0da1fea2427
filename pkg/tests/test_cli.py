import json

import numpy as np
import pandas as pd
import pytest

from embed_forensics.cli import build_parser, main
from embed_forensics.ingest import EmbeddingMatrix, LabeledDataset, save_dataset, save_embeddings
from embed_forensics.ingest import load_embeddings


def read_report(path):
    with open(path) as fin:
        return json.load(fin)


@pytest.fixture
def cluster_file(tmp_path, clusters):
    """A factory writing labelled cluster embeddings to a jsonl file."""

    def cluster_file_(name="emb.jsonl", **kwargs):
        _, m = clusters(**kwargs)
        path = tmp_path / name
        save_embeddings(m, path)
        return path

    return cluster_file_


def test_parser_lists_every_command():
    _, commands = build_parser()
    assert set(commands) == {"embed", "pca", "scree", "lda", "regress", "kde", "detect", "compare"}


def test_pca(tmp_path, cluster_file):
    emb = cluster_file(dims=6)
    out = tmp_path / "out"
    assert main(["pca", "--embeddings", str(emb), "--out", str(out), "--n-components", "2"]) == 0
    scores = pd.read_csv(out / "pca_scores.csv")
    assert list(scores.columns) == ["id", "label", "PC1", "PC2"]
    assert len(scores) == 100
    scree = pd.read_csv(out / "scree.csv")
    assert scree["component"].tolist() == [1, 2]
    report = read_report(out / "pca.report.json")
    assert report["command"] == "pca"
    assert report["results"]["n_components"] == 2
    assert report["input_digests"]["embeddings"][0]["path"] == str(emb)
    assert "generated_at" in report


def test_scree(tmp_path, cluster_file):
    emb = cluster_file(dims=8, separation=20.0)
    assert main(["scree", "--embeddings", str(emb), "--out", str(tmp_path), "--standardize"]) == 0
    results = read_report(tmp_path / "scree.report.json")["results"]
    assert results["components_fitted"] == 8
    assert 1 <= results["elbow"] <= 8
    assert len(pd.read_csv(tmp_path / "scree.csv")) == 8
    assert "recorded_budget" not in results


def test_lda_ten_classes(tmp_path, cluster_file):
    emb = cluster_file(n_classes=10, dims=20, n_per_class=30, separation=8.0)
    argv = ["lda", "--embeddings", str(emb), "--out", str(tmp_path), "--train-fraction", "0.7"]
    assert main(argv) == 0
    confusion = pd.read_csv(tmp_path / "confusion.csv").set_index("true")
    assert confusion.sum(axis=1).tolist() == [9] * 10
    scores = pd.read_csv(tmp_path / "lda_scores.csv")
    assert [c for c in scores.columns if c.startswith("LD")] == [f"LD{i}" for i in range(1, 10)]
    assert (scores["split"] == "test").sum() == 90
    results = read_report(tmp_path / "lda.report.json")["results"]
    assert results["n_test"] == 90
    assert results["model"]["n_axes"] == 9
    assert results["accuracy"] == pytest.approx(np.trace(confusion.values) / 90)


def test_regress_on_a_label_indicator(tmp_path, cluster_file):
    emb = cluster_file(dims=5, separation=10.0)
    argv = ["regress", "--embeddings", str(emb), "--out", str(tmp_path), "--indicator", "label:c1"]
    assert main(argv) == 0
    table = pd.read_csv(tmp_path / "regressions.csv")
    assert table.loc[0, "response"] == "PC1"
    assert table.loc[0, "r_squared"] > 0.9
    report = read_report(tmp_path / "regress.report.json")
    assert report["rules"] == [{"kind": "label", "targets": ["c1"]}]
    assert report["results"]["regressions"][0]["r_squared"] > 0.9


def test_regress_text_indicators_on_several_components(tmp_path, clusters):
    texts = ["- one\n- two" if j % 2 else "plain" for j in range(100)]
    d, m = clusters(texts=texts)
    save_embeddings(m, tmp_path / "emb.csv")
    save_dataset(d, tmp_path / "data.jsonl")
    argv = [
        "regress",
        "--embeddings",
        str(tmp_path / "emb.csv"),
        "--labels",
        str(tmp_path / "data.jsonl"),
        "--out",
        str(tmp_path),
        "--components",
        "1,2",
        "--indicator",
        "lists",
        "--indicator",
        "label:c0",
    ]
    assert main(argv) == 0
    table = pd.read_csv(tmp_path / "regressions.csv")
    assert table["response"].tolist() == ["PC1, PC2", "PC1, PC2"]
    regressions = read_report(tmp_path / "regress.report.json")["results"]["regressions"]
    assert [r["construction"] for r in regressions] == ["indicator_on_scores"] * 2
    assert regressions[1]["r_squared"] > regressions[0]["r_squared"]


def test_regress_on_discriminant_axis(tmp_path, cluster_file):
    emb = cluster_file(n_classes=3, dims=6)
    argv = [
        "regress",
        "--embeddings",
        str(emb),
        "--out",
        str(tmp_path),
        "--space",
        "lda",
        "--indicator",
        "label:c0",
    ]
    assert main(argv) == 0
    assert pd.read_csv(tmp_path / "regressions.csv").loc[0, "response"] == "LD1"


def test_deterministic_reports_are_byte_identical(tmp_path, cluster_file):
    emb = cluster_file()
    argv = [
        "regress",
        "--embeddings",
        str(emb),
        "--out",
        str(tmp_path),
        "--indicator",
        "label:c1",
        "--deterministic",
    ]
    assert main(argv) == 0
    first = (tmp_path / "regress.report.json").read_bytes()
    assert main(argv) == 0
    assert (tmp_path / "regress.report.json").read_bytes() == first
    report = json.loads(first)
    assert "generated_at" not in report
    assert report["config"]["run"]["deterministic"] is True


def test_missing_input_exits_with_2(tmp_path):
    argv = ["pca", "--embeddings", str(tmp_path / "nope.jsonl"), "--out", str(tmp_path)]
    assert main(argv) == 2


def test_unknown_preset_exits_with_2(tmp_path, cluster_file):
    emb = cluster_file()
    argv = ["regress", "--embeddings", str(emb), "--out", str(tmp_path), "--indicator", "nope"]
    assert main(argv) == 2


def test_rule_file_indicator(tmp_path, cluster_file):
    emb = cluster_file()
    rule = tmp_path / "rule.json"
    rule.write_text(json.dumps({"kind": "label", "targets": ["c0"]}))
    argv = [
        "regress",
        "--embeddings",
        str(emb),
        "--out",
        str(tmp_path),
        "--indicator",
        f"rule:{rule}",
    ]
    assert main(argv) == 0
    assert read_report(tmp_path / "regress.report.json")["rules"][0]["targets"] == ["c0"]


def test_kde(tmp_path, cluster_file):
    emb = cluster_file()
    argv = [
        "kde",
        "--embeddings",
        str(emb),
        "--out",
        str(tmp_path),
        "--indicator",
        "label:c1",
        "--grid-points",
        "50",
    ]
    assert main(argv) == 0
    frame = pd.read_csv(tmp_path / "kde.csv")
    assert list(frame.columns) == ["x", "density_0", "density_1"]
    assert len(frame) == 50
    results = read_report(tmp_path / "kde.report.json")["results"]
    assert results["group_sizes"] == {"0": 50, "1": 50}


def contaminated_file(path, n_ref=100, n_llm=5, dims=5, shift=12.0, seed=0):
    rng = np.random.default_rng(seed)
    values = rng.normal(size=(n_ref + n_llm, dims))
    values[n_ref:, 0] += shift
    labels = ["human"] * n_ref + ["llm"] * n_llm
    m = EmbeddingMatrix(values, [f"r{j}" for j in range(n_ref + n_llm)], labels)
    save_embeddings(m, path)
    return path


def test_detect(tmp_path):
    emb = contaminated_file(tmp_path / "emb.jsonl")
    argv = [
        "detect",
        "--embeddings",
        str(emb),
        "--out",
        str(tmp_path),
        "--positive-label",
        "llm",
        "--n-pcs",
        "1",
        "--n-trees",
        "100",
    ]
    assert main(argv) == 0
    results = read_report(tmp_path / "detect.report.json")["results"]
    assert results["n_trees"] == 100
    assert results["positives"] == 5
    assert results["auroc"] > 0.9
    scores = pd.read_csv(tmp_path / "anomaly_scores.csv")
    assert list(scores.columns) == ["id", "label", "score", "truth"]
    roc = pd.read_csv(tmp_path / "roc.csv")
    assert list(roc.columns)[:2] == ["fpr", "tpr"]
    assert roc["tpr"].iloc[-1] == 1.0


def test_detect_tunes_tree_count(tmp_path):
    emb = contaminated_file(tmp_path / "emb.jsonl")
    argv = [
        "detect",
        "--embeddings",
        str(emb),
        "--out",
        str(tmp_path),
        "--positive-label",
        "llm",
        "--n-pcs",
        "2",
        "--seeds",
        "2",
        "--max-trees",
        "25",
    ]
    assert main(argv) == 0
    assert read_report(tmp_path / "detect.report.json")["results"]["n_trees"] in (10, 25)


def test_detect_unknown_label(tmp_path):
    emb = contaminated_file(tmp_path / "emb.jsonl")
    argv = ["detect", "--embeddings", str(emb), "--out", str(tmp_path), "--positive-label", "x"]
    assert main(argv) == 2


def test_detect_grid(tmp_path):
    rng = np.random.default_rng(4)
    reference = rng.normal(size=(150, 4))
    contaminants = rng.normal(size=(10, 4)) + [12.0, 0.0, 0.0, 0.0]
    save_embeddings(EmbeddingMatrix(reference, [f"r{j}" for j in range(150)]), tmp_path / "ref.csv")
    save_embeddings(EmbeddingMatrix(contaminants, [f"c{j}" for j in range(10)]), tmp_path / "con.csv")
    argv = [
        "detect",
        "--grid",
        "--reference",
        str(tmp_path / "ref.csv"),
        "--contaminants",
        str(tmp_path / "con.csv"),
        "--out",
        str(tmp_path),
        "--n-reference",
        "50,100",
        "--m-contaminants",
        "1,3",
        "--n-pcs",
        "3",
        "--seeds",
        "2",
        "--max-trees",
        "10",
    ]
    assert main(argv) == 0
    assert len(pd.read_csv(tmp_path / "auroc_table.csv")) == 8
    summary = pd.read_csv(tmp_path / "auroc_summary.csv")
    assert list(summary.columns) == ["N", "M", "n_trees", "mean_auroc", "median_auroc"]
    assert (tmp_path / "median_roc_N50.csv").exists()
    assert (tmp_path / "median_roc_N100.csv").exists()
    report = read_report(tmp_path / "detect.report.json")
    assert len(report["input_digests"]["embeddings"]) == 2


def test_detect_grid_report_does_not_depend_on_workers(tmp_path):
    rng = np.random.default_rng(5)
    reference = EmbeddingMatrix(rng.normal(size=(80, 3)), [f"r{j}" for j in range(80)])
    contaminants = EmbeddingMatrix(rng.normal(size=(6, 3)) + 8.0, [f"c{j}" for j in range(6)])
    save_embeddings(reference, tmp_path / "ref.csv")
    save_embeddings(contaminants, tmp_path / "con.csv")
    argv = [
        "detect",
        "--grid",
        "--reference",
        str(tmp_path / "ref.csv"),
        "--contaminants",
        str(tmp_path / "con.csv"),
        "--out",
        str(tmp_path / "out"),
        "--n-reference",
        "40",
        "--m-contaminants",
        "1,3",
        "--n-pcs",
        "2",
        "--seeds",
        "3",
        "--max-trees",
        "10",
        "--deterministic",
    ]
    report = tmp_path / "out" / "detect.report.json"
    assert main(argv + ["--n-jobs", "1"]) == 0
    first = report.read_bytes()
    assert main(argv + ["--n-jobs", "2"]) == 0
    assert report.read_bytes() == first
    config = tmp_path / "run.yaml"
    config.write_text("n_jobs: 2\n")
    assert main(argv + ["--config", str(config)]) == 0
    assert report.read_bytes() == first
    assert "n_jobs" not in json.loads(first)["config"]["options"]


def test_detect_grid_rejects_where(tmp_path):
    argv = [
        "detect",
        "--grid",
        "--reference",
        str(tmp_path / "ref.csv"),
        "--contaminants",
        str(tmp_path / "con.csv"),
        "--out",
        str(tmp_path),
        "--where",
        "label:a",
    ]
    assert main(argv) == 2


def test_detect_grid_needs_both_files(tmp_path):
    assert main(["detect", "--grid", "--out", str(tmp_path)]) == 2


def test_compare(tmp_path, clusters, rng):
    d, m = clusters(n_per_class=40, dims=6, separation=12.0)
    noise = EmbeddingMatrix(rng.normal(size=(80, 3)), m.sample_ids)
    save_embeddings(m, tmp_path / "good.jsonl")
    save_embeddings(noise, tmp_path / "noise.csv")
    save_dataset(d, tmp_path / "data.jsonl")
    argv = [
        "compare",
        "--embeddings",
        f"good={tmp_path / 'good.jsonl'}",
        "--embeddings",
        f"noise={tmp_path / 'noise.csv'}",
        "--labels",
        str(tmp_path / "data.jsonl"),
        "--out",
        str(tmp_path),
    ]
    assert main(argv) == 0
    table = pd.read_csv(tmp_path / "compare.csv")
    assert table["embedder"].tolist() == ["good", "noise"]
    assert table.loc[0, "accuracy"] == 1.0


def test_embed_against_stub(tmp_path, stub_service):
    stub = stub_service()
    texts = [f"text number {j}" for j in range(5)]
    save_dataset(
        LabeledDataset.from_columns([f"t{j}" for j in range(5)], ["a"] * 5, texts),
        tmp_path / "texts.jsonl",
    )
    out = tmp_path / "emb" / "vectors.embx"
    argv = [
        "embed",
        "--texts",
        str(tmp_path / "texts.jsonl"),
        "--out",
        str(out),
        "--service-url",
        stub.url,
        "--batch-size",
        "2",
    ]
    assert main(argv) == 0
    assert len(stub.requests) == 3
    m = load_embeddings(out)
    assert (m.rows, m.dims) == (5, 4)
    assert m.sample_ids == tuple(f"t{j}" for j in range(5))
    report = read_report(tmp_path / "emb" / "vectors.embx.report.json")
    assert report["results"]["rows"] == 5


def test_embed_missing_token_makes_no_request(tmp_path, stub_service, monkeypatch):
    stub = stub_service(required_token="s3cret")
    monkeypatch.delenv("EMBED_TOKEN", raising=False)
    save_dataset(LabeledDataset.from_columns(["a"], ["x"], ["hello"]), tmp_path / "texts.jsonl")
    argv = [
        "embed",
        "--texts",
        str(tmp_path / "texts.jsonl"),
        "--out",
        str(tmp_path / "e.jsonl"),
        "--service-url",
        stub.url,
        "--auth-token-env",
        "EMBED_TOKEN",
    ]
    assert main(argv) == 2
    assert stub.requests == []


def test_embed_service_failure_exits_with_1(tmp_path, stub_service):
    stub = stub_service(fail_first=10, fail_status=404)
    save_dataset(LabeledDataset.from_columns(["a"], ["x"], ["hello"]), tmp_path / "texts.jsonl")
    argv = [
        "embed",
        "--texts",
        str(tmp_path / "texts.jsonl"),
        "--out",
        str(tmp_path / "e.jsonl"),
        "--service-url",
        stub.url,
    ]
    assert main(argv) == 1
    assert len(stub.requests) == 1


def test_yaml_config(tmp_path, cluster_file):
    emb = cluster_file(dims=6)
    config = tmp_path / "run.yaml"
    config.write_text("n_components: 2\nstandardize: true\n")
    base = ["pca", "--embeddings", str(emb), "--config", str(config)]

    assert main(base + ["--out", str(tmp_path / "a")]) == 0
    report = read_report(tmp_path / "a" / "pca.report.json")
    assert report["results"]["n_components"] == 2
    assert report["config"]["run"]["standardize"] is True

    # flags on the command line win
    assert main(base + ["--out", str(tmp_path / "b"), "--n-components", "3"]) == 0
    assert read_report(tmp_path / "b" / "pca.report.json")["results"]["n_components"] == 3


def test_yaml_config_rejects_unknown_keys(tmp_path, cluster_file):
    emb = cluster_file()
    config = tmp_path / "run.yaml"
    config.write_text("bogus: 1\n")
    argv = ["pca", "--embeddings", str(emb), "--out", str(tmp_path), "--config", str(config)]
    assert main(argv) == 2


def test_kde_reports_resolved_bandwidths(tmp_path, cluster_file):
    emb = cluster_file()
    base = ["kde", "--embeddings", str(emb), "--indicator", "label:c1"]
    assert main(base + ["--out", str(tmp_path / "a")]) == 0
    scott = read_report(tmp_path / "a" / "kde.report.json")["results"]["bandwidth"]
    assert set(scott) == {"0", "1"}
    assert all(h > 0 for h in scott.values())

    assert main(base + ["--out", str(tmp_path / "b"), "--bandwidth", "0.5"]) == 0
    fixed = read_report(tmp_path / "b" / "kde.report.json")["results"]["bandwidth"]
    assert fixed == {"0": 0.5, "1": 0.5}


def test_where_keeps_only_the_named_labels(tmp_path, cluster_file):
    emb = cluster_file(n_classes=3)
    argv = ["pca", "--embeddings", str(emb), "--out", str(tmp_path), "--where", "label:c0,c2"]
    assert main(argv) == 0
    scores = pd.read_csv(tmp_path / "pca_scores.csv")
    assert len(scores) == 100
    assert set(scores["label"]) == {"c0", "c2"}
    assert read_report(tmp_path / "pca.report.json")["config"]["run"]["where"] == ["c0", "c2"]


def test_where_unknown_label_exits_with_2(tmp_path, cluster_file):
    emb = cluster_file()
    argv = ["pca", "--embeddings", str(emb), "--out", str(tmp_path), "--where", "label:nope"]
    assert main(argv) == 2


@pytest.mark.parametrize("where", ["c0", "kind:c0", "label:"])
def test_where_bad_syntax(tmp_path, cluster_file, where):
    emb = cluster_file()
    with pytest.raises(SystemExit):
        main(["pca", "--embeddings", str(emb), "--out", str(tmp_path), "--where", where])
