import json
import os
from pathlib import Path

import numpy as np
import pytest

from stcl.cli import run_cli
from stcl.formats import load_embeddings, load_manifest, load_metadata, save_tensor
from stcl.pairs import audit_manifest

SUBCOMMANDS = ["synth", "mine", "train", "eval-vpr", "eval-socio", "eval-safety", "analyze-attn", "analyze-freq", "retrieve"]


def ok(*argv):
    assert run_cli([str(a) for a in argv]) == 0, argv


def run_pipeline(root: Path):
    """Every subcommand once, with relative paths so two roots are comparable."""
    cwd = os.getcwd()
    os.chdir(root)
    try:
        ok("synth", "--out", "world", "--seed", 7, "--n-areas", 20, "--locations-per-area", 4)
        ok("mine", "temporal", "--metadata", "world/metadata.csv", "--out", "temporal.csv", "--max-dist-m", 5, "--pairs-per-location", 6)
        ok("mine", "spatial", "--metadata", "world/metadata.csv", "--areas", "world/areas.json", "--out", "spatial.csv", "--pairs-per-area", 10)
        ok("mine", "self", "--metadata", "world/metadata.csv", "--out", "self.csv", "--target-count", 100, "--seed", 3)
        ok("train", "--manifest", "temporal.csv", "--observations", "world/observations.emb", "--out", "run",
           "--epochs", 4, "--warmup-epochs", 1, "--hidden", "16", "--embed-dim", 8, "--batch-size", 32, "--seed", 1)
        Path("vpr.json").write_text(json.dumps({
            "queries": "run/embeddings.emb", "query_metadata": "world/metadata.csv",
            "database": "run/embeddings.emb", "database_metadata": "world/metadata.csv", "match_threshold_m": 25,
        }))
        ok("eval-vpr", "--task", "vpr.json", "--k", "1,5,10,15,20,25", "--out", "vpr_report.json")
        ok("eval-socio", "--embeddings", "run/embeddings.emb", "--metadata", "world/metadata.csv",
           "--targets", "world/targets.csv", "--out", "socio.json")
        ok("eval-safety", "--embeddings", "run/embeddings.emb", "--labels", "world/labels.csv", "--out", "safety.json")
        rng = np.random.default_rng(0)
        attn = rng.random((2, 2, 5, 5))
        save_tensor("attn.bin", "attention", attn / attn.sum(-1, keepdims=True), 2, 2, 16, class_token=True)
        save_tensor("feat.bin", "features", rng.normal(size=(3, 16, 4)), 4, 4)
        ok("analyze-attn", "--tensor", "attn.bin", "--out", "attn.csv")
        ok("analyze-freq", "--tensor", "feat.bin", "--out", "freq.csv")
        first = load_metadata("world/metadata.csv")[0].id
        ok("retrieve", "--embeddings", "run/embeddings.emb", "--metadata", "world/metadata.csv", "--query", first, "--out", "top.json")
    finally:
        os.chdir(cwd)


def tree(root: Path):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def pipelines(tmp_path_factory):
    roots = [tmp_path_factory.mktemp(f"run{i}") for i in range(2)]
    for r in roots:
        run_pipeline(r)
    return roots


class TestPipeline:
    def test_byte_identical_reruns(self, pipelines):
        a, b = (tree(r) for r in pipelines)
        assert a.keys() == b.keys()
        for name in a:
            assert a[name] == b[name], name

    def test_expected_artifacts(self, pipelines):
        files = set(tree(pipelines[0]))
        for name in [
            "world/metadata.csv", "world/observations.emb", "world/observations.ids", "world/truth.json",
            "world/areas.json", "world/config.json", "temporal.csv", "temporal.json", "run/checkpoint.bin",
            "run/loss_curve.csv", "run/config.json", "run/embeddings.emb", "attn.config.json", "freq.config.json",
        ]:
            assert name in files

    def test_manifest_audit(self, pipelines):
        root = pipelines[0]
        recs = load_metadata(root / "world/metadata.csv")
        for kind in ("temporal", "spatial", "self"):
            m = load_manifest(root / f"{kind}.csv")
            assert len(m) > 0 and audit_manifest(m, recs) == []
            side = json.loads((root / f"{kind}.json").read_text())
            assert side["audit"]["violations"] == 0 and side["config"]["args"]["seed"] == (3 if kind == "self" else 0)

    def test_vpr_k_grid(self, pipelines):
        rep = json.loads((pipelines[0] / "vpr_report.json").read_text())
        assert sorted(int(k) for k in rep["recall"]) == [1, 5, 10, 15, 20, 25]
        assert rep["config"]["args"]["k"] == [1, 5, 10, 15, 20, 25]

    def test_reports(self, pipelines):
        root = pipelines[0]
        socio = json.loads((root / "socio.json").read_text())
        assert socio["Overall Total"] == socio["labels"]["indicator"]["test_r2"]
        safety = json.loads((root / "safety.json").read_text())
        assert {"accuracy", "recall", "f1", "auc"} <= set(safety)
        loss = (root / "run/loss_curve.csv").read_text().splitlines()
        assert loss[0] == "epoch,mean_loss" and len(loss) == 5
        attn = (root / "attn.csv").read_text().splitlines()
        assert attn[0] == "layer,head,value" and "0,mean," in (root / "attn.csv").read_text()
        assert (root / "freq.csv").read_text().splitlines()[0] == "layer,value"
        top = json.loads((root / "top.json").read_text())
        assert [h["rank"] for h in top["results"]] == [1, 2, 3, 4, 5]

    def test_inputs_untouched(self, pipelines, tmp_path):
        root = pipelines[0]
        before = (root / "world/metadata.csv").read_bytes()
        emb = load_embeddings(root / "world/observations.emb", normalize=False)
        assert (root / "world/metadata.csv").read_bytes() == before
        assert len(emb) == 20 * 4 * 4


class TestErrors:
    def test_unknown_flag(self, capsys):
        assert run_cli(["synth", "--out", "x", "--bogus"]) != 0
        assert "usage:" in capsys.readouterr().err

    def test_unknown_subcommand(self, capsys):
        assert run_cli(["frobnicate"]) != 0
        assert "usage:" in capsys.readouterr().err

    def test_single_line_error(self, tmp_path, capsys):
        code = run_cli(["retrieve", "--embeddings", str(tmp_path / "none.emb"), "--metadata", "m.csv", "--query", "q"])
        err = capsys.readouterr().err
        assert code == 1
        assert err.count("\n") == 1 and err.startswith("error: retrieve:")

    def test_help_lists_subcommands(self, capsys):
        with pytest.raises(SystemExit):
            from stcl.cli import build_parser

            build_parser().parse_args(["--help"])
        out = capsys.readouterr().out
        assert all(s in out for s in SUBCOMMANDS) and "--threads" in out

    def test_degenerate_target_reported(self, tmp_path, monkeypatch):
        monkeypatch.chdir(tmp_path)
        ok("synth", "--out", "w", "--n-areas", 12, "--locations-per-area", 2, "--area-scale", 0)
        ok("eval-socio", "--embeddings", "w/observations.emb", "--metadata", "w/metadata.csv", "--targets", "w/targets.csv", "--out", "s.json")
        rep = json.loads(Path("s.json").read_text())
        assert rep["labels"]["indicator"]["degenerate_target"] is True
        assert rep["Overall Total"] is None
