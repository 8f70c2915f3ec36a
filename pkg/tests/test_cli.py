import json

from app import services
from app.cli import main
from app.exceptions import PreflightError

SMALL_MAIN = {
    "kind": "main",
    "grid": {"levels": [5, 5]},
    "norms": [{"p": [2.0, 2.0]}],
    "corpus": {"name": "bumps", "count": 1, "max_frequency": 4},
    "refine": False,
}


def write_config(tmp_path, payload) -> str:
    path = tmp_path / "config.json"
    path.write_text(json.dumps(payload))
    return str(path)


def test_verify_single_module(capsys):
    """A passing suite exits 0 and prints one line per check."""
    assert main(["verify-invariants", "--module", "norms"]) == 0
    assert "PASS  norms.mixed-norm-oracle" in capsys.readouterr().out


def test_corpus_command_writes_summary(tmp_path):
    """--out keeps a copy of the printed summary."""
    code = main(["corpus", "--recipe", "zero", "--levels", "4", "4", "--count", "2", "--out", str(tmp_path)])
    assert code == 0
    rows = json.loads((tmp_path / "corpus.json").read_text())
    assert [row["sup"] for row in rows] == [0.0, 0.0]


def test_run_writes_report(tmp_path, capsys):
    """run emits the JSON, CSV and manifest files into --out."""
    out = tmp_path / "out"
    code = main(["run", "--config", write_config(tmp_path, SMALL_MAIN), "--out", str(out), "--seed", "9"])
    assert code == 0
    assert sorted(p.name for p in out.iterdir()) == ["manifest.json", "records.csv", "records.jsonl", "summary.json"]
    assert json.loads((out / "summary.json").read_text())["seed"] == 9
    assert json.loads(capsys.readouterr().out.splitlines()[-1])["out"] == str(out)


def test_run_without_kind(tmp_path, capsys):
    """A config without a kind and no --kind is a usage error."""
    payload = {key: value for key, value in SMALL_MAIN.items() if key != "kind"}
    assert main(["run", "--config", write_config(tmp_path, payload), "--out", str(tmp_path / "out")]) == 2
    assert "no experiment kind" in capsys.readouterr().err


def test_run_with_invalid_config(tmp_path):
    """Validation errors exit with 2."""
    assert main(["run", "--config", write_config(tmp_path, {"kind": "main", "densities": [0.0]})]) == 2


def test_run_with_failed_preflight(tmp_path, monkeypatch, capsys):
    """A failed invariant exits with 1 and names the check."""
    def failing(kind):
        raise PreflightError("grid.nesting", "broken on purpose")

    monkeypatch.setattr(services, "preflight", failing)
    code = main(["run", "--config", write_config(tmp_path, SMALL_MAIN), "--out", str(tmp_path / "out")])
    assert code == 1
    assert "grid.nesting" in capsys.readouterr().err
