import json
import re
import sys

import jsonschema
import pytest

from ancestry import ANCESTRY_JSON_SCHEMA
from cli import build_parser, main
from config import resolve_deterministic

ID_RE = re.compile(r"^[0-9a-f]{64}$")


@pytest.fixture
def cli(tmp_path, capsys):
    """Запуск main с hub и workdir во временном каталоге: (код выхода, stdout)"""
    base = ["--hub", str(tmp_path / "hub"), "--workdir", str(tmp_path / "runs")]

    def invoke(*args):
        code = main([*base, *args])
        out = capsys.readouterr().out
        return code, out

    return invoke


@pytest.fixture
def sources(tmp_path):
    app = tmp_path / "app"
    app.mkdir()
    (app / "upper.py").write_text(
        "import sys\nfrom pathlib import Path\n"
        "text = Path(sys.argv[1]).read_text()\n"
        "Path(sys.argv[2], 'result.txt').write_text(text.upper())\n"
    )
    deck = tmp_path / "deck.txt"
    deck.write_text("hello pallets\n")
    return app, deck


def _wrap(cli, path, kind, name):
    code, out = cli("--deterministic", "wrap", str(path), "--kind", kind, "--name", name)
    assert code == 0
    return out.strip()


def _run(cli, tmp_path, app_id, deck_id, name, *command, inputs=()):
    args = ["--deterministic", "run", "--app", app_id, "--deck", deck_id, "--name", name,
            "--report", str(tmp_path / f"{name}.json")]
    for input_id in inputs:
        args += ["--input", input_id]
    return cli(*args, "--", *command)


def test_wrap_prints_id(cli, sources):
    app, _ = sources
    pallet_id = _wrap(cli, app, "application", "upper")
    assert ID_RE.match(pallet_id)


def test_deterministic_wrap_is_stable(cli, sources):
    _, deck = sources
    assert _wrap(cli, deck, "input_deck", "deck") == _wrap(cli, deck, "input_deck", "deck")


def test_wrap_json(cli, sources):
    _, deck = sources
    code, out = cli("--json", "wrap", str(deck), "--kind", "input_deck")
    assert code == 0
    doc = json.loads(out)
    assert doc["kind"] == "input_deck"
    assert ID_RE.match(doc["id"])


def test_wrap_missing_path(cli, tmp_path):
    code, _ = cli("wrap", str(tmp_path / "nothing"), "--kind", "application")
    assert code == 2


def test_run_end_to_end(cli, tmp_path, sources):
    app, deck = sources
    app_id = _wrap(cli, app, "application", "upper")
    deck_id = _wrap(cli, deck, "input_deck", "deck")

    code, out = _run(cli, tmp_path, app_id, deck_id, "upper-node",
                     sys.executable, "{APP}/upper.py", "{DECK}/deck.txt", "{OUT}")

    assert code == 0
    output_id = out.strip()
    assert ID_RE.match(output_id)
    report = json.loads((tmp_path / "upper-node.json").read_text())
    assert report["exit_code"] == 0
    assert report["output_id"] == output_id
    assert {"t_prepare", "t_spawn", "t_app", "t_seal", "t_teardown", "t_total"} <= set(report)

    dest = tmp_path / "extracted"
    code, _ = cli("extract", output_id, str(dest))
    assert code == 0
    assert (dest / "result.txt").read_text() == "HELLO PALLETS\n"


def test_run_unknown_application(cli, tmp_path, sources):
    _, deck = sources
    deck_id = _wrap(cli, deck, "input_deck", "deck")
    code, _ = _run(cli, tmp_path, "f" * 64, deck_id, "ghost", "true")
    assert code == 3


def test_run_invalid_id(cli, tmp_path):
    code, _ = _run(cli, tmp_path, "not-an-id", "d" * 64, "bad", "true")
    assert code == 2


def test_run_propagates_exit_code(cli, tmp_path, sources):
    app, deck = sources
    app_id = _wrap(cli, app, "application", "upper")
    deck_id = _wrap(cli, deck, "input_deck", "deck")

    code, _ = _run(cli, tmp_path, app_id, deck_id, "failing", "sh", "-c", "exit 5")

    assert code == 5
    report = json.loads((tmp_path / "failing.json").read_text())
    assert report["exit_code"] == 5
    assert report["output_id"] is None
    assert (tmp_path / "runs" / "quarantine").is_dir()


def test_inspect_and_verify(cli, tmp_path, sources):
    _, deck = sources
    deck_id = _wrap(cli, deck, "input_deck", "deck")

    code, out = cli("inspect", deck_id)
    assert code == 0
    assert deck_id in out
    assert "input_deck" in out

    code, out = cli("--json", "inspect", deck_id)
    doc = json.loads(out)
    assert doc["id"] == deck_id
    assert doc["annotation"]["kind"] == "input_deck"
    assert [p["kind"] for p in doc["partitions"]] == ["DATA_ARCHIVE", "ANNOTATIONS"]

    code, out = cli("verify", deck_id)
    assert code == 0
    assert out.strip() == f"{deck_id} ok"


def test_inspect_tampered_file(cli, tmp_path, sources):
    _, deck = sources
    deck_id = _wrap(cli, deck, "input_deck", "deck")
    stored = tmp_path / "hub" / "objects" / deck_id[:2] / f"{deck_id}.pallet"
    data = bytearray(stored.read_bytes())
    data[-1] ^= 0x01
    tampered = tmp_path / "tampered.pallet"
    tampered.write_bytes(bytes(data))

    code, out = cli("inspect", str(tampered))
    assert code == 4
    assert "annotation:" not in out
    assert cli("verify", str(tampered))[0] == 4

    code, _ = cli("extract", str(tampered), str(tmp_path / "dest"))
    assert code == 4
    assert not any((tmp_path / "dest").iterdir())


def test_not_found(cli):
    assert cli("inspect", "a" * 64)[0] == 3
    assert cli("ancestry", "a" * 64)[0] == 3
    assert cli("inspect", "neither-file-nor-id")[0] == 2


def test_ancestry_of_chain(cli, tmp_path):
    data_ids = []
    for i in range(3):
        step = tmp_path / f"app-{i}"
        step.mkdir()
        (step / "step.sh").write_text(f"# step {i}\n")
        deck = tmp_path / f"deck-{i}.txt"
        deck.write_text(f"step={i}\n")
        app_id = _wrap(cli, step, "application", f"app-{i}")
        deck_id = _wrap(cli, deck, "input_deck", f"deck-{i}")
        script = "cat ../deck/*.txt > step.txt" + (" && cat {IN:0}/step.txt >> step.txt" if i else "")
        code, out = _run(cli, tmp_path, app_id, deck_id, f"step-{i}", "sh", "-c", script,
                         inputs=data_ids[-1:])
        assert code == 0
        data_ids.append(out.strip())

    code, dot = cli("ancestry", data_ids[-1], "--dot")
    assert code == 0
    assert dot.startswith("digraph ancestry {")
    node_lines = [line for line in dot.splitlines() if "[label=" in line and "->" not in line]
    assert len(node_lines) == 9
    assert len([line for line in dot.splitlines() if "->" in line]) == 8

    code, out = cli("--json", "ancestry", data_ids[-1])
    doc = json.loads(out)
    jsonschema.validate(doc, ANCESTRY_JSON_SCHEMA)
    assert len(doc["nodes"]) == 9

    code, out = cli("ancestry", data_ids[0], "--dependents")
    assert out.split() == [data_ids[1]]

    code, out = cli("--json", "ancestry", data_ids[-1], "--depth", "1")
    assert len(json.loads(out)["nodes"]) == 4


def test_hub_commands(cli, tmp_path, sources):
    code, out = cli("hub", "init")
    assert code == 0

    code, out = cli("--json", "hub", "list")
    assert json.loads(out) == []

    app, deck = sources
    app_id = _wrap(cli, app, "application", "upper")
    deck_id = _wrap(cli, deck, "input_deck", "deck")

    code, out = cli("--json", "hub", "list", "--kind", "input_deck")
    assert [e["id"] for e in json.loads(out)] == [deck_id]

    code, out = cli("--json", "hub", "verify")
    assert code == 0
    assert json.loads(out) == {app_id: True, deck_id: True}

    stored = tmp_path / "hub" / "objects" / app_id[:2] / f"{app_id}.pallet"
    data = bytearray(stored.read_bytes())
    data[-1] ^= 0x01
    stored.write_bytes(bytes(data))
    code, out = cli("hub", "verify")
    assert code == 4
    assert f"{app_id} FAILED" in out


def test_hub_list_missing_hub(cli):
    code, out = cli("--json", "hub", "list")
    assert code == 0
    assert json.loads(out) == []


def test_republish(cli, tmp_path, sources):
    app, deck = sources
    app_id = _wrap(cli, app, "application", "upper")
    deck_id = _wrap(cli, deck, "input_deck", "deck")
    _, out = _run(cli, tmp_path, app_id, deck_id, "upper-node",
                  sys.executable, "{APP}/upper.py", "{DECK}/deck.txt", "{OUT}")
    upstream = out.strip()

    code, out = cli("republish", upstream, "--app", app_id, "--deck", deck_id, "--name", "review")
    assert code == 0
    new_id = out.strip()
    assert ID_RE.match(new_id) and new_id != upstream

    _, out = cli("--json", "inspect", new_id)
    contexts = json.loads(out)["annotation"]["extended_contexts"]
    assert contexts == [{"application_id": app_id, "input_deck_id": deck_id, "node_name": "review"}]

    assert cli("republish", upstream, "--app", "bad", "--deck", deck_id, "--name", "x")[0] == 2


def test_bench_space_json(cli):
    code, out = cli("--json", "bench", "space")
    assert code == 0
    doc = json.loads(out)
    assert doc["empty_pallet_bytes"] <= 4096
    assert doc["payload_bytes"] == 1 << 20


def test_bench_node_text(cli):
    code, out = cli("bench", "node", "--trials", "1", "--sleep", "0", "--size", "16", "--no-baseline")
    assert code == 0
    assert "t_total" in out


def test_parser_requires_command():
    with pytest.raises(SystemExit):
        build_parser().parse_args([])


def test_bad_log_level_is_usage_error():
    with pytest.raises(SystemExit) as excinfo:
        build_parser().parse_args(["--log-level", "bogus", "hub", "list"])
    assert excinfo.value.code == 2


def test_log_level_is_case_insensitive():
    assert build_parser().parse_args(["--log-level", "debug", "hub", "list"]).log_level == "DEBUG"


@pytest.mark.parametrize("flags, expected", [
    ([], True),
    (["--deterministic"], True),
    (["--no-deterministic"], False),
])
def test_deterministic_flag_overrides_env(monkeypatch, flags, expected):
    monkeypatch.setenv("DATAPALLET_DETERMINISTIC", "1")
    args = build_parser().parse_args([*flags, "hub", "list"])
    assert resolve_deterministic(args.deterministic) is expected
