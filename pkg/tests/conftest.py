import os
import random
import string
import sys
from pathlib import Path

import pytest

import pallet_format as pf
from annotations import PalletKind, application_annotation
from hub import Hub
from runner import WorkflowNodeSpec, wrap_files

IS_ROOT = hasattr(os, "geteuid") and os.geteuid() == 0

WRITER_APP = b"""import sys
from pathlib import Path

deck = Path(sys.argv[1]).read_text()
out = Path(sys.argv[2])
(out / "out.txt").write_text("processed: " + deck)
"""


@pytest.fixture(autouse=True)
def fixed_umask():
    # права созданных файлов проверяются точно
    previous = os.umask(0o022)
    yield
    os.umask(previous)


@pytest.fixture
def work_dir(tmp_path, monkeypatch):
    path = tmp_path / "runs"
    path.mkdir()
    monkeypatch.setenv("DATAPALLET_WORKDIR", str(path))
    return path


@pytest.fixture
def hub(tmp_path):
    return Hub.init(tmp_path / "hub", lock_timeout=2.0)


@pytest.fixture
def app_id(hub, work_dir):
    return wrap_files({"writer.py": (WRITER_APP, 0o755)}, PalletKind.APPLICATION, "writer-app", hub,
                      deterministic=True, work_dir=work_dir)


@pytest.fixture
def deck_id(hub, work_dir):
    return wrap_files({"deck.txt": b"alpha=1\n"}, PalletKind.INPUT_DECK, "writer-deck", hub,
                      deterministic=True, work_dir=work_dir)


@pytest.fixture
def writer_spec(app_id, deck_id):
    return WorkflowNodeSpec(
        node_name="writer",
        application_id=app_id,
        input_deck_id=deck_id,
        command=(sys.executable, "{APP}/writer.py", "{DECK}/deck.txt", "{OUT}"),
        deterministic=True,
    )


def shell_spec(app_id, deck_id, script, name="shell-node", inputs=()):
    return WorkflowNodeSpec(
        node_name=name,
        application_id=app_id,
        input_deck_id=deck_id,
        input_pallet_ids=tuple(inputs),
        command=("sh", "-c", script),
        deterministic=True,
    )


def random_files(rng: random.Random, max_files: int = 100, max_total: int = 1 << 20):
    """Случайный набор файлов: {путь: (содержимое, mode)}"""
    files = {}
    budget = max_total
    alphabet = string.ascii_lowercase + string.digits + "_-."
    for _ in range(rng.randint(0, max_files)):
        depth = rng.randint(1, 3)
        parts = ["".join(rng.choice(alphabet) for _ in range(rng.randint(1, 8))) for _ in range(depth)]
        parts = [p if p not in (".", "..") else p + "x" for p in parts]
        path = "/".join(parts)
        if any(path.startswith(existing + "/") or existing.startswith(path + "/") for existing in files):
            continue
        size = rng.randint(0, min(budget, 64 * 1024))
        budget -= size
        files[path] = (rng.randbytes(size), rng.choice([0o644, 0o600, 0o755, 0o444]))
    return files


def seal_files(tmp_path: Path, files, deterministic=True, order=None, name="image.pallet", node_name="fixture"):
    staging = pf.create_staging(tmp_path, deterministic=deterministic)
    for path in order or files:
        content, mode = files[path]
        pf.add_file(staging, path, content, mode)
    return pf.seal(staging, application_annotation(node_name, deterministic=deterministic), tmp_path / name)
