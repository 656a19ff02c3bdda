"""
Запуск узла workflow: приложение, input deck и входные паллеты распаковываются
в рабочее пространство (только чтение), команда выполняется в каталоге out,
созданные файлы запечатываются в новую паллету со ссылками на всё, что ее создало.

Раскладка рабочего пространства:
    <run-root>/app, deck, in0..inN   распакованные входы, только чтение
    <run-root>/out                   staging-паллета, cwd команды
    <run-root>/stdout.log, stderr.log
Упавший узел целиком переносится в <workdir>/quarantine/<run-root>.
"""
import hashlib
import logging
import os
import re
import shlex
import shutil
import stat
import subprocess
import tempfile
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

from pydantic import BaseModel

import pallet_format as pf
from annotations import (
    ExtendedContext,
    PalletKind,
    application_annotation,
    canonical_json,
    data_pallet_annotation,
    extend,
    input_deck_annotation,
    is_pallet_id,
)
from config import PALLET_SUFFIX, resolve_workdir
from hub import Hub
from resilience import (
    CaptureError,
    CorruptionError,
    InputMutationError,
    NodeFailedError,
    NodeSpecError,
    PalletError,
    TamperError,
    UsageError,
)

logger = logging.getLogger(__name__)

PLACEHOLDER_RE = re.compile(r"\{(APP|DECK|OUT|IN:(\d+))\}")
# Приложение может само сообщить время своей работы строкой в stdout
APP_SECONDS_RE = re.compile(rb"^DATAPALLET_APP_SECONDS=([0-9.eE+-]+)\s*$", re.MULTILINE)

LOG_FILES = ("stdout.log", "stderr.log")
OUTPUT_IMAGE_NAME = "output.pallet"
QUARANTINE_DIR = "quarantine"
SNAPSHOT_BACKEND = "staging_snapshot"
SHIM_BACKEND = "passthrough_shim"
# Скрытый каталог, в который пишет passthrough_shim
SHIM_BACKING_DIR = ".out-backing"


@dataclass(frozen=True)
class WorkflowNodeSpec:
    """Описание одного узла workflow"""
    node_name: str
    application_id: str
    input_deck_id: str
    command: Tuple[str, ...]
    input_pallet_ids: Tuple[str, ...] = ()
    env: Mapping[str, str] = field(default_factory=dict)
    deterministic: bool = False

    def __post_init__(self):
        object.__setattr__(self, "command", tuple(self.command))
        object.__setattr__(self, "input_pallet_ids", tuple(self.input_pallet_ids))
        object.__setattr__(self, "env", dict(self.env))
        if not self.command:
            raise NodeSpecError("команда узла пуста")
        for label, pallet_id in [("application_id", self.application_id),
                                 ("input_deck_id", self.input_deck_id)]:
            if not is_pallet_id(pallet_id):
                raise NodeSpecError(f"{label}: некорректный PalletId {pallet_id!r}")
        for pallet_id in self.input_pallet_ids:
            if not is_pallet_id(pallet_id):
                raise NodeSpecError(f"input_pallet_ids: некорректный PalletId {pallet_id!r}")
        if len(set(self.input_pallet_ids)) != len(self.input_pallet_ids):
            raise NodeSpecError("input_pallet_ids содержит повторы")

    def check_placeholders(self) -> None:
        """Каждый {IN:i} должен ссылаться на существующий вход"""
        for arg in self.command:
            for match in PLACEHOLDER_RE.finditer(arg):
                if match.group(2) is not None and int(match.group(2)) >= len(self.input_pallet_ids):
                    raise NodeSpecError(
                        f"{match.group(0)} вне диапазона: у узла {len(self.input_pallet_ids)} входных паллет"
                    )

    def referenced_ids(self) -> List[str]:
        return [self.application_id, self.input_deck_id, *self.input_pallet_ids]


@dataclass
class Workspace:
    root: Path
    app_dir: Path
    deck_dir: Path
    input_dirs: List[Path]
    output_dir: Path
    staging: pf.StagingPallet

    def relative_paths(self) -> Dict[str, str]:
        """Подстановки относительно out (cwd команды), одинаковые для всех запусков"""
        paths = {"APP": "../app", "DECK": "../deck", "OUT": "."}
        for i, d in enumerate(self.input_dirs):
            paths[f"IN:{i}"] = f"../{d.name}"
        return paths

    def expand(self, argv: Sequence[str]) -> List[str]:
        paths = self.relative_paths()
        return [PLACEHOLDER_RE.sub(lambda m: paths[m.group(1)], arg) for arg in argv]

    def environment(self) -> Dict[str, str]:
        env = {
            "DATAPALLET_APP": str(self.app_dir),
            "DATAPALLET_DECK": str(self.deck_dir),
            "DATAPALLET_OUT": str(self.output_dir),
        }
        for i, d in enumerate(self.input_dirs):
            env[f"DATAPALLET_IN_{i}"] = str(d)
        return env


class RunReport(BaseModel):
    """Разбивка времени узла по фазам"""
    node_name: str = ""
    t_prepare: float = 0.0
    t_spawn: float = 0.0
    t_app: float = 0.0
    t_seal: float = 0.0
    t_teardown: float = 0.0
    t_total: float = 0.0
    exit_code: int = 0
    output_id: Optional[str] = None
    capture_backend: str = SNAPSHOT_BACKEND
    app_time_self_reported: bool = False
    outside_writes: List[str] = []
    quarantine_path: Optional[str] = None


def write_report(report: RunReport, path: Path) -> None:
    Path(path).write_bytes(canonical_json(report.model_dump(mode="json")) + b"\n")


# ----------------- Захват выходных файлов -----------------

def snapshot_outputs(staging: pf.StagingPallet, root: Path) -> pf.StagingPallet:
    """Регистрирует в staging все обычные файлы под root; ссылки и спецфайлы запрещены"""
    rejected: List[str] = []
    unreadable: List[str] = []

    def on_walk_error(error: OSError) -> None:
        # Каталог без права чтения: его содержимое не попадет в паллету
        unreadable.append(Path(os.path.relpath(error.filename, root)).as_posix())

    for dirpath, dirnames, filenames in os.walk(root, onerror=on_walk_error):
        for name in list(dirnames):
            full = os.path.join(dirpath, name)
            if os.path.islink(full):
                rejected.append(os.path.relpath(full, root))
                dirnames.remove(name)
        for name in filenames:
            full = os.path.join(dirpath, name)
            rel = Path(os.path.relpath(full, root)).as_posix()
            try:
                st = os.lstat(full)
            except OSError:
                unreadable.append(rel)
                continue
            if not stat.S_ISREG(st.st_mode):
                rejected.append(rel)
                continue
            if not os.access(full, os.R_OK):
                unreadable.append(rel)
                continue
            staging.track(rel, st.st_mode)
    if rejected:
        raise CaptureError(f"в выходных данных есть ссылки или спецфайлы: {sorted(rejected)}", paths=sorted(rejected))
    if unreadable:
        raise CaptureError(f"созданные файлы не читаются: {sorted(unreadable)}", paths=sorted(unreadable))
    return staging


class CaptureBackend:
    """Способ узнать, какие файлы создала команда"""
    name = "base"

    def start(self, workspace: Workspace) -> None:
        pass

    def stop(self, workspace: Workspace) -> None:
        pass

    def collect(self, workspace: Workspace) -> pf.StagingPallet:
        raise NotImplementedError


class StagingSnapshotBackend(CaptureBackend):
    """Обход каталога out после завершения команды"""
    name = SNAPSHOT_BACKEND

    def collect(self, workspace: Workspace) -> pf.StagingPallet:
        return snapshot_outputs(workspace.staging, workspace.output_dir)


def get_backend(name: Union[str, CaptureBackend]) -> CaptureBackend:
    if isinstance(name, CaptureBackend):
        return name
    if name == SNAPSHOT_BACKEND:
        return StagingSnapshotBackend()
    if name == SHIM_BACKEND:
        try:
            from capture_shim import FusePassthroughBackend
        except (ImportError, OSError) as e:
            raise UsageError(f"backend {SHIM_BACKEND} недоступен: {e}")
        return FusePassthroughBackend()
    raise UsageError(f"неизвестный capture backend: {name}")


def capture_outputs(workspace: Workspace, backend: Union[str, CaptureBackend] = SNAPSHOT_BACKEND) -> pf.StagingPallet:
    """Staging-паллета с файлами, созданными командой под корнем out"""
    return get_backend(backend).collect(workspace)


# ----------------- Рабочее пространство -----------------

def _make_read_only(root: Path) -> None:
    for dirpath, dirnames, filenames in os.walk(root, topdown=False):
        for name in filenames:
            full = os.path.join(dirpath, name)
            os.chmod(full, stat.S_IMODE(os.lstat(full).st_mode) & ~0o222)
        os.chmod(dirpath, 0o555)


def remove_tree(root: Path) -> None:
    if not root.exists():
        return
    for dirpath, dirnames, _ in os.walk(root):
        os.chmod(dirpath, stat.S_IRWXU)
    shutil.rmtree(root, ignore_errors=True)


def _tree_digests(root: Path, exclude: Sequence[str] = ()) -> Dict[str, str]:
    """sha256 каждого файла под root (пути относительно root)"""
    digests: Dict[str, str] = {}
    for dirpath, dirnames, filenames in os.walk(root):
        if Path(dirpath) == root:
            dirnames[:] = [d for d in dirnames if d not in exclude]
            filenames = [f for f in filenames if f not in exclude]
        for name in filenames:
            full = os.path.join(dirpath, name)
            rel = Path(os.path.relpath(full, root)).as_posix()
            if os.path.islink(full):
                digests[rel] = f"symlink:{os.readlink(full)}"
                continue
            try:
                with open(full, "rb") as f:
                    digests[rel] = hashlib.sha256(f.read()).hexdigest()
            except OSError:
                digests[rel] = "unreadable"
    return digests


def _changed(before: Dict[str, str], after: Dict[str, str]) -> List[str]:
    return sorted(p for p in set(before) | set(after) if before.get(p) != after.get(p))


def prepare_workspace(spec: WorkflowNodeSpec, hub: Hub, work_dir: Optional[Path] = None) -> Workspace:
    """Распаковывает входы узла только для чтения и создает пустой out"""
    spec.check_placeholders()
    base = _base_dir(work_dir)
    safe_name = re.sub(r"[^A-Za-z0-9_.-]", "_", spec.node_name) or "node"
    root = Path(tempfile.mkdtemp(prefix=f"{safe_name}-", dir=base))

    targets = [("app", spec.application_id), ("deck", spec.input_deck_id)]
    targets += [(f"in{i}", pallet_id) for i, pallet_id in enumerate(spec.input_pallet_ids)]
    try:
        for dirname, pallet_id in targets:
            try:
                image = hub.get(pallet_id)
            except CorruptionError as e:
                raise TamperError(f"входная паллета {pallet_id} не прошла проверку, узел не запускается: {e}")
            target = root / dirname
            target.mkdir()
            pf.extract(image, target)
            _make_read_only(target)

        output_dir = root / "out"
        output_dir.mkdir()
    except Exception:
        remove_tree(root)
        raise

    return Workspace(
        root=root,
        app_dir=root / "app",
        deck_dir=root / "deck",
        input_dirs=[root / f"in{i}" for i in range(len(spec.input_pallet_ids))],
        output_dir=output_dir,
        staging=pf.StagingPallet(root=output_dir, deterministic=spec.deterministic),
    )


def _quarantine(workspace: Workspace, report: RunReport) -> Path:
    """Переносит рабочее пространство упавшего узла для разбора"""
    quarantine_root = workspace.root.parent / QUARANTINE_DIR
    quarantine_root.mkdir(parents=True, exist_ok=True)
    dest = quarantine_root / workspace.root.name
    shutil.move(str(workspace.root), str(dest))
    report.quarantine_path = str(dest)
    write_report(report, dest / "report.json")
    logger.warning(f"Рабочее пространство узла {report.node_name} сохранено в {dest}")
    return dest


def _parse_self_reported(stdout_path: Path) -> Optional[float]:
    try:
        matches = APP_SECONDS_RE.findall(stdout_path.read_bytes())
    except OSError:
        return None
    if not matches:
        return None
    try:
        return float(matches[-1])
    except ValueError:
        return None


# ----------------- Запуск узла -----------------

def run_node(
    spec: WorkflowNodeSpec,
    hub: Hub,
    backend: Union[str, CaptureBackend] = SNAPSHOT_BACKEND,
    work_dir: Optional[Path] = None,
) -> Tuple[pf.PalletId, RunReport]:
    """
    Выполняет узел и запечатывает его выходные файлы в новую паллету.

    Returns:
        Кортеж (ID выходной паллеты, RunReport)

    Raises:
        NodeFailedError: команда завершилась с ненулевым кодом
        InputMutationError: команда изменила входные данные
        CaptureError: выходные данные нельзя упаковать
    """
    capture = get_backend(backend)
    report = RunReport(node_name=spec.node_name, capture_backend=capture.name)
    started = time.perf_counter()

    workspace = prepare_workspace(spec, hub, work_dir)
    report.t_prepare = time.perf_counter() - started

    watched_exclude = ("out", SHIM_BACKING_DIR, *LOG_FILES)
    before = _tree_digests(workspace.root, exclude=watched_exclude)
    argv = workspace.expand(spec.command)
    env = {**os.environ, **workspace.environment(), **spec.env}

    logger.info(f"Запуск узла {spec.node_name}: {shlex.join(argv)}")
    try:
        capture.start(workspace)
    except Exception:
        report.t_total = time.perf_counter() - started
        _quarantine(workspace, report)
        raise
    try:
        cmd_started = time.perf_counter()
        try:
            with open(workspace.root / "stdout.log", "wb") as out, open(workspace.root / "stderr.log", "wb") as err:
                proc = subprocess.run(argv, cwd=workspace.output_dir, env=env, stdout=out, stderr=err)
            report.exit_code = proc.returncode
        except OSError as e:
            logger.error(f"Команда узла {spec.node_name} не запустилась: {e}")
            report.exit_code = 126 if isinstance(e, PermissionError) else 127
        wall = time.perf_counter() - cmd_started
    finally:
        capture.stop(workspace)

    self_reported = _parse_self_reported(workspace.root / "stdout.log")
    if self_reported is not None and 0 <= self_reported <= wall:
        report.t_app = self_reported
        report.t_spawn = wall - self_reported
        report.app_time_self_reported = True
    else:
        report.t_app = wall

    after = _tree_digests(workspace.root, exclude=watched_exclude)
    input_dirs = {"app", "deck", *(d.name for d in workspace.input_dirs)}
    changed = _changed(before, after)
    mutated = [p for p in changed if p.split("/", 1)[0] in input_dirs]
    report.outside_writes = [p for p in changed if p.split("/", 1)[0] not in input_dirs]
    if report.outside_writes:
        logger.warning(f"Узел {spec.node_name} писал вне out: {report.outside_writes}")

    if mutated:
        report.t_total = time.perf_counter() - started
        _quarantine(workspace, report)
        raise InputMutationError(f"узел {spec.node_name} изменил входные данные: {mutated}", paths=mutated)

    if report.exit_code != 0:
        report.t_total = time.perf_counter() - started
        quarantine_path = _quarantine(workspace, report)
        raise NodeFailedError(
            f"узел {spec.node_name} завершился с кодом {report.exit_code}",
            report=report,
            quarantine_path=quarantine_path,
        )

    seal_started = time.perf_counter()
    try:
        staging = capture.collect(workspace)
        annotation = data_pallet_annotation(
            application_id=spec.application_id,
            input_deck_id=spec.input_deck_id,
            input_pallet_ids=list(spec.input_pallet_ids),
            command=shlex.join(argv),
            node_name=spec.node_name,
            deterministic=spec.deterministic,
        )
        meta = {
            "entry_count": len(staging.pending),
            "outside_writes": report.outside_writes,
        }
        image = pf.seal(staging, annotation, workspace.root / OUTPUT_IMAGE_NAME, meta=meta, cleanup=False)
        output_id = hub.put(image)
    except Exception:
        report.t_total = time.perf_counter() - started
        _quarantine(workspace, report)
        raise
    report.t_seal = time.perf_counter() - seal_started

    teardown_started = time.perf_counter()
    remove_tree(workspace.root)
    report.t_teardown = time.perf_counter() - teardown_started

    report.output_id = output_id
    report.t_total = time.perf_counter() - started
    logger.info(f"✅ Узел {spec.node_name} завершен, паллета {output_id.short()} за {report.t_total:.3f} сек")
    return output_id, report


def chain_nodes(
    specs: Sequence[WorkflowNodeSpec],
    hub: Hub,
    backend: Union[str, CaptureBackend] = SNAPSHOT_BACKEND,
    work_dir: Optional[Path] = None,
) -> List[pf.PalletId]:
    """Запускает узлы по порядку; выход каждого добавляется последним входом следующего"""
    produced: List[pf.PalletId] = []
    for i, spec in enumerate(specs):
        if produced and produced[-1] not in spec.input_pallet_ids:
            spec = replace(spec, input_pallet_ids=spec.input_pallet_ids + (produced[-1],))
        try:
            output_id, _ = run_node(spec, hub, backend=backend, work_dir=work_dir)
        except PalletError:
            logger.error(f"Цепочка прервана на узле {i} ({spec.node_name}), готово {len(produced)} узлов")
            raise
        produced.append(output_id)
    return produced


def republish(
    upstream_id: str,
    context: ExtendedContext,
    hub: Hub,
    work_dir: Optional[Path] = None,
) -> pf.PalletId:
    """
    Переопубликовывает данные паллеты под новым ID с расширенной аннотацией.

    Исходная паллета не меняется: ее хеш покрывает аннотации.
    """
    image = hub.get(upstream_id)
    annotation = extend(pf.read_annotation(image), context)

    staging = pf.create_staging(_base_dir(work_dir), deterministic=annotation.created_at is None)
    for entry in pf.read_entries(image):
        pf.add_file(staging, entry.path, entry.content, entry.mode)
    new_id = _seal_and_put(staging, annotation, hub)
    logger.info(f"Паллета {upstream_id[:12]} переопубликована как {new_id.short()} ({context.node_name})")
    return new_id


# ----------------- Упаковка приложений и input deck -----------------

def _base_dir(work_dir: Optional[Path]) -> Path:
    base = resolve_workdir(str(work_dir) if work_dir else None)
    base.mkdir(parents=True, exist_ok=True)
    return base


def _seal_and_put(staging: pf.StagingPallet, annotation, hub: Hub) -> pf.PalletId:
    out_path = staging.root.with_suffix(PALLET_SUFFIX)
    try:
        image = pf.seal(staging, annotation, out_path)
        return hub.put(image)
    finally:
        staging.discard()
        out_path.unlink(missing_ok=True)


def wrap_files(
    files: Mapping[str, Union[bytes, Tuple[bytes, int]]],
    kind: PalletKind,
    node_name: str,
    hub: Hub,
    deterministic: bool = False,
    work_dir: Optional[Path] = None,
) -> pf.PalletId:
    """Упаковывает набор файлов {путь: содержимое или (содержимое, mode)} в паллету"""
    annotation = _wrap_annotation(kind, node_name, deterministic)
    staging = pf.create_staging(_base_dir(work_dir), deterministic=deterministic)
    for rel_path, value in files.items():
        content, mode = value if isinstance(value, tuple) else (value, 0o644)
        pf.add_file(staging, rel_path, content, mode)
    return _seal_and_put(staging, annotation, hub)


def wrap_path(
    path: Path,
    kind: PalletKind,
    node_name: str,
    hub: Hub,
    deterministic: bool = False,
    work_dir: Optional[Path] = None,
) -> pf.PalletId:
    """
    Упаковывает файл или каталог как application или input_deck.

    Каталог упаковывается рекурсивно с путями относительно него,
    одиночный файл - под своим именем.
    """
    path = Path(path)
    if not path.exists():
        raise UsageError(f"путь {path} не существует")
    annotation = _wrap_annotation(kind, node_name, deterministic)

    if path.is_dir():
        sources = []
        for dirpath, dirnames, filenames in os.walk(path):
            dirnames.sort()
            for name in sorted(filenames):
                sources.append(Path(dirpath) / name)
    else:
        sources = [path]

    staging = pf.create_staging(_base_dir(work_dir), deterministic=deterministic)
    try:
        for source in sources:
            st = source.lstat()
            if not stat.S_ISREG(st.st_mode):
                raise UsageError(f"{source}: упаковываются только обычные файлы")
            rel = source.relative_to(path).as_posix() if path.is_dir() else source.name
            pf.add_file(staging, rel, source.read_bytes(), stat.S_IMODE(st.st_mode))
    except Exception:
        staging.discard()
        raise
    pallet_id = _seal_and_put(staging, annotation, hub)
    logger.info(f"✅ {path} упакован как {kind.value}: {pallet_id}")
    return pallet_id


def _wrap_annotation(kind: PalletKind, node_name: str, deterministic: bool):
    if kind == PalletKind.APPLICATION:
        return application_annotation(node_name, deterministic)
    if kind == PalletKind.INPUT_DECK:
        return input_deck_annotation(node_name, deterministic)
    raise UsageError(f"упаковать можно только application или input_deck, получено {kind}")
