"""
Измерения накладных расходов: размер формата и время фаз узла.

Опубликованные значения эталонной установки выводятся только как справочная
колонка; железо другое, сравнивать с ними на равенство нельзя.
"""
import logging
import math
import os
import shutil
import statistics
import subprocess
import sys
import tempfile
import time
from pathlib import Path
from typing import Dict, List, Optional

from pydantic import BaseModel

import pallet_format as pf
from annotations import (
    ExtendedContext,
    PalletKind,
    application_annotation,
    canonical_json,
    data_pallet_annotation,
    encode,
    extend,
)
from config import BENCH_TRIALS, resolve_workdir
from hub import Hub
from resilience import PalletError, UsageError
from runner import (
    RunReport,
    WorkflowNodeSpec,
    prepare_workspace,
    remove_tree,
    run_node,
    wrap_files,
)

logger = logging.getLogger(__name__)

FIXTURES_DIR = Path(__file__).parent / "data" / "fixtures"
MIB = 1 << 20

# Справочные значения эталонной установки
REFERENCE_SPACE = {
    "empty": "32.2 KB",
    "writeable": "704.5 KB",
    "attributes": "1.1 MB",
}

SEAL_WARN_SECONDS = 0.050
SEAL_FAIL_SECONDS = 0.250
ADDITIVITY_EPSILON = 0.05

# Размеры файлов полезной нагрузки в 1 MiB: намеренно не кратны блоку
PAYLOAD_SIZES = (1, 511, 4095, 4097, 65537, 300000)


class SpaceReport(BaseModel):
    empty_pallet_bytes: int
    payload_bytes: int
    payload_image_bytes: int
    writeable_overhead_bytes: int
    annotation_stream_bytes: int
    rich_annotation_bytes: int
    reference_values: Dict[str, str] = dict(REFERENCE_SPACE)
    writeable_note: str = (
        "staging-каталог вместо writeable ext3-контейнера: блоки файлов и каталогов сверх полезной нагрузки"
    )


class PhaseStats(BaseModel):
    mean: float
    min: float
    max: float
    stddev: float

    @classmethod
    def from_samples(cls, samples: List[float]) -> "PhaseStats":
        return cls(
            mean=statistics.mean(samples),
            min=min(samples),
            max=max(samples),
            stddev=statistics.stdev(samples) if len(samples) > 1 else 0.0,
        )


class ReferenceRow(BaseModel):
    label: str
    phases: List[str]
    measured_mean: Optional[float]
    reference_seconds: float


class TimingReport(BaseModel):
    trials: int
    successes: int
    failures: int
    phases: Dict[str, PhaseStats]
    native: Optional[PhaseStats] = None
    workflow_rows: List[ReferenceRow] = []
    application_rows: List[ReferenceRow] = []
    warnings: List[str] = []
    seal_bound_exceeded: bool = False


PHASES = ("t_prepare", "t_spawn", "t_app", "t_seal", "t_teardown", "t_total", "t_extract")

# (подпись, суммируемые фазы, эталонное значение в секундах)
WORKFLOW_ROWS = (
    ("подготовка рабочего пространства (монтирование FUSE)", ["t_prepare"], 0.037),
    ("запуск / завершение процесса приложения", ["t_spawn"], 0.498),
    ("работа приложения и создание паллеты", ["t_app", "t_seal"], 0.037),
    ("полное время работы приложения", ["t_spawn", "t_app", "t_seal"], 0.535),
    ("очистка рабочего пространства (размонтирование)", ["t_teardown"], 0.029),
    ("полное время узла workflow", ["t_total"], 0.601),
)
APPLICATION_ROWS = (
    ("работа приложения на input deck", ["t_app"], 0.0284),
    ("создание и сохранение паллеты", ["t_seal"], 0.00133),
    ("извлечение вывода из паллеты", ["t_extract"], 0.00725),
)


# ----------------- Размеры -----------------

def _footprint(root: Path) -> int:
    """Место под дерево: файлы округляются до блока, каждый каталог занимает блок"""
    total = 0
    for dirpath, _, filenames in os.walk(root):
        block = os.stat(dirpath).st_blksize or 4096
        total += block
        for name in filenames:
            st = os.lstat(os.path.join(dirpath, name))
            total += math.ceil(st.st_size / block) * block
    return total


def _payload_files() -> Dict[str, bytes]:
    files = {}
    for i, size in enumerate(PAYLOAD_SIZES):
        files[f"payload/part-{i}.bin"] = bytes((i * 31 + j) % 251 for j in range(size))
    files["payload/rest.bin"] = b"\x5a" * (MIB - sum(PAYLOAD_SIZES))
    return files


def _rich_annotation():
    fake_ids = [f"{i:064x}" for i in range(1, 9)]
    annotation = data_pallet_annotation(
        application_id=fake_ids[0],
        input_deck_id=fake_ids[1],
        input_pallet_ids=fake_ids[2:],
        command="gnuplot -e \"datafile='../deck/plot.dat'; outfile='./plot.png'\" ../app/plot.gp",
        node_name="gnuplot-workflow-node",
        deterministic=False,
    )
    for i in range(4):
        annotation = extend(annotation, ExtendedContext(
            application_id=fake_ids[i], input_deck_id=fake_ids[i + 1], node_name=f"republish-{i}",
        ))
    return annotation


def measure_space(hub: Optional[Hub] = None, work_dir: Optional[Path] = None) -> SpaceReport:
    """Размер пустой паллеты, паллеты с 1 MiB данных, staging и потока аннотаций"""
    base = resolve_workdir(str(work_dir) if work_dir else None)
    base.mkdir(parents=True, exist_ok=True)
    scratch = Path(tempfile.mkdtemp(prefix="bench-space-", dir=base))
    try:
        minimal = application_annotation("bench-empty", deterministic=True)
        staging = pf.create_staging(scratch, deterministic=True)
        empty = pf.seal(staging, minimal, scratch / "empty.pallet")

        files = _payload_files()
        payload_bytes = sum(len(c) for c in files.values())
        staging = pf.create_staging(scratch, deterministic=True)
        for rel_path, content in files.items():
            pf.add_file(staging, rel_path, content)
        writeable_overhead = _footprint(staging.root) - payload_bytes
        payload = pf.seal(staging, application_annotation("bench-payload", deterministic=True),
                          scratch / "payload.pallet")

        if hub is not None:
            hub.put(empty)
            hub.put(payload)

        report = SpaceReport(
            empty_pallet_bytes=empty.size,
            payload_bytes=payload_bytes,
            payload_image_bytes=payload.size,
            writeable_overhead_bytes=writeable_overhead,
            annotation_stream_bytes=len(encode(minimal)),
            rich_annotation_bytes=len(encode(_rich_annotation())),
        )
    finally:
        remove_tree(scratch)
    logger.info(f"Размеры: пустая паллета {report.empty_pallet_bytes} байт, 1 MiB -> {report.payload_image_bytes} байт")
    return report


# ----------------- Время -----------------

def synthetic_node_spec(
    hub: Hub,
    sleep: float = 0.025,
    output_bytes: int = 102400,
    deterministic: bool = True,
    work_dir: Optional[Path] = None,
) -> WorkflowNodeSpec:
    """Узел с синтетическим приложением из data/fixtures"""
    app_source = (FIXTURES_DIR / "synthetic_app.py").read_bytes()
    app_id = wrap_files({"synthetic_app.py": (app_source, 0o755)}, PalletKind.APPLICATION,
                        "synthetic-app", hub, deterministic=deterministic, work_dir=work_dir)
    deck = canonical_json({"output_bytes": output_bytes, "output_files": 1, "seed": "datapallet", "sleep": float(sleep)})
    deck_id = wrap_files({"deck.json": deck}, PalletKind.INPUT_DECK, "synthetic-deck", hub,
                         deterministic=deterministic, work_dir=work_dir)
    return WorkflowNodeSpec(
        node_name="synthetic-node",
        application_id=app_id,
        input_deck_id=deck_id,
        command=(sys.executable, "{APP}/synthetic_app.py", "{DECK}/deck.json", "{OUT}"),
        deterministic=deterministic,
    )


def gnuplot_node_spec(hub: Hub, deterministic: bool = True, work_dir: Optional[Path] = None) -> WorkflowNodeSpec:
    """Узел с настоящим gnuplot: приложение - скрипт графика, deck - данные"""
    if shutil.which("gnuplot") is None:
        raise UsageError("gnuplot не найден в PATH")
    app_id = wrap_files({"plot.gp": (FIXTURES_DIR / "plot.gp").read_bytes()}, PalletKind.APPLICATION,
                        "gnuplot-app", hub, deterministic=deterministic, work_dir=work_dir)
    deck_id = wrap_files({"plot.dat": (FIXTURES_DIR / "plot.dat").read_bytes()}, PalletKind.INPUT_DECK,
                         "gnuplot-deck", hub, deterministic=deterministic, work_dir=work_dir)
    return WorkflowNodeSpec(
        node_name="gnuplot-node",
        application_id=app_id,
        input_deck_id=deck_id,
        command=("gnuplot", "-e", "datafile='{DECK}/plot.dat'; outfile='{OUT}/plot.png'", "{APP}/plot.gp"),
        deterministic=deterministic,
    )


def _time_extract(hub: Hub, output_id: str, base: Path) -> float:
    dest = Path(tempfile.mkdtemp(prefix="bench-extract-", dir=base))
    try:
        started = time.perf_counter()
        pf.extract(hub.get(output_id), dest)
        return time.perf_counter() - started
    finally:
        remove_tree(dest)


def _native_runs(spec: WorkflowNodeSpec, hub: Hub, trials: int, base: Path) -> List[float]:
    """Та же команда без захвата и seal: вход распакован один раз, out очищается между запусками"""
    workspace = prepare_workspace(spec, hub, base)
    argv = workspace.expand(spec.command)
    env = {**os.environ, **workspace.environment(), **spec.env}
    samples = []
    try:
        for _ in range(trials):
            remove_tree(workspace.output_dir)
            workspace.output_dir.mkdir()
            started = time.perf_counter()
            proc = subprocess.run(argv, cwd=workspace.output_dir, env=env,
                                  stdout=subprocess.DEVNULL, stderr=subprocess.DEVNULL)
            elapsed = time.perf_counter() - started
            if proc.returncode == 0:
                samples.append(elapsed)
    finally:
        remove_tree(workspace.root)
    return samples


def _reference_rows(rows, phases: Dict[str, PhaseStats]) -> List[ReferenceRow]:
    result = []
    for label, names, reference_seconds in rows:
        measured = sum(phases[n].mean for n in names) if all(n in phases for n in names) else None
        result.append(ReferenceRow(label=label, phases=list(names), measured_mean=measured,
                                   reference_seconds=reference_seconds))
    return result


def measure_node(
    spec: WorkflowNodeSpec,
    hub: Hub,
    trials: int = BENCH_TRIALS,
    baseline: bool = True,
    work_dir: Optional[Path] = None,
) -> TimingReport:
    """
    Запускает узел trials раз подряд и агрегирует фазы RunReport.

    Упавшие прогоны считаются в failures, статистика строится по успешным.
    """
    if trials < 1:
        raise UsageError(f"trials должно быть >= 1, получено {trials}")
    base = resolve_workdir(str(work_dir) if work_dir else None)
    base.mkdir(parents=True, exist_ok=True)

    samples: Dict[str, List[float]] = {name: [] for name in PHASES}
    failures = 0
    for trial in range(trials):
        try:
            output_id, report = run_node(spec, hub, work_dir=base)
            extract_seconds = _time_extract(hub, output_id, base)
        except PalletError as e:
            failures += 1
            logger.warning(f"Прогон {trial} узла {spec.node_name} не удался: {e}")
            continue
        for name in PHASES[:-1]:
            samples[name].append(getattr(report, name))
        samples["t_extract"].append(extract_seconds)

    successes = trials - failures
    phases = {name: PhaseStats.from_samples(values) for name, values in samples.items() if values}
    native = None
    if baseline and successes:
        native_samples = _native_runs(spec, hub, trials, base)
        native = PhaseStats.from_samples(native_samples) if native_samples else None

    timing = TimingReport(
        trials=trials,
        successes=successes,
        failures=failures,
        phases=phases,
        native=native,
        workflow_rows=_reference_rows(WORKFLOW_ROWS, phases),
        application_rows=_reference_rows(APPLICATION_ROWS, phases),
    )
    _check_bounds(timing)
    return timing


def _check_bounds(timing: TimingReport) -> None:
    phases = timing.phases
    if timing.failures:
        timing.warnings.append(f"{timing.failures} из {timing.trials} прогонов не удались")
    if "t_seal" in phases:
        seal = phases["t_seal"].mean
        if seal > SEAL_WARN_SECONDS:
            timing.warnings.append(f"среднее t_seal {seal:.4f} сек больше {SEAL_WARN_SECONDS} сек")
        timing.seal_bound_exceeded = seal > SEAL_FAIL_SECONDS
        if "t_app" in phases and seal >= phases["t_app"].mean:
            timing.warnings.append(f"t_seal {seal:.4f} сек не меньше t_app {phases['t_app'].mean:.4f} сек")
    if all(n in phases for n in ("t_total", "t_prepare", "t_app", "t_seal")):
        parts = sum(phases[n].mean for n in ("t_prepare", "t_app", "t_seal"))
        if phases["t_total"].mean < parts * (1 - ADDITIVITY_EPSILON):
            timing.warnings.append(
                f"t_total {phases['t_total'].mean:.4f} сек меньше суммы фаз {parts:.4f} сек"
            )
    for warning in timing.warnings:
        logger.warning(warning)


# ----------------- Таблицы -----------------

def _fmt(value: Optional[float]) -> str:
    return "-" if value is None else f"{value:.5f}"


def format_space_table(report: SpaceReport) -> str:
    rows = [
        ("пустая паллета", f"{report.empty_pallet_bytes} B", report.reference_values["empty"]),
        ("паллета с 1 MiB данных", f"{report.payload_image_bytes} B", "-"),
        ("writeable (staging сверх данных)", f"{report.writeable_overhead_bytes} B",
         report.reference_values["writeable"]),
        ("поток аннотаций (минимальный)", f"{report.annotation_stream_bytes} B",
         report.reference_values["attributes"]),
        ("поток аннотаций (полный)", f"{report.rich_annotation_bytes} B", "-"),
    ]
    lines = [f"{'Измерение':<36} {'Получено':>14} {'Эталон':>12}"]
    lines += [f"{label:<36} {measured:>14} {reference:>12}" for label, measured, reference in rows]
    lines.append(f"* {report.writeable_note}")
    return "\n".join(lines)


def format_timing_table(timing: TimingReport) -> str:
    lines = [f"Прогонов: {timing.trials}, успешно: {timing.successes}, ошибок: {timing.failures}", ""]
    lines.append(f"{'Фаза':<12} {'mean':>10} {'min':>10} {'max':>10} {'stddev':>10}")
    for name in PHASES:
        if name in timing.phases:
            s = timing.phases[name]
            lines.append(f"{name:<12} {_fmt(s.mean):>10} {_fmt(s.min):>10} {_fmt(s.max):>10} {_fmt(s.stddev):>10}")
    if timing.native is not None:
        s = timing.native
        lines.append(f"{'native':<12} {_fmt(s.mean):>10} {_fmt(s.min):>10} {_fmt(s.max):>10} {_fmt(s.stddev):>10}")

    for title, rows in (("Узел workflow", timing.workflow_rows), ("Приложение и паллета", timing.application_rows)):
        lines += ["", title, f"{'':<54} {'сек':>10} {'эталон':>10}"]
        for row in rows:
            lines.append(f"{row.label:<54} {_fmt(row.measured_mean):>10} {row.reference_seconds:>10}")

    if timing.warnings:
        lines.append("")
        lines += [f"! {w}" for w in timing.warnings]
    return "\n".join(lines)


def format_run_report(report: RunReport) -> str:
    return "  ".join(f"{name}={getattr(report, name):.4f}" for name in PHASES[:-1])
