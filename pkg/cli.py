"""
Единая точка входа: python cli.py [--hub DIR] [--[no-]deterministic] [--json] <команда> ...

Коды выхода: 0 успех, 2 ошибка ввода, 3 паллета не найдена,
4 нарушение целостности, для run - код дочернего процесса.
"""
import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, List, Optional

from pydantic import ValidationError

import ancestry
import bench
import pallet_format as pf
from annotations import ExtendedContext, PalletKind, canonical_json, is_pallet_id, to_document
from config import BENCH_TRIALS, resolve_deterministic, resolve_hub_path, resolve_workdir
from hub import Hub
from resilience import (
    NodeFailedError,
    PalletError,
    PalletNotFoundError,
    UsageError,
    handle_critical_error,
)
from runner import SHIM_BACKEND, SNAPSHOT_BACKEND, WorkflowNodeSpec, republish, run_node, wrap_path, write_report

logger = logging.getLogger(__name__)

EXIT_INTEGRITY = 4

LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL")


def _emit(args, text: str, doc: Any) -> None:
    if args.json:
        print(canonical_json(doc).decode("utf-8"))
    else:
        print(text)


def _hub(args, create: bool = False) -> Hub:
    path = resolve_hub_path(args.hub)
    if create:
        return Hub.init(path)
    if not path.exists():
        return Hub(path)
    return Hub.open_existing(path)


def _deterministic(args) -> bool:
    return resolve_deterministic(args.deterministic)


def _workdir(args) -> Optional[Path]:
    return resolve_workdir(args.workdir) if args.workdir else None


def _load_image(args, ref: str) -> pf.PalletImage:
    """Образ по пути к файлу или по ID в hub; проверка хешей не выполняется"""
    path = Path(ref)
    if path.is_file():
        return pf.open_image(path)
    if not is_pallet_id(ref):
        raise UsageError(f"{ref} не является ни файлом, ни PalletId")
    hub = _hub(args)
    if not hub.contains(ref):
        raise PalletNotFoundError(ref)
    return pf.open_image(hub.object_path(ref))


# ----------------- Команды -----------------

def cmd_wrap(args) -> int:
    hub = _hub(args, create=True)
    pallet_id = wrap_path(Path(args.path), PalletKind(args.kind), args.name or Path(args.path).name, hub,
                          deterministic=_deterministic(args), work_dir=_workdir(args))
    _emit(args, pallet_id, {"id": pallet_id, "kind": args.kind})
    return 0


def _parse_env(pairs: List[str]) -> dict:
    env = {}
    for pair in pairs or []:
        key, sep, value = pair.partition("=")
        if not sep or not key:
            raise UsageError(f"--env ожидает KEY=VALUE, получено {pair!r}")
        env[key] = value
    return env


def cmd_run(args) -> int:
    argv = list(args.argv)
    if argv and argv[0] == "--":
        argv = argv[1:]
    if not argv:
        raise UsageError("не задана команда узла (после --)")
    hub = _hub(args, create=True)
    spec = WorkflowNodeSpec(
        node_name=args.name,
        application_id=args.app,
        input_deck_id=args.deck,
        input_pallet_ids=tuple(args.input or ()),
        command=tuple(argv),
        env=_parse_env(args.env),
        deterministic=_deterministic(args),
    )
    try:
        output_id, report = run_node(spec, hub, backend=args.backend, work_dir=_workdir(args))
    except NodeFailedError as e:
        if e.report is not None:
            write_report(e.report, Path(args.report))
        raise
    write_report(report, Path(args.report))
    _emit(args, output_id, report.model_dump(mode="json"))
    return 0


def cmd_inspect(args) -> int:
    image = _load_image(args, args.ref)
    verification = pf.verify(image)
    partitions = [
        {"kind": d.kind.name, "offset": d.offset, "length": d.length, "sha256": d.digest.hex()}
        for d in image.header.partitions
    ]
    doc = {"id": image.id, "size": image.size, "partitions": partitions, "verify": verification.to_dict()}
    if verification.ok:
        doc["annotation"] = to_document(pf.read_annotation(image))
        if image.descriptor(pf.PartitionKind.META) is not None:
            doc["meta"] = json.loads(pf.read_partition(image, pf.PartitionKind.META))

    lines = [f"id:      {image.id}", f"size:    {image.size}", "partitions:"]
    lines += [f"  {p['kind']:<13} offset={p['offset']:<8} length={p['length']}" for p in partitions]
    lines.append(f"verify:  {'ok' if verification.ok else 'FAILED'} {verification.to_dict()}")
    if "annotation" in doc:
        lines.append("annotation:")
        lines += [f"  {key}: {value}" for key, value in sorted(doc["annotation"].items())]
    if "meta" in doc:
        lines.append(f"meta:    {doc['meta']}")
    _emit(args, "\n".join(lines), doc)
    return 0 if verification.ok else EXIT_INTEGRITY


def cmd_verify(args) -> int:
    image = _load_image(args, args.ref)
    verification = pf.verify(image)
    doc = {"id": image.id, **verification.to_dict()}
    _emit(args, f"{image.id} {'ok' if verification.ok else 'FAILED'}", doc)
    return 0 if verification.ok else EXIT_INTEGRITY


def cmd_extract(args) -> int:
    image = _load_image(args, args.ref)
    dest = Path(args.dest)
    dest.mkdir(parents=True, exist_ok=True)
    completed = pf.extract(image, dest)
    _emit(args, f"извлечено файлов: {len(completed)} в {dest}", {"id": image.id, "files": completed})
    return 0


def cmd_ancestry(args) -> int:
    hub = _hub(args)
    if args.dependents:
        found = ancestry.dependents(args.id, hub)
        _emit(args, "\n".join(found), {"id": args.id, "dependents": found})
        return 0
    graph = ancestry.ancestors(args.id, hub, max_depth=args.depth)
    if args.dot:
        print(ancestry.render_dot(graph), end="")
    elif args.json:
        print(ancestry.render_json(graph))
    else:
        for pallet_id, node in graph.nodes.items():
            kind = node.kind.value if node.kind else "unresolved"
            print(f"{pallet_id}  {kind:<12} {node.node_name}")
        for edge in graph.sorted_edges():
            print(f"{edge.child[:12]} -> {edge.parent[:12]}  {edge.link.value}")
        for diagnostic in graph.diagnostics:
            print(f"! {diagnostic}")
    return 0


def cmd_hub_init(args) -> int:
    hub = _hub(args, create=True)
    _emit(args, f"hub: {hub.root}", {"hub": str(hub.root)})
    return 0


def cmd_hub_list(args) -> int:
    hub = _hub(args)
    entries = hub.list_entries(PalletKind(args.kind) if args.kind else None) if hub.index_path.exists() else []
    text = "\n".join(f"{e.id}  {e.kind.value:<12} {e.size:>10}  {e.node_name}" for e in entries)
    _emit(args, text, [e.model_dump(mode="json") for e in entries])
    return 0


def cmd_hub_verify(args) -> int:
    hub = Hub.open_existing(resolve_hub_path(args.hub))
    results = hub.verify_all()
    text = "\n".join(f"{pallet_id} {'ok' if ok else 'FAILED'}" for pallet_id, ok in results.items())
    _emit(args, text or "hub пуст", results)
    return 0 if all(results.values()) else EXIT_INTEGRITY


def cmd_republish(args) -> int:
    hub = _hub(args, create=True)
    try:
        context = ExtendedContext(application_id=args.app, input_deck_id=args.deck, node_name=args.name)
    except ValidationError as e:
        raise UsageError(f"некорректный контекст: {e.errors()[0]['msg']}")
    new_id = republish(args.id, context, hub, work_dir=_workdir(args))
    _emit(args, new_id, {"id": new_id, "upstream": args.id})
    return 0


def cmd_bench_space(args) -> int:
    hub = _hub(args, create=True) if args.store else None
    report = bench.measure_space(hub, work_dir=_workdir(args))
    _emit(args, bench.format_space_table(report), report.model_dump(mode="json"))
    return 0


def cmd_bench_node(args) -> int:
    hub = _hub(args, create=True)
    if args.gnuplot:
        spec = bench.gnuplot_node_spec(hub, work_dir=_workdir(args))
    else:
        spec = bench.synthetic_node_spec(hub, sleep=args.sleep, output_bytes=args.size, work_dir=_workdir(args))
    timing = bench.measure_node(spec, hub, trials=args.trials, baseline=not args.no_baseline,
                                work_dir=_workdir(args))
    _emit(args, bench.format_timing_table(timing), timing.model_dump(mode="json"))
    return 0


# ----------------- Разбор аргументов -----------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="datapallet", description="Data Pallets: данные с происхождением")
    parser.add_argument("--hub", help="каталог hub (по умолчанию DATAPALLET_HUB или ./pallet-hub)")
    parser.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=None,
                        help="без created_at, воспроизводимые ID")
    parser.add_argument("--json", action="store_true", help="канонический JSON в stdout")
    parser.add_argument("--log-level", type=str.upper, choices=LOG_LEVELS, help="уровень логирования")
    parser.add_argument("--workdir", help="каталог рабочих пространств (DATAPALLET_WORKDIR)")
    sub = parser.add_subparsers(dest="command", required=True)

    wrap = sub.add_parser("wrap", help="упаковать приложение или input deck")
    wrap.add_argument("path")
    wrap.add_argument("--kind", required=True, choices=[PalletKind.APPLICATION.value, PalletKind.INPUT_DECK.value])
    wrap.add_argument("--name", help="node_name (по умолчанию имя файла)")
    wrap.set_defaults(func=cmd_wrap)

    run = sub.add_parser("run", help="выполнить узел workflow")
    run.add_argument("--app", required=True)
    run.add_argument("--deck", required=True)
    run.add_argument("--input", action="append", default=[], help="входная паллета (можно повторять)")
    run.add_argument("--name", required=True)
    run.add_argument("--env", action="append", default=[], metavar="KEY=VALUE")
    run.add_argument("--backend", default=SNAPSHOT_BACKEND, choices=[SNAPSHOT_BACKEND, SHIM_BACKEND])
    run.add_argument("--report", default="report.json", help="куда записать RunReport")
    run.add_argument("argv", nargs=argparse.REMAINDER, help="-- команда {APP} {DECK} {IN:i} {OUT}")
    run.set_defaults(func=cmd_run)

    inspect = sub.add_parser("inspect", help="аннотация, заголовок и разделы")
    inspect.add_argument("ref", help="PalletId или путь к образу")
    inspect.set_defaults(func=cmd_inspect)

    verify = sub.add_parser("verify", help="проверить хеши образа")
    verify.add_argument("ref")
    verify.set_defaults(func=cmd_verify)

    extract = sub.add_parser("extract", help="распаковать данные паллеты")
    extract.add_argument("ref")
    extract.add_argument("dest")
    extract.set_defaults(func=cmd_extract)

    anc = sub.add_parser("ancestry", help="граф происхождения")
    anc.add_argument("id")
    anc.add_argument("--depth", type=int)
    anc.add_argument("--dot", action="store_true", help="вывод в формате Graphviz")
    anc.add_argument("--dependents", action="store_true", help="паллеты, ссылающиеся на id")
    anc.set_defaults(func=cmd_ancestry)

    hub = sub.add_parser("hub", help="операции с hub")
    hub_sub = hub.add_subparsers(dest="hub_command", required=True)
    hub_sub.add_parser("init").set_defaults(func=cmd_hub_init)
    hub_list = hub_sub.add_parser("list")
    hub_list.add_argument("--kind", choices=[k.value for k in PalletKind])
    hub_list.set_defaults(func=cmd_hub_list)
    hub_sub.add_parser("verify").set_defaults(func=cmd_hub_verify)

    rep = sub.add_parser("republish", help="переопубликовать паллету с новым контекстом")
    rep.add_argument("id")
    rep.add_argument("--app", required=True)
    rep.add_argument("--deck", required=True)
    rep.add_argument("--name", required=True)
    rep.set_defaults(func=cmd_republish)

    bench_parser = sub.add_parser("bench", help="измерения накладных расходов")
    bench_sub = bench_parser.add_subparsers(dest="bench_command", required=True)
    space = bench_sub.add_parser("space")
    space.add_argument("--store", action="store_true", help="сохранить измеренные паллеты в hub")
    space.set_defaults(func=cmd_bench_space)
    node = bench_sub.add_parser("node")
    node.add_argument("--trials", type=int, default=BENCH_TRIALS)
    node.add_argument("--sleep", type=float, default=0.025)
    node.add_argument("--size", type=int, default=102400)
    node.add_argument("--gnuplot", action="store_true", help="настоящий gnuplot вместо синтетики")
    node.add_argument("--no-baseline", action="store_true", help="без запуска вне паллет")
    node.set_defaults(func=cmd_bench_node)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    if args.log_level:
        logging.getLogger().setLevel(args.log_level)
    try:
        return args.func(args)
    except NodeFailedError as e:
        print(f"❌ {e}", file=sys.stderr)
        if e.quarantine_path:
            print(f"   рабочее пространство: {e.quarantine_path}", file=sys.stderr)
        return e.exit_code
    except PalletError as e:
        print(f"❌ {e}", file=sys.stderr)
        return e.exit_code
    except KeyboardInterrupt:
        return 130
    except Exception as e:
        handle_critical_error("cli.main", e, {"argv": argv})
        print(f"❌ непредвиденная ошибка: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
