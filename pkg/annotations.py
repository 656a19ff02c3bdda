"""
Аннотации происхождения (provenance), которые хранятся в разделе Annotations каждой паллеты
"""
import json
import logging
import re
from datetime import datetime, timezone
from enum import Enum
from typing import Any, Dict, List, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from resilience import AnnotationError

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1

PALLET_ID_RE = re.compile(r"[0-9a-f]{64}")


def is_pallet_id(value: Any) -> bool:
    """64 символа в нижнем регистре [0-9a-f]"""
    return isinstance(value, str) and PALLET_ID_RE.fullmatch(value) is not None


def _check_id(value: Optional[str]) -> Optional[str]:
    if value is not None and not is_pallet_id(value):
        raise ValueError(f"некорректный PalletId: {value!r}")
    return value


def canonical_json(obj: Any) -> bytes:
    """Канонический JSON: UTF-8, ключи отсортированы, без лишних пробелов"""
    # Порядок кодовых точек совпадает с побайтовым порядком UTF-8
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def utc_now_rfc3339() -> str:
    return datetime.now(timezone.utc).replace(microsecond=0).strftime("%Y-%m-%dT%H:%M:%SZ")


class PalletKind(str, Enum):
    APPLICATION = "application"
    INPUT_DECK = "input_deck"
    DATA_PALLET = "data_pallet"


class LinkType(str, Enum):
    """Тип ссылки от паллеты к ее предшественнику"""
    APPLICATION = "application"
    INPUT_DECK = "input_deck"
    INPUT_PALLET = "input_pallet"
    EXTENDED_CONTEXT = "extended_context"


class ExtendedContext(BaseModel):
    """Контекст узла, который переопубликовал данные под новой паллетой"""
    model_config = ConfigDict(frozen=True, extra="forbid")

    application_id: str
    input_deck_id: str
    node_name: str

    @field_validator("application_id", "input_deck_id")
    @classmethod
    def check_ids(cls, value: str) -> str:
        return _check_id(value)


class ProvenanceAnnotation(BaseModel):
    """
    Запись о происхождении паллеты.

    Типы полей проверяются при создании; межполевые инварианты проверяет
    validate_annotation(), которую вызывают encode/decode/seal.
    """
    model_config = ConfigDict(frozen=True, extra="forbid")

    schema_version: int = SCHEMA_VERSION
    kind: PalletKind
    application_id: Optional[str] = None
    input_deck_id: Optional[str] = None
    input_pallet_ids: Tuple[str, ...] = ()
    command: str = ""
    node_name: str = ""
    created_at: Optional[str] = None
    extended_contexts: Tuple[ExtendedContext, ...] = ()
    # Неизвестные ключи из входного JSON, сохраняются как есть
    extras: Dict[str, Any] = Field(default_factory=dict)

    @field_validator("application_id", "input_deck_id")
    @classmethod
    def check_ids(cls, value: Optional[str]) -> Optional[str]:
        return _check_id(value)

    @field_validator("input_pallet_ids")
    @classmethod
    def check_input_ids(cls, value: Tuple[str, ...]) -> Tuple[str, ...]:
        for item in value:
            _check_id(item)
        return value

    @field_validator("created_at")
    @classmethod
    def check_created_at(cls, value: Optional[str]) -> Optional[str]:
        if value is None:
            return value
        if not value.endswith("Z"):
            raise ValueError("created_at должен быть в UTC (суффикс Z)")
        try:
            datetime.fromisoformat(value[:-1] + "+00:00")
        except ValueError:
            raise ValueError(f"created_at не в формате RFC3339: {value!r}")
        return value


# Ключи схемы v1; всё остальное попадает в extras
KNOWN_FIELDS = frozenset(
    name for name in ProvenanceAnnotation.model_fields if name != "extras"
)
# Поля, которые выводятся всегда, даже со значением по умолчанию
ALWAYS_EMITTED = ("schema_version", "kind", "node_name")


class AnnotationSummary(BaseModel):
    """Строка индекса hub, выведенная из аннотации и ID паллеты"""
    model_config = ConfigDict(frozen=True)

    id: str
    kind: PalletKind
    node_name: str
    antecedent_count: int


def validate_annotation(a: ProvenanceAnnotation, deterministic: bool = False) -> ProvenanceAnnotation:
    """Проверяет межполевые инварианты; ошибка называет нарушенный инвариант"""
    if a.schema_version != SCHEMA_VERSION:
        raise AnnotationError(f"неизвестная schema_version: {a.schema_version}")

    if a.kind == PalletKind.DATA_PALLET:
        if a.application_id is None:
            raise AnnotationError("data_pallet требует application_id")
        if a.input_deck_id is None:
            raise AnnotationError("data_pallet требует input_deck_id")
    else:
        if a.application_id is not None or a.input_deck_id is not None:
            raise AnnotationError(f"{a.kind.value} не может ссылаться на application_id/input_deck_id")
        if a.input_pallet_ids:
            raise AnnotationError(f"{a.kind.value} не может иметь input_pallet_ids")
        if a.extended_contexts:
            raise AnnotationError(f"{a.kind.value} не может иметь extended_contexts")

    if len(set(a.input_pallet_ids)) != len(a.input_pallet_ids):
        raise AnnotationError("PalletId повторяется в input_pallet_ids")

    if deterministic and a.created_at is not None:
        raise AnnotationError("в детерминированном режиме created_at должен отсутствовать")

    overlap = KNOWN_FIELDS.intersection(a.extras)
    if overlap:
        raise AnnotationError(f"extras пересекаются с полями схемы: {sorted(overlap)}")
    return a


def to_document(a: ProvenanceAnnotation) -> Dict[str, Any]:
    """JSON-объект аннотации без полей со значениями по умолчанию"""
    validate_annotation(a)
    full = a.model_dump(mode="json", exclude={"extras"})
    doc: Dict[str, Any] = {}
    for name, value in full.items():
        if name in ALWAYS_EMITTED:
            doc[name] = value
            continue
        default = ProvenanceAnnotation.model_fields[name].default
        if value is None or value == default or value in ([], ""):
            continue
        doc[name] = value
    doc.update(a.extras)
    return doc


def encode(a: ProvenanceAnnotation) -> bytes:
    """Канонический JSON аннотации"""
    return canonical_json(to_document(a))


def decode(data: bytes) -> ProvenanceAnnotation:
    """
    Разбирает и проверяет аннотацию.

    Неканонический, но корректный JSON принимается; неизвестные ключи
    сохраняются в extras и возвращаются на место при encode().
    """
    try:
        doc = json.loads(data.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise AnnotationError(f"аннотация не является JSON: {e}")
    if not isinstance(doc, dict):
        raise AnnotationError("аннотация должна быть JSON-объектом")

    version = doc.get("schema_version")
    if version != SCHEMA_VERSION:
        raise AnnotationError(f"неизвестная schema_version: {version!r}")

    known = {k: v for k, v in doc.items() if k in KNOWN_FIELDS}
    extras = {k: v for k, v in doc.items() if k not in KNOWN_FIELDS}
    if extras:
        logger.debug(f"Аннотация содержит дополнительные ключи: {sorted(extras)}")
    try:
        annotation = ProvenanceAnnotation(**known, extras=extras)
    except ValidationError as e:
        raise AnnotationError(f"аннотация не соответствует схеме: {e.errors()[0]['msg']}")
    return validate_annotation(annotation)


def extend(a: ProvenanceAnnotation, new_context: ExtendedContext) -> ProvenanceAnnotation:
    """Копия аннотации с добавленным контекстом; исходная не меняется"""
    if a.kind != PalletKind.DATA_PALLET:
        raise AnnotationError(f"extend применим только к data_pallet, получено {a.kind.value}")
    return a.model_copy(update={"extended_contexts": a.extended_contexts + (new_context,)})


def application_annotation(node_name: str, deterministic: bool = False) -> ProvenanceAnnotation:
    return ProvenanceAnnotation(
        kind=PalletKind.APPLICATION,
        node_name=node_name,
        created_at=None if deterministic else utc_now_rfc3339(),
    )


def input_deck_annotation(node_name: str, deterministic: bool = False) -> ProvenanceAnnotation:
    return ProvenanceAnnotation(
        kind=PalletKind.INPUT_DECK,
        node_name=node_name,
        created_at=None if deterministic else utc_now_rfc3339(),
    )


def data_pallet_annotation(
    application_id: str,
    input_deck_id: str,
    input_pallet_ids: List[str],
    command: str,
    node_name: str,
    deterministic: bool = False,
) -> ProvenanceAnnotation:
    return ProvenanceAnnotation(
        kind=PalletKind.DATA_PALLET,
        application_id=application_id,
        input_deck_id=input_deck_id,
        input_pallet_ids=tuple(input_pallet_ids),
        command=command,
        node_name=node_name,
        created_at=None if deterministic else utc_now_rfc3339(),
    )


def antecedent_links(a: ProvenanceAnnotation) -> List[Tuple[str, LinkType]]:
    """Все ссылки аннотации на другие паллеты, в порядке полей"""
    links: List[Tuple[str, LinkType]] = []
    if a.application_id:
        links.append((a.application_id, LinkType.APPLICATION))
    if a.input_deck_id:
        links.append((a.input_deck_id, LinkType.INPUT_DECK))
    for pallet_id in a.input_pallet_ids:
        links.append((pallet_id, LinkType.INPUT_PALLET))
    for ctx in a.extended_contexts:
        links.append((ctx.application_id, LinkType.EXTENDED_CONTEXT))
        links.append((ctx.input_deck_id, LinkType.EXTENDED_CONTEXT))
    return links


def summarize(a: ProvenanceAnnotation, pallet_id: str) -> AnnotationSummary:
    return AnnotationSummary(
        id=pallet_id,
        kind=a.kind,
        node_name=a.node_name,
        antecedent_count=len({pallet_id for pallet_id, _ in antecedent_links(a)}),
    )
