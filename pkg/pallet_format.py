"""
Формат образа паллеты: заголовок, таблица разделов, детерминированный архив.

Раскладка файла (все числа little-endian):
    magic "DPALLET\\0" | u32 format_version | u32 partition_count | 32 байта id
    partition_count × (u32 kind | u64 offset | u64 length | 32 байта sha256)
    содержимое разделов по их смещениям

ID паллеты = sha256(заголовок с обнуленным id ∥ разделы в порядке таблицы).
"""
import hashlib
import logging
import os
import shutil
import stat
import struct
import tempfile
import uuid
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path, PurePosixPath
from typing import Dict, Iterable, List, Optional, Tuple

import annotations as ann
from annotations import ProvenanceAnnotation, canonical_json, is_pallet_id
from resilience import (
    ExtractError,
    FormatError,
    PartitionNotFoundError,
    SealError,
    StagingError,
    TamperError,
)

logger = logging.getLogger(__name__)

MAGIC = b"DPALLET\0"
FORMAT_VERSION = 1

HEADER = struct.Struct("<8sII32s")
DESCRIPTOR = struct.Struct("<IQQ32s")
ENTRY_PATH_LEN = struct.Struct("<I")
ENTRY_MODE_SIZE = struct.Struct("<IQ")

ID_OFFSET = 16  # смещение поля id в заголовке
ID_LENGTH = 32
MAX_PARTITIONS = 16
READ_CHUNK = 1 << 20


class PartitionKind(IntEnum):
    DATA_ARCHIVE = 1
    ANNOTATIONS = 2
    META = 3


class PalletId(str):
    """SHA-256 образа в виде 64 hex-символов"""

    def __new__(cls, value: str):
        if not is_pallet_id(value):
            raise FormatError(f"некорректный PalletId: {value!r}")
        return super().__new__(cls, value)

    @classmethod
    def from_digest(cls, digest: bytes) -> "PalletId":
        return cls(digest.hex())

    @property
    def hex(self) -> str:
        return str(self)

    def short(self, length: int = 12) -> str:
        return str(self)[:length]


@dataclass(frozen=True)
class PartitionDescriptor:
    kind: PartitionKind
    offset: int
    length: int
    digest: bytes

    def pack(self) -> bytes:
        return DESCRIPTOR.pack(int(self.kind), self.offset, self.length, self.digest)


@dataclass(frozen=True)
class PalletHeader:
    magic: bytes
    format_version: int
    partition_count: int
    id: PalletId
    partitions: Tuple[PartitionDescriptor, ...]

    @property
    def size(self) -> int:
        return HEADER.size + DESCRIPTOR.size * len(self.partitions)

    def pack(self, zero_id: bool = False) -> bytes:
        raw_id = bytes(ID_LENGTH) if zero_id else bytes.fromhex(self.id)
        table = b"".join(d.pack() for d in self.partitions)
        return HEADER.pack(self.magic, self.format_version, self.partition_count, raw_id) + table


@dataclass(frozen=True)
class ArchiveEntry:
    path: str
    mode: int
    size: int
    content: bytes


@dataclass(frozen=True)
class VerificationReport:
    id_ok: bool
    partitions_ok: Dict[PartitionKind, bool]

    @property
    def ok(self) -> bool:
        return self.id_ok and all(self.partitions_ok.values())

    def to_dict(self) -> dict:
        return {
            "id_ok": self.id_ok,
            "partitions_ok": {k.name.lower(): v for k, v in sorted(self.partitions_ok.items())},
        }


@dataclass(frozen=True)
class PalletImage:
    """Запечатанный неизменяемый образ; разделы читаются с диска по запросу"""
    path: Path
    header: PalletHeader
    sealed: bool = True

    @property
    def id(self) -> PalletId:
        return self.header.id

    @property
    def size(self) -> int:
        return self.path.stat().st_size

    def descriptor(self, kind: PartitionKind) -> Optional[PartitionDescriptor]:
        for d in self.header.partitions:
            if d.kind == kind:
                return d
        return None


@dataclass
class StagingPallet:
    """Изменяемая область до seal; у нее еще нет PalletId"""
    root: Path
    deterministic: bool = False
    pending: Dict[str, int] = field(default_factory=dict)
    warnings: List[str] = field(default_factory=list)
    sealed: bool = False

    def pending_paths(self) -> List[str]:
        return sorted(self.pending, key=_path_key)

    def track(self, rel_path: str, mode: int) -> str:
        """Регистрирует файл, уже лежащий в staging-каталоге"""
        self.ensure_open()
        rel = normalize_path(rel_path)
        self.pending[rel] = mode & 0o7777
        return rel

    def discard(self) -> None:
        """Удаляет staging-каталог"""
        self.sealed = True
        if self.root.exists():
            _make_tree_writable(self.root)
            shutil.rmtree(self.root, ignore_errors=True)

    def ensure_open(self) -> None:
        if self.sealed:
            raise StagingError(f"staging {self.root} уже запечатан")


def _path_key(path: str) -> bytes:
    return path.encode("utf-8")


def normalize_path(rel_path: str) -> str:
    """Нормализует относительный путь; '..' и абсолютные пути запрещены"""
    if not rel_path or "\0" in rel_path:
        raise StagingError(f"недопустимый путь: {rel_path!r}")
    pure = PurePosixPath(rel_path)
    if pure.is_absolute():
        raise StagingError(f"путь должен быть относительным: {rel_path!r}")
    parts = [p for p in pure.parts if p != "."]
    if ".." in parts:
        raise StagingError(f"выход за пределы staging запрещен: {rel_path!r}")
    if not parts:
        raise StagingError(f"пустой путь: {rel_path!r}")
    return "/".join(parts)


def _make_tree_writable(root: Path) -> None:
    for dirpath, dirnames, _ in os.walk(root):
        for name in dirnames:
            p = os.path.join(dirpath, name)
            if not os.path.islink(p):
                os.chmod(p, stat.S_IRWXU)
    if not root.is_symlink():
        os.chmod(root, stat.S_IRWXU)


# ----------------- Staging -----------------

def create_staging(parent_dir: Path, deterministic: bool = False) -> StagingPallet:
    """Создает пустую staging-паллету в новом уникальном подкаталоге"""
    parent = Path(parent_dir)
    if not parent.is_dir():
        raise StagingError(f"каталог {parent} не существует")
    try:
        root = Path(tempfile.mkdtemp(prefix="staging-", dir=parent))
    except OSError as e:
        raise StagingError(f"не удалось создать staging в {parent}: {e}")
    logger.debug(f"Создан staging {root}")
    return StagingPallet(root=root, deterministic=deterministic)


def add_file(staging: StagingPallet, rel_path: str, content: bytes, mode: int = 0o644) -> None:
    """Записывает файл в staging; повторный путь перезаписывается с предупреждением"""
    staging.ensure_open()
    rel = normalize_path(rel_path)
    if rel in staging.pending:
        warning = f"файл {rel} добавлен повторно и перезаписан"
        staging.warnings.append(warning)
        logger.warning(warning)

    target = staging.root / rel
    try:
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_bytes(content)
        os.chmod(target, mode & 0o7777 | stat.S_IRUSR | stat.S_IWUSR)
    except OSError as e:
        raise StagingError(f"не удалось записать {rel} в staging: {e}")
    staging.pending[rel] = mode & 0o7777


# ----------------- Archive -----------------

def encode_archive(entries: Iterable[ArchiveEntry]) -> bytes:
    chunks = []
    previous: Optional[bytes] = None
    for entry in entries:
        path_bytes = entry.path.encode("utf-8")
        if previous is not None and path_bytes <= previous:
            raise SealError(f"записи архива не отсортированы или повторяются: {entry.path}")
        previous = path_bytes
        chunks.append(ENTRY_PATH_LEN.pack(len(path_bytes)))
        chunks.append(path_bytes)
        chunks.append(ENTRY_MODE_SIZE.pack(entry.mode, entry.size))
        chunks.append(entry.content)
    return b"".join(chunks)


def decode_archive(data: bytes) -> List[ArchiveEntry]:
    entries: List[ArchiveEntry] = []
    pos = 0
    previous: Optional[bytes] = None
    while pos < len(data):
        if pos + ENTRY_PATH_LEN.size > len(data):
            raise FormatError("архив обрезан: заголовок записи")
        (path_len,) = ENTRY_PATH_LEN.unpack_from(data, pos)
        pos += ENTRY_PATH_LEN.size
        if pos + path_len + ENTRY_MODE_SIZE.size > len(data):
            raise FormatError("архив обрезан: путь записи")
        path_bytes = data[pos:pos + path_len]
        pos += path_len
        mode, size = ENTRY_MODE_SIZE.unpack_from(data, pos)
        pos += ENTRY_MODE_SIZE.size
        if pos + size > len(data):
            raise FormatError("архив обрезан: содержимое записи")
        if previous is not None and path_bytes <= previous:
            raise FormatError("записи архива не отсортированы строго по пути")
        previous = path_bytes
        try:
            path = path_bytes.decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("путь записи не в UTF-8")
        if normalize_path_safe(path) != path:
            raise FormatError(f"недопустимый путь в архиве: {path!r}")
        entries.append(ArchiveEntry(path=path, mode=mode, size=size, content=data[pos:pos + size]))
        pos += size
    return entries


def normalize_path_safe(path: str) -> Optional[str]:
    try:
        return normalize_path(path)
    except StagingError:
        return None


# ----------------- Seal -----------------

def _collect_entries(staging: StagingPallet) -> List[ArchiveEntry]:
    entries = []
    for rel in staging.pending_paths():
        source = staging.root / rel
        try:
            st = source.lstat()
            if not stat.S_ISREG(st.st_mode):
                raise SealError(f"{rel} не является обычным файлом")
            content = source.read_bytes()
        except OSError as e:
            raise SealError(f"не удалось прочитать {rel} из staging: {e}")
        entries.append(ArchiveEntry(path=rel, mode=staging.pending[rel], size=len(content), content=content))
    return entries


def build_image_bytes(archive: bytes, annotation_bytes: bytes,
                      meta_bytes: Optional[bytes] = None) -> Tuple[bytes, PalletHeader]:
    """Собирает байты образа и заголовок с вычисленным id"""
    payloads = [(PartitionKind.DATA_ARCHIVE, archive), (PartitionKind.ANNOTATIONS, annotation_bytes)]
    if meta_bytes is not None:
        payloads.append((PartitionKind.META, meta_bytes))

    offset = HEADER.size + DESCRIPTOR.size * len(payloads)
    descriptors = []
    for kind, payload in payloads:
        descriptors.append(PartitionDescriptor(kind, offset, len(payload), hashlib.sha256(payload).digest()))
        offset += len(payload)

    header = PalletHeader(
        magic=MAGIC,
        format_version=FORMAT_VERSION,
        partition_count=len(descriptors),
        id=PalletId("0" * 64),
        partitions=tuple(descriptors),
    )
    body = b"".join(payload for _, payload in payloads)
    digest = hashlib.sha256(header.pack(zero_id=True) + body).digest()
    header = PalletHeader(MAGIC, FORMAT_VERSION, len(descriptors), PalletId.from_digest(digest), tuple(descriptors))
    return header.pack() + body, header


def write_atomic(out_path: Path, data: bytes) -> None:
    """Запись через временный файл и rename: частичный образ не остается"""
    out_path = Path(out_path)
    tmp_path = out_path.parent / f".{out_path.name}.{uuid.uuid4().hex}.tmp"
    try:
        with open(tmp_path, "wb") as f:
            f.write(data)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp_path, out_path)
    except OSError as e:
        try:
            tmp_path.unlink()
        except FileNotFoundError:
            pass
        raise SealError(f"не удалось записать образ {out_path}: {e}")


def seal(
    staging: StagingPallet,
    annotation: ProvenanceAnnotation,
    out_path: Path,
    meta: Optional[dict] = None,
    cleanup: bool = True,
) -> PalletImage:
    """
    Запечатывает staging в образ паллеты.

    Args:
        staging: Staging-паллета, после seal становится непригодной
        annotation: Аннотация происхождения, проверяется перед записью
        out_path: Путь к образу
        meta: Необязательный раздел Meta (канонический JSON)
        cleanup: Удалить staging-каталог после успешной записи
    """
    staging.ensure_open()
    ann.validate_annotation(annotation, deterministic=staging.deterministic)
    annotation_bytes = ann.encode(annotation)
    meta_bytes = canonical_json(meta) if meta is not None else None

    archive = encode_archive(_collect_entries(staging))
    data, header = build_image_bytes(archive, annotation_bytes, meta_bytes)
    write_atomic(Path(out_path), data)

    staging.sealed = True
    if cleanup:
        staging.discard()
    logger.info(f"Паллета {header.id.short()} запечатана: {len(staging.pending)} файлов, {len(data)} байт")
    return PalletImage(path=Path(out_path), header=header)


# ----------------- Open / verify / extract -----------------

def open_image(path: Path) -> PalletImage:
    """Разбирает заголовок и таблицу разделов; содержимое не читается"""
    path = Path(path)
    try:
        file_size = path.stat().st_size
        with open(path, "rb") as f:
            head = f.read(HEADER.size)
            if len(head) < HEADER.size:
                raise FormatError(f"{path}: файл короче заголовка")
            magic, version, count, raw_id = HEADER.unpack(head)
            if magic != MAGIC:
                raise FormatError(f"{path}: неверная сигнатура {magic!r}")
            if version != FORMAT_VERSION:
                raise FormatError(f"{path}: неподдерживаемая версия формата {version}")
            if count > MAX_PARTITIONS:
                raise FormatError(f"{path}: слишком много разделов ({count})")
            table = f.read(DESCRIPTOR.size * count)
    except FileNotFoundError:
        raise FormatError(f"{path}: файл не найден")
    except OSError as e:
        raise FormatError(f"{path}: ошибка чтения: {e}")

    if len(table) < DESCRIPTOR.size * count:
        raise FormatError(f"{path}: таблица разделов обрезана (partition_count={count})")

    descriptors = []
    for i in range(count):
        kind_raw, offset, length, digest = DESCRIPTOR.unpack_from(table, i * DESCRIPTOR.size)
        try:
            kind = PartitionKind(kind_raw)
        except ValueError:
            raise FormatError(f"{path}: неизвестный тип раздела {kind_raw}")
        descriptors.append(PartitionDescriptor(kind, offset, length, digest))

    header_end = HEADER.size + DESCRIPTOR.size * count
    previous_end = header_end
    for d in descriptors:
        if d.offset != previous_end:
            raise FormatError(f"{path}: разделы должны идти подряд без пропусков и перекрытий")
        if d.offset + d.length > file_size:
            raise FormatError(f"{path}: раздел {d.kind.name} выходит за конец файла")
        previous_end = d.offset + d.length

    kinds = [d.kind for d in descriptors]
    for required in (PartitionKind.DATA_ARCHIVE, PartitionKind.ANNOTATIONS):
        if kinds.count(required) != 1:
            raise FormatError(f"{path}: должен быть ровно один раздел {required.name}")
    if kinds.count(PartitionKind.META) > 1:
        raise FormatError(f"{path}: раздел META повторяется")

    header = PalletHeader(magic, version, count, PalletId.from_digest(raw_id), tuple(descriptors))
    return PalletImage(path=path, header=header)


def _read_range(f, offset: int, length: int) -> Iterable[bytes]:
    f.seek(offset)
    remaining = length
    while remaining > 0:
        chunk = f.read(min(READ_CHUNK, remaining))
        if not chunk:
            raise EOFError
        remaining -= len(chunk)
        yield chunk


def verify(image: PalletImage) -> VerificationReport:
    """
    Пересчитывает хеши разделов и id образа по байтам на диске.

    Заголовок хешируется в том виде, в каком он лежит в файле (с обнуленным id),
    поэтому изменение любого байта файла дает id_ok=False.
    """
    partitions_ok: Dict[PartitionKind, bool] = {}
    whole = hashlib.sha256()
    id_ok = True
    try:
        with open(image.path, "rb") as f:
            raw_header = bytearray(f.read(image.header.size))
            if len(raw_header) < image.header.size:
                raise EOFError
            stored_id = bytes(raw_header[ID_OFFSET:ID_OFFSET + ID_LENGTH])
            raw_header[ID_OFFSET:ID_OFFSET + ID_LENGTH] = bytes(ID_LENGTH)
            whole.update(raw_header)
            for d in image.header.partitions:
                part = hashlib.sha256()
                for chunk in _read_range(f, d.offset, d.length):
                    part.update(chunk)
                    whole.update(chunk)
                partitions_ok[d.kind] = part.digest() == d.digest
            f.seek(0, os.SEEK_END)
            if f.tell() != image.header.partitions[-1].offset + image.header.partitions[-1].length:
                id_ok = False
    except (OSError, EOFError):
        logger.warning(f"Образ {image.path} не читается целиком")
        return VerificationReport(False, {d.kind: False for d in image.header.partitions})

    digest = whole.digest()
    id_ok = id_ok and digest == bytes.fromhex(image.id) and stored_id == digest
    return VerificationReport(id_ok=id_ok, partitions_ok=partitions_ok)


def read_partition(image: PalletImage, kind: PartitionKind) -> bytes:
    """Сырые байты раздела заданного типа"""
    d = image.descriptor(kind)
    if d is None:
        raise PartitionNotFoundError(f"в образе {image.id.short()} нет раздела {PartitionKind(kind).name}")
    try:
        with open(image.path, "rb") as f:
            return b"".join(_read_range(f, d.offset, d.length))
    except (OSError, EOFError) as e:
        raise FormatError(f"{image.path}: раздел {d.kind.name} не читается: {e}")


def read_annotation(image: PalletImage) -> ProvenanceAnnotation:
    return ann.decode(read_partition(image, PartitionKind.ANNOTATIONS))


def read_entries(image: PalletImage) -> List[ArchiveEntry]:
    return decode_archive(read_partition(image, PartitionKind.DATA_ARCHIVE))


def extract(image: PalletImage, dest: Path) -> List[str]:
    """Распаковывает архив в dest; образ, не прошедший verify, не распаковывается"""
    report = verify(image)
    if not report.ok:
        raise TamperError(f"образ {image.path} не прошел проверку, извлечение запрещено", report=report)

    dest = Path(dest)
    if not dest.is_dir():
        raise ExtractError(f"каталог назначения {dest} не существует")

    completed: List[str] = []
    for entry in read_entries(image):
        target = dest / entry.path
        try:
            target.parent.mkdir(parents=True, exist_ok=True)
            if target.exists() and not os.access(target, os.W_OK):
                os.chmod(target, stat.S_IRUSR | stat.S_IWUSR)
            target.write_bytes(entry.content)
            os.chmod(target, entry.mode)
        except OSError as e:
            raise ExtractError(f"ошибка записи {entry.path}: {e}", completed=completed)
        completed.append(entry.path)
    logger.debug(f"Из паллеты {image.id.short()} извлечено {len(completed)} файлов в {dest}")
    return completed
