"""
Локальный hub паллет: хранилище с адресацией по содержимому.

Раскладка:
    root/objects/<id[0:2]>/<id>.pallet
    root/index.json   (массив HubEntry, канонический JSON)
    root/.lock        (advisory-блокировка для обновления индекса)
"""
import filecmp
import json
import logging
import os
import shutil
import uuid
from contextlib import contextmanager
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Tuple

try:
    import fcntl
except ImportError:  # pragma: no cover - Windows
    fcntl = None

from pydantic import BaseModel, ConfigDict, ValidationError

import pallet_format as pf
from annotations import PalletKind, ProvenanceAnnotation, canonical_json, is_pallet_id, utc_now_rfc3339
from config import LOCK_TIMEOUT, PALLET_SUFFIX
from resilience import (
    AnnotationError,
    CorruptionError,
    FormatError,
    HubError,
    LockTimeoutError,
    PalletNotFoundError,
    TamperError,
    is_retryable_lock_error,
    retries_for_timeout,
    retry_with_backoff,
)

logger = logging.getLogger(__name__)

INDEX_NAME = "index.json"
LOCK_NAME = ".lock"
OBJECTS_DIR = "objects"
HUB_ENTRIES = {INDEX_NAME, LOCK_NAME, OBJECTS_DIR}


class HubEntry(BaseModel):
    """Строка индекса hub"""
    model_config = ConfigDict(frozen=True)

    id: str
    kind: PalletKind
    node_name: str
    size: int
    stored_at: str


class Hub:
    """Хранилище паллет в локальном каталоге"""

    def __init__(self, root: Path, lock_timeout: float = LOCK_TIMEOUT):
        self.root = Path(root)
        self.lock_timeout = lock_timeout

    # ----------------- Пути -----------------

    @property
    def objects_dir(self) -> Path:
        return self.root / OBJECTS_DIR

    @property
    def index_path(self) -> Path:
        return self.root / INDEX_NAME

    def object_path(self, pallet_id: str) -> Path:
        return self.objects_dir / pallet_id[:2] / f"{pallet_id}{PALLET_SUFFIX}"

    # ----------------- Инициализация -----------------

    @classmethod
    def init(cls, root: Path, lock_timeout: float = LOCK_TIMEOUT) -> "Hub":
        """
        Создает hub или открывает существующий.

        Существующий hub при открытии чинится: удаляются временные файлы
        прерванных put, индекс перестраивается, если расходится с объектами.
        """
        root = Path(root)
        if root.exists() and not root.is_dir():
            raise HubError(f"{root} не является каталогом")

        existing = set(os.listdir(root)) if root.exists() else set()
        is_hub = INDEX_NAME in existing or OBJECTS_DIR in existing
        if existing and not is_hub:
            raise HubError(f"каталог {root} не пуст и не является hub")
        foreign = {
            name for name in existing - HUB_ENTRIES
            if not (name.startswith(".") and name.endswith(".tmp"))
        }
        if foreign:
            raise HubError(f"в hub {root} посторонние файлы: {sorted(foreign)}")

        hub = cls(root, lock_timeout=lock_timeout)
        hub.objects_dir.mkdir(parents=True, exist_ok=True)
        with hub.locked():
            if not existing:
                hub._write_index([])
                logger.info(f"✅ Создан hub {root}")
            elif not hub.index_path.exists():
                hub._remove_stray_temp_files()
                hub.rebuild_index()
            else:
                hub._repair()
        return hub

    @classmethod
    def open_existing(cls, root: Path, lock_timeout: float = LOCK_TIMEOUT) -> "Hub":
        """Открывает существующий hub без создания нового"""
        root = Path(root)
        if not (root / INDEX_NAME).exists() and not (root / OBJECTS_DIR).exists():
            raise HubError(f"{root} не является hub (выполните hub init)")
        return cls.init(root, lock_timeout=lock_timeout)

    # ----------------- Блокировка -----------------

    @contextmanager
    def locked(self) -> Iterator[None]:
        """Эксклюзивная advisory-блокировка root/.lock"""
        self.root.mkdir(parents=True, exist_ok=True)
        with open(self.root / LOCK_NAME, "a+") as lock_file:
            if fcntl is not None:
                self._acquire(lock_file)
            try:
                yield
            finally:
                if fcntl is not None:
                    fcntl.flock(lock_file.fileno(), fcntl.LOCK_UN)

    def _acquire(self, lock_file) -> None:
        @retry_with_backoff(
            max_retries=retries_for_timeout(self.lock_timeout),
            exceptions=(OSError,),
            retry_check=is_retryable_lock_error,
        )
        def acquire():
            fcntl.flock(lock_file.fileno(), fcntl.LOCK_EX | fcntl.LOCK_NB)

        try:
            acquire()
        except OSError as e:
            if is_retryable_lock_error(e):
                raise LockTimeoutError(f"hub {self.root} заблокирован дольше {self.lock_timeout} сек")
            raise

    # ----------------- Индекс -----------------

    def _read_index(self) -> List[HubEntry]:
        try:
            with open(self.index_path, "r", encoding="utf-8") as f:
                rows = json.load(f)
            return [HubEntry(**row) for row in rows]
        except (OSError, json.JSONDecodeError, TypeError, ValidationError) as e:
            logger.warning(f"Индекс hub {self.root} не читается: {e}")
            raise HubError(f"индекс hub {self.index_path} поврежден")

    def _write_index(self, entries: List[HubEntry]) -> None:
        rows = [e.model_dump(mode="json") for e in sorted(entries, key=lambda e: e.id)]
        tmp_path = self.root / f".{INDEX_NAME}.{uuid.uuid4().hex}.tmp"
        with open(tmp_path, "wb") as f:
            f.write(canonical_json(rows))
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp_path, self.index_path)

    def _scan_object_ids(self) -> List[str]:
        ids = []
        if not self.objects_dir.exists():
            return ids
        for path in self.objects_dir.glob(f"*/*{PALLET_SUFFIX}"):
            name = path.name[:-len(PALLET_SUFFIX)]
            if is_pallet_id(name) and path.parent.name == name[:2]:
                ids.append(name)
        return sorted(ids)

    def _remove_stray_temp_files(self) -> None:
        for tmp in list(self.objects_dir.glob("*/.*.tmp")) + list(self.root.glob(".*.tmp")):
            logger.warning(f"Удален незавершенный временный файл {tmp}")
            tmp.unlink(missing_ok=True)

    def _entry_for(self, image: pf.PalletImage, annotation: ProvenanceAnnotation,
                   stored_at: Optional[str] = None) -> HubEntry:
        return HubEntry(
            id=image.id,
            kind=annotation.kind,
            node_name=annotation.node_name,
            size=self.object_path(image.id).stat().st_size,
            stored_at=stored_at or utc_now_rfc3339(),
        )

    def _repair(self) -> None:
        self._remove_stray_temp_files()
        try:
            entries = self._read_index()
        except HubError:
            entries = []
        by_id = {e.id: e for e in entries}
        object_ids = self._scan_object_ids()
        if sorted(by_id) == object_ids:
            return
        logger.warning(f"Индекс hub {self.root} расходится с объектами, перестраиваю")
        self.rebuild_index(previous=by_id)

    def rebuild_index(self, previous: Optional[Dict[str, HubEntry]] = None) -> List[HubEntry]:
        """Перестраивает индекс полным сканированием объектов"""
        previous = previous or {}
        entries = []
        for pallet_id in self._scan_object_ids():
            try:
                image = self._open_verified(pallet_id)
                annotation = pf.read_annotation(image)
            except (CorruptionError, AnnotationError) as e:
                logger.error(f"Объект {pallet_id} пропущен при перестройке индекса: {e}")
                continue
            stored_at = previous[pallet_id].stored_at if pallet_id in previous else None
            entries.append(self._entry_for(image, annotation, stored_at))
        self._write_index(entries)
        return entries

    # ----------------- Операции -----------------

    def put(self, image: pf.PalletImage) -> pf.PalletId:
        """Кладет проверенный образ в hub; повторный put того же образа ничего не меняет"""
        report = pf.verify(image)
        if not report.ok:
            raise TamperError(f"образ {image.path} не прошел проверку и не принят в hub", report=report)
        annotation = pf.read_annotation(image)

        dest = self.object_path(image.id)
        if dest.exists():
            if not filecmp.cmp(image.path, dest, shallow=False):
                logger.critical(f"Коллизия ID {image.id}: байты объекта в hub отличаются")
                raise CorruptionError(f"объект {image.id} в hub отличается от образа с тем же ID")
            with self.locked():
                entries = self._read_index()
                if not any(e.id == image.id for e in entries):
                    entries.append(self._entry_for(image, annotation))
                    self._write_index(entries)
            logger.debug(f"Паллета {image.id.short()} уже есть в hub")
            return image.id

        dest.parent.mkdir(parents=True, exist_ok=True)
        tmp_path = dest.parent / f".{dest.name}.{uuid.uuid4().hex}.tmp"
        try:
            shutil.copyfile(image.path, tmp_path)
            with open(tmp_path, "rb+") as f:
                os.fsync(f.fileno())
            os.replace(tmp_path, dest)
        except OSError as e:
            tmp_path.unlink(missing_ok=True)
            raise HubError(f"не удалось сохранить {image.id} в hub: {e}")

        with self.locked():
            entries = [e for e in self._read_index() if e.id != image.id]
            entries.append(self._entry_for(image, annotation))
            self._write_index(entries)
        logger.info(f"Паллета {image.id.short()} ({annotation.kind.value}) добавлена в hub")
        return image.id

    def contains(self, pallet_id: str) -> bool:
        return is_pallet_id(pallet_id) and self.object_path(pallet_id).exists()

    def _open_verified(self, pallet_id: str) -> pf.PalletImage:
        path = self.object_path(pallet_id)
        try:
            image = pf.open_image(path)
        except FormatError as e:
            raise CorruptionError(f"объект {pallet_id} поврежден: {e}")
        if image.id != pallet_id:
            raise CorruptionError(f"объект {pallet_id} содержит образ {image.id}")
        if not pf.verify(image).ok:
            raise CorruptionError(f"объект {pallet_id} не прошел проверку хешей")
        return image

    def get(self, pallet_id: str) -> pf.PalletImage:
        """Открытый и проверенный образ по ID"""
        if not self.contains(pallet_id):
            raise PalletNotFoundError(pallet_id)
        return self._open_verified(pallet_id)

    def list_entries(self, kind_filter: Optional[PalletKind] = None) -> List[HubEntry]:
        """Записи индекса, отсортированные по ID"""
        entries = sorted(self._read_index(), key=lambda e: e.id)
        if kind_filter is not None:
            entries = [e for e in entries if e.kind == PalletKind(kind_filter)]
        return entries

    def read_annotation(self, pallet_id: str) -> ProvenanceAnnotation:
        return pf.read_annotation(self.get(pallet_id))

    def iter_annotations(self) -> Iterator[Tuple[str, ProvenanceAnnotation]]:
        """Аннотации всех объектов hub (полный проход)"""
        for pallet_id in self._scan_object_ids():
            try:
                yield pallet_id, self.read_annotation(pallet_id)
            except (CorruptionError, AnnotationError) as e:
                logger.warning(f"Объект {pallet_id} пропущен: {e}")

    def verify_all(self) -> Dict[str, bool]:
        """Проверка всех объектов hub (fsck)"""
        results = {}
        for pallet_id in self._scan_object_ids():
            try:
                self._open_verified(pallet_id)
                results[pallet_id] = True
            except CorruptionError as e:
                logger.error(f"Объект {pallet_id} поврежден: {e}")
                results[pallet_id] = False
        return results
