"""
Модуль отказоустойчивости для data pallets.
Иерархия ошибок с кодами выхода CLI, retry механизм и логирование критических ошибок.
"""

import errno
import functools
import logging
import time
from typing import Any, Callable, Optional, Sequence

logger = logging.getLogger(__name__)

# Конфигурация retry
MAX_RETRIES = 3
RETRY_DELAY = 0.05  # секунды
RETRY_BACKOFF = 2.0  # множитель для exponential backoff
MAX_RETRY_DELAY = 2.0  # максимальная задержка


class PalletError(Exception):
    """Базовый класс для ошибок data pallets"""
    exit_code = 1


class UsageError(PalletError):
    """Неверные аргументы или входные данные"""
    exit_code = 2


class StagingError(PalletError):
    """Ошибка staging-паллеты (создание, недопустимый путь, повторный seal)"""
    exit_code = 2


class AnnotationError(PalletError):
    """Аннотация нарушает схему или инвариант"""
    exit_code = 2


class NodeSpecError(UsageError):
    """Некорректное описание узла workflow"""


class PalletNotFoundError(PalletError):
    """Паллета с таким ID отсутствует"""
    exit_code = 3

    def __init__(self, pallet_id: str, message: Optional[str] = None):
        self.pallet_id = pallet_id
        super().__init__(message or f"Паллета {pallet_id} не найдена")


class PartitionNotFoundError(PalletError):
    """В образе нет раздела запрошенного типа"""
    exit_code = 3


class FormatError(PalletError):
    """Файл не является корректным образом паллеты"""
    exit_code = 4


class TamperError(PalletError):
    """Образ не прошел проверку хешей"""
    exit_code = 4

    def __init__(self, message: str, report: Any = None):
        self.report = report
        super().__init__(message)


class CorruptionError(PalletError):
    """Объект в hub поврежден или не совпадает со своим адресом"""
    exit_code = 4


class InputMutationError(PalletError):
    """Узел изменил входные данные, доступные только для чтения"""
    exit_code = 4

    def __init__(self, message: str, paths: Sequence[str] = ()):
        self.paths = list(paths)
        super().__init__(message)


class SealError(PalletError):
    """Не удалось записать образ паллеты"""


class ExtractError(PalletError):
    """Извлечение прервано, часть файлов уже записана"""

    def __init__(self, message: str, completed: Sequence[str] = ()):
        self.completed = list(completed)
        super().__init__(message)


class CaptureError(PalletError):
    """Выходные файлы узла не могут быть упакованы"""

    def __init__(self, message: str, paths: Sequence[str] = ()):
        self.paths = list(paths)
        super().__init__(message)


class HubError(PalletError):
    """Каталог не является hub или hub не может быть открыт"""


class LockTimeoutError(HubError):
    """Не удалось захватить блокировку hub"""


class NodeFailedError(PalletError):
    """Команда узла завершилась с ненулевым кодом"""

    def __init__(self, message: str, report: Any = None, quarantine_path: Any = None):
        self.report = report
        self.quarantine_path = quarantine_path
        super().__init__(message)

    @property
    def exit_code(self) -> int:
        code = getattr(self.report, "exit_code", None)
        # Код 0 у упавшего узла невозможен, но CLI не должен отвечать успехом
        return code if code else 1


def is_retryable_lock_error(error: Exception) -> bool:
    """Проверяет, можно ли повторить захват блокировки при данной ошибке"""
    if isinstance(error, BlockingIOError):
        return True
    if isinstance(error, OSError) and error.errno in (errno.EAGAIN, errno.EACCES, errno.EWOULDBLOCK):
        return True
    return False


def retry_with_backoff(
    max_retries: int = MAX_RETRIES,
    delay: float = RETRY_DELAY,
    backoff: float = RETRY_BACKOFF,
    max_delay: float = MAX_RETRY_DELAY,
    exceptions: tuple = (Exception,),
    retry_check: Optional[Callable[[Exception], bool]] = None,
):
    """
    Декоратор для повторных попыток с exponential backoff

    Args:
        max_retries: Максимальное количество повторов
        delay: Начальная задержка в секундах
        backoff: Множитель для exponential backoff
        max_delay: Максимальная задержка в секундах
        exceptions: Кортеж исключений, при которых нужно повторять
        retry_check: Функция для проверки, нужно ли повторять при данной ошибке
    """
    def decorator(func: Callable[..., Any]) -> Callable[..., Any]:
        @functools.wraps(func)
        def wrapper(*args, **kwargs):
            current_delay = delay

            for attempt in range(max_retries + 1):
                try:
                    return func(*args, **kwargs)
                except exceptions as e:
                    if retry_check and not retry_check(e):
                        logger.debug(f"Ошибка не является повторяемой: {e}")
                        raise

                    if attempt >= max_retries:
                        logger.error(f"Превышено количество попыток ({max_retries}) для {func.__name__}: {e}")
                        raise

                    wait_time = min(current_delay, max_delay)
                    logger.warning(
                        f"Ошибка в {func.__name__} (попытка {attempt + 1}/{max_retries + 1}): {e}. "
                        f"Повтор через {wait_time:.2f} сек."
                    )
                    time.sleep(wait_time)
                    current_delay *= backoff

            raise PalletError(f"Неожиданная ошибка в {func.__name__}")

        return wrapper
    return decorator


def retries_for_timeout(timeout: float, delay: float = RETRY_DELAY,
                        backoff: float = RETRY_BACKOFF, max_delay: float = MAX_RETRY_DELAY) -> int:
    """Сколько повторов с backoff укладывается в заданный таймаут"""
    retries, waited, current = 0, 0.0, delay
    while waited + min(current, max_delay) <= timeout:
        waited += min(current, max_delay)
        current *= backoff
        retries += 1
    return retries


def handle_critical_error(func_name: str, error: Exception, context: Optional[dict] = None):
    """
    Обработка критических ошибок с логированием контекста

    Args:
        func_name: Имя функции, в которой произошла ошибка
        error: Исключение
        context: Дополнительный контекст для логирования
    """
    context_str = f" Контекст: {context}" if context else ""
    logger.critical(
        f"КРИТИЧЕСКАЯ ОШИБКА в {func_name}: {error}{context_str}",
        exc_info=True
    )
