import os
import logging
import tempfile
from pathlib import Path
from typing import Optional
from dotenv import load_dotenv

# Загружаем переменные окружения
# Если hub уже задан в окружении (CI, контейнер), .env не трогаем
# При локальном запуске загружаем .env рядом с config.py или из текущей директории
if not os.getenv("DATAPALLET_HUB"):
    env_path = Path(__file__).parent / ".env"
    cwd_env = Path(os.getcwd()) / ".env"

    if env_path.exists():
        load_dotenv(dotenv_path=env_path)
    elif cwd_env.exists():
        load_dotenv(dotenv_path=cwd_env)

# Настройка логирования
LOG_LEVEL = os.getenv("DATAPALLET_LOG_LEVEL", "WARNING").upper()
logging.basicConfig(
    level=getattr(logging, LOG_LEVEL, logging.WARNING),
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)
logger = logging.getLogger(__name__)

DEFAULT_HUB_PATH = "./pallet-hub"

# Расширение файлов образов
PALLET_SUFFIX = ".pallet"


def _env_float(name: str, default: float) -> float:
    raw = os.getenv(name)
    if not raw:
        return default
    try:
        return float(raw)
    except ValueError:
        logger.warning(f"Некорректное значение {name}={raw!r}, используется {default}")
        return default


def _env_int(name: str, default: int) -> int:
    raw = os.getenv(name)
    if not raw:
        return default
    try:
        return int(raw)
    except ValueError:
        logger.warning(f"Некорректное значение {name}={raw!r}, используется {default}")
        return default


def env_flag(name: str) -> bool:
    """Булев флаг из окружения: 1/true/yes/on"""
    return os.getenv(name, "").strip().lower() in ("1", "true", "yes", "on")


# Таймаут ожидания advisory-блокировки hub
LOCK_TIMEOUT = _env_float("DATAPALLET_LOCK_TIMEOUT", 30.0)

# Количество прогонов бенчмарка: 1000 как в методике измерений, 100 в CI
BENCH_TRIALS = _env_int("DATAPALLET_BENCH_TRIALS", 100 if os.getenv("CI") else 1000)


def resolve_hub_path(flag_value: Optional[str] = None) -> Path:
    """Путь к hub: флаг --hub > DATAPALLET_HUB > ./pallet-hub"""
    if flag_value:
        return Path(flag_value)
    return Path(os.getenv("DATAPALLET_HUB") or DEFAULT_HUB_PATH)


def resolve_deterministic(flag_value: Optional[bool] = None) -> bool:
    """Детерминированный режим: флаг --deterministic/--no-deterministic > DATAPALLET_DETERMINISTIC"""
    if flag_value is not None:
        return flag_value
    return env_flag("DATAPALLET_DETERMINISTIC")


def resolve_workdir(value: Optional[str] = None) -> Path:
    """Каталог для рабочих пространств runner"""
    raw = value or os.getenv("DATAPALLET_WORKDIR")
    if raw:
        return Path(raw)
    return Path(tempfile.gettempdir()) / "datapallet-runs"
