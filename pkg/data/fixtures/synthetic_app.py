"""
Синтетическое приложение для бенчмарка узла.

Использование: synthetic_app.py <deck.json> <out-dir>

Читает input deck, ждет заданное время и пишет детерминированный вывод
заданного размера. В stdout сообщает собственное время работы.
"""
import hashlib
import json
import sys
import time
from pathlib import Path


def build_payload(seed: str, size: int) -> bytes:
    block = hashlib.sha256(seed.encode("utf-8")).digest()
    repeats = size // len(block) + 1
    return (block * repeats)[:size]


def main(argv):
    if len(argv) != 3:
        print("usage: synthetic_app.py <deck.json> <out-dir>", file=sys.stderr)
        return 2
    started = time.perf_counter()
    deck = json.loads(Path(argv[1]).read_text(encoding="utf-8"))
    out_dir = Path(argv[2])

    time.sleep(float(deck.get("sleep", 0.025)))

    total = int(deck.get("output_bytes", 102400))
    files = max(1, int(deck.get("output_files", 1)))
    per_file, remainder = divmod(total, files)
    for i in range(files):
        size = per_file + (1 if i < remainder else 0)
        target = out_dir / f"result-{i:03d}.dat"
        target.write_bytes(build_payload(f"{deck.get('seed', 'datapallet')}-{i}", size))

    print(f"DATAPALLET_APP_SECONDS={time.perf_counter() - started:.6f}")
    return 0


if __name__ == "__main__":
    sys.exit(main(sys.argv))
