"""Per-epoch metrics log: one machine-parseable key=value line per epoch,
flushed as written so an aborted run still leaves a valid partial log."""

from __future__ import annotations

from pathlib import Path

__all__ = ["MetricsWriter", "read_metrics", "format_record"]


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, int):
        return str(value)
    s = str(value)
    if any(c.isspace() for c in s):
        raise ValueError(f"metric values may not contain whitespace: {s!r}")
    return s


def format_record(epoch: int, **fields) -> str:
    parts = [f"epoch={epoch}"] + [f"{k}={_fmt(v)}" for k, v in fields.items()]
    return " ".join(parts)


class MetricsWriter:
    """Appends one record per epoch; epoch numbers must strictly increase."""

    def __init__(self, path):
        self.path = Path(path)
        self._file = open(self.path, "w", encoding="utf-8", newline="\n")
        self._last_epoch = None

    def write(self, epoch: int, **fields) -> None:
        if self._last_epoch is not None and epoch <= self._last_epoch:
            raise ValueError(f"epoch {epoch} not after {self._last_epoch}")
        self._file.write(format_record(epoch, **fields) + "\n")
        self._file.flush()
        self._last_epoch = epoch

    def close(self) -> None:
        self._file.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False


def _parse(value: str):
    for cast in (int, float):
        try:
            return cast(value)
        except ValueError:
            continue
    if value in ("true", "false"):
        return value == "true"
    return value


def read_metrics(path) -> list:
    records = []
    for raw in Path(path).read_text(encoding="utf-8").splitlines():
        line = raw.strip()
        if not line:
            continue
        rec = {}
        for token in line.split():
            key, _, value = token.partition("=")
            rec[key] = _parse(value)
        records.append(rec)
    return records
