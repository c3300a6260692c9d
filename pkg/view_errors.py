"""
Quick log viewer for the rgbt error log
"""

import sys
from datetime import datetime, timedelta

from rgbt_core import ERROR_LOG_FILENAME, LOG_DIR

ERROR_LOG = LOG_DIR / ERROR_LOG_FILENAME
TIMESTAMP_FORMAT = '%Y-%m-%d %H:%M:%S,%f'


def parse_entries(lines):
    """Group log lines into (timestamp, level, text) entries; tracebacks join the entry above."""
    entries = []
    for line in lines:
        parts = line.rstrip('\n').split(' | ', 2)
        try:
            timestamp = datetime.strptime(parts[0], TIMESTAMP_FORMAT)
        except ValueError:
            if entries:
                ts, level, text = entries[-1]
                entries[-1] = (ts, level, text + '\n' + line.rstrip('\n'))
            continue
        level = parts[1] if len(parts) > 1 else ''
        text = parts[2] if len(parts) > 2 else ''
        entries.append((timestamp, level, text))
    return entries


def error_summary(entries):
    """Count ERROR entries by their `<command>: <category>` prefix."""
    counts = {}
    for _, level, text in entries:
        if level != 'ERROR':
            continue
        key = ':'.join(text.split(':')[:2])
        counts[key] = counts.get(key, 0) + 1
    return counts


def _read_entries():
    if not ERROR_LOG.exists():
        return None
    with open(ERROR_LOG, 'r', encoding='utf-8') as f:
        return parse_entries(f.readlines())


def view_recent_errors(hours=24):
    """Display warnings and errors from the last X hours."""
    entries = _read_entries()
    if entries is None:
        print("✅ No errors logged!")
        return

    cutoff = datetime.now() - timedelta(hours=hours)
    recent = [e for e in entries if e[0] >= cutoff and e[1] in ('WARNING', 'ERROR')]

    print(f"🔍 Errors from the last {hours} hours:\n")
    print("=" * 100)
    if not recent:
        print(f"✅ No errors in the last {hours} hours!")
    for timestamp, level, text in recent:
        print(f"{timestamp:%Y-%m-%d %H:%M:%S} {level}: {text}")
        print("-" * 100)


def view_error_summary():
    """Display error summary."""
    entries = _read_entries()
    if entries is None:
        print("✅ No errors logged!")
        return

    print("📊 Error Summary:\n")
    print("=" * 60)
    for error_type, count in sorted(error_summary(entries).items(), key=lambda x: -x[1]):
        print(f"{error_type:40s} : {count:4d}x")
    print("=" * 60)


if __name__ == "__main__":
    hours = 24
    if len(sys.argv) > 1:
        try:
            hours = int(sys.argv[1])
        except ValueError:
            pass

    view_error_summary()
    print("\n")
    view_recent_errors(hours)
