from pathlib import Path

from django.conf import settings
from django.core.management.base import CommandError

from rtdforge.exceptions import RtdforgeError


def command_error(prefix: str, error: Exception) -> CommandError:
    """CommandError carrying the exit code of an rtdforge error (1 for anything else)."""
    code = error.exit_code if isinstance(error, RtdforgeError) else 1
    return CommandError(f'{prefix}: {error}', returncode=code)


def parse_seeds(raw: str) -> list[int]:
    try:
        return [int(part) for part in raw.split(',') if part.strip()]
    except ValueError:
        raise CommandError(f'Seeds must be comma-separated integers, got {raw!r}', returncode=2) from None


def resolve_run_dir(raw: str) -> Path:
    """Relative run directories live under RTDFORGE_RUNS_DIR."""
    return Path(settings.RTDFORGE_RUNS_DIR) / raw
