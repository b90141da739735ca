import os

import typer

DEBUG_ENV_VAR = "NOISE_LAB_DEBUG"


def debug_enabled() -> bool:
    """True when NOISE_LAB_DEBUG is set to `true`; checked on every call."""
    return os.environ.get(DEBUG_ENV_VAR, "False").lower() == "true"

def log_info(message: str):
    """Progress lines: rows loaded, cells finished, files written."""
    typer.echo(message)

def log_warning(message: str):
    """Degenerate statistics and rejected rows; the run continues."""
    typer.secho(message, fg=typer.colors.YELLOW)

def log_error(message: str):
    """Printed to stderr."""
    typer.secho(message, fg=typer.colors.RED, err=True)

def log_debug(message: str):
    if debug_enabled():
        typer.secho(message, fg=typer.colors.BRIGHT_BLACK)

def log_success(message: str):
    typer.secho(message, fg=typer.colors.GREEN)

def log_step(message: str):
    """Section banner for one stage of a sweep."""
    typer.secho(f"\n--- {message} ---", fg=typer.colors.CYAN)

def replay_logs(logs: list):
    """Emits the entries collected by a *_logic helper, in order."""
    emitters = {
        'info': log_info,
        'warning': log_warning,
        'error': log_error,
        'debug': log_debug,
    }
    for log_entry in logs:
        emit = emitters.get(log_entry.get('level'))
        if emit is not None:
            emit(log_entry['message'])
