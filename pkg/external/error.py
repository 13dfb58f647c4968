import sys
import traceback as _traceback


def _current(exc: BaseException = None) -> BaseException:
    return exc if exc is not None else sys.exc_info()[1]


def traceback(exc: BaseException = None) -> str:
    exc = _current(exc)
    if exc is None:
        return ""
    return "".join(_traceback.format_exception(type(exc), exc, exc.__traceback__))


def text(exc: BaseException = None) -> str:
    # "ExcName: message (key=value, ...)", diagnostics appended when the error carries them
    exc = _current(exc)
    message = getattr(exc, "message", None) or str(exc) or "No further details"
    if diagnostics := getattr(exc, "diagnostics", None):
        details = ", ".join(f"{key}={value}" for key, value in diagnostics.items())
        message = f"{message} ({details})"
    return f"{type(exc).__name__}: {message}"
