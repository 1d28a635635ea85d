import sys
import traceback
from datetime import datetime


def exception_hook(exctype, value, tb):
    """Catch-all for uncaught exceptions: append the traceback to crash_report.log"""
    error_msg = "".join(traceback.format_exception(exctype, value, tb))
    sys.stderr.write(error_msg)
    with open("crash_report.log", "a", encoding="utf-8") as f:
        f.write(f"\n--- CRASH AT {datetime.now()} ---\n")
        f.write(error_msg)
    sys.exit(1)


sys.excepthook = exception_hook

from cli.commands import main

if __name__ == "__main__":
    try:
        sys.exit(main())
    except Exception:
        exception_hook(*sys.exc_info())
