"""Line-execution probe loaded at interpreter start-up for coverage runs."""

import atexit
import json
import os
import sys
import threading

_root = os.path.realpath(os.environ.get("FC_COVERAGE_ROOT", "."))
_out = os.environ.get("FC_COVERAGE_OUT")
_hits = set()
_seen_code = {}


def _wanted(filename):
    cached = _seen_code.get(filename)
    if cached is None:
        path = os.path.realpath(filename)
        cached = path.startswith(_root + os.sep) and path.endswith(".py")
        _seen_code[filename] = cached
    return cached


def _local(frame, event, arg):
    if event == "line":
        _hits.add((frame.f_code.co_filename, frame.f_lineno))
    return _local


def _global(frame, event, arg):
    if _wanted(frame.f_code.co_filename):
        _hits.add((frame.f_code.co_filename, frame.f_lineno))
        return _local
    return None


def _dump():
    if not _out:
        return
    rows = {}
    for filename, line in _hits:
        rel = os.path.relpath(os.path.realpath(filename), _root)
        rows.setdefault(rel, []).append(line)
    with open(_out, "w") as handle:
        json.dump({k: sorted(set(v)) for k, v in sorted(rows.items())}, handle)


if _out:
    sys.settrace(_global)
    threading.settrace(_global)
    atexit.register(_dump)
