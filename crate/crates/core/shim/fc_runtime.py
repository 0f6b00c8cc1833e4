"""Runtime support for generated checkers.

Provides the operation record handed to checkers, the identity-keyed shadow
state, the per-thread reentrancy guard, the assertion helpers and the
dispatch entry point called from instrumented methods.
"""

import importlib
import os
import sys
import threading

GUARD_MESSAGE = "Checker is calling a state-changing method."


class _Absent(object):
    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super(_Absent, cls).__new__(cls)
        return cls._instance

    def __repr__(self):
        return "<absent>"

    def __bool__(self):
        return False


ABSENT = _Absent()


class CheckerViolation(Exception):
    """Raised when a checker assertion fails. Never a subclass of AssertionError."""

    def __init__(self, checker_id, detail):
        self.checker_id = checker_id
        self.detail = detail
        super(CheckerViolation, self).__init__(
            "fc-violation[%s] %s" % (checker_id, detail)
        )


class CheckerRecursionError(RuntimeError):
    pass


class Operation(object):
    __slots__ = ("signature", "baseObject", "arguments", "returnValue")

    def __init__(self, signature, baseObject, arguments, returnValue=ABSENT):
        self.signature = signature
        self.baseObject = baseObject
        self.arguments = list(arguments)
        self.returnValue = returnValue

    def __repr__(self):
        return "Operation(%r, %r, %r, %r)" % (
            self.signature,
            self.baseObject,
            self.arguments,
            self.returnValue,
        )


class IdentityMap(object):
    """Mapping keyed by object identity. Holds a strong reference to each key."""

    def __init__(self):
        self._entries = {}

    def _key(self, obj):
        return id(obj)

    def __getitem__(self, obj):
        return self._entries[self._key(obj)][1]

    def __setitem__(self, obj, value):
        self._entries[self._key(obj)] = (obj, value)

    def __delitem__(self, obj):
        del self._entries[self._key(obj)]

    def __contains__(self, obj):
        return self._key(obj) in self._entries

    def __len__(self):
        return len(self._entries)

    def __iter__(self):
        return iter([pair[0] for pair in self._entries.values()])

    def get(self, obj, default=None):
        pair = self._entries.get(self._key(obj))
        if pair is None:
            return default
        return pair[1]

    def getOrDefault(self, obj, default):
        return self.get(obj, default)

    def setdefault(self, obj, default):
        pair = self._entries.get(self._key(obj))
        if pair is None:
            self._entries[self._key(obj)] = (obj, default)
            return default
        return pair[1]

    def put(self, obj, value):
        self[obj] = value

    def pop(self, obj, *default):
        pair = self._entries.pop(self._key(obj), None)
        if pair is None:
            if default:
                return default[0]
            raise KeyError(obj)
        return pair[1]

    def keys(self):
        return list(self)

    def values(self):
        return [pair[1] for pair in self._entries.values()]

    def items(self):
        return list(self._entries.values())

    def clear(self):
        self._entries.clear()


class ShadowState(object):
    state = IdentityMap()
    lock = threading.RLock()
    _local = threading.local()

    @staticmethod
    def in_checker():
        return getattr(ShadowState._local, "active", None) is not None

    @staticmethod
    def current_checker():
        return getattr(ShadowState._local, "active", None)

    @staticmethod
    def enter(checker_id):
        if ShadowState.in_checker():
            _recursion(ShadowState.current_checker())
        ShadowState._local.active = checker_id

    @staticmethod
    def exit():
        ShadowState._local.active = None

    @staticmethod
    def reset():
        with ShadowState.lock:
            ShadowState.state.clear()


def _recursion(checker_id):
    sys.stderr.write("fc-recursion[%s] %s\n" % (checker_id, GUARD_MESSAGE))
    raise CheckerRecursionError(GUARD_MESSAGE)


def _mode():
    mode = os.environ.get("FC_ON_VIOLATION")
    if mode:
        return mode
    try:
        from fc_runtime import _settings

        return _settings.ON_VIOLATION
    except ImportError:
        return "raise"


_checkers = {}
_counters = {"dispatches": 0, "violations": 0}


def _resolve(checker_id):
    fn = _checkers.get(checker_id)
    if fn is None:
        module = importlib.import_module("fc_runtime.checkers." + checker_id)
        fn = module.ENTRY
        _checkers[checker_id] = fn
    return fn


def register(checker_id, fn):
    _checkers[checker_id] = fn


def _log_violation(exc):
    _counters["violations"] += 1
    line = "fc-logged %s\n" % (exc,)
    sys.stderr.write(line)
    path = os.environ.get("FC_VIOLATION_LOG")
    if path:
        with open(path, "a") as handle:
            handle.write(line)


def dispatch(op, checker_ids):
    if ShadowState.in_checker():
        _recursion(ShadowState.current_checker())
    log_mode = _mode() == "log"
    with ShadowState.lock:
        _counters["dispatches"] += 1
        for checker_id in checker_ids:
            fn = _resolve(checker_id)
            try:
                fn(op, ShadowState.state)
            except CheckerViolation as exc:
                if not log_mode:
                    raise
                _log_violation(exc)


def _fail(detail):
    raise CheckerViolation(ShadowState.current_checker() or "<none>", detail)


def assertTrue(condition, message=None):
    if not condition:
        _fail("assertTrue failed: %r%s" % (condition, "" if message is None else " (%s)" % message))


def assertFalse(condition, message=None):
    if condition:
        _fail("assertFalse failed: %r%s" % (condition, "" if message is None else " (%s)" % message))


def assertEquals(expected, actual, message=None):
    if not (expected == actual):
        _fail(
            "assertEquals failed: expected %r, actual %r%s"
            % (expected, actual, "" if message is None else " (%s)" % message)
        )


def assertNotNull(value, message=None):
    if value is None or value is ABSENT:
        _fail("assertNotNull failed: %r%s" % (value, "" if message is None else " (%s)" % message))


assertEqual = assertEquals
