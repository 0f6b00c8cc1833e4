from counter import Counter


def test_increment():
    c = Counter()
    c.increment()
    assert c.get() == 1


def test_start_value():
    c = Counter(5)
    assert c.get() == 5


def test_reset():
    c = Counter(3)
    c.reset()
    assert c.get() == 0


def test_increment_returns_value():
    c = Counter()
    assert c.increment() == 1


def test_no_assertion_smoke():
    c = Counter()
    c.increment()


def test_no_assertion_reset():
    c = Counter(2)
    c.reset()


def test_slow():
    c = Counter()
    assert c.slowGet(30) == 0


def test_double_increment():
    c = Counter()
    c.increment()
    c.increment()
    assert c.get() == 2


def test_reset_after_increment():
    c = Counter()
    c.increment()
    c.reset()
    assert c.get() == 0


def test_get_is_stable():
    c = Counter(9)
    assert c.get() == c.get()
