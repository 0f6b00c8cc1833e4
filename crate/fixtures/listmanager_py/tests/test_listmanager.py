from listmanager import ListManager


def test_add_one():
    lst = ListManager()
    lst.add(1)
    assert lst.length() == 1


def test_add_and_delete():
    lst = ListManager()
    lst.add(5)
    lst.add(6)
    assert lst.delete(5)
    assert not lst.delete(5)
    assert lst.length() == 1
    assert lst.contains(6)
