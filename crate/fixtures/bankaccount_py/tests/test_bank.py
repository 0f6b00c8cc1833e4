import pytest

from bank import BankAccount, InsufficientFunds


def test_deposit_then_withdraw():
    account = BankAccount("ada")
    account.deposit(100)
    account.withdraw(30)
    assert account.getBalance() == 70


def test_overdraw_is_rejected():
    account = BankAccount("bob", 10)
    with pytest.raises(InsufficientFunds):
        account.withdraw(11)
    assert account.getBalance() == 10


def test_negative_deposit():
    account = BankAccount("cy")
    with pytest.raises(ValueError):
        account.deposit(-1)
    assert account.getBalance() == 0
