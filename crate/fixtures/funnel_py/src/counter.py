import time


class Counter:
    def __init__(self, start: int = 0):
        self.value = start

    def increment(self) -> int:
        self.value += 1
        return self.value

    def reset(self):
        self.value = 0

    def get(self) -> int:
        return self.value

    def slowGet(self, delay: float) -> int:
        time.sleep(delay)
        return self.value
