from typing import List


class ListManager:
    def __init__(self):
        self.items: List[int] = []

    def add(self, item: int):
        self.items.append(item)

    def delete(self, item: int) -> bool:
        if item in self.items:
            self.items.remove(item)
            return True
        return False

    def length(self) -> int:
        return len(self.items)

    def contains(self, item: int) -> bool:
        return item in self.items
