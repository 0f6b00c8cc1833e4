"""In-memory tree node of a hierarchical coordination store."""

from typing import Dict, Optional, Set

EMPTY_SET: frozenset = frozenset()


def _new_child_set(capacity_hint: int) -> Set[str]:
    # Python sets grow on demand; the hint is kept for parity with the
    # original node layout and has no observable effect.
    return set()


class DataNode:
    def __init__(self, data: bytes = b"", acl: int = -1):
        self.data = data
        self.acl = acl
        self.children: Optional[Set[str]] = None
        self.version = 0

    def addChild(self, child: str) -> bool:
        if self.children is None:
            # let's be conservative on the typical number of children
            self.children = _new_child_set(8)
        if child in self.children:
            return False
        self.children.add(child)
        return True

    def removeChild(self, child: str) -> bool:
        if self.children is None:
            return False
        if child not in self.children:
            return False
        self.children.remove(child)
        return True

    def getChildren(self) -> Set[str]:
        if self.children is None:
            return EMPTY_SET
        return frozenset(self.children)

    def setData(self, data: bytes) -> int:
        self.data = data
        self.version = self.version + 1
        return self.version

    def getData(self) -> bytes:
        return self.data

    def getVersion(self) -> int:
        return self.version

    def hasChildren(self) -> bool:
        if self.children is None:
            return False
        return len(self.children) > 0

    def childCount(self) -> int:
        if self.children is None:
            return 0
        return len(self.children)


class DataTree:
    # these are the number of acls that we have in the datatree
    aclIndex: int = 0

    def __init__(self):
        self.nodes: Dict[str, DataNode] = {}
        self.aclIndex = 0
        self.nodes["/"] = DataNode()
        self.ephemerals = 0

    def createNode(self, path: str, data: bytes, ephemeral: bool) -> str:
        parent = self._parentOf(path)
        if parent not in self.nodes:
            raise KeyError(parent)
        if path in self.nodes:
            raise ValueError(path)
        node = DataNode(data, self.aclIndex)
        self.nodes[path] = node
        self.nodes[parent].addChild(self._nameOf(path))
        if ephemeral:
            self.ephemerals = self.ephemerals + 1
        return path

    def deleteNode(self, path: str) -> bool:
        if path == "/" or path not in self.nodes:
            return False
        node = self.nodes[path]
        if node.hasChildren():
            return False
        del self.nodes[path]
        self.nodes[self._parentOf(path)].removeChild(self._nameOf(path))
        return True

    def getNode(self, path: str) -> Optional[DataNode]:
        return self.nodes.get(path)

    def nodeCount(self) -> int:
        return len(self.nodes)

    def setAcl(self, acls: int) -> int:
        self.aclIndex = self.aclIndex + acls
        return self.aclIndex

    def approximateDataSize(self) -> int:
        total = 0
        for path, node in self.nodes.items():
            total = total + len(path) + len(node.getData())
        return total

    def isEmpty(self) -> bool:
        return self.nodeCount() == 1

    def _parentOf(self, path: str) -> str:
        idx = path.rfind("/")
        if idx == 0:
            return "/"
        return path[:idx]

    def _nameOf(self, path: str) -> str:
        return path[path.rfind("/") + 1 :]
