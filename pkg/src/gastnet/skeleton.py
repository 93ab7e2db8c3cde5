"""Joint topologies and the three graph kernels built from them.

Every kernel is derived from the bone list: first-order adjacency plus
identity, left/right counterparts, and second-order links for distal joints.
"""
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

# name, parent (None for the root)
_H36M17 = [
    ("pelvis", None),
    ("r_hip", "pelvis"),
    ("r_knee", "r_hip"),
    ("r_ankle", "r_knee"),
    ("l_hip", "pelvis"),
    ("l_knee", "l_hip"),
    ("l_ankle", "l_knee"),
    ("spine", "pelvis"),
    ("thorax", "spine"),
    ("neck", "thorax"),
    ("head", "neck"),
    ("l_shoulder", "thorax"),
    ("l_elbow", "l_shoulder"),
    ("l_wrist", "l_elbow"),
    ("r_shoulder", "thorax"),
    ("r_elbow", "r_shoulder"),
    ("r_wrist", "r_elbow"),
]

# h36m17 without spine and the separate head joint: the neck carries the head
_HUMANEVA15 = [
    ("pelvis", None),
    ("r_hip", "pelvis"),
    ("r_knee", "r_hip"),
    ("r_ankle", "r_knee"),
    ("l_hip", "pelvis"),
    ("l_knee", "l_hip"),
    ("l_ankle", "l_knee"),
    ("thorax", "pelvis"),
    ("head", "thorax"),
    ("l_shoulder", "thorax"),
    ("l_elbow", "l_shoulder"),
    ("l_wrist", "l_elbow"),
    ("r_shoulder", "thorax"),
    ("r_elbow", "r_shoulder"),
    ("r_wrist", "r_elbow"),
]

_TABLES = {"h36m17": _H36M17, "humaneva15": _HUMANEVA15}

_PAIRS = ["hip", "knee", "ankle", "shoulder", "elbow", "wrist"]
_DISTAL = ["l_ankle", "r_ankle", "l_wrist", "r_wrist", "head"]


@dataclass(frozen=True, eq=False)
class SkeletonGraph:
    name: str
    joint_names: tuple
    parents: tuple
    root: int
    edges: tuple
    symmetric_pairs: tuple
    distal_joints: tuple  # (distal joint, its second-order neighbour)
    adjacency: np.ndarray = field(repr=False)
    symmetric_kernel: np.ndarray = field(repr=False)
    kinematic_kernel: np.ndarray = field(repr=False)

    @property
    def n_joints(self):
        return len(self.joint_names)

    def index(self, joint_name):
        return self.joint_names.index(joint_name)

    def kernel(self, which):
        """Look up a kernel by name: 'first_order', 'symmetric' or 'kinematic'."""
        return {"first_order": self.adjacency,
                "symmetric": self.symmetric_kernel,
                "kinematic": self.kinematic_kernel}[which]

    def flip_map(self):
        return flip_map(self)


def _adjacency(n, edges):
    A = np.eye(n)
    for i, j in edges:
        A[i, j] = A[j, i] = 1.0
    return A


def build_symmetric_kernel(g):
    """Identity plus a link between each left/right counterpart."""
    S = np.eye(g.n_joints)
    for left, right in g.symmetric_pairs:
        S[left, right] = S[right, left] = 1.0
    return S


def build_kinematic_kernel(g):
    """First-order kernel plus distal-joint links to their second-order neighbour."""
    K = np.array(g.adjacency, copy=True)
    for joint, second in g.distal_joints:
        K[joint, second] = K[second, joint] = 1.0
    return K


def flip_map(g):
    """Joint permutation swapping left and right counterparts."""
    perm = np.arange(g.n_joints)
    for left, right in g.symmetric_pairs:
        perm[left], perm[right] = right, left
    return perm


def build_skeleton(name):
    if name not in _TABLES:
        raise ConfigError(f"unknown skeleton {name!r}; known: {sorted(_TABLES)}")
    table = _TABLES[name]
    names = tuple(n for n, _ in table)
    idx = {n: i for i, n in enumerate(names)}
    parents = tuple(-1 if p is None else idx[p] for _, p in table)
    root = parents.index(-1)
    edges = tuple((p, i) for i, p in enumerate(parents) if p >= 0)
    pairs = tuple((idx["l_" + s], idx["r_" + s]) for s in _PAIRS)
    # second-order neighbour = grandparent along the chain towards the root
    distal = tuple((idx[d], parents[parents[idx[d]]]) for d in _DISTAL)

    n = len(names)
    A = _adjacency(n, edges)
    # temporary instance to reuse the kernel builders
    g = SkeletonGraph(name, names, parents, root, edges, pairs, distal, A, A, A)
    S = build_symmetric_kernel(g)
    K = build_kinematic_kernel(g)
    for m in (A, S, K):
        m.setflags(write=False)
    return SkeletonGraph(name, names, parents, root, edges, pairs, distal, A, S, K)


def is_connected(g):
    nbrs = {i: set() for i in range(g.n_joints)}
    for i, j in g.edges:
        nbrs[i].add(j)
        nbrs[j].add(i)
    seen, queue = {g.root}, deque([g.root])
    while queue:
        for j in nbrs[queue.popleft()]:
            if j not in seen:
                seen.add(j)
                queue.append(j)
    return len(seen) == g.n_joints


SKELETONS = tuple(_TABLES)
