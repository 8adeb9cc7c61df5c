"""Molecular graphs: typed bonds, hop-distance adjacency, symmetry detection.

Graphs are heavy-atom graphs (hydrogens may simply be absent). Atom order
is the input order and is the canonical order everywhere downstream, so all
detection results are deterministic for a given file.
"""

from collections import deque
from dataclasses import dataclass
from enum import IntEnum

import numpy as np


class GraphError(ValueError):
    """Structural problem with a molecular graph or its inputs."""


class BondOrder(IntEnum):
    SINGLE = 1
    DOUBLE = 2
    TRIPLE = 3
    AROMATIC = 4


ELEMENT_SYMBOLS = [
    "X", "H", "He", "Li", "Be", "B", "C", "N", "O", "F", "Ne",
    "Na", "Mg", "Al", "Si", "P", "S", "Cl", "Ar", "K", "Ca",
    "Sc", "Ti", "V", "Cr", "Mn", "Fe", "Co", "Ni", "Cu", "Zn",
    "Ga", "Ge", "As", "Se", "Br",
]
SYMBOL_TO_Z = {s: z for z, s in enumerate(ELEMENT_SYMBOLS) if z}
MAX_ELEMENT = len(ELEMENT_SYMBOLS) - 1  # H..Br

# Typical valences used by the constrained sampler's geometry builder.
DEFAULT_VALENCE = {
    1: 1, 5: 3, 6: 4, 7: 3, 8: 2, 9: 1,
    14: 4, 15: 3, 16: 2, 17: 1, 34: 2, 35: 1,
}


@dataclass(frozen=True)
class AtomSpec:
    element: int
    idealized_valence: int | None = None

    def __post_init__(self):
        if not 1 <= self.element <= MAX_ELEMENT:
            raise GraphError(f"unsupported element {self.element} (supported: 1..{MAX_ELEMENT})")

    @property
    def valence(self):
        if self.idealized_valence is not None:
            return self.idealized_valence
        return DEFAULT_VALENCE.get(self.element)

    @property
    def symbol(self):
        return ELEMENT_SYMBOLS[self.element]


class MolGraph:
    """Connected molecular graph with typed bonds.

    Bonds are stored once per unordered pair (i < j) but adjacency is
    bidirectional. Instances are immutable after construction and safe to
    share across threads.
    """

    def __init__(self, atoms, bonds, h=3):
        self.atoms = tuple(
            a if isinstance(a, AtomSpec) else AtomSpec(*a) if isinstance(a, tuple) else AtomSpec(a)
            for a in atoms
        )
        n = len(self.atoms)
        if n < 2:
            raise GraphError("graph needs at least 2 atoms")
        if h < 1:
            raise GraphError("adjacency order h must be >= 1")
        self.h = int(h)

        seen = set()
        canon = []
        for i, j, order in bonds:
            i, j = int(i), int(j)
            if not (0 <= i < n and 0 <= j < n):
                raise GraphError(f"bond index out of range: ({i}, {j})")
            if i == j:
                raise GraphError(f"self-bond on atom {i}")
            key = (min(i, j), max(i, j))
            if key in seen:
                raise GraphError(f"duplicate bond {key}")
            seen.add(key)
            canon.append((key[0], key[1], BondOrder(order)))
        self.bonds = tuple(sorted(canon))

        adj = [[] for _ in range(n)]
        for i, j, order in self.bonds:
            adj[i].append((j, order))
            adj[j].append((i, order))
        self._adj = tuple(tuple(sorted(nbrs)) for nbrs in adj)

        if self._component(0) != set(range(n)):
            raise GraphError("graph is not connected")

    @property
    def n_atoms(self):
        return len(self.atoms)

    def neighbors(self, i):
        return tuple(j for j, _ in self._adj[i])

    def neighbor_bonds(self, i):
        return self._adj[i]

    def degree(self, i):
        return len(self._adj[i])

    def bond_order(self, i, j):
        for k, order in self._adj[i]:
            if k == j:
                return order
        return None

    def elements(self):
        return np.array([a.element for a in self.atoms], dtype=np.int64)

    def _component(self, start, excluded=()):
        excluded = set(excluded)
        if start in excluded:
            return set()
        seen = {start}
        queue = deque([start])
        while queue:
            u = queue.popleft()
            for v in self.neighbors(u):
                if v not in seen and v not in excluded:
                    seen.add(v)
                    queue.append(v)
        return seen

    def bond_set(self):
        return {(i, j, o) for i, j, o in self.bonds}

    # -------------------------------------------------------------- file IO

    def to_json_dict(self):
        return {
            "atoms": [
                {"element": a.element}
                | ({"valence": a.idealized_valence} if a.idealized_valence is not None else {})
                for a in self.atoms
            ],
            "bonds": [[i, j, int(o)] for i, j, o in self.bonds],
        }

    @classmethod
    def from_json_dict(cls, d, h=3):
        atoms = [
            AtomSpec(int(a["element"]), a.get("valence"))
            for a in d["atoms"]
        ]
        bonds = [(b[0], b[1], b[2]) for b in d["bonds"]]
        return cls(atoms, bonds, h=h)

    @classmethod
    def from_ctab(cls, text, h=3):
        """Parse a minimal V2000-style connection table (atoms + bonds only)."""
        lines = text.splitlines()
        if len(lines) < 4:
            raise GraphError("connection table too short")
        counts = lines[3].split()
        try:
            natoms, nbonds = int(counts[0]), int(counts[1])
        except (IndexError, ValueError) as exc:
            raise GraphError(f"bad counts line: {lines[3]!r}") from exc
        atoms = []
        for line in lines[4:4 + natoms]:
            fields = line.split()
            symbol = fields[3]
            if symbol not in SYMBOL_TO_Z:
                raise GraphError(f"unknown element symbol {symbol!r}")
            atoms.append(AtomSpec(SYMBOL_TO_Z[symbol]))
        bonds = []
        for line in lines[4 + natoms:4 + natoms + nbonds]:
            fields = line.split()
            bonds.append((int(fields[0]) - 1, int(fields[1]) - 1, int(fields[2])))
        return cls(atoms, bonds, h=h)


# ------------------------------------------------------- higher-order hops


class HigherOrderAdjacency:
    """Hop-count labels for all ordered pairs within graph distance <= h."""

    def __init__(self, src, dst, hop, n_atoms, h):
        self.src = np.asarray(src, dtype=np.int64)
        self.dst = np.asarray(dst, dtype=np.int64)
        self.hop = np.asarray(hop, dtype=np.int64)
        self.n_atoms = n_atoms
        self.h = h
        self._labels = {
            (int(i), int(j)): int(k)
            for i, j, k in zip(self.dst, self.src, self.hop)
        }

    def label(self, i, j):
        return self._labels.get((i, j))

    @property
    def n_edges(self):
        return len(self.src)


def build_higher_order(g: MolGraph, h=None) -> HigherOrderAdjacency:
    """BFS hop labels up to distance h; pairs farther apart get no label.

    Edge rows are ordered by (target, source) so everything downstream is
    deterministic.
    """
    if h is None:
        h = g.h
    if h < 1:
        raise GraphError("h must be >= 1")
    n = g.n_atoms
    src, dst, hop = [], [], []
    for i in range(n):
        dist = {i: 0}
        queue = deque([i])
        while queue:
            u = queue.popleft()
            if dist[u] == h:
                continue
            for v in g.neighbors(u):
                if v not in dist:
                    dist[v] = dist[u] + 1
                    queue.append(v)
        for j in sorted(dist):
            if j != i:
                dst.append(i)
                src.append(j)
                hop.append(dist[j])
    return HigherOrderAdjacency(src, dst, hop, n, h)


# ------------------------------------------------------- symmetry detection


@dataclass(frozen=True)
class SymmetryScheme:
    """One swap group: index tuples that may be permuted among themselves.

    Tuples are disjoint, equally long, and element-wise type-identical;
    applying any permutation of the tuples relabels the graph onto itself.
    """

    tuples: tuple

    @property
    def tuple_size(self):
        return len(self.tuples[0])

    @property
    def n_atoms(self):
        return len(self.tuples) * self.tuple_size

    def permutation(self, assignment, n_atoms):
        """Gather-style index array for `new[i] = old[perm[i]]`.

        assignment[a] = b means the atoms of tuple b move into the index
        slots of tuple a.
        """
        perm = np.arange(n_atoms, dtype=np.int64)
        for a, b in enumerate(assignment):
            for slot, atom in zip(self.tuples[a], self.tuples[b]):
                perm[slot] = atom
        return perm


def relabel_is_automorphism(g: MolGraph, perm):
    """True if mapping i -> perm[i] preserves atom types and typed bonds."""
    perm = np.asarray(perm)
    for i, a in enumerate(g.atoms):
        b = g.atoms[perm[i]]
        if a.element != b.element or a.valence != b.valence:
            return False
    bonds = g.bond_set()
    for i, j, o in bonds:
        pi, pj = int(perm[i]), int(perm[j])
        if (min(pi, pj), max(pi, pj), o) not in bonds:
            return False
    return True


def _atom_keys(g: MolGraph, depth=3):
    """WL-style refinement keys: element + incident orders, then neighborhoods."""
    keys = [
        (a.element, tuple(sorted(int(o) for _, o in g.neighbor_bonds(i))))
        for i, a in enumerate(g.atoms)
    ]
    for _ in range(depth):
        keys = [
            (keys[i], tuple(sorted((int(o), keys[j]) for j, o in g.neighbor_bonds(i))))
            for i in range(g.n_atoms)
        ]
    return keys


def _is_tree(g: MolGraph, nodes):
    nodes = set(nodes)
    n_edges = sum(1 for i, j, _ in g.bonds if i in nodes and j in nodes)
    return n_edges == len(nodes) - 1


def _tree_canon(g: MolGraph, keys, root, parent, order_in):
    """AHU canonical form + canonical atom order of a rooted tree branch."""
    children = [(v, o) for v, o in g.neighbor_bonds(root) if v != parent]
    forms = []
    for v, o in children:
        form, atoms = _tree_canon(g, keys, v, root, int(o))
        forms.append((form, atoms))
    forms.sort(key=lambda t: t[0])
    canon = (keys[root], order_in, tuple(f for f, _ in forms))
    atoms = [root]
    for _, sub in forms:
        atoms.extend(sub)
    return canon, atoms


def _branch_groups(g: MolGraph, keys):
    """Symmetric branches hanging off a shared anchor node (one level deep)."""
    groups = []
    for u in range(g.n_atoms):
        comp_of = {}
        for v in g.neighbors(u):
            if v not in comp_of:
                comp = g._component(v, excluded=(u,))
                for w in comp:
                    comp_of.setdefault(w, v)
        by_root = {}
        roots_in_comp = {}
        for v in g.neighbors(u):
            roots_in_comp.setdefault(comp_of[v], []).append(v)
        for v in g.neighbors(u):
            if len(roots_in_comp[comp_of[v]]) > 1:
                continue  # ring through u; handled by ring symmetry
            comp = g._component(v, excluded=(u,))
            if not _is_tree(g, comp):
                continue  # desk-scale limit: cyclic branches not matched here
            form, atoms = _tree_canon(g, keys, v, u, int(g.bond_order(u, v)))
            by_root.setdefault(form, []).append(tuple(atoms))
        for form, tuples in sorted(by_root.items(), key=str):
            if len(tuples) >= 2:
                groups.append(SymmetryScheme(tuple(sorted(tuples))))
    return groups


def _cycle_basis(g: MolGraph):
    """Fundamental cycles (ordered vertex walks) from a BFS spanning tree."""
    parent = {0: None}
    depth = {0: 0}
    order = []
    queue = deque([0])
    tree_edges = set()
    while queue:
        u = queue.popleft()
        order.append(u)
        for v in g.neighbors(u):
            if v not in parent:
                parent[v] = u
                depth[v] = depth[u] + 1
                tree_edges.add((min(u, v), max(u, v)))
                queue.append(v)
    cycles = []
    seen = set()
    for i, j, _ in g.bonds:
        if (i, j) in tree_edges:
            continue
        up_i, up_j = [i], [j]
        a, b = i, j
        while depth[a] > depth[b]:
            a = parent[a]
            up_i.append(a)
        while depth[b] > depth[a]:
            b = parent[b]
            up_j.append(b)
        while a != b:
            a, b = parent[a], parent[b]
            up_i.append(a)
            up_j.append(b)
        walk = up_i + up_j[-2::-1]
        key = frozenset(walk)
        if key not in seen:
            seen.add(key)
            cycles.append(walk)
    return cycles


def _ring_involutions(n):
    """Involutions of the n-cycle: reflections, plus the antipode for even n."""
    out = []
    for axis in range(n):
        out.append({k: (axis - k) % n for k in range(n)})  # reflections (2n axes collapse to n)
        out.append({k: (axis + 1 - k) % n for k in range(n)})
    if n % 2 == 0:
        out.append({k: (k + n // 2) % n for k in range(n)})
    uniq = []
    seen = set()
    for m in out:
        key = tuple(m[k] for k in range(n))
        if key not in seen and any(m[k] != k for k in range(n)):
            seen.add(key)
            uniq.append(m)
    return uniq


def _ring_groups(g: MolGraph, keys):
    """Self-symmetric rings: cycle involutions extended over pendant trees."""
    groups = []
    for walk in _cycle_basis(g):
        n = len(walk)
        ring_set = set(walk)
        pendants = {}  # ring atom -> list of pendant roots
        ok = True
        assigned = {}
        for v in ring_set:
            pendants[v] = []
        for v in walk:
            for w in g.neighbors(v):
                if w in ring_set:
                    continue
                comp = g._component(w, excluded=tuple(ring_set))
                anchors = {x for c in comp for x in g.neighbors(c) if x in ring_set}
                if len(anchors) != 1 or not _is_tree(g, comp):
                    ok = False  # fused/bridged or cyclic pendant: skip this ring
                    break
                if w not in assigned:
                    assigned[w] = v
                    pendants[v].append(w)
            if not ok:
                break
        if not ok:
            continue
        for sigma_ring in _ring_involutions(n):
            mapping = {}
            valid = True
            for k in range(n):
                v, w = walk[k], walk[sigma_ring[k]]
                if keys[v] != keys[w]:
                    valid = False
                    break
                mapping[v] = w
            if not valid:
                continue
            # extend over pendant trees by canonical form
            for k in range(n):
                v, w = walk[k], walk[sigma_ring[k]]
                forms_v = sorted(
                    (_tree_canon(g, keys, r, v, int(g.bond_order(v, r))) for r in pendants[v]),
                    key=lambda t: t[0],
                )
                forms_w = sorted(
                    (_tree_canon(g, keys, r, w, int(g.bond_order(w, r))) for r in pendants[w]),
                    key=lambda t: t[0],
                )
                if [f for f, _ in forms_v] != [f for f, _ in forms_w]:
                    valid = False
                    break
                for (_, atoms_v), (_, atoms_w) in zip(forms_v, forms_w):
                    for a, b in zip(atoms_v, atoms_w):
                        mapping[a] = b
            if not valid:
                continue
            moved = sorted(a for a, b in mapping.items() if a != b)
            if not moved:
                continue
            pairs = []
            done = set()
            involution = True
            for a in moved:
                if a in done:
                    continue
                b = mapping[a]
                if mapping.get(b) != a:
                    involution = False
                    break
                pairs.append((a, b))
                done.update((a, b))
            if not involution or not pairs:
                continue
            ta = tuple(p[0] for p in pairs)
            tb = tuple(p[1] for p in pairs)
            groups.append(SymmetryScheme((ta, tb)))
    return groups


def find_symmetric_substructures(g: MolGraph):
    """Detect swap groups: symmetric branches at anchors plus ring flips.

    Every returned group is verified: each tuple transposition relabels the
    graph onto itself (so the whole symmetric group on the tuples does).
    The result is a (possibly strict) subset of the full automorphism
    group's swap structure; detection is one level deep for branches.
    """
    keys = _atom_keys(g)
    candidates = _branch_groups(g, keys) + _ring_groups(g, keys)
    out = []
    seen = set()
    for scheme in candidates:
        sig = frozenset(scheme.tuples)
        if sig in seen:
            continue
        flat = [a for t in scheme.tuples for a in t]
        if len(set(flat)) != len(flat):
            continue
        if len({len(t) for t in scheme.tuples}) != 1:
            continue
        admissible = True
        for a in range(len(scheme.tuples)):
            for b in range(a + 1, len(scheme.tuples)):
                assignment = list(range(len(scheme.tuples)))
                assignment[a], assignment[b] = b, a
                if not relabel_is_automorphism(g, scheme.permutation(assignment, g.n_atoms)):
                    admissible = False
                    break
            if not admissible:
                break
        if admissible:
            seen.add(sig)
            out.append(scheme)
    out.sort(key=lambda s: (min(a for t in s.tuples for a in t), s.tuples))
    return out
