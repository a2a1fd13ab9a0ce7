"""Tape-based reverse-mode differentiation over the kernel primitives.

A `Tape` records each primitive forward call (node = op, input ids,
saved activations, output).  `backward` seeds caller-chosen weights on
recorded scalar outputs (`select` nodes) and plays the ops in reverse,
returning exact gradients for the requested leaf nodes.  `set_leaf` plus
`replay` recompute the recorded graph for new leaf values without
rebuilding it, which is what the attack loops lean on: the graph
structure is fixed within an optimization stage while the noise leaf
changes every step.
"""

import numpy as np

from ..errors import ContractError, DimensionError, InputError
from . import kernels as K

LEAF = 0
DENSE = 1
TANH = 2
ADD = 3
EMBED = 4
GRU = 5
LOGSOFTMAX = 6
SELECT = 7

# gru args layout: (x, h, wr, ur, br, wz, uz, bz, wn, un, bn)


class Tape:
    def __init__(self):
        self._ops = []
        self._args = []  # tuple of input node ids
        self._aux = []   # op-specific saved values (gru gates, indices)
        self._vals = []  # node outputs; ndarray, or float for SELECT
        self._relevance_cache = {}

    def __len__(self):
        return len(self._ops)

    def value(self, nid):
        return self._vals[nid]

    def _push(self, op, args, aux, val):
        self._ops.append(op)
        self._args.append(args)
        self._aux.append(aux)
        self._vals.append(val)
        return len(self._ops) - 1

    # ---- recording ----

    def leaf(self, arr):
        arr = np.ascontiguousarray(arr, dtype=np.float64)
        return self._push(LEAF, (), None, arr)

    def dense(self, wid, xid, bid):
        v = self._vals
        return self._push(DENSE, (wid, xid, bid), None, K.dense_fwd(v[wid], v[xid], v[bid]))

    def tanh(self, xid):
        return self._push(TANH, (xid,), None, K.tanh_fwd(self._vals[xid]))

    def add(self, aid, bid):
        va, vb = self._vals[aid], self._vals[bid]
        if va.shape != vb.shape:
            raise DimensionError("add shape mismatch: %r vs %r" % (va.shape, vb.shape))
        return self._push(ADD, (aid, bid), None, va + vb)

    def embed(self, tid, index):
        table = self._vals[tid]
        index = int(index)
        if table.ndim != 2 or not 0 <= index < table.shape[0]:
            raise InputError("embed index %d out of range for table %r" % (index, table.shape))
        return self._push(EMBED, (tid,), index, table[index].copy())

    def gru(self, xid, hid, param_ids):
        # param_ids: (wr, ur, br, wz, uz, bz, wn, un, bn) node ids
        if len(param_ids) != 9:
            raise ContractError("gru expects 9 parameter node ids")
        v = self._vals
        p = param_ids
        h2, r, z, c = K.gru_fwd(
            v[xid], v[hid],
            v[p[0]], v[p[1]], v[p[2]],
            v[p[3]], v[p[4]], v[p[5]],
            v[p[6]], v[p[7]], v[p[8]],
        )
        return self._push(GRU, (xid, hid) + tuple(p), (r, z, c), h2)

    def log_softmax(self, zid):
        return self._push(LOGSOFTMAX, (zid,), None, K.log_softmax_fwd(self._vals[zid]))

    def select(self, vid, index):
        vec = self._vals[vid]
        index = int(index)
        if vec.ndim != 1 or not 0 <= index < vec.shape[0]:
            raise InputError("select index %d out of range for %r" % (index, vec.shape))
        return self._push(SELECT, (vid,), index, float(vec[index]))

    # ---- re-execution ----

    def set_leaf(self, nid, arr):
        if self._ops[nid] != LEAF:
            raise ContractError("set_leaf on non-leaf node %d" % nid)
        arr = np.ascontiguousarray(arr, dtype=np.float64)
        if arr.shape != self._vals[nid].shape:
            raise DimensionError(
                "leaf %d shape %r cannot change to %r" % (nid, self._vals[nid].shape, arr.shape)
            )
        self._vals[nid] = arr

    def replay(self):
        """Recompute every non-leaf value in recording order.

        Uses the same kernels in the same order as recording, so for
        unchanged leaves the results are bit-identical.
        """
        v = self._vals
        ops = self._ops
        args = self._args
        aux = self._aux
        for i in range(len(ops)):
            op = ops[i]
            if op == LEAF:
                continue
            a = args[i]
            if op == GRU:
                h2, r, z, c = K.gru_fwd(
                    v[a[0]], v[a[1]], v[a[2]], v[a[3]], v[a[4]], v[a[5]],
                    v[a[6]], v[a[7]], v[a[8]], v[a[9]], v[a[10]],
                )
                aux[i] = (r, z, c)
                v[i] = h2
            elif op == DENSE:
                v[i] = K.dense_fwd(v[a[0]], v[a[1]], v[a[2]])
            elif op == LOGSOFTMAX:
                v[i] = K.log_softmax_fwd(v[a[0]])
            elif op == SELECT:
                v[i] = float(v[a[0]][aux[i]])
            elif op == EMBED:
                v[i] = v[a[0]][aux[i]].copy()
            elif op == ADD:
                v[i] = v[a[0]] + v[a[1]]
            elif op == TANH:
                v[i] = K.tanh_fwd(v[a[0]])
            else:  # pragma: no cover
                raise AssertionError("unknown op %d" % op)

    # ---- differentiation ----

    def _relevance(self, wrt):
        """Bytearray marking nodes that transitively depend on any leaf
        in `wrt`; backward skips everything else."""
        key = tuple(wrt)
        n = len(self._ops)
        cached = self._relevance_cache.get(key)
        if cached is not None and len(cached) == n:
            return cached
        rel = bytearray(n)
        for nid in wrt:
            if not 0 <= nid < n or self._ops[nid] != LEAF:
                raise ContractError("gradients are only defined w.r.t. leaf nodes, got %r" % (nid,))
            rel[nid] = 1
        args = self._args
        for i in range(n):
            if rel[i]:
                continue
            for a in args[i]:
                if rel[a]:
                    rel[i] = 1
                    break
        self._relevance_cache[key] = rel
        return rel

    @staticmethod
    def _acc(adj, i, g):
        cur = adj[i]
        if cur is None:
            adj[i] = g
        else:
            cur += g

    def backward(self, weights, wrt):
        """Reverse pass.

        weights: mapping {select node id: scalar weight}; the implied
        objective is sum(weight * select_value).
        wrt: leaf node ids to differentiate with respect to.
        Returns {leaf id: gradient array} (zeros when disconnected).
        """
        n = len(self._ops)
        ops = self._ops
        args = self._args
        aux = self._aux
        v = self._vals
        rel = self._relevance(wrt)
        adj = [None] * n

        for sid, w in weights.items():
            if not 0 <= sid < n or ops[sid] != SELECT:
                raise ContractError(
                    "weight attached to node %r which is not a recorded scalar output" % (sid,)
                )
            vid = args[sid][0]
            if not rel[vid]:
                continue
            if adj[vid] is None:
                adj[vid] = np.zeros_like(v[vid])
            adj[vid][aux[sid]] += w

        for i in range(n - 1, -1, -1):
            g = adj[i]
            if g is None:
                continue
            op = ops[i]
            if op == LEAF:
                continue
            a = args[i]
            if op == GRU:
                xid, hid = a[0], a[1]
                pids = a[2:]
                need_w = False
                for p in pids:
                    if rel[p]:
                        need_w = True
                        break
                r, z, c = aux[i]
                gx, gh, pg = K.gru_bwd(
                    v[xid], v[hid], r, z, c,
                    v[pids[0]], v[pids[1]], v[pids[3]], v[pids[4]], v[pids[6]], v[pids[7]],
                    g, bool(rel[xid]), bool(rel[hid]), need_w,
                )
                if gx is not None:
                    self._acc(adj, xid, gx)
                if gh is not None:
                    self._acc(adj, hid, gh)
                if pg is not None:
                    for pid, gp in zip(pids, pg):
                        if rel[pid]:
                            self._acc(adj, pid, gp)
            elif op == DENSE:
                wid, xid, bid = a
                gw, gx = K.dense_bwd(v[wid], v[xid], g, bool(rel[wid]), bool(rel[xid]))
                if gw is not None:
                    self._acc(adj, wid, gw)
                if gx is not None:
                    self._acc(adj, xid, gx)
                if rel[bid]:
                    self._acc(adj, bid, g.copy())
            elif op == LOGSOFTMAX:
                if rel[a[0]]:
                    self._acc(adj, a[0], K.log_softmax_bwd(v[i], g))
            elif op == EMBED:
                tid = a[0]
                if rel[tid]:
                    if adj[tid] is None:
                        adj[tid] = np.zeros_like(v[tid])
                    adj[tid][aux[i]] += g
            elif op == ADD:
                first = rel[a[0]]
                if first:
                    self._acc(adj, a[0], g)
                if rel[a[1]]:
                    self._acc(adj, a[1], g.copy() if first else g)
            elif op == TANH:
                if rel[a[0]]:
                    self._acc(adj, a[0], K.tanh_bwd(v[i], g))
            else:  # pragma: no cover
                raise AssertionError("op %d cannot receive an adjoint" % op)

        out = {}
        for nid in wrt:
            g = adj[nid]
            out[nid] = g if g is not None else np.zeros_like(v[nid])
        return out
