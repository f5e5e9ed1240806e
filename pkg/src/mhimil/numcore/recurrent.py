"""Fused LSTM recurrence with hand-written backpropagation through time."""

import numpy as np

from ..errors import EmptyBagError, ShapeError
from .tensor import as_tensor, make_node


def lstm_scan(x, w_input, w_hidden, bias):
    """Run independent LSTM stacks over right-padded sequences.

    Shapes, with ``S`` independent stacks (e.g. two directions), batch ``B``,
    length ``T``, input width ``D`` and hidden width ``H``::

        x         (S, B, T, D)
        w_input   (S, D, 4H)
        w_hidden  (S, H, 4H)
        bias      (S, 4H)
        returns   (S, B, T, H)

    Gate blocks along the ``4H`` axis are ordered input, forget, cell, output.
    States start at zero.  Padding must sit at the end of each sequence so it
    never influences earlier positions.
    """
    x, w_input, w_hidden, bias = (as_tensor(t) for t in (x, w_input, w_hidden, bias))
    if x.ndim != 4:
        raise ShapeError("lstm_scan expects x of rank 4", x.shape)
    S, B, T, D = x.shape
    if T == 0:
        raise EmptyBagError("lstm_scan over an empty sequence")
    H = w_hidden.shape[1]
    if w_input.shape != (S, D, 4 * H):
        raise ShapeError("lstm_scan input weights", w_input.shape, (S, D, 4 * H))
    if w_hidden.shape != (S, H, 4 * H) or bias.shape != (S, 4 * H):
        raise ShapeError("lstm_scan hidden weights/bias", w_hidden.shape, bias.shape)

    wh = w_hidden.data
    # time-major so each step reads one contiguous slab
    pre = np.matmul(x.data, w_input.data[:, None]) + bias.data[:, None, None, :]
    pre = np.ascontiguousarray(pre.transpose(2, 0, 1, 3))
    gates = np.empty((T, S, B, 4 * H))
    cells = np.empty((T, S, B, H))
    tanh_cells = np.empty((T, S, B, H))
    hs = np.empty((T, S, B, H))
    h = np.zeros((S, B, H))
    c = np.zeros((S, B, H))
    z = np.empty((S, B, 4 * H))
    ig = np.empty((S, B, H))
    for t in range(T):
        np.matmul(h, wh, out=z)
        np.add(pre[t], z, out=z)
        gt = gates[t]
        # sigmoid(z) = (1 + tanh(z/2)) / 2 on every block, then overwrite the cell block
        np.multiply(z, 0.5, out=gt)
        np.tanh(gt, out=gt)
        gt += 1.0
        gt *= 0.5
        np.tanh(z[..., 2 * H : 3 * H], out=gt[..., 2 * H : 3 * H])
        np.multiply(gt[..., :H], gt[..., 2 * H : 3 * H], out=ig)
        c = np.multiply(gt[..., H : 2 * H], c, out=cells[t])
        c += ig
        tc = np.tanh(c, out=tanh_cells[t])
        h = np.multiply(gt[..., 3 * H :], tc, out=hs[t])
    out = np.ascontiguousarray(hs.transpose(1, 2, 0, 3))

    def _back(g_out):
        g_out = np.ascontiguousarray(g_out.transpose(2, 0, 1, 3))
        d_pre = np.empty((T, S, B, 4 * H))
        dh_next = np.zeros((S, B, H))
        dc_next = np.zeros((S, B, H))
        wh_t = np.swapaxes(wh, 1, 2)
        # step-independent factors, computed once for every step
        one_minus = 1.0 - gates
        gc_all = gates[..., 2 * H : 3 * H]
        one_minus[..., 2 * H : 3 * H] = 1.0 - gc_all * gc_all
        one_minus_tc2 = 1.0 - tanh_cells * tanh_cells
        dh = np.empty((S, B, H))
        dc = np.empty((S, B, H))
        for t in range(T - 1, -1, -1):
            gt = gates[t]
            om = one_minus[t]
            i, f, gc, o = gt[..., :H], gt[..., H : 2 * H], gt[..., 2 * H : 3 * H], gt[..., 3 * H :]
            np.add(g_out[t], dh_next, out=dh)
            np.multiply(dh, o, out=dc)
            dc *= one_minus_tc2[t]
            dc += dc_next
            dz = d_pre[t]
            dzi, dzf, dzg, dzo = dz[..., :H], dz[..., H : 2 * H], dz[..., 2 * H : 3 * H], dz[..., 3 * H :]
            np.multiply(dc, gc, out=dzi)
            dzi *= i
            dzi *= om[..., :H]
            if t > 0:
                np.multiply(dc, cells[t - 1], out=dzf)
                dzf *= f
                dzf *= om[..., H : 2 * H]
            else:
                dzf[...] = 0.0
            np.multiply(dc, i, out=dzg)
            dzg *= om[..., 2 * H : 3 * H]
            np.multiply(dh, tanh_cells[t], out=dzo)
            dzo *= o
            dzo *= om[..., 3 * H :]
            dc_next = dc * f
            dh_next = np.matmul(dz, wh_t)
        d_wh = np.zeros_like(wh)
        if T > 1:
            # sum over t of h_{t-1}^T dz_t as one product
            h_prev = hs[:-1].transpose(1, 3, 0, 2).reshape(S, H, (T - 1) * B)
            d_wh = np.matmul(h_prev, d_pre[1:].transpose(1, 0, 2, 3).reshape(S, (T - 1) * B, 4 * H))
        d_pre = d_pre.transpose(1, 2, 0, 3)
        d_x = np.matmul(d_pre, np.swapaxes(w_input.data, 1, 2)[:, None])
        d_wi = np.matmul(
            np.swapaxes(x.data.reshape(S, B * T, D), 1, 2), d_pre.reshape(S, B * T, 4 * H)
        )
        d_b = d_pre.sum(axis=(1, 2))
        return d_x, d_wi, d_wh, d_b

    return make_node(out, (x, w_input, w_hidden, bias), _back)
