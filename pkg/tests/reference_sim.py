"""Plain-python reference for the battery recursion.

A deliberately naive slot-by-slot loop with the same clamp semantics as
the packaged vectorized scan: pinned stretches, exact event-slot clamps,
event time from the unclamped rate, and the initially-stuck rule. Used by
the tests as an independent second route; keep it dumb.
"""

import math


def reference_scan(h, s_tgt, u_tgt, eta, delta, e0, e_max, stop_at_event=True):
    """Returns (s, u, e, n_done, event) as plain lists / tuple.

    event is None or ("empty" | "full", absolute_time_s).
    """
    n = len(h)
    s = [float(v) for v in s_tgt]
    u = [float(v) for v in u_tgt]
    e = [float(e0)]
    bounded = math.isfinite(e_max)
    ek = float(e0)
    event = None
    n_done = n
    for k in range(n):
        st = float(s_tgt[k])
        ut = float(u_tgt[k])
        if st > 0.0 and ut > 0.0:
            raise ValueError("a slot cannot both store and draw")
        net = eta * st - ut
        if ek <= 0.0 and net <= 0.0:
            # Stuck empty: the draw is unavailable, not an event.
            u[k] = 0.0
            ek = 0.0
            e.append(0.0)
            continue
        if bounded and ek >= e_max and net >= 0.0:
            # Stuck full: the store bounces off (a lossless store with
            # eta = 0 changes nothing and is left in place).
            if eta > 0.0 and st > 0.0:
                s[k] = 0.0
            ek = e_max
            e.append(e_max)
            continue
        cand = ek + delta * net
        if cand <= 0.0 and ut > 0.0:
            t_in = min(ek / ut, delta) if ek > 0.0 else 0.0
            u[k] = ek / delta
            if event is None:
                event = ("empty", k * delta + t_in)
            ek = 0.0
            e.append(0.0)
            if stop_at_event:
                n_done = k + 1
                break
        elif bounded and cand >= e_max and eta * st > 0.0:
            inflow = eta * st
            t_in = min((e_max - ek) / inflow, delta) if e_max > ek else 0.0
            s[k] = (e_max - ek) / (eta * delta)
            if event is None:
                event = ("full", k * delta + t_in)
            ek = e_max
            e.append(e_max)
            if stop_at_event:
                n_done = k + 1
                break
        else:
            ek = cand
            e.append(cand)
    return s[:n_done], u[:n_done], e[: n_done + 1], n_done, event


def reference_thresholds(h, eta, delta, e0, e_max, p_u, p_s, stop_at_event=True):
    """Double-threshold targets fed through the reference scan; also
    returns the realized transmit powers."""
    s_tgt = [max(v - p_s, 0.0) for v in h]
    u_tgt = [max(p_u - v, 0.0) for v in h]
    s, u, e, n_done, event = reference_scan(
        h, s_tgt, u_tgt, eta, delta, e0, e_max, stop_at_event
    )
    p = [h[k] - s[k] + u[k] for k in range(n_done)]
    return p, s, u, e, n_done, event
