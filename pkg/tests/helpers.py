"""Shared test fixtures: endpoints, connected QP pairs, ledger accounting."""

from __future__ import annotations

from dataclasses import dataclass

from rdmasim.verbs import ALL_ACCESS, QpState, SimEnv


@dataclass
class Endpoint:
    host: object
    ctx: object
    pd: object
    mr: object
    cq: object
    qp: object


def make_endpoint(env: SimEnv, host=None, mr_bytes: int = 4096, depth: int = 128,
                  cached: bool = False) -> Endpoint:
    host = host if host is not None else env.new_host()
    verbs = host.verbs
    dispatch = host.cached_dispatch() if cached else host.uncached_dispatch()
    ctx = verbs.open_device("dev0", dispatch)
    pd = verbs.alloc_pd(ctx)
    mr = verbs.reg_mr(pd, mr_bytes, ALL_ACCESS)
    cq = verbs.create_cq(ctx, depth)
    qp = verbs.create_qp(pd, cq, depth)
    return Endpoint(host, ctx, pd, mr, cq, qp)


def connect_pair(env: SimEnv, a: Endpoint, b: Endpoint) -> None:
    """Drive both QPs through the full RESET->INIT->RTR->RTS chain."""
    av, bv = a.host.verbs, b.host.verbs
    av.modify_qp(a.qp, QpState.INIT)
    bv.modify_qp(b.qp, QpState.INIT)
    av.modify_qp(a.qp, QpState.RTR, remote_gid=b.qp.local_gid, remote_qpn=b.qp.qpn)
    bv.modify_qp(b.qp, QpState.RTR, remote_gid=a.qp.local_gid, remote_qpn=a.qp.qpn)
    av.modify_qp(a.qp, QpState.RTS)
    bv.modify_qp(b.qp, QpState.RTS)


def connected_pair(env: SimEnv, mr_bytes: int = 4096, depth: int = 128):
    a = make_endpoint(env, mr_bytes=mr_bytes, depth=depth)
    b = make_endpoint(env, mr_bytes=mr_bytes, depth=depth)
    connect_pair(env, a, b)
    return a, b
