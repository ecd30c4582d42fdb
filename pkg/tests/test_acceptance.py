"""Acceptance criteria 1-9.

Each test prints one ``criterion N: PASS|FAIL ...`` line and the session
summary repeats them. Run with ``pytest tests/test_acceptance.py -s`` or
``python tests/test_acceptance.py``.
"""

import json
import math
import random
import time
from pathlib import Path

import pytest

from blockstream import cli
from blockstream.client import ClientConfig, ClientRuntime
from blockstream.latency import LatencyModel
from blockstream.model import (Action, ActionKind, ActionStore, Segment, Trace, dumps_actions, loads_actions,
                               make_action)
from blockstream.predictor import Predictor, PredictorConfig, build_actions
from blockstream.provider import ExecutableImage, segment_variance
from blockstream.server import BlockServer, ServerConfig, VirtualClock
from blockstream.sim import compare_strategies, generate_trace, named_spec, round_trip_formula, simulate
from blockstream.wire import (RequestFrame, ResponseFrame, Status, decode_request, decode_response,
                              encode_request, encode_response)

from reference import reference_responses

pytestmark = pytest.mark.acceptance

RESULTS: dict[int, str] = {}
VECTORS = json.loads((Path(__file__).parent / "vectors" / "golden.json").read_text())


def report(n, ok, detail=""):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'} {detail}".rstrip()
    RESULTS[n] = line
    print(line)
    return ok


def unhex(text):
    return bytes.fromhex(text.replace(" ", ""))


def _server(store, total, name="app", **config):
    image = ExecutableImage.synthetic(name, total)
    return BlockServer({name: image}, store, ServerConfig(**config), clock=VirtualClock())


def _recording(server):
    served = []
    handle = server.handle

    def wrapped(frame):
        out = handle(frame)
        if not frame.end_of_run:
            served.append(out)
        return out

    server.handle = wrapped
    return served


# -- 1 ------------------------------------------------------------------------

def test_criterion_1_figure_scenario():
    start = time.perf_counter()
    fig4 = make_action("app", (1, 3, 8, 9, 11, 12, 14, 15), seg_max=4, id=0)
    store = ActionStore.from_actions([fig4], seg_max=4)
    server = _server(store, 32, seg_max=4)
    served = _recording(server)
    trace = Trace.from_blocks("app", (1, 3, 8, 9, 11, 12, 14, 15))
    with ClientRuntime(ClientConfig(threaded=False), server=server, model=LatencyModel(),
                       pool_background=False) as rt:
        rep = rt.run(trace)
    responses = [tuple(served_one.frame.indices) for served_one in served]
    ok_replay = responses == [(1, 3), (8, 9), (11, 12, 14, 15)] and rep.round_trips == 3
    ok_replay &= sum(r.hit for r in rep.records) == 5

    # divergence: the workload action expects B4 after its first segment
    other = make_action("app", (16, 17, 18, 13, 4, 5, 6, 10), seg_max=4, id=1)
    pred = Predictor(ActionStore.from_actions([fig4, other], seg_max=4), PredictorConfig(seg_max=4))
    tok = b"t" * 16
    steps = [pred.handle_request(tok, "app", b) for b in (16, 18, 11)]
    ok_div = [d.respond_blocks for d in steps] == [(16, 17), (18, 13), (11, 12, 14, 15)]
    ok_div &= steps[2].action_id == 0 and steps[2].segment_index == 1 and "rematch" in steps[2].state_change
    elapsed = time.perf_counter() - start
    ok = ok_replay and ok_div and elapsed < 1.0
    assert report(1, ok, f"responses={responses} rts={rep.round_trips} rematch={steps[2].respond_blocks} "
                         f"t={elapsed:.2f}s")


# -- 2 ------------------------------------------------------------------------

def _stable_trace(n, seed):
    rng = random.Random(seed)
    blocks = rng.sample(range(3 * n), n)
    return Trace.from_blocks("app", blocks), 3 * n


def test_criterion_2_round_trip_formula():
    start = time.perf_counter()
    details, ok = [], True
    for n in (33, 519, 1651):
        trace, total = _stable_trace(n, seed=n)
        server = _server(ActionStore(), total)
        counts = []
        for _ in range(2):
            with ClientRuntime(ClientConfig(threaded=False), server=server, model=LatencyModel(),
                               pool_background=False) as rt:
                counts.append(rt.run(trace).round_trips)
        expected = 2 + (math.ceil(n / 32) - 1)
        ok &= counts == [n, expected] and round_trip_formula(n) == expected
        details.append(f"N={n}:{counts[0]}/{counts[1]} (want {n}/{expected})")
    elapsed = time.perf_counter() - start
    ok &= elapsed < 5.0
    assert report(2, ok, " ".join(details) + f" t={elapsed:.2f}s")


# -- 3 ------------------------------------------------------------------------

def test_criterion_3_strategy_dominance():
    start = time.perf_counter()
    spec = named_spec("openssl")
    assert (spec.total_blocks, spec.needed) == (131, 63)
    rows = {m.strategy: m for m in compare_strategies(generate_trace(spec), LatencyModel(),
                                                      total_blocks=spec.total_blocks)}
    back = {k: rows[k].backing_reads for k in ("full", "nv_async", "norm_var", "none")}
    ordered = back["full"] <= back["nv_async"] <= back["norm_var"] <= back["none"]
    reduction = 1 - rows["nv_async"].mean_us / rows["none"].mean_us
    elapsed = time.perf_counter() - start
    # 60% reduction target, 10 percentage points tolerance
    ok = ordered and reduction >= 0.60 - 0.10 and elapsed < 5.0
    assert report(3, ok, f"backing={back} reduction={reduction:.1%} t={elapsed:.2f}s")


# -- 4 ------------------------------------------------------------------------

def test_criterion_4_nv_async_critical_path():
    start = time.perf_counter()
    ok, checked = True, 0
    for window in (1, 3):
        for name in ("openssl", "python"):
            trace = generate_trace(named_spec(name))
            total = named_spec(name).total_blocks
            store = build_actions([(trace.executable, trace.distinct_blocks())])
            config = ServerConfig(prefetch_strategy="nv_async", prefetch_window=window, variance_threshold=1.0)
            server = BlockServer({trace.executable: ExecutableImage.synthetic(trace.executable, total)},
                                 store, config, clock=VirtualClock())
            served = _recording(server)
            with ClientRuntime(ClientConfig(threaded=False), server=server, model=LatencyModel(),
                               pool_background=False) as rt:
                rt.run(trace)
            assert server.provider.pending() == 0
            for s in served:
                d = s.decision
                if d is not None and d.state_change.startswith("generate") and d.segment_index >= 1:
                    checked += 1
                    ok &= s.sources.count("backing") == 0
    elapsed = time.perf_counter() - start
    ok &= checked > 0 and elapsed < 1.0
    assert report(4, ok, f"generation responses checked={checked} t={elapsed:.2f}s")


# -- 5 ------------------------------------------------------------------------

def test_criterion_5_variance_math():
    # (1,3,8,9) normalizes to (0, 2/8, 7/8, 1): mean 17/32, E[x^2] = 117/256, so variance 179/1024
    hand = 117 / 256 - (17 / 32) ** 2
    v1 = segment_variance((1, 3, 8, 9))
    v32 = segment_variance(tuple(range(100, 132)))
    v0 = segment_variance((7, 7, 7, 7))
    ok = abs(v1 - 0.174805) <= 1e-6 and abs(v1 - hand) <= 1e-12
    ok &= abs(v32 - 33 / 372) <= 1e-9 and v0 == 0.0
    assert report(5, ok, f"var(1,3,8,9)={v1:.6f} var(seq32)={v32:.9f} var(const)={v0}")


# -- 6 ------------------------------------------------------------------------

def _random_name(rng):
    alphabet = "abcdefghijklmnopqrstuvwxyz0123456789._-é"
    return "".join(rng.choice(alphabet) for _ in range(rng.randint(1, 12)))


def _random_store(rng):
    seg_max = rng.randint(2, 40)
    actions, ids = [], {}
    for _ in range(rng.randint(0, 5)):
        exe = rng.choice(["a", "b", _random_name(rng)])
        blocks = [rng.randrange(2 ** 32) for _ in range(rng.randint(1, 3 * seg_max))]
        aid = ids.get(exe, 0)
        ids[exe] = aid + 1
        actions.append(make_action(exe, blocks, kind=rng.choice(list(ActionKind)), id=aid, seg_max=seg_max))
    return ActionStore.from_actions(actions, seg_max=seg_max)


def test_criterion_6_codec_and_store_roundtrips():
    rng = random.Random(6)
    ok = True
    for _ in range(10_000):
        if rng.random() < 0.5:
            frame = RequestFrame(rng.randbytes(16), _random_name(rng), rng.randrange(2 ** 32),
                                 end_of_run=rng.random() < 0.1)
            ok &= decode_request(encode_request(frame)) == frame
        else:
            bs = rng.choice([1, 16, 512])
            blocks = tuple((rng.randrange(2 ** 32), rng.randbytes(bs)) for _ in range(rng.randint(0, 4)))
            status = rng.choice(list(Status)) if not blocks else Status.OK
            frame = ResponseFrame(status, blocks)
            ok &= decode_response(encode_response(frame, bs), bs) == frame
    for _ in range(1_000):
        store = _random_store(rng)
        data = dumps_actions(store)
        back = loads_actions(data)
        ok &= back == store and dumps_actions(back) == data

    golden = 0
    for key, v in VECTORS.items():
        want = unhex(v["hex"])
        if key.startswith("request"):
            frame = RequestFrame(bytes.fromhex(v["token"]), v["executable"], v["block"],
                                 end_of_run=v.get("end_of_run", False))
            ok &= encode_request(frame) == want and decode_request(want) == frame
        elif key.startswith("response"):
            frame = ResponseFrame(Status(v["status"]), tuple((i, bytes.fromhex(p)) for i, p in v["blocks"]))
            ok &= encode_response(frame, v["block_size"]) == want
            ok &= decode_response(want, v["block_size"]) == frame
        else:
            store = ActionStore.from_actions(
                [Action(exe, ActionKind(kind), tuple(Segment(tuple(s)) for s in segs), aid)
                 for exe, kind, aid, segs in v["actions"]], seg_max=v["seg_max"])
            ok &= dumps_actions(store) == want and loads_actions(want) == store
        golden += 1
    ok &= len(unhex(VECTORS["response_ok_empty"]["hex"])) == 8
    assert report(6, ok, f"frames=10000 stores=1000 golden={golden}")


# -- 7 ------------------------------------------------------------------------

def _oracle_case(rng):
    seg_max = rng.randint(2, 6)
    universe = rng.randint(6, 30)
    actions = []
    for aid in range(rng.randint(0, 4)):
        blocks = [rng.randrange(universe) for _ in range(rng.randint(1, 4 * seg_max))]
        actions.append(make_action("x", blocks, id=aid, seg_max=seg_max))
    store = ActionStore.from_actions(actions, seg_max=seg_max)
    requests = []
    while len(requests) < rng.randint(1, 40):
        mode = rng.random()
        if actions and mode < 0.6:
            # follow a stored action for a while, sometimes skipping ahead
            a = rng.choice(actions)
            pos = rng.randrange(len(a.blocks)) if rng.random() < 0.3 else 0
            for b in a.blocks[pos:pos + rng.randint(1, len(a.blocks))]:
                requests.append(b)
        else:
            requests.append(rng.randrange(universe + 5))
    return store, requests


def test_criterion_7_oracle_equivalence():
    rng = random.Random(7)
    mismatches = 0
    for case in range(1_000):
        store, requests = _oracle_case(rng)
        pred = Predictor(store, PredictorConfig(seg_max=store.seg_max))
        tok = case.to_bytes(16, "big")
        got = [pred.handle_request(tok, "x", b).respond_blocks for b in requests]
        want = reference_responses(store.for_executable("x"), requests)
        mismatches += got != want
    assert report(7, mismatches == 0, f"streams=1000 mismatches={mismatches}")


# -- 8 ------------------------------------------------------------------------

def test_criterion_8_packet_loss_knee():
    start = time.perf_counter()
    spec = named_spec("python")
    trace = generate_trace(spec)
    base_model = LatencyModel(loss_sampling="systematic")
    first = simulate(trace, model=base_model, total_blocks=spec.total_blocks, runs=1)
    base = first.metrics.mean_us
    runs = 100
    degr = {}
    for rate in (0.00001, 0.0001, 0.001, 0.01):
        model = LatencyModel(loss_rate=rate, loss_sampling="systematic")
        m = simulate(trace, model=model, store=first.store, total_blocks=spec.total_blocks, runs=runs).metrics
        degr[rate] = m.mean_us / base - 1
    elapsed = time.perf_counter() - start
    ok = all(abs(degr[r]) <= 0.05 for r in (0.00001, 0.0001, 0.001)) and degr[0.01] >= 0.20
    ok &= elapsed < 5.0
    shown = " ".join(f"{r * 100:g}%:{d:+.1%}" for r, d in degr.items())
    assert report(8, ok, f"{shown} t={elapsed:.2f}s")


# -- 9 ------------------------------------------------------------------------

def test_criterion_9_determinism(tmp_path):
    ok = True
    outputs = []
    for spec in ("openssl", "gcc"):
        pair = []
        for n in range(2):
            out = tmp_path / f"{spec}{n}"
            code = cli.main(["bench", "--spec", spec, "--out", str(out), "--set", "lat.seed=11",
                             "--log-level", "error"])
            ok &= code == 0
            pair.append((out / "compare.csv").read_bytes())
        ok &= pair[0] == pair[1] and len(pair[0]) > 0
        outputs.append(len(pair[0]))
    assert report(9, ok, f"specs=openssl,gcc csv_bytes={outputs}")


if __name__ == "__main__":
    import sys
    sys.exit(pytest.main([__file__, "-q", "-s"]))
