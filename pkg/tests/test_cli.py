import os
import re
import signal
import socket
import subprocess
import sys
import time

import pytest

from blockstream import cli
from blockstream.model import ActionStore, dumps_actions, make_action, read_store
from blockstream.provider import write_image


@pytest.fixture
def fig4_file(tmp_path, fig4_store):
    path = tmp_path / "fig4.store"
    path.write_bytes(dumps_actions(fig4_store))
    return path


def run(capsys, *argv):
    code = cli.main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_inspect_fig4(capsys, fig4_file):
    code, out, _ = run(capsys, "actions", "inspect", str(fig4_file))
    assert code == 0
    assert out.strip() == "app workload id=0 segs=[4,4] var=[0.1748,0.1563]"


def test_inspect_empty(capsys, tmp_path):
    path = tmp_path / "empty.store"
    path.write_bytes(dumps_actions(ActionStore()))
    code, out, _ = run(capsys, "actions", "inspect", str(path))
    assert code == 0 and out.strip() == "0 actions"


def test_inspect_truncated(capsys, fig4_file):
    data = fig4_file.read_bytes()
    fig4_file.write_bytes(data[:20])
    code, _, err = run(capsys, "actions", "inspect", str(fig4_file))
    assert code == 2
    assert re.search(r"offset \d+", err)


def test_actions_build(capsys, tmp_path):
    trace = tmp_path / "t.trace"
    trace.write_text("".join(f"tool {b}\n" for b in [5, 6, 5, 9]))
    out_store = tmp_path / "built.store"
    code, out, _ = run(capsys, "actions", "build", "--out", str(out_store), "--kind", "startup", str(trace))
    assert code == 0
    store = read_store(out_store)
    assert store.get("tool", 0).blocks == (5, 6, 9)
    assert out.startswith("tool startup id=0 segs=[3]")


def test_bench_is_deterministic(capsys, tmp_path):
    _, first, _ = run(capsys, "bench", "--spec", "gcc", "--set", "lat.seed=5")
    _, second, _ = run(capsys, "bench", "--spec", "gcc", "--set", "lat.seed=5")
    assert first == second and first.startswith("strategy,T,N,P")
    assert len(first.splitlines()) == 6


def test_bench_trace_file(capsys, tmp_path):
    trace = tmp_path / "t.trace"
    trace.write_text("".join(f"app {b}\n" for b in range(0, 80, 2)))
    code, out, _ = run(capsys, "bench", "--trace", str(trace), "--total-blocks", "100")
    assert code == 0 and out.splitlines()[1].startswith("none,100,40,")


@pytest.mark.parametrize("argv", [
    ["bench", "--spec", "emacs"],
    ["bench"],
    ["bench", "--spec", "gcc", "--set", "colour=blue"],
    ["bench", "--spec", "gcc", "--set", "seg_max=abc"],
    ["serve", "--images", ".", "--listen", "nonsense"],
    ["serve", "--images", "/no/such/dir", "--listen", "127.0.0.1:0"],
    ["frobnicate"],
])
def test_usage_errors_exit_2(capsys, argv):
    assert run(capsys, *argv)[0] == 2


def test_config_file(capsys, tmp_path):
    cfg = tmp_path / "bs.conf"
    cfg.write_text("# comment\nlat.seed = 9\nprefetch_window=2\n")
    code, out, _ = run(capsys, "bench", "--spec", "openssl", "--config", str(cfg))
    assert code == 0
    cfg.write_text("what = 1\n")
    assert run(capsys, "bench", "--spec", "openssl", "--config", str(cfg))[0] == 2


def _free_port():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def test_replay_unreachable_exit_3(capsys, tmp_path):
    trace = tmp_path / "t.trace"
    trace.write_text("app 1\n")
    code, _, err = run(capsys, "replay", str(trace), "--server", f"127.0.0.1:{_free_port()}")
    assert code == 3 and "error" in err


def _start_server(tmp_path, store_path):
    env = dict(os.environ, PYTHONUNBUFFERED="1")
    proc = subprocess.Popen([sys.executable, "-m", "blockstream", "serve", "--images", str(tmp_path / "images"),
                             "--store", str(store_path), "--listen", "127.0.0.1:0",
                             "--set", "seg_max=4"],
                            stderr=subprocess.PIPE, text=True, env=env)
    deadline = time.monotonic() + 20
    while time.monotonic() < deadline:
        line = proc.stderr.readline()
        m = re.search(r"listening addr=(\S+):(\d+)", line)
        if m:
            return proc, f"{m.group(1)}:{m.group(2)}"
        if not line and proc.poll() is not None:
            break
    proc.kill()
    raise AssertionError("server did not start")


def _stop_server(proc):
    proc.send_signal(signal.SIGTERM)
    try:
        rest = proc.communicate(timeout=20)[1]
    except subprocess.TimeoutExpired:
        proc.kill()
        raise
    return proc.returncode, rest


def test_serve_construct_replay_and_persist(capsys, tmp_path):
    (tmp_path / "images").mkdir()
    write_image(tmp_path / "images", "app", 32)
    store_path = tmp_path / "actions.store"
    trace = tmp_path / "t.trace"
    trace.write_text("".join(f"app {b} 0\n" for b in (1, 3, 8, 9, 11, 12, 14, 15)))

    proc, addr = _start_server(tmp_path, store_path)
    try:
        code, out, _ = run(capsys, "replay", str(trace), "--server", addr)
        assert code == 0
        assert "round_trips=8" in out.splitlines()[-1]
        # second replay finds the constructed action
        code, out, _ = run(capsys, "replay", str(trace), "--server", addr)
        assert code == 0 and "round_trips=3" in out.splitlines()[-1]
        assert out.splitlines()[0] == "seq,block,hit,round_trip,latency_us"
    finally:
        status, log_text = _stop_server(proc)
    assert status == 0
    assert "saved action store" in log_text
    store = read_store(store_path)
    assert [a.blocks for a in store] == [(1, 3, 8, 9, 11, 12, 14, 15)]


def test_serve_with_fig4_store_two_round_trips(capsys, tmp_path):
    (tmp_path / "images").mkdir()
    write_image(tmp_path / "images", "app", 32)
    store_path = tmp_path / "fig4.store"
    store_path.write_bytes(dumps_actions(ActionStore.from_actions(
        [make_action("app", (1, 3, 8, 9, 11, 12, 14, 15), seg_max=4)], seg_max=4)))
    trace = tmp_path / "t.trace"
    trace.write_text("app 1\napp 3\napp 8\napp 9\n")
    proc, addr = _start_server(tmp_path, store_path)
    try:
        code, out, _ = run(capsys, "replay", str(trace), "--server", addr)
    finally:
        _stop_server(proc)
    assert code == 0 and "round_trips=2" in out.splitlines()[-1]
    assert len(read_store(store_path)) == 1


def test_atomic_store_write_keeps_previous_on_failure(tmp_path, fig4_store, monkeypatch):
    path = tmp_path / "s.store"
    cli.write_store_atomic(fig4_store, path)
    before = path.read_bytes()

    def boom(*a, **k):
        raise OSError("disk full")

    monkeypatch.setattr(os, "replace", boom)
    with pytest.raises(OSError):
        cli.write_store_atomic(ActionStore(), path)
    assert path.read_bytes() == before
    assert [p.name for p in tmp_path.iterdir()] == ["s.store"]
