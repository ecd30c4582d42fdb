import pytest

from blockstream.model import ActionKind, ActionStore, make_action
from blockstream.provider import ExecutableImage
from blockstream.server import BlockServer, ServerConfig, VirtualClock

FIG4_BLOCKS = (1, 3, 8, 9, 11, 12, 14, 15)
# second action used for the divergence case: after its first segment the
# predictor expects B4 next
WORKLOAD_BLOCKS = (16, 17, 18, 13, 4, 5, 6, 10)


@pytest.fixture
def fig4_store():
    return ActionStore.from_actions([make_action("app", FIG4_BLOCKS, seg_max=4)], seg_max=4)


@pytest.fixture
def two_action_store():
    return ActionStore.from_actions([
        make_action("app", FIG4_BLOCKS, seg_max=4, id=0),
        make_action("app", WORKLOAD_BLOCKS, seg_max=4, id=1, kind=ActionKind.WORKLOAD),
    ], seg_max=4)


@pytest.fixture
def make_server():
    def build(store=None, total_blocks=32, name="app", **config):
        config.setdefault("seg_max", store.seg_max if store is not None else 32)
        image = ExecutableImage.synthetic(name, total_blocks, config.get("block_size", 4096))
        return BlockServer({name: image}, store, ServerConfig(**config), clock=VirtualClock(),
                           record_requests=True)
    return build


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])
