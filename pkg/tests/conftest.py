import pytest

from cingal.bundle import SIGNATURE_SCHEME, entity_id, generate_keypair, sign_bundle
from cingal.machine import Node
from cingal.node_state import ALL_RIGHTS, NodeState
from cingal.transport import SimulatedNetwork


class MiniNet:
    """A simulated network with nodes trusting one client identity."""

    def __init__(self, rights=ALL_RIGHTS, listen_timeout=5.0):
        self.network = SimulatedNetwork()
        self.owner_key, self.owner_cert = generate_keypair()
        self.key, self.cert = generate_keypair()
        self.entity = entity_id(self.cert)
        self.rights = rights
        self.listen_timeout = listen_timeout
        self.nodes = []
        self.client = self.network.add_host("sim://client")

    def add_node(self, rights=None) -> Node:
        k = len(self.nodes) + 1
        state = NodeState.with_owner(self.owner_cert)
        state.ver_put(state.owner, self.cert, SIGNATURE_SCHEME, "client",
                      self.rights if rights is None else rights)
        node = Node(f"node-{k}", self.network.add_host(f"sim://node-{k}"), state,
                    listen_timeout=self.listen_timeout).start()
        self.nodes.append(node)
        return node

    def sign(self, bundle):
        return sign_bundle(self.key, bundle)

    def close(self):
        for node in self.nodes:
            node.shutdown()


@pytest.fixture
def mininet():
    net = MiniNet()
    yield net
    net.close()


@pytest.fixture(scope="session")
def keypair():
    return generate_keypair()


ACCEPTANCE_KEY = pytest.StashKey[list]()


@pytest.fixture
def verdicts(request):
    """Collects the one-line PASS/FAIL verdicts printed after the run."""
    return request.config.stash.setdefault(ACCEPTANCE_KEY, [])


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
