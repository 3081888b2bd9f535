import threading
import time

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cingal.channels import ChannelEnd, ConnectionManager, Connector, channel_pair
from cingal.errors import AlreadyBound, ChannelClosed, NotBound
from cingal.transport import SimulatedNetwork


def drain(end: ChannelEnd, n: int, timeout: float = 2.0) -> list[str]:
    return [end.read_str(timeout) for _ in range(n)]


# -- connectors --------------------------------------------------------------------


def test_connector_format():
    c = Connector.parse("129.127.8.34-3099-4222")
    assert (c.ip, c.machine_port, c.resource_port) == ("129.127.8.34", 3099, 4222)
    assert str(c) == "129.127.8.34-3099-4222"


def test_connector_with_dashed_host():
    c = Connector.parse("sim://node-1-30000-30001")
    assert c.ip == "sim://node-1" and c.machine_port == 30000


@pytest.mark.parametrize("text", ["", "1.2.3.4", "1.2.3.4-5", "1.2.3.4-x-5", "-1-2", "129.127.8.23-30112--29000"])
def test_connector_rejects_malformed(text):
    with pytest.raises(ValueError):
        Connector.parse(text)


# -- a bound pair ------------------------------------------------------------------


@settings(max_examples=50, deadline=None)
@given(st.lists(st.binary(max_size=64), max_size=40))
def test_pair_is_fifo(messages):
    a, b = channel_pair("t")
    for m in messages:
        a.write(m)
    assert [b.read(2) for _ in messages] == messages
    a.close()
    b.close()


def test_pair_both_directions():
    a, b = channel_pair()
    a.writeString("HelloWorld")
    assert b.getString(2) == "HelloWorld"
    b.write("back")
    assert a.read_str(2) == "back"


def test_close_drains_then_reports_closed():
    a, b = channel_pair()
    a.write("last words")
    a.close()
    assert b.read_str(2) == "last words"
    with pytest.raises(ChannelClosed):
        b.read(2)
    with pytest.raises(ChannelClosed):
        b.write("too late")
    with pytest.raises(ChannelClosed):
        a.write("after close")


def test_read_timeout():
    a, _ = channel_pair()
    with pytest.raises(TimeoutError):
        a.read(0.05)


def test_backpressure_blocks_writer():
    end = ChannelEnd("full", capacity=2)
    end.write("1")
    end.write("2")
    with pytest.raises(TimeoutError):
        end.write("3", timeout=0.05)
    assert end.pending() == 2


def test_unbound_end_keeps_messages_until_attached():
    from cingal.transport import memory_pipe

    end = ChannelEnd("late")
    end.write("early")
    end.close()
    assert end.pending() == 1
    x, y = memory_pipe()
    other = ChannelEnd("other")
    other.attach(y)
    end.attach(x)
    assert other.read_str(2) == "early"
    with pytest.raises(ChannelClosed):
        other.read(2)


# -- connection managers -----------------------------------------------------------


@pytest.fixture
def managers():
    net = SimulatedNetwork()
    made = []

    def make(host, listen_timeout=5.0):
        cm = ConnectionManager(net.add_host(host), host, listen_timeout=listen_timeout)
        made.append(cm)
        return cm

    yield net, make
    for cm in made:
        cm.close()


def wire(listener: ConnectionManager, lname: str, dialer: ConnectionManager, dname: str, host: str):
    port = listener.listen_for_connection(lname)
    assert dialer.connect_to_name(host, port, dname)


def test_abstract_channel_is_created_once(managers):
    _, make = managers
    cm = make("sim://a")
    assert cm.get_abstract_channel("x") is cm.get_abstract_channel("x")
    assert cm.names() == ["x"]
    assert not cm.get_abstract_channel("x").bound


def test_unwired_read_blocks(managers):
    _, make = managers
    end = make("sim://a").get_abstract_channel("in")
    with pytest.raises(TimeoutError):
        end.read(0.1)


def test_listen_then_connect_binds_both_ends(managers):
    _, make = managers
    a, b = make("sim://a"), make("sim://b")
    wire(a, "out", b, "in", "sim://a")
    a.get_abstract_channel("out").write("m1")
    assert b.get_abstract_channel("in").read_str(2) == "m1"
    b.get_abstract_channel("in").write("r1")
    assert a.get_abstract_channel("out").read_str(2) == "r1"


def test_listen_twice_is_already_bound(managers):
    _, make = managers
    a, b = make("sim://a"), make("sim://b")
    a.listen_for_connection("out")
    with pytest.raises(AlreadyBound):
        a.listen_for_connection("out")
    assert a.cancel_listen("out")
    assert not a.cancel_listen("out")
    wire(a, "out", b, "in", "sim://a")
    with pytest.raises(AlreadyBound):
        a.listen_for_connection("out")
    with pytest.raises(AlreadyBound):
        b.connect_to_name("sim://a", 1, "in")


def test_connect_to_closed_port_fails_cleanly(managers):
    _, make = managers
    a, b = make("sim://a"), make("sim://b")
    port = a.listen_for_connection("out")
    a.cancel_listen("out")
    assert not b.connect_to_name("sim://a", port, "in")
    assert not b.get_abstract_channel("in").bound


def test_listener_expires(managers):
    _, make = managers
    a, b = make("sim://a", listen_timeout=0.05), make("sim://b")
    port = a.listen_for_connection("out")
    time.sleep(0.2)
    assert not a.is_pending("out")
    assert not b.connect_to_name("sim://a", port, "in")


def test_one_bind_per_listen_port(managers):
    _, make = managers
    a, b, c = make("sim://a"), make("sim://b"), make("sim://c")
    port = a.listen_for_connection("out")
    assert b.connect_to_name("sim://a", port, "in")
    assert not c.connect_to_name("sim://a", port, "in")
    assert not c.get_abstract_channel("in").bound


def test_buffered_writes_survive_unbind_and_rebind(managers):
    _, make = managers
    a, b, c = make("sim://a"), make("sim://b"), make("sim://c")
    out = a.get_abstract_channel("out")
    for i in range(5):
        out.write(f"m{i}")
    wire(a, "out", b, "in", "sim://a")
    assert drain(b.get_abstract_channel("in"), 3) == ["m0", "m1", "m2"]
    a.unbind("out")
    deadline = time.time() + 2
    while (out.bound or b.get_abstract_channel("in").bound) and time.time() < deadline:
        time.sleep(0.01)
    assert not out.bound
    for i in range(5, 8):
        out.write(f"m{i}")
    # messages already delivered to b stay with b; the rest go to the new peer
    assert drain(b.get_abstract_channel("in"), 2) == ["m3", "m4"]
    wire(a, "out", c, "in", "sim://a")
    assert drain(c.get_abstract_channel("in"), 3) == ["m5", "m6", "m7"]
    with pytest.raises(TimeoutError):
        c.get_abstract_channel("in").read(0.05)


def test_unbind_unknown_channel(managers):
    _, make = managers
    cm = make("sim://a")
    with pytest.raises(NotBound):
        cm.unbind("nope")
    cm.get_abstract_channel("idle")
    with pytest.raises(NotBound):
        cm.unbind("idle")


def test_named_channel_survives_peer_close(managers):
    _, make = managers
    a, b = make("sim://a"), make("sim://b")
    wire(a, "out", b, "in", "sim://a")
    out = a.get_abstract_channel("out")
    b.get_abstract_channel("in").write("bye")
    b.close()
    assert out.read_str(2) == "bye"
    deadline = time.time() + 2
    while out.bound and time.time() < deadline:
        time.sleep(0.01)
    assert not out.bound and not out.closed
    out.write("kept for the next peer")
    assert out.pending() == 1


def test_concurrent_writers_lose_nothing(managers):
    _, make = managers
    a, b = make("sim://a"), make("sim://b")
    wire(a, "out", b, "in", "sim://a")
    out = a.get_abstract_channel("out")

    def writer(k):
        for i in range(50):
            out.write(f"{k}:{i}")

    threads = [threading.Thread(target=writer, args=(k,)) for k in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    got = drain(b.get_abstract_channel("in"), 200)
    assert sorted(got) == sorted(f"{k}:{i}" for k in range(4) for i in range(50))
    for k in range(4):
        mine = [int(m.split(":")[1]) for m in got if m.startswith(f"{k}:")]
        assert mine == sorted(mine)
