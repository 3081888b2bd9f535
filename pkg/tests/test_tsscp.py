import socket
import time

import pytest

from cingal import frames
from cingal.bundle import Datum, builtin_bundle, generate_keypair, script_bundle, sign_bundle
from cingal.channels import Connector
from cingal.errors import (
    AlreadyBound,
    BadSignature,
    ChannelClosed,
    HostUnreachable,
    ProtocolError,
    UnknownEntity,
    UnknownResource,
    Unsigned,
)
from cingal.machine import Node
from cingal.node_state import NodeState
from cingal.harness import decode_trace
from cingal.transport import TcpConnection, TcpTransport
from cingal.tsscp import client_machine_request, client_resource_connect, client_send_fire, split_address

HELLO = script_bundle("write_default HelloWorld\n", entry="MobileCode")


# -- codec -------------------------------------------------------------------------


def test_golden_reply_frame():
    frame = frames.Frame(frames.FIRE_REPLY, 7, {"connector": "10.0.0.1-3099-4222"})
    assert frame.encode() == (
        b'\x01<TSSCP cid="7" type="FIRE_REPLY"><field name="connector">10.0.0.1-3099-4222</field></TSSCP>'
    )


def test_golden_request_with_sorted_fields():
    frame = frames.Frame(frames.CHANNEL_CONNECT, 12, {"port": "30008", "name": "in", "host": "10.0.0.2"})
    assert frame.encode() == (
        b'\x01<TSSCP cid="12" type="CHANNEL_CONNECT"><field name="host">10.0.0.2</field>'
        b'<field name="name">in</field><field name="port">30008</field></TSSCP>'
    )


def test_golden_error_frame():
    frame = frames.error_frame(3, Unsigned("bundle is not signed"))
    assert frame.encode() == (
        b'\x01<TSSCP cid="3" type="ERROR"><field name="code">401</field><field name="error">Unsigned</field>'
        b'<field name="message">bundle is not signed</field></TSSCP>'
    )


def test_golden_fire_frame_embeds_bundle():
    bundle = builtin_bundle("cingal.tool.echo")
    encoded = frames.Frame(frames.FIRE, 1, {}, bundle).encode()
    assert encoded == (
        b'\x01<TSSCP cid="1" type="FIRE"><BUNDLE><CODE entry="cingal.tool.echo" type="builtin">'
        b'<Class name="cingal.tool.echo"/></CODE><DATA/></BUNDLE></TSSCP>'
    )
    assert frames.decode_frame(encoded).bundle == bundle


def test_golden_tcp_length_prefix():
    a, b = socket.socketpair()
    try:
        TcpConnection(a, "x", "y").send(b"\x10abc")
        assert b.recv(64) == b"\x00\x00\x00\x04\x10abc"
    finally:
        a.close()
        b.close()


def test_frame_round_trip_and_escaping():
    frame = frames.request(frames.CHANNEL_LISTEN, name='a<b>&"c"')
    again = frames.decode_frame(frame.encode())
    assert again == frame


@pytest.mark.parametrize(
    "payload",
    [b"", b"\x10data", b"\x01<nope/>", b'\x01<TSSCP cid="x" type="FIRE"/>', b'\x01<TSSCP cid="1" type="DANCE"/>'],
)
def test_bad_frames_rejected(payload):
    with pytest.raises(ProtocolError):
        frames.decode_frame(payload)


def test_remote_error_is_typed():
    err = frames.error_frame(5, AlreadyBound("taken"))
    with pytest.raises(AlreadyBound) as info:
        frames.raise_for_error(err)
    assert info.value.code == 409


def test_split_address():
    assert split_address("10.0.0.1") == ("10.0.0.1", 2999)
    assert split_address("10.0.0.1:4000") == ("10.0.0.1", 4000)
    assert split_address("sim://node-1") == ("sim://node-1", 2999)
    assert split_address("sim://node-1:31") == ("sim://node-1", 31)


# -- the listener over the simulated network -----------------------------------------


def test_fire_round_trip(mininet):
    node = mininet.add_node()
    handle = client_send_fire(mininet.client, node.address, mininet.sign(HELLO))
    assert handle.getResourceChannel().getString(5) == "HelloWorld"
    assert handle.connector.ip == node.host
    with pytest.raises(ChannelClosed):
        handle.channel.read(5)


def test_fire_unsigned_is_401(mininet):
    node = mininet.add_node()
    with pytest.raises(Unsigned) as info:
        client_send_fire(mininet.client, node.address, HELLO)
    assert info.value.code == 401
    assert node.machines() == []


def test_fire_unknown_entity_is_402(mininet):
    node = mininet.add_node()
    stranger, _ = generate_keypair()
    with pytest.raises(UnknownEntity) as info:
        client_send_fire(mininet.client, node.address, sign_bundle(stranger, HELLO))
    assert info.value.code == 402
    assert node.machines() == []


def test_fire_forged_signature_rejected(mininet):
    node = mininet.add_node()
    stranger, _ = generate_keypair()
    forged = sign_bundle(stranger, HELLO, entity=mininet.entity)
    with pytest.raises(BadSignature):
        client_send_fire(mininet.client, node.address, forged)
    assert node.machines() == []


def test_fire_to_dead_host(mininet):
    with pytest.raises(HostUnreachable):
        client_send_fire(mininet.client, "sim://nowhere", mininet.sign(HELLO))
    node = mininet.add_node()
    with pytest.raises(HostUnreachable):
        client_send_fire(mininet.client, f"{node.host}:1", mininet.sign(HELLO))


def test_every_fire_passes_verification(mininet, monkeypatch):
    node = mininet.add_node()
    verified = []
    real_verify, real_spawn = node.state.ver_verify, node.spawn

    def verify(bundle):
        entity = real_verify(bundle)
        verified.append(bundle.guid)
        return entity

    def spawn(bundle, entity):
        assert bundle.guid in verified
        return real_spawn(bundle, entity)

    monkeypatch.setattr(node.state, "ver_verify", verify)
    monkeypatch.setattr(node, "spawn", spawn)
    client_send_fire(mininet.client, node.address, mininet.sign(HELLO)).channel.read(5)
    for bad in (HELLO, sign_bundle(generate_keypair()[0], HELLO)):
        with pytest.raises((Unsigned, UnknownEntity)):
            client_send_fire(mininet.client, node.address, bad)
    assert len(node.machines()) == 1


def test_resource_connect_unknown(mininet):
    node = mininet.add_node()
    with pytest.raises(UnknownResource) as info:
        client_resource_connect(mininet.client, node.address, "nothing-here")
    assert info.value.code == 404


def test_resource_connect_named_machine(mininet):
    node = mininet.add_node()
    server = script_bundle(
        "resource greeter\naccept $c\nrecv $c $who\nconcat $msg \"hello, \" $who\nsend $c $msg\nread_default $x\n"
    )
    client_send_fire(mininet.client, node.address, mininet.sign(server))
    for _ in range(100):
        try:
            handle = client_resource_connect(mininet.client, node.address, "greeter")
            break
        except UnknownResource:
            time.sleep(0.01)
    handle.channel.write("bob")
    assert handle.channel.read_str(5) == "hello, bob"


def test_machine_requests(mininet):
    node = mininet.add_node()
    idle = script_bundle("channel in\nread_default $x\n")
    handle = client_send_fire(mininet.client, node.address, mininet.sign(idle))
    reply = client_machine_request(mininet.client, handle.connector, frames.request(frames.CHANNEL_LISTEN, name="in"))
    assert int(reply.get("port")) > 0
    with pytest.raises(AlreadyBound) as info:
        client_machine_request(mininet.client, handle.connector, frames.request(frames.CHANNEL_LISTEN, name="in"))
    assert info.value.code == 409
    cancel = client_machine_request(mininet.client, handle.connector, frames.request(frames.CHANNEL_CANCEL, name="in"))
    assert cancel.get("ok") == "TRUE"
    with pytest.raises(ProtocolError):
        client_machine_request(mininet.client, handle.connector, frames.request(frames.FIRE))


def test_standard_port_rejects_channel_requests(mininet):
    node = mininet.add_node()
    conn = mininet.client.connect(node.host, node.standard_port)
    try:
        with pytest.raises(ProtocolError):
            frames.exchange(conn, frames.request(frames.CHANNEL_LISTEN, name="x"), 5)
    finally:
        conn.close()


def test_requests_pair_with_replies(mininet):
    node = mininet.add_node()
    client_send_fire(mininet.client, node.address, mininet.sign(HELLO)).channel.read(5)
    with pytest.raises(Unsigned):
        client_send_fire(mininet.client, node.address, HELLO)
    with pytest.raises(UnknownResource):
        client_resource_connect(mininet.client, node.address, "x")
    seen = [t.frame for t in decode_trace(mininet.network.trace) if t.frame is not None]
    requests = {f.cid: f for f in seen if f.type in frames.REPLIES}
    replies = {}
    for f in seen:
        if f.type not in frames.REPLIES:
            assert f.cid not in replies
            replies[f.cid] = f
    assert set(requests) == set(replies)
    for cid, req in requests.items():
        assert replies[cid].type in (frames.REPLIES[req.type], frames.ERROR)


# -- real sockets --------------------------------------------------------------------


@pytest.fixture
def tcp_node():
    owner, owner_cert = generate_keypair()
    node = Node("tcp-1", TcpTransport("127.0.0.1"), NodeState.with_owner(owner_cert), standard_port=0).start()
    yield node, owner
    node.shutdown()


def test_tcp_fire_round_trip(tcp_node):
    node, owner = tcp_node
    handle = client_send_fire(TcpTransport(), node.address, sign_bundle(owner, HELLO))
    assert handle.channel.read_str(5) == "HelloWorld"
    assert handle.connector.ip == "127.0.0.1"


def test_tcp_echo_tool(tcp_node):
    node, owner = tcp_node
    echo = builtin_bundle("cingal.tool.echo", [Datum("Message", "hi there")])
    handle = client_send_fire(TcpTransport(), node.address, sign_bundle(owner, echo))
    assert handle.channel.read_str(5) == "hi there"
    handle.channel.write("ping")
    assert handle.channel.read_str(5) == "ping"
    handle.channel.close()


def test_tcp_unsigned_rejected(tcp_node):
    node, _ = tcp_node
    with pytest.raises(Unsigned):
        client_send_fire(TcpTransport(), node.address, HELLO)


def test_tcp_dead_host():
    probe = socket.socket()
    probe.bind(("127.0.0.1", 0))
    port = probe.getsockname()[1]
    probe.close()
    with pytest.raises(HostUnreachable):
        client_send_fire(TcpTransport(), f"127.0.0.1:{port}", HELLO)


def test_tcp_machine_channels_wire(tcp_node):
    from cingal.channels import wire_third_party

    node, owner = tcp_node
    idle_a = sign_bundle(owner, script_bundle("channel out\nread_default $x\n"))
    idle_b = sign_bundle(owner, script_bundle("channel in\nread_default $x\n"))
    a = client_send_fire(TcpTransport(), node.address, idle_a)
    b = client_send_fire(TcpTransport(), node.address, idle_b)
    wire_third_party(TcpTransport(), a.connector, "out", b.connector, "in")
    node.machine_at(a.connector).cm.get_abstract_channel("out").write("over tcp")
    assert node.machine_at(b.connector).cm.get_abstract_channel("in").read_str(5) == "over tcp"
    assert isinstance(Connector.parse(str(a.connector)), Connector)
