// Network emulation: deterministic scheduling, address derivation, switch
// learning and flow rules, neighbor discovery, datagram delivery, reliable
// streams across multiple hops, and capture serialization.

#include <catch2/catch_amalgamated.hpp>

#include <sstream>

#include "v2gsim/netsim.hpp"

using namespace v2gsim;
using namespace v2gsim::netsim;

TEST_CASE("scheduler orders by time then insertion", "[netsim]") {
    Scheduler s;
    std::vector<int> order;
    s.at(msec(5), [&] { order.push_back(2); });
    s.at(msec(1), [&] { order.push_back(0); });
    s.at(msec(5), [&] { order.push_back(3); }); // same time, later insertion
    s.at(msec(2), [&] { order.push_back(1); });
    CHECK(s.run(sec(1)));
    CHECK(order == std::vector<int>({0, 1, 2, 3}));
    CHECK(s.now() == msec(5));
}

TEST_CASE("scheduler stops at the limit and timers cancel", "[netsim]") {
    Scheduler s;
    int fired = 0;
    s.at(msec(1), [&] { ++fired; });
    TimerHandle h = s.at(msec(2), [&] { ++fired; });
    s.at(sec(10), [&] { ++fired; });
    h.cancel();
    CHECK_FALSE(s.run(sec(1))); // the 10s event is still queued
    CHECK(fired == 1);
}

TEST_CASE("derived addresses are stable, well-formed, and name-distinct",
          "[netsim]") {
    LinkAddress l = derive_link_address("ev");
    CHECK(l == derive_link_address("ev"));
    CHECK(l != derive_link_address("se"));
    CHECK_FALSE(l.is_broadcast());
    CHECK((l.bytes[0] & 0x01) == 0); // unicast
    CHECK((l.bytes[0] & 0x02) != 0); // locally administered

    NetAddress n = derive_net_address("ev");
    CHECK(n == derive_net_address("ev"));
    CHECK(n != derive_net_address("se"));
    CHECK(n.bytes[0] == 0xFD);
    CHECK_FALSE(n.is_multicast());
    CHECK(NetAddress::all_nodes().is_multicast());

    CHECK(LinkAddress::parse(l.str()) == l);
    CHECK(NetAddress::parse(n.str()) == n);
}

TEST_CASE("simulation construction validates the topology", "[netsim]") {
    Simulation sim(1);
    sim.add_host("a");
    sim.add_switch("sw");
    CHECK_THROWS_WITH(sim.add_host("a"),
                      Catch::Matchers::ContainsSubstring("DuplicateName"));
    CHECK_THROWS_WITH(sim.add_link("a", "ghost"),
                      Catch::Matchers::ContainsSubstring("DanglingLink"));
    sim.add_link("a", "sw");
    CHECK(sim.find_host("a") != nullptr);
    CHECK(sim.find_switch("sw") != nullptr);
    CHECK(sim.find_switch("a") == nullptr);
    CHECK(sim.port_of(*sim.find_switch("sw"), *sim.find_host("a")) == 0);
}

namespace {

struct Net {
    Simulation sim;
    Host *a, *b, *c;
    Switch* sw;
    explicit Net(std::uint64_t seed = 42) : sim(seed) {
        a = &sim.add_host("a");
        b = &sim.add_host("b");
        c = &sim.add_host("c");
        sw = &sim.add_switch("sw");
        sim.add_link("a", "sw");
        sim.add_link("b", "sw");
        sim.add_link("c", "sw");
    }
};

} // namespace

TEST_CASE("unicast datagram reaches exactly its destination", "[netsim]") {
    Net net;
    int gotB = 0, gotC = 0;
    net.b->udp_bind(7000, [&](const NetAddress& src, std::uint16_t srcPort,
                              BytesView payload) {
        ++gotB;
        CHECK(src == net.a->net_address());
        CHECK(srcPort == 1234);
        CHECK(Bytes(payload.begin(), payload.end()) == from_hex("CAFE"));
    });
    net.c->udp_bind(7000, [&](const NetAddress&, std::uint16_t, BytesView) {
        ++gotC;
    });
    net.a->send_datagram(net.b->net_address(), 7000, from_hex("CAFE"), 1234);
    CHECK(net.sim.run(sec(5)));
    CHECK(gotB == 1);
    CHECK(gotC == 0); // flooded solicitation, but the datagram is unicast
}

TEST_CASE("multicast datagram reaches every other host", "[netsim]") {
    Net net;
    int gotB = 0, gotC = 0;
    net.b->udp_bind(15118, [&](const NetAddress&, std::uint16_t, BytesView) {
        ++gotB;
    });
    net.c->udp_bind(15118, [&](const NetAddress&, std::uint16_t, BytesView) {
        ++gotC;
    });
    net.a->send_datagram(NetAddress::all_nodes(), 15118, from_hex("00"), 1);
    CHECK(net.sim.run(sec(5)));
    CHECK(gotB == 1);
    CHECK(gotC == 1);
}

TEST_CASE("neighbor discovery: solicit, reply, cache, expire", "[netsim]") {
    Net net;
    std::optional<LinkAddress> resolved;
    net.a->neighbor_resolve(net.b->net_address(),
                            [&](std::optional<LinkAddress> l) { resolved = l; });
    CHECK(net.sim.run(sec(5)));
    REQUIRE(resolved.has_value());
    CHECK(*resolved == net.b->link_address());
    CHECK(net.a->neighbor_cache_lookup(net.b->net_address()) ==
          net.b->link_address());

    // Resolution of a nonexistent address gives up after bounded retries.
    std::optional<std::optional<LinkAddress>> result;
    net.a->neighbor_resolve(derive_net_address("ghost"),
                            [&](std::optional<LinkAddress> l) { result = l; });
    SimTime t0 = net.sim.now();
    CHECK(net.sim.run(sec(60)));
    REQUIRE(result.has_value());
    CHECK_FALSE(result->has_value());
    // 3 attempts spaced 100 ms: gives up at ~300 ms after start.
    CHECK(net.sim.now() - t0 <= msec(400));
}

TEST_CASE("neighbor spoofing wins the race against the honest owner",
          "[netsim]") {
    Net net;
    net.c->set_answer_all_solicitations(true, 0);
    std::optional<LinkAddress> resolved;
    net.a->neighbor_resolve(net.b->net_address(),
                            [&](std::optional<LinkAddress> l) { resolved = l; });
    CHECK(net.sim.run(sec(5)));
    REQUIRE(resolved.has_value());
    // c replies with zero delay; b takes the honest reply delay.
    CHECK(*resolved == net.c->link_address());
}

TEST_CASE("switch learns source ports and stops flooding", "[netsim]") {
    Net net;
    net.b->udp_bind(9, [](const NetAddress&, std::uint16_t, BytesView) {});
    net.a->send_datagram(net.b->net_address(), 9, from_hex("01"), 1);
    CHECK(net.sim.run(sec(5)));
    CHECK(net.sw->learned_port(net.a->link_address()) == 0);
    CHECK(net.sw->learned_port(net.b->link_address()) == 1);
    // Frame addressed to a learned unicast goes out exactly one port.
    Frame f;
    f.srcLink = net.a->link_address();
    f.dstLink = net.b->link_address();
    CHECK(net.sw->egress_ports(0, f) == std::vector<int>{1});
    // Never reflected to its ingress port.
    CHECK(net.sw->egress_ports(1, f).empty());
    // Unknown destination floods everywhere except ingress.
    Frame g;
    g.srcLink = net.a->link_address();
    g.dstLink = derive_link_address("mystery");
    CHECK(net.sw->egress_ports(0, g) == std::vector<int>({1, 2}));
}

TEST_CASE("flow rules override learning by priority and order", "[netsim]") {
    Net net;
    Frame f;
    f.srcLink = net.a->link_address();
    f.dstLink = net.b->link_address();
    f.kind = FrameKind::StreamSegment;
    f.meta.dstPort = 15118;

    FlowRule redirect;
    redirect.priority = 10;
    redirect.match.kind = FrameKind::StreamSegment;
    redirect.match.dstPort = 15118;
    redirect.action = FlowAction::RedirectToPort;
    redirect.redirectPort = 2;
    net.sw->install_rule(redirect);

    FlowRule exempt;
    exempt.priority = 100;
    exempt.match.ingressPort = 2;
    exempt.action = FlowAction::Normal;
    net.sw->install_rule(exempt);

    CHECK(net.sw->egress_ports(0, f) == std::vector<int>{2});
    // Higher-priority rule wins from port 2 (normal = flood, nothing learned).
    CHECK(net.sw->egress_ports(2, f) == std::vector<int>({0, 1}));
    // Non-matching traffic is untouched.
    Frame d = f;
    d.kind = FrameKind::Datagram;
    CHECK(net.sw->egress_ports(0, d) == std::vector<int>({1, 2}));

    FlowRule drop;
    drop.priority = 50;
    drop.match.kind = FrameKind::Datagram;
    drop.action = FlowAction::Drop;
    net.sw->install_rule(drop);
    CHECK(net.sw->egress_ports(0, d).empty());
}

TEST_CASE("stream carries 1 MiB intact across two switches", "[netsim]") {
    Simulation sim(7);
    Host& a = sim.add_host("a");
    Host& b = sim.add_host("b");
    sim.add_switch("s1");
    sim.add_switch("s2");
    sim.add_link("a", "s1");
    sim.add_link("s1", "s2");
    sim.add_link("s2", "b");

    std::mt19937_64 rng(3);
    Bytes blob(1 << 20);
    for (auto& x : blob) x = static_cast<std::uint8_t>(rng());

    Bytes received;
    bool serverClosed = false;
    b.stream_listen(8000, [&](std::shared_ptr<Stream> s) {
        Stream::Callbacks cbs;
        cbs.on_data = [&received](BytesView d) {
            received.insert(received.end(), d.begin(), d.end());
        };
        cbs.on_closed = [&serverClosed] { serverClosed = true; };
        s->set_callbacks(std::move(cbs));
    });

    Stream::Callbacks ccbs;
    bool established = false;
    std::shared_ptr<Stream> client;
    ccbs.on_established = [&] {
        established = true;
        client->send(blob);
        client->close();
    };
    client = a.stream_connect(b.net_address(), 8000, std::move(ccbs));
    CHECK(sim.run(sec(600)));
    CHECK(established);
    CHECK(serverClosed);
    CHECK(received == blob);
}

TEST_CASE("connecting to a closed port is refused", "[netsim]") {
    Net net;
    std::string error;
    Stream::Callbacks cbs;
    cbs.on_error = [&](const std::string& e) { error = e; };
    net.a->stream_connect(net.b->net_address(), 4444, std::move(cbs));
    CHECK(net.sim.run(sec(30)));
    CHECK(error == "ConnectionRefused");
}

TEST_CASE("connecting to an absent host times out", "[netsim]") {
    Net net;
    std::string error;
    Stream::Callbacks cbs;
    cbs.on_error = [&](const std::string& e) { error = e; };
    net.a->stream_connect(derive_net_address("ghost"), 4444, std::move(cbs));
    CHECK(net.sim.run(sec(60)));
    CHECK(error.find("Timeout") == 0);
}

TEST_CASE("transparent listener accepts a foreign destination address",
          "[netsim]") {
    Net net;
    // c listens transparently on 5555 and receives a stream addressed to b's
    // net address, as an interposed proxy would.
    std::shared_ptr<Stream> accepted;
    net.c->stream_listen(
        5555, [&](std::shared_ptr<Stream> s) { accepted = s; },
        /*transparent=*/true);
    // Steer a's segments to c by spoofed neighbor resolution.
    net.c->set_answer_all_solicitations(true, 0);
    bool established = false;
    Stream::Callbacks cbs;
    cbs.on_established = [&] { established = true; };
    net.a->stream_connect(net.b->net_address(), 5555, std::move(cbs));
    CHECK(net.sim.run(sec(30)));
    CHECK(established);
    REQUIRE(accepted);
    CHECK(accepted->local_net() == net.b->net_address());
    CHECK(accepted->local_port() == 5555);
    CHECK(accepted->remote_net() == net.a->net_address());
}

TEST_CASE("same seed gives a byte-identical capture; frames never teleport",
          "[netsim]") {
    auto run_once = [] {
        Net net(77);
        net.b->udp_bind(7, [](const NetAddress&, std::uint16_t, BytesView) {});
        net.a->send_datagram(net.b->net_address(), 7, from_hex("AB"), 2);
        net.sim.run(sec(5));
        std::ostringstream out;
        write_capture_jsonl(net.sim.capture(), out);
        return out.str();
    };
    std::string first = run_once();
    CHECK(first == run_once());

    // No-teleportation: every In record is preceded by a matching Out record
    // at an earlier time on a linked node.
    Net net(77);
    net.b->udp_bind(7, [](const NetAddress&, std::uint16_t, BytesView) {});
    net.a->send_datagram(net.b->net_address(), 7, from_hex("AB"), 2);
    net.sim.run(sec(5));
    const auto& cap = net.sim.capture();
    for (std::size_t i = 0; i < cap.size(); ++i) {
        if (cap[i].direction != CaptureDirection::In) continue;
        bool matched = false;
        for (std::size_t j = 0; j < i && !matched; ++j)
            matched = cap[j].direction == CaptureDirection::Out &&
                      cap[j].frame == cap[i].frame &&
                      cap[j].simTime < cap[i].simTime &&
                      cap[j].nodeId != cap[i].nodeId;
        CHECK(matched);
    }
}

TEST_CASE("capture serialization round-trips and pcap is well-formed",
          "[netsim]") {
    Net net(5);
    net.b->udp_bind(7, [](const NetAddress&, std::uint16_t, BytesView) {});
    net.a->send_datagram(net.b->net_address(), 7, from_hex("ABCD"), 2);
    net.sim.run(sec(5));

    std::ostringstream out;
    write_capture_jsonl(net.sim.capture(), out);
    std::istringstream in(out.str());
    CHECK(read_capture_jsonl(in) == net.sim.capture());

    std::ostringstream pcap;
    write_capture_pcap(net.sim.capture(), pcap);
    std::string p = pcap.str();
    REQUIRE(p.size() >= 24);
    CHECK(static_cast<unsigned char>(p[0]) == 0xd4); // little-endian magic
    CHECK(static_cast<unsigned char>(p[3]) == 0xa1);
    CHECK(static_cast<unsigned char>(p[20]) == 147); // linktype
    std::size_t outCount = 0;
    for (const auto& r : net.sim.capture())
        if (r.direction == CaptureDirection::Out) ++outCount;
    // Walk the packet records.
    std::size_t off = 24, packets = 0;
    while (off + 16 <= p.size()) {
        std::uint32_t caplen = 0;
        for (int i = 0; i < 4; ++i)
            caplen |= static_cast<std::uint32_t>(
                          static_cast<unsigned char>(p[off + 8 + i]))
                      << (8 * i);
        off += 16 + caplen;
        ++packets;
    }
    CHECK(off == p.size());
    CHECK(packets == outCount);
}

TEST_CASE("oversized datagrams and double binds are rejected", "[netsim]") {
    Net net;
    Bytes big(kMtu + 1);
    CHECK_THROWS_WITH(net.a->send_datagram(net.b->net_address(), 1, big),
                      Catch::Matchers::ContainsSubstring("PayloadTooLarge"));
    net.a->udp_bind(1, [](const NetAddress&, std::uint16_t, BytesView) {});
    CHECK_THROWS_WITH(
        net.a->udp_bind(1, [](const NetAddress&, std::uint16_t, BytesView) {}),
        Catch::Matchers::ContainsSubstring("PortInUse"));
    net.a->stream_listen(2, [](std::shared_ptr<Stream>) {});
    CHECK_THROWS_WITH(net.a->stream_listen(2, [](std::shared_ptr<Stream>) {}),
                      Catch::Matchers::ContainsSubstring("PortInUse"));
}
