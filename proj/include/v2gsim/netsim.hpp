#pragma once

// Deterministic discrete-event network emulation: hosts, links, learning
// switches with flow-rule overrides, neighbor discovery, datagrams, a
// simplified reliable stream transport, and packet capture.
//
// One Simulation = one event loop over simulated time (microseconds).
// Determinism comes from the time-then-insertion-order event ordering and a
// single seeded generator; nothing reads the wall clock.

#include <cstdint>
#include <deque>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <queue>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "v2gsim/bytes.hpp"

namespace v2gsim::netsim {

using SimTime = std::int64_t; // microseconds

constexpr SimTime usec(std::int64_t v) { return v; }
constexpr SimTime msec(std::int64_t v) { return v * 1000; }
constexpr SimTime sec(std::int64_t v) { return v * 1000 * 1000; }

// Tunables. Values are bounded so every wait terminates.
constexpr SimTime kDefaultLinkLatency = msec(1);
constexpr SimTime kNeighborRetryInterval = msec(100);
constexpr int kNeighborAttempts = 3;
constexpr SimTime kNeighborCacheLifetime = sec(30);
constexpr SimTime kNeighborReplyDelay = usec(100);
constexpr std::size_t kMtu = 1400;
constexpr std::size_t kStreamSegmentSize = 1024;
constexpr int kStreamWindowSegments = 8;
constexpr SimTime kStreamRetransmitInterval = msec(200);
constexpr int kStreamMaxRetransmits = 10;

class NetsimError : public Error {
public:
    explicit NetsimError(std::string msg) : Error(std::move(msg)) {}
};

// ---- addresses ------------------------------------------------------------

struct LinkAddress {
    std::array<std::uint8_t, 6> bytes{};

    static LinkAddress broadcast() {
        LinkAddress a;
        a.bytes.fill(0xFF);
        return a;
    }
    bool is_broadcast() const { return *this == broadcast(); }
    std::string str() const {
        std::string out;
        for (std::size_t i = 0; i < 6; ++i) {
            if (i) out += ':';
            out += to_hex(BytesView(bytes.data() + i, 1));
        }
        return out;
    }
    static LinkAddress parse(std::string_view s) {
        std::string hex;
        for (char c : s)
            if (c != ':') hex += c;
        Bytes b = from_hex(hex);
        if (b.size() != 6) throw NetsimError("bad link address");
        LinkAddress a;
        std::copy(b.begin(), b.end(), a.bytes.begin());
        return a;
    }
    auto operator<=>(const LinkAddress&) const = default;
};

struct NetAddress {
    std::array<std::uint8_t, 16> bytes{};

    /// Link-domain all-nodes group; datagrams to it reach every host.
    static NetAddress all_nodes() {
        NetAddress a;
        a.bytes[0] = 0xFF;
        a.bytes[1] = 0x02;
        a.bytes[15] = 0x01;
        return a;
    }
    bool is_multicast() const { return bytes[0] == 0xFF; }
    std::string str() const { return to_hex(bytes); }
    static NetAddress parse(std::string_view hex) {
        Bytes b = from_hex(hex);
        if (b.size() != 16) throw NetsimError("bad net address");
        NetAddress a;
        std::copy(b.begin(), b.end(), a.bytes.begin());
        return a;
    }
    auto operator<=>(const NetAddress&) const = default;
};

/// Deterministic per-name addresses (locally-administered, never broadcast).
inline LinkAddress derive_link_address(std::string_view name) {
    std::uint64_t h = detail::fnv1a64(std::string("link:") + std::string(name));
    LinkAddress a;
    for (int i = 0; i < 6; ++i)
        a.bytes[i] = static_cast<std::uint8_t>(h >> (8 * i));
    a.bytes[0] = (a.bytes[0] | 0x02) & 0xFE; // local, unicast
    return a;
}

inline NetAddress derive_net_address(std::string_view name) {
    std::uint64_t h1 = detail::fnv1a64(std::string("net1:") + std::string(name));
    std::uint64_t h2 = detail::fnv1a64(std::string("net2:") + std::string(name));
    NetAddress a;
    for (int i = 0; i < 8; ++i) {
        a.bytes[i] = static_cast<std::uint8_t>(h1 >> (8 * i));
        a.bytes[8 + i] = static_cast<std::uint8_t>(h2 >> (8 * i));
    }
    a.bytes[0] = 0xFD; // unique-local style prefix, never multicast
    return a;
}

// ---- frames ---------------------------------------------------------------

enum class FrameKind : std::uint8_t {
    NeighborSolicitation = 1,
    NeighborAdvertisement = 2,
    Datagram = 3,
    StreamSegment = 4,
};

inline std::string frame_kind_name(FrameKind k) {
    switch (k) {
    case FrameKind::NeighborSolicitation: return "NeighborSolicitation";
    case FrameKind::NeighborAdvertisement: return "NeighborAdvertisement";
    case FrameKind::Datagram: return "Datagram";
    case FrameKind::StreamSegment: return "StreamSegment";
    }
    return "?";
}

inline FrameKind frame_kind_from_name(std::string_view s) {
    if (s == "NeighborSolicitation") return FrameKind::NeighborSolicitation;
    if (s == "NeighborAdvertisement") return FrameKind::NeighborAdvertisement;
    if (s == "Datagram") return FrameKind::Datagram;
    if (s == "StreamSegment") return FrameKind::StreamSegment;
    throw NetsimError("bad frame kind");
}

struct FrameMeta {
    NetAddress srcNet, dstNet;
    std::uint16_t srcPort = 0, dstPort = 0;

    auto operator<=>(const FrameMeta&) const = default;
};

struct Frame {
    LinkAddress srcLink, dstLink;
    FrameKind kind = FrameKind::Datagram;
    FrameMeta meta; // meaningful for Datagram/StreamSegment
    Bytes payload;

    bool operator==(const Frame&) const = default;

    /// Flat serialization used by the pcap export.
    Bytes to_bytes() const {
        Bytes out;
        out.insert(out.end(), srcLink.bytes.begin(), srcLink.bytes.end());
        out.insert(out.end(), dstLink.bytes.begin(), dstLink.bytes.end());
        out.push_back(static_cast<std::uint8_t>(kind));
        out.insert(out.end(), meta.srcNet.bytes.begin(), meta.srcNet.bytes.end());
        out.insert(out.end(), meta.dstNet.bytes.begin(), meta.dstNet.bytes.end());
        detail::put_u16be(out, meta.srcPort);
        detail::put_u16be(out, meta.dstPort);
        out.insert(out.end(), payload.begin(), payload.end());
        return out;
    }
};

enum class CaptureDirection { In, Out };

struct CaptureRecord {
    SimTime simTime = 0;
    std::string nodeId;
    CaptureDirection direction = CaptureDirection::In;
    Frame frame;

    bool operator==(const CaptureRecord&) const = default;
};

// ---- scheduler ------------------------------------------------------------

class TimerHandle {
public:
    TimerHandle() = default;
    explicit TimerHandle(std::shared_ptr<bool> cancelled)
        : cancelled_(std::move(cancelled)) {}
    void cancel() {
        if (cancelled_) *cancelled_ = true;
    }
    bool active() const { return cancelled_ && !*cancelled_; }

private:
    std::shared_ptr<bool> cancelled_;
};

class Scheduler {
public:
    SimTime now() const { return now_; }

    TimerHandle at(SimTime t, std::function<void()> fn) {
        auto cancelled = std::make_shared<bool>(false);
        queue_.push(Event{t, seq_++, std::move(fn), cancelled});
        return TimerHandle(cancelled);
    }

    TimerHandle in(SimTime delay, std::function<void()> fn) {
        return at(now_ + delay, std::move(fn));
    }

    bool empty() const { return queue_.empty(); }

    /// Runs events until the queue drains or simulated time passes `limit`.
    /// Returns false when stopped by the limit with work still queued.
    bool run(SimTime limit) {
        while (!queue_.empty()) {
            const Event& top = queue_.top();
            if (top.t > limit) return false;
            Event ev = top;
            queue_.pop();
            now_ = ev.t;
            if (!*ev.cancelled) ev.fn();
        }
        return true;
    }

private:
    struct Event {
        SimTime t;
        std::uint64_t seq;
        std::function<void()> fn;
        std::shared_ptr<bool> cancelled;
    };
    struct Later {
        bool operator()(const Event& a, const Event& b) const {
            return a.t != b.t ? a.t > b.t : a.seq > b.seq;
        }
    };
    std::priority_queue<Event, std::vector<Event>, Later> queue_;
    SimTime now_ = 0;
    std::uint64_t seq_ = 0;
};

// ---- nodes ----------------------------------------------------------------

class Simulation;

class Node {
public:
    Node(Simulation& sim, std::string name) : sim_(sim), name_(std::move(name)) {}
    virtual ~Node() = default;

    const std::string& name() const { return name_; }
    std::size_t port_count() const { return ports_.size(); }
    Simulation& simulation() { return sim_; }

    virtual void receive(int port, const Frame& frame) = 0;

    void transmit(int port, const Frame& frame);

protected:
    friend class Simulation;
    struct Port {
        Node* peer = nullptr;
        int peerPort = 0;
        SimTime latency = kDefaultLinkLatency;
    };
    Simulation& sim_;
    std::string name_;
    std::vector<Port> ports_;
};

// ---- switch ---------------------------------------------------------------

enum class FlowAction { Normal, RedirectToPort, Drop };

struct FlowMatch {
    std::optional<int> ingressPort;
    std::optional<LinkAddress> srcLink;
    std::optional<LinkAddress> dstLink;
    std::optional<FrameKind> kind;
    std::optional<std::uint16_t> dstPort;

    bool matches(int ingress, const Frame& f) const {
        if (ingressPort && *ingressPort != ingress) return false;
        if (srcLink && *srcLink != f.srcLink) return false;
        if (dstLink && *dstLink != f.dstLink) return false;
        if (kind && *kind != f.kind) return false;
        if (dstPort && *dstPort != f.meta.dstPort) return false;
        return true;
    }
};

struct FlowRule {
    int priority = 0; // higher wins; ties broken by installation order
    FlowMatch match;
    FlowAction action = FlowAction::Normal;
    int redirectPort = 0;
};

class Switch : public Node {
public:
    using Node::Node;

    void install_rule(FlowRule rule) {
        auto it = rules_.begin();
        while (it != rules_.end() && it->priority >= rule.priority) ++it;
        rules_.insert(it, std::move(rule));
    }

    const std::vector<FlowRule>& rules() const { return rules_; }

    /// Pure forwarding decision, exposed for tests.
    std::vector<int> egress_ports(int ingress, const Frame& f) const {
        for (const auto& r : rules_) {
            if (!r.match.matches(ingress, f)) continue;
            switch (r.action) {
            case FlowAction::Drop: return {};
            case FlowAction::RedirectToPort: return {r.redirectPort};
            case FlowAction::Normal: return normal_ports(ingress, f);
            }
        }
        return normal_ports(ingress, f);
    }

    void receive(int port, const Frame& frame) override {
        macTable_[frame.srcLink] = port;
        for (int egress : egress_ports(port, frame))
            if (egress >= 0 && egress < static_cast<int>(ports_.size()))
                transmit(egress, frame);
    }

    std::optional<int> learned_port(const LinkAddress& a) const {
        auto it = macTable_.find(a);
        if (it == macTable_.end()) return std::nullopt;
        return it->second;
    }

private:
    std::vector<int> normal_ports(int ingress, const Frame& f) const {
        if (!f.dstLink.is_broadcast()) {
            auto it = macTable_.find(f.dstLink);
            if (it != macTable_.end()) {
                if (it->second == ingress) return {};
                return {it->second};
            }
        }
        std::vector<int> out;
        for (int p = 0; p < static_cast<int>(ports_.size()); ++p)
            if (p != ingress) out.push_back(p);
        return out;
    }

    std::map<LinkAddress, int> macTable_;
    std::vector<FlowRule> rules_; // sorted by priority desc, stable
};

// ---- streams --------------------------------------------------------------

namespace stream_detail {

constexpr std::uint8_t kSyn = 0x01;
constexpr std::uint8_t kAck = 0x02;
constexpr std::uint8_t kFin = 0x04;
constexpr std::uint8_t kRst = 0x08;

struct Segment {
    std::uint8_t flags = 0;
    std::uint32_t seq = 0;
    std::uint32_t ack = 0;
    Bytes data;

    Bytes to_bytes() const {
        Bytes out;
        out.push_back(flags);
        detail::put_u32be(out, seq);
        detail::put_u32be(out, ack);
        out.insert(out.end(), data.begin(), data.end());
        return out;
    }
    static Segment from_bytes(BytesView in) {
        if (in.size() < 9) throw NetsimError("segment: short header");
        Segment s;
        s.flags = in[0];
        s.seq = detail::get_u32be(in, 1);
        s.ack = detail::get_u32be(in, 5);
        s.data.assign(in.begin() + 9, in.end());
        return s;
    }
};

} // namespace stream_detail

class Host;

/// Reliable, in-order byte stream over StreamSegment frames (go-back-N with
/// a fixed window; cumulative acks).
class Stream : public std::enable_shared_from_this<Stream> {
public:
    struct Callbacks {
        std::function<void()> on_established;
        std::function<void(BytesView)> on_data;
        std::function<void(const std::string&)> on_error;
        std::function<void()> on_closed;
    };

    void send(BytesView data);
    void close();
    bool established() const { return state_ == State::Established; }
    bool closed() const {
        return state_ == State::Closed || state_ == State::Failed;
    }
    NetAddress local_net() const { return localNet_; }
    NetAddress remote_net() const { return remoteNet_; }
    std::uint16_t local_port() const { return localPort_; }
    std::uint16_t remote_port() const { return remotePort_; }
    void set_callbacks(Callbacks cbs) { cbs_ = std::move(cbs); }

private:
    friend class Host;
    enum class State { SynSent, SynReceived, Established, Closed, Failed };

    struct InFlight {
        std::uint32_t seq;
        Bytes data;
        std::uint8_t flags;
    };

    Stream(Host& host, NetAddress localNet, std::uint16_t localPort,
           NetAddress remoteNet, std::uint16_t remotePort, bool initiator);

    void start_connect();
    void on_segment(const stream_detail::Segment& seg);
    void pump();
    void emit(const stream_detail::Segment& seg);
    void send_ack();
    void arm_timer();
    void on_timer();
    void fail(const std::string& reason);
    void become_established();

    Host& host_;
    NetAddress localNet_, remoteNet_;
    std::uint16_t localPort_, remotePort_;
    bool initiator_;
    State state_;
    Callbacks cbs_;

    std::uint32_t sndUna_ = 0, sndNxt_ = 0, rcvNxt_ = 0;
    std::deque<std::uint8_t> pending_; // bytes not yet segmented
    std::deque<InFlight> inFlight_;
    int retransmits_ = 0;
    bool finQueued_ = false, finSent_ = false, finSeen_ = false;
    TimerHandle timer_;
};

// ---- host -----------------------------------------------------------------

class Host : public Node {
public:
    Host(Simulation& sim, std::string name)
        : Node(sim, std::move(name)),
          linkAddr_(derive_link_address(name_)),
          netAddr_(derive_net_address(name_)) {}

    const LinkAddress& link_address() const { return linkAddr_; }
    const NetAddress& net_address() const { return netAddr_; }
    void set_net_address(NetAddress a) { netAddr_ = a; }

    // -- datagrams

    using DatagramHandler = std::function<void(
        const NetAddress& srcNet, std::uint16_t srcPort, BytesView payload)>;

    void udp_bind(std::uint16_t port, DatagramHandler handler) {
        if (udpHandlers_.count(port))
            throw NetsimError("PortInUse: udp port " + std::to_string(port) +
                              " on " + name_);
        udpHandlers_[port] = std::move(handler);
    }

    void udp_unbind(std::uint16_t port) { udpHandlers_.erase(port); }
    bool udp_bound(std::uint16_t port) const { return udpHandlers_.count(port) != 0; }

    std::uint16_t ephemeral_port() { return nextEphemeral_++; }

    void send_datagram(const NetAddress& dst, std::uint16_t dstPort,
                       BytesView payload, std::uint16_t srcPort = 0);

    // -- neighbor discovery

    using ResolveCallback =
        std::function<void(std::optional<LinkAddress>)>;

    void neighbor_resolve(const NetAddress& target, ResolveCallback cb);
    std::optional<LinkAddress> neighbor_cache_lookup(const NetAddress& target);
    void neighbor_cache_clear() { neighborCache_.clear(); }

    // -- streams

    void stream_listen(std::uint16_t port,
                       std::function<void(std::shared_ptr<Stream>)> onAccept,
                       bool transparent = false) {
        if (listeners_.count(port))
            throw NetsimError("PortInUse: stream port " +
                              std::to_string(port) + " on " + name_);
        listeners_[port] = Listener{std::move(onAccept), transparent};
    }

    std::shared_ptr<Stream> stream_connect(const NetAddress& dst,
                                           std::uint16_t dstPort,
                                           Stream::Callbacks cbs);

    // -- attacker hooks

    /// Receives every frame delivered to this host's port that normal
    /// processing would not consume (wrong dstLink/dstNet). Returns true if
    /// the frame was handled.
    using RawTap = std::function<bool(const Frame&)>;
    void set_raw_tap(RawTap tap) { rawTap_ = std::move(tap); }

    /// Answers every NeighborSolicitation instead of only ours.
    void set_answer_all_solicitations(bool v, SimTime replyDelay = 0) {
        answerAllSolicitations_ = v;
        spoofReplyDelay_ = replyDelay;
    }

    void inject_frame(Frame frame) { transmit(0, std::move(frame)); }

    void receive(int port, const Frame& frame) override;

private:
    friend class Stream;

    struct PendingResolve {
        std::vector<ResolveCallback> callbacks;
        int attempts = 0;
        TimerHandle timer;
    };

    struct Listener {
        std::function<void(std::shared_ptr<Stream>)> onAccept;
        bool transparent = false;
    };

    struct ConnKey {
        std::uint16_t localPort;
        NetAddress remoteNet;
        std::uint16_t remotePort;
        auto operator<=>(const ConnKey&) const = default;
    };

    void handle_solicitation(const Frame& frame);
    void handle_advertisement(const Frame& frame);
    void handle_datagram(const Frame& frame);
    void handle_segment(const Frame& frame);
    void send_solicitation(const NetAddress& target);
    void resolve_attempt(const NetAddress& target);
    void send_segment(const Stream& s, const stream_detail::Segment& seg);
    void send_rst(const Frame& cause);

    LinkAddress linkAddr_;
    NetAddress netAddr_;
    std::map<std::uint16_t, DatagramHandler> udpHandlers_;
    std::map<NetAddress, std::pair<LinkAddress, SimTime>> neighborCache_;
    std::map<NetAddress, PendingResolve> pendingResolves_;
    std::map<std::uint16_t, Listener> listeners_;
    std::map<ConnKey, std::shared_ptr<Stream>> conns_;
    std::uint16_t nextEphemeral_ = 49152;
    RawTap rawTap_;
    bool answerAllSolicitations_ = false;
    SimTime spoofReplyDelay_ = 0;
};

// ---- simulation -----------------------------------------------------------

struct NodeDesc {
    std::string name;
    bool isSwitch = false;
    std::optional<NetAddress> netAddress; // hosts only
};

struct LinkDesc {
    std::string a, b;
    SimTime latency = kDefaultLinkLatency;
};

struct NetworkDesc {
    std::vector<NodeDesc> nodes;
    std::vector<LinkDesc> links;
};

class Simulation {
public:
    explicit Simulation(std::uint64_t seed = 0) : rng_(seed) {}

    // Nodes hold references back to their simulation.
    Simulation(const Simulation&) = delete;
    Simulation& operator=(const Simulation&) = delete;

    Scheduler& scheduler() { return scheduler_; }
    std::mt19937_64& rng() { return rng_; }
    SimTime now() const { return scheduler_.now(); }

    Host& add_host(const std::string& name) {
        check_name(name);
        auto node = std::make_unique<Host>(*this, name);
        Host& ref = *node;
        for (const auto& n : nodes_)
            if (auto* h = dynamic_cast<Host*>(n.get()))
                if (h->net_address() == ref.net_address() ||
                    h->link_address() == ref.link_address())
                    throw NetsimError("AddressCollision: " + name + " vs " +
                                      h->name());
        nodes_.push_back(std::move(node));
        return ref;
    }

    Switch& add_switch(const std::string& name) {
        check_name(name);
        auto node = std::make_unique<Switch>(*this, name);
        Switch& ref = *node;
        nodes_.push_back(std::move(node));
        return ref;
    }

    void add_link(const std::string& a, const std::string& b,
                  SimTime latency = kDefaultLinkLatency) {
        Node* na = find_node(a);
        Node* nb = find_node(b);
        if (!na || !nb)
            throw NetsimError("DanglingLink: " + (na ? b : a) +
                              " is not a node");
        int pa = static_cast<int>(na->ports_.size());
        int pb = static_cast<int>(nb->ports_.size());
        na->ports_.push_back(Node::Port{nb, pb, latency});
        nb->ports_.push_back(Node::Port{na, pa, latency});
    }

    Node* find_node(const std::string& name) {
        for (auto& n : nodes_)
            if (n->name() == name) return n.get();
        return nullptr;
    }
    Host* find_host(const std::string& name) {
        return dynamic_cast<Host*>(find_node(name));
    }
    Switch* find_switch(const std::string& name) {
        return dynamic_cast<Switch*>(find_node(name));
    }
    /// Port index of `host` on `sw`, if directly linked.
    std::optional<int> port_of(const Switch& sw, const Node& node) const {
        for (int p = 0; p < static_cast<int>(sw.ports_.size()); ++p)
            if (sw.ports_[p].peer == &node) return p;
        return std::nullopt;
    }

    void populate(const NetworkDesc& desc) {
        for (const auto& n : desc.nodes) {
            if (n.isSwitch) {
                add_switch(n.name);
            } else {
                Host& h = add_host(n.name);
                if (n.netAddress) {
                    for (const auto& other : nodes_)
                        if (auto* oh = dynamic_cast<Host*>(other.get()))
                            if (oh != &h && oh->net_address() == *n.netAddress)
                                throw NetsimError("AddressCollision: " + n.name);
                    h.set_net_address(*n.netAddress);
                }
            }
        }
        for (const auto& l : desc.links) add_link(l.a, l.b, l.latency);
    }

    /// Runs to quiescence or `limit`. Returns false if stopped by the limit.
    bool run(SimTime limit) { return scheduler_.run(limit); }

    void record(const Node& node, CaptureDirection dir, const Frame& frame) {
        capture_.push_back(
            CaptureRecord{scheduler_.now(), node.name(), dir, frame});
    }

    const std::vector<CaptureRecord>& capture() const { return capture_; }

    void export_capture_jsonl(const std::string& path) const;
    void export_capture_pcap(const std::string& path) const;

private:
    void check_name(const std::string& name) {
        if (name.empty()) throw NetsimError("empty node name");
        if (find_node(name)) throw NetsimError("DuplicateName: " + name);
    }

    Scheduler scheduler_;
    std::mt19937_64 rng_;
    std::deque<std::unique_ptr<Node>> nodes_;
    std::vector<CaptureRecord> capture_;
};

// ---- capture serialization -------------------------------------------------

inline nlohmann::ordered_json capture_record_to_json(const CaptureRecord& r) {
    nlohmann::ordered_json j;
    j["t"] = r.simTime;
    j["node"] = r.nodeId;
    j["dir"] = r.direction == CaptureDirection::In ? "In" : "Out";
    j["src"] = r.frame.srcLink.str();
    j["dst"] = r.frame.dstLink.str();
    j["kind"] = frame_kind_name(r.frame.kind);
    j["srcNet"] = r.frame.meta.srcNet.str();
    j["dstNet"] = r.frame.meta.dstNet.str();
    j["srcPort"] = r.frame.meta.srcPort;
    j["dstPort"] = r.frame.meta.dstPort;
    j["payload"] = to_hex(r.frame.payload);
    return j;
}

inline CaptureRecord capture_record_from_json(const nlohmann::json& j) {
    CaptureRecord r;
    r.simTime = j.at("t").get<SimTime>();
    r.nodeId = j.at("node").get<std::string>();
    r.direction = j.at("dir").get<std::string>() == "In"
                      ? CaptureDirection::In
                      : CaptureDirection::Out;
    r.frame.srcLink = LinkAddress::parse(j.at("src").get<std::string>());
    r.frame.dstLink = LinkAddress::parse(j.at("dst").get<std::string>());
    r.frame.kind = frame_kind_from_name(j.at("kind").get<std::string>());
    r.frame.meta.srcNet = NetAddress::parse(j.at("srcNet").get<std::string>());
    r.frame.meta.dstNet = NetAddress::parse(j.at("dstNet").get<std::string>());
    r.frame.meta.srcPort = j.at("srcPort").get<std::uint16_t>();
    r.frame.meta.dstPort = j.at("dstPort").get<std::uint16_t>();
    r.frame.payload = from_hex(j.at("payload").get<std::string>());
    return r;
}

inline void write_capture_jsonl(const std::vector<CaptureRecord>& records,
                                std::ostream& out) {
    nlohmann::ordered_json header;
    header["format"] = "v2gsim-capture";
    header["version"] = 1;
    out << header.dump() << "\n";
    for (const auto& r : records) out << capture_record_to_json(r).dump() << "\n";
}

inline std::vector<CaptureRecord> read_capture_jsonl(std::istream& in) {
    std::string line;
    if (!std::getline(in, line)) throw NetsimError("capture: empty file");
    auto header = nlohmann::json::parse(line);
    if (header.value("format", "") != "v2gsim-capture")
        throw NetsimError("capture: bad header");
    std::vector<CaptureRecord> out;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        out.push_back(capture_record_from_json(nlohmann::json::parse(line)));
    }
    return out;
}

inline void write_capture_pcap(const std::vector<CaptureRecord>& records,
                               std::ostream& out) {
    auto put32 = [&](std::uint32_t v) {
        char b[4] = {static_cast<char>(v), static_cast<char>(v >> 8),
                     static_cast<char>(v >> 16), static_cast<char>(v >> 24)};
        out.write(b, 4);
    };
    auto put16 = [&](std::uint16_t v) {
        char b[2] = {static_cast<char>(v), static_cast<char>(v >> 8)};
        out.write(b, 2);
    };
    put32(0xa1b2c3d4); // magic, microsecond timestamps
    put16(2);
    put16(4);
    put32(0); // thiszone
    put32(0); // sigfigs
    put32(65535);
    put32(147); // DLT_USER0
    for (const auto& r : records) {
        // Only one side of each hop, to keep packet counts natural.
        if (r.direction != CaptureDirection::Out) continue;
        Bytes body = r.frame.to_bytes();
        put32(static_cast<std::uint32_t>(r.simTime / 1000000));
        put32(static_cast<std::uint32_t>(r.simTime % 1000000));
        put32(static_cast<std::uint32_t>(body.size()));
        put32(static_cast<std::uint32_t>(body.size()));
        out.write(reinterpret_cast<const char*>(body.data()),
                  static_cast<std::streamsize>(body.size()));
    }
}

inline void Simulation::export_capture_jsonl(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw NetsimError("IoFailure: cannot open " + path);
    write_capture_jsonl(capture_, out);
    if (!out) throw NetsimError("IoFailure: write failed for " + path);
}

inline void Simulation::export_capture_pcap(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw NetsimError("IoFailure: cannot open " + path);
    write_capture_pcap(capture_, out);
    if (!out) throw NetsimError("IoFailure: write failed for " + path);
}

// ---- node/stream implementation --------------------------------------------

inline void Node::transmit(int port, const Frame& frame) {
    if (port < 0 || port >= static_cast<int>(ports_.size())) return;
    sim_.record(*this, CaptureDirection::Out, frame);
    Port& p = ports_[port];
    Node* peer = p.peer;
    int peerPort = p.peerPort;
    Frame copy = frame;
    sim_.scheduler().in(p.latency, [this, peer, peerPort, copy]() {
        sim_.record(*peer, CaptureDirection::In, copy);
        peer->receive(peerPort, copy);
    });
}

inline void Host::send_datagram(const NetAddress& dst, std::uint16_t dstPort,
                                BytesView payload, std::uint16_t srcPort) {
    if (payload.size() > kMtu)
        throw NetsimError("PayloadTooLarge: datagram exceeds MTU");
    Frame f;
    f.srcLink = linkAddr_;
    f.kind = FrameKind::Datagram;
    f.meta.srcNet = netAddr_;
    f.meta.dstNet = dst;
    f.meta.srcPort = srcPort;
    f.meta.dstPort = dstPort;
    f.payload.assign(payload.begin(), payload.end());
    if (dst.is_multicast()) {
        f.dstLink = LinkAddress::broadcast();
        transmit(0, f);
        return;
    }
    neighbor_resolve(dst, [this, f](std::optional<LinkAddress> link) mutable {
        if (!link) return; // unresolved: dropped, UDP semantics
        f.dstLink = *link;
        transmit(0, f);
    });
}

inline std::optional<LinkAddress>
Host::neighbor_cache_lookup(const NetAddress& target) {
    auto it = neighborCache_.find(target);
    if (it == neighborCache_.end()) return std::nullopt;
    if (it->second.second < sim_.now()) {
        neighborCache_.erase(it);
        return std::nullopt;
    }
    return it->second.first;
}

inline void Host::neighbor_resolve(const NetAddress& target,
                                   ResolveCallback cb) {
    if (auto cached = neighbor_cache_lookup(target)) {
        cb(cached);
        return;
    }
    auto it = pendingResolves_.find(target);
    if (it != pendingResolves_.end()) {
        it->second.callbacks.push_back(std::move(cb));
        return;
    }
    PendingResolve pending;
    pending.callbacks.push_back(std::move(cb));
    pendingResolves_[target] = std::move(pending);
    resolve_attempt(target);
}

inline void Host::send_solicitation(const NetAddress& target) {
    Frame f;
    f.srcLink = linkAddr_;
    f.dstLink = LinkAddress::broadcast();
    f.kind = FrameKind::NeighborSolicitation;
    f.meta.srcNet = netAddr_;
    f.meta.dstNet = NetAddress::all_nodes();
    f.payload.assign(target.bytes.begin(), target.bytes.end());
    transmit(0, f);
}

inline void Host::resolve_attempt(const NetAddress& target) {
    auto it = pendingResolves_.find(target);
    if (it == pendingResolves_.end()) return;
    if (it->second.attempts >= kNeighborAttempts) {
        auto callbacks = std::move(it->second.callbacks);
        pendingResolves_.erase(it);
        for (auto& cb : callbacks) cb(std::nullopt); // ResolveTimeout
        return;
    }
    ++it->second.attempts;
    send_solicitation(target);
    it->second.timer = sim_.scheduler().in(
        kNeighborRetryInterval, [this, target]() { resolve_attempt(target); });
}

inline void Host::handle_solicitation(const Frame& frame) {
    if (frame.payload.size() != 16) return;
    NetAddress target;
    std::copy(frame.payload.begin(), frame.payload.end(), target.bytes.begin());
    bool mine = target == netAddr_;
    if (!mine && !answerAllSolicitations_) return;
    Frame reply;
    reply.srcLink = linkAddr_;
    reply.dstLink = frame.srcLink;
    reply.kind = FrameKind::NeighborAdvertisement;
    reply.meta.srcNet = mine ? netAddr_ : target;
    reply.meta.dstNet = frame.meta.srcNet;
    reply.payload.assign(target.bytes.begin(), target.bytes.end());
    reply.payload.insert(reply.payload.end(), linkAddr_.bytes.begin(),
                         linkAddr_.bytes.end());
    SimTime delay = (!mine && answerAllSolicitations_) ? spoofReplyDelay_
                                                       : kNeighborReplyDelay;
    sim_.scheduler().in(delay, [this, reply]() { transmit(0, reply); });
}

inline void Host::handle_advertisement(const Frame& frame) {
    if (frame.payload.size() != 22) return;
    NetAddress target;
    std::copy(frame.payload.begin(), frame.payload.begin() + 16,
              target.bytes.begin());
    LinkAddress link;
    std::copy(frame.payload.begin() + 16, frame.payload.end(),
              link.bytes.begin());
    auto it = pendingResolves_.find(target);
    if (it == pendingResolves_.end()) return; // unsolicited: ignore
    neighborCache_[target] = {link, sim_.now() + kNeighborCacheLifetime};
    auto callbacks = std::move(it->second.callbacks);
    it->second.timer.cancel();
    pendingResolves_.erase(it);
    for (auto& cb : callbacks) cb(link);
}

inline void Host::handle_datagram(const Frame& frame) {
    bool forMe = frame.meta.dstNet == netAddr_ ||
                 frame.meta.dstNet.is_multicast();
    bool linkOk = frame.dstLink == linkAddr_ || frame.dstLink.is_broadcast();
    if (!forMe || !linkOk) {
        if (rawTap_) rawTap_(frame);
        return;
    }
    if (rawTap_ && rawTap_(frame)) return;
    auto it = udpHandlers_.find(frame.meta.dstPort);
    if (it == udpHandlers_.end()) return; // closed port: silently dropped
    it->second(frame.meta.srcNet, frame.meta.srcPort, frame.payload);
}

inline void Host::handle_segment(const Frame& frame) {
    stream_detail::Segment seg;
    try {
        seg = stream_detail::Segment::from_bytes(frame.payload);
    } catch (const NetsimError&) {
        return;
    }
    ConnKey key{frame.meta.dstPort, frame.meta.srcNet, frame.meta.srcPort};
    auto it = conns_.find(key);
    if (it != conns_.end() && it->second->local_net() == frame.meta.dstNet) {
        it->second->on_segment(seg);
        return;
    }
    if (seg.flags & stream_detail::kRst) return;
    if (seg.flags & stream_detail::kSyn) {
        auto lit = listeners_.find(frame.meta.dstPort);
        bool accepts = lit != listeners_.end() &&
                       (lit->second.transparent ||
                        frame.meta.dstNet == netAddr_);
        if (accepts) {
            auto stream = std::shared_ptr<Stream>(new Stream(
                *this, frame.meta.dstNet, frame.meta.dstPort,
                frame.meta.srcNet, frame.meta.srcPort, false));
            conns_[key] = stream;
            auto onAccept = lit->second.onAccept;
            stream->on_segment(seg);
            if (onAccept) onAccept(stream);
            return;
        }
    }
    if (rawTap_ && rawTap_(frame)) return;
    send_rst(frame);
}

inline void Host::send_rst(const Frame& cause) {
    stream_detail::Segment rst;
    rst.flags = stream_detail::kRst;
    Frame f;
    f.srcLink = linkAddr_;
    f.dstLink = cause.srcLink;
    f.kind = FrameKind::StreamSegment;
    f.meta.srcNet = cause.meta.dstNet;
    f.meta.dstNet = cause.meta.srcNet;
    f.meta.srcPort = cause.meta.dstPort;
    f.meta.dstPort = cause.meta.srcPort;
    f.payload = rst.to_bytes();
    transmit(0, f);
}

inline void Host::receive(int /*port*/, const Frame& frame) {
    switch (frame.kind) {
    case FrameKind::NeighborSolicitation: handle_solicitation(frame); break;
    case FrameKind::NeighborAdvertisement: handle_advertisement(frame); break;
    case FrameKind::Datagram: handle_datagram(frame); break;
    case FrameKind::StreamSegment: handle_segment(frame); break;
    }
}

inline std::shared_ptr<Stream> Host::stream_connect(const NetAddress& dst,
                                                    std::uint16_t dstPort,
                                                    Stream::Callbacks cbs) {
    std::uint16_t srcPort = ephemeral_port();
    auto stream = std::shared_ptr<Stream>(
        new Stream(*this, netAddr_, srcPort, dst, dstPort, true));
    stream->set_callbacks(std::move(cbs));
    conns_[ConnKey{srcPort, dst, dstPort}] = stream;
    stream->start_connect();
    return stream;
}

inline void Host::send_segment(const Stream& s,
                               const stream_detail::Segment& seg) {
    Frame f;
    f.srcLink = linkAddr_;
    f.kind = FrameKind::StreamSegment;
    f.meta.srcNet = s.local_net();
    f.meta.dstNet = s.remote_net();
    f.meta.srcPort = s.local_port();
    f.meta.dstPort = s.remote_port();
    f.payload = seg.to_bytes();
    neighbor_resolve(s.remote_net(),
                     [this, f](std::optional<LinkAddress> link) mutable {
                         if (!link) return; // retransmit timer will retry
                         f.dstLink = *link;
                         transmit(0, f);
                     });
}

// Stream methods

inline Stream::Stream(Host& host, NetAddress localNet, std::uint16_t localPort,
                      NetAddress remoteNet, std::uint16_t remotePort,
                      bool initiator)
    : host_(host), localNet_(localNet), remoteNet_(remoteNet),
      localPort_(localPort), remotePort_(remotePort), initiator_(initiator),
      state_(initiator ? State::SynSent : State::SynReceived) {
    std::uint32_t iss =
        static_cast<std::uint32_t>(host_.sim_.rng()() & 0xFFFF);
    sndUna_ = sndNxt_ = iss;
}

inline void Stream::emit(const stream_detail::Segment& seg) {
    host_.send_segment(*this, seg);
}

inline void Stream::start_connect() {
    stream_detail::Segment syn;
    syn.flags = stream_detail::kSyn;
    syn.seq = sndNxt_;
    inFlight_.push_back(InFlight{sndNxt_, {}, stream_detail::kSyn});
    sndNxt_ += 1;
    emit(syn);
    arm_timer();
}

inline void Stream::arm_timer() {
    timer_.cancel();
    auto self = shared_from_this();
    timer_ = host_.sim_.scheduler().in(kStreamRetransmitInterval,
                                       [self]() { self->on_timer(); });
}

inline void Stream::on_timer() {
    if (state_ == State::Closed || state_ == State::Failed) return;
    if (inFlight_.empty()) return;
    if (++retransmits_ > kStreamMaxRetransmits) {
        fail("Timeout: too many retransmissions");
        return;
    }
    for (const auto& seg : inFlight_) {
        stream_detail::Segment s;
        s.flags = seg.flags | (state_ == State::Established ||
                                       state_ == State::SynReceived
                                   ? stream_detail::kAck
                                   : 0);
        if (seg.flags & stream_detail::kSyn && state_ == State::SynSent)
            s.flags = stream_detail::kSyn;
        s.seq = seg.seq;
        s.ack = rcvNxt_;
        s.data = seg.data;
        emit(s);
    }
    arm_timer();
}

inline void Stream::fail(const std::string& reason) {
    if (state_ == State::Failed || state_ == State::Closed) return;
    state_ = State::Failed;
    timer_.cancel();
    host_.conns_.erase(Host::ConnKey{localPort_, remoteNet_, remotePort_});
    if (cbs_.on_error) cbs_.on_error(reason);
}

inline void Stream::become_established() {
    state_ = State::Established;
    retransmits_ = 0;
    if (cbs_.on_established) cbs_.on_established();
}

inline void Stream::send_ack() {
    stream_detail::Segment ack;
    ack.flags = stream_detail::kAck;
    ack.seq = sndNxt_;
    ack.ack = rcvNxt_;
    emit(ack);
}

inline void Stream::send(BytesView data) {
    if (state_ == State::Failed || state_ == State::Closed)
        throw NetsimError("stream: send on closed stream");
    pending_.insert(pending_.end(), data.begin(), data.end());
    pump();
}

inline void Stream::close() {
    if (state_ == State::Failed || state_ == State::Closed) return;
    finQueued_ = true;
    pump();
}

inline void Stream::pump() {
    if (state_ != State::Established) return;
    bool sent = false;
    while (!pending_.empty() &&
           inFlight_.size() < kStreamWindowSegments) {
        std::size_t n = std::min(pending_.size(), kStreamSegmentSize);
        stream_detail::Segment seg;
        seg.flags = stream_detail::kAck;
        seg.seq = sndNxt_;
        seg.ack = rcvNxt_;
        seg.data.assign(pending_.begin(), pending_.begin() + n);
        pending_.erase(pending_.begin(), pending_.begin() + n);
        inFlight_.push_back(InFlight{seg.seq, seg.data, 0});
        sndNxt_ += static_cast<std::uint32_t>(n);
        emit(seg);
        sent = true;
    }
    if (finQueued_ && !finSent_ && pending_.empty() &&
        inFlight_.size() < kStreamWindowSegments) {
        stream_detail::Segment fin;
        fin.flags = stream_detail::kFin | stream_detail::kAck;
        fin.seq = sndNxt_;
        fin.ack = rcvNxt_;
        inFlight_.push_back(InFlight{sndNxt_, {}, stream_detail::kFin});
        sndNxt_ += 1;
        finSent_ = true;
        emit(fin);
        sent = true;
    }
    if (sent) arm_timer();
}

inline void Stream::on_segment(const stream_detail::Segment& seg) {
    using namespace stream_detail;
    if (seg.flags & kRst) {
        fail(state_ == State::SynSent ? "ConnectionRefused"
                                      : "ConnectionReset");
        return;
    }
    if (state_ == State::SynSent) {
        if ((seg.flags & kSyn) && (seg.flags & kAck) &&
            seg.ack == sndUna_ + 1) {
            sndUna_ = seg.ack;
            inFlight_.clear();
            rcvNxt_ = seg.seq + 1;
            become_established();
            send_ack();
            pump();
        }
        return;
    }
    if (state_ == State::SynReceived) {
        if (seg.flags & kSyn) {
            // (re)received SYN: answer SYN|ACK
            rcvNxt_ = seg.seq + 1;
            stream_detail::Segment synack;
            synack.flags = kSyn | kAck;
            synack.seq = sndUna_;
            synack.ack = rcvNxt_;
            if (inFlight_.empty())
                inFlight_.push_back(InFlight{sndUna_, {}, kSyn});
            sndNxt_ = sndUna_ + 1;
            emit(synack);
            arm_timer();
            return;
        }
        if ((seg.flags & kAck) && seg.ack == sndUna_ + 1) {
            sndUna_ = seg.ack;
            inFlight_.clear();
            become_established();
            // fall through to process any piggybacked data
        } else {
            return;
        }
    }
    // Established (or just became so)
    if (seg.flags & kAck) {
        while (!inFlight_.empty()) {
            const InFlight& f = inFlight_.front();
            std::uint32_t end =
                f.seq + static_cast<std::uint32_t>(f.data.size()) +
                ((f.flags & (kSyn | kFin)) ? 1 : 0);
            if (seg.ack >= end) {
                sndUna_ = end;
                inFlight_.pop_front();
                retransmits_ = 0;
            } else {
                break;
            }
        }
        if (inFlight_.empty()) timer_.cancel();
        pump();
    }
    bool advanced = false;
    if (!seg.data.empty()) {
        if (seg.seq == rcvNxt_) {
            rcvNxt_ += static_cast<std::uint32_t>(seg.data.size());
            advanced = true;
            if (cbs_.on_data) cbs_.on_data(seg.data);
        }
        send_ack();
    }
    if (seg.flags & kFin) {
        std::uint32_t finSeq =
            seg.seq + static_cast<std::uint32_t>(seg.data.size());
        if (finSeq == rcvNxt_ && !finSeen_) {
            rcvNxt_ += 1;
            finSeen_ = true;
            send_ack();
            state_ = State::Closed;
            timer_.cancel();
            host_.conns_.erase(
                Host::ConnKey{localPort_, remoteNet_, remotePort_});
            if (cbs_.on_closed) cbs_.on_closed();
        } else if (!advanced) {
            send_ack();
        }
    }
}

} // namespace v2gsim::netsim
