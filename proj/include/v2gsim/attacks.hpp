#pragma once

// Man-in-the-middle node: switch wiring that diverts victim traffic, a
// neighbor-spoofing mode, and an interceptor pipeline over SDP datagrams and
// proxied V2G streams.
//
// Streams are terminated and re-originated at the MitM (two stream sessions
// back to back) rather than rewritten segment by segment; SDP datagrams are
// intercepted and re-injected individually.

#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "v2gsim/codec.hpp"
#include "v2gsim/controllers.hpp"
#include "v2gsim/messages.hpp"
#include "v2gsim/netsim.hpp"
#include "v2gsim/securechannel.hpp"
#include "v2gsim/wire.hpp"

namespace v2gsim::attacks {

class AttackError : public Error {
public:
    explicit AttackError(std::string msg) : Error(std::move(msg)) {}
};

// ---- attacker-side codec utilities ------------------------------------------

inline std::string decode_payload(BytesView exi) {
    return codec::to_xml_text(codec::decode_exi(exi));
}

inline Bytes encode_payload(const std::string& xml) {
    return codec::encode_exi(codec::parse_xml_text(xml)).bytes;
}

// ---- scenarios ---------------------------------------------------------------

enum class ScenarioKind {
    PassthroughLogger,
    SdpPortRewrite,
    DosVersionRewrite,
    ServiceListTamper,
    PowerDeliveryStop,
    Blackhole,
};

inline std::string scenario_name(ScenarioKind k) {
    switch (k) {
    case ScenarioKind::PassthroughLogger: return "PassthroughLogger";
    case ScenarioKind::SdpPortRewrite: return "SdpPortRewrite";
    case ScenarioKind::DosVersionRewrite: return "DosVersionRewrite";
    case ScenarioKind::ServiceListTamper: return "ServiceListTamper";
    case ScenarioKind::PowerDeliveryStop: return "PowerDeliveryStop";
    case ScenarioKind::Blackhole: return "Blackhole";
    }
    return "?";
}

inline ScenarioKind scenario_from_name(std::string_view s) {
    if (s == "PassthroughLogger") return ScenarioKind::PassthroughLogger;
    if (s == "SdpPortRewrite") return ScenarioKind::SdpPortRewrite;
    if (s == "DosVersionRewrite") return ScenarioKind::DosVersionRewrite;
    if (s == "ServiceListTamper") return ScenarioKind::ServiceListTamper;
    if (s == "PowerDeliveryStop") return ScenarioKind::PowerDeliveryStop;
    if (s == "Blackhole") return ScenarioKind::Blackhole;
    throw AttackError("unknown attack scenario: " + std::string(s));
}

struct AttackScenario {
    ScenarioKind kind = ScenarioKind::PassthroughLogger;
    // SdpPortRewrite
    std::uint16_t newPort = 25118;
    bool rewriteAddress = false; // divert via the MitM's own address instead
    // DosVersionRewrite
    std::uint32_t versionMajor = 0;
    std::uint32_t versionMinor = 0;
    // ServiceListTamper
    std::vector<messages::EnergyTransferMode> addModes;
    std::vector<messages::EnergyTransferMode> removeModes;
};

struct MitmStats {
    std::uint64_t intercepted = 0;
    std::uint64_t modified = 0;
    std::uint64_t dropped = 0;
    std::uint64_t injected = 0;
    std::uint64_t forwarded = 0;
    std::uint64_t decodeFailures = 0;

    bool operator==(const MitmStats&) const = default;
};

struct InterceptorDecision {
    enum class Action { Forward, Drop, Replace, Inject };
    Action action = Action::Forward;
    Bytes replacement; // frame payload when Replace
    std::vector<netsim::Frame> extraFrames;
};

/// Message-level verdict used on proxied stream traffic.
struct MessageDecision {
    enum class Action { Forward, Replace, Drop };
    Action action = Action::Forward;
    messages::V2GMessage replacement;
};

// ---- the node ----------------------------------------------------------------

class MitmNode {
public:
    MitmNode(netsim::Host& host, AttackScenario scenario)
        : host_(host), scenario_(std::move(scenario)) {}

    const AttackScenario& scenario() const { return scenario_; }
    const MitmStats& stats() const { return stats_; }
    const std::vector<std::string>& decoded_log() const { return decodedLog_; }
    netsim::Host& host() { return host_; }
    bool attached() const { return attached_; }

    /// Optional per-message override; runs before the built-in scenario
    /// transform. Return a decision to take over, nullopt to fall through.
    std::function<std::optional<MessageDecision>(const messages::V2GMessage&,
                                                 bool evToSecc)>
        messageHook;

    /// Installs the redirect rules on `switchName` and starts the stream
    /// proxy listeners on this node.
    void attach(netsim::Simulation& sim, const std::string& switchName) {
        netsim::Switch* sw = sim.find_switch(switchName);
        if (!sw) throw AttackError("UnknownSwitch: " + switchName);
        auto port = sim.port_of(*sw, host_);
        if (!port) throw AttackError("MitmNotLinked: " + host_.name() +
                                     " has no link to " + switchName);
        int mitmPort = *port;

        // Own traffic must not loop back through the redirects.
        netsim::FlowRule own;
        own.priority = 100;
        own.match.ingressPort = mitmPort;
        own.action = netsim::FlowAction::Normal;
        sw->install_rule(own);

        netsim::FlowRule datagrams;
        datagrams.priority = 10;
        datagrams.match.kind = netsim::FrameKind::Datagram;
        datagrams.action = netsim::FlowAction::RedirectToPort;
        datagrams.redirectPort = mitmPort;
        sw->install_rule(datagrams);

        netsim::FlowRule v2g;
        v2g.priority = 10;
        v2g.match.kind = netsim::FrameKind::StreamSegment;
        v2g.match.dstPort = controllers::kSdpPort;
        v2g.action = netsim::FlowAction::RedirectToPort;
        v2g.redirectPort = mitmPort;
        sw->install_rule(v2g);

        if (scenario_.kind == ScenarioKind::SdpPortRewrite) {
            netsim::FlowRule proxy;
            proxy.priority = 10;
            proxy.match.kind = netsim::FrameKind::StreamSegment;
            proxy.match.dstPort = scenario_.newPort;
            proxy.action = netsim::FlowAction::RedirectToPort;
            proxy.redirectPort = mitmPort;
            sw->install_rule(proxy);
        }

        host_.set_raw_tap(
            [this](const netsim::Frame& f) { return on_tap(f); });
        host_.stream_listen(
            controllers::kSdpPort,
            [this](std::shared_ptr<netsim::Stream> s) { on_accept(s); },
            /*transparent=*/true);
        if (scenario_.kind == ScenarioKind::SdpPortRewrite &&
            scenario_.newPort != controllers::kSdpPort)
            host_.stream_listen(
                scenario_.newPort,
                [this](std::shared_ptr<netsim::Stream> s) { on_accept(s); },
                /*transparent=*/true);
        attached_ = true;
    }

    /// Answers every NeighborSolicitation with this node's own link address,
    /// with zero processing delay so it beats honest answers.
    void spoof_neighbors() { host_.set_answer_all_solicitations(true, 0); }

    /// Scenario verdict on one redirected datagram frame.
    InterceptorDecision intercept(const netsim::Frame& frame) {
        ++stats_.intercepted;
        InterceptorDecision d;
        if (frame.kind != netsim::FrameKind::Datagram) {
            ++stats_.forwarded;
            return d;
        }
        wire::DecodedFrame decoded;
        try {
            decoded = wire::decode_v2gtp(frame.payload);
        } catch (const wire::WireError&) {
            ++stats_.decodeFailures;
            ++stats_.forwarded; // D-A3: unknown traffic passes untouched
            return d;
        }
        if (decoded.header.payloadType == wire::PayloadType::SdpResponse &&
            scenario_.kind == ScenarioKind::SdpPortRewrite) {
            wire::SdpResponse res;
            try {
                res = wire::decode_sdp_response(decoded.payload);
            } catch (const wire::WireError&) {
                ++stats_.decodeFailures;
                ++stats_.forwarded;
                return d;
            }
            trueSeccNet_.bytes = res.seccAddress;
            trueSeccPort_ = res.seccPort;
            haveTrueSecc_ = true;
            if (scenario_.rewriteAddress)
                res.seccAddress = host_.net_address().bytes;
            res.seccPort = scenario_.newPort;
            d.action = InterceptorDecision::Action::Replace;
            d.replacement = wire::encode_v2gtp(
                wire::PayloadType::SdpResponse, wire::encode_sdp_response(res));
            ++stats_.modified;
            return d;
        }
        ++stats_.forwarded;
        return d;
    }

    /// Scenario verdict on one proxied V2G message.
    MessageDecision transform_message(const messages::V2GMessage& msg,
                                      bool evToSecc) {
        ++stats_.intercepted;
        if (messageHook) {
            if (auto custom = messageHook(msg, evToSecc)) {
                switch (custom->action) {
                case MessageDecision::Action::Forward: ++stats_.forwarded; break;
                case MessageDecision::Action::Replace: ++stats_.modified; break;
                case MessageDecision::Action::Drop: ++stats_.dropped; break;
                }
                return *custom;
            }
        }
        MessageDecision d;
        switch (scenario_.kind) {
        case ScenarioKind::PassthroughLogger:
            decodedLog_.push_back(
                codec::to_xml_text(messages::to_doc(msg)));
            break;
        case ScenarioKind::DosVersionRewrite:
            if (evToSecc) {
                if (const auto* sap =
                        std::get_if<messages::SupportedAppProtocolReq>(
                            &msg.body)) {
                    messages::SupportedAppProtocolReq tampered = *sap;
                    for (auto& offer : tampered.offers) {
                        offer.versionMajor = scenario_.versionMajor;
                        offer.versionMinor = scenario_.versionMinor;
                    }
                    d.action = MessageDecision::Action::Replace;
                    d.replacement = msg;
                    d.replacement.body = tampered;
                }
            }
            break;
        case ScenarioKind::ServiceListTamper:
            if (!evToSecc) {
                if (const auto* sd = std::get_if<messages::ServiceDiscoveryRes>(
                        &msg.body)) {
                    messages::ServiceDiscoveryRes tampered = *sd;
                    for (auto m : scenario_.removeModes)
                        std::erase(tampered.supportedModes, m);
                    for (auto m : scenario_.addModes) {
                        bool present = false;
                        for (auto e : tampered.supportedModes)
                            if (e == m) present = true;
                        if (!present) tampered.supportedModes.push_back(m);
                    }
                    d.action = MessageDecision::Action::Replace;
                    d.replacement = msg;
                    d.replacement.body = tampered;
                }
            }
            break;
        case ScenarioKind::PowerDeliveryStop:
            if (evToSecc) {
                if (const auto* pd =
                        std::get_if<messages::PowerDeliveryReq>(&msg.body)) {
                    if (pd->chargeProgress == messages::ChargeProgress::Start) {
                        messages::PowerDeliveryReq tampered = *pd;
                        tampered.chargeProgress = messages::ChargeProgress::Stop;
                        d.action = MessageDecision::Action::Replace;
                        d.replacement = msg;
                        d.replacement.body = tampered;
                    }
                }
            }
            break;
        case ScenarioKind::Blackhole:
            d.action = MessageDecision::Action::Drop;
            break;
        case ScenarioKind::SdpPortRewrite:
            break; // transparent relay; the rewrite happened at SDP time
        }
        switch (d.action) {
        case MessageDecision::Action::Forward: ++stats_.forwarded; break;
        case MessageDecision::Action::Replace: ++stats_.modified; break;
        case MessageDecision::Action::Drop: ++stats_.dropped; break;
        }
        return d;
    }

private:
    struct ProxyConn {
        std::shared_ptr<netsim::Stream> client; // EV side
        std::shared_ptr<netsim::Stream> server; // SECC side
        wire::V2gtpReassembler c2s, s2c;
        bool c2sRaw = false, s2cRaw = false; // decode gave up: verbatim relay
        // Secure-channel termination: the proxy poses as the server with a
        // certificate it forged itself (it has no root key).
        enum class Mode { Undecided, V2gtp, Tls };
        Mode mode = Mode::Undecided;
        std::optional<securechannel::Handshake> evHandshake;
        securechannel::FlightBuffer evFlights;
    };

    securechannel::Identity& forged_identity() {
        if (!forgedIdentity_) {
            auto& rng = host_.simulation().rng();
            auto selfAuthority = securechannel::make_authority("V2G Root CA", rng);
            forgedIdentity_ = securechannel::generate_identity(
                host_.name(), selfAuthority.anchor.name, selfAuthority.key, rng);
        }
        return *forgedIdentity_;
    }

    bool on_tap(const netsim::Frame& frame) {
        if (!attached_) return false;
        if (frame.kind != netsim::FrameKind::Datagram) return false;
        InterceptorDecision d = intercept(frame);
        switch (d.action) {
        case InterceptorDecision::Action::Drop: return true;
        case InterceptorDecision::Action::Replace: {
            netsim::Frame out = frame;
            out.payload = d.replacement;
            host_.inject_frame(reinjectable(std::move(out)));
            return true;
        }
        case InterceptorDecision::Action::Inject:
            for (auto& f : d.extraFrames) {
                host_.inject_frame(f);
                ++stats_.injected;
            }
            [[fallthrough]];
        case InterceptorDecision::Action::Forward:
            host_.inject_frame(reinjectable(frame));
            return true;
        }
        return true;
    }

    // Victims whose neighbor caches we poisoned address their frames to our
    // link address. Since we deliberately do not know the true owner's link
    // address, forward such frames as link-broadcast; the network-address
    // filter at each host makes sure only the real destination consumes them.
    netsim::Frame reinjectable(netsim::Frame f) const {
        if (f.dstLink == host_.link_address() &&
            f.meta.dstNet != host_.net_address())
            f.dstLink = netsim::LinkAddress::broadcast();
        return f;
    }

    void on_accept(std::shared_ptr<netsim::Stream> client) {
        auto conn = std::make_shared<ProxyConn>();
        conn->client = client;

        // Where the honest SECC lives: a transparent accept keeps the
        // victim's intended destination; a port-rewrite accept uses the
        // coordinates remembered from the rewritten SDP response.
        netsim::NetAddress target = client->local_net();
        std::uint16_t targetPort = client->local_port();
        if (client->local_port() == scenario_.newPort ||
            client->local_net() == host_.net_address()) {
            if (!haveTrueSecc_) {
                client->close();
                return;
            }
            target = trueSeccNet_;
            targetPort = trueSeccPort_;
        }

        if (scenario_.kind != ScenarioKind::Blackhole) {
            netsim::Stream::Callbacks scbs;
            scbs.on_data = [this, conn](BytesView data) {
                relay(*conn, data, /*evToSecc=*/false);
            };
            scbs.on_closed = [conn]() {
                if (conn->client && !conn->client->closed())
                    conn->client->close();
            };
            scbs.on_error = [conn](const std::string&) {
                if (conn->client && !conn->client->closed())
                    conn->client->close();
            };
            conn->server = host_.stream_connect(target, targetPort,
                                                std::move(scbs));
        }

        netsim::Stream::Callbacks ccbs;
        ccbs.on_data = [this, conn](BytesView data) {
            relay(*conn, data, /*evToSecc=*/true);
        };
        ccbs.on_closed = [conn]() {
            if (conn->server && !conn->server->closed())
                conn->server->close();
        };
        ccbs.on_error = [conn](const std::string&) {
            if (conn->server && !conn->server->closed())
                conn->server->close();
        };
        client->set_callbacks(std::move(ccbs));
        conns_.push_back(conn);
    }

    void relay(ProxyConn& conn, BytesView data, bool evToSecc) {
        if (scenario_.kind == ScenarioKind::Blackhole) {
            ++stats_.intercepted;
            ++stats_.dropped;
            return;
        }
        if (conn.mode == ProxyConn::Mode::Undecided && !data.empty()) {
            // First byte of a V2GTP stream is the protocol version 0x01; a
            // secure channel opens with a length-framed handshake flight.
            conn.mode = (evToSecc && data[0] != 0x01) ? ProxyConn::Mode::Tls
                                                      : ProxyConn::Mode::V2gtp;
            if (conn.mode == ProxyConn::Mode::Tls)
                conn.evHandshake = securechannel::Handshake::server(
                    forged_identity(), host_.simulation().rng());
        }
        if (conn.mode == ProxyConn::Mode::Tls) {
            terminate_tls(conn, data, evToSecc);
            return;
        }
        netsim::Stream& out = evToSecc ? *conn.server : *conn.client;
        bool& raw = evToSecc ? conn.c2sRaw : conn.s2cRaw;
        wire::V2gtpReassembler& buf = evToSecc ? conn.c2s : conn.s2c;
        if (raw) {
            ++stats_.intercepted;
            ++stats_.forwarded;
            out.send(data);
            return;
        }
        buf.feed(data);
        try {
            while (auto frame = buf.next()) {
                if (frame->header.payloadType !=
                    wire::PayloadType::ExiV2gMessage) {
                    ++stats_.intercepted;
                    ++stats_.forwarded;
                    out.send(wire::encode_v2gtp(frame->header, frame->payload));
                    continue;
                }
                relay_message(conn, *frame, out, evToSecc);
            }
        } catch (const wire::WireError&) {
            // Not V2GTP on this stream (e.g. a secure channel): relay the
            // buffered bytes verbatim from here on.
            ++stats_.decodeFailures;
            raw = true;
            Bytes rest = buf.pending();
            buf.clear();
            ++stats_.intercepted;
            ++stats_.forwarded;
            out.send(rest);
        }
    }

    // The proxy answers the client's handshake itself with the forged
    // certificate; a verifying client rejects it. Server-side bytes (the
    // honest handshake the real server may start) are swallowed.
    void terminate_tls(ProxyConn& conn, BytesView data, bool evToSecc) {
        ++stats_.intercepted;
        if (!evToSecc) {
            ++stats_.dropped;
            return;
        }
        conn.evFlights.feed(data);
        try {
            while (auto flight = conn.evFlights.next()) {
                if (auto reply = conn.evHandshake->on_flight(*flight)) {
                    ++stats_.modified;
                    conn.client->send(securechannel::frame_blob(*reply));
                } else {
                    ++stats_.dropped;
                }
            }
        } catch (const securechannel::HandshakeFailure&) {
            ++stats_.dropped;
            if (conn.client && !conn.client->closed()) conn.client->close();
            if (conn.server && !conn.server->closed()) conn.server->close();
        }
    }

    void relay_message(ProxyConn& conn, const wire::DecodedFrame& frame,
                       netsim::Stream& out, bool evToSecc) {
        (void)conn;
        messages::V2GMessage msg;
        try {
            msg = messages::from_exi(frame.payload);
        } catch (const Error&) {
            ++stats_.decodeFailures;
            ++stats_.intercepted;
            ++stats_.forwarded;
            out.send(wire::encode_v2gtp(frame.header, frame.payload));
            return;
        }
        MessageDecision d = transform_message(msg, evToSecc);
        switch (d.action) {
        case MessageDecision::Action::Drop: return;
        case MessageDecision::Action::Replace:
            out.send(wire::encode_v2gtp(wire::PayloadType::ExiV2gMessage,
                                        messages::to_exi(d.replacement)));
            return;
        case MessageDecision::Action::Forward:
            out.send(wire::encode_v2gtp(frame.header, frame.payload));
            return;
        }
    }

    netsim::Host& host_;
    AttackScenario scenario_;
    MitmStats stats_;
    std::vector<std::string> decodedLog_;
    bool attached_ = false;
    bool haveTrueSecc_ = false;
    netsim::NetAddress trueSeccNet_;
    std::uint16_t trueSeccPort_ = 0;
    std::optional<securechannel::Identity> forgedIdentity_;
    std::vector<std::shared_ptr<ProxyConn>> conns_;
};

/// Convenience wrapper matching the wiring step's verbs.
inline void mitm_attach(netsim::Simulation& sim, const std::string& switchName,
                        MitmNode& node) {
    node.attach(sim, switchName);
}

} // namespace v2gsim::attacks
