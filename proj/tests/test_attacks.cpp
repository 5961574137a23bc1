// Interposition node: scenario naming, datagram interception, message
// transforms, stat accounting, targeting precision, and full attack runs
// against live controllers.

#include <catch2/catch_amalgamated.hpp>

#include "v2gsim/attacks.hpp"

using namespace v2gsim;
using namespace v2gsim::attacks;
using namespace v2gsim::messages;
using controllers::ChargeSessionReport;
using controllers::EvConfig;
using controllers::EvccController;
using controllers::Outcome;
using controllers::SeConfig;
using controllers::SeccController;

TEST_CASE("scenario names round-trip", "[attacks]") {
    for (auto k : {ScenarioKind::PassthroughLogger, ScenarioKind::SdpPortRewrite,
                   ScenarioKind::DosVersionRewrite, ScenarioKind::ServiceListTamper,
                   ScenarioKind::PowerDeliveryStop, ScenarioKind::Blackhole})
        CHECK(scenario_from_name(scenario_name(k)) == k);
    CHECK_THROWS_AS(scenario_from_name("Heist"), AttackError);
}

TEST_CASE("attacker-side codec helpers invert each other", "[attacks]") {
    V2GMessage msg;
    msg.sessionId = SessionId::from_hex("0102030405060708");
    msg.body = AuthorizationReq{};
    Bytes exi = to_exi(msg);
    std::string xml = decode_payload(exi);
    CHECK(xml.find("AuthorizationReq") != std::string::npos);
    CHECK(encode_payload(xml) == exi);
}

namespace {

struct AttackBench {
    netsim::Simulation sim;
    netsim::Host *ev, *se, *mitmHost, *bgA, *bgB;
    std::optional<MitmNode> mitm;
    std::optional<SeccController> secc;
    std::optional<EvccController> evcc;
    ChargeSessionReport report;

    AttackBench(AttackScenario scenario, std::uint64_t seed = 42,
                EvConfig evCfg = {}, SeConfig seCfg = {})
        : sim(seed) {
        ev = &sim.add_host("ev");
        se = &sim.add_host("se");
        mitmHost = &sim.add_host("mitm");
        bgA = &sim.add_host("bgA");
        bgB = &sim.add_host("bgB");
        sim.add_switch("sw");
        for (const char* n : {"ev", "se", "mitm", "bgA", "bgB"})
            sim.add_link(n, "sw");
        mitm.emplace(*mitmHost, std::move(scenario));
        mitm->attach(sim, "sw");
        mitm->spoof_neighbors();
        secc.emplace(*se, std::move(seCfg));
        secc->start();
        evcc.emplace(*ev, std::move(evCfg));
    }

    void run() {
        evcc->start([this](const ChargeSessionReport& r) { report = r; });
        sim.run(netsim::sec(120));
    }
};

void check_accounting(const MitmStats& s) {
    CHECK(s.intercepted == s.modified + s.dropped + s.forwarded);
}

} // namespace

TEST_CASE("attach validates the wiring", "[attacks]") {
    netsim::Simulation sim(1);
    netsim::Host& h = sim.add_host("mitm");
    sim.add_switch("sw");
    MitmNode node(h, AttackScenario{});
    CHECK_FALSE(node.attached());
    CHECK_THROWS_WITH(node.attach(sim, "nope"),
                      Catch::Matchers::ContainsSubstring("UnknownSwitch"));
    CHECK_THROWS_WITH(node.attach(sim, "sw"),
                      Catch::Matchers::ContainsSubstring("MitmNotLinked"));
    sim.add_link("mitm", "sw");
    node.attach(sim, "sw");
    CHECK(node.attached());
    // Redirect rules are installed: all datagrams plus the discovery port.
    CHECK(sim.find_switch("sw")->rules().size() >= 3);
}

TEST_CASE("passthrough: session completes and every message is logged",
          "[attacks]") {
    AttackBench b(AttackScenario{.kind = ScenarioKind::PassthroughLogger});
    b.run();
    CHECK(b.report.outcome == Outcome::Completed);
    const auto& s = b.mitm->stats();
    check_accounting(s);
    CHECK(s.modified == 0);
    CHECK(s.dropped == 0);
    // 12 request/response pairs on the stream plus SDP datagrams.
    CHECK(b.mitm->decoded_log().size() == 24);
    CHECK(b.mitm->decoded_log().front().find("SupportedAppProtocolReq") !=
          std::string::npos);
}

TEST_CASE("version rewrite: negotiation dies at the first stage", "[attacks]") {
    AttackBench b(AttackScenario{.kind = ScenarioKind::DosVersionRewrite,
                                 .versionMajor = 0,
                                 .versionMinor = 0});
    b.run();
    CHECK(b.report.outcome == Outcome::FailedNegotiation);
    CHECK(b.report.lastStageReached == 0);
    CHECK(b.report.failureCode == ResponseCode::FailedNoNegotiation);
    const auto& s = b.mitm->stats();
    check_accounting(s);
    CHECK(s.modified == 1); // exactly the protocol offer
}

TEST_CASE("discovery rewrite: the whole stream lands on the proxy port",
          "[attacks]") {
    AttackBench b(AttackScenario{.kind = ScenarioKind::SdpPortRewrite,
                                 .newPort = 25118});
    b.run();
    CHECK(b.report.outcome == Outcome::Completed);
    CHECK(b.report.peerPort == 25118);
    const auto& s = b.mitm->stats();
    check_accounting(s);
    CHECK(s.modified == 1); // the SDP response only

    // Every post-discovery stream frame the EV sent went to the proxy port,
    // and the proxy re-originated the server side itself.
    bool evTalksToProxyPortOnly = true;
    for (const auto& r : b.sim.capture()) {
        if (r.nodeId != "ev" || r.direction != netsim::CaptureDirection::Out)
            continue;
        if (r.frame.kind != netsim::FrameKind::StreamSegment) continue;
        if (r.frame.meta.dstPort != 25118) evTalksToProxyPortOnly = false;
    }
    CHECK(evTalksToProxyPortOnly);
}

TEST_CASE("power delivery rewrite: the column refuses the forged stop",
          "[attacks]") {
    AttackBench b(AttackScenario{.kind = ScenarioKind::PowerDeliveryStop});
    b.run();
    CHECK(b.report.outcome == Outcome::FailedSequence);
    // The EV stopped where it sent PowerDelivery(Start).
    CHECK(b.report.lastStageReached < messages::kFinalStage);
    const auto& s = b.mitm->stats();
    check_accounting(s);
    CHECK(s.modified == 1);
}

TEST_CASE("blackhole: charge traffic dies, bystanders are untouched",
          "[attacks]") {
    AttackBench b(AttackScenario{.kind = ScenarioKind::Blackhole});
    // Background pair exchanging datagrams across the same switch while the
    // attack runs.
    int bgDelivered = 0;
    b.bgB->udp_bind(9999, [&](const netsim::NetAddress&, std::uint16_t,
                              BytesView) { ++bgDelivered; });
    for (int i = 0; i < 5; ++i)
        b.sim.scheduler().at(netsim::sec(1 + i), [&b] {
            b.bgA->send_datagram(b.bgB->net_address(), 9999, from_hex("55"));
        });
    b.run();
    CHECK(b.report.outcome == Outcome::FailedTransport);
    CHECK(bgDelivered == 5);
    const auto& s = b.mitm->stats();
    check_accounting(s);
    CHECK(s.dropped > 0);
}

TEST_CASE("service list tampering edits only the advertisement", "[attacks]") {
    MessageDecision d;
    netsim::Simulation sim(3);
    netsim::Host& h = sim.add_host("m");
    AttackScenario sc;
    sc.kind = ScenarioKind::ServiceListTamper;
    sc.addModes = {EnergyTransferMode::DcExtended};
    sc.removeModes = {EnergyTransferMode::AcThreePhase};
    MitmNode node(h, sc);

    V2GMessage advert;
    advert.sessionId = SessionId::from_hex("0000000000000001");
    advert.body = ServiceDiscoveryRes{
        .supportedModes = {EnergyTransferMode::AcSinglePhase,
                           EnergyTransferMode::AcThreePhase}};
    auto res = node.transform_message(advert, /*evToSecc=*/false);
    REQUIRE(res.action == MessageDecision::Action::Replace);
    CHECK(std::get<ServiceDiscoveryRes>(res.replacement.body).supportedModes ==
          std::vector<EnergyTransferMode>({EnergyTransferMode::AcSinglePhase,
                                           EnergyTransferMode::DcExtended}));
    // The request direction is untouched.
    V2GMessage req = advert;
    req.body = ServiceDiscoveryReq{};
    CHECK(node.transform_message(req, true).action ==
          MessageDecision::Action::Forward);
    check_accounting(node.stats());
}

TEST_CASE("message hook overrides the built-in scenario", "[attacks]") {
    netsim::Simulation sim(4);
    netsim::Host& h = sim.add_host("m");
    MitmNode node(h, AttackScenario{.kind = ScenarioKind::Blackhole});
    node.messageHook = [](const V2GMessage&, bool) {
        MessageDecision d;
        d.action = MessageDecision::Action::Forward;
        return std::optional<MessageDecision>(d);
    };
    V2GMessage msg{SessionId::zero(), AuthorizationReq{}};
    CHECK(node.transform_message(msg, true).action ==
          MessageDecision::Action::Forward);
    CHECK(node.stats().dropped == 0);
    CHECK(node.stats().forwarded == 1);
}

TEST_CASE("datagram interception targets only discovery responses",
          "[attacks]") {
    netsim::Simulation sim(5);
    netsim::Host& h = sim.add_host("m");
    MitmNode node(h, AttackScenario{.kind = ScenarioKind::SdpPortRewrite,
                                    .newPort = 31000});

    netsim::Frame f;
    f.kind = netsim::FrameKind::Datagram;

    // An SDP request passes untouched.
    f.payload = wire::encode_v2gtp(wire::PayloadType::SdpRequest,
                                   wire::encode_sdp_request({}));
    CHECK(node.intercept(f).action == InterceptorDecision::Action::Forward);

    // A response gets its port rewritten, verifiable by decoding the result.
    wire::SdpResponse sdp;
    sdp.seccAddress = netsim::derive_net_address("se").bytes;
    sdp.seccPort = 15118;
    f.payload = wire::encode_v2gtp(wire::PayloadType::SdpResponse,
                                   wire::encode_sdp_response(sdp));
    auto d = node.intercept(f);
    REQUIRE(d.action == InterceptorDecision::Action::Replace);
    auto out = wire::decode_sdp_response(
        wire::decode_v2gtp(d.replacement).payload);
    CHECK(out.seccPort == 31000);
    CHECK(out.seccAddress == sdp.seccAddress); // address kept by default

    // Non-protocol noise is forwarded and counted as a decode failure.
    f.payload = from_hex("99999999");
    CHECK(node.intercept(f).action == InterceptorDecision::Action::Forward);
    CHECK(node.stats().decodeFailures == 1);
    check_accounting(node.stats());
}

TEST_CASE("two attacks in sequence keep independent statistics", "[attacks]") {
    AttackBench a(AttackScenario{.kind = ScenarioKind::PassthroughLogger}, 7);
    a.run();
    AttackBench b(AttackScenario{.kind = ScenarioKind::DosVersionRewrite}, 7);
    b.run();
    CHECK(a.report.outcome == Outcome::Completed);
    CHECK(b.report.outcome == Outcome::FailedNegotiation);
    CHECK(a.mitm->stats().modified == 0);
    CHECK(b.mitm->stats().modified == 1);
}
