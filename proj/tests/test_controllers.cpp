// Charge-point and vehicle controllers: property-file parsing, protocol
// negotiation against a brute-force oracle, session-id assignment, the
// synthetic meter, the column's per-request semantics, and full
// controller-vs-controller sessions over the emulated network.

#include <catch2/catch_amalgamated.hpp>

#include <random>

#include "v2gsim/controllers.hpp"

using namespace v2gsim;
using namespace v2gsim::controllers;
using namespace v2gsim::messages;

namespace {

ConfigErrc ev_errc(const std::string& text) {
    try {
        parse_ev_properties(text);
    } catch (const ConfigError& e) {
        return e.code();
    }
    FAIL("expected a ConfigError");
    throw std::logic_error("unreachable");
}

ConfigErrc se_errc(const std::string& text) {
    try {
        parse_se_properties(text);
    } catch (const ConfigError& e) {
        return e.code();
    }
    FAIL("expected a ConfigError");
    throw std::logic_error("unreachable");
}

} // namespace

TEST_CASE("EV property file parsing", "[controllers]") {
    EvConfig cfg = parse_ev_properties(
        "# vehicle settings\n"
        "voltage.accuracy = 0.1\n"
        "tls = true\n"
        "session.id = 00112233445566EF\n"
        "network.interface = eth1\n"
        "energy.transfermode.requested = DC_extended\n"
        "charging.loop.iterations = 5\n"
        "energy.request = 9000\n");
    CHECK(cfg.voltageAccuracy == 0.1);
    CHECK(cfg.tls);
    REQUIRE(cfg.sessionId.has_value());
    CHECK(cfg.sessionId->hex() == "00112233445566EF");
    CHECK(cfg.networkInterface == "eth1");
    CHECK(cfg.energyTransferModeRequested == EnergyTransferMode::DcExtended);
    CHECK(cfg.chargingLoopIterations == 5);
    CHECK(cfg.energyRequestWh == 9000);

    EvConfig dflt = parse_ev_properties("");
    CHECK(dflt.voltageAccuracy == 0.05);
    CHECK_FALSE(dflt.tls);
    CHECK_FALSE(dflt.sessionId.has_value());
    CHECK(dflt.energyTransferModeRequested ==
          EnergyTransferMode::AcSinglePhase);
}

TEST_CASE("SE property file parsing", "[controllers]") {
    SeConfig cfg = parse_se_properties(
        "free.service = true\n"
        "energy.transfermodes.supported = AC_single_phase, DC_extended\n"
        "evse.id = SE042\n"
        "sdp.port = 25118\n"
        "tls = true\n");
    CHECK(cfg.freeService);
    CHECK(cfg.energyTransferModesSupported ==
          std::vector<EnergyTransferMode>({EnergyTransferMode::AcSinglePhase,
                                           EnergyTransferMode::DcExtended}));
    CHECK(cfg.evseId == "SE042");
    CHECK(cfg.sdpPort == 25118);
    CHECK(cfg.tls);
}

TEST_CASE("property parsing rejects bad input precisely", "[controllers]") {
    CHECK(ev_errc("tls true\n") == ConfigErrc::ParseError);
    CHECK(ev_errc("frobnicate = 7\n") == ConfigErrc::UnknownPropertyKey);
    CHECK(ev_errc("tls = maybe\n") == ConfigErrc::ConstraintViolation);
    CHECK(ev_errc("voltage.accuracy = fast\n") ==
          ConfigErrc::ConstraintViolation);
    CHECK(ev_errc("voltage.accuracy = 0\n") == ConfigErrc::ConstraintViolation);
    CHECK(ev_errc("voltage.accuracy = 1.5\n") ==
          ConfigErrc::ConstraintViolation);
    CHECK(ev_errc("session.id = 123\n") == ConfigErrc::ConstraintViolation);
    CHECK(ev_errc("charging.loop.iterations = 0\n") ==
          ConfigErrc::ConstraintViolation);
    CHECK(ev_errc("energy.transfermode.requested = AC_two_phase\n") ==
          ConfigErrc::ConstraintViolation);

    CHECK(se_errc("free.service = maybe\n") == ConfigErrc::ConstraintViolation);
    CHECK(se_errc("bogus.key = 1\n") == ConfigErrc::UnknownPropertyKey);
    CHECK(se_errc("energy.transfermodes.supported = \n") ==
          ConfigErrc::ConstraintViolation);
    CHECK(se_errc("energy.transfermodes.supported = AC_single_phase,"
                  "AC_single_phase\n") == ConfigErrc::ConstraintViolation);
    CHECK(se_errc("sdp.port = 0\n") == ConfigErrc::ConstraintViolation);
    CHECK(se_errc("sdp.port = 70000\n") == ConfigErrc::ConstraintViolation);
}

TEST_CASE("protocol negotiation matches a brute-force oracle",
          "[controllers]") {
    std::mt19937_64 rng(0xACDC);
    const std::array<std::string, 3> namespaces = {
        "urn:iso:15118:2:2013:MsgDef", "urn:din:70121:2012:MsgDef",
        "urn:example:other"};
    for (int trial = 0; trial < 300; ++trial) {
        std::vector<AppProtocol> offers, supported;
        std::size_t nOffers = 1 + rng() % 4;
        std::size_t nSupported = 1 + rng() % 3;
        for (std::size_t i = 0; i < nOffers; ++i)
            offers.push_back(AppProtocol{namespaces[rng() % 3],
                                         static_cast<std::uint32_t>(rng() % 3),
                                         static_cast<std::uint32_t>(rng() % 3),
                                         static_cast<std::uint8_t>(i + 1),
                                         static_cast<int>(1 + rng() % 20)});
        for (std::size_t i = 0; i < nSupported; ++i)
            supported.push_back(
                AppProtocol{namespaces[rng() % 3],
                            static_cast<std::uint32_t>(rng() % 3),
                            static_cast<std::uint32_t>(rng() % 3), 0, 1});

        // Oracle: scan offers in order, keep the first one with the lowest
        // priority number among those some supported entry accepts.
        const AppProtocol* expect = nullptr;
        for (const auto& o : offers) {
            bool ok = false;
            for (const auto& s : supported)
                if (o.protocolNamespace == s.protocolNamespace &&
                    o.versionMajor == s.versionMajor &&
                    o.versionMinor >= s.versionMinor)
                    ok = true;
            if (ok && (!expect || o.priority < expect->priority)) expect = &o;
        }
        auto got = negotiate_protocol(offers, supported);
        if (expect) {
            REQUIRE(got.has_value());
            CHECK(*got == expect->schemaId);
        } else {
            CHECK_FALSE(got.has_value());
        }
    }
}

TEST_CASE("session id assignment honors requests and never yields zero",
          "[controllers]") {
    std::mt19937_64 rng(9);
    SessionId req = SessionId::from_hex("DEADBEEF00000001");
    CHECK(assign_session_id(req, rng) == req);
    CHECK(assign_session_id(SessionId::zero(), rng) != SessionId::zero());
    for (int i = 0; i < 100; ++i)
        CHECK_FALSE(assign_session_id(std::nullopt, rng).is_zero());
    // Deterministic in the generator state.
    std::mt19937_64 a(4), b(4);
    CHECK(assign_session_id(std::nullopt, a) ==
          assign_session_id(std::nullopt, b));
}

TEST_CASE("synthetic meter steps stay inside the accuracy band",
          "[controllers]") {
    std::mt19937_64 rng(11);
    for (int i = 0; i < 1000; ++i) {
        std::uint64_t inc = 1 + rng() % 5000;
        std::uint32_t permille = rng() % 200;
        std::uint64_t band = inc * permille / 1000;
        std::uint64_t step = controllers::detail2::meter_step(inc, permille, rng);
        CHECK(step >= inc - std::min(band, inc));
        CHECK(step <= inc + band);
    }
    // Zero accuracy means exact increments.
    CHECK(controllers::detail2::meter_step(1234, 0, rng) == 1234);
}

namespace {

SeConfig dc_se() {
    SeConfig cfg;
    cfg.energyTransferModesSupported = {EnergyTransferMode::AcSinglePhase,
                                        EnergyTransferMode::DcExtended};
    return cfg;
}

V2GMessage with_id(SessionId id, Body body) {
    return V2GMessage{id, std::move(body)};
}

} // namespace

TEST_CASE("column semantics: the full request sequence succeeds",
          "[controllers]") {
    SeccSessionState st;
    SeConfig cfg = dc_se();
    std::mt19937_64 rng(1);

    auto ask = [&](Body body) {
        SessionId id = st.sessionAssigned ? st.sessionId : SessionId::zero();
        return secc_handle(with_id(id, std::move(body)), st, cfg, rng, 1000);
    };

    auto sap = ask(SupportedAppProtocolReq{.offers = default_protocols()});
    CHECK(std::get<SupportedAppProtocolRes>(sap.body).responseCode ==
          ResponseCode::Ok);
    CHECK(std::get<SupportedAppProtocolRes>(sap.body).schemaId == 1);

    auto setup = ask(SessionSetupReq{});
    CHECK(std::get<SessionSetupRes>(setup.body).evseId == "SE001");
    CHECK(st.sessionAssigned);
    CHECK_FALSE(st.sessionId.is_zero());
    CHECK(setup.sessionId == st.sessionId);

    auto sd = ask(ServiceDiscoveryReq{});
    CHECK(std::get<ServiceDiscoveryRes>(sd.body).supportedModes ==
          cfg.energyTransferModesSupported);

    CHECK(std::get<PaymentServiceSelectionRes>(
              ask(PaymentServiceSelectionReq{}).body)
              .responseCode == ResponseCode::Ok);
    CHECK(std::get<AuthorizationRes>(ask(AuthorizationReq{}).body)
              .responseCode == ResponseCode::Ok);

    auto cpd = ask(ChargeParameterDiscoveryReq{
        .requestedMode = EnergyTransferMode::DcExtended,
        .maxVoltageV = 500,
        .maxCurrentA = 200,
        .energyRequestWh = 6000,
        .plannedLoopIterations = 3,
        .voltageAccuracyPermille = 50});
    CHECK(std::get<ChargeParameterDiscoveryRes>(cpd.body).evseMaxVoltageV ==
          500);
    CHECK(st.dc);
    CHECK(st.meterIncrementWh == 2000);
    CHECK(st.meter.meterId == "SE001-meter");

    CHECK(std::get<CableCheckRes>(ask(CableCheckReq{}).body).responseCode ==
          ResponseCode::Ok);
    CHECK(std::get<PreChargeRes>(
              ask(PreChargeReq{.targetVoltageV = 400}).body)
              .presentVoltageV == 400);
    ask(PowerDeliveryReq{ChargeProgress::Start});

    std::uint64_t prev = 0;
    for (int i = 0; i < 3; ++i) {
        auto cd = ask(CurrentDemandReq{.targetVoltageV = 400,
                                       .targetCurrentA = 100});
        const auto& m = std::get<CurrentDemandRes>(cd.body).meterInfo;
        CHECK(m.readingWh > prev); // monotonic
        CHECK(m.timestampMs == 1000);
        prev = m.readingWh;
    }
    // Reading stays inside iterations * (inc ± band).
    CHECK(prev >= 3 * (2000 - 100));
    CHECK(prev <= 3 * (2000 + 100));

    ask(PowerDeliveryReq{ChargeProgress::Stop});
    ask(WeldingDetectionReq{});
    auto stop = ask(SessionStopReq{});
    CHECK(std::get<SessionStopRes>(stop.body).responseCode == ResponseCode::Ok);
    CHECK(st.completed);
    CHECK(st.lastStage == kFinalStage);
    CHECK_FALSE(st.aborted);
}

TEST_CASE("column semantics: rejections", "[controllers]") {
    std::mt19937_64 rng(2);
    SeConfig cfg; // AC-only

    SECTION("no negotiable protocol") {
        SeccSessionState st;
        SupportedAppProtocolReq sap;
        sap.offers.push_back(AppProtocol{"urn:iso:15118:2:2013:MsgDef", 0, 0,
                                         1, 1}); // tampered version 0.0
        auto res = secc_handle(with_id(SessionId::zero(), sap), st, cfg, rng, 0);
        CHECK(std::get<SupportedAppProtocolRes>(res.body).responseCode ==
              ResponseCode::FailedNoNegotiation);
        CHECK(st.aborted);
        CHECK(st.lastStage == 0);
    }

    SECTION("wrong session id after setup") {
        SeccSessionState st;
        secc_handle(with_id(SessionId::zero(),
                            SupportedAppProtocolReq{default_protocols()}),
                    st, cfg, rng, 0);
        secc_handle(with_id(SessionId::zero(), SessionSetupReq{}), st, cfg,
                    rng, 0);
        SessionId wrong = SessionId::from_hex("FFFFFFFFFFFFFFFF");
        REQUIRE(wrong != st.sessionId);
        auto res = secc_handle(with_id(wrong, ServiceDiscoveryReq{}), st, cfg,
                               rng, 0);
        CHECK(std::get<ServiceDiscoveryRes>(res.body).responseCode ==
              ResponseCode::FailedUnknownSession);
        CHECK(st.aborted);
        // The matching response kind is used, not a generic stop.
        CHECK(kind_name(res.body) == "ServiceDiscoveryRes");
    }

    SECTION("unsupported energy transfer mode") {
        SeccSessionState st;
        st.lastStage = 4;
        st.sessionAssigned = true;
        st.sessionId = SessionId::from_hex("0000000000000001");
        auto res = secc_handle(
            with_id(st.sessionId,
                    ChargeParameterDiscoveryReq{
                        .requestedMode = EnergyTransferMode::DcExtended}),
            st, cfg, rng, 0);
        CHECK(std::get<ChargeParameterDiscoveryRes>(res.body).responseCode ==
              ResponseCode::FailedWrongEnergyTransferMode);
        CHECK(st.aborted);
        CHECK(st.lastStage == 5);
    }

    SECTION("unknown payment service") {
        SeccSessionState st;
        st.lastStage = 2;
        st.sessionAssigned = true;
        st.sessionId = SessionId::from_hex("0000000000000001");
        auto res = secc_handle(
            with_id(st.sessionId,
                    PaymentServiceSelectionReq{.selectedService = "Contract"}),
            st, cfg, rng, 0);
        CHECK(std::get<PaymentServiceSelectionRes>(res.body).responseCode ==
              ResponseCode::FailedServiceSelection);
        CHECK(st.aborted);
    }

    SECTION("out-of-order request") {
        SeccSessionState st;
        auto res = secc_handle(with_id(SessionId::zero(), AuthorizationReq{}),
                               st, cfg, rng, 0);
        CHECK(std::get<SessionStopRes>(res.body).responseCode ==
              ResponseCode::FailedGeneric);
        CHECK(st.aborted);
    }

    SECTION("certificate kinds are refused without killing the session") {
        SeccSessionState st;
        st.lastStage = 4;
        auto res1 = secc_handle(
            with_id(SessionId::zero(), CertificateInstallationReq{}), st, cfg,
            rng, 0);
        CHECK(std::get<CertificateInstallationRes>(res1.body).responseCode ==
              ResponseCode::FailedGeneric);
        auto res2 = secc_handle(
            with_id(SessionId::zero(), CertificateUpdateReq{}), st, cfg, rng,
            0);
        CHECK(std::get<CertificateUpdateRes>(res2.body).responseCode ==
              ResponseCode::FailedGeneric);
        CHECK_FALSE(st.aborted);
        CHECK(st.lastStage == 4);
    }

    SECTION("a response where a request belongs aborts") {
        SeccSessionState st;
        auto res = secc_handle(with_id(SessionId::zero(), AuthorizationRes{}),
                               st, cfg, rng, 0);
        CHECK(std::get<SessionStopRes>(res.body).responseCode ==
              ResponseCode::FailedGeneric);
        CHECK(st.aborted);
    }
}

namespace {

struct Bench {
    netsim::Simulation sim;
    netsim::Host *ev, *se;
    explicit Bench(std::uint64_t seed) : sim(seed) {
        ev = &sim.add_host("ev");
        se = &sim.add_host("se");
        sim.add_switch("sw");
        sim.add_link("ev", "sw");
        sim.add_link("sw", "se");
    }
};

ChargeSessionReport run_session(std::uint64_t seed, EvConfig evCfg,
                                SeConfig seCfg, bool withSecc = true) {
    Bench b(seed);
    std::optional<SeccController> secc;
    if (withSecc) {
        secc.emplace(*b.se, std::move(seCfg));
        secc->start();
    }
    EvccController evcc(*b.ev, std::move(evCfg));
    ChargeSessionReport report;
    evcc.start([&](const ChargeSessionReport& r) { report = r; });
    b.sim.run(netsim::sec(120));
    return report;
}

} // namespace

TEST_CASE("controller vs controller: AC session completes", "[controllers]") {
    ChargeSessionReport r = run_session(42, EvConfig{}, SeConfig{});
    CHECK(r.outcome == Outcome::Completed);
    CHECK(r.lastStageReached == kFinalStage);
    CHECK(r.peerPort == kSdpPort);
    CHECK_FALSE(r.secured);
    CHECK_FALSE(r.sessionId.is_zero());
    CHECK(r.messagesSent == r.messagesReceived);
    // SAP..CPD (6) + PD Start + 3 loop + PD Stop + SessionStop = 12 pairs
    CHECK(r.messagesSent == 12);
    REQUIRE(r.transcript.size() == 24);
    // Strict alternation, matching kinds, non-decreasing stages.
    for (std::size_t i = 0; i < r.transcript.size(); i += 2) {
        CHECK(r.transcript[i].direction == TranscriptEntry::Dir::EvToSe);
        CHECK(r.transcript[i + 1].direction == TranscriptEntry::Dir::SeToEv);
        CHECK(r.transcript[i + 1].kind ==
              r.transcript[i].kind.substr(0, r.transcript[i].kind.size() - 3) +
                  "Res");
        if (i > 0) CHECK(r.transcript[i].stage >= r.transcript[i - 2].stage);
    }
    // Meter: ~5000 Wh over 3 passes with 5% jitter.
    CHECK(r.meterFinal.meterId == "SE001-meter");
    CHECK(r.meterFinal.readingWh >= 3 * (1667 - 83));
    CHECK(r.meterFinal.readingWh <= 3 * (1667 + 83));
}

TEST_CASE("controller vs controller: DC session runs the DC-only stages",
          "[controllers]") {
    EvConfig ev;
    ev.energyTransferModeRequested = EnergyTransferMode::DcExtended;
    ChargeSessionReport r = run_session(43, ev, dc_se());
    CHECK(r.outcome == Outcome::Completed);
    std::vector<std::string> kinds;
    for (const auto& e : r.transcript)
        if (e.direction == TranscriptEntry::Dir::EvToSe) kinds.push_back(e.kind);
    CHECK(std::count(kinds.begin(), kinds.end(), "CableCheckReq") == 1);
    CHECK(std::count(kinds.begin(), kinds.end(), "PreChargeReq") == 1);
    CHECK(std::count(kinds.begin(), kinds.end(), "WeldingDetectionReq") == 1);
    CHECK(std::count(kinds.begin(), kinds.end(), "CurrentDemandReq") == 3);
    CHECK(std::count(kinds.begin(), kinds.end(), "ChargingStatusReq") == 0);
}

TEST_CASE("controller vs controller: requested session id is honored",
          "[controllers]") {
    EvConfig ev;
    ev.sessionId = SessionId::from_hex("00000000000000AA");
    ChargeSessionReport r = run_session(44, ev, SeConfig{});
    CHECK(r.outcome == Outcome::Completed);
    CHECK(r.sessionId.hex() == "00000000000000AA");
}

TEST_CASE("controller vs controller: DC request against an AC-only column",
          "[controllers]") {
    EvConfig ev;
    ev.energyTransferModeRequested = EnergyTransferMode::DcExtended;
    ChargeSessionReport r = run_session(45, ev, SeConfig{}); // AC-only SE
    CHECK(r.outcome == Outcome::FailedSequence);
    CHECK(r.lastStageReached == 5);
    CHECK(r.failureCode == ResponseCode::FailedWrongEnergyTransferMode);
}

TEST_CASE("controller alone: discovery gives up after bounded retries",
          "[controllers]") {
    ChargeSessionReport r =
        run_session(46, EvConfig{}, SeConfig{}, /*withSecc=*/false);
    CHECK(r.outcome == Outcome::FailedDiscoveryTimeout);
    CHECK(r.lastStageReached == kNoStage);
    CHECK(r.messagesSent == 0);
}

TEST_CASE("controller vs controller: sessions are served sequentially",
          "[controllers]") {
    netsim::Simulation sim(77);
    netsim::Host& se = sim.add_host("se");
    netsim::Host& ev1 = sim.add_host("ev1");
    netsim::Host& ev2 = sim.add_host("ev2");
    sim.add_switch("sw");
    sim.add_link("ev1", "sw");
    sim.add_link("ev2", "sw");
    sim.add_link("sw", "se");
    SeccController secc(se, SeConfig{});
    secc.start();
    EvccController a(ev1, EvConfig{}), b(ev2, EvConfig{});
    ChargeSessionReport ra, rb;
    a.start([&](const ChargeSessionReport& r) { ra = r; });
    b.start([&](const ChargeSessionReport& r) { rb = r; });
    sim.run(netsim::sec(300));
    CHECK(ra.outcome == Outcome::Completed);
    CHECK(rb.outcome == Outcome::Completed);
    CHECK(secc.sessions_served() == 2);
    CHECK(ra.sessionId != rb.sessionId);
}

TEST_CASE("report serialization carries the diagnostics", "[controllers]") {
    ChargeSessionReport r;
    r.outcome = Outcome::FailedSequence;
    r.lastStageReached = 5;
    r.failureCode = ResponseCode::FailedWrongEnergyTransferMode;
    r.transcript.push_back(
        TranscriptEntry{TranscriptEntry::Dir::EvToSe, "SessionSetupReq", 1});
    auto j = report_to_json(r);
    CHECK(j["outcome"] == "FailedSequence");
    CHECK(j["failureCode"] == "FailedWrongEnergyTransferMode");
    CHECK(j["transcript"][0]["kind"] == "SessionSetupReq");
    CHECK(outcome_from_name(j["outcome"].get<std::string>()) ==
          Outcome::FailedSequence);
}
