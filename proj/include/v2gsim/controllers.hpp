#pragma once

// EVCC and SECC state machines driving a full charge session over the
// simulated network: SDP discovery with retry, optional secure channel,
// protocol negotiation, the staged request/response sequence, and a
// per-session report.
//
// Both controllers are event-driven and confined to one simulation; every
// wait is bounded by a timer, so a session always produces a report.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <istream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "v2gsim/messages.hpp"
#include "v2gsim/netsim.hpp"
#include "v2gsim/securechannel.hpp"
#include "v2gsim/wire.hpp"

namespace v2gsim::controllers {

using messages::EnergyTransferMode;
using messages::ResponseCode;
using messages::SessionId;
using messages::V2GMessage;

/// Well-known discovery port; the SECC's V2G stream listener shares it.
inline constexpr std::uint16_t kSdpPort = 15118;

inline constexpr netsim::SimTime kSdpRetryInterval = netsim::msec(250);
inline constexpr int kSdpAttempts = 10;
inline constexpr netsim::SimTime kResponseTimeout = netsim::msec(2000);

inline const std::string kIso2Namespace = "urn:iso:15118:2:2013:MsgDef";

/// The protocol versions both honest sides speak.
inline std::vector<messages::AppProtocol> default_protocols() {
    return {messages::AppProtocol{kIso2Namespace, 2, 0, 1, 1}};
}

// ---- configuration --------------------------------------------------------

enum class ConfigErrc { ParseError, UnknownPropertyKey, ConstraintViolation };

class ConfigError : public Error {
public:
    ConfigError(ConfigErrc c, std::string msg)
        : Error(std::move(msg)), code_(c) {}
    ConfigErrc code() const { return code_; }

private:
    ConfigErrc code_;
};

struct EvConfig {
    double voltageAccuracy = 0.05; // fraction in (0, 1]
    bool tls = false;
    std::optional<SessionId> sessionId; // requested id, normally absent
    std::string networkInterface = "eth0";
    EnergyTransferMode energyTransferModeRequested =
        EnergyTransferMode::AcSinglePhase;
    messages::EvccId evccId{}; // all-zero: derived from the host link address
    std::uint32_t chargingLoopIterations = 3;
    std::uint64_t energyRequestWh = 5000;
    std::optional<securechannel::TrustAnchor> trustAnchor; // needed iff tls

    void validate() const {
        if (chargingLoopIterations < 1)
            throw ConfigError(ConfigErrc::ConstraintViolation,
                              "charging loop iterations must be >= 1");
        if (!(voltageAccuracy > 0.0) || voltageAccuracy > 1.0)
            throw ConfigError(ConfigErrc::ConstraintViolation,
                              "voltage.accuracy must be in (0, 1]");
    }
};

struct SeConfig {
    bool freeService = false;
    std::string networkInterface = "eth0";
    std::vector<EnergyTransferMode> energyTransferModesSupported = {
        EnergyTransferMode::AcSinglePhase};
    std::string evseId = "SE001";
    std::uint16_t sdpPort = kSdpPort;
    bool tls = false; // request identity provisioning when run from a topology
    std::optional<securechannel::Identity> tlsIdentity;

    void validate() const {
        if (energyTransferModesSupported.empty())
            throw ConfigError(ConfigErrc::ConstraintViolation,
                              "energy.transfermodes.supported must be non-empty");
        for (std::size_t i = 0; i < energyTransferModesSupported.size(); ++i)
            for (std::size_t j = i + 1; j < energyTransferModesSupported.size();
                 ++j)
                if (energyTransferModesSupported[i] ==
                    energyTransferModesSupported[j])
                    throw ConfigError(ConfigErrc::ConstraintViolation,
                                      "duplicate energy transfer mode");
        if (sdpPort == 0)
            throw ConfigError(ConfigErrc::ConstraintViolation,
                              "sdp.port must be non-zero");
    }
};

// ---- property files ---------------------------------------------------------

namespace detail2 {

inline std::vector<std::pair<std::string, std::string>>
parse_property_lines(std::istream& in) {
    std::vector<std::pair<std::string, std::string>> out;
    std::string line;
    int lineNo = 0;
    auto trim = [](std::string s) {
        std::size_t a = s.find_first_not_of(" \t\r");
        std::size_t b = s.find_last_not_of(" \t\r");
        return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
    };
    while (std::getline(in, line)) {
        ++lineNo;
        std::string t = trim(line);
        if (t.empty() || t[0] == '#') continue;
        std::size_t eq = t.find('=');
        if (eq == std::string::npos)
            throw ConfigError(ConfigErrc::ParseError,
                              "line " + std::to_string(lineNo) +
                                  ": expected key=value");
        out.emplace_back(trim(t.substr(0, eq)), trim(t.substr(eq + 1)));
    }
    return out;
}

inline bool parse_bool_value(const std::string& key, const std::string& v) {
    if (v == "true") return true;
    if (v == "false") return false;
    throw ConfigError(ConfigErrc::ConstraintViolation,
                      key + ": boolean expected, got \"" + v + "\"");
}

inline std::uint64_t parse_uint_value(const std::string& key,
                                      const std::string& v) {
    if (v.empty() || v.size() > 19)
        throw ConfigError(ConfigErrc::ConstraintViolation,
                          key + ": integer expected");
    std::uint64_t out = 0;
    for (char c : v) {
        if (c < '0' || c > '9')
            throw ConfigError(ConfigErrc::ConstraintViolation,
                              key + ": integer expected, got \"" + v + "\"");
        out = out * 10 + static_cast<std::uint64_t>(c - '0');
    }
    return out;
}

inline EnergyTransferMode parse_mode_value(const std::string& key,
                                           const std::string& v) {
    try {
        return messages::mode_from_name(v);
    } catch (const Error&) {
        throw ConfigError(ConfigErrc::ConstraintViolation,
                          key + ": unknown mode \"" + v + "\"");
    }
}

} // namespace detail2

/// EV property file: the published dotted keys plus the documented
/// extensions charging.loop.iterations and energy.request.
inline EvConfig parse_ev_properties(std::istream& in) {
    EvConfig cfg;
    for (const auto& [key, value] : detail2::parse_property_lines(in)) {
        if (key == "voltage.accuracy") {
            try {
                std::size_t pos = 0;
                cfg.voltageAccuracy = std::stod(value, &pos);
                if (pos != value.size()) throw std::invalid_argument(value);
            } catch (const std::exception&) {
                throw ConfigError(ConfigErrc::ConstraintViolation,
                                  "voltage.accuracy: number expected");
            }
        } else if (key == "tls") {
            cfg.tls = detail2::parse_bool_value(key, value);
        } else if (key == "session.id") {
            try {
                cfg.sessionId = SessionId::from_hex(value);
            } catch (const Error&) {
                throw ConfigError(ConfigErrc::ConstraintViolation,
                                  "session.id: 16 hex digits expected");
            }
        } else if (key == "network.interface") {
            cfg.networkInterface = value;
        } else if (key == "energy.transfermode.requested") {
            cfg.energyTransferModeRequested =
                detail2::parse_mode_value(key, value);
        } else if (key == "charging.loop.iterations") {
            std::uint64_t n = detail2::parse_uint_value(key, value);
            if (n < 1 || n > 1000000)
                throw ConfigError(ConfigErrc::ConstraintViolation,
                                  "charging.loop.iterations out of range");
            cfg.chargingLoopIterations = static_cast<std::uint32_t>(n);
        } else if (key == "energy.request") {
            cfg.energyRequestWh = detail2::parse_uint_value(key, value);
        } else {
            throw ConfigError(ConfigErrc::UnknownPropertyKey,
                              "unknown EV property key: " + key);
        }
    }
    cfg.validate();
    return cfg;
}

inline EvConfig parse_ev_properties(const std::string& text) {
    std::istringstream in(text);
    return parse_ev_properties(in);
}

/// SE property file: published dotted keys plus the extensions evse.id and
/// sdp.port. Mode list is comma-separated.
inline SeConfig parse_se_properties(std::istream& in) {
    SeConfig cfg;
    for (const auto& [key, value] : detail2::parse_property_lines(in)) {
        if (key == "free.service") {
            cfg.freeService = detail2::parse_bool_value(key, value);
        } else if (key == "network.interface") {
            cfg.networkInterface = value;
        } else if (key == "energy.transfermodes.supported") {
            cfg.energyTransferModesSupported.clear();
            std::string item;
            std::istringstream list(value);
            while (std::getline(list, item, ',')) {
                std::size_t a = item.find_first_not_of(" \t");
                std::size_t b = item.find_last_not_of(" \t");
                if (a == std::string::npos)
                    throw ConfigError(ConfigErrc::ConstraintViolation,
                                      key + ": empty list entry");
                cfg.energyTransferModesSupported.push_back(
                    detail2::parse_mode_value(key, item.substr(a, b - a + 1)));
            }
        } else if (key == "tls") {
            cfg.tls = detail2::parse_bool_value(key, value);
        } else if (key == "evse.id") {
            cfg.evseId = value;
        } else if (key == "sdp.port") {
            std::uint64_t p = detail2::parse_uint_value(key, value);
            if (p == 0 || p > 65535)
                throw ConfigError(ConfigErrc::ConstraintViolation,
                                  "sdp.port out of range");
            cfg.sdpPort = static_cast<std::uint16_t>(p);
        } else {
            throw ConfigError(ConfigErrc::UnknownPropertyKey,
                              "unknown SE property key: " + key);
        }
    }
    cfg.validate();
    return cfg;
}

inline SeConfig parse_se_properties(const std::string& text) {
    std::istringstream in(text);
    return parse_se_properties(in);
}

// ---- report -----------------------------------------------------------------

enum class Outcome {
    Completed,
    FailedNegotiation,
    FailedHandshake,
    FailedSequence,
    FailedDiscoveryTimeout,
    FailedTransport,
};

inline std::string outcome_name(Outcome o) {
    switch (o) {
    case Outcome::Completed: return "Completed";
    case Outcome::FailedNegotiation: return "FailedNegotiation";
    case Outcome::FailedHandshake: return "FailedHandshake";
    case Outcome::FailedSequence: return "FailedSequence";
    case Outcome::FailedDiscoveryTimeout: return "FailedDiscoveryTimeout";
    case Outcome::FailedTransport: return "FailedTransport";
    }
    return "?";
}

inline Outcome outcome_from_name(std::string_view s) {
    if (s == "Completed") return Outcome::Completed;
    if (s == "FailedNegotiation") return Outcome::FailedNegotiation;
    if (s == "FailedHandshake") return Outcome::FailedHandshake;
    if (s == "FailedSequence") return Outcome::FailedSequence;
    if (s == "FailedDiscoveryTimeout") return Outcome::FailedDiscoveryTimeout;
    if (s == "FailedTransport") return Outcome::FailedTransport;
    throw Error("unknown outcome: " + std::string(s));
}

struct TranscriptEntry {
    enum class Dir { EvToSe, SeToEv };
    Dir direction = Dir::EvToSe;
    std::string kind;
    int stage = messages::kNoStage;

    bool operator==(const TranscriptEntry&) const = default;
};

struct ChargeSessionReport {
    Outcome outcome = Outcome::FailedTransport;
    int lastStageReached = messages::kNoStage;
    SessionId sessionId;
    std::uint64_t messagesSent = 0;
    std::uint64_t messagesReceived = 0;
    messages::MeterInfo meterFinal; // synthetic meter model, not physics
    std::vector<TranscriptEntry> transcript;
    // Diagnostics beyond the outcome enum:
    std::uint16_t peerPort = 0; // SECC port learned from the SDP response
    bool secured = false;       // channel ran over the secure layer
    std::optional<ResponseCode> failureCode; // non-Ok code that ended the run
    std::optional<securechannel::HandshakeFailureReason> handshakeFailure;

    bool operator==(const ChargeSessionReport&) const = default;
};

inline nlohmann::ordered_json report_to_json(const ChargeSessionReport& r) {
    nlohmann::ordered_json j;
    j["outcome"] = outcome_name(r.outcome);
    j["lastStageReached"] = r.lastStageReached;
    j["sessionId"] = r.sessionId.hex();
    j["messagesSent"] = r.messagesSent;
    j["messagesReceived"] = r.messagesReceived;
    j["meterFinal"] = {{"meterId", r.meterFinal.meterId},
                       {"readingWh", r.meterFinal.readingWh},
                       {"timestampMs", r.meterFinal.timestampMs}};
    j["peerPort"] = r.peerPort;
    j["secured"] = r.secured;
    if (r.failureCode)
        j["failureCode"] = messages::response_code_name(*r.failureCode);
    if (r.handshakeFailure)
        j["handshakeFailure"] = securechannel::reason_name(*r.handshakeFailure);
    nlohmann::ordered_json t = nlohmann::ordered_json::array();
    for (const auto& e : r.transcript)
        t.push_back({{"dir", e.direction == TranscriptEntry::Dir::EvToSe
                                 ? "EvToSe"
                                 : "SeToEv"},
                     {"kind", e.kind},
                     {"stage", e.stage}});
    j["transcript"] = t;
    return j;
}

// ---- negotiation / session id ------------------------------------------------

/// Picks the best matching offer: same (namespace, versionMajor) as a
/// supported entry, versionMinor at least the supported minimum. Priority 1
/// is the most preferred; ties go to the earlier offer.
inline std::optional<std::uint8_t>
negotiate_protocol(const std::vector<messages::AppProtocol>& offers,
                   const std::vector<messages::AppProtocol>& supported) {
    const messages::AppProtocol* best = nullptr;
    for (const auto& offer : offers) {
        bool matches = false;
        for (const auto& s : supported)
            if (offer.protocolNamespace == s.protocolNamespace &&
                offer.versionMajor == s.versionMajor &&
                offer.versionMinor >= s.versionMinor)
                matches = true;
        if (!matches) continue;
        if (!best || offer.priority < best->priority) best = &offer;
    }
    if (!best) return std::nullopt;
    return best->schemaId;
}

/// Honors a non-zero requested id, otherwise draws a fresh non-zero one.
inline SessionId assign_session_id(const std::optional<SessionId>& requested,
                                   std::mt19937_64& rng) {
    if (requested && !requested->is_zero()) return *requested;
    SessionId id;
    do {
        securechannel::detail2::fill_random(rng, id.value.data(),
                                            id.value.size());
    } while (id.is_zero());
    return id;
}

// ---- SECC message semantics ----------------------------------------------------

struct SeccSessionState {
    int lastStage = messages::kNoStage;
    SessionId sessionId;
    bool sessionAssigned = false;
    bool dc = false;
    bool aborted = false;   // answer was terminal; drop the stream after it
    bool completed = false; // SessionStop answered Ok
    messages::MeterInfo meter;
    std::uint64_t meterIncrementWh = 0;
    std::uint32_t accuracyPermille = 0;
    std::optional<std::uint8_t> negotiatedSchema;
};

namespace detail2 {

/// D-C3 synthetic meter: per-pass increment with ±accuracy jitter drawn from
/// the seeded generator, never negative so the reading stays monotonic.
inline std::uint64_t meter_step(std::uint64_t incrementWh,
                                std::uint32_t accuracyPermille,
                                std::mt19937_64& rng) {
    std::uint64_t band = incrementWh * accuracyPermille / 1000;
    if (band == 0) return incrementWh;
    std::uint64_t span = 2 * band + 1;
    std::int64_t jitter =
        static_cast<std::int64_t>(rng() % span) - static_cast<std::int64_t>(band);
    return incrementWh + static_cast<std::uint64_t>(
                             std::max<std::int64_t>(jitter, -static_cast<std::int64_t>(incrementWh)));
}

inline messages::MeterInfo& advance_meter(SeccSessionState& state,
                                          std::mt19937_64& rng,
                                          std::int64_t nowMs) {
    state.meter.readingWh += meter_step(state.meterIncrementWh,
                                        state.accuracyPermille, rng);
    state.meter.timestampMs = nowMs;
    return state.meter;
}

} // namespace detail2

/// One request in, one response out. All failures are response codes; a
/// terminal failure also sets state.aborted so the caller can end the
/// session after sending the response.
inline V2GMessage secc_handle(const V2GMessage& msg, SeccSessionState& state,
                              const SeConfig& config, std::mt19937_64& rng,
                              std::int64_t nowMs) {
    using namespace messages;

    V2GMessage res;
    res.sessionId = state.sessionId;

    // Certificate-management kinds sit outside the charge sequence and are
    // uniformly refused without disturbing the session.
    if (std::holds_alternative<CertificateInstallationReq>(msg.body)) {
        res.body = CertificateInstallationRes{ResponseCode::FailedGeneric};
        return res;
    }
    if (std::holds_alternative<CertificateUpdateReq>(msg.body)) {
        res.body = CertificateUpdateRes{ResponseCode::FailedGeneric};
        return res;
    }

    if (!is_request(msg.body)) {
        state.aborted = true;
        res.body = SessionStopRes{ResponseCode::FailedGeneric};
        return res;
    }

    // Session-id discipline: every post-setup message must carry the
    // assigned id.
    int msgStage = stage_of(msg.body);
    bool needsSessionId = state.sessionAssigned && msgStage >= 2;
    if (needsSessionId && msg.sessionId != state.sessionId) {
        state.aborted = true;
        auto failed = [&](auto bodyTemplate) {
            bodyTemplate.responseCode = ResponseCode::FailedUnknownSession;
            res.body = bodyTemplate;
        };
        std::visit(
            [&](const auto& b) {
                using T = std::decay_t<decltype(b)>;
                if constexpr (std::is_same_v<T, ServiceDiscoveryReq>)
                    failed(ServiceDiscoveryRes{});
                else if constexpr (std::is_same_v<T, PaymentServiceSelectionReq>)
                    failed(PaymentServiceSelectionRes{});
                else if constexpr (std::is_same_v<T, AuthorizationReq>)
                    failed(AuthorizationRes{});
                else if constexpr (std::is_same_v<T, ChargeParameterDiscoveryReq>)
                    failed(ChargeParameterDiscoveryRes{});
                else if constexpr (std::is_same_v<T, CableCheckReq>)
                    failed(CableCheckRes{});
                else if constexpr (std::is_same_v<T, PreChargeReq>)
                    failed(PreChargeRes{});
                else if constexpr (std::is_same_v<T, PowerDeliveryReq>)
                    failed(PowerDeliveryRes{});
                else if constexpr (std::is_same_v<T, ChargingStatusReq>)
                    failed(ChargingStatusRes{});
                else if constexpr (std::is_same_v<T, CurrentDemandReq>)
                    failed(CurrentDemandRes{});
                else if constexpr (std::is_same_v<T, MeteringReceiptReq>)
                    failed(MeteringReceiptRes{});
                else if constexpr (std::is_same_v<T, WeldingDetectionReq>)
                    failed(WeldingDetectionRes{});
                else
                    failed(SessionStopRes{});
            },
            msg.body);
        return res;
    }

    if (auto violation =
            validate_transition(state.lastStage, msg.body, state.dc)) {
        state.aborted = true;
        res.body = SessionStopRes{ResponseCode::FailedGeneric};
        return res;
    }

    if (const auto* sap = std::get_if<SupportedAppProtocolReq>(&msg.body)) {
        auto schema = negotiate_protocol(sap->offers, default_protocols());
        SupportedAppProtocolRes body;
        if (schema) {
            body.responseCode = ResponseCode::Ok;
            body.schemaId = schema;
            state.negotiatedSchema = schema;
            state.lastStage = 0;
        } else {
            body.responseCode = ResponseCode::FailedNoNegotiation;
            state.lastStage = 0;
            state.aborted = true;
        }
        res.body = body;
        return res;
    }

    if (std::get_if<SessionSetupReq>(&msg.body)) {
        std::optional<SessionId> requested;
        if (!msg.sessionId.is_zero()) requested = msg.sessionId;
        state.sessionId = assign_session_id(requested, rng);
        state.sessionAssigned = true;
        state.lastStage = 1;
        res.sessionId = state.sessionId;
        res.body = SessionSetupRes{ResponseCode::Ok, config.evseId, nowMs};
        return res;
    }

    if (std::get_if<ServiceDiscoveryReq>(&msg.body)) {
        state.lastStage = 2;
        res.body = ServiceDiscoveryRes{ResponseCode::Ok, config.freeService,
                                       config.energyTransferModesSupported};
        return res;
    }

    if (const auto* sel = std::get_if<PaymentServiceSelectionReq>(&msg.body)) {
        PaymentServiceSelectionRes body;
        if (sel->selectedService == "ExternalPayment") {
            body.responseCode = ResponseCode::Ok;
            state.lastStage = 3;
        } else {
            body.responseCode = ResponseCode::FailedServiceSelection;
            state.lastStage = 3;
            state.aborted = true;
        }
        res.body = body;
        return res;
    }

    if (std::get_if<AuthorizationReq>(&msg.body)) {
        state.lastStage = 4;
        res.body = AuthorizationRes{ResponseCode::Ok};
        return res;
    }

    if (const auto* cpd = std::get_if<ChargeParameterDiscoveryReq>(&msg.body)) {
        ChargeParameterDiscoveryRes body;
        bool supported = false;
        for (auto m : config.energyTransferModesSupported)
            if (m == cpd->requestedMode) supported = true;
        state.lastStage = 5;
        if (!supported) {
            body.responseCode = ResponseCode::FailedWrongEnergyTransferMode;
            state.aborted = true;
        } else {
            body.responseCode = ResponseCode::Ok;
            state.dc = is_dc(cpd->requestedMode);
            body.evseMaxVoltageV = state.dc ? 500 : 400;
            body.evseMaxCurrentA = state.dc ? 200 : 63;
            std::uint32_t passes = std::max<std::uint32_t>(
                cpd->plannedLoopIterations, 1);
            state.meterIncrementWh = static_cast<std::uint64_t>(
                std::llround(static_cast<double>(cpd->energyRequestWh) /
                             static_cast<double>(passes)));
            state.accuracyPermille = cpd->voltageAccuracyPermille;
            state.meter.meterId = config.evseId + "-meter";
        }
        res.body = body;
        return res;
    }

    if (std::get_if<CableCheckReq>(&msg.body)) {
        state.lastStage = 6;
        res.body = CableCheckRes{ResponseCode::Ok};
        return res;
    }

    if (const auto* pre = std::get_if<PreChargeReq>(&msg.body)) {
        state.lastStage = 7;
        res.body = PreChargeRes{ResponseCode::Ok, pre->targetVoltageV};
        return res;
    }

    if (const auto* pd = std::get_if<PowerDeliveryReq>(&msg.body)) {
        state.lastStage = stage_of_power_delivery(pd->chargeProgress);
        res.body = PowerDeliveryRes{ResponseCode::Ok};
        return res;
    }

    if (std::get_if<ChargingStatusReq>(&msg.body)) {
        state.lastStage = kLoopStage;
        res.body = ChargingStatusRes{
            ResponseCode::Ok, detail2::advance_meter(state, rng, nowMs)};
        return res;
    }

    if (const auto* cd = std::get_if<CurrentDemandReq>(&msg.body)) {
        state.lastStage = kLoopStage;
        res.body = CurrentDemandRes{ResponseCode::Ok, cd->targetVoltageV,
                                    cd->targetCurrentA,
                                    detail2::advance_meter(state, rng, nowMs)};
        return res;
    }

    if (std::get_if<MeteringReceiptReq>(&msg.body)) {
        state.lastStage = kLoopStage;
        res.body = MeteringReceiptRes{ResponseCode::Ok};
        return res;
    }

    if (std::get_if<WeldingDetectionReq>(&msg.body)) {
        state.lastStage = 11;
        res.body = WeldingDetectionRes{ResponseCode::Ok, 0};
        return res;
    }

    if (std::get_if<SessionStopReq>(&msg.body)) {
        state.lastStage = messages::kFinalStage;
        state.completed = true;
        res.body = SessionStopRes{ResponseCode::Ok};
        return res;
    }

    state.aborted = true;
    res.body = SessionStopRes{ResponseCode::FailedGeneric};
    return res;
}

// ---- SECC controller ------------------------------------------------------------

/// Answers SDP on the discovery port and serves charge sessions on the same
/// port number over the stream transport, one EV at a time; further
/// connections queue until the active session ends.
class SeccController {
public:
    SeccController(netsim::Host& host, SeConfig config)
        : host_(host), config_(std::move(config)) {
        config_.validate();
    }

    void start() {
        host_.udp_bind(config_.sdpPort,
                       [this](const netsim::NetAddress& src,
                              std::uint16_t srcPort, BytesView payload) {
                           on_sdp(src, srcPort, payload);
                       });
        host_.stream_listen(config_.sdpPort,
                            [this](std::shared_ptr<netsim::Stream> s) {
                                on_connect(std::move(s));
                            });
    }

    const SeConfig& config() const { return config_; }
    std::size_t sessions_served() const { return served_.size(); }
    const std::vector<SeccSessionState>& served() const { return served_; }

private:
    struct Session {
        std::shared_ptr<netsim::Stream> stream;
        SeccSessionState state;
        wire::V2gtpReassembler frames;
        // secure-channel plumbing (engaged only when the SECC has an identity)
        std::optional<securechannel::Handshake> handshake;
        std::optional<securechannel::RecordChannel> channel;
        securechannel::FlightBuffer flights;
        bool dead = false;
    };

    void on_sdp(const netsim::NetAddress& src, std::uint16_t srcPort,
                BytesView payload) {
        wire::DecodedFrame frame;
        try {
            frame = wire::decode_v2gtp(payload);
        } catch (const wire::WireError&) {
            return;
        }
        if (frame.header.payloadType != wire::PayloadType::SdpRequest) return;
        try {
            (void)wire::decode_sdp_request(frame.payload);
        } catch (const wire::WireError&) {
            return;
        }
        wire::SdpResponse res;
        res.seccAddress = host_.net_address().bytes;
        res.seccPort = config_.sdpPort;
        res.security = config_.tlsIdentity ? wire::SdpSecurity::SecuredWithTls
                                           : wire::SdpSecurity::PlainTcp;
        res.transport = wire::SdpTransport::Tcp;
        Bytes out = wire::encode_v2gtp(wire::PayloadType::SdpResponse,
                                       wire::encode_sdp_response(res));
        host_.send_datagram(src, srcPort, out, config_.sdpPort);
    }

    void on_connect(std::shared_ptr<netsim::Stream> stream) {
        auto session = std::make_shared<Session>();
        session->stream = stream;
        if (config_.tlsIdentity)
            session->handshake = securechannel::Handshake::server(
                *config_.tlsIdentity, host_.simulation().rng());
        netsim::Stream::Callbacks cbs;
        cbs.on_data = [this, session](BytesView data) {
            on_data(*session, data);
        };
        cbs.on_closed = [this, session]() { end_session(*session); };
        cbs.on_error = [this, session](const std::string&) {
            end_session(*session);
        };
        stream->set_callbacks(std::move(cbs));
        if (active_) {
            waiting_.push_back(session);
        } else {
            active_ = session;
        }
    }

    void end_session(Session& session) {
        if (session.dead) return;
        session.dead = true;
        served_.push_back(session.state);
        if (active_ && active_.get() == &session) {
            active_.reset();
            while (!waiting_.empty() && !active_) {
                auto next = waiting_.front();
                waiting_.erase(waiting_.begin());
                if (next->dead) continue;
                active_ = next;
                drain(*next); // serve bytes that arrived while queued
            }
        }
    }

    void on_data(Session& session, BytesView data) {
        if (config_.tlsIdentity && !session.channel) {
            session.flights.feed(data);
            pump_handshake(session);
            return;
        }
        if (session.channel) {
            session.flights.feed(data);
            pump_records(session);
            return;
        }
        session.frames.feed(data);
        if (active_.get() != &session) return; // queued: bytes buffered
        drain(session);
    }

    void pump_handshake(Session& session) {
        try {
            while (auto flight = session.flights.next()) {
                auto reply = session.handshake->on_flight(*flight);
                if (reply)
                    session.stream->send(securechannel::frame_blob(*reply));
                if (session.handshake->done()) {
                    session.channel.emplace(session.handshake->keys(), false);
                    return;
                }
            }
        } catch (const securechannel::HandshakeFailure&) {
            close_session(session);
        } catch (const Error&) {
            close_session(session);
        }
    }

    void pump_records(Session& session) {
        try {
            while (auto record = session.flights.next()) {
                Bytes plain = session.channel->open(*record);
                session.frames.feed(plain);
            }
        } catch (const Error&) {
            close_session(session);
            return;
        }
        if (active_.get() == &session) drain(session);
    }

    void drain(Session& session) {
        if (session.dead) return;
        try {
            while (auto frame = session.frames.next()) {
                if (frame->header.payloadType !=
                    wire::PayloadType::ExiV2gMessage) {
                    close_session(session);
                    return;
                }
                V2GMessage msg = messages::from_exi(frame->payload);
                V2GMessage res = secc_handle(
                    msg, session.state, config_, host_.simulation().rng(),
                    host_.simulation().now() / 1000);
                Bytes out = wire::encode_v2gtp(wire::PayloadType::ExiV2gMessage,
                                               messages::to_exi(res));
                if (session.channel) out = securechannel::frame_blob(
                        session.channel->seal(out));
                session.stream->send(out);
                if (session.state.aborted || session.state.completed) {
                    // the EV closes after a terminal response; nothing more
                    // to read on this session
                    return;
                }
            }
        } catch (const Error&) {
            close_session(session);
        }
    }

    void close_session(Session& session) {
        if (session.dead) return;
        std::shared_ptr<netsim::Stream> s = session.stream;
        end_session(session);
        s->close();
    }

    netsim::Host& host_;
    SeConfig config_;
    std::shared_ptr<Session> active_;
    std::vector<std::shared_ptr<Session>> waiting_;
    std::vector<SeccSessionState> served_;
};

// ---- EVCC controller -------------------------------------------------------------

class EvccController {
public:
    EvccController(netsim::Host& host, EvConfig config)
        : host_(host), config_(std::move(config)) {
        config_.validate();
        if (config_.evccId == messages::EvccId{})
            config_.evccId = host_.link_address().bytes;
    }

    /// Kicks off discovery; `onDone` fires exactly once with the report.
    void start(std::function<void(const ChargeSessionReport&)> onDone) {
        onDone_ = std::move(onDone);
        if (config_.sessionId) report_.sessionId = *config_.sessionId;
        sdpSrcPort_ = host_.ephemeral_port();
        host_.udp_bind(sdpSrcPort_,
                       [this](const netsim::NetAddress& src,
                              std::uint16_t srcPort, BytesView payload) {
                           on_sdp_response(src, srcPort, payload);
                       });
        send_sdp_request();
    }

    bool done() const { return done_; }
    const ChargeSessionReport& report() const { return report_; }

private:
    void finish(Outcome outcome) {
        if (done_) return;
        done_ = true;
        report_.outcome = outcome;
        sdpTimer_.cancel();
        responseTimer_.cancel();
        if (host_.udp_bound(sdpSrcPort_)) host_.udp_unbind(sdpSrcPort_);
        if (stream_ && !stream_->closed()) stream_->close();
        if (onDone_) onDone_(report_);
    }

    // -- discovery (D-C4 retry policy)

    void send_sdp_request() {
        if (done_) return;
        if (sdpAttempts_ >= kSdpAttempts) {
            finish(Outcome::FailedDiscoveryTimeout);
            return;
        }
        ++sdpAttempts_;
        wire::SdpRequest req;
        req.security = config_.tls ? wire::SdpSecurity::SecuredWithTls
                                   : wire::SdpSecurity::PlainTcp;
        Bytes out = wire::encode_v2gtp(wire::PayloadType::SdpRequest,
                                       wire::encode_sdp_request(req));
        host_.send_datagram(netsim::NetAddress::all_nodes(), kSdpPort, out,
                            sdpSrcPort_);
        sdpTimer_ = host_.simulation().scheduler().in(
            kSdpRetryInterval, [this]() { send_sdp_request(); });
    }

    void on_sdp_response(const netsim::NetAddress&, std::uint16_t,
                         BytesView payload) {
        if (done_ || connecting_) return;
        wire::SdpResponse res;
        try {
            wire::DecodedFrame frame = wire::decode_v2gtp(payload);
            if (frame.header.payloadType != wire::PayloadType::SdpResponse)
                return;
            res = wire::decode_sdp_response(frame.payload);
        } catch (const wire::WireError&) {
            return; // garbled answers don't end discovery
        }
        connecting_ = true;
        sdpTimer_.cancel();
        host_.udp_unbind(sdpSrcPort_);
        report_.peerPort = res.seccPort;
        // Channel rule (two-sided): secured iff this EV wants TLS and the
        // SECC advertised it. A secured-only SECC is unusable for a plain EV.
        bool seccSecured = res.security == wire::SdpSecurity::SecuredWithTls;
        secured_ = config_.tls && seccSecured;
        if (seccSecured && !config_.tls) {
            finish(Outcome::FailedHandshake);
            return;
        }
        if (secured_ && !config_.trustAnchor) {
            report_.handshakeFailure =
                securechannel::HandshakeFailureReason::CertificateVerifyFailure;
            finish(Outcome::FailedHandshake);
            return;
        }
        report_.secured = secured_;
        netsim::NetAddress dst;
        dst.bytes = res.seccAddress;
        connect(dst, res.seccPort);
    }

    // -- transport

    void connect(const netsim::NetAddress& dst, std::uint16_t port) {
        netsim::Stream::Callbacks cbs;
        cbs.on_established = [this]() { on_established(); };
        cbs.on_data = [this](BytesView data) { on_data(data); };
        cbs.on_error = [this](const std::string&) {
            finish(Outcome::FailedTransport);
        };
        cbs.on_closed = [this]() {
            if (!done_) finish(Outcome::FailedTransport);
        };
        stream_ = host_.stream_connect(dst, port, std::move(cbs));
        arm_response_timer();
    }

    void on_established() {
        if (secured_) {
            handshake_ = securechannel::Handshake::client(
                *config_.trustAnchor, host_.simulation().rng());
            auto f1 = handshake_->start();
            stream_->send(securechannel::frame_blob(*f1));
            arm_response_timer();
            return;
        }
        build_script();
        send_next_request();
    }

    void on_data(BytesView data) {
        if (done_) return;
        if (handshake_ && !channel_) {
            flights_.feed(data);
            pump_handshake();
            return;
        }
        if (channel_) {
            flights_.feed(data);
            pump_records();
            return;
        }
        frames_.feed(data);
        drain();
    }

    void pump_handshake() {
        try {
            while (auto flight = flights_.next()) {
                auto reply = handshake_->on_flight(*flight);
                if (reply) stream_->send(securechannel::frame_blob(*reply));
                if (handshake_->done()) {
                    channel_.emplace(handshake_->keys(), true);
                    responseTimer_.cancel();
                    build_script();
                    send_next_request();
                    return;
                }
                arm_response_timer();
            }
        } catch (const securechannel::HandshakeFailure& e) {
            report_.handshakeFailure = e.reason();
            finish(Outcome::FailedHandshake);
        } catch (const Error&) {
            report_.handshakeFailure =
                securechannel::HandshakeFailureReason::TranscriptMismatch;
            finish(Outcome::FailedHandshake);
        }
    }

    void pump_records() {
        try {
            while (auto record = flights_.next()) {
                frames_.feed(channel_->open(*record));
            }
        } catch (const Error&) {
            finish(Outcome::FailedTransport);
            return;
        }
        drain();
    }

    // -- the charge sequence

    void build_script() {
        using namespace messages;
        bool dc = is_dc(config_.energyTransferModeRequested);

        script_.clear();
        script_.push_back(SupportedAppProtocolReq{default_protocols()});
        script_.push_back(SessionSetupReq{config_.evccId});
        script_.push_back(ServiceDiscoveryReq{});
        script_.push_back(PaymentServiceSelectionReq{});
        script_.push_back(AuthorizationReq{});
        ChargeParameterDiscoveryReq cpd;
        cpd.requestedMode = config_.energyTransferModeRequested;
        cpd.maxVoltageV = dc ? 500 : 400;
        cpd.maxCurrentA = dc ? 200 : 32;
        cpd.energyRequestWh = config_.energyRequestWh;
        cpd.plannedLoopIterations = config_.chargingLoopIterations;
        cpd.voltageAccuracyPermille = static_cast<std::uint32_t>(
            std::llround(config_.voltageAccuracy * 1000.0));
        script_.push_back(cpd);
        if (dc) {
            script_.push_back(CableCheckReq{});
            script_.push_back(PreChargeReq{400, 10});
        }
        script_.push_back(PowerDeliveryReq{ChargeProgress::Start});
        for (std::uint32_t i = 0; i < config_.chargingLoopIterations; ++i) {
            if (dc) script_.push_back(CurrentDemandReq{400, 100});
            else script_.push_back(ChargingStatusReq{});
        }
        script_.push_back(PowerDeliveryReq{ChargeProgress::Stop});
        if (dc) script_.push_back(WeldingDetectionReq{});
        script_.push_back(SessionStopReq{TerminationType::Terminate});
        scriptIndex_ = 0;
    }

    int stage_of_exchange(const messages::Body& reqBody) const {
        if (const auto* pd =
                std::get_if<messages::PowerDeliveryReq>(&reqBody))
            return messages::stage_of_power_delivery(pd->chargeProgress);
        return messages::stage_of(reqBody);
    }

    void send_next_request() {
        if (scriptIndex_ >= script_.size()) {
            finish(Outcome::Completed);
            return;
        }
        V2GMessage msg;
        msg.body = script_[scriptIndex_];
        bool isSetup =
            std::holds_alternative<messages::SessionSetupReq>(msg.body);
        bool isSap = std::holds_alternative<messages::SupportedAppProtocolReq>(
            msg.body);
        if (isSap) {
            msg.sessionId = SessionId::zero();
        } else if (isSetup) {
            msg.sessionId = config_.sessionId.value_or(SessionId::zero());
        } else {
            msg.sessionId = sessionId_;
        }
        Bytes out = wire::encode_v2gtp(wire::PayloadType::ExiV2gMessage,
                                       messages::to_exi(msg));
        if (channel_) out = securechannel::frame_blob(channel_->seal(out));
        stream_->send(out);
        ++report_.messagesSent;
        report_.transcript.push_back(
            TranscriptEntry{TranscriptEntry::Dir::EvToSe,
                            messages::kind_name(msg.body),
                            stage_of_exchange(msg.body)});
        arm_response_timer();
    }

    void drain() {
        try {
            while (auto frame = frames_.next()) {
                if (frame->header.payloadType !=
                    wire::PayloadType::ExiV2gMessage) {
                    finish(Outcome::FailedTransport);
                    return;
                }
                handle_response(messages::from_exi(frame->payload));
                if (done_) return;
            }
        } catch (const Error&) {
            finish(Outcome::FailedTransport);
        }
    }

    void handle_response(const V2GMessage& msg) {
        using namespace messages;
        responseTimer_.cancel();
        if (scriptIndex_ >= script_.size()) return;
        const Body& reqBody = script_[scriptIndex_];
        int stage = stage_of_exchange(reqBody);

        ++report_.messagesReceived;
        report_.transcript.push_back(TranscriptEntry{
            TranscriptEntry::Dir::SeToEv, kind_name(msg.body), stage});

        // A response must answer the outstanding request kind.
        std::string want = kind_name(reqBody);
        want.replace(want.size() - 3, 3, "Res");
        if (kind_name(msg.body) != want) {
            finish(Outcome::FailedSequence);
            return;
        }

        ResponseCode code = std::visit(
            [](const auto& b) -> ResponseCode {
                using T = std::decay_t<decltype(b)>;
                if constexpr (requires { b.responseCode; })
                    return b.responseCode;
                else
                    return ResponseCode::FailedGeneric;
                (void)sizeof(T);
            },
            msg.body);

        report_.lastStageReached = stage;

        if (code != ResponseCode::Ok) {
            report_.failureCode = code;
            finish(code == ResponseCode::FailedNoNegotiation
                       ? Outcome::FailedNegotiation
                       : Outcome::FailedSequence);
            return;
        }

        if (const auto* setup = std::get_if<SessionSetupRes>(&msg.body)) {
            (void)setup;
            sessionId_ = msg.sessionId;
            report_.sessionId = sessionId_;
        } else if (stage >= 2 && msg.sessionId != sessionId_) {
            finish(Outcome::FailedSequence);
            return;
        }

        if (const auto* cs = std::get_if<ChargingStatusRes>(&msg.body))
            report_.meterFinal = cs->meterInfo;
        if (const auto* cd = std::get_if<CurrentDemandRes>(&msg.body))
            report_.meterFinal = cd->meterInfo;

        ++scriptIndex_;
        send_next_request();
    }

    void arm_response_timer() {
        responseTimer_.cancel();
        responseTimer_ = host_.simulation().scheduler().in(
            kResponseTimeout, [this]() {
                if (!done_) finish(Outcome::FailedTransport);
            });
    }

    netsim::Host& host_;
    EvConfig config_;
    std::function<void(const ChargeSessionReport&)> onDone_;
    ChargeSessionReport report_;
    bool done_ = false;
    bool connecting_ = false;
    bool secured_ = false;

    std::uint16_t sdpSrcPort_ = 0;
    int sdpAttempts_ = 0;
    netsim::TimerHandle sdpTimer_, responseTimer_;

    std::shared_ptr<netsim::Stream> stream_;
    std::optional<securechannel::Handshake> handshake_;
    std::optional<securechannel::RecordChannel> channel_;
    securechannel::FlightBuffer flights_;
    wire::V2gtpReassembler frames_;

    std::vector<messages::Body> script_;
    std::size_t scriptIndex_ = 0;
    SessionId sessionId_;
};

} // namespace v2gsim::controllers
