#pragma once

// Application layer: the typed V2G message set, its canonical document
// rendering, and the charge-sequence ordering relation.
//
// Stage order (AC branch skips CableCheck/PreCharge/CurrentDemand/
// WeldingDetection, DC branch skips ChargingStatus):
//   0 SupportedAppProtocol, 1 SessionSetup, 2 ServiceDiscovery,
//   3 PaymentServiceSelection, 4 Authorization, 5 ChargeParameterDiscovery,
//   6 CableCheck (DC), 7 PreCharge (DC), 8 PowerDelivery(Start),
//   9 charging loop {ChargingStatus | CurrentDemand | MeteringReceipt},
//   10 PowerDelivery(Stop), 11 WeldingDetection (DC), 12 SessionStop.

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "v2gsim/codec.hpp"

namespace v2gsim::messages {

struct SessionId {
    std::array<std::uint8_t, 8> value{};

    static SessionId zero() { return SessionId{}; }
    bool is_zero() const {
        for (auto b : value)
            if (b != 0) return false;
        return true;
    }
    std::string hex() const { return to_hex(value); }
    static SessionId from_hex(std::string_view h) {
        Bytes b = v2gsim::from_hex(h);
        if (b.size() != 8) throw Error("session id: expected 8 bytes");
        SessionId id;
        std::copy(b.begin(), b.end(), id.value.begin());
        return id;
    }

    bool operator==(const SessionId&) const = default;
};

struct AppProtocol {
    std::string protocolNamespace;
    std::uint32_t versionMajor = 0;
    std::uint32_t versionMinor = 0;
    std::uint8_t schemaId = 0;
    int priority = 1; // 1..20, 1 is the most preferred

    bool operator==(const AppProtocol&) const = default;
};

enum class EnergyTransferMode { AcSinglePhase, AcThreePhase, DcExtended };

inline bool is_dc(EnergyTransferMode m) {
    return m == EnergyTransferMode::DcExtended;
}

enum class ResponseCode {
    Ok,
    FailedNoNegotiation,
    FailedUnknownSession,
    FailedWrongEnergyTransferMode,
    FailedServiceSelection,
    FailedGeneric,
};

struct MeterInfo {
    std::string meterId;
    std::uint64_t readingWh = 0;
    std::int64_t timestampMs = 0;

    bool operator==(const MeterInfo&) const = default;
};

enum class ChargeProgress { Start, Stop };
enum class TerminationType { Terminate, Pause };

using EvccId = std::array<std::uint8_t, 6>;

// ---- bodies -------------------------------------------------------------

struct SupportedAppProtocolReq {
    std::vector<AppProtocol> offers;
    bool operator==(const SupportedAppProtocolReq&) const = default;
};
struct SupportedAppProtocolRes {
    ResponseCode responseCode = ResponseCode::Ok;
    std::optional<std::uint8_t> schemaId;
    bool operator==(const SupportedAppProtocolRes&) const = default;
};
struct SessionSetupReq {
    EvccId evccId{};
    bool operator==(const SessionSetupReq&) const = default;
};
struct SessionSetupRes {
    ResponseCode responseCode = ResponseCode::Ok;
    std::string evseId;
    std::int64_t timestampMs = 0;
    bool operator==(const SessionSetupRes&) const = default;
};
struct ServiceDiscoveryReq {
    std::string serviceScope; // may be empty
    bool operator==(const ServiceDiscoveryReq&) const = default;
};
struct ServiceDiscoveryRes {
    ResponseCode responseCode = ResponseCode::Ok;
    bool freeService = false;
    std::vector<EnergyTransferMode> supportedModes;
    bool operator==(const ServiceDiscoveryRes&) const = default;
};
struct PaymentServiceSelectionReq {
    std::string selectedService = "ExternalPayment";
    bool operator==(const PaymentServiceSelectionReq&) const = default;
};
struct PaymentServiceSelectionRes {
    ResponseCode responseCode = ResponseCode::Ok;
    bool operator==(const PaymentServiceSelectionRes&) const = default;
};
struct AuthorizationReq {
    bool operator==(const AuthorizationReq&) const = default;
};
struct AuthorizationRes {
    ResponseCode responseCode = ResponseCode::Ok;
    bool operator==(const AuthorizationRes&) const = default;
};
struct ChargeParameterDiscoveryReq {
    EnergyTransferMode requestedMode = EnergyTransferMode::AcSinglePhase;
    std::uint32_t maxVoltageV = 0;
    std::uint32_t maxCurrentA = 0;
    std::uint64_t energyRequestWh = 0;
    // Charging-plan parameters driving the column's synthetic meter model.
    std::uint32_t plannedLoopIterations = 1;
    std::uint32_t voltageAccuracyPermille = 0;
    bool operator==(const ChargeParameterDiscoveryReq&) const = default;
};
struct ChargeParameterDiscoveryRes {
    ResponseCode responseCode = ResponseCode::Ok;
    std::uint32_t evseMaxVoltageV = 0;
    std::uint32_t evseMaxCurrentA = 0;
    bool operator==(const ChargeParameterDiscoveryRes&) const = default;
};
struct PowerDeliveryReq {
    ChargeProgress chargeProgress = ChargeProgress::Start;
    bool operator==(const PowerDeliveryReq&) const = default;
};
struct PowerDeliveryRes {
    ResponseCode responseCode = ResponseCode::Ok;
    bool operator==(const PowerDeliveryRes&) const = default;
};
struct ChargingStatusReq {
    bool operator==(const ChargingStatusReq&) const = default;
};
struct ChargingStatusRes {
    ResponseCode responseCode = ResponseCode::Ok;
    MeterInfo meterInfo;
    bool operator==(const ChargingStatusRes&) const = default;
};
struct CableCheckReq {
    bool operator==(const CableCheckReq&) const = default;
};
struct CableCheckRes {
    ResponseCode responseCode = ResponseCode::Ok;
    bool operator==(const CableCheckRes&) const = default;
};
struct PreChargeReq {
    std::uint32_t targetVoltageV = 0;
    std::uint32_t targetCurrentA = 0;
    bool operator==(const PreChargeReq&) const = default;
};
struct PreChargeRes {
    ResponseCode responseCode = ResponseCode::Ok;
    std::uint32_t presentVoltageV = 0;
    bool operator==(const PreChargeRes&) const = default;
};
struct CurrentDemandReq {
    std::uint32_t targetVoltageV = 0;
    std::uint32_t targetCurrentA = 0;
    bool operator==(const CurrentDemandReq&) const = default;
};
struct CurrentDemandRes {
    ResponseCode responseCode = ResponseCode::Ok;
    std::uint32_t presentVoltageV = 0;
    std::uint32_t presentCurrentA = 0;
    MeterInfo meterInfo;
    bool operator==(const CurrentDemandRes&) const = default;
};
struct WeldingDetectionReq {
    bool operator==(const WeldingDetectionReq&) const = default;
};
struct WeldingDetectionRes {
    ResponseCode responseCode = ResponseCode::Ok;
    std::uint32_t presentVoltageV = 0;
    bool operator==(const WeldingDetectionRes&) const = default;
};
struct MeteringReceiptReq {
    MeterInfo meterInfo;
    bool operator==(const MeteringReceiptReq&) const = default;
};
struct MeteringReceiptRes {
    ResponseCode responseCode = ResponseCode::Ok;
    bool operator==(const MeteringReceiptRes&) const = default;
};
struct SessionStopReq {
    TerminationType terminationType = TerminationType::Terminate;
    bool operator==(const SessionStopReq&) const = default;
};
struct SessionStopRes {
    ResponseCode responseCode = ResponseCode::Ok;
    bool operator==(const SessionStopRes&) const = default;
};
// Recognized but outside the legal sequence; always answered FailedGeneric.
struct CertificateInstallationReq {
    bool operator==(const CertificateInstallationReq&) const = default;
};
struct CertificateInstallationRes {
    ResponseCode responseCode = ResponseCode::FailedGeneric;
    bool operator==(const CertificateInstallationRes&) const = default;
};
struct CertificateUpdateReq {
    bool operator==(const CertificateUpdateReq&) const = default;
};
struct CertificateUpdateRes {
    ResponseCode responseCode = ResponseCode::FailedGeneric;
    bool operator==(const CertificateUpdateRes&) const = default;
};

using Body = std::variant<
    SupportedAppProtocolReq, SupportedAppProtocolRes, SessionSetupReq,
    SessionSetupRes, ServiceDiscoveryReq, ServiceDiscoveryRes,
    PaymentServiceSelectionReq, PaymentServiceSelectionRes, AuthorizationReq,
    AuthorizationRes, ChargeParameterDiscoveryReq, ChargeParameterDiscoveryRes,
    PowerDeliveryReq, PowerDeliveryRes, ChargingStatusReq, ChargingStatusRes,
    CableCheckReq, CableCheckRes, PreChargeReq, PreChargeRes, CurrentDemandReq,
    CurrentDemandRes, WeldingDetectionReq, WeldingDetectionRes,
    MeteringReceiptReq, MeteringReceiptRes, SessionStopReq, SessionStopRes,
    CertificateInstallationReq, CertificateInstallationRes,
    CertificateUpdateReq, CertificateUpdateRes>;

struct V2GMessage {
    SessionId sessionId;
    Body body;

    bool operator==(const V2GMessage&) const = default;
};

enum class MessageErrc { UnknownMessageKind, MissingField, BadFieldFormat };

class MessageError : public Error {
public:
    MessageError(MessageErrc c, std::string msg)
        : Error(std::move(msg)), code_(c) {}
    MessageErrc code() const { return code_; }

private:
    MessageErrc code_;
};

// ---- names --------------------------------------------------------------

namespace detail2 {

template <typename T> struct KindName;
#define V2GSIM_KIND_NAME(T)                                                    \
    template <> struct KindName<T> {                                          \
        static constexpr const char* value = #T;                              \
    };
V2GSIM_KIND_NAME(SupportedAppProtocolReq)
V2GSIM_KIND_NAME(SupportedAppProtocolRes)
V2GSIM_KIND_NAME(SessionSetupReq)
V2GSIM_KIND_NAME(SessionSetupRes)
V2GSIM_KIND_NAME(ServiceDiscoveryReq)
V2GSIM_KIND_NAME(ServiceDiscoveryRes)
V2GSIM_KIND_NAME(PaymentServiceSelectionReq)
V2GSIM_KIND_NAME(PaymentServiceSelectionRes)
V2GSIM_KIND_NAME(AuthorizationReq)
V2GSIM_KIND_NAME(AuthorizationRes)
V2GSIM_KIND_NAME(ChargeParameterDiscoveryReq)
V2GSIM_KIND_NAME(ChargeParameterDiscoveryRes)
V2GSIM_KIND_NAME(PowerDeliveryReq)
V2GSIM_KIND_NAME(PowerDeliveryRes)
V2GSIM_KIND_NAME(ChargingStatusReq)
V2GSIM_KIND_NAME(ChargingStatusRes)
V2GSIM_KIND_NAME(CableCheckReq)
V2GSIM_KIND_NAME(CableCheckRes)
V2GSIM_KIND_NAME(PreChargeReq)
V2GSIM_KIND_NAME(PreChargeRes)
V2GSIM_KIND_NAME(CurrentDemandReq)
V2GSIM_KIND_NAME(CurrentDemandRes)
V2GSIM_KIND_NAME(WeldingDetectionReq)
V2GSIM_KIND_NAME(WeldingDetectionRes)
V2GSIM_KIND_NAME(MeteringReceiptReq)
V2GSIM_KIND_NAME(MeteringReceiptRes)
V2GSIM_KIND_NAME(SessionStopReq)
V2GSIM_KIND_NAME(SessionStopRes)
V2GSIM_KIND_NAME(CertificateInstallationReq)
V2GSIM_KIND_NAME(CertificateInstallationRes)
V2GSIM_KIND_NAME(CertificateUpdateReq)
V2GSIM_KIND_NAME(CertificateUpdateRes)
#undef V2GSIM_KIND_NAME

} // namespace detail2

inline std::string kind_name(const Body& body) {
    return std::visit(
        [](const auto& b) -> std::string {
            return detail2::KindName<std::decay_t<decltype(b)>>::value;
        },
        body);
}

inline bool is_request(const Body& body) {
    std::string n = kind_name(body);
    return n.size() >= 3 && n.compare(n.size() - 3, 3, "Req") == 0;
}

inline std::string mode_name(EnergyTransferMode m) {
    switch (m) {
    case EnergyTransferMode::AcSinglePhase: return "AC_single_phase";
    case EnergyTransferMode::AcThreePhase: return "AC_three_phase";
    case EnergyTransferMode::DcExtended: return "DC_extended";
    }
    throw Error("bad EnergyTransferMode");
}

inline EnergyTransferMode mode_from_name(std::string_view s) {
    if (s == "AC_single_phase") return EnergyTransferMode::AcSinglePhase;
    if (s == "AC_three_phase") return EnergyTransferMode::AcThreePhase;
    if (s == "DC_extended") return EnergyTransferMode::DcExtended;
    throw MessageError(MessageErrc::BadFieldFormat,
                       "unknown energy transfer mode: " + std::string(s));
}

inline std::string response_code_name(ResponseCode c) {
    switch (c) {
    case ResponseCode::Ok: return "Ok";
    case ResponseCode::FailedNoNegotiation: return "FailedNoNegotiation";
    case ResponseCode::FailedUnknownSession: return "FailedUnknownSession";
    case ResponseCode::FailedWrongEnergyTransferMode:
        return "FailedWrongEnergyTransferMode";
    case ResponseCode::FailedServiceSelection: return "FailedServiceSelection";
    case ResponseCode::FailedGeneric: return "FailedGeneric";
    }
    throw Error("bad ResponseCode");
}

inline ResponseCode response_code_from_name(std::string_view s) {
    if (s == "Ok") return ResponseCode::Ok;
    if (s == "FailedNoNegotiation") return ResponseCode::FailedNoNegotiation;
    if (s == "FailedUnknownSession") return ResponseCode::FailedUnknownSession;
    if (s == "FailedWrongEnergyTransferMode")
        return ResponseCode::FailedWrongEnergyTransferMode;
    if (s == "FailedServiceSelection")
        return ResponseCode::FailedServiceSelection;
    if (s == "FailedGeneric") return ResponseCode::FailedGeneric;
    throw MessageError(MessageErrc::BadFieldFormat,
                       "unknown response code: " + std::string(s));
}

// ---- stage order --------------------------------------------------------

inline constexpr int kNoStage = -1;
inline constexpr int kLoopStage = 9;
inline constexpr int kFinalStage = 12;

inline int stage_of(const Body& body) {
    struct Visitor {
        int operator()(const SupportedAppProtocolReq&) { return 0; }
        int operator()(const SupportedAppProtocolRes&) { return 0; }
        int operator()(const SessionSetupReq&) { return 1; }
        int operator()(const SessionSetupRes&) { return 1; }
        int operator()(const ServiceDiscoveryReq&) { return 2; }
        int operator()(const ServiceDiscoveryRes&) { return 2; }
        int operator()(const PaymentServiceSelectionReq&) { return 3; }
        int operator()(const PaymentServiceSelectionRes&) { return 3; }
        int operator()(const AuthorizationReq&) { return 4; }
        int operator()(const AuthorizationRes&) { return 4; }
        int operator()(const ChargeParameterDiscoveryReq&) { return 5; }
        int operator()(const ChargeParameterDiscoveryRes&) { return 5; }
        int operator()(const CableCheckReq&) { return 6; }
        int operator()(const CableCheckRes&) { return 6; }
        int operator()(const PreChargeReq&) { return 7; }
        int operator()(const PreChargeRes&) { return 7; }
        int operator()(const PowerDeliveryReq& b) {
            return b.chargeProgress == ChargeProgress::Start ? 8 : 10;
        }
        int operator()(const PowerDeliveryRes&) { return lastPowerDelivery; }
        int operator()(const ChargingStatusReq&) { return 9; }
        int operator()(const ChargingStatusRes&) { return 9; }
        int operator()(const CurrentDemandReq&) { return 9; }
        int operator()(const CurrentDemandRes&) { return 9; }
        int operator()(const MeteringReceiptReq&) { return 9; }
        int operator()(const MeteringReceiptRes&) { return 9; }
        int operator()(const WeldingDetectionReq&) { return 11; }
        int operator()(const WeldingDetectionRes&) { return 11; }
        int operator()(const SessionStopReq&) { return 12; }
        int operator()(const SessionStopRes&) { return 12; }
        int operator()(const CertificateInstallationReq&) { return kNoStage; }
        int operator()(const CertificateInstallationRes&) { return kNoStage; }
        int operator()(const CertificateUpdateReq&) { return kNoStage; }
        int operator()(const CertificateUpdateRes&) { return kNoStage; }
        int lastPowerDelivery = 8;
    };
    return std::visit(Visitor{}, body);
}

/// Stage of a PowerDeliveryRes given the request's chargeProgress.
inline int stage_of_power_delivery(ChargeProgress p) {
    return p == ChargeProgress::Start ? 8 : 10;
}

struct SequenceViolation {
    std::vector<int> expected;
    int got = kNoStage;
};

/// Legal next stages from `previousStage` on the given branch. previousStage
/// kNoStage means "nothing exchanged yet".
inline std::vector<int> next_stages(int previousStage, bool dc) {
    switch (previousStage) {
    case kNoStage: return {0};
    case 0: return {1};
    case 1: return {2};
    case 2: return {3};
    case 3: return {4};
    case 4: return {5};
    case 5: return dc ? std::vector<int>{6} : std::vector<int>{8};
    case 6: return {7};
    case 7: return {8};
    case 8: return {9, 10};
    case 9: return {9, 10};
    case 10: return dc ? std::vector<int>{11, 12} : std::vector<int>{12};
    case 11: return {12};
    default: return {};
    }
}

inline std::optional<SequenceViolation>
validate_transition(int previousStage, const Body& nextBody, bool dc) {
    int got = stage_of(nextBody);
    SequenceViolation v{next_stages(previousStage, dc), got};
    if (got == kNoStage) return v;
    bool stageOk = false;
    for (int s : v.expected)
        if (s == got) stageOk = true;
    if (!stageOk) return v;
    // Branch-specific kind restrictions within shared stage numbers.
    if (got == kLoopStage) {
        bool isChargingStatus =
            std::holds_alternative<ChargingStatusReq>(nextBody) ||
            std::holds_alternative<ChargingStatusRes>(nextBody);
        bool isCurrentDemand =
            std::holds_alternative<CurrentDemandReq>(nextBody) ||
            std::holds_alternative<CurrentDemandRes>(nextBody);
        if (dc && isChargingStatus) return v;
        if (!dc && isCurrentDemand) return v;
    }
    if (!dc && (got == 6 || got == 7 || got == 11)) return v;
    return std::nullopt;
}

// ---- document conversion ------------------------------------------------

namespace detail2 {

using codec::DocNode;

inline DocNode leaf(std::string name, std::string text) {
    DocNode n;
    n.name = std::move(name);
    n.text = std::move(text);
    return n;
}

inline DocNode num(std::string name, std::uint64_t v) {
    return leaf(std::move(name), std::to_string(v));
}

inline DocNode snum(std::string name, std::int64_t v) {
    return leaf(std::move(name), std::to_string(v));
}

inline DocNode boolean(std::string name, bool v) {
    return leaf(std::move(name), v ? "true" : "false");
}

inline DocNode meter_doc(const MeterInfo& m) {
    DocNode n;
    n.name = "meterInfo";
    n.children.push_back(leaf("meterId", m.meterId));
    n.children.push_back(num("reading", m.readingWh));
    n.children.push_back(snum("timestamp", m.timestampMs));
    return n;
}

inline void add_code(DocNode& n, ResponseCode c) {
    n.children.push_back(leaf("responseCode", response_code_name(c)));
}

struct ToDoc {
    DocNode operator()(const SupportedAppProtocolReq& b) {
        DocNode n{.name = "SupportedAppProtocolReq"};
        for (const auto& p : b.offers) {
            DocNode ap{.name = "appProtocol"};
            ap.children.push_back(leaf("protocolNamespace", p.protocolNamespace));
            ap.children.push_back(num("versionMajor", p.versionMajor));
            ap.children.push_back(num("versionMinor", p.versionMinor));
            ap.children.push_back(num("schemaId", p.schemaId));
            ap.children.push_back(num("priority", p.priority));
            n.children.push_back(std::move(ap));
        }
        return n;
    }
    DocNode operator()(const SupportedAppProtocolRes& b) {
        DocNode n{.name = "SupportedAppProtocolRes"};
        add_code(n, b.responseCode);
        if (b.schemaId) n.children.push_back(num("schemaId", *b.schemaId));
        return n;
    }
    DocNode operator()(const SessionSetupReq& b) {
        DocNode n{.name = "SessionSetupReq"};
        n.children.push_back(leaf("evccId", to_hex(b.evccId)));
        return n;
    }
    DocNode operator()(const SessionSetupRes& b) {
        DocNode n{.name = "SessionSetupRes"};
        add_code(n, b.responseCode);
        n.children.push_back(leaf("evseId", b.evseId));
        n.children.push_back(snum("timestamp", b.timestampMs));
        return n;
    }
    DocNode operator()(const ServiceDiscoveryReq& b) {
        DocNode n{.name = "ServiceDiscoveryReq"};
        if (!b.serviceScope.empty())
            n.children.push_back(leaf("serviceScope", b.serviceScope));
        return n;
    }
    DocNode operator()(const ServiceDiscoveryRes& b) {
        DocNode n{.name = "ServiceDiscoveryRes"};
        add_code(n, b.responseCode);
        n.children.push_back(boolean("freeService", b.freeService));
        for (auto m : b.supportedModes)
            n.children.push_back(leaf("energyTransferMode", mode_name(m)));
        return n;
    }
    DocNode operator()(const PaymentServiceSelectionReq& b) {
        DocNode n{.name = "PaymentServiceSelectionReq"};
        n.children.push_back(leaf("selectedService", b.selectedService));
        return n;
    }
    DocNode operator()(const PaymentServiceSelectionRes& b) {
        DocNode n{.name = "PaymentServiceSelectionRes"};
        add_code(n, b.responseCode);
        return n;
    }
    DocNode operator()(const AuthorizationReq&) {
        return DocNode{.name = "AuthorizationReq"};
    }
    DocNode operator()(const AuthorizationRes& b) {
        DocNode n{.name = "AuthorizationRes"};
        add_code(n, b.responseCode);
        return n;
    }
    DocNode operator()(const ChargeParameterDiscoveryReq& b) {
        DocNode n{.name = "ChargeParameterDiscoveryReq"};
        n.children.push_back(
            leaf("requestedEnergyTransferMode", mode_name(b.requestedMode)));
        n.children.push_back(num("maxVoltage", b.maxVoltageV));
        n.children.push_back(num("maxCurrent", b.maxCurrentA));
        n.children.push_back(num("energyRequest", b.energyRequestWh));
        n.children.push_back(num("plannedLoopIterations", b.plannedLoopIterations));
        n.children.push_back(
            num("voltageAccuracyPermille", b.voltageAccuracyPermille));
        return n;
    }
    DocNode operator()(const ChargeParameterDiscoveryRes& b) {
        DocNode n{.name = "ChargeParameterDiscoveryRes"};
        add_code(n, b.responseCode);
        n.children.push_back(num("evseMaxVoltage", b.evseMaxVoltageV));
        n.children.push_back(num("evseMaxCurrent", b.evseMaxCurrentA));
        return n;
    }
    DocNode operator()(const PowerDeliveryReq& b) {
        DocNode n{.name = "PowerDeliveryReq"};
        n.children.push_back(leaf(
            "chargeProgress",
            b.chargeProgress == ChargeProgress::Start ? "Start" : "Stop"));
        return n;
    }
    DocNode operator()(const PowerDeliveryRes& b) {
        DocNode n{.name = "PowerDeliveryRes"};
        add_code(n, b.responseCode);
        return n;
    }
    DocNode operator()(const ChargingStatusReq&) {
        return DocNode{.name = "ChargingStatusReq"};
    }
    DocNode operator()(const ChargingStatusRes& b) {
        DocNode n{.name = "ChargingStatusRes"};
        add_code(n, b.responseCode);
        n.children.push_back(meter_doc(b.meterInfo));
        return n;
    }
    DocNode operator()(const CableCheckReq&) {
        return DocNode{.name = "CableCheckReq"};
    }
    DocNode operator()(const CableCheckRes& b) {
        DocNode n{.name = "CableCheckRes"};
        add_code(n, b.responseCode);
        return n;
    }
    DocNode operator()(const PreChargeReq& b) {
        DocNode n{.name = "PreChargeReq"};
        n.children.push_back(num("targetVoltage", b.targetVoltageV));
        n.children.push_back(num("targetCurrent", b.targetCurrentA));
        return n;
    }
    DocNode operator()(const PreChargeRes& b) {
        DocNode n{.name = "PreChargeRes"};
        add_code(n, b.responseCode);
        n.children.push_back(num("presentVoltage", b.presentVoltageV));
        return n;
    }
    DocNode operator()(const CurrentDemandReq& b) {
        DocNode n{.name = "CurrentDemandReq"};
        n.children.push_back(num("targetVoltage", b.targetVoltageV));
        n.children.push_back(num("targetCurrent", b.targetCurrentA));
        return n;
    }
    DocNode operator()(const CurrentDemandRes& b) {
        DocNode n{.name = "CurrentDemandRes"};
        add_code(n, b.responseCode);
        n.children.push_back(num("presentVoltage", b.presentVoltageV));
        n.children.push_back(num("presentCurrent", b.presentCurrentA));
        n.children.push_back(meter_doc(b.meterInfo));
        return n;
    }
    DocNode operator()(const WeldingDetectionReq&) {
        return DocNode{.name = "WeldingDetectionReq"};
    }
    DocNode operator()(const WeldingDetectionRes& b) {
        DocNode n{.name = "WeldingDetectionRes"};
        add_code(n, b.responseCode);
        n.children.push_back(num("presentVoltage", b.presentVoltageV));
        return n;
    }
    DocNode operator()(const MeteringReceiptReq& b) {
        DocNode n{.name = "MeteringReceiptReq"};
        n.children.push_back(meter_doc(b.meterInfo));
        return n;
    }
    DocNode operator()(const MeteringReceiptRes& b) {
        DocNode n{.name = "MeteringReceiptRes"};
        add_code(n, b.responseCode);
        return n;
    }
    DocNode operator()(const SessionStopReq& b) {
        DocNode n{.name = "SessionStopReq"};
        n.children.push_back(
            leaf("terminationType",
                 b.terminationType == TerminationType::Terminate ? "Terminate"
                                                                 : "Pause"));
        return n;
    }
    DocNode operator()(const SessionStopRes& b) {
        DocNode n{.name = "SessionStopRes"};
        add_code(n, b.responseCode);
        return n;
    }
    DocNode operator()(const CertificateInstallationReq&) {
        return DocNode{.name = "CertificateInstallationReq"};
    }
    DocNode operator()(const CertificateInstallationRes& b) {
        DocNode n{.name = "CertificateInstallationRes"};
        add_code(n, b.responseCode);
        return n;
    }
    DocNode operator()(const CertificateUpdateReq&) {
        return DocNode{.name = "CertificateUpdateReq"};
    }
    DocNode operator()(const CertificateUpdateRes& b) {
        DocNode n{.name = "CertificateUpdateRes"};
        add_code(n, b.responseCode);
        return n;
    }
};

// -- from_doc helpers

inline const DocNode& require_child(const DocNode& n, std::string_view name) {
    const DocNode* c = n.child(name);
    if (!c)
        throw MessageError(MessageErrc::MissingField,
                           "missing <" + std::string(name) + "> in <" +
                               n.name + ">");
    return *c;
}

inline std::uint64_t parse_u64(const DocNode& n) {
    if (n.text.empty() || n.text.size() > 19)
        throw MessageError(MessageErrc::BadFieldFormat,
                           "bad number in <" + n.name + ">");
    std::uint64_t v = 0;
    for (char c : n.text) {
        if (c < '0' || c > '9')
            throw MessageError(MessageErrc::BadFieldFormat,
                               "bad number in <" + n.name + ">");
        v = v * 10 + static_cast<std::uint64_t>(c - '0');
    }
    return v;
}

inline std::int64_t parse_i64(const DocNode& n) {
    if (!n.text.empty() && n.text[0] == '-') {
        DocNode tmp = n;
        tmp.text = n.text.substr(1);
        return -static_cast<std::int64_t>(parse_u64(tmp));
    }
    return static_cast<std::int64_t>(parse_u64(n));
}

inline std::uint32_t parse_u32(const DocNode& n) {
    std::uint64_t v = parse_u64(n);
    if (v > 0xFFFFFFFFULL)
        throw MessageError(MessageErrc::BadFieldFormat,
                           "value out of range in <" + n.name + ">");
    return static_cast<std::uint32_t>(v);
}

inline bool parse_bool(const DocNode& n) {
    if (n.text == "true") return true;
    if (n.text == "false") return false;
    throw MessageError(MessageErrc::BadFieldFormat,
                       "bad boolean in <" + n.name + ">");
}

inline ResponseCode parse_code(const DocNode& n) {
    return response_code_from_name(require_child(n, "responseCode").text);
}

inline MeterInfo parse_meter(const DocNode& n) {
    const DocNode& m = require_child(n, "meterInfo");
    MeterInfo out;
    out.meterId = require_child(m, "meterId").text;
    out.readingWh = parse_u64(require_child(m, "reading"));
    out.timestampMs = parse_i64(require_child(m, "timestamp"));
    return out;
}

inline Body body_from_doc(const DocNode& n) {
    const std::string& k = n.name;
    if (k == "SupportedAppProtocolReq") {
        SupportedAppProtocolReq b;
        for (const auto& c : n.children) {
            if (c.name != "appProtocol")
                throw MessageError(MessageErrc::BadFieldFormat,
                                   "unexpected <" + c.name + ">");
            AppProtocol p;
            p.protocolNamespace = require_child(c, "protocolNamespace").text;
            p.versionMajor = parse_u32(require_child(c, "versionMajor"));
            p.versionMinor = parse_u32(require_child(c, "versionMinor"));
            std::uint32_t sid = parse_u32(require_child(c, "schemaId"));
            if (sid > 255)
                throw MessageError(MessageErrc::BadFieldFormat,
                                   "schemaId out of range");
            p.schemaId = static_cast<std::uint8_t>(sid);
            p.priority = static_cast<int>(parse_u32(require_child(c, "priority")));
            b.offers.push_back(std::move(p));
        }
        return b;
    }
    if (k == "SupportedAppProtocolRes") {
        SupportedAppProtocolRes b;
        b.responseCode = parse_code(n);
        if (const DocNode* c = n.child("schemaId"))
            b.schemaId = static_cast<std::uint8_t>(parse_u32(*c));
        return b;
    }
    if (k == "SessionSetupReq") {
        SessionSetupReq b;
        Bytes id = v2gsim::from_hex(require_child(n, "evccId").text);
        if (id.size() != 6)
            throw MessageError(MessageErrc::BadFieldFormat,
                               "evccId must be 6 bytes");
        std::copy(id.begin(), id.end(), b.evccId.begin());
        return b;
    }
    if (k == "SessionSetupRes") {
        SessionSetupRes b;
        b.responseCode = parse_code(n);
        b.evseId = require_child(n, "evseId").text;
        b.timestampMs = parse_i64(require_child(n, "timestamp"));
        return b;
    }
    if (k == "ServiceDiscoveryReq") {
        ServiceDiscoveryReq b;
        if (const DocNode* c = n.child("serviceScope")) b.serviceScope = c->text;
        return b;
    }
    if (k == "ServiceDiscoveryRes") {
        ServiceDiscoveryRes b;
        b.responseCode = parse_code(n);
        b.freeService = parse_bool(require_child(n, "freeService"));
        for (const auto& c : n.children)
            if (c.name == "energyTransferMode")
                b.supportedModes.push_back(mode_from_name(c.text));
        return b;
    }
    if (k == "PaymentServiceSelectionReq") {
        PaymentServiceSelectionReq b;
        b.selectedService = require_child(n, "selectedService").text;
        return b;
    }
    if (k == "PaymentServiceSelectionRes") {
        PaymentServiceSelectionRes b;
        b.responseCode = parse_code(n);
        return b;
    }
    if (k == "AuthorizationReq") return AuthorizationReq{};
    if (k == "AuthorizationRes") {
        AuthorizationRes b;
        b.responseCode = parse_code(n);
        return b;
    }
    if (k == "ChargeParameterDiscoveryReq") {
        ChargeParameterDiscoveryReq b;
        b.requestedMode =
            mode_from_name(require_child(n, "requestedEnergyTransferMode").text);
        b.maxVoltageV = parse_u32(require_child(n, "maxVoltage"));
        b.maxCurrentA = parse_u32(require_child(n, "maxCurrent"));
        b.energyRequestWh = parse_u64(require_child(n, "energyRequest"));
        b.plannedLoopIterations =
            parse_u32(require_child(n, "plannedLoopIterations"));
        b.voltageAccuracyPermille =
            parse_u32(require_child(n, "voltageAccuracyPermille"));
        return b;
    }
    if (k == "ChargeParameterDiscoveryRes") {
        ChargeParameterDiscoveryRes b;
        b.responseCode = parse_code(n);
        b.evseMaxVoltageV = parse_u32(require_child(n, "evseMaxVoltage"));
        b.evseMaxCurrentA = parse_u32(require_child(n, "evseMaxCurrent"));
        return b;
    }
    if (k == "PowerDeliveryReq") {
        PowerDeliveryReq b;
        const std::string& p = require_child(n, "chargeProgress").text;
        if (p == "Start") b.chargeProgress = ChargeProgress::Start;
        else if (p == "Stop") b.chargeProgress = ChargeProgress::Stop;
        else
            throw MessageError(MessageErrc::BadFieldFormat,
                               "bad chargeProgress: " + p);
        return b;
    }
    if (k == "PowerDeliveryRes") {
        PowerDeliveryRes b;
        b.responseCode = parse_code(n);
        return b;
    }
    if (k == "ChargingStatusReq") return ChargingStatusReq{};
    if (k == "ChargingStatusRes") {
        ChargingStatusRes b;
        b.responseCode = parse_code(n);
        b.meterInfo = parse_meter(n);
        return b;
    }
    if (k == "CableCheckReq") return CableCheckReq{};
    if (k == "CableCheckRes") {
        CableCheckRes b;
        b.responseCode = parse_code(n);
        return b;
    }
    if (k == "PreChargeReq") {
        PreChargeReq b;
        b.targetVoltageV = parse_u32(require_child(n, "targetVoltage"));
        b.targetCurrentA = parse_u32(require_child(n, "targetCurrent"));
        return b;
    }
    if (k == "PreChargeRes") {
        PreChargeRes b;
        b.responseCode = parse_code(n);
        b.presentVoltageV = parse_u32(require_child(n, "presentVoltage"));
        return b;
    }
    if (k == "CurrentDemandReq") {
        CurrentDemandReq b;
        b.targetVoltageV = parse_u32(require_child(n, "targetVoltage"));
        b.targetCurrentA = parse_u32(require_child(n, "targetCurrent"));
        return b;
    }
    if (k == "CurrentDemandRes") {
        CurrentDemandRes b;
        b.responseCode = parse_code(n);
        b.presentVoltageV = parse_u32(require_child(n, "presentVoltage"));
        b.presentCurrentA = parse_u32(require_child(n, "presentCurrent"));
        b.meterInfo = parse_meter(n);
        return b;
    }
    if (k == "WeldingDetectionReq") return WeldingDetectionReq{};
    if (k == "WeldingDetectionRes") {
        WeldingDetectionRes b;
        b.responseCode = parse_code(n);
        b.presentVoltageV = parse_u32(require_child(n, "presentVoltage"));
        return b;
    }
    if (k == "MeteringReceiptReq") {
        MeteringReceiptReq b;
        b.meterInfo = parse_meter(n);
        return b;
    }
    if (k == "MeteringReceiptRes") {
        MeteringReceiptRes b;
        b.responseCode = parse_code(n);
        return b;
    }
    if (k == "SessionStopReq") {
        SessionStopReq b;
        const std::string& t = require_child(n, "terminationType").text;
        if (t == "Terminate") b.terminationType = TerminationType::Terminate;
        else if (t == "Pause") b.terminationType = TerminationType::Pause;
        else
            throw MessageError(MessageErrc::BadFieldFormat,
                               "bad terminationType: " + t);
        return b;
    }
    if (k == "SessionStopRes") {
        SessionStopRes b;
        b.responseCode = parse_code(n);
        return b;
    }
    if (k == "CertificateInstallationReq") return CertificateInstallationReq{};
    if (k == "CertificateInstallationRes") {
        CertificateInstallationRes b;
        b.responseCode = parse_code(n);
        return b;
    }
    if (k == "CertificateUpdateReq") return CertificateUpdateReq{};
    if (k == "CertificateUpdateRes") {
        CertificateUpdateRes b;
        b.responseCode = parse_code(n);
        return b;
    }
    throw MessageError(MessageErrc::UnknownMessageKind,
                       "unknown message kind: " + k);
}

} // namespace detail2

inline codec::DocNode to_doc(const V2GMessage& msg) {
    codec::DocNode root{.name = "v2gMessage"};
    codec::DocNode header{.name = "header"};
    header.children.push_back(
        detail2::leaf("sessionId", msg.sessionId.hex()));
    codec::DocNode body{.name = "body"};
    body.children.push_back(std::visit(detail2::ToDoc{}, msg.body));
    root.children.push_back(std::move(header));
    root.children.push_back(std::move(body));
    return root;
}

inline V2GMessage from_doc(const codec::DocNode& node) {
    if (node.name != "v2gMessage")
        throw MessageError(MessageErrc::UnknownMessageKind,
                           "root is not <v2gMessage>: " + node.name);
    const codec::DocNode& header = detail2::require_child(node, "header");
    const codec::DocNode& body = detail2::require_child(node, "body");
    if (body.children.size() != 1)
        throw MessageError(MessageErrc::MissingField,
                           "body must contain exactly one message element");
    V2GMessage out;
    try {
        out.sessionId = SessionId::from_hex(
            detail2::require_child(header, "sessionId").text);
    } catch (const MessageError&) {
        throw;
    } catch (const Error& e) {
        throw MessageError(MessageErrc::BadFieldFormat,
                           std::string("bad sessionId: ") + e.what());
    }
    out.body = detail2::body_from_doc(body.children.front());
    return out;
}

/// Serialize straight to the compact binary form used on the wire.
inline Bytes to_exi(const V2GMessage& msg) {
    return codec::encode_exi(to_doc(msg)).bytes;
}

inline V2GMessage from_exi(BytesView bytes) {
    return from_doc(codec::decode_exi(bytes));
}

} // namespace v2gsim::messages
