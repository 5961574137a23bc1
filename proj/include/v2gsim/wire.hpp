#pragma once

// V2GTP session-layer framing and the SDP discovery payloads.
//
// Byte layouts are fixed and appear verbatim in capture files:
//   V2GTP header: [0] version 0x01, [1] inverse 0xFE, [2..3] payload type
//   big-endian (0x8001 EXI message, 0x9000 SDP request, 0x9001 SDP response),
//   [4..7] payload length big-endian.
//   SDP request:  security byte, transport byte.
//   SDP response: 16 address bytes, 2 port bytes big-endian, security,
//   transport.

#include <array>
#include <cstdint>
#include <optional>
#include <utility>

#include "v2gsim/bytes.hpp"

namespace v2gsim::wire {

enum class PayloadType : std::uint16_t {
    ExiV2gMessage = 0x8001,
    SdpRequest = 0x9000,
    SdpResponse = 0x9001,
};

enum class SdpSecurity : std::uint8_t {
    SecuredWithTls = 0x00,
    PlainTcp = 0x10,
};

enum class SdpTransport : std::uint8_t {
    Tcp = 0x00,
};

struct V2gtpHeader {
    std::uint8_t version = 0x01;
    std::uint8_t inverseVersion = 0xFE;
    PayloadType payloadType = PayloadType::ExiV2gMessage;
    std::uint32_t payloadLength = 0;

    bool operator==(const V2gtpHeader&) const = default;
};

struct SdpRequest {
    SdpSecurity security = SdpSecurity::PlainTcp;
    SdpTransport transport = SdpTransport::Tcp;

    bool operator==(const SdpRequest&) const = default;
};

struct SdpResponse {
    std::array<std::uint8_t, 16> seccAddress{};
    std::uint16_t seccPort = 0;
    SdpSecurity security = SdpSecurity::PlainTcp;
    SdpTransport transport = SdpTransport::Tcp;

    bool operator==(const SdpResponse&) const = default;
};

enum class WireErrc {
    LengthMismatch,
    BadVersion,
    BadInverseVersion,
    UnknownPayloadType,
    Truncated,
    BadLength,
    UnknownSecurityByte,
    UnknownTransportByte,
    ZeroPort,
};

class WireError : public Error {
public:
    WireError(WireErrc c, std::string msg) : Error(std::move(msg)), code_(c) {}
    WireErrc code() const { return code_; }

private:
    WireErrc code_;
};

inline constexpr std::size_t kV2gtpHeaderSize = 8;

inline Bytes encode_v2gtp(const V2gtpHeader& header, BytesView payload) {
    if (header.payloadLength != payload.size())
        throw WireError(WireErrc::LengthMismatch,
                        "v2gtp: header length does not match payload");
    Bytes out;
    out.reserve(kV2gtpHeaderSize + payload.size());
    out.push_back(header.version);
    out.push_back(header.inverseVersion);
    detail::put_u16be(out, static_cast<std::uint16_t>(header.payloadType));
    detail::put_u32be(out, header.payloadLength);
    out.insert(out.end(), payload.begin(), payload.end());
    return out;
}

/// Convenience: builds the header from the payload type and length.
inline Bytes encode_v2gtp(PayloadType type, BytesView payload) {
    V2gtpHeader h;
    h.payloadType = type;
    h.payloadLength = static_cast<std::uint32_t>(payload.size());
    return encode_v2gtp(h, payload);
}

struct DecodedFrame {
    V2gtpHeader header;
    Bytes payload;
    std::size_t consumed = 0; // 8 + payloadLength, for stream reassembly
};

inline DecodedFrame decode_v2gtp(BytesView bytes) {
    if (bytes.size() < kV2gtpHeaderSize)
        throw WireError(WireErrc::Truncated, "v2gtp: short header");
    if (bytes[0] != 0x01)
        throw WireError(WireErrc::BadVersion, "v2gtp: bad version byte");
    if (bytes[1] != 0xFE)
        throw WireError(WireErrc::BadInverseVersion,
                        "v2gtp: bad inverse version byte");
    std::uint16_t rawType = detail::get_u16be(bytes, 2);
    switch (rawType) {
    case 0x8001:
    case 0x9000:
    case 0x9001:
        break;
    default:
        throw WireError(WireErrc::UnknownPayloadType,
                        "v2gtp: unknown payload type");
    }
    DecodedFrame out;
    out.header.version = bytes[0];
    out.header.inverseVersion = bytes[1];
    out.header.payloadType = static_cast<PayloadType>(rawType);
    out.header.payloadLength = detail::get_u32be(bytes, 4);
    if (bytes.size() < kV2gtpHeaderSize + out.header.payloadLength)
        throw WireError(WireErrc::Truncated, "v2gtp: payload truncated");
    out.payload.assign(bytes.begin() + kV2gtpHeaderSize,
                       bytes.begin() + kV2gtpHeaderSize +
                           out.header.payloadLength);
    out.consumed = kV2gtpHeaderSize + out.header.payloadLength;
    return out;
}

namespace detail2 {

inline SdpSecurity check_security(std::uint8_t b) {
    if (b == 0x00) return SdpSecurity::SecuredWithTls;
    if (b == 0x10) return SdpSecurity::PlainTcp;
    throw WireError(WireErrc::UnknownSecurityByte, "sdp: bad security byte");
}

inline SdpTransport check_transport(std::uint8_t b) {
    if (b == 0x00) return SdpTransport::Tcp;
    throw WireError(WireErrc::UnknownTransportByte, "sdp: bad transport byte");
}

} // namespace detail2

inline Bytes encode_sdp_request(const SdpRequest& req) {
    return Bytes{static_cast<std::uint8_t>(req.security),
                 static_cast<std::uint8_t>(req.transport)};
}

inline SdpRequest decode_sdp_request(BytesView bytes) {
    if (bytes.size() != 2)
        throw WireError(WireErrc::BadLength, "sdp request: expected 2 bytes");
    SdpRequest out;
    out.security = detail2::check_security(bytes[0]);
    out.transport = detail2::check_transport(bytes[1]);
    return out;
}

inline Bytes encode_sdp_response(const SdpResponse& res) {
    Bytes out;
    out.reserve(20);
    out.insert(out.end(), res.seccAddress.begin(), res.seccAddress.end());
    detail::put_u16be(out, res.seccPort);
    out.push_back(static_cast<std::uint8_t>(res.security));
    out.push_back(static_cast<std::uint8_t>(res.transport));
    return out;
}

inline SdpResponse decode_sdp_response(BytesView bytes) {
    if (bytes.size() != 20)
        throw WireError(WireErrc::BadLength, "sdp response: expected 20 bytes");
    SdpResponse out;
    std::copy(bytes.begin(), bytes.begin() + 16, out.seccAddress.begin());
    out.seccPort = detail::get_u16be(bytes, 16);
    if (out.seccPort == 0)
        throw WireError(WireErrc::ZeroPort, "sdp response: zero port");
    out.security = detail2::check_security(bytes[18]);
    out.transport = detail2::check_transport(bytes[19]);
    return out;
}

/// Incremental reassembly of V2GTP frames from a byte stream, using the
/// consumed-byte contract of decode_v2gtp.
class V2gtpReassembler {
public:
    void feed(BytesView data) { buf_.insert(buf_.end(), data.begin(), data.end()); }

    /// Next complete frame, or nullopt if more bytes are needed. Throws
    /// WireError if the buffered prefix cannot be a frame.
    std::optional<DecodedFrame> next() {
        if (buf_.size() < kV2gtpHeaderSize) return std::nullopt;
        std::uint32_t len = detail::get_u32be(buf_, 4);
        if (buf_.size() < kV2gtpHeaderSize + len) return std::nullopt;
        DecodedFrame f = decode_v2gtp(buf_);
        buf_.erase(buf_.begin(), buf_.begin() + static_cast<long>(f.consumed));
        return f;
    }

    const Bytes& pending() const { return buf_; }
    void clear() { buf_.clear(); }

private:
    Bytes buf_;
};

} // namespace v2gsim::wire
