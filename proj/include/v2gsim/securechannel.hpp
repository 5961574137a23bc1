#pragma once

// Authenticated channel used as the MitM countermeasure. TLS-shaped, not
// TLS: one fixed suite (Ed25519 certificates, X25519 key exchange,
// XSalsa20-Poly1305 records, BLAKE2b transcript hash / KDF), no version
// negotiation, no resumption, no client certificates.
//
// Flights, each an opaque byte blob framed by the transport:
//   1 ClientHello:    clientRandom(32)
//   2 ServerHello:    serverRandom(32) | certificate | ephemeralPub(32)
//                     | sig(identityKey, clientRandom|serverRandom|ephPub)
//   3 ClientFinished: clientEphemeralPub(32) | mac(finishedKeyC, transcript)
//   4 ServerFinished: mac(finishedKeyS, transcript)
// Traffic and finished keys are all derived from the X25519 shared secret,
// both randoms, and the running transcript hash, so any in-flight byte
// modification diverges the two sides' keys.

#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <string>

#include <sodium.h>

#include "v2gsim/bytes.hpp"

namespace v2gsim::securechannel {

enum class HandshakeFailureReason {
    CertificateVerifyFailure,
    TranscriptMismatch,
    Timeout,
};

inline std::string reason_name(HandshakeFailureReason r) {
    switch (r) {
    case HandshakeFailureReason::CertificateVerifyFailure:
        return "CertificateVerifyFailure";
    case HandshakeFailureReason::TranscriptMismatch:
        return "TranscriptMismatch";
    case HandshakeFailureReason::Timeout: return "Timeout";
    }
    return "?";
}

class HandshakeFailure : public Error {
public:
    HandshakeFailure(HandshakeFailureReason r, std::string msg)
        : Error(std::move(msg)), reason_(r) {}
    HandshakeFailureReason reason() const { return reason_; }

private:
    HandshakeFailureReason reason_;
};

class AuthenticationFailure : public Error {
public:
    explicit AuthenticationFailure(std::string msg) : Error(std::move(msg)) {}
};

namespace detail2 {

inline void ensure_sodium() {
    static const int rc = sodium_init();
    if (rc < 0) throw Error("libsodium init failed");
}

inline void fill_random(std::mt19937_64& rng, std::uint8_t* out,
                        std::size_t n) {
    for (std::size_t i = 0; i < n; i += 8) {
        std::uint64_t v = rng();
        for (std::size_t j = 0; j < 8 && i + j < n; ++j)
            out[i + j] = static_cast<std::uint8_t>(v >> (8 * j));
    }
}

inline void put_blob(Bytes& out, BytesView b) {
    detail::put_varint(out, b.size());
    out.insert(out.end(), b.begin(), b.end());
}

inline void put_str(Bytes& out, std::string_view s) {
    detail::put_varint(out, s.size());
    out.insert(out.end(), s.begin(), s.end());
}

inline Bytes get_blob(BytesView in, std::size_t& off) {
    std::uint64_t len = detail::get_varint(in, off);
    if (off + len > in.size()) throw Error("blob: truncated");
    Bytes b(in.begin() + off, in.begin() + off + len);
    off += len;
    return b;
}

inline std::string get_str(BytesView in, std::size_t& off) {
    Bytes b = get_blob(in, off);
    return std::string(b.begin(), b.end());
}

} // namespace detail2

struct Certificate {
    std::string subjectName;
    Bytes publicKey; // Ed25519 verification key, 32 bytes
    std::string issuerName;
    Bytes signature; // by issuer over (subjectName, publicKey)

    bool operator==(const Certificate&) const = default;

    Bytes to_bytes() const {
        Bytes out;
        detail2::put_str(out, subjectName);
        detail2::put_blob(out, publicKey);
        detail2::put_str(out, issuerName);
        detail2::put_blob(out, signature);
        return out;
    }

    static Certificate from_bytes(BytesView in, std::size_t& off) {
        Certificate c;
        c.subjectName = detail2::get_str(in, off);
        c.publicKey = detail2::get_blob(in, off);
        c.issuerName = detail2::get_str(in, off);
        c.signature = detail2::get_blob(in, off);
        return c;
    }
};

struct TrustAnchor {
    std::string name;
    Bytes verificationKey;

    bool operator==(const TrustAnchor&) const = default;
};

struct SigningKey {
    Bytes bytes; // Ed25519 secret key, 64 bytes

    bool operator==(const SigningKey&) const = default;
};

struct Identity {
    Certificate certificate;
    SigningKey signingKey;

    bool operator==(const Identity&) const = default;
};

struct SessionKeys {
    std::array<std::uint8_t, 32> clientToServerKey{};
    std::array<std::uint8_t, 32> serverToClientKey{};
    std::array<std::uint8_t, 32> transcriptHash{};

    bool operator==(const SessionKeys&) const = default;
};

namespace detail2 {

// Content covered by the issuer's certificate signature.
inline Bytes cert_tbs(const std::string& subjectName, BytesView publicKey) {
    Bytes out;
    put_str(out, "cert-v1");
    put_str(out, subjectName);
    put_blob(out, publicKey);
    return out;
}

inline std::array<std::uint8_t, 32> blake2b(BytesView data, BytesView key,
                                            std::string_view context) {
    ensure_sodium();
    Bytes input;
    put_str(input, context);
    input.insert(input.end(), data.begin(), data.end());
    std::array<std::uint8_t, 32> out{};
    crypto_generichash(out.data(), out.size(), input.data(), input.size(),
                       key.empty() ? nullptr : key.data(), key.size());
    return out;
}

} // namespace detail2

/// Creates a new identity whose certificate is signed by `issuer`'s key.
/// Deterministic: the key pair is derived from bytes drawn from `rng`.
inline Identity generate_identity(const std::string& name,
                                  const std::string& issuerName,
                                  const SigningKey& issuerKey,
                                  std::mt19937_64& rng) {
    detail2::ensure_sodium();
    std::array<std::uint8_t, crypto_sign_SEEDBYTES> seed{};
    detail2::fill_random(rng, seed.data(), seed.size());
    Bytes pk(crypto_sign_PUBLICKEYBYTES), sk(crypto_sign_SECRETKEYBYTES);
    crypto_sign_seed_keypair(pk.data(), sk.data(), seed.data());

    Identity id;
    id.certificate.subjectName = name;
    id.certificate.publicKey = pk;
    id.certificate.issuerName = issuerName;
    Bytes tbs = detail2::cert_tbs(name, pk);
    id.certificate.signature.resize(crypto_sign_BYTES);
    crypto_sign_detached(id.certificate.signature.data(), nullptr, tbs.data(),
                         tbs.size(), issuerKey.bytes.data());
    id.signingKey.bytes = sk;
    return id;
}

/// Root authority: a key pair plus the anchor clients pin. The root signs
/// leaf identities with `authority.key`.
struct Authority {
    TrustAnchor anchor;
    SigningKey key;
};

inline Authority make_authority(const std::string& name,
                                std::mt19937_64& rng) {
    detail2::ensure_sodium();
    std::array<std::uint8_t, crypto_sign_SEEDBYTES> seed{};
    detail2::fill_random(rng, seed.data(), seed.size());
    Bytes pk(crypto_sign_PUBLICKEYBYTES), sk(crypto_sign_SECRETKEYBYTES);
    crypto_sign_seed_keypair(pk.data(), sk.data(), seed.data());
    return Authority{TrustAnchor{name, pk}, SigningKey{sk}};
}

inline bool verify_certificate(const Certificate& cert,
                               const TrustAnchor& anchor) {
    detail2::ensure_sodium();
    if (cert.issuerName != anchor.name) return false;
    if (cert.publicKey.size() != crypto_sign_PUBLICKEYBYTES) return false;
    if (cert.signature.size() != crypto_sign_BYTES) return false;
    if (anchor.verificationKey.size() != crypto_sign_PUBLICKEYBYTES)
        return false;
    Bytes tbs = detail2::cert_tbs(cert.subjectName, cert.publicKey);
    return crypto_sign_verify_detached(cert.signature.data(), tbs.data(),
                                       tbs.size(),
                                       anchor.verificationKey.data()) == 0;
}

// ---- handshake ------------------------------------------------------------

/// Flight-at-a-time handshake driver, transport-agnostic. The client calls
/// start() for its first flight, then both sides feed peer flights to
/// on_flight() until done(). Any verification failure throws
/// HandshakeFailure; the driver is unusable afterwards.
class Handshake {
public:
    enum class Role { Client, Server };

    static Handshake client(TrustAnchor anchor, std::mt19937_64& rng) {
        Handshake h(Role::Client);
        h.anchor_ = std::move(anchor);
        detail2::fill_random(rng, h.ownRandom_.data(), h.ownRandom_.size());
        detail2::fill_random(rng, h.ephSecret_.data(), h.ephSecret_.size());
        return h;
    }

    static Handshake server(Identity identity, std::mt19937_64& rng) {
        Handshake h(Role::Server);
        h.identity_ = std::move(identity);
        detail2::fill_random(rng, h.ownRandom_.data(), h.ownRandom_.size());
        detail2::fill_random(rng, h.ephSecret_.data(), h.ephSecret_.size());
        return h;
    }

    Role role() const { return role_; }
    bool done() const { return done_; }
    const SessionKeys& keys() const {
        if (!done_) throw Error("handshake: keys not yet derived");
        return keys_;
    }

    /// Client's opening flight. Server returns nullopt.
    std::optional<Bytes> start() {
        if (role_ != Role::Client || state_ != 0) return std::nullopt;
        Bytes f1(ownRandom_.begin(), ownRandom_.end());
        absorb(f1);
        state_ = 1;
        return f1;
    }

    std::optional<Bytes> on_flight(BytesView flight) {
        detail2::ensure_sodium();
        if (role_ == Role::Server) return server_flight(flight);
        return client_flight(flight);
    }

private:
    explicit Handshake(Role r) : role_(r) {}

    [[noreturn]] void fail(HandshakeFailureReason r, const char* msg) {
        throw HandshakeFailure(r, msg);
    }

    void absorb(BytesView flight) {
        Bytes joined(transcript_.begin(), transcript_.end());
        detail2::put_blob(joined, flight);
        transcript_ = detail2::blake2b(joined, {}, "transcript");
    }

    void derive_keys(BytesView peerEphPub) {
        std::array<std::uint8_t, crypto_scalarmult_BYTES> shared{};
        std::array<std::uint8_t, crypto_scalarmult_BYTES> ownPub{};
        crypto_scalarmult_base(ownPub.data(), ephSecret_.data());
        if (peerEphPub.size() != crypto_scalarmult_BYTES ||
            crypto_scalarmult(shared.data(), ephSecret_.data(),
                              peerEphPub.data()) != 0)
            fail(HandshakeFailureReason::TranscriptMismatch,
                 "handshake: bad key share");
        Bytes ikm;
        ikm.insert(ikm.end(), shared.begin(), shared.end());
        ikm.insert(ikm.end(), clientRandom().begin(), clientRandom().end());
        ikm.insert(ikm.end(), serverRandom().begin(), serverRandom().end());
        ikm.insert(ikm.end(), transcript_.begin(), transcript_.end());
        keys_.clientToServerKey = detail2::blake2b(ikm, {}, "key c2s");
        keys_.serverToClientKey = detail2::blake2b(ikm, {}, "key s2c");
        finishedKeyC_ = detail2::blake2b(ikm, {}, "finished c");
        finishedKeyS_ = detail2::blake2b(ikm, {}, "finished s");
    }

    std::array<std::uint8_t, 32> finished_mac(
        const std::array<std::uint8_t, 32>& key) const {
        return detail2::blake2b(transcript_, key, "finished mac");
    }

    const std::array<std::uint8_t, 32>& clientRandom() const {
        return role_ == Role::Client ? ownRandom_ : peerRandom_;
    }
    const std::array<std::uint8_t, 32>& serverRandom() const {
        return role_ == Role::Server ? ownRandom_ : peerRandom_;
    }

    std::optional<Bytes> server_flight(BytesView flight) {
        if (state_ == 0) {
            // ClientHello
            if (flight.size() != 32)
                fail(HandshakeFailureReason::TranscriptMismatch,
                     "handshake: malformed client hello");
            std::copy(flight.begin(), flight.end(), peerRandom_.begin());
            absorb(flight);

            Bytes f2(ownRandom_.begin(), ownRandom_.end());
            detail2::put_blob(f2, identity_->certificate.to_bytes());
            std::array<std::uint8_t, crypto_scalarmult_BYTES> ephPub{};
            crypto_scalarmult_base(ephPub.data(), ephSecret_.data());
            f2.insert(f2.end(), ephPub.begin(), ephPub.end());
            Bytes signed_;
            signed_.insert(signed_.end(), peerRandom_.begin(), peerRandom_.end());
            signed_.insert(signed_.end(), ownRandom_.begin(), ownRandom_.end());
            signed_.insert(signed_.end(), ephPub.begin(), ephPub.end());
            Bytes sig(crypto_sign_BYTES);
            crypto_sign_detached(sig.data(), nullptr, signed_.data(),
                                 signed_.size(),
                                 identity_->signingKey.bytes.data());
            detail2::put_blob(f2, sig);
            absorb(f2);
            state_ = 2;
            return f2;
        }
        if (state_ == 2) {
            // ClientFinished: eph pub + mac
            if (flight.size() != 32 + 32)
                fail(HandshakeFailureReason::TranscriptMismatch,
                     "handshake: malformed client finished");
            Bytes clientPub(flight.begin(), flight.begin() + 32);
            // keys cover the transcript up to and including the client key
            // share but not the mac itself
            {
                Bytes joined(transcript_.begin(), transcript_.end());
                detail2::put_blob(joined, clientPub);
                transcript_ = detail2::blake2b(joined, {}, "transcript");
            }
            derive_keys(clientPub);
            auto expect = finished_mac(finishedKeyC_);
            if (!std::equal(expect.begin(), expect.end(), flight.begin() + 32))
                fail(HandshakeFailureReason::TranscriptMismatch,
                     "handshake: client finished mac mismatch");
            {
                Bytes joined(transcript_.begin(), transcript_.end());
                detail2::put_blob(joined, flight);
                transcript_ = detail2::blake2b(joined, {}, "transcript");
            }
            auto mac = finished_mac(finishedKeyS_);
            Bytes f4(mac.begin(), mac.end());
            absorb(f4);
            keys_.transcriptHash = transcript_;
            done_ = true;
            state_ = 4;
            return f4;
        }
        fail(HandshakeFailureReason::TranscriptMismatch,
             "handshake: unexpected flight");
    }

    std::optional<Bytes> client_flight(BytesView flight) {
        if (state_ == 1) {
            // ServerHello
            if (flight.size() < 32)
                fail(HandshakeFailureReason::TranscriptMismatch,
                     "handshake: malformed server hello");
            std::copy(flight.begin(), flight.begin() + 32, peerRandom_.begin());
            std::size_t off = 32;
            Certificate cert;
            Bytes ephPub, sig;
            try {
                Bytes certBytes = detail2::get_blob(flight, off);
                std::size_t coff = 0;
                cert = Certificate::from_bytes(certBytes, coff);
                if (off + 32 > flight.size()) throw Error("short key share");
                ephPub.assign(flight.begin() + off, flight.begin() + off + 32);
                off += 32;
                sig = detail2::get_blob(flight, off);
                if (off != flight.size()) throw Error("trailing bytes");
            } catch (const HandshakeFailure&) {
                throw;
            } catch (const Error&) {
                fail(HandshakeFailureReason::TranscriptMismatch,
                     "handshake: malformed server hello");
            }
            if (!verify_certificate(cert, *anchor_))
                fail(HandshakeFailureReason::CertificateVerifyFailure,
                     "handshake: certificate not signed by trust anchor");
            Bytes signed_;
            signed_.insert(signed_.end(), ownRandom_.begin(), ownRandom_.end());
            signed_.insert(signed_.end(), peerRandom_.begin(), peerRandom_.end());
            signed_.insert(signed_.end(), ephPub.begin(), ephPub.end());
            if (sig.size() != crypto_sign_BYTES ||
                crypto_sign_verify_detached(sig.data(), signed_.data(),
                                            signed_.size(),
                                            cert.publicKey.data()) != 0)
                fail(HandshakeFailureReason::CertificateVerifyFailure,
                     "handshake: server key-share signature invalid");
            absorb(flight);

            std::array<std::uint8_t, crypto_scalarmult_BYTES> ownPub{};
            crypto_scalarmult_base(ownPub.data(), ephSecret_.data());
            {
                Bytes joined(transcript_.begin(), transcript_.end());
                Bytes pub(ownPub.begin(), ownPub.end());
                detail2::put_blob(joined, pub);
                transcript_ = detail2::blake2b(joined, {}, "transcript");
            }
            derive_keys(ephPub);
            auto mac = finished_mac(finishedKeyC_);
            Bytes f3(ownPub.begin(), ownPub.end());
            f3.insert(f3.end(), mac.begin(), mac.end());
            {
                Bytes joined(transcript_.begin(), transcript_.end());
                detail2::put_blob(joined, f3);
                transcript_ = detail2::blake2b(joined, {}, "transcript");
            }
            state_ = 3;
            return f3;
        }
        if (state_ == 3) {
            // ServerFinished
            auto expect = finished_mac(finishedKeyS_);
            if (flight.size() != expect.size() ||
                !std::equal(expect.begin(), expect.end(), flight.begin()))
                fail(HandshakeFailureReason::TranscriptMismatch,
                     "handshake: server finished mac mismatch");
            absorb(flight);
            keys_.transcriptHash = transcript_;
            done_ = true;
            state_ = 4;
            return std::nullopt;
        }
        fail(HandshakeFailureReason::TranscriptMismatch,
             "handshake: unexpected flight");
    }

    Role role_;
    int state_ = 0;
    bool done_ = false;
    std::optional<TrustAnchor> anchor_;
    std::optional<Identity> identity_;
    std::array<std::uint8_t, 32> ownRandom_{};
    std::array<std::uint8_t, 32> peerRandom_{};
    std::array<std::uint8_t, crypto_scalarmult_SCALARBYTES> ephSecret_{};
    std::array<std::uint8_t, 32> transcript_{};
    std::array<std::uint8_t, 32> finishedKeyC_{};
    std::array<std::uint8_t, 32> finishedKeyS_{};
    SessionKeys keys_;
};

// ---- records --------------------------------------------------------------

enum class Direction { ClientToServer, ServerToClient };

/// Record: [8-byte big-endian counter][secretbox ciphertext]. The counter is
/// bound into the nonce, so replay or reorder fails authentication.
inline Bytes seal(const SessionKeys& keys, Direction dir,
                  std::uint64_t counter, BytesView plaintext) {
    detail2::ensure_sodium();
    std::array<std::uint8_t, crypto_secretbox_NONCEBYTES> nonce{};
    nonce[0] = dir == Direction::ClientToServer ? 0x01 : 0x02;
    for (int i = 0; i < 8; ++i)
        nonce[1 + i] = static_cast<std::uint8_t>(counter >> (56 - 8 * i));
    const auto& key = dir == Direction::ClientToServer
                          ? keys.clientToServerKey
                          : keys.serverToClientKey;
    Bytes out;
    detail::put_u64be(out, counter);
    out.resize(8 + plaintext.size() + crypto_secretbox_MACBYTES);
    crypto_secretbox_easy(out.data() + 8, plaintext.data(), plaintext.size(),
                          nonce.data(), key.data());
    return out;
}

inline Bytes open(const SessionKeys& keys, Direction dir,
                  std::uint64_t expectedCounter, BytesView record) {
    detail2::ensure_sodium();
    if (record.size() < 8 + crypto_secretbox_MACBYTES)
        throw AuthenticationFailure("record: too short");
    std::uint64_t counter = detail::get_u64be(record, 0);
    if (counter != expectedCounter)
        throw AuthenticationFailure("record: counter mismatch (replay?)");
    std::array<std::uint8_t, crypto_secretbox_NONCEBYTES> nonce{};
    nonce[0] = dir == Direction::ClientToServer ? 0x01 : 0x02;
    std::copy(record.begin(), record.begin() + 8, nonce.begin() + 1);
    const auto& key = dir == Direction::ClientToServer
                          ? keys.clientToServerKey
                          : keys.serverToClientKey;
    Bytes plain(record.size() - 8 - crypto_secretbox_MACBYTES);
    if (crypto_secretbox_open_easy(plain.data(), record.data() + 8,
                                   record.size() - 8, nonce.data(),
                                   key.data()) != 0)
        throw AuthenticationFailure("record: authentication failed");
    return plain;
}

/// Stateful per-endpoint wrapper tracking both direction counters.
class RecordChannel {
public:
    RecordChannel(SessionKeys keys, bool isClient)
        : keys_(std::move(keys)), isClient_(isClient) {}

    Bytes seal(BytesView plaintext) {
        auto dir = isClient_ ? Direction::ClientToServer
                             : Direction::ServerToClient;
        return securechannel::seal(keys_, dir, sendCounter_++, plaintext);
    }

    Bytes open(BytesView record) {
        auto dir = isClient_ ? Direction::ServerToClient
                             : Direction::ClientToServer;
        return securechannel::open(keys_, dir, recvCounter_++, record);
    }

    const SessionKeys& keys() const { return keys_; }

private:
    SessionKeys keys_;
    bool isClient_;
    std::uint64_t sendCounter_ = 0;
    std::uint64_t recvCounter_ = 0;
};

/// Length-prefixed framing for handshake flights and sealed records on a
/// byte stream: [4-byte big-endian length][bytes].
inline Bytes frame_blob(BytesView blob) {
    Bytes out;
    detail::put_u32be(out, static_cast<std::uint32_t>(blob.size()));
    out.insert(out.end(), blob.begin(), blob.end());
    return out;
}

class FlightBuffer {
public:
    void feed(BytesView data) { buf_.insert(buf_.end(), data.begin(), data.end()); }

    std::optional<Bytes> next() {
        if (buf_.size() < 4) return std::nullopt;
        std::uint32_t len = detail::get_u32be(buf_, 0);
        if (len > kMaxFlightSize) throw Error("flight framing: oversized blob");
        if (buf_.size() < 4 + len) return std::nullopt;
        Bytes out(buf_.begin() + 4, buf_.begin() + 4 + len);
        buf_.erase(buf_.begin(), buf_.begin() + 4 + len);
        return out;
    }

    static constexpr std::uint32_t kMaxFlightSize = 1 << 20;

private:
    Bytes buf_;
};

} // namespace v2gsim::securechannel
