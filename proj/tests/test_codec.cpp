// Presentation codec: frozen binary layout, canonical text rendering, string
// table behavior, error taxonomy, bulk round-trips, and size advantage over
// the text rendering on protocol-shaped documents.

#include <catch2/catch_amalgamated.hpp>

#include <random>

#include "v2gsim/codec.hpp"

using namespace v2gsim;
using namespace v2gsim::codec;

namespace {

CodecErrc code_of(const std::function<void()>& fn) {
    try {
        fn();
    } catch (const CodecError& e) {
        return e.code();
    }
    FAIL("expected a CodecError");
    throw std::logic_error("unreachable");
}

DocNode random_doc(std::mt19937_64& rng, int depth = 0) {
    static const char* names[] = {"session", "header",  "body", "value",
                                  "reading", "voltage", "mode", "id"};
    DocNode n;
    n.name = names[rng() % 8];
    std::size_t nattrs = rng() % 3;
    for (std::size_t i = 0; i < nattrs && i < 8; ++i) {
        std::string an = names[(rng() % 4) + 4] + std::to_string(i);
        n.attributes.emplace_back(an, std::to_string(rng() % 100000));
    }
    if (depth >= 3 || rng() % 3 == 0) {
        n.text = "v" + std::to_string(rng() % 1000000);
    } else {
        std::size_t kids = rng() % 4;
        for (std::size_t i = 0; i < kids; ++i)
            n.children.push_back(random_doc(rng, depth + 1));
    }
    return n;
}

} // namespace

TEST_CASE("binary encoding of a small document is frozen", "[codec]") {
    DocNode n;
    n.name = "a";
    n.attributes.emplace_back("x", "1");
    n.text = "hi";
    // magic, SE, literal "a", AT, literal "x", "1", CH, "hi", EE
    CHECK(to_hex(encode_exi(n).bytes) == "9B010001610200017801310302686904");
    CHECK(decode_exi(encode_exi(n)) == n);
}

TEST_CASE("repeated names hit the string table", "[codec]") {
    DocNode outer;
    outer.name = "a";
    outer.children.push_back(DocNode{.name = "a"});
    // second "a" is encoded as index 1 instead of a literal
    CHECK(to_hex(encode_exi(outer).bytes) == "9B0100016101010404");
    CHECK(decode_exi(encode_exi(outer)) == outer);
}

TEST_CASE("canonical text rendering and parsing agree", "[codec]") {
    DocNode n;
    n.name = "msg";
    n.attributes.emplace_back("kind", "demo \"quoted\"");
    DocNode c;
    c.name = "v";
    c.text = "a < b & c > d";
    n.children.push_back(c);
    std::string xml = to_xml_text(n);
    CHECK(xml ==
          "<msg kind=\"demo &quot;quoted&quot;\">"
          "<v>a &lt; b &amp; c &gt; d</v></msg>");
    CHECK(parse_xml_text(xml) == n);

    DocNode empty{.name = "e"};
    CHECK(to_xml_text(empty) == "<e/>");
    CHECK(parse_xml_text("<e/>") == empty);
    CHECK(parse_xml_text("<e  />") == empty);
    CHECK(parse_xml_text("  <e/>\n") == empty);
}

TEST_CASE("whitespace between children is insignificant", "[codec]") {
    DocNode a = parse_xml_text("<r><a/><b/></r>");
    DocNode b = parse_xml_text("<r>\n  <a/>\n  <b/>\n</r>");
    CHECK(a == b);
}

TEST_CASE("malformed text input is rejected", "[codec]") {
    CHECK(code_of([] { parse_xml_text(""); }) == CodecErrc::EmptyInput);
    CHECK(code_of([] { parse_xml_text("   "); }) == CodecErrc::EmptyInput);
    CHECK(code_of([] { parse_xml_text("<a>"); }) == CodecErrc::MalformedXml);
    CHECK(code_of([] { parse_xml_text("<a></b>"); }) ==
          CodecErrc::MalformedXml);
    CHECK(code_of([] { parse_xml_text("<a/><b/>"); }) ==
          CodecErrc::MalformedXml);
    CHECK(code_of([] { parse_xml_text("<a x=\"1\" x=\"2\"/>"); }) ==
          CodecErrc::MalformedXml);
    CHECK(code_of([] { parse_xml_text("<a>t<b/></a>"); }) ==
          CodecErrc::MalformedXml);
    CHECK(code_of([] { parse_xml_text("<a>&bogus;</a>"); }) ==
          CodecErrc::MalformedXml);
}

TEST_CASE("malformed binary input is rejected", "[codec]") {
    CHECK(code_of([] { decode_exi(Bytes{}); }) == CodecErrc::BadMagic);
    CHECK(code_of([] { decode_exi(from_hex("00")); }) == CodecErrc::BadMagic);
    CHECK(code_of([] { decode_exi(from_hex("9B")); }) ==
          CodecErrc::TruncatedStream);
    CHECK(code_of([] { decode_exi(from_hex("9B010001")); }) ==
          CodecErrc::TruncatedStream);
    // name-ref index past the table
    CHECK(code_of([] { decode_exi(from_hex("9B010501616104")); }) ==
          CodecErrc::BadStringTableIndex);
    // unknown event byte inside an element
    CHECK(code_of([] { decode_exi(from_hex("9B0100016109")); }) ==
          CodecErrc::BadEventCode);
    // trailing garbage after the root closes
    CHECK(code_of([] { decode_exi(from_hex("9B010001610400")); }) ==
          CodecErrc::BadEventCode);
}

TEST_CASE("10000 random documents round-trip bit-exactly", "[codec][bulk]") {
    std::mt19937_64 rng(0xC0DEC);
    for (int i = 0; i < 10000; ++i) {
        DocNode doc = random_doc(rng);
        ExiDocument enc = encode_exi(doc);
        DocNode back = decode_exi(enc);
        REQUIRE(back == doc);
        // re-encoding the decoded tree is byte-identical (deterministic codec)
        REQUIRE(encode_exi(back) == enc);
        // text rendering round-trips through the parser too
        REQUIRE(parse_xml_text(to_xml_text(doc)) == doc);
    }
}

TEST_CASE("binary form beats the text rendering on protocol documents",
          "[codec]") {
    // Corpus shaped like charge-session traffic: deep repetition of a small
    // tag vocabulary, exactly what the string table rewards.
    std::mt19937_64 rng(0xBEEF);
    std::size_t exiTotal = 0, xmlTotal = 0;
    for (int i = 0; i < 100; ++i) {
        DocNode root;
        root.name = "v2gMessage";
        DocNode header{.name = "header"};
        DocNode sid{.name = "sessionId", .text = "00112233445566EF"};
        header.children.push_back(sid);
        root.children.push_back(header);
        DocNode body{.name = "body"};
        for (int k = 0; k < 4; ++k) {
            DocNode entry{.name = "meterInfo"};
            entry.children.push_back(
                DocNode{.name = "readingWh", .text = std::to_string(rng() % 9000)});
            entry.children.push_back(
                DocNode{.name = "timestampMs", .text = std::to_string(rng() % 90000)});
            body.children.push_back(entry);
        }
        root.children.push_back(body);
        std::size_t exiSize = encode_exi(root).bytes.size();
        std::size_t xmlSize = to_xml_text(root).size();
        CHECK(exiSize < xmlSize);
        exiTotal += exiSize;
        xmlTotal += xmlSize;
    }
    // Aggregate headroom, not just per-document wins.
    CHECK(exiTotal * 2 < xmlTotal);
}
