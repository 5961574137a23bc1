#pragma once

// Presentation layer: an XML-like document tree with a canonical text
// rendering and a compact schema-less binary encoding.
//
// Binary format: one magic byte (0x9B), then depth-first events
//   SE(0x01) name-ref | AT(0x02) name-ref string | CH(0x03) string |
//   EE(0x04)
// where name-ref is varint 0 followed by a literal (varint length + UTF-8
// bytes, appended to the string table) or varint index+1 of an earlier
// entry. Free-standing strings are varint length + bytes. The stream ends
// when the outermost element closes.

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "v2gsim/bytes.hpp"

namespace v2gsim::codec {

struct DocNode {
    std::string name;
    std::vector<std::pair<std::string, std::string>> attributes;
    std::string text; // mutually exclusive with children
    std::vector<DocNode> children;

    bool operator==(const DocNode&) const = default;

    const DocNode* child(std::string_view childName) const {
        for (const auto& c : children)
            if (c.name == childName) return &c;
        return nullptr;
    }
};

struct ExiDocument {
    Bytes bytes;

    bool operator==(const ExiDocument&) const = default;
};

enum class CodecErrc {
    MalformedXml,
    EmptyInput,
    BadMagic,
    TruncatedStream,
    BadStringTableIndex,
    BadEventCode,
};

class CodecError : public Error {
public:
    CodecError(CodecErrc c, std::string msg) : Error(std::move(msg)), code_(c) {}
    CodecErrc code() const { return code_; }

private:
    CodecErrc code_;
};

inline constexpr std::uint8_t kExiMagic = 0x9B;

namespace detail2 {

constexpr std::uint8_t kStartElement = 0x01;
constexpr std::uint8_t kAttribute = 0x02;
constexpr std::uint8_t kCharacters = 0x03;
constexpr std::uint8_t kEndElement = 0x04;

inline void escape_into(std::string& out, std::string_view s, bool attr) {
    for (char c : s) {
        switch (c) {
        case '&': out += "&amp;"; break;
        case '<': out += "&lt;"; break;
        case '>': out += "&gt;"; break;
        case '"': attr ? void(out += "&quot;") : void(out += c); break;
        case '\'': attr ? void(out += "&apos;") : void(out += c); break;
        default: out += c;
        }
    }
}

inline void render(std::string& out, const DocNode& n) {
    out += '<';
    out += n.name;
    for (const auto& [an, av] : n.attributes) {
        out += ' ';
        out += an;
        out += "=\"";
        escape_into(out, av, true);
        out += '"';
    }
    if (n.text.empty() && n.children.empty()) {
        out += "/>";
        return;
    }
    out += '>';
    if (!n.text.empty()) {
        escape_into(out, n.text, false);
    } else {
        for (const auto& c : n.children) render(out, c);
    }
    out += "</";
    out += n.name;
    out += '>';
}

class StringTable {
public:
    // Returns existing index or npos.
    std::size_t find(std::string_view s) const {
        for (std::size_t i = 0; i < entries_.size(); ++i)
            if (entries_[i] == s) return i;
        return static_cast<std::size_t>(-1);
    }
    void add(std::string s) { entries_.push_back(std::move(s)); }
    const std::string& at(std::size_t i) const { return entries_[i]; }
    std::size_t size() const { return entries_.size(); }

private:
    std::vector<std::string> entries_;
};

inline void put_string(Bytes& out, std::string_view s) {
    detail::put_varint(out, s.size());
    out.insert(out.end(), s.begin(), s.end());
}

inline void put_name_ref(Bytes& out, StringTable& table, const std::string& s) {
    std::size_t idx = table.find(s);
    if (idx == static_cast<std::size_t>(-1)) {
        detail::put_varint(out, 0);
        put_string(out, s);
        table.add(s);
    } else {
        detail::put_varint(out, idx + 1);
    }
}

inline void encode_node(Bytes& out, StringTable& table, const DocNode& n) {
    out.push_back(kStartElement);
    put_name_ref(out, table, n.name);
    for (const auto& [an, av] : n.attributes) {
        out.push_back(kAttribute);
        put_name_ref(out, table, an);
        put_string(out, av);
    }
    if (!n.text.empty()) {
        out.push_back(kCharacters);
        put_string(out, n.text);
    } else {
        for (const auto& c : n.children) encode_node(out, table, c);
    }
    out.push_back(kEndElement);
}

inline std::string get_string(BytesView in, std::size_t& off) {
    std::uint64_t len;
    try {
        len = detail::get_varint(in, off);
    } catch (const Error&) {
        throw CodecError(CodecErrc::TruncatedStream, "exi: truncated varint");
    }
    if (off + len > in.size())
        throw CodecError(CodecErrc::TruncatedStream, "exi: truncated string");
    std::string s(in.begin() + off, in.begin() + off + len);
    off += len;
    return s;
}

inline std::string get_name_ref(BytesView in, std::size_t& off,
                                StringTable& table) {
    std::uint64_t v;
    try {
        v = detail::get_varint(in, off);
    } catch (const Error&) {
        throw CodecError(CodecErrc::TruncatedStream, "exi: truncated name-ref");
    }
    if (v == 0) {
        std::string s = get_string(in, off);
        table.add(s);
        return s;
    }
    if (v > table.size())
        throw CodecError(CodecErrc::BadStringTableIndex,
                         "exi: string table index out of range");
    return table.at(v - 1);
}

inline DocNode decode_node(BytesView in, std::size_t& off, StringTable& table,
                           int depth) {
    if (depth > 256)
        throw CodecError(CodecErrc::BadEventCode, "exi: nesting too deep");
    // caller consumed the SE event byte
    DocNode n;
    n.name = get_name_ref(in, off, table);
    while (true) {
        if (off >= in.size())
            throw CodecError(CodecErrc::TruncatedStream, "exi: missing EE");
        std::uint8_t ev = in[off++];
        switch (ev) {
        case kAttribute: {
            if (!n.children.empty() || !n.text.empty())
                throw CodecError(CodecErrc::BadEventCode,
                                 "exi: attribute after content");
            std::string an = get_name_ref(in, off, table);
            for (const auto& [existing, _] : n.attributes)
                if (existing == an)
                    throw CodecError(CodecErrc::BadEventCode,
                                     "exi: duplicate attribute");
            n.attributes.emplace_back(std::move(an), get_string(in, off));
            break;
        }
        case kCharacters:
            if (!n.children.empty() || !n.text.empty())
                throw CodecError(CodecErrc::BadEventCode,
                                 "exi: mixed or repeated text");
            n.text = get_string(in, off);
            if (n.text.empty())
                throw CodecError(CodecErrc::BadEventCode, "exi: empty text");
            break;
        case kStartElement:
            if (!n.text.empty())
                throw CodecError(CodecErrc::BadEventCode, "exi: mixed content");
            n.children.push_back(decode_node(in, off, table, depth + 1));
            break;
        case kEndElement:
            return n;
        default:
            throw CodecError(CodecErrc::BadEventCode, "exi: unknown event");
        }
    }
}

} // namespace detail2

inline std::string to_xml_text(const DocNode& node) {
    std::string out;
    detail2::render(out, node);
    return out;
}

namespace detail2 {

class XmlParser {
public:
    explicit XmlParser(std::string_view text) : text_(text) {}

    DocNode parse() {
        skip_ws();
        if (pos_ >= text_.size())
            throw CodecError(CodecErrc::EmptyInput, "xml: empty input");
        DocNode root = element();
        skip_ws();
        if (pos_ != text_.size())
            throw CodecError(CodecErrc::MalformedXml,
                             "xml: trailing content after root element");
        return root;
    }

private:
    void skip_ws() {
        while (pos_ < text_.size() &&
               (text_[pos_] == ' ' || text_[pos_] == '\t' ||
                text_[pos_] == '\n' || text_[pos_] == '\r'))
            ++pos_;
    }

    [[noreturn]] void fail(const char* what) {
        throw CodecError(CodecErrc::MalformedXml,
                         std::string("xml: ") + what + " at offset " +
                             std::to_string(pos_));
    }

    char peek() { return pos_ < text_.size() ? text_[pos_] : '\0'; }

    void expect(char c) {
        if (pos_ >= text_.size() || text_[pos_] != c) fail("unexpected char");
        ++pos_;
    }

    static bool name_char(char c) {
        return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') ||
               (c >= '0' && c <= '9') || c == '_' || c == '-' || c == '.' ||
               c == ':';
    }

    std::string name() {
        std::size_t start = pos_;
        while (pos_ < text_.size() && name_char(text_[pos_])) ++pos_;
        if (pos_ == start) fail("expected name");
        return std::string(text_.substr(start, pos_ - start));
    }

    char entity() {
        // pos_ is just past '&'
        std::size_t semi = text_.find(';', pos_);
        if (semi == std::string_view::npos || semi - pos_ > 4)
            fail("bad entity");
        std::string_view e = text_.substr(pos_, semi - pos_);
        pos_ = semi + 1;
        if (e == "amp") return '&';
        if (e == "lt") return '<';
        if (e == "gt") return '>';
        if (e == "quot") return '"';
        if (e == "apos") return '\'';
        fail("unknown entity");
    }

    std::string attr_value() {
        expect('"');
        std::string out;
        while (true) {
            if (pos_ >= text_.size()) fail("unterminated attribute");
            char c = text_[pos_];
            if (c == '"') {
                ++pos_;
                return out;
            }
            if (c == '<') fail("'<' in attribute value");
            ++pos_;
            out += (c == '&') ? entity() : c;
        }
    }

    DocNode element() {
        expect('<');
        DocNode n;
        n.name = name();
        while (true) {
            skip_ws();
            char c = peek();
            if (c == '/') {
                ++pos_;
                expect('>');
                return n; // self-closing
            }
            if (c == '>') {
                ++pos_;
                break;
            }
            std::string an = name();
            for (const auto& [existing, _] : n.attributes)
                if (existing == an) fail("duplicate attribute");
            skip_ws();
            expect('=');
            skip_ws();
            n.attributes.emplace_back(std::move(an), attr_value());
        }
        // content
        std::string text;
        bool sawChild = false;
        while (true) {
            if (pos_ >= text_.size()) fail("unterminated element");
            char c = text_[pos_];
            if (c == '<') {
                if (pos_ + 1 < text_.size() && text_[pos_ + 1] == '/') {
                    pos_ += 2;
                    std::string closing = name();
                    if (closing != n.name) fail("mismatched closing tag");
                    expect('>');
                    break;
                }
                sawChild = true;
                n.children.push_back(element());
            } else if (c == '&') {
                ++pos_;
                text += entity();
            } else {
                text += c;
                ++pos_;
            }
        }
        // Whitespace between child elements is insignificant.
        bool textSignificant = false;
        for (char c : text)
            if (c != ' ' && c != '\t' && c != '\n' && c != '\r')
                textSignificant = true;
        if (textSignificant) {
            if (sawChild) fail("mixed text and children");
            n.text = std::move(text);
        }
        return n;
    }

    std::string_view text_;
    std::size_t pos_ = 0;
};

} // namespace detail2

inline DocNode parse_xml_text(std::string_view text) {
    return detail2::XmlParser(text).parse();
}

inline ExiDocument encode_exi(const DocNode& node) {
    ExiDocument doc;
    doc.bytes.push_back(kExiMagic);
    detail2::StringTable table;
    detail2::encode_node(doc.bytes, table, node);
    return doc;
}

inline DocNode decode_exi(BytesView bytes) {
    if (bytes.empty() || bytes[0] != kExiMagic)
        throw CodecError(CodecErrc::BadMagic, "exi: bad magic byte");
    std::size_t off = 1;
    if (off >= bytes.size() || bytes[off] != detail2::kStartElement)
        throw CodecError(CodecErrc::TruncatedStream, "exi: missing root");
    ++off;
    detail2::StringTable table;
    DocNode root = detail2::decode_node(bytes, off, table, 0);
    if (off != bytes.size())
        throw CodecError(CodecErrc::BadEventCode, "exi: trailing bytes");
    return root;
}

inline DocNode decode_exi(const ExiDocument& doc) {
    return decode_exi(BytesView(doc.bytes));
}

} // namespace v2gsim::codec
