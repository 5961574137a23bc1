#pragma once

// Declarative topology/scenario files and run orchestration: parse a
// topology, build the network, wire up controllers and the optional MitM,
// run to quiescence or the duration limit, and emit report + capture.
//
// File grammar (line oriented, '#' comments):
//   seed <integer>
//   limit <N><unit>                  unit: us | ms | s
//   expect <ev-name> <outcome>
//   node <name> <kind>               kind: ev | se | switch | mitm | host
//     <key> = <value>                properties, kind-specific
//   end
//   link <a> <b> [latency=<N><unit>]

#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <sodium.h>

#include "v2gsim/attacks.hpp"
#include "v2gsim/controllers.hpp"
#include "v2gsim/netsim.hpp"

namespace v2gsim::scenario {

enum class ScenarioErrc { ParseError, UnknownPropertyKey, ConstraintViolation };

class ScenarioError : public Error {
public:
    ScenarioError(ScenarioErrc c, std::string msg)
        : Error(std::move(msg)), code_(c) {}
    ScenarioErrc code() const { return code_; }

private:
    ScenarioErrc code_;
};

// ---- topology spec -----------------------------------------------------------

enum class NodeKind { Ev, Se, Switch, Mitm, Host };

inline std::string node_kind_name(NodeKind k) {
    switch (k) {
    case NodeKind::Ev: return "ev";
    case NodeKind::Se: return "se";
    case NodeKind::Switch: return "switch";
    case NodeKind::Mitm: return "mitm";
    case NodeKind::Host: return "host";
    }
    return "?";
}

struct NodeSpec {
    std::string name;
    NodeKind kind = NodeKind::Host;
    std::vector<std::pair<std::string, std::string>> properties;
};

struct LinkSpec {
    std::string a, b;
    netsim::SimTime latency = netsim::kDefaultLinkLatency;
};

struct TopologySpec {
    std::vector<NodeSpec> nodes;
    std::vector<LinkSpec> links;
    std::uint64_t seed = 0;
    netsim::SimTime durationLimit = netsim::sec(60);
    std::vector<std::pair<std::string, controllers::Outcome>> expectations;
    std::string sourceText; // verbatim input, hashed into the run report

    const NodeSpec* find(const std::string& name) const {
        for (const auto& n : nodes)
            if (n.name == name) return &n;
        return nullptr;
    }
};

// ---- parsing -----------------------------------------------------------------

namespace detail2 {

[[noreturn]] inline void parse_fail(int line, const std::string& msg) {
    throw ScenarioError(ScenarioErrc::ParseError,
                        "line " + std::to_string(line) + ": " + msg);
}

inline std::string trim(const std::string& s) {
    std::size_t a = s.find_first_not_of(" \t\r");
    std::size_t b = s.find_last_not_of(" \t\r");
    return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
}

inline std::vector<std::string> split_ws(const std::string& s) {
    std::vector<std::string> out;
    std::istringstream in(s);
    std::string tok;
    while (in >> tok) out.push_back(tok);
    return out;
}

inline netsim::SimTime parse_duration(const std::string& v, int line) {
    std::size_t i = 0;
    while (i < v.size() && v[i] >= '0' && v[i] <= '9') ++i;
    if (i == 0) parse_fail(line, "duration: number expected in \"" + v + "\"");
    std::uint64_t n = 0;
    for (std::size_t j = 0; j < i; ++j)
        n = n * 10 + static_cast<std::uint64_t>(v[j] - '0');
    std::string unit = v.substr(i);
    if (unit == "us") return netsim::usec(static_cast<std::int64_t>(n));
    if (unit == "ms") return netsim::msec(static_cast<std::int64_t>(n));
    if (unit == "s") return netsim::sec(static_cast<std::int64_t>(n));
    parse_fail(line, "duration: unit us|ms|s expected in \"" + v + "\"");
}

inline NodeKind parse_kind(const std::string& s, int line) {
    if (s == "ev") return NodeKind::Ev;
    if (s == "se") return NodeKind::Se;
    if (s == "switch") return NodeKind::Switch;
    if (s == "mitm") return NodeKind::Mitm;
    if (s == "host") return NodeKind::Host;
    parse_fail(line, "unknown node kind \"" + s + "\"");
}

inline std::string join_properties(const NodeSpec& node) {
    std::string out;
    for (const auto& [k, v] : node.properties) out += k + " = " + v + "\n";
    return out;
}

inline ScenarioErrc map_config_errc(controllers::ConfigErrc c) {
    switch (c) {
    case controllers::ConfigErrc::ParseError: return ScenarioErrc::ParseError;
    case controllers::ConfigErrc::UnknownPropertyKey:
        return ScenarioErrc::UnknownPropertyKey;
    case controllers::ConfigErrc::ConstraintViolation: break;
    }
    return ScenarioErrc::ConstraintViolation;
}

struct MitmSpec {
    attacks::AttackScenario scenario;
    bool spoofNeighbors = false;
    std::optional<std::string> attachSwitch;
};

inline std::vector<messages::EnergyTransferMode>
parse_mode_list(const std::string& v) {
    std::vector<messages::EnergyTransferMode> out;
    std::istringstream list(v);
    std::string item;
    while (std::getline(list, item, ','))
        out.push_back(messages::mode_from_name(trim(item)));
    return out;
}

inline MitmSpec parse_mitm_properties(const NodeSpec& node) {
    MitmSpec out;
    for (const auto& [key, value] : node.properties) {
        try {
            if (key == "scenario") {
                out.scenario.kind = attacks::scenario_from_name(value);
            } else if (key == "new.port") {
                unsigned long p = std::stoul(value);
                if (p == 0 || p > 65535) throw Error("port out of range");
                out.scenario.newPort = static_cast<std::uint16_t>(p);
            } else if (key == "rewrite.address") {
                out.scenario.rewriteAddress =
                    controllers::detail2::parse_bool_value(key, value);
            } else if (key == "version.major") {
                out.scenario.versionMajor =
                    static_cast<std::uint32_t>(std::stoul(value));
            } else if (key == "version.minor") {
                out.scenario.versionMinor =
                    static_cast<std::uint32_t>(std::stoul(value));
            } else if (key == "add.modes") {
                out.scenario.addModes = parse_mode_list(value);
            } else if (key == "remove.modes") {
                out.scenario.removeModes = parse_mode_list(value);
            } else if (key == "spoof.neighbors") {
                out.spoofNeighbors =
                    controllers::detail2::parse_bool_value(key, value);
            } else if (key == "attach") {
                out.attachSwitch = value;
            } else {
                throw ScenarioError(ScenarioErrc::UnknownPropertyKey,
                                    node.name + ": unknown mitm property key: " +
                                        key);
            }
        } catch (const ScenarioError&) {
            throw;
        } catch (const Error& e) {
            throw ScenarioError(ScenarioErrc::ConstraintViolation,
                                node.name + "." + key + ": " + e.what());
        } catch (const std::exception&) {
            throw ScenarioError(ScenarioErrc::ConstraintViolation,
                                node.name + "." + key + ": bad value \"" +
                                    value + "\"");
        }
    }
    return out;
}

} // namespace detail2

inline TopologySpec parse_topology(const std::string& text) {
    TopologySpec spec;
    spec.sourceText = text;
    std::istringstream in(text);
    std::string rawLine;
    int lineNo = 0;
    NodeSpec* openNode = nullptr;

    while (std::getline(in, rawLine)) {
        ++lineNo;
        std::string line = detail2::trim(rawLine);
        if (line.empty() || line[0] == '#') continue;

        if (openNode) {
            if (line == "end") {
                openNode = nullptr;
                continue;
            }
            std::size_t eq = line.find('=');
            if (eq == std::string::npos)
                detail2::parse_fail(lineNo,
                                    "expected key = value or end inside node "
                                    "block");
            openNode->properties.emplace_back(
                detail2::trim(line.substr(0, eq)),
                detail2::trim(line.substr(eq + 1)));
            continue;
        }

        std::vector<std::string> tok = detail2::split_ws(line);
        if (tok[0] == "seed") {
            if (tok.size() != 2)
                detail2::parse_fail(lineNo, "seed takes one integer");
            try {
                spec.seed = std::stoull(tok[1]);
            } catch (const std::exception&) {
                detail2::parse_fail(lineNo, "seed: integer expected");
            }
        } else if (tok[0] == "limit") {
            if (tok.size() != 2)
                detail2::parse_fail(lineNo, "limit takes one duration");
            spec.durationLimit = detail2::parse_duration(tok[1], lineNo);
        } else if (tok[0] == "expect") {
            if (tok.size() != 3)
                detail2::parse_fail(lineNo, "expect takes node name + outcome");
            controllers::Outcome o;
            try {
                o = controllers::outcome_from_name(tok[2]);
            } catch (const Error&) {
                throw ScenarioError(ScenarioErrc::ConstraintViolation,
                                    "line " + std::to_string(lineNo) +
                                        ": unknown outcome \"" + tok[2] + "\"");
            }
            spec.expectations.emplace_back(tok[1], o);
        } else if (tok[0] == "node") {
            if (tok.size() != 3)
                detail2::parse_fail(lineNo, "node takes name + kind");
            if (spec.find(tok[1]))
                throw ScenarioError(ScenarioErrc::ConstraintViolation,
                                    "duplicate node name: " + tok[1]);
            NodeSpec node;
            node.name = tok[1];
            node.kind = detail2::parse_kind(tok[2], lineNo);
            spec.nodes.push_back(std::move(node));
            openNode = &spec.nodes.back();
        } else if (tok[0] == "link") {
            if (tok.size() != 3 && tok.size() != 4)
                detail2::parse_fail(lineNo,
                                    "link takes two node names [latency=..]");
            LinkSpec link;
            link.a = tok[1];
            link.b = tok[2];
            if (tok.size() == 4) {
                if (tok[3].rfind("latency=", 0) != 0)
                    detail2::parse_fail(lineNo, "expected latency=<duration>");
                link.latency =
                    detail2::parse_duration(tok[3].substr(8), lineNo);
            }
            spec.links.push_back(std::move(link));
        } else {
            detail2::parse_fail(lineNo, "unknown directive \"" + tok[0] + "\"");
        }
    }
    if (openNode)
        throw ScenarioError(ScenarioErrc::ParseError,
                            "unterminated node block: " + openNode->name);

    // Cross-checks and property validation up front, so run() starts from a
    // known-good spec.
    int mitmCount = 0;
    for (const auto& node : spec.nodes) {
        switch (node.kind) {
        case NodeKind::Ev:
        case NodeKind::Se:
            try {
                if (node.kind == NodeKind::Ev)
                    controllers::parse_ev_properties(
                        detail2::join_properties(node));
                else
                    controllers::parse_se_properties(
                        detail2::join_properties(node));
            } catch (const controllers::ConfigError& e) {
                throw ScenarioError(detail2::map_config_errc(e.code()),
                                    node.name + ": " + e.what());
            }
            break;
        case NodeKind::Switch:
        case NodeKind::Host:
            if (!node.properties.empty())
                throw ScenarioError(ScenarioErrc::UnknownPropertyKey,
                                    node.name + ": " +
                                        node_kind_name(node.kind) +
                                        " nodes take no properties");
            break;
        case NodeKind::Mitm:
            ++mitmCount;
            detail2::parse_mitm_properties(node);
            break;
        }
    }
    if (mitmCount > 1)
        throw ScenarioError(ScenarioErrc::ConstraintViolation,
                            "at most one mitm node per scenario");
    for (const auto& link : spec.links) {
        if (!spec.find(link.a) || !spec.find(link.b))
            throw ScenarioError(ScenarioErrc::ConstraintViolation,
                                "link references unknown node: " +
                                    (spec.find(link.a) ? link.b : link.a));
        if (link.a == link.b)
            throw ScenarioError(ScenarioErrc::ConstraintViolation,
                                "self-link on " + link.a);
    }
    for (const auto& [name, outcome] : spec.expectations) {
        (void)outcome;
        const NodeSpec* n = spec.find(name);
        if (!n || n->kind != NodeKind::Ev)
            throw ScenarioError(ScenarioErrc::ConstraintViolation,
                                "expect names a non-EV node: " + name);
    }
    return spec;
}

inline TopologySpec load_topology(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw ScenarioError(ScenarioErrc::ParseError,
                            "cannot open topology file: " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_topology(buf.str());
}

// ---- mitm node properties -------------------------------------------------------

namespace detail2 {


inline std::string digest_hex(const std::string& text) {
    std::array<std::uint8_t, 32> out{};
    if (sodium_init() < 0) throw Error("libsodium init failed");
    crypto_generichash(out.data(), out.size(),
                       reinterpret_cast<const unsigned char*>(text.data()),
                       text.size(), nullptr, 0);
    return to_hex(out);
}

} // namespace detail2

// ---- run ---------------------------------------------------------------------

struct RunOptions {
    std::string capturePath; // empty: keep in memory only
    std::string pcapPath;    // empty: skip pcap export
    bool parallel = false;   // start all EVs at t=0 instead of chaining
};

struct RunReport {
    std::vector<std::pair<std::string, controllers::ChargeSessionReport>> perEv;
    std::optional<attacks::MitmStats> mitmStats;
    std::string capturePath;
    std::uint64_t seed = 0;
    std::string specDigest;
    bool timedOut = false;
    std::vector<std::pair<std::string, controllers::Outcome>> expectations;

    /// With no expect clauses every EV must Complete; with clauses, each
    /// named EV's outcome must match (unnamed EVs are unconstrained).
    bool expectations_met() const {
        if (timedOut) return false;
        if (expectations.empty()) {
            for (const auto& [name, rep] : perEv)
                if (rep.outcome != controllers::Outcome::Completed)
                    return false;
            return true;
        }
        for (const auto& [name, expected] : expectations) {
            bool found = false;
            for (const auto& [evName, rep] : perEv)
                if (evName == name) {
                    found = true;
                    if (rep.outcome != expected) return false;
                }
            if (!found) return false;
        }
        return true;
    }
};

inline nlohmann::ordered_json run_report_to_json(const RunReport& r) {
    nlohmann::ordered_json j;
    j["seed"] = r.seed;
    j["specDigest"] = r.specDigest;
    j["timedOut"] = r.timedOut;
    j["capturePath"] = r.capturePath;
    j["expectationsMet"] = r.expectations_met();
    nlohmann::ordered_json per = nlohmann::ordered_json::object();
    for (const auto& [name, rep] : r.perEv)
        per[name] = controllers::report_to_json(rep);
    j["perEv"] = per;
    if (r.mitmStats) {
        j["mitmStats"] = {{"intercepted", r.mitmStats->intercepted},
                          {"modified", r.mitmStats->modified},
                          {"dropped", r.mitmStats->dropped},
                          {"injected", r.mitmStats->injected},
                          {"forwarded", r.mitmStats->forwarded},
                          {"decodeFailures", r.mitmStats->decodeFailures}};
    }
    return j;
}

/// Owns the simulation and all controllers for one run, so tests can poke at
/// captures and per-node state after execute() returns.
class ScenarioRun {
public:
    explicit ScenarioRun(TopologySpec spec) : spec_(std::move(spec)) {
        sim_ = std::make_unique<netsim::Simulation>(spec_.seed);
        build();
    }

    netsim::Simulation& sim() { return *sim_; }
    attacks::MitmNode* mitm() { return mitm_.get(); }

    controllers::EvccController* evcc(const std::string& name) {
        for (auto& [n, c] : evccs_)
            if (n == name) return c.get();
        return nullptr;
    }
    controllers::SeccController* secc(const std::string& name) {
        for (auto& [n, c] : seccs_)
            if (n == name) return c.get();
        return nullptr;
    }

    RunReport execute(const RunOptions& opts = {}) {
        if (mitm_) {
            mitm_->attach(*sim_, mitmAttachSwitch_);
            if (mitmSpoof_) mitm_->spoof_neighbors();
        }
        for (auto& [name, secc] : seccs_) secc->start();

        std::size_t pendingEvs = evccs_.size();
        auto allDone = std::make_shared<std::size_t>(pendingEvs);
        if (opts.parallel) {
            for (auto& [name, ev] : evccs_)
                ev->start([allDone](const controllers::ChargeSessionReport&) {
                    --*allDone;
                });
        } else if (!evccs_.empty()) {
            start_chain(0, allDone);
        }

        bool quiescent = sim_->run(spec_.durationLimit);

        RunReport report;
        report.seed = spec_.seed;
        report.specDigest = detail2::digest_hex(spec_.sourceText);
        report.expectations = spec_.expectations;
        report.timedOut = !quiescent && *allDone != 0;
        for (auto& [name, ev] : evccs_) report.perEv.emplace_back(name, ev->report());
        if (mitm_) report.mitmStats = mitm_->stats();
        report.capturePath = opts.capturePath;
        if (!opts.capturePath.empty())
            sim_->export_capture_jsonl(opts.capturePath);
        if (!opts.pcapPath.empty()) sim_->export_capture_pcap(opts.pcapPath);
        return report;
    }

private:
    void start_chain(std::size_t index,
                     std::shared_ptr<std::size_t> remaining) {
        auto& [name, ev] = evccs_[index];
        ev->start([this, index, remaining](
                      const controllers::ChargeSessionReport&) {
            --*remaining;
            if (index + 1 < evccs_.size()) start_chain(index + 1, remaining);
        });
    }

    void build() {
        netsim::NetworkDesc desc;
        for (const auto& node : spec_.nodes)
            desc.nodes.push_back(netsim::NodeDesc{
                node.name, node.kind == NodeKind::Switch, std::nullopt});
        for (const auto& link : spec_.links)
            desc.links.push_back(
                netsim::LinkDesc{link.a, link.b, link.latency});
        sim_->populate(desc);

        // TLS provisioning: one shared root; each tls-enabled SE gets an
        // identity, each tls-enabled EV pins the root anchor.
        std::mt19937_64 provisioningRng(spec_.seed ^ 0x746c73ULL);
        std::optional<securechannel::Authority> authority;
        auto root = [&]() -> securechannel::Authority& {
            if (!authority)
                authority = securechannel::make_authority("V2G Root CA",
                                                          provisioningRng);
            return *authority;
        };

        for (const auto& node : spec_.nodes) {
            switch (node.kind) {
            case NodeKind::Ev: {
                controllers::EvConfig cfg = controllers::parse_ev_properties(
                    detail2::join_properties(node));
                if (cfg.tls) cfg.trustAnchor = root().anchor;
                evccs_.emplace_back(
                    node.name, std::make_unique<controllers::EvccController>(
                                   *sim_->find_host(node.name), cfg));
                break;
            }
            case NodeKind::Se: {
                controllers::SeConfig cfg = controllers::parse_se_properties(
                    detail2::join_properties(node));
                if (cfg.tls)
                    cfg.tlsIdentity = securechannel::generate_identity(
                        node.name, root().anchor.name, root().key,
                        provisioningRng);
                seccs_.emplace_back(
                    node.name, std::make_unique<controllers::SeccController>(
                                   *sim_->find_host(node.name), cfg));
                break;
            }
            case NodeKind::Mitm: {
                detail2::MitmSpec ms = detail2::parse_mitm_properties(node);
                mitm_ = std::make_unique<attacks::MitmNode>(
                    *sim_->find_host(node.name), ms.scenario);
                mitmSpoof_ = ms.spoofNeighbors;
                if (ms.attachSwitch) {
                    mitmAttachSwitch_ = *ms.attachSwitch;
                } else {
                    for (const auto& link : spec_.links) {
                        const std::string& peer =
                            link.a == node.name ? link.b
                            : link.b == node.name ? link.a
                                                  : std::string();
                        if (peer.empty()) continue;
                        const NodeSpec* p = spec_.find(peer);
                        if (p && p->kind == NodeKind::Switch) {
                            mitmAttachSwitch_ = peer;
                            break;
                        }
                    }
                }
                if (mitmAttachSwitch_.empty())
                    throw ScenarioError(
                        ScenarioErrc::ConstraintViolation,
                        node.name + ": mitm node is not linked to a switch");
                break;
            }
            case NodeKind::Switch:
            case NodeKind::Host: break;
            }
        }
    }

    TopologySpec spec_;
    std::unique_ptr<netsim::Simulation> sim_;
    std::vector<std::pair<std::string,
                          std::unique_ptr<controllers::EvccController>>>
        evccs_;
    std::vector<std::pair<std::string,
                          std::unique_ptr<controllers::SeccController>>>
        seccs_;
    std::unique_ptr<attacks::MitmNode> mitm_;
    std::string mitmAttachSwitch_;
    bool mitmSpoof_ = false;
};

inline RunReport run(const TopologySpec& spec, const RunOptions& opts = {}) {
    ScenarioRun r(spec);
    return r.execute(opts);
}

} // namespace v2gsim::scenario
