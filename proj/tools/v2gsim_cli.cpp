// Command-line front end: run topology files, convert message payloads
// between binary and text form, generate credentials, and export captures.
//
// Exit codes:
//   0  success (for `run`: the run finished and met its expectations)
//   1  run finished but expectations were not met (or the run timed out)
//   2  bad invocation / input file errors
//   3  internal error

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <random>
#include <sstream>
#include <string>

#include <CLI11.hpp>

#include "v2gsim/v2gsim.hpp"

namespace {

std::string read_input(const std::string& path) {
    if (path == "-") {
        std::ostringstream buf;
        buf << std::cin.rdbuf();
        return buf.str();
    }
    std::ifstream in(path, std::ios::binary);
    if (!in) throw v2gsim::Error("cannot open input: " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

void write_output(const std::string& path, const std::string& data) {
    if (path == "-" || path.empty()) {
        std::cout << data;
        return;
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) throw v2gsim::Error("cannot open output: " + path);
    out << data;
}

std::string strip_ws(const std::string& s) {
    std::string out;
    for (char c : s)
        if (!std::isspace(static_cast<unsigned char>(c))) out += c;
    return out;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"deterministic EV charge-session simulator"};
    app.require_subcommand(1);

    // ---- run ----------------------------------------------------------------
    auto* runCmd = app.add_subcommand("run", "execute a topology file");
    std::string topoPath;
    std::uint64_t seedOverride = 0;
    bool seedSet = false;
    std::string capturePath, pcapPath, reportPath;
    bool parallel = false;
    runCmd->add_option("topology", topoPath, "topology file path")->required();
    runCmd->add_option("--seed", seedOverride, "override the file's seed")
        ->each([&](const std::string&) { seedSet = true; });
    runCmd->add_option("--capture", capturePath,
                       "write the frame capture as JSON lines");
    runCmd->add_option("--pcap", pcapPath, "write the frame capture as pcap");
    runCmd->add_option("--report", reportPath,
                       "write the run report as JSON ('-' for stdout)");
    runCmd->add_flag("--parallel", parallel, "start all EVs at t=0");

    // ---- decode / encode ----------------------------------------------------
    auto* decodeCmd =
        app.add_subcommand("decode", "binary message payload to text");
    std::string decodeIn = "-", decodeOut = "-";
    bool decodeHex = false;
    decodeCmd->add_option("input", decodeIn, "input file ('-' for stdin)");
    decodeCmd->add_option("-o,--output", decodeOut, "output file");
    decodeCmd->add_flag("--hex", decodeHex, "input is hex text, not raw bytes");

    auto* encodeCmd =
        app.add_subcommand("encode", "text message payload to binary");
    std::string encodeIn = "-", encodeOut = "-";
    bool encodeHex = false;
    encodeCmd->add_option("input", encodeIn, "input file ('-' for stdin)");
    encodeCmd->add_option("-o,--output", encodeOut, "output file");
    encodeCmd->add_flag("--hex", encodeHex, "emit hex text, not raw bytes");

    // ---- keygen -------------------------------------------------------------
    auto* keygenCmd = app.add_subcommand(
        "keygen", "generate a root authority and one server identity");
    std::string keygenName = "charger-1";
    std::uint64_t keygenSeed = 1;
    keygenCmd->add_option("--name", keygenName, "server certificate subject");
    keygenCmd->add_option("--seed", keygenSeed, "deterministic key seed");

    // ---- capture-export -----------------------------------------------------
    auto* exportCmd = app.add_subcommand(
        "capture-export", "convert a JSON-lines capture to pcap");
    std::string exportIn, exportOut;
    exportCmd->add_option("input", exportIn, "JSON-lines capture file")
        ->required();
    exportCmd->add_option("output", exportOut, "pcap file to write")
        ->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (*runCmd) {
            v2gsim::scenario::TopologySpec spec =
                v2gsim::scenario::load_topology(topoPath);
            if (const char* env = std::getenv("V2GSIM_SEED"))
                spec.seed = std::stoull(env);
            if (seedSet) spec.seed = seedOverride;
            v2gsim::scenario::RunOptions opts;
            opts.capturePath = capturePath;
            opts.pcapPath = pcapPath;
            opts.parallel = parallel;
            v2gsim::scenario::RunReport report =
                v2gsim::scenario::run(spec, opts);
            std::string json =
                v2gsim::scenario::run_report_to_json(report).dump(2) + "\n";
            if (!reportPath.empty())
                write_output(reportPath, json);
            else
                std::cout << json;
            return report.expectations_met() ? 0 : 1;
        }

        if (*decodeCmd) {
            std::string in = read_input(decodeIn);
            v2gsim::Bytes bytes =
                decodeHex ? v2gsim::from_hex(strip_ws(in))
                          : v2gsim::Bytes(in.begin(), in.end());
            write_output(decodeOut, v2gsim::codec::to_xml_text(
                                        v2gsim::codec::decode_exi(bytes)) +
                                        "\n");
            return 0;
        }

        if (*encodeCmd) {
            v2gsim::Bytes bytes =
                v2gsim::codec::encode_exi(
                    v2gsim::codec::parse_xml_text(read_input(encodeIn)))
                    .bytes;
            if (encodeHex)
                write_output(encodeOut, v2gsim::to_hex(bytes) + "\n");
            else
                write_output(encodeOut,
                             std::string(bytes.begin(), bytes.end()));
            return 0;
        }

        if (*keygenCmd) {
            std::mt19937_64 rng(keygenSeed);
            auto authority =
                v2gsim::securechannel::make_authority("V2G Root CA", rng);
            auto identity = v2gsim::securechannel::generate_identity(
                keygenName, authority.anchor.name, authority.key, rng);
            nlohmann::ordered_json j;
            j["authority"] = {
                {"name", authority.anchor.name},
                {"verificationKey",
                 v2gsim::to_hex(authority.anchor.verificationKey)},
                {"signingKey", v2gsim::to_hex(authority.key.bytes)}};
            j["identity"] = {
                {"subject", identity.certificate.subjectName},
                {"certificate",
                 v2gsim::to_hex(identity.certificate.to_bytes())},
                {"signingKey", v2gsim::to_hex(identity.signingKey.bytes)}};
            std::cout << j.dump(2) << "\n";
            return 0;
        }

        if (*exportCmd) {
            std::ifstream in(exportIn);
            if (!in) throw v2gsim::Error("cannot open input: " + exportIn);
            std::vector<v2gsim::netsim::CaptureRecord> records =
                v2gsim::netsim::read_capture_jsonl(in);
            std::ofstream out(exportOut, std::ios::binary);
            if (!out) throw v2gsim::Error("cannot open output: " + exportOut);
            v2gsim::netsim::write_capture_pcap(records, out);
            std::cout << "wrote " << records.size() << " records\n";
            return 0;
        }
    } catch (const v2gsim::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "internal error: " << e.what() << "\n";
        return 3;
    }
    return 2;
}
