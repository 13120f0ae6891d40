#pragma once

// Data ingestion (Touchstone .s1p and CSV reflection traces), canonical JSON
// reports with stable content digests, and sweep manifests for the CLI.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <complex>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "sawkit/domain.hpp"
#include "sawkit/errors.hpp"
#include "sawkit/loss_models.hpp"

namespace sawkit::io {

using json = nlohmann::json;

inline constexpr const char* kSchemaVersion = "1";
inline constexpr const char* kToolVersion = "sawkit 1.0.0";

// ---------------------------------------------------------------------------
// Canonical number formatting and digests
// ---------------------------------------------------------------------------

/// 17 significant digits: enough to round-trip any binary64 value exactly.
inline std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

inline std::uint64_t fnv1a64(std::string_view bytes) {
    std::uint64_t h = 14695981039346656037ull;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

inline std::string digest_hex(std::string_view bytes) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "fnv1a64:%016llx",
                  static_cast<unsigned long long>(fnv1a64(bytes)));
    return buf;
}

// ---------------------------------------------------------------------------
// Canonical JSON serialization
// ---------------------------------------------------------------------------

namespace detail {

/// Rejects non-finite numbers before any bytes reach disk, reporting the
/// JSON path of the offender.
inline void require_finite(const json& v, const std::string& path) {
    switch (v.type()) {
        case json::value_t::number_float:
            if (!std::isfinite(v.get<double>()))
                throw ValidationError("non-finite number at " + path);
            return;
        case json::value_t::object:
            for (const auto& [key, val] : v.items())
                require_finite(val, path + "/" + key);
            return;
        case json::value_t::array: {
            std::size_t i = 0;
            for (const auto& val : v)
                require_finite(val, path + "/" + std::to_string(i++));
            return;
        }
        default:
            return;
    }
}

inline void canonical_append(const json& v, std::string& out) {
    switch (v.type()) {
        case json::value_t::object: {
            out += '{';
            bool first = true;
            // nlohmann objects iterate in ascending key order already; the
            // sort here makes canonical ordering independent of that detail.
            std::vector<std::string> keys;
            keys.reserve(v.size());
            for (const auto& item : v.items()) keys.push_back(item.key());
            std::sort(keys.begin(), keys.end());
            for (const auto& key : keys) {
                if (!first) out += ',';
                first = false;
                out += json(key).dump();
                out += ':';
                canonical_append(v.at(key), out);
            }
            out += '}';
            return;
        }
        case json::value_t::array: {
            out += '[';
            bool first = true;
            for (const auto& item : v) {
                if (!first) out += ',';
                first = false;
                canonical_append(item, out);
            }
            out += ']';
            return;
        }
        case json::value_t::number_float:
            out += format_double(v.get<double>());
            return;
        default:
            out += v.dump();
            return;
    }
}

}  // namespace detail

/// Canonical form: sorted keys, no insignificant whitespace, 17-digit floats,
/// newline-terminated. Byte-identical for structurally equal documents.
inline std::string canonical_json(const json& v) {
    detail::require_finite(v, "");
    std::string out;
    detail::canonical_append(v, out);
    out += '\n';
    return out;
}

// ---------------------------------------------------------------------------
// Touchstone one-port (.s1p, version 1)
// ---------------------------------------------------------------------------

namespace detail {

inline std::string lower(std::string s) {
    std::transform(s.begin(), s.end(), s.begin(),
                   [](unsigned char c) { return std::tolower(c); });
    return s;
}

inline double frequency_unit_hz(const std::string& token, int line_no) {
    const std::string u = lower(token);
    if (u == "hz") return 1.0;
    if (u == "khz") return 1e3;
    if (u == "mhz") return 1e6;
    if (u == "ghz") return 1e9;
    throw ParseError("unknown frequency unit '" + token + "'", line_no);
}

/// "! key = value" metadata comment; separator may be '=' or ':'.
inline std::optional<std::pair<std::string, double>> parse_metadata_comment(
    const std::string& comment) {
    const std::size_t sep = comment.find_first_of("=:");
    if (sep == std::string::npos) return std::nullopt;
    std::string key = comment.substr(0, sep);
    key.erase(std::remove_if(key.begin(), key.end(),
                             [](unsigned char c) { return std::isspace(c); }),
              key.end());
    if (key.empty()) return std::nullopt;
    try {
        std::size_t used = 0;
        const std::string rest = comment.substr(sep + 1);
        const double value = std::stod(rest, &used);
        // trailing garbage after the number disqualifies the line
        for (std::size_t i = used; i < rest.size(); ++i)
            if (!std::isspace(static_cast<unsigned char>(rest[i])))
                return std::nullopt;
        return std::pair{lower(key), value};
    } catch (const std::exception&) {
        return std::nullopt;
    }
}

}  // namespace detail

inline ComplexTrace read_touchstone(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path.string());

    ComplexTrace trace;
    trace.label = path.filename().string();
    double unit_hz = 0.0;
    enum class Format { ri, ma, db } format = Format::ri;
    bool have_option_line = false;

    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        // comments: strip, but mine them for metadata first
        if (const std::size_t bang = line.find('!'); bang != std::string::npos) {
            const auto meta = detail::parse_metadata_comment(line.substr(bang + 1));
            if (meta) {
                if (meta->first == "power_dbm") trace.drive_power_dbm = meta->second;
                if (meta->first == "temperature_k") trace.temperature_K = meta->second;
            }
            line.erase(bang);
        }
        std::istringstream row(line);
        std::string first;
        if (!(row >> first)) continue;  // blank
        if (first[0] == '[')
            throw ParseError("Touchstone v2 keywords are not supported; "
                             "expected a version-1 one-port file", line_no);
        if (first[0] == '#') {
            if (have_option_line)
                throw ParseError("duplicate option line", line_no);
            std::vector<std::string> tokens;
            if (first.size() > 1) tokens.push_back(first.substr(1));
            std::string t;
            while (row >> t) tokens.push_back(t);
            if (tokens.size() < 3)
                throw ParseError("option line needs '# <unit> S <RI|MA|DB>'",
                                 line_no);
            unit_hz = detail::frequency_unit_hz(tokens[0], line_no);
            if (detail::lower(tokens[1]) != "s")
                throw ParseError("only S-parameter files are supported", line_no);
            const std::string fmt = detail::lower(tokens[2]);
            if (fmt == "ri") format = Format::ri;
            else if (fmt == "ma") format = Format::ma;
            else if (fmt == "db") format = Format::db;
            else throw ParseError("unknown format '" + tokens[2] + "'", line_no);
            if (tokens.size() >= 4 && detail::lower(tokens[3]) != "r")
                throw ParseError("expected 'R <reference>' after format", line_no);
            have_option_line = true;
            continue;
        }
        if (!have_option_line)
            throw ParseError("data before the option line", line_no);
        double f = 0.0, a = 0.0, b = 0.0;
        std::istringstream data(line);
        if (!(data >> f >> a >> b))
            throw ParseError("expected 3 columns (frequency and one S11 pair)",
                             line_no);
        std::string extra;
        if (data >> extra)
            throw ParseError("expected 3 columns, found more; only one-port "
                             "files are supported", line_no);
        const double f_hz = f * unit_hz;
        if (!trace.frequencies.empty() && f_hz <= trace.frequencies.back())
            throw ParseError("frequencies must be strictly increasing", line_no);
        std::complex<double> s;
        switch (format) {
            case Format::ri: s = {a, b}; break;
            case Format::ma:
                s = std::polar(a, b * std::numbers::pi / 180.0);
                break;
            case Format::db:
                s = std::polar(std::pow(10.0, a / 20.0),
                               b * std::numbers::pi / 180.0);
                break;
        }
        trace.frequencies.push_back(f_hz);
        trace.s11.push_back(s);
    }
    if (!have_option_line) throw ParseError("missing option line", line_no);
    if (trace.frequencies.empty()) throw ParseError("no data rows", line_no);
    return trace;
}

/// Writes a version-1 one-port file (Hz, RI) with metadata comments that
/// read_touchstone recovers. Synthetic fixtures note their noise generator so
/// the file is self-describing.
inline void write_touchstone(const std::filesystem::path& path,
                             const ComplexTrace& trace,
                             bool synthetic_note = false) {
    trace.validate();
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    if (!trace.label.empty()) out << "! " << trace.label << "\n";
    if (synthetic_note)
        out << "! synthetic trace; noise: mt19937_64 + Box-Muller, "
               "splitmix64-mixed task seed\n";
    if (trace.drive_power_dbm)
        out << "! power_dbm = " << format_double(*trace.drive_power_dbm) << "\n";
    if (trace.temperature_K)
        out << "! temperature_K = " << format_double(*trace.temperature_K) << "\n";
    out << "# Hz S RI R 50\n";
    for (std::size_t i = 0; i < trace.size(); ++i)
        out << format_double(trace.frequencies[i]) << " "
            << format_double(trace.s11[i].real()) << " "
            << format_double(trace.s11[i].imag()) << "\n";
    if (!out) throw IoError("write failed for " + path.string());
}

// ---------------------------------------------------------------------------
// CSV traces
// ---------------------------------------------------------------------------

/// Explicit header names override the built-in candidates. A trace needs
/// (frequency, real, imag) or (frequency, mag_db, phase_deg).
struct CsvColumnMap {
    std::optional<std::string> frequency;
    std::optional<std::string> real;
    std::optional<std::string> imag;
    std::optional<std::string> mag_db;
    std::optional<std::string> phase_deg;
};

namespace detail {

inline std::vector<std::string> split_csv_row(const std::string& line) {
    std::vector<std::string> fields;
    std::string field;
    std::istringstream in(line);
    while (std::getline(in, field, ',')) {
        const auto b = field.find_first_not_of(" \t\r");
        const auto e = field.find_last_not_of(" \t\r");
        fields.push_back(b == std::string::npos ? ""
                                                : field.substr(b, e - b + 1));
    }
    if (!line.empty() && line.back() == ',') fields.push_back("");
    return fields;
}

inline int find_column(const std::vector<std::string>& header,
                       const std::optional<std::string>& explicit_name,
                       std::initializer_list<const char*> candidates) {
    if (explicit_name) {
        for (std::size_t i = 0; i < header.size(); ++i)
            if (lower(header[i]) == lower(*explicit_name)) return int(i);
        throw ParseError("column '" + *explicit_name + "' not found in header");
    }
    for (const char* want : candidates)
        for (std::size_t i = 0; i < header.size(); ++i)
            if (lower(header[i]) == want) return int(i);
    return -1;
}

/// Frequency columns may carry their unit as a suffix; bare names mean Hz.
inline double csv_frequency_scale(const std::string& name) {
    const std::string n = lower(name);
    if (n.ends_with("_ghz")) return 1e9;
    if (n.ends_with("_mhz")) return 1e6;
    if (n.ends_with("_khz")) return 1e3;
    return 1.0;
}

inline double parse_field(const std::string& field, const char* what, int row) {
    try {
        std::size_t used = 0;
        const double v = std::stod(field, &used);
        if (used != field.size())
            throw ParseError(std::string("malformed ") + what + " value '" +
                             field + "' in data row " + std::to_string(row));
        return v;
    } catch (const ParseError&) {
        throw;
    } catch (const std::exception&) {
        throw ParseError(std::string("malformed ") + what + " value '" + field +
                         "' in data row " + std::to_string(row));
    }
}

}  // namespace detail

inline ComplexTrace read_csv_trace(const std::filesystem::path& path,
                                   const CsvColumnMap& columns = {}) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path.string());

    std::string line;
    std::vector<std::string> header;
    while (std::getline(in, line)) {
        header = detail::split_csv_row(line);
        if (!header.empty()) break;
    }
    if (header.empty()) throw ParseError("missing CSV header row");

    const int c_f = detail::find_column(
        header, columns.frequency,
        {"frequency_hz", "frequency_ghz", "frequency_mhz", "frequency_khz",
         "frequency", "freq_hz", "freq", "f_hz", "f"});
    if (c_f < 0) throw ParseError("column 'frequency' not found in header");
    const double f_scale = detail::csv_frequency_scale(header[std::size_t(c_f)]);
    const int c_re = detail::find_column(header, columns.real,
                                         {"re", "real", "s11_re", "re_s11"});
    const int c_im = detail::find_column(header, columns.imag,
                                         {"im", "imag", "s11_im", "im_s11"});
    const int c_db = detail::find_column(header, columns.mag_db,
                                         {"mag_db", "s11_db", "magnitude_db"});
    const int c_ph = detail::find_column(header, columns.phase_deg,
                                         {"phase_deg", "phase", "deg"});
    const bool ri_mode = c_re >= 0 && c_im >= 0;
    if (!ri_mode) {
        if (c_re >= 0 && c_im < 0 && (c_db < 0 || c_ph < 0))
            throw ParseError("column 'imag' not found and no mag_db/phase_deg "
                             "fallback");
        if (c_db < 0 || c_ph < 0)
            throw ParseError("need columns (real, imag) or (mag_db, phase_deg)");
    }
    const int c_pw = detail::find_column(header, std::nullopt, {"power_dbm"});
    const int c_tk = detail::find_column(header, std::nullopt, {"temperature_k"});

    ComplexTrace trace;
    trace.label = path.filename().string();
    int row = 0;
    while (std::getline(in, line)) {
        if (line.find_first_not_of(" \t\r,") == std::string::npos) continue;
        ++row;
        const std::vector<std::string> fields = detail::split_csv_row(line);
        if (fields.size() != header.size())
            throw ParseError("data row " + std::to_string(row) + " has " +
                             std::to_string(fields.size()) + " fields, header has " +
                             std::to_string(header.size()));
        const double f_hz =
            detail::parse_field(fields[std::size_t(c_f)], "frequency", row) *
            f_scale;
        if (!trace.frequencies.empty() && f_hz <= trace.frequencies.back())
            throw ParseError("frequencies must be strictly increasing (data row " +
                             std::to_string(row) + ")");
        std::complex<double> s;
        if (ri_mode) {
            s = {detail::parse_field(fields[std::size_t(c_re)], "real", row),
                 detail::parse_field(fields[std::size_t(c_im)], "imag", row)};
        } else {
            const double db =
                detail::parse_field(fields[std::size_t(c_db)], "mag_db", row);
            const double deg =
                detail::parse_field(fields[std::size_t(c_ph)], "phase_deg", row);
            s = std::polar(std::pow(10.0, db / 20.0),
                           deg * std::numbers::pi / 180.0);
        }
        trace.frequencies.push_back(f_hz);
        trace.s11.push_back(s);
        if (row == 1) {
            if (c_pw >= 0)
                trace.drive_power_dbm =
                    detail::parse_field(fields[std::size_t(c_pw)], "power_dbm", row);
            if (c_tk >= 0)
                trace.temperature_K = detail::parse_field(
                    fields[std::size_t(c_tk)], "temperature_K", row);
        }
    }
    if (trace.frequencies.empty()) throw ParseError("no data rows");
    return trace;
}

// ---------------------------------------------------------------------------
// Report schema
// ---------------------------------------------------------------------------

struct ResonanceEntry {
    std::string source;  // trace file or label
    ResonanceFit fit;
    // trace metadata carried through so sweep-level fits can run off a report
    std::optional<double> power_dbm;
    std::optional<double> temperature_K;
};

struct TlsFitEntry {
    std::string kind;  // "power_sweep" or "temperature_sweep"
    loss::TlsLossParams params;
    double sigma_q_tls = 0.0;
    double sigma_q_rl = 0.0;
    double sigma_n_c = 0.0;
    double sigma_beta = 0.0;
    double sigma_mu = 0.0;
    double residual_rms = 0.0;
    double residual_rms_shift = 0.0;
    double shift_offset_hz = 0.0;  // reference offset absorbed by shift fits
    std::vector<std::string> warnings;
};

struct Provenance {
    std::string tool_version = kToolVersion;
    std::uint64_t seed = 0;
    std::map<std::string, std::string> input_digests;  // path -> digest
};

struct Report {
    std::string schema_version = kSchemaVersion;
    Provenance provenance;
    std::vector<ResonanceEntry> resonances;
    std::vector<TlsFitEntry> tls_fits;
    std::vector<loss::TwoToneResult> twotone;

    void validate() const {
        if (schema_version != kSchemaVersion)
            throw ValidationError("Report: unsupported schema_version '" +
                                  schema_version + "'");
        for (const auto& r : resonances) r.fit.validate();
        for (const auto& t : tls_fits) {
            t.params.validate();
            if (t.kind != "power_sweep" && t.kind != "temperature_sweep")
                throw ValidationError("Report: unknown tls fit kind '" + t.kind +
                                      "'");
        }
        for (const auto& t : twotone) t.validate();
    }
};

namespace detail {

inline json to_json(const ResonanceFit& f) {
    return {{"f0_hz", f.f0},
            {"q_l", f.q_l},
            {"q_i", f.q_i},
            {"q_c", f.q_c},
            {"circle_center_re", f.circle_center.real()},
            {"circle_center_im", f.circle_center.imag()},
            {"circle_radius", f.circle_radius},
            {"residual_rms", f.residual_rms},
            {"dip_consistency", f.dip_consistency},
            {"sigma",
             {{"f0_hz", f.sigma.f0},
              {"q_l", f.sigma.q_l},
              {"q_i", f.sigma.q_i},
              {"q_c", f.sigma.q_c}}}};
}

inline ResonanceFit resonance_from_json(const json& j) {
    ResonanceFit f;
    f.f0 = j.at("f0_hz").get<double>();
    f.q_l = j.at("q_l").get<double>();
    f.q_i = j.at("q_i").get<double>();
    f.q_c = j.at("q_c").get<double>();
    f.circle_center = {j.at("circle_center_re").get<double>(),
                       j.at("circle_center_im").get<double>()};
    f.circle_radius = j.at("circle_radius").get<double>();
    f.residual_rms = j.at("residual_rms").get<double>();
    f.dip_consistency = j.at("dip_consistency").get<double>();
    const json& s = j.at("sigma");
    f.sigma.f0 = s.at("f0_hz").get<double>();
    f.sigma.q_l = s.at("q_l").get<double>();
    f.sigma.q_i = s.at("q_i").get<double>();
    f.sigma.q_c = s.at("q_c").get<double>();
    return f;
}

inline json to_json(const loss::TlsLossParams& p) {
    return {{"q_tls", p.q_tls}, {"q_rl", p.q_rl},   {"n_c", p.n_c},
            {"beta", p.beta},   {"f0_hz", p.f0},    {"t_ref_k", p.t_ref},
            {"mu", p.mu}};
}

inline loss::TlsLossParams tls_params_from_json(const json& j) {
    loss::TlsLossParams p;
    p.q_tls = j.at("q_tls").get<double>();
    p.q_rl = j.at("q_rl").get<double>();
    p.n_c = j.at("n_c").get<double>();
    p.beta = j.at("beta").get<double>();
    p.f0 = j.at("f0_hz").get<double>();
    p.t_ref = j.at("t_ref_k").get<double>();
    p.mu = j.at("mu").get<double>();
    return p;
}

inline json to_json(const loss::TwoToneResult& t) {
    json probes = json::array();
    for (const auto& c : t.per_probe)
        probes.push_back({{"f_probe_hz", c.f_probe},
                          {"detuning_hz", c.detuning_hz},
                          {"shift_curve_hz", c.shift_curve_hz},
                          {"qi_curve", c.qi_curve}});
    return {{"omega0_hz", t.omega0},
            {"t2_s", t.t2},
            {"t1_closure_ratio", t.t1_closure_ratio},
            {"nc_eff", t.nc_eff},
            {"kernel_amplitude", t.kernel_amplitude},
            {"sigma_omega0_hz", t.sigma_omega0},
            {"sigma_t2_s", t.sigma_t2},
            {"residual_rms", t.residual_rms},
            {"warnings", t.warnings},
            {"per_probe", probes}};
}

inline loss::TwoToneResult twotone_from_json(const json& j) {
    loss::TwoToneResult t;
    t.omega0 = j.at("omega0_hz").get<double>();
    t.t2 = j.at("t2_s").get<double>();
    t.t1_closure_ratio = j.at("t1_closure_ratio").get<double>();
    t.nc_eff = j.at("nc_eff").get<double>();
    t.kernel_amplitude = j.at("kernel_amplitude").get<double>();
    t.sigma_omega0 = j.at("sigma_omega0_hz").get<double>();
    t.sigma_t2 = j.at("sigma_t2_s").get<double>();
    t.residual_rms = j.at("residual_rms").get<double>();
    t.warnings = j.at("warnings").get<std::vector<std::string>>();
    for (const auto& c : j.at("per_probe")) {
        loss::TwoToneProbeCurve curve;
        curve.f_probe = c.at("f_probe_hz").get<double>();
        curve.detuning_hz = c.at("detuning_hz").get<double>();
        curve.shift_curve_hz = c.at("shift_curve_hz").get<std::vector<double>>();
        curve.qi_curve = c.at("qi_curve").get<std::vector<double>>();
        t.per_probe.push_back(std::move(curve));
    }
    return t;
}

}  // namespace detail

inline json to_json(const Report& r) {
    json resonances = json::array();
    for (const auto& e : r.resonances) {
        json entry = {{"source", e.source}, {"fit", detail::to_json(e.fit)}};
        if (e.power_dbm) entry["power_dbm"] = *e.power_dbm;
        if (e.temperature_K) entry["temperature_K"] = *e.temperature_K;
        resonances.push_back(std::move(entry));
    }
    json tls = json::array();
    for (const auto& e : r.tls_fits)
        tls.push_back({{"kind", e.kind},
                       {"params", detail::to_json(e.params)},
                       {"sigma_q_tls", e.sigma_q_tls},
                       {"sigma_q_rl", e.sigma_q_rl},
                       {"sigma_n_c", e.sigma_n_c},
                       {"sigma_beta", e.sigma_beta},
                       {"sigma_mu", e.sigma_mu},
                       {"residual_rms", e.residual_rms},
                       {"residual_rms_shift", e.residual_rms_shift},
                       {"shift_offset_hz", e.shift_offset_hz},
                       {"warnings", e.warnings}});
    json twotone = json::array();
    for (const auto& t : r.twotone) twotone.push_back(detail::to_json(t));
    return {{"schema_version", r.schema_version},
            {"provenance",
             {{"tool_version", r.provenance.tool_version},
              {"seed", r.provenance.seed},
              {"inputs", r.provenance.input_digests}}},
            {"resonances", resonances},
            {"tls_fits", tls},
            {"twotone", twotone}};
}

inline Report report_from_json(const json& j) {
    Report r;
    try {
        r.schema_version = j.at("schema_version").get<std::string>();
        const json& prov = j.at("provenance");
        r.provenance.tool_version = prov.at("tool_version").get<std::string>();
        r.provenance.seed = prov.at("seed").get<std::uint64_t>();
        r.provenance.input_digests =
            prov.at("inputs").get<std::map<std::string, std::string>>();
        for (const auto& e : j.at("resonances")) {
            ResonanceEntry entry;
            entry.source = e.at("source").get<std::string>();
            entry.fit = detail::resonance_from_json(e.at("fit"));
            if (e.contains("power_dbm"))
                entry.power_dbm = e.at("power_dbm").get<double>();
            if (e.contains("temperature_K"))
                entry.temperature_K = e.at("temperature_K").get<double>();
            r.resonances.push_back(std::move(entry));
        }
        for (const auto& e : j.at("tls_fits")) {
            TlsFitEntry entry;
            entry.kind = e.at("kind").get<std::string>();
            entry.params = detail::tls_params_from_json(e.at("params"));
            entry.sigma_q_tls = e.at("sigma_q_tls").get<double>();
            entry.sigma_q_rl = e.at("sigma_q_rl").get<double>();
            entry.sigma_n_c = e.at("sigma_n_c").get<double>();
            entry.sigma_beta = e.at("sigma_beta").get<double>();
            entry.sigma_mu = e.at("sigma_mu").get<double>();
            entry.residual_rms = e.at("residual_rms").get<double>();
            entry.residual_rms_shift = e.at("residual_rms_shift").get<double>();
            entry.shift_offset_hz = e.at("shift_offset_hz").get<double>();
            entry.warnings = e.at("warnings").get<std::vector<std::string>>();
            r.tls_fits.push_back(std::move(entry));
        }
        for (const auto& t : j.at("twotone"))
            r.twotone.push_back(detail::twotone_from_json(t));
    } catch (const json::exception& e) {
        throw ValidationError(std::string("malformed report: ") + e.what());
    }
    return r;
}

/// Validates, canonicalizes, writes, and returns the content digest. Nothing
/// touches the filesystem if validation fails.
inline std::string write_report(const Report& report,
                                const std::filesystem::path& path) {
    report.validate();
    const std::string body = canonical_json(to_json(report));
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path.string());
    out << body;
    if (!out) throw IoError("write failed for " + path.string());
    return digest_hex(body);
}

inline Report read_report(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    json j;
    try {
        j = json::parse(in);
    } catch (const json::exception& e) {
        throw ParseError(std::string("invalid JSON in ") + path.string() + ": " +
                         e.what());
    }
    Report r = report_from_json(j);
    r.validate();
    return r;
}

inline std::string file_digest(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    std::ostringstream buf;
    buf << in.rdbuf();
    return digest_hex(buf.str());
}

// ---------------------------------------------------------------------------
// Sweep manifests
// ---------------------------------------------------------------------------

enum class SweepKind { geometry_sweep, power_sweep, temperature_sweep, twotone_scan };

inline const char* to_string(SweepKind k) {
    switch (k) {
        case SweepKind::geometry_sweep: return "geometry_sweep";
        case SweepKind::power_sweep: return "power_sweep";
        case SweepKind::temperature_sweep: return "temperature_sweep";
        case SweepKind::twotone_scan: return "twotone_scan";
    }
    return "?";
}

struct SweepManifest {
    SweepKind kind = SweepKind::power_sweep;
    std::uint64_t seed = 0;
    std::string output_dir;

    // geometry_sweep: device plus the list of cavity lengths to sweep
    DeviceGeometry geometry;
    bool has_geometry = false;
    std::vector<double> cavity_lengths_m;

    // power_sweep / twotone_scan: drive or pump powers
    std::vector<double> powers_dbm;
    // temperature_sweep
    std::vector<double> temperatures_K;

    // synthesis parameters shared by all kinds
    double f0_hz = 0.0;  // single-mode kinds; geometry sweeps derive f0
    double q_c = 0.0;
    double q_i = 0.0;  // geometry sweeps: intrinsic Q attached to every mode
    double noise_sigma = 0.0;
    double cable_delay_tau_s = 0.0;
    double background_amplitude = 1.0;
    double background_phase_rad = 0.0;
    int points = 1001;
    double span_linewidths = 10.0;

    // loss model truth for power/temperature/twotone kinds
    loss::TlsLossParams tls;
    bool has_tls = false;
    double temperature_K = 0.010;  // power_sweep operating temperature

    // twotone_scan extras
    double f_pump_hz = 0.0;
    std::vector<double> probe_detunings_hz;
    double omega0_hz = 0.0;
    double t2_s = 0.0;
    double t1_ratio = 0.5;

    void validate() const {
        if (output_dir.empty())
            throw ValidationError("SweepManifest: output_dir is required");
        if (points < 3) throw ValidationError("SweepManifest: points must be >= 3");
        if (!(span_linewidths > 0.0))
            throw ValidationError("SweepManifest: span_linewidths must be > 0");
        if (!(noise_sigma >= 0.0))
            throw ValidationError("SweepManifest: noise_sigma must be >= 0");
        switch (kind) {
            case SweepKind::geometry_sweep:
                if (!has_geometry)
                    throw ValidationError(
                        "SweepManifest: geometry_sweep requires geometry");
                geometry.validate();
                if (cavity_lengths_m.empty())
                    throw ValidationError(
                        "SweepManifest: geometry_sweep requires cavity_lengths_m");
                if (!(q_i > 0.0) || !(q_c > 0.0))
                    throw ValidationError(
                        "SweepManifest: geometry_sweep requires q_i and q_c");
                break;
            case SweepKind::power_sweep:
                if (powers_dbm.empty())
                    throw ValidationError(
                        "SweepManifest: power_sweep requires powers_dbm");
                if (!has_tls)
                    throw ValidationError(
                        "SweepManifest: power_sweep requires tls parameters");
                tls.validate();
                if (!(f0_hz > 0.0) || !(q_c > 0.0))
                    throw ValidationError(
                        "SweepManifest: power_sweep requires f0_hz and q_c");
                if (!(temperature_K > 0.0))
                    throw ValidationError(
                        "SweepManifest: temperature_K must be > 0");
                break;
            case SweepKind::temperature_sweep:
                if (temperatures_K.empty())
                    throw ValidationError(
                        "SweepManifest: temperature_sweep requires temperatures_K");
                if (!has_tls)
                    throw ValidationError(
                        "SweepManifest: temperature_sweep requires tls parameters");
                tls.validate();
                if (!(f0_hz > 0.0) || !(q_c > 0.0))
                    throw ValidationError(
                        "SweepManifest: temperature_sweep requires f0_hz and q_c");
                break;
            case SweepKind::twotone_scan:
                if (powers_dbm.empty())
                    throw ValidationError(
                        "SweepManifest: twotone_scan requires powers_dbm");
                if (!has_tls)
                    throw ValidationError(
                        "SweepManifest: twotone_scan requires tls parameters");
                tls.validate();
                if (!(f_pump_hz > 0.0))
                    throw ValidationError(
                        "SweepManifest: twotone_scan requires f_pump_hz");
                if (probe_detunings_hz.empty())
                    throw ValidationError(
                        "SweepManifest: twotone_scan requires probe_detunings_hz");
                if (!(omega0_hz > 0.0) || !(t2_s > 0.0) || !(t1_ratio > 0.0))
                    throw ValidationError(
                        "SweepManifest: twotone_scan requires omega0_hz, t2_s, "
                        "t1_ratio");
                break;
        }
    }
};

inline json to_json(const SweepManifest& m) {
    json j = {{"schema_version", kSchemaVersion},
              {"kind", to_string(m.kind)},
              {"seed", m.seed},
              {"output_dir", m.output_dir},
              {"synthesis",
               {{"f0_hz", m.f0_hz},
                {"q_c", m.q_c},
                {"q_i", m.q_i},
                {"noise_sigma", m.noise_sigma},
                {"cable_delay_tau_s", m.cable_delay_tau_s},
                {"background_amplitude", m.background_amplitude},
                {"background_phase_rad", m.background_phase_rad},
                {"points", m.points},
                {"span_linewidths", m.span_linewidths}}}};
    json grid;
    switch (m.kind) {
        case SweepKind::geometry_sweep:
            grid["cavity_lengths_m"] = m.cavity_lengths_m;
            break;
        case SweepKind::power_sweep:
            grid["powers_dbm"] = m.powers_dbm;
            grid["temperature_K"] = m.temperature_K;
            break;
        case SweepKind::temperature_sweep:
            grid["temperatures_K"] = m.temperatures_K;
            break;
        case SweepKind::twotone_scan:
            grid["powers_dbm"] = m.powers_dbm;
            grid["f_pump_hz"] = m.f_pump_hz;
            grid["probe_detunings_hz"] = m.probe_detunings_hz;
            grid["omega0_hz"] = m.omega0_hz;
            grid["t2_s"] = m.t2_s;
            grid["t1_ratio"] = m.t1_ratio;
            break;
    }
    j["grid"] = grid;
    if (m.has_geometry)
        j["geometry"] = {{"pitch_p_m", m.geometry.pitch_p},
                         {"electrode_width_a_m", m.geometry.electrode_width_a},
                         {"aperture_w_m", m.geometry.aperture_w},
                         {"cavity_length_L_m", m.geometry.cavity_length_L},
                         {"mirror_periods_Ng", m.geometry.mirror_periods_Ng},
                         {"saw_velocity_v_m_s", m.geometry.saw_velocity_v},
                         {"reflectivity_rs", m.geometry.reflectivity_rs}};
    if (m.has_tls) j["tls"] = detail::to_json(m.tls);
    return j;
}

inline SweepManifest manifest_from_json(const json& j) {
    SweepManifest m;
    try {
        if (j.value("schema_version", std::string(kSchemaVersion)) !=
            kSchemaVersion)
            throw ValidationError("SweepManifest: unsupported schema_version");
        const std::string kind = j.at("kind").get<std::string>();
        if (kind == "geometry_sweep") m.kind = SweepKind::geometry_sweep;
        else if (kind == "power_sweep") m.kind = SweepKind::power_sweep;
        else if (kind == "temperature_sweep") m.kind = SweepKind::temperature_sweep;
        else if (kind == "twotone_scan") m.kind = SweepKind::twotone_scan;
        else throw ValidationError("SweepManifest: unknown kind '" + kind + "'");
        m.seed = j.at("seed").get<std::uint64_t>();
        m.output_dir = j.at("output_dir").get<std::string>();
        if (j.contains("synthesis")) {
            const json& s = j.at("synthesis");
            m.f0_hz = s.value("f0_hz", m.f0_hz);
            m.q_c = s.value("q_c", m.q_c);
            m.q_i = s.value("q_i", m.q_i);
            m.noise_sigma = s.value("noise_sigma", m.noise_sigma);
            m.cable_delay_tau_s = s.value("cable_delay_tau_s", m.cable_delay_tau_s);
            m.background_amplitude =
                s.value("background_amplitude", m.background_amplitude);
            m.background_phase_rad =
                s.value("background_phase_rad", m.background_phase_rad);
            m.points = s.value("points", m.points);
            m.span_linewidths = s.value("span_linewidths", m.span_linewidths);
        }
        const json& grid = j.at("grid");
        m.cavity_lengths_m =
            grid.value("cavity_lengths_m", std::vector<double>{});
        m.powers_dbm = grid.value("powers_dbm", std::vector<double>{});
        m.temperatures_K = grid.value("temperatures_K", std::vector<double>{});
        m.temperature_K = grid.value("temperature_K", m.temperature_K);
        m.f_pump_hz = grid.value("f_pump_hz", m.f_pump_hz);
        m.probe_detunings_hz =
            grid.value("probe_detunings_hz", std::vector<double>{});
        m.omega0_hz = grid.value("omega0_hz", m.omega0_hz);
        m.t2_s = grid.value("t2_s", m.t2_s);
        m.t1_ratio = grid.value("t1_ratio", m.t1_ratio);
        if (j.contains("geometry")) {
            const json& g = j.at("geometry");
            m.geometry.pitch_p = g.at("pitch_p_m").get<double>();
            m.geometry.electrode_width_a = g.at("electrode_width_a_m").get<double>();
            m.geometry.aperture_w = g.at("aperture_w_m").get<double>();
            m.geometry.cavity_length_L = g.at("cavity_length_L_m").get<double>();
            m.geometry.mirror_periods_Ng = g.at("mirror_periods_Ng").get<int>();
            m.geometry.saw_velocity_v = g.at("saw_velocity_v_m_s").get<double>();
            m.geometry.reflectivity_rs = g.at("reflectivity_rs").get<double>();
            m.has_geometry = true;
        }
        if (j.contains("tls")) {
            m.tls = detail::tls_params_from_json(j.at("tls"));
            m.has_tls = true;
        }
    } catch (const json::exception& e) {
        throw ValidationError(std::string("malformed manifest: ") + e.what());
    }
    m.validate();
    return m;
}

inline SweepManifest read_manifest(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    json j;
    try {
        j = json::parse(in);
    } catch (const json::exception& e) {
        throw ParseError(std::string("invalid JSON in ") + path.string() + ": " +
                         e.what());
    }
    return manifest_from_json(j);
}

inline std::string write_manifest(const SweepManifest& m,
                                  const std::filesystem::path& path) {
    m.validate();
    const std::string body = canonical_json(to_json(m));
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path.string());
    out << body;
    if (!out) throw IoError("write failed for " + path.string());
    return digest_hex(body);
}

}  // namespace sawkit::io
