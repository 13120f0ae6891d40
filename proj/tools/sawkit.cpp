// sawkit CLI: synthesize one-port SAW resonator traces, fit resonances and
// loss models, and persist canonical JSON reports.
//
// Exit codes: 0 success, 1 input/validation error, 2 numerical failure.

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <limits>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>

#include "sawkit/sawkit.hpp"

namespace fs = std::filesystem;
using namespace sawkit;

namespace {

// ---------------------------------------------------------------------------
// Worker pool (SAWKIT_THREADS caps the width; tasks fill indexed slots so the
// output order is independent of scheduling)
// ---------------------------------------------------------------------------

unsigned thread_budget() {
    unsigned n = std::thread::hardware_concurrency();
    if (n == 0) n = 1;
    if (const char* env = std::getenv("SAWKIT_THREADS")) {
        char* end = nullptr;
        const long v = std::strtol(env, &end, 10);
        if (end != env && v >= 1) n = static_cast<unsigned>(std::min(v, 64L));
    }
    return n;
}

void parallel_for(std::size_t count, const std::function<void(std::size_t)>& fn) {
    const std::size_t workers =
        std::min<std::size_t>(thread_budget(), count);
    if (workers <= 1) {
        for (std::size_t i = 0; i < count; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::mutex err_mutex;
    std::exception_ptr first_error;
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (std::size_t w = 0; w < workers; ++w)
        pool.emplace_back([&] {
            for (;;) {
                const std::size_t i = next.fetch_add(1);
                if (i >= count) return;
                try {
                    fn(i);
                } catch (...) {
                    const std::lock_guard<std::mutex> lock(err_mutex);
                    if (!first_error) first_error = std::current_exception();
                    return;
                }
            }
        });
    for (auto& t : pool) t.join();
    if (first_error) std::rethrow_exception(first_error);
}

// ---------------------------------------------------------------------------
// Small helpers
// ---------------------------------------------------------------------------

std::string g6(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.6g", v);
    return buf;
}

std::string indexed_name(const char* stem, std::size_t i) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%s_%03zu", stem, i);
    return buf;
}

ComplexTrace read_trace(const fs::path& path, const io::CsvColumnMap& map) {
    if (io::detail::lower(path.extension().string()) == ".csv")
        return io::read_csv_trace(path, map);
    return io::read_touchstone(path);
}

void write_text(const fs::path& path, const std::string& body) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path.string());
    out << body;
    if (!out) throw IoError("write failed for " + path.string());
}

/// Numeric table CSV (headers + all-double cells), the shape used by
/// two-tone scans and sweep tables.
struct TableCsv {
    std::vector<std::string> header;
    std::vector<std::vector<double>> rows;
};

TableCsv read_table_csv(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path.string());
    TableCsv t;
    std::string line;
    while (std::getline(in, line)) {
        t.header = io::detail::split_csv_row(line);
        if (!t.header.empty()) break;
    }
    if (t.header.empty()) throw ParseError("missing CSV header row");
    int row = 0;
    while (std::getline(in, line)) {
        if (line.find_first_not_of(" \t\r,") == std::string::npos) continue;
        ++row;
        const auto fields = io::detail::split_csv_row(line);
        if (fields.size() != t.header.size())
            throw ParseError("data row " + std::to_string(row) + " has " +
                             std::to_string(fields.size()) + " fields, header has " +
                             std::to_string(t.header.size()));
        std::vector<double> vals;
        vals.reserve(fields.size());
        for (std::size_t c = 0; c < fields.size(); ++c)
            vals.push_back(
                io::detail::parse_field(fields[c], t.header[c].c_str(), row));
        t.rows.push_back(std::move(vals));
    }
    return t;
}

int table_column(const TableCsv& t, std::initializer_list<const char*> names) {
    for (const char* want : names)
        for (std::size_t i = 0; i < t.header.size(); ++i)
            if (io::detail::lower(t.header[i]) == want) return int(i);
    return -1;
}

int require_column(const TableCsv& t, std::initializer_list<const char*> names) {
    const int c = table_column(t, names);
    if (c < 0)
        throw ParseError("column '" + std::string(*names.begin()) +
                         "' not found in header");
    return c;
}

// ---------------------------------------------------------------------------
// Synthesis shared by `simulate` and `sweep`
// ---------------------------------------------------------------------------

com::ModeComb single_mode_comb(double f0, double q_i, double q_c,
                               double halfwidth) {
    com::ModeComb comb;
    comb.stopband_center = f0;
    comb.stopband_halfwidth = halfwidth;
    comb.fsr = 2.0 * halfwidth;
    comb.modes.push_back({f0, q_i, q_c});
    return comb;
}

/// Intracavity phonon number at a drive power, solved self-consistently with
/// the saturable loss: n raises Q_i, which raises Q_l, which raises n.
double self_consistent_phonons(double power_dbm, double q_c,
                               double temperature_K,
                               const loss::TlsLossParams& tls) {
    double n = 0.0;
    for (int it = 0; it < 100; ++it) {
        const double qi = loss::qi_power_model(n, temperature_K, tls);
        const double ql = 1.0 / (1.0 / qi + 1.0 / q_c);
        const double n_next = phonon_number(power_dbm, tls.f0, ql, q_c);
        if (std::abs(n_next - n) <= 1e-12 * std::max(1.0, n_next)) return n_next;
        n = n_next;
    }
    return n;
}

struct GeneratedTrace {
    std::string name;  // file stem
    ComplexTrace trace;
    io::json truth;
};

com::SynthesisSpec base_spec(const io::SweepManifest& m) {
    com::SynthesisSpec spec;
    spec.noise_sigma = m.noise_sigma;
    spec.cable_delay_tau = m.cable_delay_tau_s;
    spec.background_amplitude = m.background_amplitude;
    spec.background_phase = m.background_phase_rad;
    spec.frequency_grid.points = m.points;
    return spec;
}

std::vector<GeneratedTrace> generate_geometry(const io::SweepManifest& m) {
    std::vector<GeneratedTrace> out;
    for (std::size_t i = 0; i < m.cavity_lengths_m.size(); ++i) {
        DeviceGeometry g = m.geometry;
        g.cavity_length_L = m.cavity_lengths_m[i];
        const com::ModeComb comb = com::mode_comb(g, m.q_i, m.q_c);
        if (comb.modes.empty())
            throw ValidationError("simulate: no confined modes at L = " +
                                  g6(g.cavity_length_L) + " m");
        double lw = 0.0, f_lo = comb.modes.front().frequency,
               f_hi = comb.modes.back().frequency;
        for (const com::Mode& mode : comb.modes)
            lw = std::max(lw, mode.frequency / mode.q_l());
        const double margin = 0.5 * m.span_linewidths * lw;
        com::SynthesisSpec spec = base_spec(m);
        spec.mode_comb = comb;
        spec.frequency_grid.start = f_lo - margin;
        spec.frequency_grid.stop = f_hi + margin;
        const std::uint64_t seed_i = task_seed(m.seed, i);
        GeneratedTrace gt;
        gt.name = indexed_name("trace", i);
        gt.trace = com::synthesize_s11(spec, seed_i);
        gt.trace.label = gt.name;
        io::json modes = io::json::array();
        for (const com::Mode& mode : comb.modes)
            modes.push_back({{"f0_hz", mode.frequency},
                             {"q_i", mode.q_i},
                             {"q_c", mode.q_c},
                             {"q_l", mode.q_l()}});
        gt.truth = {{"kind", "geometry_sweep"},
                    {"trace", gt.name + ".s1p"},
                    {"cavity_length_L_m", g.cavity_length_L},
                    {"stopband_center_hz", comb.stopband_center},
                    {"stopband_halfwidth_hz", comb.stopband_halfwidth},
                    {"fsr_hz", comb.fsr},
                    {"modes", modes},
                    {"noise_sigma", m.noise_sigma},
                    {"seed", seed_i}};
        out.push_back(std::move(gt));
    }
    return out;
}

std::vector<GeneratedTrace> generate_power(const io::SweepManifest& m) {
    std::vector<GeneratedTrace> out;
    for (std::size_t i = 0; i < m.powers_dbm.size(); ++i) {
        const double p_dbm = m.powers_dbm[i];
        const double n =
            self_consistent_phonons(p_dbm, m.q_c, m.temperature_K, m.tls);
        const double qi = loss::qi_power_model(n, m.temperature_K, m.tls);
        const double ql = 1.0 / (1.0 / qi + 1.0 / m.q_c);
        const double half_span = 0.5 * m.span_linewidths * m.f0_hz / ql;
        com::SynthesisSpec spec = base_spec(m);
        spec.mode_comb = single_mode_comb(m.f0_hz, qi, m.q_c, half_span);
        spec.frequency_grid.start = m.f0_hz - half_span;
        spec.frequency_grid.stop = m.f0_hz + half_span;
        const std::uint64_t seed_i = task_seed(m.seed, i);
        GeneratedTrace gt;
        gt.name = indexed_name("trace", i);
        gt.trace = com::synthesize_s11(spec, seed_i);
        gt.trace.label = gt.name;
        gt.trace.drive_power_dbm = p_dbm;
        gt.trace.temperature_K = m.temperature_K;
        gt.truth = {{"kind", "power_sweep"},
                    {"trace", gt.name + ".s1p"},
                    {"power_dbm", p_dbm},
                    {"temperature_K", m.temperature_K},
                    {"n", n},
                    {"f0_hz", m.f0_hz},
                    {"q_i", qi},
                    {"q_c", m.q_c},
                    {"q_l", ql},
                    {"tls", io::detail::to_json(m.tls)},
                    {"noise_sigma", m.noise_sigma},
                    {"seed", seed_i}};
        out.push_back(std::move(gt));
    }
    return out;
}

std::vector<GeneratedTrace> generate_temperature(const io::SweepManifest& m) {
    std::vector<double> temps = m.temperatures_K;
    std::sort(temps.begin(), temps.end());
    const double s_ref =
        loss::freq_shift_temperature(temps.front(), m.f0_hz, m.tls.q_tls);
    std::vector<GeneratedTrace> out;
    for (std::size_t i = 0; i < temps.size(); ++i) {
        const double t_k = temps[i];
        // unsaturated probe: n = 0 keeps the TLS term fully thermal
        const double qi = loss::qi_power_model(0.0, t_k, m.tls);
        const double ql = 1.0 / (1.0 / qi + 1.0 / m.q_c);
        const double s_t = loss::freq_shift_temperature(t_k, m.f0_hz, m.tls.q_tls);
        const double f0_t = m.f0_hz * (1.0 + (s_t - s_ref));
        const double half_span = 0.5 * m.span_linewidths * f0_t / ql;
        com::SynthesisSpec spec = base_spec(m);
        spec.mode_comb = single_mode_comb(f0_t, qi, m.q_c, half_span);
        spec.frequency_grid.start = f0_t - half_span;
        spec.frequency_grid.stop = f0_t + half_span;
        const std::uint64_t seed_i = task_seed(m.seed, i);
        GeneratedTrace gt;
        gt.name = indexed_name("trace", i);
        gt.trace = com::synthesize_s11(spec, seed_i);
        gt.trace.label = gt.name;
        gt.trace.temperature_K = t_k;
        gt.truth = {{"kind", "temperature_sweep"},
                    {"trace", gt.name + ".s1p"},
                    {"temperature_K", t_k},
                    {"f0_hz", f0_t},
                    {"shift_hz", f0_t - m.f0_hz},
                    {"q_i", qi},
                    {"q_c", m.q_c},
                    {"q_l", ql},
                    {"tls", io::detail::to_json(m.tls)},
                    {"noise_sigma", m.noise_sigma},
                    {"seed", seed_i}};
        out.push_back(std::move(gt));
    }
    return out;
}

struct GeneratedTwoTone {
    std::vector<loss::TwoToneScan> scans;      // noisy, fit-ready
    std::vector<std::string> names;            // one CSV stem per scan
    std::vector<io::json> truths;
    std::vector<std::string> csv_bodies;
};

GeneratedTwoTone generate_twotone(const io::SweepManifest& m) {
    const double qi0 = loss::qi_power_model(0.0, m.tls.t_ref, m.tls);
    const double ql0 = 1.0 / (1.0 / qi0 + 1.0 / m.q_c);
    GeneratedTwoTone out;
    for (std::size_t j = 0; j < m.probe_detunings_hz.size(); ++j) {
        const double detuning = m.probe_detunings_hz[j];
        const double f_probe = m.f_pump_hz + detuning;
        const std::uint64_t seed_j = task_seed(m.seed, j);
        GaussianSampler noise(seed_j);
        loss::TwoToneScan scan;
        scan.f_probe = f_probe;
        std::string csv = "detuning_hz,power_dbm,n_pump,q_i,shift_hz\n";
        for (const double p_dbm : m.powers_dbm) {
            const double n = phonon_number(p_dbm, m.f_pump_hz, ql0, m.q_c);
            const loss::TwoTonePrediction pred =
                loss::twotone_forward(n, m.f_pump_hz, f_probe, m.tls,
                                      m.omega0_hz, m.t2_s, m.t1_ratio * m.t2_s);
            loss::TwoTonePoint pt;
            pt.n_pump = n;
            // relative noise on both observables; Q_i stays positive
            pt.q_i = std::max(pred.q_i * (1.0 + m.noise_sigma * noise()), 1.0);
            pt.shift_hz = pred.shift_hz * (1.0 + m.noise_sigma * noise());
            scan.points.push_back(pt);
            csv += io::format_double(detuning) + "," + io::format_double(p_dbm) +
                   "," + io::format_double(pt.n_pump) + "," +
                   io::format_double(pt.q_i) + "," +
                   io::format_double(pt.shift_hz) + "\n";
        }
        out.scans.push_back(std::move(scan));
        out.names.push_back(indexed_name("twotone", j));
        out.csv_bodies.push_back(std::move(csv));
        out.truths.push_back({{"kind", "twotone_scan"},
                              {"scan", out.names.back() + ".csv"},
                              {"f_pump_hz", m.f_pump_hz},
                              {"detuning_hz", detuning},
                              {"omega0_hz", m.omega0_hz},
                              {"t2_s", m.t2_s},
                              {"t1_ratio", m.t1_ratio},
                              {"nc_eff",
                               loss::nc_effective(m.omega0_hz, m.t2_s,
                                                  m.t1_ratio * m.t2_s)},
                              {"q_l_pump", ql0},
                              {"tls", io::detail::to_json(m.tls)},
                              {"noise_sigma", m.noise_sigma},
                              {"seed", seed_j}});
    }
    return out;
}

// ---------------------------------------------------------------------------
// Subcommand: simulate
// ---------------------------------------------------------------------------

int run_simulate(const io::SweepManifest& m) {
    const fs::path dir = m.output_dir;
    fs::create_directories(dir);
    std::size_t files = 0;
    const auto emit_traces = [&](const std::vector<GeneratedTrace>& traces) {
        for (const auto& gt : traces) {
            io::write_touchstone(dir / (gt.name + ".s1p"), gt.trace, true);
            write_text(dir / (gt.name + ".truth.json"),
                       io::canonical_json(gt.truth));
            std::cout << "wrote " << (dir / (gt.name + ".s1p")).string() << "\n";
            files += 2;
        }
    };
    switch (m.kind) {
        case io::SweepKind::geometry_sweep:
            emit_traces(generate_geometry(m));
            break;
        case io::SweepKind::power_sweep:
            emit_traces(generate_power(m));
            break;
        case io::SweepKind::temperature_sweep:
            emit_traces(generate_temperature(m));
            break;
        case io::SweepKind::twotone_scan: {
            const GeneratedTwoTone gen = generate_twotone(m);
            for (std::size_t j = 0; j < gen.scans.size(); ++j) {
                write_text(dir / (gen.names[j] + ".csv"), gen.csv_bodies[j]);
                write_text(dir / (gen.names[j] + ".truth.json"),
                           io::canonical_json(gen.truths[j]));
                std::cout << "wrote " << (dir / (gen.names[j] + ".csv")).string()
                          << "\n";
                files += 2;
            }
            break;
        }
    }
    std::cout << "simulate: " << files << " files in " << dir.string()
              << " (seed " << m.seed << ")\n";
    return 0;
}

// ---------------------------------------------------------------------------
// Subcommand: fit-resonance
// ---------------------------------------------------------------------------

void print_resonance(const io::ResonanceEntry& e) {
    std::cout << e.source << ": f0 = " << g6(e.fit.f0 / 1e9)
              << " GHz, Q_l = " << g6(e.fit.q_l) << ", Q_i = " << g6(e.fit.q_i)
              << " +- " << g6(e.fit.sigma.q_i) << ", Q_c = " << g6(e.fit.q_c)
              << "\n";
}

int run_fit_resonance(const std::vector<std::string>& paths,
                      const std::string& report_path, bool all_modes,
                      int bootstrap, std::uint64_t seed,
                      const io::CsvColumnMap& map) {
    std::vector<std::vector<io::ResonanceEntry>> slots(paths.size());
    parallel_for(paths.size(), [&](std::size_t i) {
        const ComplexTrace trace = read_trace(paths[i], map);
        extract::FitResonanceOptions opts;
        opts.bootstrap_resamples = bootstrap;
        opts.seed = task_seed(seed, i);
        std::vector<ResonanceFit> fits;
        if (all_modes)
            fits = extract::fit_all_resonances(trace, opts);
        else
            fits.push_back(extract::fit_resonance(trace, opts));
        for (std::size_t k = 0; k < fits.size(); ++k) {
            io::ResonanceEntry entry;
            entry.source = fits.size() > 1
                               ? paths[i] + "[" + std::to_string(k) + "]"
                               : paths[i];
            entry.fit = fits[k];
            entry.power_dbm = trace.drive_power_dbm;
            entry.temperature_K = trace.temperature_K;
            slots[i].push_back(std::move(entry));
        }
    });
    io::Report report;
    report.provenance.seed = seed;
    for (std::size_t i = 0; i < paths.size(); ++i) {
        report.provenance.input_digests[paths[i]] = io::file_digest(paths[i]);
        for (auto& e : slots[i]) {
            print_resonance(e);
            report.resonances.push_back(std::move(e));
        }
    }
    if (!report_path.empty()) {
        const std::string digest = io::write_report(report, report_path);
        std::cout << "report written to " << report_path << " (" << digest
                  << ")\n";
    }
    return 0;
}

// ---------------------------------------------------------------------------
// Subcommand: fit-power
// ---------------------------------------------------------------------------

void print_power_fit(const loss::PowerSweepFit& fit) {
    std::cout << "power sweep fit: Q_TLS = " << g6(fit.params.q_tls) << " +- "
              << g6(fit.sigma_q_tls) << ", Q_rl = " << g6(fit.params.q_rl)
              << " +- " << g6(fit.sigma_q_rl) << ", n_c = " << g6(fit.params.n_c)
              << " +- " << g6(fit.sigma_n_c) << ", beta = " << g6(fit.params.beta)
              << " +- " << g6(fit.sigma_beta) << "\n";
    for (const auto& w : fit.warnings) std::cout << "warning: " << w << "\n";
}

io::TlsFitEntry power_fit_entry(const loss::PowerSweepFit& fit) {
    io::TlsFitEntry entry;
    entry.kind = "power_sweep";
    entry.params = fit.params;
    entry.sigma_q_tls = fit.sigma_q_tls;
    entry.sigma_q_rl = fit.sigma_q_rl;
    entry.sigma_n_c = fit.sigma_n_c;
    entry.sigma_beta = fit.sigma_beta;
    entry.residual_rms = fit.residual_rms;
    entry.warnings = fit.warnings;
    return entry;
}

double median_of(std::vector<double> v) {
    const std::size_t mid = v.size() / 2;
    std::nth_element(v.begin(), v.begin() + long(mid), v.end());
    return v[mid];
}

int run_fit_power(const std::string& input, const std::string& report_path,
                  double temperature_flag, double f0_flag,
                  std::uint64_t seed) {
    std::vector<loss::PowerPoint> points;
    double temperature = temperature_flag;
    double f0 = f0_flag;
    io::Report out;
    out.provenance.seed = seed;

    if (io::detail::lower(fs::path(input).extension().string()) == ".csv") {
        // direct table: phonon number and Q_i per row
        const TableCsv t = read_table_csv(input);
        const int c_n = require_column(t, {"n", "n_pump", "phonon_number"});
        const int c_qi = require_column(t, {"q_i", "qi"});
        for (const auto& row : t.rows)
            points.push_back({row[std::size_t(c_n)], row[std::size_t(c_qi)]});
        if (!(f0 > 0.0))
            throw ValidationError("fit-power: --f0-hz is required for CSV input");
        if (!(temperature > 0.0)) temperature = 0.010;
    } else {
        const io::Report in = io::read_report(input);
        out = in;  // accumulate: keep the resonance entries and earlier fits
        std::vector<double> f0s;
        for (const auto& e : in.resonances) {
            if (!e.power_dbm) continue;
            const double n = phonon_number(*e.power_dbm, e.fit.f0,
                                                 e.fit.q_l, e.fit.q_c);
            points.push_back({n, e.fit.q_i});
            f0s.push_back(e.fit.f0);
            if (!(temperature > 0.0) && e.temperature_K)
                temperature = *e.temperature_K;
        }
        if (points.empty())
            throw ValidationError(
                "fit-power: no resonance entries with power_dbm in " + input);
        if (!(f0 > 0.0)) f0 = median_of(f0s);
        if (!(temperature > 0.0)) temperature = 0.010;
    }
    out.provenance.input_digests[input] = io::file_digest(input);

    const loss::PowerSweepFit fit =
        loss::fit_power_sweep(points, temperature, f0);
    print_power_fit(fit);
    out.tls_fits.push_back(power_fit_entry(fit));
    if (!report_path.empty()) {
        const std::string digest = io::write_report(out, report_path);
        std::cout << "report written to " << report_path << " (" << digest
                  << ")\n";
    }
    return 0;
}

// ---------------------------------------------------------------------------
// Subcommand: fit-temperature
// ---------------------------------------------------------------------------

io::TlsFitEntry temperature_fit_entry(const loss::TemperatureSweepFit& fit) {
    io::TlsFitEntry entry;
    entry.kind = "temperature_sweep";
    entry.params = fit.params;
    entry.sigma_q_tls = fit.sigma_q_tls;
    entry.sigma_q_rl = fit.sigma_q_rl;
    entry.sigma_n_c = fit.sigma_n_c;
    entry.sigma_beta = fit.sigma_beta;
    entry.sigma_mu = fit.sigma_mu;
    entry.residual_rms = fit.residual_rms_qi;
    entry.residual_rms_shift = fit.residual_rms_shift;
    entry.shift_offset_hz = fit.shift_offset_hz;
    entry.warnings = fit.warnings;
    return entry;
}

void print_temperature_fit(const loss::TemperatureSweepFit& fit) {
    std::cout << "temperature sweep fit: Q_TLS = " << g6(fit.params.q_tls)
              << " +- " << g6(fit.sigma_q_tls) << ", Q_rl = "
              << g6(fit.params.q_rl) << ", n_c = " << g6(fit.params.n_c)
              << ", beta = " << g6(fit.params.beta) << ", mu = "
              << g6(fit.params.mu) << " +- " << g6(fit.sigma_mu) << "\n";
    std::cout << "  Q_TLS from Q_i block alone: " << g6(fit.q_tls_qi_only)
              << ", from shift block alone: " << g6(fit.q_tls_shift_only)
              << "\n";
    for (const auto& w : fit.warnings) std::cout << "warning: " << w << "\n";
}

int run_fit_temperature(const std::string& input, const std::string& report_path,
                        double f0_flag, std::uint64_t seed) {
    std::vector<loss::QiTempPoint> qi_points;
    std::vector<loss::ShiftTempPoint> shift_points;
    double f0 = f0_flag;
    io::Report out;
    out.provenance.seed = seed;

    if (io::detail::lower(fs::path(input).extension().string()) == ".csv") {
        const TableCsv t = read_table_csv(input);
        const int c_t = require_column(t, {"temperature_k", "t_k"});
        const int c_qi = require_column(t, {"q_i", "qi"});
        const int c_f0 = table_column(t, {"f0_hz"});
        const int c_sh = table_column(t, {"shift_hz"});
        const int c_n = table_column(t, {"n", "n_pump"});
        if (c_f0 < 0 && c_sh < 0)
            throw ParseError("column 'f0_hz' or 'shift_hz' required");
        std::vector<std::size_t> order(t.rows.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
            return t.rows[a][std::size_t(c_t)] < t.rows[b][std::size_t(c_t)];
        });
        const double f0_ref =
            c_f0 >= 0 ? t.rows[order.front()][std::size_t(c_f0)] : f0;
        if (!(f0 > 0.0)) f0 = f0_ref;
        if (!(f0 > 0.0))
            throw ValidationError(
                "fit-temperature: --f0-hz is required when only shift_hz is given");
        for (const std::size_t i : order) {
            const auto& row = t.rows[i];
            const double t_k = row[std::size_t(c_t)];
            qi_points.push_back(
                {t_k, c_n >= 0 ? row[std::size_t(c_n)] : 0.0,
                 row[std::size_t(c_qi)]});
            shift_points.push_back({t_k, c_f0 >= 0
                                             ? row[std::size_t(c_f0)] - f0_ref
                                             : row[std::size_t(c_sh)]});
        }
    } else {
        const io::Report in = io::read_report(input);
        out = in;  // accumulate: keep the resonance entries and earlier fits
        std::vector<const io::ResonanceEntry*> entries;
        for (const auto& e : out.resonances)
            if (e.temperature_K) entries.push_back(&e);
        if (entries.empty())
            throw ValidationError(
                "fit-temperature: no resonance entries with temperature_K in " +
                input);
        std::sort(entries.begin(), entries.end(),
                  [](const io::ResonanceEntry* a, const io::ResonanceEntry* b) {
                      return *a->temperature_K < *b->temperature_K;
                  });
        const double f0_ref = entries.front()->fit.f0;
        if (!(f0 > 0.0)) f0 = f0_ref;
        for (const auto* e : entries) {
            qi_points.push_back({*e->temperature_K, 0.0, e->fit.q_i});
            shift_points.push_back({*e->temperature_K, e->fit.f0 - f0_ref});
        }
    }
    out.provenance.input_digests[input] = io::file_digest(input);

    const loss::TemperatureSweepFit fit =
        loss::fit_temperature_sweep(qi_points, shift_points, f0);
    print_temperature_fit(fit);
    out.tls_fits.push_back(temperature_fit_entry(fit));
    if (!report_path.empty()) {
        const std::string digest = io::write_report(out, report_path);
        std::cout << "report written to " << report_path << " (" << digest
                  << ")\n";
    }
    return 0;
}

// ---------------------------------------------------------------------------
// Subcommand: fit-twotone
// ---------------------------------------------------------------------------

void print_twotone_fit(const loss::TwoToneResult& fit) {
    std::cout << "two-tone fit: Omega0 = " << g6(fit.omega0) << " +- "
              << g6(fit.sigma_omega0) << " Hz, T2 = " << g6(fit.t2) << " +- "
              << g6(fit.sigma_t2) << " s, nc_eff = " << g6(fit.nc_eff)
              << ", kernel amplitude = " << g6(fit.kernel_amplitude) << "\n";
    for (const auto& w : fit.warnings) std::cout << "warning: " << w << "\n";
}

int run_fit_twotone(const std::vector<std::string>& inputs, double f_pump,
                    const std::string& tls_from, double q_tls, double q_rl,
                    double f0, double t1_ratio, const std::string& report_path,
                    std::uint64_t seed) {
    loss::TlsLossParams tls;
    if (!tls_from.empty()) {
        const io::Report src = io::read_report(tls_from);
        const io::TlsFitEntry* pick = nullptr;
        for (const auto& e : src.tls_fits)
            if (e.kind == "power_sweep" || !pick) pick = &e;
        if (!pick)
            throw ValidationError("fit-twotone: no tls_fits in " + tls_from);
        tls = pick->params;
    } else {
        if (!(q_tls > 0.0) || !(q_rl > 0.0) || !(f0 > 0.0))
            throw ValidationError(
                "fit-twotone: give --tls-from or all of --q-tls, --q-rl, "
                "--f0-hz");
        tls.q_tls = q_tls;
        tls.q_rl = q_rl;
        tls.f0 = f0;
        tls.n_c = 1.0;   // unused by the two-tone model
        tls.beta = 1.0;  // unused by the two-tone model
    }

    // group rows by detuning; a single file may carry several scans
    std::map<double, loss::TwoToneScan> by_detuning;
    io::Report out;
    out.provenance.seed = seed;
    for (const auto& input : inputs) {
        out.provenance.input_digests[input] = io::file_digest(input);
        const TableCsv t = read_table_csv(input);
        const int c_d = require_column(t, {"detuning_hz"});
        const int c_n = require_column(t, {"n_pump", "n"});
        const int c_qi = require_column(t, {"q_i", "qi"});
        const int c_sh = require_column(t, {"shift_hz"});
        for (const auto& row : t.rows) {
            const double d = row[std::size_t(c_d)];
            loss::TwoToneScan& scan = by_detuning[d];
            scan.f_probe = f_pump + d;
            scan.points.push_back({row[std::size_t(c_n)],
                                   row[std::size_t(c_qi)],
                                   row[std::size_t(c_sh)]});
        }
    }
    std::vector<loss::TwoToneScan> scans;
    for (auto& [d, scan] : by_detuning) scans.push_back(std::move(scan));

    const loss::TwoToneResult fit =
        loss::fit_twotone(scans, f_pump, tls, t1_ratio);
    print_twotone_fit(fit);
    out.twotone.push_back(fit);
    if (!report_path.empty()) {
        const std::string digest = io::write_report(out, report_path);
        std::cout << "report written to " << report_path << " (" << digest
                  << ")\n";
    }
    return 0;
}

// ---------------------------------------------------------------------------
// Subcommand: sweep
// ---------------------------------------------------------------------------

void append_table(std::string& csv, const std::vector<double>& row) {
    for (std::size_t i = 0; i < row.size(); ++i)
        csv += (i ? "," : "") + io::format_double(row[i]);
    csv += "\n";
}

int run_sweep(const io::SweepManifest& m, const std::string& manifest_path) {
    const fs::path dir = m.output_dir;
    fs::create_directories(dir);
    io::Report report;
    report.provenance.seed = m.seed;
    report.provenance.input_digests[manifest_path] =
        io::file_digest(manifest_path);

    std::string table;
    switch (m.kind) {
        case io::SweepKind::geometry_sweep: {
            const std::vector<GeneratedTrace> traces = generate_geometry(m);
            std::vector<std::vector<ResonanceFit>> slots(traces.size());
            parallel_for(traces.size(), [&](std::size_t i) {
                slots[i] = extract::fit_all_resonances(traces[i].trace);
            });
            table = "cavity_length_L_m,n_modes,fsr_hz,qbar_i,q_im,qbar_i_true\n";
            std::vector<com::FsrSample> fsr_samples;
            for (std::size_t i = 0; i < traces.size(); ++i) {
                const auto& gt = traces[i];
                io::write_touchstone(dir / (gt.name + ".s1p"), gt.trace, true);
                write_text(dir / (gt.name + ".truth.json"),
                           io::canonical_json(gt.truth));
                std::vector<ResonanceFit> fits = slots[i];
                const double center =
                    gt.truth.at("stopband_center_hz").get<double>();
                // central modes: up to 6 closest to the stopband center
                std::sort(fits.begin(), fits.end(),
                          [center](const ResonanceFit& a, const ResonanceFit& b) {
                              return std::abs(a.f0 - center) <
                                     std::abs(b.f0 - center);
                          });
                const std::size_t central = std::min<std::size_t>(6, fits.size());
                double qbar = 0.0, qim = 0.0;
                for (std::size_t k = 0; k < central; ++k) {
                    qbar += fits[k].q_i;
                    qim = std::max(qim, fits[k].q_i);
                }
                qbar /= double(central);
                double qbar_true = 0.0;
                const auto& modes = gt.truth.at("modes");
                std::vector<double> truth_qi;
                for (const auto& mode : modes)
                    truth_qi.push_back(mode.at("q_i").get<double>());
                std::sort(truth_qi.begin(), truth_qi.end(),
                          std::greater<double>());
                const std::size_t central_true =
                    std::min<std::size_t>(6, truth_qi.size());
                for (std::size_t k = 0; k < central_true; ++k)
                    qbar_true += truth_qi[k];
                qbar_true /= double(central_true);
                // measured FSR: median spacing of the fitted comb
                double fsr_meas = 0.0;
                if (fits.size() >= 2) {
                    std::vector<double> f0s;
                    for (const auto& f : fits) f0s.push_back(f.f0);
                    std::sort(f0s.begin(), f0s.end());
                    std::vector<double> gaps;
                    for (std::size_t k = 1; k < f0s.size(); ++k)
                        gaps.push_back(f0s[k] - f0s[k - 1]);
                    fsr_meas = median_of(gaps);
                    fsr_samples.push_back(
                        {gt.truth.at("cavity_length_L_m").get<double>(),
                         fsr_meas});
                }
                append_table(table,
                             {gt.truth.at("cavity_length_L_m").get<double>(),
                              double(fits.size()), fsr_meas, qbar, qim,
                              qbar_true});
                for (std::size_t k = 0; k < fits.size(); ++k) {
                    io::ResonanceEntry entry;
                    entry.source = gt.name + ".s1p[" + std::to_string(k) + "]";
                    entry.fit = fits[k];
                    report.resonances.push_back(std::move(entry));
                }
            }
            if (fsr_samples.size() >= 2) {
                const com::RsEstimate rs = com::fit_rs_from_fsr(
                    fsr_samples, com::resonance_frequency(m.geometry),
                    m.geometry.pitch_p);
                std::cout << "mirror reflectivity |rs| = " << g6(rs.rs)
                          << " +- " << g6(rs.sigma) << " (from "
                          << fsr_samples.size() << " FSR samples)\n";
            }
            break;
        }
        case io::SweepKind::power_sweep: {
            const std::vector<GeneratedTrace> traces = generate_power(m);
            std::vector<ResonanceFit> slots(traces.size());
            parallel_for(traces.size(), [&](std::size_t i) {
                slots[i] = extract::fit_resonance(traces[i].trace);
            });
            table = "power_dbm,n,q_i,q_i_true\n";
            std::vector<loss::PowerPoint> points;
            std::vector<double> f0s;
            for (std::size_t i = 0; i < traces.size(); ++i) {
                const auto& gt = traces[i];
                io::write_touchstone(dir / (gt.name + ".s1p"), gt.trace, true);
                write_text(dir / (gt.name + ".truth.json"),
                           io::canonical_json(gt.truth));
                const ResonanceFit& fit = slots[i];
                const double p_dbm = gt.truth.at("power_dbm").get<double>();
                const double n =
                    phonon_number(p_dbm, fit.f0, fit.q_l, fit.q_c);
                points.push_back({n, fit.q_i});
                f0s.push_back(fit.f0);
                append_table(table, {p_dbm, n, fit.q_i,
                                     gt.truth.at("q_i").get<double>()});
                io::ResonanceEntry entry;
                entry.source = gt.name + ".s1p";
                entry.fit = fit;
                entry.power_dbm = p_dbm;
                entry.temperature_K = m.temperature_K;
                report.resonances.push_back(std::move(entry));
            }
            const loss::PowerSweepFit fit =
                loss::fit_power_sweep(points, m.temperature_K, median_of(f0s));
            print_power_fit(fit);
            report.tls_fits.push_back(power_fit_entry(fit));
            break;
        }
        case io::SweepKind::temperature_sweep: {
            const std::vector<GeneratedTrace> traces = generate_temperature(m);
            std::vector<ResonanceFit> slots(traces.size());
            parallel_for(traces.size(), [&](std::size_t i) {
                slots[i] = extract::fit_resonance(traces[i].trace);
            });
            table = "temperature_K,q_i,q_i_true,shift_hz,shift_hz_true\n";
            std::vector<loss::QiTempPoint> qi_points;
            std::vector<loss::ShiftTempPoint> shift_points;
            const double f0_ref = slots.front().f0;  // traces sorted by T
            for (std::size_t i = 0; i < traces.size(); ++i) {
                const auto& gt = traces[i];
                io::write_touchstone(dir / (gt.name + ".s1p"), gt.trace, true);
                write_text(dir / (gt.name + ".truth.json"),
                           io::canonical_json(gt.truth));
                const ResonanceFit& fit = slots[i];
                const double t_k = gt.truth.at("temperature_K").get<double>();
                qi_points.push_back({t_k, 0.0, fit.q_i});
                shift_points.push_back({t_k, fit.f0 - f0_ref});
                append_table(table, {t_k, fit.q_i,
                                     gt.truth.at("q_i").get<double>(),
                                     fit.f0 - f0_ref,
                                     gt.truth.at("shift_hz").get<double>()});
                io::ResonanceEntry entry;
                entry.source = gt.name + ".s1p";
                entry.fit = fit;
                entry.temperature_K = t_k;
                report.resonances.push_back(std::move(entry));
            }
            const loss::TemperatureSweepFit fit =
                loss::fit_temperature_sweep(qi_points, shift_points, f0_ref);
            print_temperature_fit(fit);
            report.tls_fits.push_back(temperature_fit_entry(fit));
            break;
        }
        case io::SweepKind::twotone_scan: {
            const GeneratedTwoTone gen = generate_twotone(m);
            table = "detuning_hz,power_dbm,n_pump,q_i,shift_hz\n";
            for (std::size_t j = 0; j < gen.scans.size(); ++j) {
                write_text(dir / (gen.names[j] + ".csv"), gen.csv_bodies[j]);
                write_text(dir / (gen.names[j] + ".truth.json"),
                           io::canonical_json(gen.truths[j]));
                const auto& scan = gen.scans[j];
                for (std::size_t k = 0; k < scan.points.size(); ++k)
                    append_table(table,
                                 {scan.f_probe - m.f_pump_hz, m.powers_dbm[k],
                                  scan.points[k].n_pump, scan.points[k].q_i,
                                  scan.points[k].shift_hz});
            }
            const loss::TwoToneResult fit =
                loss::fit_twotone(gen.scans, m.f_pump_hz, m.tls, m.t1_ratio);
            print_twotone_fit(fit);
            report.twotone.push_back(fit);
            break;
        }
    }

    write_text(dir / "sweep_table.csv", table);
    std::cout << table;
    const std::string digest = io::write_report(report, dir / "report.json");
    std::cout << "report written to " << (dir / "report.json").string() << " ("
              << digest << ")\n";
    return 0;
}

// ---------------------------------------------------------------------------
// Subcommand: report (merge / inspect)
// ---------------------------------------------------------------------------

int run_report(std::vector<std::string> paths, const std::string& out_path) {
    std::sort(paths.begin(), paths.end());
    io::Report merged;
    bool first = true;
    for (const auto& path : paths) {
        const io::Report r = io::read_report(path);
        if (first) {
            merged.provenance.seed = r.provenance.seed;
            first = false;
        }
        merged.provenance.input_digests[path] = io::file_digest(path);
        for (const auto& e : r.resonances) merged.resonances.push_back(e);
        for (const auto& e : r.tls_fits) merged.tls_fits.push_back(e);
        for (const auto& e : r.twotone) merged.twotone.push_back(e);
    }
    std::cout << "merged " << paths.size() << " report(s): "
              << merged.resonances.size() << " resonances, "
              << merged.tls_fits.size() << " loss fits, "
              << merged.twotone.size() << " two-tone fits\n";
    for (const auto& e : merged.tls_fits)
        std::cout << "  " << e.kind << ": Q_TLS = " << g6(e.params.q_tls)
                  << ", Q_rl = " << g6(e.params.q_rl) << ", n_c = "
                  << g6(e.params.n_c) << ", beta = " << g6(e.params.beta)
                  << ", mu = " << g6(e.params.mu) << "\n";
    for (const auto& t : merged.twotone)
        std::cout << "  twotone: Omega0 = " << g6(t.omega0) << " Hz, T2 = "
                  << g6(t.t2) << " s\n";
    if (!out_path.empty()) {
        const std::string digest = io::write_report(merged, out_path);
        std::cout << "report written to " << out_path << " (" << digest
                  << ")\n";
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"one-port SAW resonator simulation and fitting toolkit"};
    app.set_version_flag("--version", std::string(io::kToolVersion));
    app.require_subcommand(1);

    // shared flag storage
    std::string manifest_path, out_dir, report_path, input_path, tls_from;
    std::vector<std::string> inputs;
    std::uint64_t seed = 0;
    bool all_modes = false;
    int bootstrap = 0;
    double temperature_k = 0.0, f0_hz = 0.0, pump_hz = 0.0;
    double q_tls = 0.0, q_rl = 0.0, t1_ratio = 0.5;
    std::string freq_col, re_col, im_col, mag_db_col, phase_deg_col;

    auto* sim = app.add_subcommand(
        "simulate", "synthesize traces and ground-truth sidecars from a manifest");
    sim->add_option("manifest", manifest_path, "sweep manifest (JSON)")
        ->required()
        ->check(CLI::ExistingFile);
    auto* sim_seed = sim->add_option("--seed", seed, "override the manifest seed");
    sim->add_option("--out", out_dir, "override the manifest output_dir");

    auto* fitres = app.add_subcommand(
        "fit-resonance", "fit one-port resonances in trace files (.s1p/.csv)");
    fitres->add_option("traces", inputs, "trace files")
        ->required()
        ->check(CLI::ExistingFile);
    fitres->add_flag("--all", all_modes, "fit every detected mode, not just one");
    fitres->add_option("--bootstrap", bootstrap,
                       "residual bootstrap resamples (default 0: covariance)");
    fitres->add_option("--seed", seed, "bootstrap seed");
    fitres->add_option("--report", report_path, "write a JSON report here");
    fitres->add_option("--freq-col", freq_col, "CSV frequency column name");
    fitres->add_option("--re-col", re_col, "CSV real-part column name");
    fitres->add_option("--im-col", im_col, "CSV imaginary-part column name");
    fitres->add_option("--mag-db-col", mag_db_col, "CSV magnitude (dB) column");
    fitres->add_option("--phase-deg-col", phase_deg_col, "CSV phase (deg) column");

    auto* fitpow = app.add_subcommand(
        "fit-power", "fit the saturable loss model to Q_i versus drive power");
    fitpow->add_option("input", input_path,
                       "fit-resonance report (JSON) or (n, q_i) CSV")
        ->required()
        ->check(CLI::ExistingFile);
    fitpow->add_option("--temperature-k", temperature_k,
                       "operating temperature (default: report metadata or 10 mK)");
    fitpow->add_option("--f0-hz", f0_hz, "mode frequency (required for CSV)");
    fitpow->add_option("--report", report_path, "write a JSON report here");

    auto* fittemp = app.add_subcommand(
        "fit-temperature",
        "joint fit of Q_i(T) and the TLS frequency shift df(T)");
    fittemp->add_option("input", input_path,
                        "fit-resonance report (JSON) or temperature CSV")
        ->required()
        ->check(CLI::ExistingFile);
    fittemp->add_option("--f0-hz", f0_hz,
                        "reference frequency (required with shift_hz CSV input)");
    fittemp->add_option("--report", report_path, "write a JSON report here");

    auto* fittt = app.add_subcommand(
        "fit-twotone", "fit the pump-probe saturation model to two-tone scans");
    fittt->add_option("scans", inputs,
                      "CSV scans with detuning_hz,n_pump,q_i,shift_hz")
        ->required()
        ->check(CLI::ExistingFile);
    fittt->add_option("--pump-hz", pump_hz, "pump frequency")->required();
    fittt->add_option("--tls-from", tls_from,
                      "report whose power-sweep TLS fit supplies Q_TLS/Q_rl/f0")
        ->check(CLI::ExistingFile);
    fittt->add_option("--q-tls", q_tls, "TLS-limited Q (with --q-rl, --f0-hz)");
    fittt->add_option("--q-rl", q_rl, "residual Q");
    fittt->add_option("--f0-hz", f0_hz, "probe mode frequency");
    fittt->add_option("--t1-ratio", t1_ratio, "T1 = ratio * T2 closure (0.5)");
    fittt->add_option("--report", report_path, "write a JSON report here");

    auto* sweep = app.add_subcommand(
        "sweep", "simulate, fit, and tabulate a full sweep from a manifest");
    sweep->add_option("manifest", manifest_path, "sweep manifest (JSON)")
        ->required()
        ->check(CLI::ExistingFile);
    auto* sweep_seed =
        sweep->add_option("--seed", seed, "override the manifest seed");
    sweep->add_option("--out", out_dir, "override the manifest output_dir");

    auto* rep = app.add_subcommand("report", "merge and summarize JSON reports");
    rep->add_option("reports", inputs, "report files")
        ->required()
        ->check(CLI::ExistingFile);
    rep->add_option("--out", report_path, "write the merged report here");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForVersion& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "error: " << e.what() << "\n\n" << app.help();
        return 1;
    }

    try {
        io::CsvColumnMap map;
        if (!freq_col.empty()) map.frequency = freq_col;
        if (!re_col.empty()) map.real = re_col;
        if (!im_col.empty()) map.imag = im_col;
        if (!mag_db_col.empty()) map.mag_db = mag_db_col;
        if (!phase_deg_col.empty()) map.phase_deg = phase_deg_col;

        if (sim->parsed() || sweep->parsed()) {
            io::SweepManifest m = io::read_manifest(manifest_path);
            if ((sim->parsed() ? sim_seed : sweep_seed)->count()) m.seed = seed;
            if (!out_dir.empty()) m.output_dir = out_dir;
            return sim->parsed() ? run_simulate(m) : run_sweep(m, manifest_path);
        }
        if (fitres->parsed())
            return run_fit_resonance(inputs, report_path, all_modes, bootstrap,
                                     seed, map);
        if (fitpow->parsed())
            return run_fit_power(input_path, report_path, temperature_k, f0_hz,
                                 seed);
        if (fittemp->parsed())
            return run_fit_temperature(input_path, report_path, f0_hz, seed);
        if (fittt->parsed())
            return run_fit_twotone(inputs, pump_hz, tls_from, q_tls, q_rl, f0_hz,
                                   t1_ratio, report_path, seed);
        if (rep->parsed()) return run_report(inputs, report_path);
        return 1;
    } catch (const ParseError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const ValidationError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const IoError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const InsufficientSpanError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const DegenerateGeometryError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const DomainError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const Error& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return 2;
    }
}
