#pragma once

#include <array>
#include <charconv>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "cvrlab/analysis.hpp"
#include "cvrlab/errors.hpp"
#include "cvrlab/experiment.hpp"
#include "cvrlab/models.hpp"
#include "cvrlab/synthdata.hpp"

// JSON/CSV report emission. Every report embeds a schema version and every
// run directory gets a manifest echoing the fully resolved configuration.

namespace cvrlab::report {

inline constexpr int kReportSchemaVersion = 1;

inline std::string format_double(double v) {
    std::array<char, 32> buf;
    const auto res = std::to_chars(buf.data(), buf.data() + buf.size(), v);
    return std::string(buf.data(), res.ptr);
}

inline nlohmann::json to_json(const analysis::RankMetrics& m) {
    return {{"auc", m.auc}, {"ks", m.ks}, {"recall", m.recall}, {"f1", m.f1}};
}

inline nlohmann::json to_json(const analysis::IebReport& r) {
    return {{"mean_label", r.mean_label},
            {"mean_estimate", r.mean_estimate},
            {"gap", r.gap},
            {"label_is_ground_truth", r.label_is_ground_truth}};
}

inline nlohmann::json to_json(const analysis::CrrResult& r) {
    return {{"crr", r.crr}, {"strength", r.strength}};
}

inline nlohmann::json to_json(const analysis::EvalReport& r) {
    nlohmann::json j{{"schema_version", kReportSchemaVersion},
                     {"ctr", to_json(r.ctr)},
                     {"cvr", to_json(r.cvr)},
                     {"ctcvr", to_json(r.ctcvr)},
                     {"ieb_train", to_json(r.ieb)},
                     {"ieb_test", to_json(r.ieb_test)},
                     {"ieb_gap", r.ieb_gap},
                     {"crr", to_json(r.crr)},
                     {"crr_strength", r.crr_strength}};
    if (std::isfinite(r.do_cvr_mae)) j["do_cvr_mae"] = r.do_cvr_mae;
    return j;
}

inline nlohmann::json to_json(const analysis::EstimatorStats& s) {
    return {{"empirical_bias", s.empirical_bias},
            {"empirical_bias_se", s.empirical_bias_se},
            {"empirical_variance", s.empirical_variance},
            {"empirical_variance_se", s.empirical_variance_se},
            {"analytic_bias", s.analytic_bias},
            {"analytic_signed_bias", s.analytic_signed_bias},
            {"analytic_variance", s.analytic_variance},
            {"draws", s.draws}};
}

inline nlohmann::json to_json(const synth::GenerationReport& r) {
    return {{"schema_version", kReportSchemaVersion},
            {"n_records", r.n_records},
            {"clicks", r.clicks},
            {"conversions", r.conversions},
            {"mean_q", r.mean_q},
            {"mean_cvr", r.mean_cvr},
            {"mean_r_clicked", r.mean_r_clicked},
            {"mean_r_potential", r.mean_r_potential},
            {"selection_gap", r.selection_gap},
            {"selection_gap_se", r.selection_gap_se},
            {"selection_effect_ok", r.selection_effect_ok}};
}

inline nlohmann::json to_json(const risk::RiskBreakdown& r) {
    return {{"l_ctr", r.l_ctr}, {"l_cvr", r.l_cvr}, {"l_ctcvr", r.l_ctcvr}, {"total", r.total}};
}

inline nlohmann::json to_json(const synth::SynthConfig& c) {
    return {{"n_users", c.n_users},
            {"n_items", c.n_items},
            {"n_records", c.n_records},
            {"latent_dim", c.latent_dim},
            {"ctr_bias", c.ctr_bias},
            {"cvr_bias", c.cvr_bias},
            {"alpha_couple", c.alpha_couple},
            {"seed", c.seed},
            {"field_layout",
             {{"field_count", c.field_layout.field_count},
              {"cardinalities", c.field_layout.cardinalities},
              {"embedding_dim", c.field_layout.embedding_dim}}}};
}

inline nlohmann::json to_json(const experiment::VerifyRow& row) {
    return {{"kind", experiment::to_string(row.kind)},
            {"instance", row.instance},
            {"d", row.d},
            {"stats", to_json(row.stats)},
            {"ips_empirical_variance", row.ips_empirical_variance},
            {"ips_analytic_variance", row.ips_analytic_variance},
            {"bias_ok", row.bias_ok},
            {"variance_ok", row.variance_ok},
            {"ordering_ok", row.ordering_ok},
            {"pass", row.pass}};
}

inline void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot open for writing: " + path.string());
    out << j.dump(1) << '\n';
    if (!out) throw DataError("write failed: " + path.string());
}

// Plot-ready CSV tables: fixed column order, shortest round-trip doubles.
inline void write_csv(const std::filesystem::path& path,
                      const std::vector<std::string>& header,
                      const std::vector<std::vector<std::string>>& rows) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot open for writing: " + path.string());
    for (std::size_t i = 0; i < header.size(); ++i)
        out << (i ? "," : "") << header[i];
    out << '\n';
    for (const auto& row : rows) {
        for (std::size_t i = 0; i < row.size(); ++i)
            out << (i ? "," : "") << row[i];
        out << '\n';
    }
    if (!out) throw DataError("write failed: " + path.string());
}

// Every value that can affect results goes into the manifest.
inline void write_manifest(const std::filesystem::path& dir, const std::string& command,
                           const nlohmann::json& resolved_config) {
    nlohmann::json j{{"schema_version", kReportSchemaVersion},
                     {"command", command},
                     {"config", resolved_config}};
    write_json(dir / "manifest.json", j);
}

}  // namespace cvrlab::report
