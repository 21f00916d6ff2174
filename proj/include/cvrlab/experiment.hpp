#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cvrlab/analysis.hpp"
#include "cvrlab/data.hpp"
#include "cvrlab/errors.hpp"
#include "cvrlab/models.hpp"
#include "cvrlab/synthdata.hpp"

// Shared experiment pipeline: benchmark assembly, per-variant training and
// evaluation, the lemma verification grid and the lambda sweeps. The CLI and
// the acceptance suite both drive these.

namespace cvrlab::experiment {

struct BenchmarkConfig {
    synth::SynthConfig synth;
    std::array<double, 3> split{0.8, 0.1, 0.1};
    bool downsample = false;
    synth::TargetRatio ratio;  // used when downsample is set
};

struct Benchmark {
    Dataset full;  // the entire exposure log, pre-split
    Dataset train, valid, test;
    synth::GenerationReport gen_report;
};

inline Benchmark make_benchmark(const BenchmarkConfig& config) {
    Benchmark b;
    auto gen = synth::generate(config.synth);
    b.gen_report = gen.report;
    if (config.downsample)
        b.full = synth::downsample(gen.data, config.ratio, config.synth.seed);
    else
        b.full = std::move(gen.data);
    auto splits = synth::chronological_split(b.full, config.split);
    b.train = std::move(splits[0]);
    b.valid = std::move(splits[1]);
    b.test = std::move(splits[2]);
    return b;
}

inline models::TrainResult train_variant(ModelVariant variant, const Benchmark& bench,
                                         const nn::TrainConfig& config) {
    auto model = models::build(variant, bench.full.schema, config);
    return models::train(model, bench.train, bench.valid);
}

struct EvalOptions {
    // caliper = caliper_logit_frac * stddev of logit(o_hat) over the split
    double caliper_logit_frac = 0.1;
    bool compute_crr = true;
};

namespace detail {

inline double logit(double p) { return std::log(p / (1.0 - p)); }

inline analysis::IebReport ieb_on(const models::TrainedModel& trained, const Dataset& split) {
    const auto preds = models::predict(trained, split.records);
    std::vector<double> r_hat(preds.size());
    for (std::size_t i = 0; i < preds.size(); ++i) r_hat[i] = preds[i].r_hat;
    return analysis::ieb_report(r_hat, split);
}

}  // namespace detail

// Test-split ranking metrics (CVR over clicked samples only, CTR/CTCVR over
// all exposed samples), IEB on the train and test splits, PSM-based CRR on
// the test split, and the do-CVR error against synthetic ground truth over
// the full exposure log.
inline analysis::EvalReport evaluate(const models::TrainedModel& trained,
                                     const Benchmark& bench,
                                     const EvalOptions& options = {}) {
    analysis::EvalReport report;
    const auto preds = models::predict(trained, bench.test.records);
    const auto& records = bench.test.records;

    std::vector<std::uint8_t> labels;
    std::vector<double> scores;
    labels.reserve(records.size());
    scores.reserve(records.size());

    for (std::size_t i = 0; i < records.size(); ++i) {
        labels.push_back(records[i].o);
        scores.push_back(preds[i].o_hat);
    }
    report.ctr = analysis::rank_metrics(labels, scores);

    labels.clear();
    scores.clear();
    for (std::size_t i = 0; i < records.size(); ++i) {
        if (!records[i].o) continue;
        labels.push_back(records[i].r);
        scores.push_back(preds[i].r_hat);
    }
    report.cvr = analysis::rank_metrics(labels, scores);

    labels.clear();
    scores.clear();
    for (std::size_t i = 0; i < records.size(); ++i) {
        labels.push_back(records[i].o & records[i].r);
        scores.push_back(preds[i].ctcvr);
    }
    report.ctcvr = analysis::rank_metrics(labels, scores);

    report.ieb = detail::ieb_on(trained, bench.train);
    report.ieb_test = detail::ieb_on(trained, bench.test);
    report.ieb_gap = report.ieb.gap;

    if (options.compute_crr) {
        std::vector<std::uint8_t> clicked(records.size());
        std::vector<double> prop_logit(records.size()), outcome(records.size());
        double mean = 0.0;
        for (std::size_t i = 0; i < records.size(); ++i) {
            clicked[i] = records[i].o;
            prop_logit[i] = detail::logit(preds[i].o_hat);
            outcome[i] = preds[i].r_hat;
            mean += prop_logit[i];
        }
        mean /= static_cast<double>(records.size());
        double var = 0.0;
        for (double v : prop_logit) var += (v - mean) * (v - mean);
        var /= static_cast<double>(records.size());
        const double caliper = std::max(options.caliper_logit_frac * std::sqrt(var), 1e-12);
        const auto pairs = analysis::psm_match(clicked, prop_logit, caliper);
        report.crr = analysis::crr_strength(pairs, outcome);
        report.crr_strength = report.crr.strength;
    }

    if (bench.full.has_ground_truth()) {
        const auto full_preds = models::predict(trained, bench.full.records);
        std::vector<double> r_hat(full_preds.size()), truth(full_preds.size());
        for (std::size_t i = 0; i < full_preds.size(); ++i) {
            r_hat[i] = full_preds[i].r_hat;
            truth[i] = *bench.full.records[i].cvr_true;
        }
        report.do_cvr_mae = analysis::mean_abs_error(r_hat, truth);
    }
    return report;
}

// ---------------------------------------------------------------------------
// Lemma verification grid
// ---------------------------------------------------------------------------

struct VerifyConfig {
    std::size_t instances = 20;   // per check kind
    std::size_t draws = 100000;   // Monte Carlo redraws per instance
    std::size_t min_d = 20, max_d = 200;
    std::uint64_t seed = 123;
    double match_se = 5.0;   // |empirical - analytic| tolerance, in SEs
    double zero_se = 4.0;    // |empirical bias - 0| tolerance, in SEs
};

enum class VerifyKind {
    ips_match,        // random o_hat: empirical matches the analytic formulas
    ips_unbiased,     // o_hat = q: bias consistent with 0
    dr_match,         // random o_hat, 0 < delta_hat < 2 delta: match + ordering
    dr_prop_branch,   // o_hat = q, delta_hat arbitrary: bias consistent with 0
    dr_imp_branch,    // delta_hat = delta, o_hat arbitrary: bias exactly 0
};

inline const char* to_string(VerifyKind k) {
    switch (k) {
        case VerifyKind::ips_match: return "ips_match";
        case VerifyKind::ips_unbiased: return "ips_unbiased";
        case VerifyKind::dr_match: return "dr_match";
        case VerifyKind::dr_prop_branch: return "dr_prop_branch";
        case VerifyKind::dr_imp_branch: return "dr_imp_branch";
    }
    return "?";
}

struct VerifyRow {
    VerifyKind kind = VerifyKind::ips_match;
    std::size_t instance = 0;
    std::size_t d = 0;  // |D|
    analysis::EstimatorStats stats;
    double ips_empirical_variance = 0.0;  // dr_match rows: same-instance IPS
    double ips_analytic_variance = 0.0;
    bool bias_ok = true;
    bool variance_ok = true;
    bool ordering_ok = true;  // dr_match rows only
    bool pass = true;
};

struct VerifyOutcome {
    std::vector<VerifyRow> rows;
    bool all_pass = true;
};

namespace detail {

struct Instance {
    std::vector<double> delta, delta_hat, q, o_hat;
};

inline Instance random_instance(const VerifyConfig& cfg, VerifyKind kind,
                                std::size_t index) {
    Rng rng(derive_seed(cfg.seed, static_cast<std::uint64_t>(kind),
                        static_cast<std::uint64_t>(index)));
    Instance inst;
    const std::size_t d = cfg.min_d + rng.below(cfg.max_d - cfg.min_d + 1);
    inst.delta.resize(d);
    inst.delta_hat.resize(d);
    inst.q.resize(d);
    inst.o_hat.resize(d);
    for (std::size_t i = 0; i < d; ++i) {
        inst.delta[i] = rng.uniform(0.05, 2.0);
        inst.q[i] = rng.uniform(0.05, 0.9);
        const double noisy = inst.q[i] * std::exp(rng.uniform(-0.6, 0.6));
        switch (kind) {
            case VerifyKind::ips_match:
            case VerifyKind::dr_match:
            case VerifyKind::dr_imp_branch:
                inst.o_hat[i] = std::clamp(noisy, 0.02, 0.98);
                break;
            case VerifyKind::ips_unbiased:
            case VerifyKind::dr_prop_branch:
                inst.o_hat[i] = inst.q[i];
                break;
        }
        switch (kind) {
            case VerifyKind::dr_match:
                // the low-variance window 0 < delta_hat < 2 delta
                inst.delta_hat[i] = inst.delta[i] * rng.uniform(0.1, 1.9);
                break;
            case VerifyKind::dr_imp_branch:
                inst.delta_hat[i] = inst.delta[i];
                break;
            default:
                inst.delta_hat[i] = rng.uniform(0.0, 2.0);
                break;
        }
    }
    return inst;
}

}  // namespace detail

// Runs the Monte Carlo verification of the analytic bias/variance lemmas for
// the IPS and DR estimators, including the double-robustness branches and
// the variance ordering under 0 < delta_hat < 2 delta.
inline VerifyOutcome verify_lemmas(const VerifyConfig& config) {
    VerifyOutcome out;
    const auto kinds = {VerifyKind::ips_match, VerifyKind::ips_unbiased,
                        VerifyKind::dr_match, VerifyKind::dr_prop_branch,
                        VerifyKind::dr_imp_branch};
    for (VerifyKind kind : kinds) {
        for (std::size_t i = 0; i < config.instances; ++i) {
            const auto inst = detail::random_instance(config, kind, i);
            const bool is_ips =
                kind == VerifyKind::ips_match || kind == VerifyKind::ips_unbiased;
            const auto estimator =
                is_ips ? analysis::EstimatorKind::ips : analysis::EstimatorKind::dr;
            VerifyRow row;
            row.kind = kind;
            row.instance = i;
            row.d = inst.delta.size();
            row.stats = analysis::mc_estimator_stats(
                inst.delta, inst.delta_hat, inst.q, inst.o_hat, estimator, config.draws,
                derive_seed(config.seed, 0x3C1, static_cast<std::uint64_t>(kind), i));

            switch (kind) {
                case VerifyKind::ips_match:
                case VerifyKind::dr_match: {
                    row.bias_ok = std::abs(row.stats.empirical_bias -
                                           row.stats.analytic_signed_bias) <=
                                  config.match_se * row.stats.empirical_bias_se;
                    row.variance_ok =
                        std::abs(row.stats.empirical_variance - row.stats.analytic_variance) <=
                        config.match_se * row.stats.empirical_variance_se;
                    break;
                }
                case VerifyKind::ips_unbiased:
                case VerifyKind::dr_prop_branch: {
                    row.bias_ok = std::abs(row.stats.empirical_bias) <=
                                  config.zero_se * row.stats.empirical_bias_se;
                    break;
                }
                case VerifyKind::dr_imp_branch: {
                    // delta_hat = delta collapses the estimator to the constant P
                    row.bias_ok = std::abs(row.stats.empirical_bias) <=
                                  std::max(config.zero_se * row.stats.empirical_bias_se, 1e-12);
                    break;
                }
            }

            if (kind == VerifyKind::dr_match) {
                const auto ips = analysis::mc_estimator_stats(
                    inst.delta, inst.delta_hat, inst.q, inst.o_hat,
                    analysis::EstimatorKind::ips, config.draws,
                    derive_seed(config.seed, 0x3C2, static_cast<std::uint64_t>(kind), i));
                row.ips_empirical_variance = ips.empirical_variance;
                row.ips_analytic_variance = ips.analytic_variance;
                row.ordering_ok =
                    row.stats.analytic_variance < ips.analytic_variance &&
                    row.stats.empirical_variance < ips.empirical_variance;
            }

            row.pass = row.bias_ok && row.variance_ok && row.ordering_ok;
            out.all_pass = out.all_pass && row.pass;
            out.rows.push_back(row);
        }
    }
    return out;
}

}  // namespace cvrlab::experiment
