#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <vector>

#include "cvrlab/data.hpp"
#include "cvrlab/errors.hpp"
#include "cvrlab/risk.hpp"
#include "cvrlab/rng.hpp"

// The statistical laboratory: closed-form bias/variance of the IPS and DR
// estimators, Monte Carlo verification, the Jensen-gap mechanism behind CVR
// overestimation, IEB measurement, propensity score matching with causal
// risk ratios, and the ranking metrics.

namespace cvrlab::analysis {

struct AnalyticStats {
    double bias = 0.0;         // absolute value, as stated
    double variance = 0.0;
    double signed_bias = 0.0;  // E_O[estimator] - P, before the absolute value
};

// Bias and variance of R_IPS under click redraws O ~ Bernoulli(q).
// The bias follows the derivation line sum delta*(q/o_hat - 1), which is the
// only form consistent with unbiasedness at o_hat = q; variance is
// sum q(1-q) delta^2 / o_hat^2 scaled by 1/|D|^2.
inline AnalyticStats analytic_ips_stats(std::span<const double> delta,
                                        std::span<const double> q,
                                        std::span<const double> o_hat) {
    if (delta.size() != q.size() || delta.size() != o_hat.size())
        throw ConfigError("analytic_ips_stats: length mismatch");
    if (delta.empty()) throw ConfigError("analytic_ips_stats: empty input");
    const double n = static_cast<double>(delta.size());
    double bias_sum = 0.0, var_sum = 0.0;
    for (std::size_t i = 0; i < delta.size(); ++i) {
        if (!(o_hat[i] > 0.0)) throw std::domain_error("analytic_ips_stats: o_hat <= 0");
        bias_sum += delta[i] * (q[i] / o_hat[i] - 1.0);
        var_sum += q[i] * (1.0 - q[i]) * delta[i] * delta[i] / (o_hat[i] * o_hat[i]);
    }
    AnalyticStats out;
    out.signed_bias = bias_sum / n;
    out.bias = std::abs(out.signed_bias);
    out.variance = var_sum / (n * n);
    return out;
}

// Bias and variance of R_DR^err: bias = |sum (q - o_hat)(delta - delta_hat) /
// o_hat| / |D|; variance = sum q(1-q)(delta_hat - delta)^2 / o_hat^2 / |D|^2.
inline AnalyticStats analytic_dr_stats(std::span<const double> delta,
                                       std::span<const double> delta_hat,
                                       std::span<const double> q,
                                       std::span<const double> o_hat) {
    if (delta.size() != delta_hat.size() || delta.size() != q.size() ||
        delta.size() != o_hat.size())
        throw ConfigError("analytic_dr_stats: length mismatch");
    if (delta.empty()) throw ConfigError("analytic_dr_stats: empty input");
    const double n = static_cast<double>(delta.size());
    double bias_sum = 0.0, var_sum = 0.0;
    for (std::size_t i = 0; i < delta.size(); ++i) {
        if (!(o_hat[i] > 0.0)) throw std::domain_error("analytic_dr_stats: o_hat <= 0");
        const double e = delta[i] - delta_hat[i];
        bias_sum += (q[i] - o_hat[i]) * e / o_hat[i];
        var_sum += q[i] * (1.0 - q[i]) * e * e / (o_hat[i] * o_hat[i]);
    }
    AnalyticStats out;
    out.signed_bias = bias_sum / n;
    out.bias = std::abs(out.signed_bias);
    out.variance = var_sum / (n * n);
    return out;
}

enum class EstimatorKind { ips, dr };

struct EstimatorStats {
    double empirical_bias = 0.0;  // signed, so over/under-estimation is visible
    double empirical_bias_se = 0.0;
    double empirical_variance = 0.0;
    double empirical_variance_se = 0.0;
    double analytic_bias = 0.0;  // absolute value, as stated
    double analytic_signed_bias = 0.0;
    double analytic_variance = 0.0;
    std::size_t draws = 0;
};

// Redraws O ~ Bernoulli(q) per draw, evaluates the estimator against the
// ideal risk P = mean(delta), and attaches the analytic values. Draws use
// independently derived sub-seeds, so the result does not depend on
// evaluation order.
inline EstimatorStats mc_estimator_stats(std::span<const double> delta,
                                         std::span<const double> delta_hat,
                                         std::span<const double> q,
                                         std::span<const double> o_hat,
                                         EstimatorKind estimator, std::size_t draws,
                                         std::uint64_t seed) {
    if (draws < 10000) throw ConfigError("mc_estimator_stats: draws must be >= 1e4");
    if (estimator == EstimatorKind::dr && delta_hat.size() != delta.size())
        throw ConfigError("mc_estimator_stats: DR requires delta_hat");
    const std::size_t n = delta.size();
    if (n == 0) throw ConfigError("mc_estimator_stats: empty instance");

    const double ideal = std::accumulate(delta.begin(), delta.end(), 0.0) /
                         static_cast<double>(n);

    std::vector<double> values(draws);
    std::vector<std::uint8_t> o(n);
    for (std::size_t d = 0; d < draws; ++d) {
        Rng rng(derive_seed(seed, 0xD12A, static_cast<std::uint64_t>(d)));
        for (std::size_t i = 0; i < n; ++i) o[i] = rng.bernoulli(q[i]) ? 1 : 0;
        values[d] = estimator == EstimatorKind::ips
                        ? risk::ips_risk(o, delta, o_hat)
                        : risk::dr_err_risk(o, delta, delta_hat, o_hat);
    }

    double mean = std::accumulate(values.begin(), values.end(), 0.0) /
                  static_cast<double>(draws);
    double m2 = 0.0, m4 = 0.0;
    for (double v : values) {
        const double c = v - mean;
        m2 += c * c;
        m4 += c * c * c * c;
    }
    const double nd = static_cast<double>(draws);
    m2 /= nd;
    m4 /= nd;

    EstimatorStats out;
    out.draws = draws;
    out.empirical_bias = mean - ideal;
    out.empirical_bias_se = std::sqrt(m2 / nd);
    out.empirical_variance = m2 * nd / (nd - 1.0);
    // standard error of the sample variance via the fourth central moment
    out.empirical_variance_se =
        std::sqrt(std::max(0.0, (m4 - m2 * m2 * (nd - 3.0) / (nd - 1.0)) / nd));

    const AnalyticStats a = estimator == EstimatorKind::ips
                                ? analytic_ips_stats(delta, q, o_hat)
                                : analytic_dr_stats(delta, delta_hat, q, o_hat);
    out.analytic_bias = a.bias;
    out.analytic_signed_bias = a.signed_bias;
    out.analytic_variance = a.variance;
    return out;
}

struct JensenGap {
    double lhs = 0.0;  // mean(c_hat) * mean(1/o_hat)
    double rhs = 0.0;  // mean(c_hat) / mean(o_hat)
    double gap = 0.0;  // lhs - rhs, >= 0 by Jensen
};

inline JensenGap jensen_gap(std::span<const double> c_hat, std::span<const double> o_hat) {
    if (c_hat.empty() || o_hat.empty()) throw ConfigError("jensen_gap: empty input");
    double mean_c = 0.0;
    for (double c : c_hat) {
        if (!(c > 0.0)) throw std::domain_error("jensen_gap: nonpositive c_hat");
        mean_c += c;
    }
    mean_c /= static_cast<double>(c_hat.size());
    double mean_o = 0.0, mean_inv = 0.0;
    for (double v : o_hat) {
        if (!(v > 0.0)) throw std::domain_error("jensen_gap: nonpositive o_hat");
        mean_o += v;
        mean_inv += 1.0 / v;
    }
    mean_o /= static_cast<double>(o_hat.size());
    mean_inv /= static_cast<double>(o_hat.size());
    JensenGap out;
    out.lhs = mean_c * mean_inv;
    out.rhs = mean_c / mean_o;
    out.gap = out.lhs - out.rhs;
    return out;
}

struct IebReport {
    double mean_label = 0.0;     // mean r_potential over D, or mean r over O
    double mean_estimate = 0.0;  // mean r_hat over D
    double gap = 0.0;            // estimate - label
    bool label_is_ground_truth = false;
};

// mean_label uses the potential outcomes when every record carries one;
// otherwise the observed conversion rate over the click space serves as the
// upper-bound proxy.
inline IebReport ieb_report(std::span<const double> r_hat, const Dataset& dataset) {
    if (dataset.records.empty() || r_hat.size() != dataset.records.size())
        throw ConfigError("ieb_report: predictions do not match dataset");
    IebReport out;
    out.mean_estimate = std::accumulate(r_hat.begin(), r_hat.end(), 0.0) /
                        static_cast<double>(r_hat.size());
    if (dataset.has_potential_outcomes()) {
        double sum = 0.0;
        for (const auto& rec : dataset.records) sum += *rec.r_potential;
        out.mean_label = sum / static_cast<double>(dataset.records.size());
        out.label_is_ground_truth = true;
    } else {
        std::size_t clicks = 0, conv = 0;
        for (const auto& rec : dataset.records) {
            clicks += rec.o;
            conv += rec.r;
        }
        if (clicks == 0) throw DataError("ieb_report: no clicked records for the proxy label");
        out.mean_label = static_cast<double>(conv) / static_cast<double>(clicks);
        out.label_is_ground_truth = false;
    }
    out.gap = out.mean_estimate - out.mean_label;
    return out;
}

struct MatchedPair {
    std::size_t treated = 0;  // index of the clicked record
    std::size_t control = 0;  // index of the matched unclicked record
};

// Greedy 1:1 nearest-neighbor matching without replacement on
// |propensity difference| <= caliper. Treated records are visited in input
// order; equal-distance ties resolve to the candidate at or above the
// treated score, so the matching is a pure function of its inputs.
inline std::vector<MatchedPair> psm_match(std::span<const std::uint8_t> clicked,
                                          std::span<const double> propensity,
                                          double caliper) {
    if (clicked.size() != propensity.size()) throw ConfigError("psm_match: length mismatch");
    if (!(caliper > 0.0)) throw ConfigError("psm_match: caliper must be positive");

    std::multimap<double, std::size_t> pool;  // unclicked, keyed by score
    std::size_t treated_count = 0;
    for (std::size_t i = 0; i < clicked.size(); ++i) {
        if (clicked[i])
            ++treated_count;
        else
            pool.emplace(propensity[i], i);
    }
    if (treated_count == 0 || pool.empty())
        throw DataError("psm_match: both click groups must be nonempty");

    std::vector<MatchedPair> pairs;
    for (std::size_t i = 0; i < clicked.size(); ++i) {
        if (!clicked[i] || pool.empty()) continue;
        const double score = propensity[i];
        auto hi = pool.lower_bound(score);
        auto best = pool.end();
        double best_dist = caliper;
        if (hi != pool.end()) {
            const double d = std::abs(hi->first - score);
            if (d <= best_dist) {
                best = hi;
                best_dist = d;
            }
        }
        if (hi != pool.begin()) {
            auto lo = std::prev(hi);
            const double d = std::abs(lo->first - score);
            if (d <= caliper && (best == pool.end() || d < best_dist)) {
                best = lo;
                best_dist = d;
            }
        }
        if (best != pool.end()) {
            pairs.push_back({i, best->second});
            pool.erase(best);
        }
    }
    if (pairs.empty())
        throw DataError("psm_match: no overlap within the caliper");
    return pairs;
}

struct CrrResult {
    double crr = 0.0;       // mean treated outcome / mean control outcome
    double strength = 0.0;  // |1 - crr|, the plotted causation strength
};

inline CrrResult crr_strength(std::span<const MatchedPair> pairs,
                              std::span<const double> outcome) {
    if (pairs.empty()) throw ConfigError("crr_strength: no matched pairs");
    double treated = 0.0, control = 0.0;
    for (const auto& pr : pairs) {
        treated += outcome[pr.treated];
        control += outcome[pr.control];
    }
    treated /= static_cast<double>(pairs.size());
    control /= static_cast<double>(pairs.size());
    if (!(control > 0.0))
        throw DataError("crr_strength: degenerate outcome, control mean is not positive");
    CrrResult out;
    out.crr = treated / control;
    out.strength = std::abs(1.0 - out.crr);
    return out;
}

struct RankMetrics {
    double auc = 0.0;
    double ks = 0.0;      // max |TPR - FPR|
    double recall = 0.0;  // at the ROC-optimal (Youden) threshold
    double f1 = 0.0;      // at the PR-optimal threshold
};

inline RankMetrics rank_metrics(std::span<const std::uint8_t> labels,
                                std::span<const double> scores) {
    if (labels.size() != scores.size()) throw ConfigError("rank_metrics: length mismatch");
    const std::size_t n = labels.size();
    std::size_t pos = 0;
    for (auto y : labels) pos += y;
    const std::size_t neg = n - pos;
    if (pos == 0 || neg == 0)
        throw DataError("rank_metrics: undefined metric, labels are single-class");

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (scores[a] != scores[b]) return scores[a] < scores[b];
        return a < b;
    });

    // AUC via the rank statistic with midranks on ties.
    double rank_sum_pos = 0.0;
    for (std::size_t i = 0; i < n;) {
        std::size_t j = i;
        while (j < n && scores[order[j]] == scores[order[i]]) ++j;
        const double midrank = 0.5 * static_cast<double>(i + 1 + j);  // ranks are 1-based
        for (std::size_t k = i; k < j; ++k)
            if (labels[order[k]]) rank_sum_pos += midrank;
        i = j;
    }
    RankMetrics out;
    out.auc = (rank_sum_pos - 0.5 * static_cast<double>(pos) * static_cast<double>(pos + 1)) /
              (static_cast<double>(pos) * static_cast<double>(neg));

    // Threshold sweep from the highest score down; tie groups move together.
    std::size_t tp = 0, fp = 0;
    double best_youden = -1.0, best_f1 = 0.0, recall_at_youden = 0.0, ks = 0.0;
    for (std::size_t i = n; i > 0;) {
        std::size_t j = i;
        while (j > 0 && scores[order[j - 1]] == scores[order[i - 1]]) {
            if (labels[order[j - 1]])
                ++tp;
            else
                ++fp;
            --j;
        }
        const double tpr = static_cast<double>(tp) / static_cast<double>(pos);
        const double fpr = static_cast<double>(fp) / static_cast<double>(neg);
        ks = std::max(ks, std::abs(tpr - fpr));
        if (tpr - fpr > best_youden) {
            best_youden = tpr - fpr;
            recall_at_youden = tpr;
        }
        const double f1 = 2.0 * static_cast<double>(tp) /
                          static_cast<double>(2 * tp + fp + (pos - tp));
        best_f1 = std::max(best_f1, f1);
        i = j;
    }
    out.ks = ks;
    out.recall = recall_at_youden;
    out.f1 = best_f1;
    return out;
}

// Max binned |mean(o) - mean(q_true)| over equal-width q deciles; the
// generator's ground-truth consistency check.
inline double binned_calibration_error(std::span<const double> q_true,
                                       std::span<const std::uint8_t> o,
                                       std::size_t bins = 10) {
    if (q_true.size() != o.size() || q_true.empty())
        throw ConfigError("binned_calibration_error: bad input");
    std::vector<double> sum_q(bins, 0.0), sum_o(bins, 0.0);
    std::vector<std::size_t> count(bins, 0);
    for (std::size_t i = 0; i < q_true.size(); ++i) {
        auto b = static_cast<std::size_t>(q_true[i] * static_cast<double>(bins));
        b = std::min(b, bins - 1);
        sum_q[b] += q_true[i];
        sum_o[b] += o[i];
        ++count[b];
    }
    double worst = 0.0;
    for (std::size_t b = 0; b < bins; ++b) {
        if (count[b] < 50) continue;  // skip bins too thin to estimate
        const double nb = static_cast<double>(count[b]);
        worst = std::max(worst, std::abs(sum_o[b] / nb - sum_q[b] / nb));
    }
    return worst;
}

inline double mean_abs_error(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size() || a.empty()) throw ConfigError("mean_abs_error: bad input");
    double sum = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) sum += std::abs(a[i] - b[i]);
    return sum / static_cast<double>(a.size());
}

// Ranking metrics per task plus the bias and causation diagnostics.
struct EvalReport {
    RankMetrics ctr, cvr, ctcvr;
    IebReport ieb;        // on the training split (the Table-IV-style row)
    IebReport ieb_test;   // same measurement on the test split
    double ieb_gap = 0.0; // alias of ieb.gap
    CrrResult crr;        // propensity-matched causation strength, test split
    double crr_strength = 0.0;  // alias of crr.strength
    double do_cvr_mae = std::numeric_limits<double>::quiet_NaN();  // vs cvr_true
};

}  // namespace cvrlab::analysis
