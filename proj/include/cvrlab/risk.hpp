#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>

#include "cvrlab/errors.hpp"
#include "cvrlab/variant.hpp"

// Scalar risk functionals for every estimator in the benchmark family.
// All of them map per-sample quantities (o, r, r-hat, o-hat, delta-hat) to a
// risk value; the training engine mirrors their gradients.

namespace cvrlab {

// Binary cross-entropy. `estimate` must already be clamped away from {0,1}.
inline double bce(double label, double estimate) {
    if (!(estimate > 0.0) || !(estimate < 1.0))
        throw std::domain_error("bce: estimate outside (0,1): " + std::to_string(estimate));
    return -label * std::log(estimate) - (1.0 - label) * std::log(1.0 - estimate);
}

namespace risk {

// Per-sample quantities feeding the risk functionals.
struct SampleQuantities {
    std::uint8_t o = 0;  // click indicator
    std::uint8_t r = 0;  // observed conversion (r = 1 implies o = 1)
    double o_hat = 0.5;  // CTR estimate, clamped
    double r_hat = 0.5;  // CVR estimate, clamped
    std::optional<double> delta_hat;  // imputed CVR error (DR / EIB variants)
    std::optional<double> q_true;     // true propensity, synthetic data only
};

using Batch = std::span<const SampleQuantities>;

struct RiskBreakdown {
    double l_ctr = 0.0;
    double l_cvr = 0.0;    // counterfactual CVR term
    double l_ctcvr = 0.0;
    double total = 0.0;    // l_ctr + lambda_c * l_cvr + lambda_g * l_ctcvr
};

// CVR estimation error term delta(r, r-hat); same measure as bce.
inline double cvr_error(std::uint8_t r, double r_hat) {
    return bce(static_cast<double>(r), r_hat);
}

namespace detail {

inline void require_nonempty(Batch batch, const char* who) {
    if (batch.empty()) throw DataError(std::string(who) + ": empty batch");
}

inline double require_delta_hat(const SampleQuantities& s, const char* who) {
    if (!s.delta_hat)
        throw ConfigError(std::string(who) + ": sample is missing delta_hat");
    return *s.delta_hat;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Raw forms over parallel arrays. mc_estimator_stats and the lemma
// verification harness drive these with explicit error values.
// ---------------------------------------------------------------------------

// Click-space mean of the error: (1/|O|) sum over clicked samples.
inline double naive_risk(std::span<const std::uint8_t> o, std::span<const double> delta) {
    if (o.size() != delta.size()) throw ConfigError("naive_risk: length mismatch");
    double sum = 0.0;
    std::size_t clicks = 0;
    for (std::size_t i = 0; i < o.size(); ++i) {
        if (o[i]) {
            sum += delta[i];
            ++clicks;
        }
    }
    if (clicks == 0) throw DataError("naive_risk: undefined, no clicked samples");
    return sum / static_cast<double>(clicks);
}

// (1/|D|) sum o * delta / o_hat.
inline double ips_risk(std::span<const std::uint8_t> o, std::span<const double> delta,
                       std::span<const double> o_hat) {
    if (o.size() != delta.size() || o.size() != o_hat.size())
        throw ConfigError("ips_risk: length mismatch");
    if (o.empty()) throw DataError("ips_risk: empty batch");
    double sum = 0.0;
    for (std::size_t i = 0; i < o.size(); ++i) {
        if (!o[i]) continue;  // unclicked samples contribute exactly 0
        if (!(o_hat[i] > 0.0)) throw std::domain_error("ips_risk: o_hat <= 0");
        sum += delta[i] / o_hat[i];
    }
    return sum / static_cast<double>(o.size());
}

// (1/|D|) sum [delta_hat + o * (delta - delta_hat) / o_hat].
inline double dr_err_risk(std::span<const std::uint8_t> o, std::span<const double> delta,
                          std::span<const double> delta_hat,
                          std::span<const double> o_hat) {
    if (o.size() != delta.size() || o.size() != delta_hat.size() ||
        o.size() != o_hat.size())
        throw ConfigError("dr_err_risk: length mismatch");
    if (o.empty()) throw DataError("dr_err_risk: empty batch");
    double sum = 0.0;
    for (std::size_t i = 0; i < o.size(); ++i) {
        double term = delta_hat[i];
        if (o[i]) {
            if (!(o_hat[i] > 0.0)) throw std::domain_error("dr_err_risk: o_hat <= 0");
            term += (delta[i] - delta_hat[i]) / o_hat[i];
        }
        sum += term;
    }
    return sum / static_cast<double>(o.size());
}

// (1/|D|) sum o * (delta - delta_hat)^2 / o_hat.
inline double dr_imp_risk(std::span<const std::uint8_t> o, std::span<const double> delta,
                          std::span<const double> delta_hat,
                          std::span<const double> o_hat) {
    if (o.size() != delta.size() || o.size() != delta_hat.size() ||
        o.size() != o_hat.size())
        throw ConfigError("dr_imp_risk: length mismatch");
    if (o.empty()) throw DataError("dr_imp_risk: empty batch");
    double sum = 0.0;
    for (std::size_t i = 0; i < o.size(); ++i) {
        if (!o[i]) continue;
        if (!(o_hat[i] > 0.0)) throw std::domain_error("dr_imp_risk: o_hat <= 0");
        const double e = delta[i] - delta_hat[i];
        sum += e * e / o_hat[i];
    }
    return sum / static_cast<double>(o.size());
}

inline double dr_risk(std::span<const std::uint8_t> o, std::span<const double> delta,
                      std::span<const double> delta_hat, std::span<const double> o_hat) {
    return dr_err_risk(o, delta, delta_hat, o_hat) + dr_imp_risk(o, delta, delta_hat, o_hat);
}

// ---------------------------------------------------------------------------
// Batch forms over SampleQuantities; delta is derived from (r, r_hat).
// ---------------------------------------------------------------------------

inline double naive_risk(Batch batch) {
    detail::require_nonempty(batch, "naive_risk");
    double sum = 0.0;
    std::size_t clicks = 0;
    for (const auto& s : batch) {
        if (s.o) {
            sum += cvr_error(s.r, s.r_hat);
            ++clicks;
        }
    }
    if (clicks == 0) throw DataError("naive_risk: undefined, no clicked samples");
    return sum / static_cast<double>(clicks);
}

// Unclicked samples enter as negatives: (1/|D|) sum delta(o*r, r_hat).
inline double mtl_imp_risk(Batch batch) {
    detail::require_nonempty(batch, "mtl_imp_risk");
    double sum = 0.0;
    for (const auto& s : batch)
        sum += bce(static_cast<double>(s.o * s.r), s.r_hat);
    return sum / static_cast<double>(batch.size());
}

// Error imputation with click-space correction, no propensity weight:
// (1/|D|) sum [delta_hat + o * (delta - delta_hat)].
inline double eib_risk(Batch batch) {
    detail::require_nonempty(batch, "eib_risk");
    double sum = 0.0;
    for (const auto& s : batch) {
        const double dh = detail::require_delta_hat(s, "eib_risk");
        sum += dh;
        if (s.o) sum += cvr_error(s.r, s.r_hat) - dh;
    }
    return sum / static_cast<double>(batch.size());
}

inline double ips_risk(Batch batch) {
    detail::require_nonempty(batch, "ips_risk");
    double sum = 0.0;
    for (const auto& s : batch) {
        if (!s.o) continue;
        if (!(s.o_hat > 0.0)) throw std::domain_error("ips_risk: o_hat <= 0");
        sum += cvr_error(s.r, s.r_hat) / s.o_hat;
    }
    return sum / static_cast<double>(batch.size());
}

inline double dr_err_risk(Batch batch) {
    detail::require_nonempty(batch, "dr_err_risk");
    double sum = 0.0;
    for (const auto& s : batch) {
        const double dh = detail::require_delta_hat(s, "dr_err_risk");
        sum += dh;
        if (s.o) {
            if (!(s.o_hat > 0.0)) throw std::domain_error("dr_err_risk: o_hat <= 0");
            sum += (cvr_error(s.r, s.r_hat) - dh) / s.o_hat;
        }
    }
    return sum / static_cast<double>(batch.size());
}

inline double dr_imp_risk(Batch batch) {
    detail::require_nonempty(batch, "dr_imp_risk");
    double sum = 0.0;
    for (const auto& s : batch) {
        const double dh = detail::require_delta_hat(s, "dr_imp_risk");
        if (!s.o) continue;
        if (!(s.o_hat > 0.0)) throw std::domain_error("dr_imp_risk: o_hat <= 0");
        const double e = cvr_error(s.r, s.r_hat) - dh;
        sum += e * e / s.o_hat;
    }
    return sum / static_cast<double>(batch.size());
}

inline double dr_risk(Batch batch) { return dr_err_risk(batch) + dr_imp_risk(batch); }

// Empirical CTR risk over the exposure space: (1/|D|) sum delta(o, o_hat).
inline double ctr_risk(Batch batch) {
    detail::require_nonempty(batch, "ctr_risk");
    double sum = 0.0;
    for (const auto& s : batch)
        sum += bce(static_cast<double>(s.o), s.o_hat);
    return sum / static_cast<double>(batch.size());
}

// Global CTCVR risk: (1/|D|) sum delta(o*r, o_hat*r_hat). The product of the
// two clamped tower outputs is already inside (0,1).
inline double ctcvr_risk(Batch batch) {
    detail::require_nonempty(batch, "ctcvr_risk");
    double sum = 0.0;
    for (const auto& s : batch)
        sum += bce(static_cast<double>(s.o * s.r), s.o_hat * s.r_hat);
    return sum / static_cast<double>(batch.size());
}

// Counterfactual CVR risk selected by variant; 0 for ESMM.
inline double cvr_risk_for(Batch batch, ModelVariant variant) {
    switch (variant) {
        case ModelVariant::naive: return naive_risk(batch);
        case ModelVariant::mtl_imp: return mtl_imp_risk(batch);
        case ModelVariant::mtl_eib: return eib_risk(batch);
        case ModelVariant::mtl_ips:
        case ModelVariant::escm2_ips: return ips_risk(batch);
        case ModelVariant::mtl_dr:
        case ModelVariant::escm2_dr: return dr_risk(batch);
        case ModelVariant::esmm: return 0.0;
    }
    throw ConfigError("cvr_risk_for: unknown variant");
}

// Weighted objective: l_ctr + lambda_c * l_cvr + lambda_g * l_ctcvr, with
// l_cvr = 0 for ESMM and l_ctcvr = 0 for the MTL-* baselines.
inline RiskBreakdown total_objective(Batch batch, ModelVariant variant,
                                     double lambda_c, double lambda_g) {
    detail::require_nonempty(batch, "total_objective");
    RiskBreakdown out;
    out.l_ctr = ctr_risk(batch);
    out.l_cvr = cvr_risk_for(batch, variant);
    out.l_ctcvr = variant_has_ctcvr_term(variant) ? ctcvr_risk(batch) : 0.0;
    out.total = out.l_ctr + lambda_c * out.l_cvr + lambda_g * out.l_ctcvr;
    return out;
}

}  // namespace risk
}  // namespace cvrlab
