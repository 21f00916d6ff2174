#pragma once

#include <array>
#include <string>
#include <string_view>

#include "cvrlab/errors.hpp"

namespace cvrlab {

// The eight model variants benchmarked by the lab.
enum class ModelVariant {
    naive,
    mtl_imp,
    mtl_eib,
    mtl_ips,
    mtl_dr,
    esmm,
    escm2_ips,
    escm2_dr,
};

constexpr std::array<ModelVariant, 8> kAllVariants = {
    ModelVariant::naive,   ModelVariant::mtl_imp,   ModelVariant::mtl_eib,
    ModelVariant::mtl_ips, ModelVariant::mtl_dr,    ModelVariant::esmm,
    ModelVariant::escm2_ips, ModelVariant::escm2_dr,
};

// Imputation tower is present for the DR-based variants and for EIB.
constexpr bool variant_has_imp_tower(ModelVariant v) {
    return v == ModelVariant::mtl_eib || v == ModelVariant::mtl_dr ||
           v == ModelVariant::escm2_dr;
}

// MTL-* baselines train without the global CTCVR term; the entire-space
// variants include it.
constexpr bool variant_has_ctcvr_term(ModelVariant v) {
    return v == ModelVariant::esmm || v == ModelVariant::escm2_ips ||
           v == ModelVariant::escm2_dr;
}

// ESMM has no direct CVR risk; everything else pairs l_ctr with one.
constexpr bool variant_has_cvr_risk(ModelVariant v) {
    return v != ModelVariant::esmm;
}

constexpr bool variant_needs_delta_hat(ModelVariant v) {
    return variant_has_imp_tower(v);
}

inline std::string_view to_string(ModelVariant v) {
    switch (v) {
        case ModelVariant::naive: return "NAIVE";
        case ModelVariant::mtl_imp: return "MTL-IMP";
        case ModelVariant::mtl_eib: return "MTL-EIB";
        case ModelVariant::mtl_ips: return "MTL-IPS";
        case ModelVariant::mtl_dr: return "MTL-DR";
        case ModelVariant::esmm: return "ESMM";
        case ModelVariant::escm2_ips: return "ESCM2-IPS";
        case ModelVariant::escm2_dr: return "ESCM2-DR";
    }
    return "?";
}

inline ModelVariant variant_from_string(std::string_view name) {
    for (ModelVariant v : kAllVariants)
        if (to_string(v) == name) return v;
    throw ConfigError("unknown model variant: " + std::string(name));
}

}  // namespace cvrlab
