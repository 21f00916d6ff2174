#pragma once

#include <array>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "cvrlab/data.hpp"
#include "cvrlab/errors.hpp"
#include "cvrlab/rng.hpp"

// MNAR log generator with known ground truth, plus CSV/JSONL ingestion in an
// Ali-CCP-shaped single-valued categorical schema.

namespace cvrlab::synth {

// Data-generating process: latent user/item traits drive both the click
// propensity q and the potential conversion rate, with alpha_couple feeding
// logit(q) into logit(cvr) so that clicked intersections convert more often.
struct SynthConfig {
    std::size_t n_users = 2000;
    std::size_t n_items = 500;
    std::size_t n_records = 100000;
    std::size_t latent_dim = 1;
    double ctr_bias = -2.2;
    double cvr_bias = -0.8;
    double alpha_couple = 1.5;  // >= 0; strength of the q -> cvr coupling
    std::uint64_t seed = 1;
    FieldSchema field_layout = default_layout(2000, 500, 1);  // keep in sync above

    // Fields: user id, item id, then one field per exposed latent trait,
    // quantized into `bins` buckets. With expose_cvr_traits the layout is
    // [uid, iid, user-ctr.., item-ctr.., user-cvr.., item-cvr..]; without it
    // the CVR-specific traits stay latent and are recoverable only through
    // the id embeddings, which reproduces the sparse-supervision regime the
    // estimators differ in. The id fields give the towers the
    // high-cardinality inputs real logs have.
    static FieldSchema default_layout(std::size_t n_users, std::size_t n_items,
                                      std::size_t latent_dim, bool expose_cvr_traits = false,
                                      std::size_t bins = 24, std::size_t embedding_dim = 5) {
        FieldSchema schema;
        schema.field_count = 2 + (expose_cvr_traits ? 4 : 2) * latent_dim;
        schema.cardinalities.assign(schema.field_count, bins);
        schema.cardinalities[0] = n_users;
        schema.cardinalities[1] = n_items;
        schema.embedding_dim = embedding_dim;
        return schema;
    }

    bool exposes_cvr_traits() const {
        return field_layout.field_count == 2 + 4 * latent_dim;
    }

    void validate() const {
        if (n_users == 0 || n_items == 0 || n_records == 0)
            throw ConfigError("SynthConfig: counts must be positive");
        if (latent_dim == 0) throw ConfigError("SynthConfig: latent_dim must be positive");
        if (alpha_couple < 0.0) throw ConfigError("SynthConfig: alpha_couple must be >= 0");
        field_layout.validate();
        if (field_layout.field_count != 2 + 2 * latent_dim &&
            field_layout.field_count != 2 + 4 * latent_dim)
            throw ConfigError(
                "SynthConfig: field_layout must have 2 + 2*latent_dim or 2 + 4*latent_dim fields");
        if (field_layout.cardinalities[0] < n_users || field_layout.cardinalities[1] < n_items)
            throw ConfigError("SynthConfig: id field cardinalities below n_users/n_items");
        for (std::size_t f = 2; f < field_layout.field_count; ++f)
            if (field_layout.cardinalities[f] < 2)
                throw ConfigError("SynthConfig: trait buckets need cardinality >= 2");
    }
};

struct GenerationReport {
    std::size_t n_records = 0, clicks = 0, conversions = 0;
    double mean_q = 0.0;            // E_D[q]
    double mean_cvr = 0.0;          // E_D[cvr]
    double mean_r_clicked = 0.0;    // E_O[r]
    double mean_r_potential = 0.0;  // E_D[r_potential]
    double selection_gap = 0.0;     // E_O[r] - E_D[r_potential]
    double selection_gap_se = 0.0;
    bool selection_effect_ok = false;
};

struct GeneratedDataset {
    Dataset data;
    GenerationReport report;
};

namespace detail {

// Weight of the CVR-specific trait sum inside logit(cvr); the propensity
// coupling enters with weight alpha_couple on top of this.
inline constexpr double kCvrTraitGain = 2.0;

inline double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

inline double logit(double p) { return std::log(p / (1.0 - p)); }

// standard normal CDF
inline double phi(double z) { return 0.5 * std::erfc(-z * 0.7071067811865475244); }

enum TraitBlock : std::uint64_t { user_ctr = 1, item_ctr = 2, user_cvr = 3, item_cvr = 4 };

// Trait values are pure functions of (seed, block, entity, dim): records
// sharing a user or item see identical traits, and generation can be
// sharded by record index without changing any draw.
inline double trait(std::uint64_t seed, TraitBlock block, std::uint64_t entity,
                    std::uint64_t dim) {
    Rng rng(derive_seed(seed, 0x7217A17, static_cast<std::uint64_t>(block), entity, dim));
    return rng.normal();
}

inline std::uint32_t bucket(double value, std::size_t cardinality) {
    const auto b = static_cast<std::int64_t>(std::floor(phi(value) * static_cast<double>(cardinality)));
    return static_cast<std::uint32_t>(std::clamp<std::int64_t>(
        b, 0, static_cast<std::int64_t>(cardinality) - 1));
}

}  // namespace detail

inline GeneratedDataset generate(const SynthConfig& config) {
    config.validate();
    const std::size_t latent = config.latent_dim;
    const double scale = 1.0 / std::sqrt(2.0 * static_cast<double>(latent));

    GeneratedDataset out;
    out.data.schema = config.field_layout;
    out.data.records.reserve(config.n_records);

    double sum_q = 0.0, sum_cvr = 0.0;
    std::size_t clicks = 0, conversions = 0, potentials = 0;

    for (std::size_t j = 0; j < config.n_records; ++j) {
        Rng rng(derive_seed(config.seed, 0x5EC0, static_cast<std::uint64_t>(j)));
        const std::uint64_t u = rng.below(config.n_users);
        const std::uint64_t i = rng.below(config.n_items);

        double z_ctr = 0.0, z_cvr = 0.0;
        ImpressionRecord rec;
        rec.user_id = static_cast<std::int64_t>(u);
        rec.item_id = static_cast<std::int64_t>(i);
        rec.features.resize(config.field_layout.field_count);
        rec.features[0] = static_cast<std::uint32_t>(u);
        rec.features[1] = static_cast<std::uint32_t>(i);
        const bool expose_cvr = config.exposes_cvr_traits();
        for (std::size_t k = 0; k < latent; ++k) {
            const double a = detail::trait(config.seed, detail::user_ctr, u, k);
            const double b = detail::trait(config.seed, detail::item_ctr, i, k);
            const double c = detail::trait(config.seed, detail::user_cvr, u, k);
            const double d = detail::trait(config.seed, detail::item_cvr, i, k);
            z_ctr += a + b;
            z_cvr += c + d;
            const auto& cards = config.field_layout.cardinalities;
            rec.features[2 + k] = detail::bucket(a, cards[2 + k]);
            rec.features[2 + latent + k] = detail::bucket(b, cards[2 + latent + k]);
            if (expose_cvr) {
                rec.features[2 + 2 * latent + k] = detail::bucket(c, cards[2 + 2 * latent + k]);
                rec.features[2 + 3 * latent + k] = detail::bucket(d, cards[2 + 3 * latent + k]);
            }
        }
        z_ctr *= scale;
        z_cvr *= scale;

        const double logit_q = z_ctr + config.ctr_bias;
        const double q = detail::sigmoid(logit_q);
        const double cvr = detail::sigmoid(detail::kCvrTraitGain * z_cvr +
                                           config.alpha_couple * logit_q + config.cvr_bias);

        const bool o = rng.bernoulli(q);
        const bool r_potential = rng.bernoulli(cvr);
        rec.o = o ? 1 : 0;
        rec.r = (o && r_potential) ? 1 : 0;
        rec.q_true = q;
        rec.cvr_true = cvr;
        rec.r_potential = r_potential ? 1 : 0;

        sum_q += q;
        sum_cvr += cvr;
        clicks += rec.o;
        conversions += rec.r;
        potentials += r_potential ? 1 : 0;
        out.data.records.push_back(std::move(rec));
    }

    auto& rep = out.report;
    const double n = static_cast<double>(config.n_records);
    rep.n_records = config.n_records;
    rep.clicks = clicks;
    rep.conversions = conversions;
    rep.mean_q = sum_q / n;
    rep.mean_cvr = sum_cvr / n;
    rep.mean_r_potential = static_cast<double>(potentials) / n;
    rep.mean_r_clicked =
        clicks > 0 ? static_cast<double>(conversions) / static_cast<double>(clicks) : 0.0;

    // E_O[R] > E_D[R] is the assumption every downstream bias result rests
    // on; reject generated data that does not exhibit it (2-sided z check).
    const double p1 = rep.mean_r_clicked, p2 = rep.mean_r_potential;
    const double se1 = clicks > 0 ? std::sqrt(p1 * (1.0 - p1) / static_cast<double>(clicks)) : 0.0;
    const double se2 = std::sqrt(p2 * (1.0 - p2) / n);
    rep.selection_gap = p1 - p2;
    rep.selection_gap_se = std::sqrt(se1 * se1 + se2 * se2);
    rep.selection_effect_ok = rep.selection_gap > 1.96 * rep.selection_gap_se;
    if (config.alpha_couple > 0.0 && !rep.selection_effect_ok)
        throw DataError(
            "generated data violates E_O[R] > E_D[R]; increase alpha_couple "
            "(gap " + std::to_string(rep.selection_gap) + ", se " +
            std::to_string(rep.selection_gap_se) + ")");
    return out;
}

// exposure : click : conversion target, e.g. {100, 10, 1}
struct TargetRatio {
    double exposure = 100.0;
    double click = 10.0;
    double conversion = 1.0;
};

// Removes unclicked records uniformly at random until the exposure:click
// ratio is within 5% of target. Clicked records are never removed; record
// order (the chronological axis) is preserved.
inline Dataset downsample(const Dataset& dataset, const TargetRatio& target,
                          std::uint64_t seed) {
    if (!(target.exposure > 0.0) || !(target.click > 0.0))
        throw ConfigError("downsample: ratio components must be positive");
    const std::size_t n = dataset.records.size();
    const std::size_t clicks = dataset.click_count();
    if (clicks == 0) throw DataError("downsample: dataset has no clicked records");

    const double want = target.exposure / target.click;
    const double have = static_cast<double>(n) / static_cast<double>(clicks);
    if (std::abs(have - want) / want <= 0.05) return dataset;  // already on target

    const auto target_n =
        static_cast<std::size_t>(std::llround(want * static_cast<double>(clicks)));
    if (target_n < clicks)
        throw DataError("downsample: infeasible ratio, would require removing clicked records");
    if (target_n > n)
        throw DataError("downsample: infeasible ratio, not enough unclicked records");

    std::vector<std::size_t> unclicked;
    unclicked.reserve(n - clicks);
    for (std::size_t i = 0; i < n; ++i)
        if (!dataset.records[i].o) unclicked.push_back(i);

    const std::size_t keep_unclicked = target_n - clicks;
    // partial Fisher-Yates: choose the survivors
    Rng rng(derive_seed(seed, 0xD0575));
    for (std::size_t i = 0; i < keep_unclicked; ++i) {
        const std::size_t j = i + rng.below(unclicked.size() - i);
        std::swap(unclicked[i], unclicked[j]);
    }
    std::vector<bool> keep(n, false);
    for (std::size_t i = 0; i < n; ++i)
        if (dataset.records[i].o) keep[i] = true;
    for (std::size_t i = 0; i < keep_unclicked; ++i) keep[unclicked[i]] = true;

    Dataset out;
    out.schema = dataset.schema;
    out.records.reserve(target_n);
    for (std::size_t i = 0; i < n; ++i)
        if (keep[i]) out.records.push_back(dataset.records[i]);
    return out;
}

// Order-preserving split by record position; record order doubles as the
// timestamp.
inline std::array<Dataset, 3> chronological_split(const Dataset& dataset,
                                                  std::array<double, 3> fractions) {
    double sum = 0.0;
    for (double f : fractions) {
        if (f < 0.0) throw ConfigError("chronological_split: negative fraction");
        sum += f;
    }
    if (std::abs(sum - 1.0) > 1e-9)
        throw ConfigError("chronological_split: fractions must sum to 1");

    const std::size_t n = dataset.records.size();
    const auto n_train = static_cast<std::size_t>(std::llround(fractions[0] * static_cast<double>(n)));
    auto n_valid = static_cast<std::size_t>(std::llround(fractions[1] * static_cast<double>(n)));
    n_valid = std::min(n_valid, n - n_train);

    std::array<Dataset, 3> out;
    for (auto& d : out) d.schema = dataset.schema;
    out[0].records.assign(dataset.records.begin(), dataset.records.begin() + n_train);
    out[1].records.assign(dataset.records.begin() + n_train,
                          dataset.records.begin() + n_train + n_valid);
    out[2].records.assign(dataset.records.begin() + n_train + n_valid, dataset.records.end());
    return out;
}

enum class LogFormat { csv, jsonl };

namespace detail {

inline std::string format_double(double v) {
    std::array<char, 32> buf;
    const auto res = std::to_chars(buf.data(), buf.data() + buf.size(), v);
    return std::string(buf.data(), res.ptr);
}

inline double parse_double(std::string_view s, std::size_t line) {
    double v = 0.0;
    const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc{} || res.ptr != s.data() + s.size())
        throw DataError("line " + std::to_string(line) + ": bad number '" + std::string(s) + "'");
    return v;
}

inline std::int64_t parse_int(std::string_view s, std::size_t line) {
    std::int64_t v = 0;
    const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc{} || res.ptr != s.data() + s.size())
        throw DataError("line " + std::to_string(line) + ": bad integer '" + std::string(s) + "'");
    return v;
}

inline std::vector<std::string_view> split_csv(std::string_view line) {
    std::vector<std::string_view> out;
    std::size_t start = 0;
    for (std::size_t i = 0; i <= line.size(); ++i) {
        if (i == line.size() || line[i] == ',') {
            out.push_back(line.substr(start, i - start));
            start = i + 1;
        }
    }
    return out;
}

inline void check_integrity(const ImpressionRecord& rec, std::size_t line) {
    if (rec.r == 1 && rec.o == 0)
        throw DataError("line " + std::to_string(line) +
                        ": integrity violation, conversion=1 with click=0");
}

}  // namespace detail

// CSV header: user_id,item_id,f0,...,fk,click,conversion[,true_ctr,true_cvr]
// JSONL: one object per line with the same keys. Both round-trip bit-exactly
// through save_log/load_log.
inline void save_log(const Dataset& dataset, const std::filesystem::path& path,
                     LogFormat format) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot open for writing: " + path.string());
    const bool truth = dataset.has_ground_truth();
    const std::size_t fields = dataset.schema.field_count;

    if (format == LogFormat::csv) {
        out << "user_id,item_id";
        for (std::size_t f = 0; f < fields; ++f) out << ",f" << f;
        out << ",click,conversion";
        if (truth) out << ",true_ctr,true_cvr";
        out << '\n';
        for (const auto& rec : dataset.records) {
            out << rec.user_id << ',' << rec.item_id;
            for (std::size_t f = 0; f < fields; ++f) out << ',' << rec.features[f];
            out << ',' << int(rec.o) << ',' << int(rec.r);
            if (truth)
                out << ',' << detail::format_double(*rec.q_true) << ','
                    << detail::format_double(*rec.cvr_true);
            out << '\n';
        }
    } else {
        for (const auto& rec : dataset.records) {
            out << "{\"user_id\":" << rec.user_id << ",\"item_id\":" << rec.item_id;
            for (std::size_t f = 0; f < fields; ++f)
                out << ",\"f" << f << "\":" << rec.features[f];
            out << ",\"click\":" << int(rec.o) << ",\"conversion\":" << int(rec.r);
            if (truth)
                out << ",\"true_ctr\":" << detail::format_double(*rec.q_true)
                    << ",\"true_cvr\":" << detail::format_double(*rec.cvr_true);
            out << "}\n";
        }
    }
    if (!out) throw DataError("write failed: " + path.string());
}

inline Dataset load_log(const std::filesystem::path& path, LogFormat format,
                        const FieldSchema& schema) {
    schema.validate();
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open: " + path.string());

    Dataset out;
    out.schema = schema;
    const std::size_t fields = schema.field_count;
    std::string line;
    std::size_t line_no = 0;

    if (format == LogFormat::csv) {
        if (!std::getline(in, line)) return out;  // empty file: empty dataset
        ++line_no;
        std::string expect = "user_id,item_id";
        for (std::size_t f = 0; f < fields; ++f) expect += ",f" + std::to_string(f);
        expect += ",click,conversion";
        const std::string expect_truth = expect + ",true_ctr,true_cvr";
        bool truth;
        if (line == expect)
            truth = false;
        else if (line == expect_truth)
            truth = true;
        else
            throw DataError("line 1: header does not match schema (got '" + line + "')");

        const std::size_t want_cols = 4 + fields + (truth ? 2 : 0);
        while (std::getline(in, line)) {
            ++line_no;
            if (line.empty()) continue;
            const auto cols = detail::split_csv(line);
            if (cols.size() != want_cols)
                throw DataError("line " + std::to_string(line_no) + ": expected " +
                                std::to_string(want_cols) + " columns, got " +
                                std::to_string(cols.size()));
            ImpressionRecord rec;
            rec.user_id = detail::parse_int(cols[0], line_no);
            rec.item_id = detail::parse_int(cols[1], line_no);
            rec.features.resize(fields);
            for (std::size_t f = 0; f < fields; ++f) {
                const std::int64_t v = detail::parse_int(cols[2 + f], line_no);
                if (v < 0 || static_cast<std::uint64_t>(v) >= schema.cardinalities[f])
                    throw DataError("line " + std::to_string(line_no) + ": feature f" +
                                    std::to_string(f) + " out of range");
                rec.features[f] = static_cast<std::uint32_t>(v);
            }
            const std::int64_t o = detail::parse_int(cols[2 + fields], line_no);
            const std::int64_t r = detail::parse_int(cols[3 + fields], line_no);
            if ((o != 0 && o != 1) || (r != 0 && r != 1))
                throw DataError("line " + std::to_string(line_no) + ": labels must be 0/1");
            rec.o = static_cast<std::uint8_t>(o);
            rec.r = static_cast<std::uint8_t>(r);
            if (truth) {
                rec.q_true = detail::parse_double(cols[4 + fields], line_no);
                rec.cvr_true = detail::parse_double(cols[5 + fields], line_no);
            }
            detail::check_integrity(rec, line_no);
            out.records.push_back(std::move(rec));
        }
    } else {
        while (std::getline(in, line)) {
            ++line_no;
            if (line.empty()) continue;
            nlohmann::json obj;
            try {
                obj = nlohmann::json::parse(line);
            } catch (const nlohmann::json::exception& e) {
                throw DataError("line " + std::to_string(line_no) + ": " + e.what());
            }
            try {
                ImpressionRecord rec;
                rec.user_id = obj.at("user_id").get<std::int64_t>();
                rec.item_id = obj.at("item_id").get<std::int64_t>();
                rec.features.resize(fields);
                for (std::size_t f = 0; f < fields; ++f) {
                    const auto v = obj.at("f" + std::to_string(f)).get<std::int64_t>();
                    if (v < 0 || static_cast<std::uint64_t>(v) >= schema.cardinalities[f])
                        throw DataError("line " + std::to_string(line_no) + ": feature f" +
                                        std::to_string(f) + " out of range");
                    rec.features[f] = static_cast<std::uint32_t>(v);
                }
                rec.o = obj.at("click").get<std::uint8_t>();
                rec.r = obj.at("conversion").get<std::uint8_t>();
                if (rec.o > 1 || rec.r > 1)
                    throw DataError("line " + std::to_string(line_no) + ": labels must be 0/1");
                if (obj.contains("true_ctr")) rec.q_true = obj.at("true_ctr").get<double>();
                if (obj.contains("true_cvr")) rec.cvr_true = obj.at("true_cvr").get<double>();
                detail::check_integrity(rec, line_no);
                out.records.push_back(std::move(rec));
            } catch (const nlohmann::json::exception& e) {
                throw DataError("line " + std::to_string(line_no) + ": " + e.what());
            }
        }
    }
    return out;
}

}  // namespace cvrlab::synth
