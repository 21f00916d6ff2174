#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "cvrlab/errors.hpp"

namespace cvrlab {

// Layout of the categorical feature fields shared by data and model.
struct FieldSchema {
    std::size_t field_count = 0;
    std::vector<std::size_t> cardinalities;  // one per field
    std::size_t embedding_dim = 5;

    std::size_t input_dim() const { return field_count * embedding_dim; }

    void validate() const {
        if (field_count == 0) throw ConfigError("FieldSchema: field_count must be positive");
        if (cardinalities.size() != field_count)
            throw ConfigError("FieldSchema: cardinalities length != field_count");
        for (std::size_t c : cardinalities)
            if (c == 0) throw ConfigError("FieldSchema: zero cardinality field");
        if (embedding_dim == 0) throw ConfigError("FieldSchema: embedding_dim must be >= 1");
    }

    bool operator==(const FieldSchema&) const = default;
};

// One user-item exposure. Ground-truth fields are present for synthetic
// data only; observed logs carry just features and the two labels.
struct ImpressionRecord {
    std::int64_t user_id = 0;
    std::int64_t item_id = 0;
    std::vector<std::uint32_t> features;  // categorical index per field
    std::uint8_t o = 0;                   // click
    std::uint8_t r = 0;                   // observed conversion, r <= o
    std::optional<double> q_true;         // ground-truth CTR (propensity)
    std::optional<double> cvr_true;       // P(r=1 | do(o=1))
    std::optional<std::uint8_t> r_potential;  // conversion under forced click
};

struct Dataset {
    FieldSchema schema;
    std::vector<ImpressionRecord> records;

    std::size_t size() const { return records.size(); }

    std::size_t click_count() const {
        std::size_t n = 0;
        for (const auto& rec : records) n += rec.o;
        return n;
    }

    std::size_t conversion_count() const {
        std::size_t n = 0;
        for (const auto& rec : records) n += rec.r;
        return n;
    }

    bool has_ground_truth() const {
        for (const auto& rec : records)
            if (!rec.q_true || !rec.cvr_true) return false;
        return !records.empty();
    }

    bool has_potential_outcomes() const {
        for (const auto& rec : records)
            if (!rec.r_potential) return false;
        return !records.empty();
    }

    // r <= o pointwise, feature indices within schema bounds.
    void validate() const {
        schema.validate();
        for (std::size_t i = 0; i < records.size(); ++i) {
            const auto& rec = records[i];
            if (rec.r > rec.o)
                throw DataError("record " + std::to_string(i) +
                                ": conversion without click (r > o)");
            if (rec.features.size() != schema.field_count)
                throw DataError("record " + std::to_string(i) + ": expected " +
                                std::to_string(schema.field_count) + " features, got " +
                                std::to_string(rec.features.size()));
            for (std::size_t f = 0; f < rec.features.size(); ++f)
                if (rec.features[f] >= schema.cardinalities[f])
                    throw DataError("record " + std::to_string(i) + ": feature " +
                                    std::to_string(f) + " index out of range");
            if (rec.o == 1 && rec.r_potential && *rec.r_potential != rec.r)
                throw DataError("record " + std::to_string(i) +
                                ": r != r_potential on a clicked record");
        }
    }
};

}  // namespace cvrlab
