#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "cvrlab/analysis.hpp"
#include "cvrlab/data.hpp"
#include "cvrlab/errors.hpp"
#include "cvrlab/nn.hpp"
#include "cvrlab/rng.hpp"
#include "cvrlab/variant.hpp"

// Assembles the eight model variants, runs training with periodic validation
// selection, and produces frozen predictors plus bit-exact checkpoints.

namespace cvrlab::models {

struct Model {
    ModelVariant variant = ModelVariant::esmm;
    nn::ModelParams params;
    nn::TrainConfig config;
};

// Towers per variant: CTR + CVR, plus the imputation tower for the DR-based
// and EIB variants. One embedding table is shared by all of them.
inline Model build(ModelVariant variant, const FieldSchema& schema,
                   const nn::TrainConfig& config) {
    Model m;
    m.variant = variant;
    m.config = config;
    m.params = nn::init_params(schema, config, config.seed, variant_has_imp_tower(variant));
    return m;
}

struct EvalPoint {
    std::size_t step = 0;
    double metric = 0.0;
};

struct TrainTrace {
    std::vector<risk::RiskBreakdown> steps;  // one RiskBreakdown per grad step
    std::vector<EvalPoint> evals;            // validation checkpoints
};

struct TrainedModel {
    ModelVariant variant = ModelVariant::esmm;
    nn::ModelParams params;  // frozen best snapshot
    nn::TrainConfig config;
    std::size_t selection_step = 0;
    double validation_metric = 0.0;
};

struct TrainResult {
    TrainedModel model;
    TrainTrace trace;
};

struct Prediction {
    double o_hat = 0.0;
    double r_hat = 0.0;
    double ctcvr = 0.0;  // o_hat * r_hat
};

inline std::vector<Prediction> predict(const nn::ModelParams& params,
                                       std::span<const ImpressionRecord> records) {
    std::vector<Prediction> out(records.size());
    nn::detail::RecordCache cache;
    for (std::size_t i = 0; i < records.size(); ++i) {
        nn::detail::gather_input(params, records[i], cache.x);
        if (params.expert_count > 0)
            nn::detail::forward_experts(params, cache, cache.expert_h);
        nn::detail::forward_task(params, nn::Task::ctr, cache);
        nn::detail::forward_task(params, nn::Task::cvr, cache);
        out[i].o_hat = cache.task[0].out;
        out[i].r_hat = cache.task[1].out;
        out[i].ctcvr = out[i].o_hat * out[i].r_hat;
    }
    return out;
}

inline std::vector<Prediction> predict(const TrainedModel& trained,
                                       std::span<const ImpressionRecord> records) {
    return predict(trained.params, records);
}

namespace detail {

// CVR AUC over clicked validation samples; ESMM has no direct CVR
// supervision, so it selects on CTCVR AUC over the full validation split.
// Returns nothing when the metric is undefined (single-class labels).
inline std::optional<double> validation_metric(const nn::ModelParams& params,
                                               ModelVariant variant, const Dataset& valid) {
    const auto preds = predict(params, valid.records);
    std::vector<std::uint8_t> labels;
    std::vector<double> scores;
    labels.reserve(valid.records.size());
    scores.reserve(valid.records.size());
    if (variant == ModelVariant::esmm) {
        for (std::size_t i = 0; i < valid.records.size(); ++i) {
            labels.push_back(valid.records[i].o & valid.records[i].r);
            scores.push_back(preds[i].ctcvr);
        }
    } else {
        for (std::size_t i = 0; i < valid.records.size(); ++i) {
            if (!valid.records[i].o) continue;
            labels.push_back(valid.records[i].r);
            scores.push_back(preds[i].r_hat);
        }
    }
    try {
        return analysis::rank_metrics(labels, scores).auc;
    } catch (const DataError&) {
        return std::nullopt;
    }
}

}  // namespace detail

// Iterates grad_step over seeded mini-batches (reshuffled per epoch, tail
// remainders dropped) and keeps the best validation snapshot. The trace
// carries every step's RiskBreakdown and every validation point.
inline TrainResult train(const Model& model, const Dataset& train_set,
                         const Dataset& valid_set) {
    if (train_set.records.empty() || valid_set.records.empty())
        throw DataError("train: datasets must be nonempty");
    model.config.validate();

    const nn::TrainConfig& config = model.config;
    nn::ObjectiveSpec spec{model.variant, config.lambda_c, config.lambda_g};

    TrainResult result;
    result.model.variant = model.variant;
    result.model.config = config;
    nn::ModelParams params = model.params;

    auto eval_snapshot = [&](std::size_t step, nn::ModelParams& best, bool& have_metric) {
        const auto metric = detail::validation_metric(params, model.variant, valid_set);
        if (!metric) return;
        result.trace.evals.push_back({step, *metric});
        if (!have_metric || *metric > result.model.validation_metric) {
            have_metric = true;
            result.model.validation_metric = *metric;
            result.model.selection_step = step;
            best = params;
        }
    };

    nn::ModelParams best = params;
    bool have_metric = false;
    eval_snapshot(0, best, have_metric);

    const std::size_t n = train_set.records.size();
    const std::size_t batch_size = std::min(config.batch_size, n);
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::size_t epoch = 0, pos = n;  // forces the first shuffle

    std::vector<ImpressionRecord> batch(batch_size);
    nn::detail::Workspace ws;
    std::vector<double> grad_buf;

    for (std::size_t step = 1; step <= config.max_steps; ++step) {
        if (pos + batch_size > n) {
            Rng rng(derive_seed(config.seed, 0xE90C4, static_cast<std::uint64_t>(epoch)));
            for (std::size_t i = 0; i + 1 < n; ++i) {
                const std::size_t j = i + rng.below(n - i);
                std::swap(order[i], order[j]);
            }
            ++epoch;
            pos = 0;
        }
        for (std::size_t k = 0; k < batch_size; ++k)
            batch[k] = train_set.records[order[pos + k]];
        pos += batch_size;

        result.trace.steps.push_back(nn::grad_step(params, batch, spec, config, ws, grad_buf));

        if (step % config.eval_every == 0 || step == config.max_steps) {
            if (result.trace.evals.empty() || result.trace.evals.back().step != step)
                eval_snapshot(step, best, have_metric);
        }
    }

    result.model.params = std::move(best);
    return result;
}

// ---------------------------------------------------------------------------
// Checkpoints: versioned JSON containers that round-trip bit-exactly.
// ---------------------------------------------------------------------------

inline constexpr int kCheckpointVersion = 1;

inline nlohmann::json config_to_json(const nn::TrainConfig& c) {
    return {{"learning_rate", c.learning_rate},
            {"weight_decay", c.weight_decay},
            {"hidden_sizes", c.hidden_sizes},
            {"expert_count", c.expert_count},
            {"batch_size", c.batch_size},
            {"max_steps", c.max_steps},
            {"eval_every", c.eval_every},
            {"seed", c.seed},
            {"lambda_c", c.lambda_c},
            {"lambda_g", c.lambda_g},
            {"prob_epsilon", c.prob_epsilon}};
}

inline nn::TrainConfig config_from_json(const nlohmann::json& j) {
    nn::TrainConfig c;
    c.learning_rate = j.at("learning_rate").get<double>();
    c.weight_decay = j.at("weight_decay").get<double>();
    c.hidden_sizes = j.at("hidden_sizes").get<std::vector<std::size_t>>();
    c.expert_count = j.at("expert_count").get<std::size_t>();
    c.batch_size = j.at("batch_size").get<std::size_t>();
    c.max_steps = j.at("max_steps").get<std::size_t>();
    c.eval_every = j.at("eval_every").get<std::size_t>();
    c.seed = j.at("seed").get<std::uint64_t>();
    c.lambda_c = j.at("lambda_c").get<double>();
    c.lambda_g = j.at("lambda_g").get<double>();
    c.prob_epsilon = j.at("prob_epsilon").get<double>();
    return c;
}

inline void save_checkpoint(const TrainedModel& trained, const std::filesystem::path& path) {
    nlohmann::json j;
    j["format"] = "cvrlab-checkpoint";
    j["version"] = kCheckpointVersion;
    j["variant"] = std::string(to_string(trained.variant));
    j["selection_step"] = trained.selection_step;
    j["validation_metric"] = trained.validation_metric;
    j["config"] = config_to_json(trained.config);
    j["field_schema"] = {{"field_count", trained.params.schema.field_count},
                         {"cardinalities", trained.params.schema.cardinalities},
                         {"embedding_dim", trained.params.schema.embedding_dim}};
    nlohmann::json tensors = nlohmann::json::array();
    for (std::size_t i = 0; i < trained.params.tensors.size(); ++i) {
        const auto& spec = trained.params.tensors[i];
        auto view = trained.params.tensor(i);
        tensors.push_back({{"name", spec.name},
                           {"rows", spec.rows},
                           {"cols", spec.cols},
                           {"values", std::vector<double>(view.begin(), view.end())}});
    }
    j["tensors"] = std::move(tensors);
    j["adam"] = {{"step", trained.params.adam_step},
                 {"m", trained.params.adam_m},
                 {"v", trained.params.adam_v}};

    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot open for writing: " + path.string());
    out << j.dump(1) << '\n';
    if (!out) throw DataError("write failed: " + path.string());
}

inline TrainedModel load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open: " + path.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw DataError("checkpoint parse error: " + std::string(e.what()));
    }
    if (j.value("format", "") != "cvrlab-checkpoint")
        throw DataError("not a cvrlab checkpoint: " + path.string());
    if (j.value("version", 0) != kCheckpointVersion)
        throw DataError("unsupported checkpoint version");

    TrainedModel trained;
    trained.variant = variant_from_string(j.at("variant").get<std::string>());
    trained.selection_step = j.at("selection_step").get<std::size_t>();
    trained.validation_metric = j.at("validation_metric").get<double>();
    trained.config = config_from_json(j.at("config"));

    FieldSchema schema;
    schema.field_count = j.at("field_schema").at("field_count").get<std::size_t>();
    schema.cardinalities =
        j.at("field_schema").at("cardinalities").get<std::vector<std::size_t>>();
    schema.embedding_dim = j.at("field_schema").at("embedding_dim").get<std::size_t>();

    trained.params = nn::init_params(schema, trained.config, trained.config.seed,
                                     variant_has_imp_tower(trained.variant));
    const auto& tensors = j.at("tensors");
    if (tensors.size() != trained.params.tensors.size())
        throw DataError("checkpoint tensor count does not match the rebuilt layout");
    for (std::size_t i = 0; i < tensors.size(); ++i) {
        const auto& spec = trained.params.tensors[i];
        if (tensors[i].at("name").get<std::string>() != spec.name ||
            tensors[i].at("rows").get<std::size_t>() != spec.rows ||
            tensors[i].at("cols").get<std::size_t>() != spec.cols)
            throw DataError("checkpoint tensor mismatch at " + spec.name);
        const auto values = tensors[i].at("values").get<std::vector<double>>();
        if (values.size() != spec.size())
            throw DataError("checkpoint tensor size mismatch at " + spec.name);
        std::copy(values.begin(), values.end(), trained.params.tensor(i).begin());
    }
    trained.params.adam_step = j.at("adam").at("step").get<std::int64_t>();
    trained.params.adam_m = j.at("adam").at("m").get<std::vector<double>>();
    trained.params.adam_v = j.at("adam").at("v").get<std::vector<double>>();
    if (trained.params.adam_m.size() != trained.params.values.size() ||
        trained.params.adam_v.size() != trained.params.values.size())
        throw DataError("checkpoint optimizer state size mismatch");
    return trained;
}

}  // namespace cvrlab::models
