#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "cvrlab/data.hpp"
#include "cvrlab/errors.hpp"
#include "cvrlab/risk.hpp"
#include "cvrlab/rng.hpp"
#include "cvrlab/variant.hpp"

// Deterministic feedforward machinery: shared embedding table, per-task
// towers, optional mixture-of-experts backbone, manual backprop and an
// Adam-style optimizer. Everything is double precision and bit-reproducible
// for a fixed seed.

namespace cvrlab::nn {

enum class Task : std::size_t { ctr = 0, cvr = 1, imp = 2 };
constexpr std::size_t kTaskCount = 3;

struct TrainConfig {
    double learning_rate = 1e-4;
    double weight_decay = 1e-3;
    std::vector<std::size_t> hidden_sizes = {64, 32};
    std::size_t expert_count = 0;  // 0 = plain shared-embedding towers
    std::size_t batch_size = 256;
    std::size_t max_steps = 10000;
    std::size_t eval_every = 1000;
    std::uint64_t seed = 0;
    double lambda_c = 0.1;
    double lambda_g = 1.0;
    double prob_epsilon = 0.02;

    void validate() const {
        if (learning_rate < 0.0) throw ConfigError("TrainConfig: negative learning_rate");
        if (weight_decay < 0.0) throw ConfigError("TrainConfig: negative weight_decay");
        if (hidden_sizes.empty()) throw ConfigError("TrainConfig: hidden_sizes empty");
        for (std::size_t h : hidden_sizes)
            if (h == 0) throw ConfigError("TrainConfig: zero hidden size");
        if (batch_size == 0) throw ConfigError("TrainConfig: batch_size must be positive");
        if (eval_every == 0) throw ConfigError("TrainConfig: eval_every must be positive");
        if (!(prob_epsilon > 0.0 && prob_epsilon < 0.5))
            throw ConfigError("TrainConfig: prob_epsilon must lie in (0, 0.5)");
        if (lambda_c < 0.0 || lambda_g < 0.0)
            throw ConfigError("TrainConfig: lambda weights must be >= 0");
    }
};

struct ObjectiveSpec {
    ModelVariant variant = ModelVariant::esmm;
    double lambda_c = 0.1;
    double lambda_g = 1.0;
};

struct TensorSpec {
    std::string name;
    std::size_t rows = 0;
    std::size_t cols = 1;
    std::size_t offset = 0;

    std::size_t size() const { return rows * cols; }
};

namespace detail {

struct TowerLayout {
    std::vector<std::size_t> dims;        // input, hidden..., 1
    std::vector<std::size_t> weight_idx;  // tensor index per layer
    std::vector<std::size_t> bias_idx;

    bool live() const { return !dims.empty(); }
    std::size_t layer_count() const { return dims.empty() ? 0 : dims.size() - 1; }
    // total activation scratch for the hidden layers
    std::size_t hidden_total() const {
        std::size_t sum = 0;
        for (std::size_t i = 1; i + 1 < dims.size(); ++i) sum += dims[i];
        return sum;
    }
};

constexpr std::size_t kNoTensor = static_cast<std::size_t>(-1);

}  // namespace detail

// Shared embedding table plus per-task tower parameters and optimizer state,
// stored as one flat value vector with a named-tensor layout on top.
struct ModelParams {
    FieldSchema schema;
    std::vector<std::size_t> hidden;
    std::size_t expert_count = 0;
    bool has_imp_tower = false;
    double prob_epsilon = 0.02;

    std::vector<TensorSpec> tensors;
    std::vector<std::size_t> emb_idx;                 // per field
    std::vector<std::size_t> expert_w_idx, expert_b_idx;
    std::array<std::size_t, kTaskCount> gate_w_idx{detail::kNoTensor, detail::kNoTensor,
                                                   detail::kNoTensor};
    std::array<std::size_t, kTaskCount> gate_b_idx{detail::kNoTensor, detail::kNoTensor,
                                                   detail::kNoTensor};
    std::array<detail::TowerLayout, kTaskCount> towers;

    std::vector<double> values;
    std::vector<double> adam_m, adam_v;  // first/second moment accumulators
    std::int64_t adam_step = 0;

    bool task_live(Task t) const {
        return t != Task::imp || has_imp_tower;
    }

    std::size_t tower_count() const { return has_imp_tower ? 3 : 2; }

    std::span<double> tensor(std::size_t idx) {
        const auto& spec = tensors[idx];
        return {values.data() + spec.offset, spec.size()};
    }
    std::span<const double> tensor(std::size_t idx) const {
        const auto& spec = tensors[idx];
        return {values.data() + spec.offset, spec.size()};
    }
};

namespace detail {

inline double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

inline double softplus(double z) {
    if (z > 35.0) return z;
    if (z < -35.0) return std::exp(z);
    return std::log1p(std::exp(z));
}

inline std::size_t add_tensor(ModelParams& p, std::string name, std::size_t rows,
                              std::size_t cols) {
    TensorSpec spec;
    spec.name = std::move(name);
    spec.rows = rows;
    spec.cols = cols;
    spec.offset = p.values.size();
    p.values.resize(spec.offset + spec.size(), 0.0);
    p.tensors.push_back(std::move(spec));
    return p.tensors.size() - 1;
}

inline const char* task_name(Task t) {
    switch (t) {
        case Task::ctr: return "ctr";
        case Task::cvr: return "cvr";
        case Task::imp: return "imp";
    }
    return "?";
}

inline void build_tower(ModelParams& p, Task t, std::size_t input_dim,
                        std::span<const std::size_t> hidden) {
    auto& tower = p.towers[static_cast<std::size_t>(t)];
    tower.dims.clear();
    tower.dims.push_back(input_dim);
    for (std::size_t h : hidden) tower.dims.push_back(h);
    tower.dims.push_back(1);
    const std::string base = std::string("tower.") + task_name(t);
    for (std::size_t layer = 0; layer + 1 < tower.dims.size(); ++layer) {
        const std::string prefix = base + ".L" + std::to_string(layer);
        tower.weight_idx.push_back(
            add_tensor(p, prefix + ".W", tower.dims[layer + 1], tower.dims[layer]));
        tower.bias_idx.push_back(add_tensor(p, prefix + ".b", tower.dims[layer + 1], 1));
    }
}

}  // namespace detail

// Builds the parameter container for the requested tower set and fills it
// deterministically. Every tensor draws from its own sub-seed, so adding the
// imputation tower does not perturb the shared tensors' initialization.
inline ModelParams init_params(const FieldSchema& schema, const TrainConfig& config,
                               std::uint64_t seed, bool imp_tower = false) {
    schema.validate();
    config.validate();

    ModelParams p;
    p.schema = schema;
    p.hidden = config.hidden_sizes;
    p.expert_count = config.expert_count;
    p.has_imp_tower = imp_tower;
    p.prob_epsilon = config.prob_epsilon;

    const std::size_t input_dim = schema.input_dim();
    for (std::size_t f = 0; f < schema.field_count; ++f)
        p.emb_idx.push_back(detail::add_tensor(p, "emb.f" + std::to_string(f),
                                               schema.cardinalities[f],
                                               schema.embedding_dim));

    const std::vector<Task> live =
        imp_tower ? std::vector<Task>{Task::ctr, Task::cvr, Task::imp}
                  : std::vector<Task>{Task::ctr, Task::cvr};

    if (config.expert_count > 0) {
        const std::size_t expert_dim = config.hidden_sizes.front();
        for (std::size_t e = 0; e < config.expert_count; ++e) {
            const std::string base = "expert.e" + std::to_string(e);
            p.expert_w_idx.push_back(detail::add_tensor(p, base + ".W", expert_dim, input_dim));
            p.expert_b_idx.push_back(detail::add_tensor(p, base + ".b", expert_dim, 1));
        }
        std::span<const std::size_t> rest(config.hidden_sizes.data() + 1,
                                          config.hidden_sizes.size() - 1);
        for (Task t : live) {
            const std::string base = std::string("gate.") + detail::task_name(t);
            p.gate_w_idx[static_cast<std::size_t>(t)] =
                detail::add_tensor(p, base + ".W", config.expert_count, input_dim);
            p.gate_b_idx[static_cast<std::size_t>(t)] =
                detail::add_tensor(p, base + ".b", config.expert_count, 1);
            detail::build_tower(p, t, expert_dim, rest);
        }
    } else {
        for (Task t : live)
            detail::build_tower(p, t, input_dim, config.hidden_sizes);
    }

    // Xavier-uniform weights, zero biases; embeddings scaled by their dim.
    for (std::size_t i = 0; i < p.tensors.size(); ++i) {
        const auto& spec = p.tensors[i];
        auto view = p.tensor(i);
        if (spec.name.ends_with(".b")) continue;  // biases stay zero
        Rng rng(derive_seed(seed, fnv1a(spec.name.c_str())));
        double bound;
        if (spec.name.starts_with("emb."))
            bound = std::sqrt(6.0 / static_cast<double>(spec.cols + 1));
        else
            bound = std::sqrt(6.0 / static_cast<double>(spec.rows + spec.cols));
        for (double& x : view) x = rng.uniform(-bound, bound);
    }

    p.adam_m.assign(p.values.size(), 0.0);
    p.adam_v.assign(p.values.size(), 0.0);
    p.adam_step = 0;
    return p;
}

namespace detail {

// Activation cache for one record/task pair; reused across records.
struct TaskCache {
    std::vector<double> gate_a;       // softmax mixture weights (expert mode)
    std::vector<double> tower_input;  // mixed expert output (expert mode)
    std::vector<double> acts;         // hidden tanh activations, concatenated
    double z = 0.0;                   // head pre-activation
    double sig = 0.0;                 // sigmoid(z) before clamping (ctr/cvr)
    double out = 0.0;                 // clamped probability or softplus value
    bool clamped = false;
};

struct RecordCache {
    std::vector<double> x;
    std::vector<double> expert_h;  // expert_count x expert_dim
    std::array<TaskCache, kTaskCount> task;
    // backprop scratch
    std::vector<double> dx;
    std::vector<double> d_expert_h;
    std::vector<double> ga, gb;
    std::vector<double> gate_d;
};

inline void gather_input(const ModelParams& p, const ImpressionRecord& rec,
                         std::vector<double>& x) {
    const auto& schema = p.schema;
    if (rec.features.size() != schema.field_count)
        throw DataError("record has " + std::to_string(rec.features.size()) +
                        " features, schema expects " + std::to_string(schema.field_count));
    x.resize(schema.input_dim());
    const std::size_t dim = schema.embedding_dim;
    for (std::size_t f = 0; f < schema.field_count; ++f) {
        const std::uint32_t idx = rec.features[f];
        if (idx >= schema.cardinalities[f])
            throw DataError("feature index " + std::to_string(idx) + " out of range for field " +
                            std::to_string(f));
        auto emb = p.tensor(p.emb_idx[f]);
        std::copy_n(emb.data() + static_cast<std::size_t>(idx) * dim, dim,
                    x.data() + f * dim);
    }
}

// y = W x + b, W stored row-major (rows x cols).
inline void affine(std::span<const double> w, std::span<const double> b,
                   std::span<const double> x, std::span<double> y) {
    const std::size_t rows = b.size(), cols = x.size();
    for (std::size_t r = 0; r < rows; ++r) {
        const double* wr = w.data() + r * cols;
        double acc = b[r];
        for (std::size_t c = 0; c < cols; ++c) acc += wr[c] * x[c];
        y[r] = acc;
    }
}

inline void forward_experts(const ModelParams& p, const RecordCache& cache,
                            std::vector<double>& expert_h) {
    const std::size_t expert_dim = p.hidden.front();
    expert_h.resize(p.expert_count * expert_dim);
    for (std::size_t e = 0; e < p.expert_count; ++e) {
        std::span<double> h(expert_h.data() + e * expert_dim, expert_dim);
        affine(p.tensor(p.expert_w_idx[e]), p.tensor(p.expert_b_idx[e]), cache.x, h);
        for (double& v : h) v = std::tanh(v);
    }
}

inline void forward_task(const ModelParams& p, Task t, RecordCache& cache) {
    auto& tc = cache.task[static_cast<std::size_t>(t)];
    const auto& tower = p.towers[static_cast<std::size_t>(t)];
    std::span<const double> input;

    if (p.expert_count > 0) {
        const std::size_t ti = static_cast<std::size_t>(t);
        const std::size_t expert_dim = p.hidden.front();
        tc.gate_a.resize(p.expert_count);
        affine(p.tensor(p.gate_w_idx[ti]), p.tensor(p.gate_b_idx[ti]), cache.x, tc.gate_a);
        double max_logit = tc.gate_a[0];
        for (double v : tc.gate_a) max_logit = std::max(max_logit, v);
        double norm = 0.0;
        for (double& v : tc.gate_a) {
            v = std::exp(v - max_logit);
            norm += v;
        }
        for (double& v : tc.gate_a) v /= norm;
        tc.tower_input.assign(expert_dim, 0.0);
        for (std::size_t e = 0; e < p.expert_count; ++e) {
            const double a = tc.gate_a[e];
            const double* h = cache.expert_h.data() + e * expert_dim;
            for (std::size_t k = 0; k < expert_dim; ++k) tc.tower_input[k] += a * h[k];
        }
        input = tc.tower_input;
    } else {
        input = cache.x;
    }

    tc.acts.resize(tower.hidden_total());
    std::size_t acts_off = 0;
    std::span<const double> cur = input;
    for (std::size_t layer = 0; layer + 1 < tower.layer_count(); ++layer) {
        std::span<double> out(tc.acts.data() + acts_off, tower.dims[layer + 1]);
        affine(p.tensor(tower.weight_idx[layer]), p.tensor(tower.bias_idx[layer]), cur, out);
        for (double& v : out) v = std::tanh(v);
        acts_off += out.size();
        cur = out;
    }
    const std::size_t head = tower.layer_count() - 1;
    double z;
    affine(p.tensor(tower.weight_idx[head]), p.tensor(tower.bias_idx[head]), cur,
           std::span<double>(&z, 1));
    tc.z = z;

    const double eps = p.prob_epsilon;
    if (t == Task::imp) {
        tc.sig = sigmoid(z);  // softplus derivative
        tc.out = softplus(z);
        tc.clamped = false;
    } else {
        tc.sig = sigmoid(z);
        tc.out = std::clamp(tc.sig, eps, 1.0 - eps);
        tc.clamped = tc.sig < eps || tc.sig > 1.0 - eps;
    }
}

// Backprop one task tower from dL/dz; accumulates into grad and cache.dx /
// cache.d_expert_h.
inline void backward_task(const ModelParams& p, Task t, RecordCache& cache, double dz,
                          std::vector<double>& grad) {
    const std::size_t ti = static_cast<std::size_t>(t);
    auto& tc = cache.task[ti];
    const auto& tower = p.towers[ti];
    const std::size_t layers = tower.layer_count();

    std::span<const double> input =
        p.expert_count > 0 ? std::span<const double>(tc.tower_input) : std::span<const double>(cache.x);

    cache.ga.assign(1, dz);
    std::vector<double>& gout = cache.ga;
    std::vector<double>& gin = cache.gb;

    for (std::size_t layer = layers; layer-- > 0;) {
        const std::size_t out_dim = tower.dims[layer + 1];
        const std::size_t in_dim = tower.dims[layer];
        std::span<const double> in_vec;
        if (layer == 0) {
            in_vec = input;
        } else {
            // activations of layer-1 start after all earlier hidden layers
            std::size_t off = 0;
            for (std::size_t l = 0; l + 1 < layer; ++l) off += tower.dims[l + 1];
            in_vec = std::span<const double>(tc.acts.data() + off, in_dim);
        }

        auto w = p.tensor(tower.weight_idx[layer]);
        const std::size_t w_off = p.tensors[tower.weight_idx[layer]].offset;
        const std::size_t b_off = p.tensors[tower.bias_idx[layer]].offset;

        gin.assign(in_dim, 0.0);
        for (std::size_t r = 0; r < out_dim; ++r) {
            const double g = gout[r];
            grad[b_off + r] += g;
            double* gw = grad.data() + w_off + r * in_dim;
            const double* wr = w.data() + r * in_dim;
            for (std::size_t c = 0; c < in_dim; ++c) {
                gw[c] += g * in_vec[c];
                gin[c] += wr[c] * g;
            }
        }

        if (layer > 0) {
            // multiply by tanh' of the producing layer
            for (std::size_t c = 0; c < in_dim; ++c) {
                const double a = in_vec[c];
                gin[c] *= (1.0 - a * a);
            }
            std::swap(gout, gin);
        } else {
            if (p.expert_count > 0) {
                // through the gated mixture: d tower_input
                const std::size_t expert_dim = p.hidden.front();
                cache.gate_d.assign(p.expert_count, 0.0);
                double dot_a_da = 0.0;
                for (std::size_t e = 0; e < p.expert_count; ++e) {
                    const double* h = cache.expert_h.data() + e * expert_dim;
                    double da = 0.0;
                    for (std::size_t k = 0; k < expert_dim; ++k) {
                        da += h[k] * gin[k];
                        cache.d_expert_h[e * expert_dim + k] += tc.gate_a[e] * gin[k];
                    }
                    cache.gate_d[e] = da;
                    dot_a_da += tc.gate_a[e] * da;
                }
                // softmax backward
                for (std::size_t e = 0; e < p.expert_count; ++e)
                    cache.gate_d[e] = tc.gate_a[e] * (cache.gate_d[e] - dot_a_da);
                const std::size_t gw_off = p.tensors[p.gate_w_idx[ti]].offset;
                const std::size_t gb_off = p.tensors[p.gate_b_idx[ti]].offset;
                auto gate_w = p.tensor(p.gate_w_idx[ti]);
                const std::size_t in_dim2 = cache.x.size();
                for (std::size_t e = 0; e < p.expert_count; ++e) {
                    const double g = cache.gate_d[e];
                    grad[gb_off + e] += g;
                    double* gw = grad.data() + gw_off + e * in_dim2;
                    const double* wr = gate_w.data() + e * in_dim2;
                    for (std::size_t c = 0; c < in_dim2; ++c) {
                        gw[c] += g * cache.x[c];
                        cache.dx[c] += wr[c] * g;
                    }
                }
            } else {
                for (std::size_t c = 0; c < in_dim; ++c) cache.dx[c] += gin[c];
            }
        }
    }
}

inline void backward_experts(const ModelParams& p, RecordCache& cache,
                             std::vector<double>& grad) {
    const std::size_t expert_dim = p.hidden.front();
    for (std::size_t e = 0; e < p.expert_count; ++e) {
        const double* h = cache.expert_h.data() + e * expert_dim;
        const double* dh = cache.d_expert_h.data() + e * expert_dim;
        auto w = p.tensor(p.expert_w_idx[e]);
        const std::size_t w_off = p.tensors[p.expert_w_idx[e]].offset;
        const std::size_t b_off = p.tensors[p.expert_b_idx[e]].offset;
        const std::size_t in_dim = cache.x.size();
        for (std::size_t k = 0; k < expert_dim; ++k) {
            const double gz = dh[k] * (1.0 - h[k] * h[k]);
            if (gz == 0.0) continue;
            grad[b_off + k] += gz;
            double* gw = grad.data() + w_off + k * in_dim;
            const double* wr = w.data() + k * in_dim;
            for (std::size_t c = 0; c < in_dim; ++c) {
                gw[c] += gz * cache.x[c];
                cache.dx[c] += wr[c] * gz;
            }
        }
    }
}

inline void scatter_embedding_grad(const ModelParams& p, const ImpressionRecord& rec,
                                   const RecordCache& cache, std::vector<double>& grad) {
    const std::size_t dim = p.schema.embedding_dim;
    for (std::size_t f = 0; f < p.schema.field_count; ++f) {
        const std::size_t row = rec.features[f];
        const std::size_t off = p.tensors[p.emb_idx[f]].offset + row * dim;
        const double* dx = cache.dx.data() + f * dim;
        for (std::size_t k = 0; k < dim; ++k) grad[off + k] += dx[k];
    }
}

}  // namespace detail

// Forward pass for one record and one task; returns the clamped probability
// (CTR/CVR) or the nonnegative imputed error (IMP).
inline double forward(const ModelParams& params, const ImpressionRecord& record, Task task) {
    if (!params.task_live(task))
        throw ConfigError("forward: imputation tower not present in this model");
    detail::RecordCache cache;
    detail::gather_input(params, record, cache.x);
    if (params.expert_count > 0) detail::forward_experts(params, cache, cache.expert_h);
    detail::forward_task(params, task, cache);
    return cache.task[static_cast<std::size_t>(task)].out;
}

// Per-record quantities captured during a batch pass.
struct BatchForward {
    std::vector<double> o_hat, r_hat, delta_hat, delta;
    std::vector<std::uint8_t> o, r;
    std::size_t clicks = 0;
};

// Quantities treated as constants by the optimizer: the 1/o_hat weight inside
// R_IPS / R_DR and the true error delta inside the imputation objective.
// Freezing them makes a finite-difference probe agree with the analytic,
// stop-gradient-aware gradients.
struct FrozenStops {
    std::vector<double> prop_weight;
    std::vector<double> delta;
};

struct BatchEval {
    risk::RiskBreakdown risks;
};

namespace detail {

struct Workspace {
    RecordCache cache;
    BatchForward fwd;
};

inline void forward_scalars(const ModelParams& p, std::span<const ImpressionRecord> batch,
                            bool need_imp, BatchForward& out, RecordCache& cache) {
    const std::size_t n = batch.size();
    out.o_hat.resize(n);
    out.r_hat.resize(n);
    out.delta.resize(n);
    out.delta_hat.assign(n, 0.0);
    out.o.resize(n);
    out.r.resize(n);
    out.clicks = 0;
    for (std::size_t j = 0; j < n; ++j) {
        const auto& rec = batch[j];
        gather_input(p, rec, cache.x);
        if (p.expert_count > 0) forward_experts(p, cache, cache.expert_h);
        forward_task(p, Task::ctr, cache);
        forward_task(p, Task::cvr, cache);
        if (need_imp) forward_task(p, Task::imp, cache);
        out.o_hat[j] = cache.task[0].out;
        out.r_hat[j] = cache.task[1].out;
        if (need_imp) out.delta_hat[j] = cache.task[2].out;
        out.o[j] = rec.o;
        out.r[j] = rec.r;
        out.clicks += rec.o;
        out.delta[j] = bce(static_cast<double>(rec.r), out.r_hat[j]);
    }
}

}  // namespace detail

// Evaluates the variant objective on a batch; when `grad` is non-null the
// total-objective gradient is accumulated into it (must be pre-sized and
// zeroed). `frozen`, when given, supplies the stop-gradient constants.
inline BatchEval eval_batch(const ModelParams& params,
                            std::span<const ImpressionRecord> batch,
                            const ObjectiveSpec& spec, std::vector<double>* grad,
                            const FrozenStops* frozen, detail::Workspace& ws) {
    if (batch.empty()) throw DataError("eval_batch: empty batch");
    const bool need_imp = variant_needs_delta_hat(spec.variant);
    if (need_imp && !params.has_imp_tower)
        throw ConfigError("objective requires an imputation tower the model lacks");
    if (frozen && (frozen->prop_weight.size() != batch.size() ||
                   frozen->delta.size() != batch.size()))
        throw ConfigError("eval_batch: frozen stop lengths do not match batch");

    auto& fwd = ws.fwd;
    detail::forward_scalars(params, batch, need_imp, fwd, ws.cache);

    const double n = static_cast<double>(batch.size());
    const ModelVariant variant = spec.variant;
    const bool has_ctcvr = variant_has_ctcvr_term(variant);

    auto prop_w = [&](std::size_t j) {
        return frozen ? frozen->prop_weight[j] : fwd.o_hat[j];
    };
    auto frozen_delta = [&](std::size_t j) {
        return frozen ? frozen->delta[j] : fwd.delta[j];
    };

    BatchEval out;
    double l_ctr = 0.0, l_ctcvr = 0.0, l_cvr = 0.0;
    for (std::size_t j = 0; j < batch.size(); ++j) {
        l_ctr += bce(static_cast<double>(fwd.o[j]), fwd.o_hat[j]);
        if (has_ctcvr)
            l_ctcvr += bce(static_cast<double>(fwd.o[j] * fwd.r[j]),
                           fwd.o_hat[j] * fwd.r_hat[j]);
    }
    l_ctr /= n;
    l_ctcvr /= n;

    switch (variant) {
        case ModelVariant::esmm:
            l_cvr = 0.0;
            break;
        case ModelVariant::naive: {
            // An all-unclicked batch contributes no CVR term during training;
            // the standalone risk::naive_risk still rejects it.
            double sum = 0.0;
            for (std::size_t j = 0; j < batch.size(); ++j)
                if (fwd.o[j]) sum += fwd.delta[j];
            l_cvr = fwd.clicks > 0 ? sum / static_cast<double>(fwd.clicks) : 0.0;
            break;
        }
        case ModelVariant::mtl_imp: {
            double sum = 0.0;
            for (std::size_t j = 0; j < batch.size(); ++j)
                sum += bce(static_cast<double>(fwd.o[j] * fwd.r[j]), fwd.r_hat[j]);
            l_cvr = sum / n;
            break;
        }
        case ModelVariant::mtl_eib: {
            double sum = 0.0;
            for (std::size_t j = 0; j < batch.size(); ++j) {
                sum += fwd.delta_hat[j];
                if (fwd.o[j]) sum += fwd.delta[j] - fwd.delta_hat[j];
            }
            l_cvr = sum / n;
            break;
        }
        case ModelVariant::mtl_ips:
        case ModelVariant::escm2_ips: {
            double sum = 0.0;
            for (std::size_t j = 0; j < batch.size(); ++j)
                if (fwd.o[j]) sum += fwd.delta[j] / prop_w(j);
            l_cvr = sum / n;
            break;
        }
        case ModelVariant::mtl_dr:
        case ModelVariant::escm2_dr: {
            double err = 0.0, imp = 0.0;
            for (std::size_t j = 0; j < batch.size(); ++j) {
                err += fwd.delta_hat[j];
                if (fwd.o[j]) {
                    const double w = prop_w(j);
                    err += (fwd.delta[j] - fwd.delta_hat[j]) / w;
                    const double e = frozen_delta(j) - fwd.delta_hat[j];
                    imp += e * e / w;
                }
            }
            l_cvr = (err + imp) / n;
            break;
        }
    }

    out.risks.l_ctr = l_ctr;
    out.risks.l_cvr = l_cvr;
    out.risks.l_ctcvr = l_ctcvr;
    out.risks.total = l_ctr + spec.lambda_c * l_cvr + spec.lambda_g * l_ctcvr;

    if (!grad) return out;
    if (grad->size() != params.values.size())
        throw ConfigError("eval_batch: gradient buffer size mismatch");

    const double lc = spec.lambda_c, lg = spec.lambda_g;
    auto& cache = ws.cache;
    const std::size_t input_dim = params.schema.input_dim();

    for (std::size_t j = 0; j < batch.size(); ++j) {
        const auto& rec = batch[j];
        // Recompute the forward pass with activations for this record.
        detail::gather_input(params, rec, cache.x);
        if (params.expert_count > 0) detail::forward_experts(params, cache, cache.expert_h);
        detail::forward_task(params, Task::ctr, cache);
        detail::forward_task(params, Task::cvr, cache);
        if (need_imp) detail::forward_task(params, Task::imp, cache);

        const auto& tc_ctr = cache.task[0];
        const auto& tc_cvr = cache.task[1];
        const auto& tc_imp = cache.task[2];
        const double p_hat = tc_ctr.out, s_hat = tc_cvr.out;
        const double o_j = static_cast<double>(rec.o);
        const double r_j = static_cast<double>(rec.r);

        double dz_ctr = 0.0, dz_cvr = 0.0, dz_imp = 0.0;

        // l_ctr
        if (!tc_ctr.clamped) dz_ctr += (p_hat - o_j) / n;

        // l_ctcvr through the product o_hat * r_hat
        if (has_ctcvr) {
            const double c = o_j * r_j;
            const double prod = p_hat * s_hat;
            const double dpi = (prod - c) / (prod * (1.0 - prod)) / n;
            if (!tc_ctr.clamped) dz_ctr += lg * dpi * s_hat * p_hat * (1.0 - p_hat);
            if (!tc_cvr.clamped) dz_cvr += lg * dpi * p_hat * s_hat * (1.0 - s_hat);
        }

        // counterfactual CVR risk
        const double ds_factor = tc_cvr.clamped ? 0.0 : (s_hat - r_j);
        switch (variant) {
            case ModelVariant::esmm:
                break;
            case ModelVariant::naive:
                if (rec.o && fwd.clicks > 0)
                    dz_cvr += lc * ds_factor / static_cast<double>(fwd.clicks);
                break;
            case ModelVariant::mtl_imp:
                if (!tc_cvr.clamped) dz_cvr += lc * (s_hat - o_j * r_j) / n;
                break;
            case ModelVariant::mtl_eib:
                if (rec.o) dz_cvr += lc * ds_factor / n;
                dz_imp += lc * (1.0 - o_j) * tc_imp.sig / n;
                break;
            case ModelVariant::mtl_ips:
            case ModelVariant::escm2_ips:
                if (rec.o) dz_cvr += lc * ds_factor / (prop_w(j) * n);
                break;
            case ModelVariant::mtl_dr:
            case ModelVariant::escm2_dr: {
                const double w = prop_w(j);
                double dd = 1.0;  // d l_cvr / d delta_hat, before softplus'
                if (rec.o) {
                    dz_cvr += lc * ds_factor / (w * n);
                    dd -= 1.0 / w;
                    dd -= 2.0 * (frozen_delta(j) - fwd.delta_hat[j]) / w;
                }
                dz_imp += lc * dd * tc_imp.sig / n;
                break;
            }
        }

        if (dz_ctr == 0.0 && dz_cvr == 0.0 && dz_imp == 0.0) continue;

        cache.dx.assign(input_dim, 0.0);
        if (params.expert_count > 0)
            cache.d_expert_h.assign(cache.expert_h.size(), 0.0);

        if (dz_ctr != 0.0) detail::backward_task(params, Task::ctr, cache, dz_ctr, *grad);
        if (dz_cvr != 0.0) detail::backward_task(params, Task::cvr, cache, dz_cvr, *grad);
        if (dz_imp != 0.0) detail::backward_task(params, Task::imp, cache, dz_imp, *grad);
        if (params.expert_count > 0) detail::backward_experts(params, cache, *grad);
        detail::scatter_embedding_grad(params, rec, cache, *grad);
    }

    return out;
}

// One Adam update with decoupled weight decay over the full parameter vector.
// Throws DivergedError when the loss or any gradient is non-finite.
inline risk::RiskBreakdown grad_step(ModelParams& params,
                                     std::span<const ImpressionRecord> batch,
                                     const ObjectiveSpec& spec, const TrainConfig& config,
                                     detail::Workspace& ws, std::vector<double>& grad_buf) {
    grad_buf.assign(params.values.size(), 0.0);
    const BatchEval eval = eval_batch(params, batch, spec, &grad_buf, nullptr, ws);

    if (!std::isfinite(eval.risks.total))
        throw DivergedError(params.adam_step, "non-finite loss");
    for (double g : grad_buf)
        if (!std::isfinite(g)) throw DivergedError(params.adam_step, "non-finite gradient");

    constexpr double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
    params.adam_step += 1;
    const double t = static_cast<double>(params.adam_step);
    const double bc1 = 1.0 - std::pow(beta1, t);
    const double bc2 = 1.0 - std::pow(beta2, t);
    const double lr = config.learning_rate, wd = config.weight_decay;
    for (std::size_t i = 0; i < params.values.size(); ++i) {
        const double g = grad_buf[i];
        params.adam_m[i] = beta1 * params.adam_m[i] + (1.0 - beta1) * g;
        params.adam_v[i] = beta2 * params.adam_v[i] + (1.0 - beta2) * g * g;
        const double mhat = params.adam_m[i] / bc1;
        const double vhat = params.adam_v[i] / bc2;
        params.values[i] -= lr * (mhat / (std::sqrt(vhat) + adam_eps) + wd * params.values[i]);
    }
    return eval.risks;
}

inline risk::RiskBreakdown grad_step(ModelParams& params,
                                     std::span<const ImpressionRecord> batch,
                                     const ObjectiveSpec& spec, const TrainConfig& config) {
    detail::Workspace ws;
    std::vector<double> grad_buf;
    return grad_step(params, batch, spec, config, ws, grad_buf);
}

// Captures the stop-gradient constants at the current parameters.
inline FrozenStops capture_stops(const ModelParams& params,
                                 std::span<const ImpressionRecord> batch,
                                 const ObjectiveSpec& spec) {
    detail::Workspace ws;
    FrozenStops stops;
    const bool need_imp = variant_needs_delta_hat(spec.variant);
    detail::forward_scalars(params, batch, need_imp, ws.fwd, ws.cache);
    stops.prop_weight = ws.fwd.o_hat;
    stops.delta = ws.fwd.delta;
    return stops;
}

// Compares the analytic gradient against central differences on a coordinate
// subset. The stop-gradient constants are frozen at the base point so both
// sides differentiate the same function. Returns the max relative error.
inline double finite_diff_check(const ModelParams& params,
                                std::span<const ImpressionRecord> batch,
                                const ObjectiveSpec& spec, double h,
                                std::size_t max_coords = 512, std::uint64_t seed = 17) {
    if (!(h >= 1e-7 && h <= 1e-3))
        throw ConfigError("finite_diff_check: h must lie in [1e-7, 1e-3]");

    detail::Workspace ws;
    const FrozenStops stops = capture_stops(params, batch, spec);

    std::vector<double> grad(params.values.size(), 0.0);
    eval_batch(params, batch, spec, &grad, &stops, ws);

    std::vector<std::size_t> coords(params.values.size());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (coords.size() > max_coords) {
        Rng rng(derive_seed(seed, 0xFD));
        for (std::size_t i = 0; i < max_coords; ++i) {
            const std::size_t j = i + rng.below(coords.size() - i);
            std::swap(coords[i], coords[j]);
        }
        coords.resize(max_coords);
    }

    ModelParams probe = params;
    double max_rel = 0.0;
    for (std::size_t idx : coords) {
        const double saved = probe.values[idx];
        probe.values[idx] = saved + h;
        const double up = eval_batch(probe, batch, spec, nullptr, &stops, ws).risks.total;
        probe.values[idx] = saved - h;
        const double dn = eval_batch(probe, batch, spec, nullptr, &stops, ws).risks.total;
        probe.values[idx] = saved;
        const double fd = (up - dn) / (2.0 * h);
        const double rel = std::abs(grad[idx] - fd) /
                           std::max(std::abs(grad[idx]) + std::abs(fd), 1e-6);
        max_rel = std::max(max_rel, rel);
    }
    return max_rel;
}

// FNV-1a over the raw bit patterns; used by determinism checks.
inline std::uint64_t bits_checksum(std::span<const double> values) {
    std::uint64_t h = 1469598103934665603ULL;
    for (double v : values) {
        std::uint64_t bits;
        static_assert(sizeof(bits) == sizeof(v));
        __builtin_memcpy(&bits, &v, sizeof(bits));
        for (int b = 0; b < 8; ++b) {
            h ^= (bits >> (b * 8)) & 0xff;
            h *= 1099511628211ULL;
        }
    }
    return h;
}

}  // namespace cvrlab::nn
