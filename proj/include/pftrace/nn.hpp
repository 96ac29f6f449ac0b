#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "pftrace/common.hpp"
#include "pftrace/dataset.hpp"

namespace pftrace {

// Dense feed-forward network: ReLU hidden layers, softmax output.
struct Architecture {
    std::vector<std::size_t> layer_sizes;  // {d, hidden..., K}

    std::size_t input_dim() const { return layer_sizes.front(); }
    std::size_t output_dim() const { return layer_sizes.back(); }
    std::size_t depth() const { return layer_sizes.size() - 1; }

    void validate() const {
        require(layer_sizes.size() >= 2, "architecture: need at least input and output layers");
        for (auto s : layer_sizes) require(s >= 1, "architecture: layer sizes must be >= 1");
    }

    bool operator==(const Architecture&) const = default;
};

struct TrainConfig {
    std::size_t epochs = 20;
    std::size_t batch_size = 32;
    double learning_rate = 0.05;
    std::uint64_t shuffle_seed = 0;
    // Leading weight layers kept fixed during training (transfer setting).
    std::size_t frozen_layers = 0;

    void validate() const {
        require(batch_size >= 1, "train config: batch_size must be >= 1");
        require(learning_rate > 0 && std::isfinite(learning_rate),
                "train config: learning_rate must be > 0");
    }

    bool operator==(const TrainConfig&) const = default;
};

// Either a class index or a full target distribution.
struct Target {
    std::uint32_t label = 0;
    std::span<const double> dist;

    static Target hard(std::uint32_t c) { return {c, {}}; }
    static Target soft(std::span<const double> d) { return {0, d}; }

    bool is_soft() const { return !dist.empty(); }
    double at(std::size_t k) const {
        if (is_soft()) return dist[k];
        return k == label ? 1.0 : 0.0;
    }
};

template <class S>
struct DenseLayer {
    std::size_t in = 0;
    std::size_t out = 0;
    std::vector<S> weight;  // out x in, row-major
    std::vector<S> bias;

    bool operator==(const DenseLayer&) const = default;
};

template <class S>
struct BasicClassifier {
    Architecture arch;
    TrainConfig train_config;
    std::uint64_t seed = 0;
    std::vector<DenseLayer<S>> layers;

    std::size_t num_classes() const { return arch.output_dim(); }
    std::size_t input_dim() const { return arch.input_dim(); }
    const DenseLayer<S>& final_layer() const { return layers.back(); }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& l : layers) n += l.weight.size() + l.bias.size();
        return n;
    }

    // Weight then bias, layer by layer.
    std::vector<S> flat_parameters() const {
        std::vector<S> out;
        out.reserve(parameter_count());
        for (const auto& l : layers) {
            out.insert(out.end(), l.weight.begin(), l.weight.end());
            out.insert(out.end(), l.bias.begin(), l.bias.end());
        }
        return out;
    }

    void set_flat_parameters(std::span<const S> p) {
        require(p.size() == parameter_count(), "classifier: parameter count mismatch");
        std::size_t k = 0;
        for (auto& l : layers) {
            for (auto& w : l.weight) w = p[k++];
            for (auto& b : l.bias) b = p[k++];
        }
    }

    bool all_finite() const {
        for (const auto& l : layers) {
            for (auto w : l.weight) if (!std::isfinite(w)) return false;
            for (auto b : l.bias) if (!std::isfinite(b)) return false;
        }
        return true;
    }

    template <class T>
    BasicClassifier<T> cast() const {
        BasicClassifier<T> m{arch, train_config, seed, {}};
        for (const auto& l : layers) {
            m.layers.push_back({l.in, l.out, std::vector<T>(l.weight.begin(), l.weight.end()),
                                std::vector<T>(l.bias.begin(), l.bias.end())});
        }
        return m;
    }

    bool operator==(const BasicClassifier&) const = default;
};

using Classifier = BasicClassifier<float>;

template <class S>
BasicClassifier<S> initialize(const Architecture& arch, std::uint64_t seed,
                              const TrainConfig& config = {}) {
    arch.validate();
    BasicClassifier<S> m{arch, config, seed, {}};
    Rng rng(derive_seed(seed, "nn.init"));
    for (std::size_t l = 0; l < arch.depth(); ++l) {
        const std::size_t in = arch.layer_sizes[l];
        const std::size_t out = arch.layer_sizes[l + 1];
        const double limit = std::sqrt(6.0 / static_cast<double>(in + out));
        DenseLayer<S> layer{in, out, std::vector<S>(in * out), std::vector<S>(out, S(0))};
        for (auto& w : layer.weight) w = static_cast<S>((2.0 * uniform01(rng) - 1.0) * limit);
        m.layers.push_back(std::move(layer));
    }
    return m;
}

// ---- forward ----

template <class S>
struct Activations {
    // post[0] is the input, post[l] the ReLU output of hidden layer l, and
    // post[depth] the softmax probabilities.
    std::vector<std::vector<S>> post;
};

template <class S>
void softmax_in_place(std::span<S> z) {
    double mx = -std::numeric_limits<double>::infinity();
    for (auto v : z) mx = std::max(mx, static_cast<double>(v));
    double sum = 0;
    for (auto& v : z) {
        const double e = std::exp(static_cast<double>(v) - mx);
        v = static_cast<S>(e);
        sum += e;
    }
    for (auto& v : z) {
        v = static_cast<S>(static_cast<double>(v) / sum);
        v = std::max(v, std::numeric_limits<S>::min());
    }
}

template <class S>
void forward_into(const BasicClassifier<S>& m, std::span<const S> x, Activations<S>& act) {
    if (x.size() != m.input_dim()) {
        throw ContractViolation("forward: input has " + std::to_string(x.size()) +
                                " features, model expects " + std::to_string(m.input_dim()));
    }
    const std::size_t depth = m.layers.size();
    act.post.resize(depth + 1);
    act.post[0].assign(x.begin(), x.end());
    for (std::size_t l = 0; l < depth; ++l) {
        const auto& layer = m.layers[l];
        const auto& in = act.post[l];
        auto& out = act.post[l + 1];
        out.resize(layer.out);
        for (std::size_t o = 0; o < layer.out; ++o) {
            const S* w = layer.weight.data() + o * layer.in;
            S acc = layer.bias[o];
            for (std::size_t i = 0; i < layer.in; ++i) acc += w[i] * in[i];
            out[o] = acc;
        }
        if (l + 1 < depth) {
            for (auto& v : out) v = v > S(0) ? v : S(0);
        } else {
            softmax_in_place<S>(out);
        }
    }
}

template <class S>
struct ForwardResult {
    std::vector<S> probabilities;
    std::vector<S> penultimate;  // last hidden activation (the input for a single layer)
};

template <class S>
ForwardResult<S> forward(const BasicClassifier<S>& m, std::span<const S> x) {
    Activations<S> act;
    forward_into(m, x, act);
    const std::size_t depth = m.layers.size();
    return {act.post[depth], act.post[depth - 1]};
}

template <class S>
std::size_t argmax(std::span<const S> v) {
    return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

template <class S>
std::size_t predict(const BasicClassifier<S>& m, std::span<const S> x) {
    Activations<S> act;
    forward_into(m, x, act);
    return argmax<S>(act.post.back());
}

inline constexpr double kLogClamp = 1e-12;

// -sum_k t_k log p_k, with p_k clamped below at 1e-12.
template <class S>
double loss_ce(std::span<const S> probabilities, const Target& target) {
    if (!target.is_soft()) {
        require(target.label < probabilities.size(), "loss_ce: label out of range");
        return -std::log(std::max(static_cast<double>(probabilities[target.label]), kLogClamp));
    }
    require(target.dist.size() == probabilities.size(), "loss_ce: target size mismatch");
    double s = 0;
    for (std::size_t k = 0; k < probabilities.size(); ++k) {
        if (target.dist[k] == 0.0) continue;
        s -= target.dist[k] * std::log(std::max(static_cast<double>(probabilities[k]), kLogClamp));
    }
    return s;
}

// ---- backward ----

template <class S>
struct Gradients {
    std::vector<DenseLayer<S>> layers;  // same shapes as the model

    static Gradients zeros_like(const BasicClassifier<S>& m) {
        Gradients g;
        for (const auto& l : m.layers) {
            g.layers.push_back({l.in, l.out, std::vector<S>(l.weight.size(), S(0)),
                                std::vector<S>(l.bias.size(), S(0))});
        }
        return g;
    }

    void zero() {
        for (auto& l : layers) {
            std::fill(l.weight.begin(), l.weight.end(), S(0));
            std::fill(l.bias.begin(), l.bias.end(), S(0));
        }
    }

    std::vector<S> flat() const {
        std::vector<S> out;
        for (const auto& l : layers) {
            out.insert(out.end(), l.weight.begin(), l.weight.end());
            out.insert(out.end(), l.bias.begin(), l.bias.end());
        }
        return out;
    }
};

namespace detail {

template <class S>
struct BackpropScratch {
    std::vector<S> delta;
    std::vector<S> prev;
};

// Propagates `delta` (gradient w.r.t. the pre-activation of layer `top`) down
// to the input. Weight gradients are accumulated into `grads` for layers at or
// above `first_trainable` when `grads` is non-null; the input gradient is
// written to `grad_in` when non-null.
template <class S>
void backprop_from(const BasicClassifier<S>& m, const Activations<S>& act, std::size_t top,
                   BackpropScratch<S>& sc, Gradients<S>* grads, std::size_t first_trainable,
                   std::vector<S>* grad_in) {
    for (std::size_t l = top + 1; l-- > 0;) {
        const auto& layer = m.layers[l];
        const auto& in = act.post[l];
        if (grads != nullptr && l >= first_trainable) {
            auto& g = grads->layers[l];
            for (std::size_t o = 0; o < layer.out; ++o) {
                const S d = sc.delta[o];
                if (d == S(0)) continue;
                S* gw = g.weight.data() + o * layer.in;
                for (std::size_t i = 0; i < layer.in; ++i) gw[i] += d * in[i];
                g.bias[o] += d;
            }
        }
        const bool need_lower = l > 0 ? (grads != nullptr && l - 1 >= first_trainable) || grad_in != nullptr
                                      : grad_in != nullptr;
        if (!need_lower) return;
        sc.prev.assign(layer.in, S(0));
        for (std::size_t o = 0; o < layer.out; ++o) {
            const S d = sc.delta[o];
            if (d == S(0)) continue;
            const S* w = layer.weight.data() + o * layer.in;
            for (std::size_t i = 0; i < layer.in; ++i) sc.prev[i] += w[i] * d;
        }
        if (l == 0) {
            if (grad_in != nullptr) *grad_in = sc.prev;
            return;
        }
        for (std::size_t i = 0; i < layer.in; ++i) {
            if (in[i] <= S(0)) sc.prev[i] = S(0);
        }
        std::swap(sc.delta, sc.prev);
    }
}

template <class S>
void output_delta(const Activations<S>& act, const Target& t, std::vector<S>& delta) {
    const auto& p = act.post.back();
    delta.resize(p.size());
    for (std::size_t k = 0; k < p.size(); ++k) delta[k] = p[k] - static_cast<S>(t.at(k));
}

}  // namespace detail

// d loss_ce(forward(m, x), target) / d weights. Final layer: (p - t) h^T.
template <class S>
Gradients<S> grad_weights(const BasicClassifier<S>& m, std::span<const S> x, const Target& target) {
    Activations<S> act;
    forward_into(m, x, act);
    auto g = Gradients<S>::zeros_like(m);
    detail::BackpropScratch<S> sc;
    detail::output_delta(act, target, sc.delta);
    detail::backprop_from<S>(m, act, m.layers.size() - 1, sc, &g, 0, nullptr);
    return g;
}

template <class S>
std::vector<S> grad_input(const BasicClassifier<S>& m, std::span<const S> x, const Target& target) {
    Activations<S> act;
    forward_into(m, x, act);
    detail::BackpropScratch<S> sc;
    detail::output_delta(act, target, sc.delta);
    std::vector<S> gin;
    detail::backprop_from<S>(m, act, m.layers.size() - 1, sc, nullptr, 0, &gin);
    return gin;
}

// Vector-Jacobian product of the penultimate activation w.r.t. the input:
// returns J^T upstream where J = d penultimate / d x.
template <class S>
std::vector<S> vjp_penultimate(const BasicClassifier<S>& m, std::span<const S> x,
                               std::span<const S> upstream) {
    Activations<S> act;
    forward_into(m, x, act);
    const std::size_t depth = m.layers.size();
    if (depth == 1) return std::vector<S>(upstream.begin(), upstream.end());
    const auto& h = act.post[depth - 1];
    require(upstream.size() == h.size(), "vjp_penultimate: upstream size mismatch");
    detail::BackpropScratch<S> sc;
    sc.delta.assign(upstream.begin(), upstream.end());
    for (std::size_t i = 0; i < h.size(); ++i) {
        if (h[i] <= S(0)) sc.delta[i] = S(0);
    }
    std::vector<S> gin;
    detail::backprop_from<S>(m, act, depth - 2, sc, nullptr, 0, &gin);
    return gin;
}

// ---- training ----

struct TrainSample {
    std::span<const float> x;
    Target target;
};

using Batch = std::vector<TrainSample>;
using EpochPlan = std::function<std::vector<Batch>(std::size_t epoch)>;

struct TrainStats {
    std::vector<double> epoch_mean_loss;
};

// Plain SGD on the mean per-batch loss. Batches are consumed in the given
// order so results are bitwise reproducible.
inline Classifier run_sgd(Classifier model, const EpochPlan& plan, const TrainConfig& config,
                          TrainStats* stats = nullptr) {
    config.validate();
    const std::size_t depth = model.layers.size();
    const std::size_t first_trainable = std::min(config.frozen_layers, depth - 1);
    auto grads = Gradients<float>::zeros_like(model);
    Activations<float> act;
    detail::BackpropScratch<float> sc;

    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        const auto batches = plan(epoch);
        double epoch_loss = 0;
        std::size_t seen = 0;
        for (const auto& batch : batches) {
            if (batch.empty()) continue;
            grads.zero();
            double batch_loss = 0;
            for (const auto& s : batch) {
                forward_into(model, s.x, act);
                batch_loss += loss_ce<float>(act.post.back(), s.target);
                detail::output_delta(act, s.target, sc.delta);
                detail::backprop_from<float>(model, act, depth - 1, sc, &grads, first_trainable,
                                             nullptr);
            }
            if (!std::isfinite(batch_loss)) {
                throw TrainingDiverged("sgd: non-finite loss at epoch " + std::to_string(epoch) +
                                       ", batch starting sample " + std::to_string(seen));
            }
            const float step = static_cast<float>(config.learning_rate / static_cast<double>(batch.size()));
            for (std::size_t l = first_trainable; l < depth; ++l) {
                auto& w = model.layers[l];
                const auto& g = grads.layers[l];
                for (std::size_t i = 0; i < w.weight.size(); ++i) w.weight[i] -= step * g.weight[i];
                for (std::size_t i = 0; i < w.bias.size(); ++i) w.bias[i] -= step * g.bias[i];
            }
            epoch_loss += batch_loss;
            seen += batch.size();
        }
        if (!model.all_finite()) {
            throw TrainingDiverged("sgd: non-finite weights after epoch " + std::to_string(epoch));
        }
        if (stats != nullptr) stats->epoch_mean_loss.push_back(seen ? epoch_loss / seen : 0.0);
    }
    return model;
}

// Splits an index order into consecutive batches of `batch_size`.
inline std::vector<Batch> make_batches(const LabeledDataset& ds, const std::vector<std::size_t>& order,
                                       std::size_t batch_size) {
    std::vector<Batch> out;
    for (std::size_t start = 0; start < order.size(); start += batch_size) {
        Batch b;
        const std::size_t end = std::min(order.size(), start + batch_size);
        for (std::size_t k = start; k < end; ++k) {
            b.push_back({ds.row(order[k]), Target::hard(ds.labels[order[k]])});
        }
        out.push_back(std::move(b));
    }
    return out;
}

// Hard-label epoch plan over `indices` of `ds`, reshuffled each epoch.
inline EpochPlan shuffled_plan(const LabeledDataset& ds, std::vector<std::size_t> indices,
                               std::size_t batch_size, std::uint64_t seed) {
    return [&ds, indices = std::move(indices), batch_size, seed](std::size_t epoch) {
        auto order = indices;
        Rng rng(derive_seed(seed, "sgd.shuffle", epoch));
        shuffle_in_place(order, rng);
        return make_batches(ds, order, batch_size);
    };
}

inline Classifier train(const LabeledDataset& ds, const Architecture& arch, const TrainConfig& config,
                        std::uint64_t seed, TrainStats* stats = nullptr) {
    require(ds.n > 0, "train: empty dataset");
    arch.validate();
    require(arch.input_dim() == ds.d, "train: architecture input dim != dataset d");
    require(arch.output_dim() == ds.num_classes, "train: architecture output dim != dataset K");
    config.validate();
    require(config.batch_size <= ds.n, "train: batch_size exceeds dataset size");
    auto model = initialize<float>(arch, seed, config);
    const auto idx = full_slice(ds).indices;
    return run_sgd(std::move(model), shuffled_plan(ds, idx, config.batch_size, config.shuffle_seed ^ seed),
                   config, stats);
}

inline Classifier fine_tune(const Classifier& model, const EpochPlan& plan, const TrainConfig& config,
                            TrainStats* stats = nullptr) {
    return run_sgd(model, plan, config, stats);
}

inline double accuracy(const Classifier& m, const LabeledDataset& ds) {
    if (ds.n == 0) return 0.0;
    Activations<float> act;
    std::size_t ok = 0;
    for (std::size_t i = 0; i < ds.n; ++i) {
        forward_into(m, ds.row(i), act);
        ok += argmax<float>(act.post.back()) == ds.labels[i];
    }
    return static_cast<double>(ok) / static_cast<double>(ds.n);
}

// Cross-entropy of one input, via a double-precision log-softmax of the
// final-layer logits so that near-saturated losses keep their resolution.
inline double event_loss(const Classifier& m, std::span<const float> x, std::uint32_t label) {
    require(label < m.num_classes(), "event_loss: label out of range");
    Activations<float> act;
    forward_into(m, x, act);
    const auto& h = act.post[act.post.size() - 2];
    const auto& last = m.final_layer();
    std::vector<double> z(last.out);
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t o = 0; o < last.out; ++o) {
        double acc = last.bias[o];
        for (std::size_t i = 0; i < last.in; ++i) acc += static_cast<double>(last.weight[o * last.in + i]) * h[i];
        z[o] = acc;
        mx = std::max(mx, acc);
    }
    double sum = 0;
    for (double v : z) sum += std::exp(v - mx);
    return std::min(mx + std::log(sum) - z[label], -std::log(kLogClamp));
}

inline std::string model_digest(const Classifier& m) {
    std::uint64_t h = kFnvOffset;
    h = hash_values(m.arch.layer_sizes, h);
    for (const auto& l : m.layers) {
        h = hash_values(l.weight, h);
        h = hash_values(l.bias, h);
    }
    return "mdl-" + hex64(h);
}

// ---- persistence ----
// <path>: "PFMW", u32 version, f32 parameters (weight then bias per layer).
// <path>.json: architecture, train config, seed, format version.

inline constexpr char kModelMagic[4] = {'P', 'F', 'M', 'W'};
inline constexpr std::uint32_t kModelFormatVersion = 1;

inline nlohmann::json to_json(const TrainConfig& c) {
    return {{"epochs", c.epochs},
            {"batch_size", c.batch_size},
            {"learning_rate", c.learning_rate},
            {"shuffle_seed", c.shuffle_seed},
            {"frozen_layers", c.frozen_layers}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig c = {}) {
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.shuffle_seed = j.value("shuffle_seed", c.shuffle_seed);
    c.frozen_layers = j.value("frozen_layers", c.frozen_layers);
    return c;
}

inline std::filesystem::path sidecar_path(const std::filesystem::path& p) {
    return std::filesystem::path(p.string() + ".json");
}

inline void save_model(const std::filesystem::path& path, const Classifier& m) {
    {
        std::ofstream os(path, std::ios::binary);
        if (!os) throw Error("cannot open " + path.string() + " for writing");
        os.write(kModelMagic, 4);
        detail::put(os, kModelFormatVersion);
        detail::put_array(os, m.flat_parameters());
        if (!os) throw Error("write failed: " + path.string());
    }
    nlohmann::json j{{"arch", m.arch.layer_sizes},
                     {"train_config", to_json(m.train_config)},
                     {"seed", m.seed},
                     {"format_version", kModelFormatVersion}};
    std::ofstream js(sidecar_path(path));
    if (!js) throw Error("cannot open sidecar for " + path.string());
    js << j.dump(2) << "\n";
}

inline Classifier load_model(const std::filesystem::path& path) {
    std::ifstream js(sidecar_path(path));
    if (!js) throw FormatError("cannot open model sidecar " + sidecar_path(path).string());
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(js);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("model sidecar: ") + e.what());
    }
    if (j.value("format_version", 0u) != kModelFormatVersion) {
        throw VersionError("model sidecar: unsupported format version");
    }
    Architecture arch{j.at("arch").get<std::vector<std::size_t>>()};
    try {
        arch.validate();
    } catch (const ContractViolation& e) {
        throw FormatError(std::string("model sidecar: ") + e.what());
    }
    auto m = initialize<float>(arch, j.value("seed", std::uint64_t{0}),
                               train_config_from_json(j.value("train_config", nlohmann::json::object())));

    std::ifstream is(path, std::ios::binary);
    if (!is) throw Error("cannot open " + path.string());
    detail::Reader r(is, "pfmw");
    char magic[4];
    r.read(magic, 4);
    if (std::memcmp(magic, kModelMagic, 4) != 0) throw FormatError("pfmw: bad magic");
    const auto version = r.get<std::uint32_t>();
    if (version != kModelFormatVersion) {
        throw VersionError("pfmw: unsupported format version " + std::to_string(version));
    }
    if (detail::remaining_bytes(is) != m.parameter_count() * sizeof(float)) {
        throw FormatError("pfmw: parameter count does not match architecture");
    }
    std::vector<float> p;
    r.get_array(p, m.parameter_count());
    m.set_flat_parameters(p);
    if (!m.all_finite()) throw FormatError("pfmw: non-finite weights");
    return m;
}

}  // namespace pftrace
