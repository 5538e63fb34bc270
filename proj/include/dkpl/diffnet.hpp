#ifndef DKPL_DIFFNET_HPP
#define DKPL_DIFFNET_HPP

// Dense feature extractor mapping an image patch to a low-dimensional latent
// vector. Forward and reverse passes are written out by hand so gradients can
// be chained with the kernel derivatives in prefgp.hpp.

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "errors.hpp"

namespace dkpl {

struct GridIndex {
    int row = 0;
    int col = 0;

    friend bool operator==(const GridIndex&, const GridIndex&) = default;
};

/// A window x window crop of the structure image, already scaled to [0, 1].
struct PatchTensor {
    Eigen::MatrixXd values;
    GridIndex center;

    int window() const { return static_cast<int>(values.rows()); }

    /// Row-major flattening used as network input.
    Eigen::VectorXd flatten() const {
        Eigen::VectorXd out(values.size());
        Eigen::Index k = 0;
        for (Eigen::Index r = 0; r < values.rows(); ++r)
            for (Eigen::Index c = 0; c < values.cols(); ++c) out[k++] = values(r, c);
        return out;
    }
};

enum class Activation { Tanh, Relu, Linear };

inline std::string to_string(Activation a) {
    switch (a) {
    case Activation::Tanh: return "tanh";
    case Activation::Relu: return "relu";
    case Activation::Linear: return "linear";
    }
    return "?";
}

inline Activation activation_from_string(const std::string& s) {
    if (s == "tanh") return Activation::Tanh;
    if (s == "relu") return Activation::Relu;
    if (s == "linear") return Activation::Linear;
    throw ConfigError("unknown activation '" + s + "'");
}

/// Layer sizes from input to latent. Hidden layers use `hidden_activation`,
/// the output layer is always linear.
struct Architecture {
    std::vector<int> layer_sizes;
    Activation hidden_activation = Activation::Tanh;

    int input_size() const { return layer_sizes.front(); }
    int latent_dim() const { return layer_sizes.back(); }
    std::size_t num_layers() const { return layer_sizes.size() - 1; }

    void validate() const {
        if (layer_sizes.size() < 2)
            throw ConfigError("architecture needs at least an input and a latent layer");
        for (int s : layer_sizes)
            if (s <= 0) throw ConfigError("architecture layer sizes must be positive");
    }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (std::size_t l = 0; l + 1 < layer_sizes.size(); ++l)
            n += static_cast<std::size_t>(layer_sizes[l + 1]) * (layer_sizes[l] + 1);
        return n;
    }

    /// flattened patch -> dense(hidden, tanh) -> dense(latent_dim, linear)
    static Architecture for_window(int window, int hidden = 16, int latent_dim = 2) {
        Architecture a{{window * window, hidden, latent_dim}, Activation::Tanh};
        a.validate();
        return a;
    }

    nlohmann::json to_json() const {
        return {{"layers", layer_sizes}, {"activation", to_string(hidden_activation)}};
    }

    static Architecture from_json(const nlohmann::json& j) {
        Architecture a;
        a.layer_sizes = j.at("layers").get<std::vector<int>>();
        a.hidden_activation = activation_from_string(j.value("activation", "tanh"));
        a.validate();
        return a;
    }
};

struct NetworkParams {
    Architecture arch;
    std::vector<Eigen::MatrixXd> weights; // layer l: out x in
    std::vector<Eigen::VectorXd> biases;

    int latent_dim() const { return arch.latent_dim(); }
    std::size_t size() const { return arch.parameter_count(); }

    /// Per layer: weights row-major, then biases.
    Eigen::VectorXd flat() const {
        Eigen::VectorXd out(static_cast<Eigen::Index>(size()));
        Eigen::Index k = 0;
        for (std::size_t l = 0; l < weights.size(); ++l) {
            for (Eigen::Index r = 0; r < weights[l].rows(); ++r)
                for (Eigen::Index c = 0; c < weights[l].cols(); ++c) out[k++] = weights[l](r, c);
            for (Eigen::Index r = 0; r < biases[l].size(); ++r) out[k++] = biases[l][r];
        }
        return out;
    }

    void assign(const Eigen::VectorXd& flat) {
        if (static_cast<std::size_t>(flat.size()) != size())
            throw InputError("flat parameter vector has " + std::to_string(flat.size()) +
                             " entries, architecture needs " + std::to_string(size()));
        shape_from_arch();
        Eigen::Index k = 0;
        for (std::size_t l = 0; l < weights.size(); ++l) {
            for (Eigen::Index r = 0; r < weights[l].rows(); ++r)
                for (Eigen::Index c = 0; c < weights[l].cols(); ++c) weights[l](r, c) = flat[k++];
            for (Eigen::Index r = 0; r < biases[l].size(); ++r) biases[l][r] = flat[k++];
        }
    }

    void shape_from_arch() {
        weights.resize(arch.num_layers());
        biases.resize(arch.num_layers());
        for (std::size_t l = 0; l < arch.num_layers(); ++l) {
            weights[l].resize(arch.layer_sizes[l + 1], arch.layer_sizes[l]);
            biases[l].resize(arch.layer_sizes[l + 1]);
        }
    }

    bool all_finite() const {
        for (std::size_t l = 0; l < weights.size(); ++l)
            if (!weights[l].allFinite() || !biases[l].allFinite()) return false;
        return true;
    }
};

/// Glorot-uniform weights, zero biases; deterministic given `seed`.
inline NetworkParams init_params(const Architecture& arch, std::uint64_t seed) {
    arch.validate();
    NetworkParams p;
    p.arch = arch;
    p.shape_from_arch();
    std::mt19937_64 rng(seed);
    for (std::size_t l = 0; l < arch.num_layers(); ++l) {
        const double fan_in = arch.layer_sizes[l];
        const double fan_out = arch.layer_sizes[l + 1];
        const double limit = std::sqrt(6.0 / (fan_in + fan_out));
        std::uniform_real_distribution<double> dist(-limit, limit);
        for (Eigen::Index r = 0; r < p.weights[l].rows(); ++r)
            for (Eigen::Index c = 0; c < p.weights[l].cols(); ++c) p.weights[l](r, c) = dist(rng);
        p.biases[l].setZero();
    }
    return p;
}

namespace detail {

inline void apply_activation(Activation a, Eigen::MatrixXd& m) {
    switch (a) {
    case Activation::Tanh: m = m.array().tanh(); break;
    case Activation::Relu: m = m.array().max(0.0); break;
    case Activation::Linear: break;
    }
}

// Derivative expressed through the activation output.
inline Eigen::MatrixXd activation_grad(Activation a, const Eigen::MatrixXd& out) {
    switch (a) {
    case Activation::Tanh: return (1.0 - out.array().square()).matrix();
    case Activation::Relu: return (out.array() > 0.0).cast<double>().matrix();
    case Activation::Linear: return Eigen::MatrixXd::Ones(out.rows(), out.cols());
    }
    return {};
}

// Activations for every layer, rows are samples. acts[0] is the input.
inline std::vector<Eigen::MatrixXd> forward_all(const NetworkParams& p, const Eigen::MatrixXd& inputs) {
    if (inputs.cols() != p.arch.input_size())
        throw InputError("patch has " + std::to_string(inputs.cols()) + " pixels, network expects " +
                         std::to_string(p.arch.input_size()));
    std::vector<Eigen::MatrixXd> acts;
    acts.reserve(p.weights.size() + 1);
    acts.push_back(inputs);
    for (std::size_t l = 0; l < p.weights.size(); ++l) {
        Eigen::MatrixXd z = acts.back() * p.weights[l].transpose();
        z.rowwise() += p.biases[l].transpose();
        if (l + 1 < p.weights.size()) apply_activation(p.arch.hidden_activation, z);
        acts.push_back(std::move(z));
    }
    return acts;
}

} // namespace detail

/// Stack flattened patches as rows.
inline Eigen::MatrixXd stack_patches(const std::vector<PatchTensor>& patches) {
    if (patches.empty()) return {};
    const Eigen::Index n = patches.front().values.size();
    Eigen::MatrixXd out(static_cast<Eigen::Index>(patches.size()), n);
    for (std::size_t i = 0; i < patches.size(); ++i) {
        if (patches[i].values.size() != n) throw InputError("patches differ in size");
        out.row(static_cast<Eigen::Index>(i)) = patches[i].flatten().transpose();
    }
    return out;
}

/// Latent vectors for a batch of flattened inputs (one per row).
inline Eigen::MatrixXd forward_batch(const NetworkParams& p, const Eigen::MatrixXd& inputs) {
    return detail::forward_all(p, inputs).back();
}

/// Gradient of sum_i upstream_i . z_i with respect to the flat parameters.
inline Eigen::VectorXd backward_batch(const NetworkParams& p, const Eigen::MatrixXd& inputs,
                                      const Eigen::MatrixXd& upstream) {
    if (upstream.rows() != inputs.rows() || upstream.cols() != p.latent_dim())
        throw InputError("upstream gradient shape does not match batch x latent_dim");
    const auto acts = detail::forward_all(p, inputs);
    const std::size_t L = p.weights.size();
    std::vector<Eigen::MatrixXd> dw(L);
    std::vector<Eigen::VectorXd> db(L);
    Eigen::MatrixXd delta = upstream;
    for (std::size_t l = L; l-- > 0;) {
        dw[l] = delta.transpose() * acts[l];
        db[l] = delta.colwise().sum().transpose();
        if (l > 0) {
            delta = (delta * p.weights[l]).cwiseProduct(detail::activation_grad(p.arch.hidden_activation, acts[l]));
        }
    }
    Eigen::VectorXd out(static_cast<Eigen::Index>(p.size()));
    Eigen::Index k = 0;
    for (std::size_t l = 0; l < L; ++l) {
        for (Eigen::Index r = 0; r < dw[l].rows(); ++r)
            for (Eigen::Index c = 0; c < dw[l].cols(); ++c) out[k++] = dw[l](r, c);
        for (Eigen::Index r = 0; r < db[l].size(); ++r) out[k++] = db[l][r];
    }
    return out;
}

inline Eigen::VectorXd forward_features(const NetworkParams& p, const PatchTensor& patch) {
    return forward_batch(p, patch.flatten().transpose()).row(0).transpose();
}

inline Eigen::VectorXd backward_features(const NetworkParams& p, const PatchTensor& patch,
                                         const Eigen::VectorXd& upstream) {
    if (upstream.size() != p.latent_dim())
        throw InputError("upstream has length " + std::to_string(upstream.size()) + ", latent_dim is " +
                         std::to_string(p.latent_dim()));
    return backward_batch(p, patch.flatten().transpose(), upstream.transpose());
}

} // namespace dkpl

#endif
