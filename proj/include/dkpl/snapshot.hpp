#ifndef DKPL_SNAPSHOT_HPP
#define DKPL_SNAPSHOT_HPP

// Model snapshots: <stem>.json header (layout + counts) and <stem>.bin holding
// the arrays back to back as little-endian float64.

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "io.hpp"
#include "prefgp.hpp"

namespace dkpl {

struct F64Bundle {
    nlohmann::json header = nlohmann::json::object();
    std::vector<std::pair<std::string, std::vector<double>>> arrays;

    void add(const std::string& id, std::vector<double> v) { arrays.emplace_back(id, std::move(v)); }

    void add(const std::string& id, const Eigen::MatrixXd& m) {
        std::vector<double> v(static_cast<std::size_t>(m.size()));
        Eigen::Index k = 0;
        for (Eigen::Index r = 0; r < m.rows(); ++r)
            for (Eigen::Index c = 0; c < m.cols(); ++c) v[static_cast<std::size_t>(k++)] = m(r, c);
        add(id, std::move(v));
    }

    const std::vector<double>& get(const std::string& id) const {
        for (const auto& [k, v] : arrays)
            if (k == id) return v;
        throw FormatError("snapshot has no array '" + id + "'");
    }

    Eigen::MatrixXd matrix(const std::string& id, Eigen::Index rows, Eigen::Index cols) const {
        const auto& v = get(id);
        if (static_cast<Eigen::Index>(v.size()) != rows * cols)
            throw FormatError("snapshot array '" + id + "' has " + std::to_string(v.size()) + " values, expected " +
                              std::to_string(rows * cols));
        Eigen::MatrixXd m(rows, cols);
        Eigen::Index k = 0;
        for (Eigen::Index r = 0; r < rows; ++r)
            for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = v[static_cast<std::size_t>(k++)];
        return m;
    }

    Eigen::VectorXd vector(const std::string& id) const {
        const auto& v = get(id);
        return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
    }

    void write(const std::filesystem::path& dir, const std::string& stem) const {
        std::filesystem::create_directories(dir);
        nlohmann::json h = header;
        h["arrays"] = nlohmann::json::array();
        std::vector<double> flat;
        for (const auto& [id, v] : arrays) {
            h["arrays"].push_back({{"id", id}, {"offset", flat.size()}, {"count", v.size()}});
            flat.insert(flat.end(), v.begin(), v.end());
        }
        h["dtype"] = "f64le";
        h["data_file"] = stem + ".bin";
        io::write_f64(dir / (stem + ".bin"), flat);
        io::write_text(dir / (stem + ".json"), h.dump(2) + "\n");
    }

    static F64Bundle read(const std::filesystem::path& dir, const std::string& stem) {
        F64Bundle b;
        b.header = io::read_json(dir / (stem + ".json"));
        try {
            std::size_t total = 0;
            for (const auto& a : b.header.at("arrays")) total += a.at("count").get<std::size_t>();
            const auto flat = io::read_raw<double>(dir / b.header.value("data_file", stem + ".bin"), total, stem);
            for (const auto& a : b.header.at("arrays")) {
                const auto off = a.at("offset").get<std::size_t>();
                const auto cnt = a.at("count").get<std::size_t>();
                if (off + cnt > flat.size()) throw FormatError("snapshot array '" + a.at("id").get<std::string>() + "' out of range");
                b.arrays.emplace_back(a.at("id").get<std::string>(),
                                      std::vector<double>(flat.begin() + static_cast<std::ptrdiff_t>(off),
                                                          flat.begin() + static_cast<std::ptrdiff_t>(off + cnt)));
            }
            b.header.erase("arrays");
        } catch (const nlohmann::json::exception& e) {
            throw FormatError(std::string("snapshot header: ") + e.what());
        }
        return b;
    }
};

inline void add_model(F64Bundle& b, const PrefModel& model) {
    b.header["architecture"] = model.net.arch.to_json();
    b.header["kernel"] = model.hp.to_json();
    const Eigen::VectorXd flat = model.net.flat();
    b.add("network", std::vector<double>(flat.data(), flat.data() + flat.size()));
    if (!model.posterior) return;
    const auto& p = *model.posterior;
    b.header["posterior"] = {{"training_ids", p.training_ids},
                             {"n", p.latents.rows()},
                             {"latent_dim", p.latents.cols()},
                             {"comparisons", p.S.rows()},
                             {"evidence", p.evidence},
                             {"kernel", p.hp.to_json()},
                             {"architecture", p.net.arch.to_json()}};
    b.add("latents", p.latents);
    b.add("f", Eigen::MatrixXd(p.f));
    b.add("alpha", Eigen::MatrixXd(p.alpha));
    std::vector<double> ia(p.S.ia.begin(), p.S.ia.end()), ib(p.S.ib.begin(), p.S.ib.end());
    b.add("pair_a", std::move(ia));
    b.add("pair_b", std::move(ib));
    b.add("pair_scale", Eigen::MatrixXd(p.S.scale));
    b.add("B_chol", p.B_chol);
    const Eigen::VectorXd pflat = p.net.flat();
    b.add("posterior_network", std::vector<double>(pflat.data(), pflat.data() + pflat.size()));
}

inline PrefModel read_model(const F64Bundle& b) {
    PrefModel m;
    try {
        m.net.arch = Architecture::from_json(b.header.at("architecture"));
        m.net.assign(b.vector("network"));
        m.hp = KernelHyperparams::from_json(b.header.at("kernel"));
        if (b.header.contains("posterior")) {
            const auto& ph = b.header.at("posterior");
            PosteriorState p;
            p.training_ids = ph.at("training_ids").get<std::vector<std::size_t>>();
            const auto n = ph.at("n").get<Eigen::Index>();
            const auto d = ph.at("latent_dim").get<Eigen::Index>();
            const auto C = ph.at("comparisons").get<Eigen::Index>();
            p.latents = b.matrix("latents", n, d);
            p.f = b.vector("f");
            p.alpha = b.vector("alpha");
            for (double v : b.get("pair_a")) p.S.ia.push_back(static_cast<Eigen::Index>(v));
            for (double v : b.get("pair_b")) p.S.ib.push_back(static_cast<Eigen::Index>(v));
            p.S.scale = b.vector("pair_scale");
            p.B_chol = b.matrix("B_chol", C, C);
            p.hp = KernelHyperparams::from_json(ph.at("kernel"));
            p.net.arch = Architecture::from_json(ph.at("architecture"));
            p.net.assign(b.vector("posterior_network"));
            p.evidence = ph.at("evidence").get<double>();
            if (p.f.size() != n || p.alpha.size() != n || static_cast<Eigen::Index>(p.S.ia.size()) != C ||
                static_cast<Eigen::Index>(p.training_ids.size()) != n)
                throw FormatError("posterior arrays disagree with header counts");
            m.posterior = std::move(p);
        }
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("model snapshot: ") + e.what());
    }
    return m;
}

/// Standalone model snapshot for reuse on another region.
inline void save_model(const std::filesystem::path& dir, const PrefModel& model, int patch_window) {
    F64Bundle b;
    b.header["format"] = "dkpl-model";
    b.header["patch_window"] = patch_window;
    add_model(b, model);
    b.write(dir, "model");
}

struct LoadedModel {
    PrefModel model;
    int patch_window = 0;
};

inline LoadedModel load_model(const std::filesystem::path& dir) {
    const auto b = F64Bundle::read(dir, "model");
    if (b.header.value("format", "") != "dkpl-model") throw FormatError(dir.string() + " is not a model snapshot");
    LoadedModel lm;
    lm.model = read_model(b);
    lm.patch_window = b.header.at("patch_window").get<int>();
    if (!lm.model.posterior) throw FormatError("model snapshot carries no posterior");
    return lm;
}

} // namespace dkpl

#endif
