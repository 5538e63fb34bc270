#ifndef DKPL_DOMAINDATA_HPP
#define DKPL_DOMAINDATA_HPP

// Grid-registered datasets, patch extraction and the scalar analyses used as
// ground truth: hysteresis loop area, most-common vector-angle difference and
// a wall charge proxy.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numbers>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "diffnet.hpp"
#include "errors.hpp"
#include "io.hpp"

namespace dkpl {

enum class PayloadKind { Spectral, Vector3, None };

inline std::string to_string(PayloadKind k) {
    switch (k) {
    case PayloadKind::Spectral: return "spectral";
    case PayloadKind::Vector3: return "vector3";
    case PayloadKind::None: return "none";
    }
    return "?";
}

inline PayloadKind payload_from_string(const std::string& s) {
    if (s == "spectral") return PayloadKind::Spectral;
    if (s == "vector3") return PayloadKind::Vector3;
    if (s == "none") return PayloadKind::None;
    throw FormatError("unknown payload kind '" + s + "'");
}

struct HysteresisLoop {
    std::vector<double> voltage;
    std::vector<double> response;

    std::size_t size() const { return voltage.size(); }

    void validate() const {
        if (voltage.size() != response.size()) throw InputError("loop voltage and response lengths differ");
        if (voltage.size() < 4) throw InputError("hysteresis loop needs at least 4 points");
        for (std::size_t i = 0; i < voltage.size(); ++i)
            if (!std::isfinite(voltage[i]) || !std::isfinite(response[i]))
                throw InputError("hysteresis loop contains non-finite values");
    }
};

/// Per-pixel 3-vectors, row-major (pixel id = row * width + col).
struct VectorField {
    int height = 0;
    int width = 0;
    Eigen::MatrixXd v; // (height * width) x 3

    VectorField() = default;
    VectorField(int h, int w) : height(h), width(w), v(Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(h) * w, 3)) {}

    bool inside(int r, int c) const { return r >= 0 && r < height && c >= 0 && c < width; }
    Eigen::Index id(int r, int c) const { return static_cast<Eigen::Index>(r) * width + c; }
    Eigen::Vector3d at(int r, int c) const { return v.row(id(r, c)).transpose(); }
    void set(int r, int c, const Eigen::Vector3d& x) { v.row(id(r, c)) = x.transpose(); }
};

struct Dataset {
    std::string name;
    int height = 0;
    int width = 0;
    Eigen::MatrixXd structure; // height x width
    PayloadKind payload = PayloadKind::None;
    std::vector<double> voltage_waveform;
    Eigen::MatrixXd response; // (height * width) x waveform length, spectral only
    VectorField vectors;      // vector3 only
    nlohmann::json metadata = nlohmann::json::object();

    std::size_t size() const { return static_cast<std::size_t>(height) * width; }
    std::size_t id(GridIndex g) const { return static_cast<std::size_t>(g.row) * width + g.col; }
    GridIndex index(std::size_t id) const {
        return {static_cast<int>(id / width), static_cast<int>(id % width)};
    }

    HysteresisLoop loop(std::size_t id) const {
        if (payload != PayloadKind::Spectral) throw StateError("dataset has no spectral payload");
        HysteresisLoop l;
        l.voltage = voltage_waveform;
        l.response.resize(voltage_waveform.size());
        for (std::size_t k = 0; k < voltage_waveform.size(); ++k)
            l.response[k] = response(static_cast<Eigen::Index>(id), static_cast<Eigen::Index>(k));
        return l;
    }

    void validate() const {
        if (height <= 0 || width <= 0) throw FormatError("dataset grid must be non-empty");
        if (structure.rows() != height || structure.cols() != width)
            throw FormatError("structure grid does not match declared height x width");
        for (int r = 0; r < height; ++r)
            for (int c = 0; c < width; ++c)
                if (!std::isfinite(structure(r, c)))
                    throw DataError("non-finite structure value at pixel (" + std::to_string(r) + ", " +
                                    std::to_string(c) + ")");
        if (payload == PayloadKind::Spectral) {
            if (voltage_waveform.size() < 4) throw DataError("spectral loops need at least 4 points");
            for (double v : voltage_waveform)
                if (!std::isfinite(v)) throw DataError("voltage waveform contains non-finite values");
            if (response.rows() != static_cast<Eigen::Index>(size()) ||
                response.cols() != static_cast<Eigen::Index>(voltage_waveform.size()))
                throw FormatError("response payload does not match grid and waveform length");
            for (Eigen::Index i = 0; i < response.rows(); ++i)
                if (!response.row(i).allFinite()) {
                    const auto g = index(static_cast<std::size_t>(i));
                    throw DataError("non-finite response at pixel (" + std::to_string(g.row) + ", " +
                                    std::to_string(g.col) + ")");
                }
        } else if (payload == PayloadKind::Vector3) {
            if (vectors.height != height || vectors.width != width)
                throw FormatError("vector payload does not match grid");
            for (Eigen::Index i = 0; i < vectors.v.rows(); ++i)
                if (!vectors.v.row(i).allFinite()) {
                    const auto g = index(static_cast<std::size_t>(i));
                    throw DataError("non-finite vector at pixel (" + std::to_string(g.row) + ", " +
                                    std::to_string(g.col) + ")");
                }
        }
    }
};

// ---------------------------------------------------------------------------
// Container I/O: dataset.json + f32le row-major arrays

namespace detail {

inline std::size_t shape_count(const std::vector<int>& shape) {
    std::size_t n = 1;
    for (int s : shape) {
        if (s < 0) throw FormatError("negative array dimension");
        n *= static_cast<std::size_t>(s);
    }
    return n;
}

inline std::filesystem::path header_path(const std::filesystem::path& p) {
    return std::filesystem::is_directory(p) ? p / "dataset.json" : p;
}

} // namespace detail

/// Named float arrays sharing one grid, e.g. exported utility maps.
struct MapContainer {
    std::string name;
    int height = 0;
    int width = 0;
    std::vector<std::pair<std::string, std::vector<double>>> arrays; // each height * width

    const std::vector<double>& get(const std::string& id) const {
        for (const auto& [k, v] : arrays)
            if (k == id) return v;
        throw NotFoundError("no array '" + id + "' in container " + name);
    }
};

inline void write_container(const std::filesystem::path& dir, const std::string& name, int height, int width,
                            PayloadKind payload,
                            const std::vector<std::tuple<std::string, std::vector<int>, std::vector<double>>>& arrays,
                            const std::vector<double>& waveform = {},
                            const nlohmann::json& metadata = nlohmann::json::object(), bool png_previews = false) {
    std::filesystem::create_directories(dir);
    nlohmann::json h;
    h["name"] = name;
    h["height"] = height;
    h["width"] = width;
    h["payload"] = to_string(payload);
    h["arrays"] = nlohmann::json::array();
    for (const auto& [id, shape, data] : arrays) {
        if (detail::shape_count(shape) != data.size()) throw InputError("array '" + id + "' data does not match shape");
        const std::string file = id + ".f32";
        io::write_f32(dir / file, data);
        h["arrays"].push_back({{"id", id}, {"file", file}, {"shape", shape}, {"dtype", "f32le"}});
        if (png_previews && shape.size() == 2) io::write_png_preview(dir / (id + ".png"), data, shape[0], shape[1]);
    }
    h["voltage_waveform"] = waveform;
    if (!metadata.empty()) h["metadata"] = metadata;
    io::write_text(dir / "dataset.json", h.dump(2) + "\n");
}

inline void write_map_container(const std::filesystem::path& dir, const MapContainer& m, bool png_previews = false) {
    std::vector<std::tuple<std::string, std::vector<int>, std::vector<double>>> arrays;
    for (const auto& [id, v] : m.arrays) arrays.emplace_back(id, std::vector<int>{m.height, m.width}, v);
    write_container(dir, m.name, m.height, m.width, PayloadKind::None, arrays, {}, nlohmann::json::object(),
                    png_previews);
}

namespace detail {

struct RawContainer {
    nlohmann::json header;
    std::vector<std::tuple<std::string, std::vector<int>, std::vector<double>>> arrays;
};

inline RawContainer read_container(const std::filesystem::path& path) {
    const auto hp = header_path(path);
    RawContainer rc;
    rc.header = io::read_json(hp);
    const auto dir = hp.parent_path();
    try {
        for (const auto& a : rc.header.at("arrays")) {
            const auto id = a.at("id").get<std::string>();
            const auto dtype = a.value("dtype", std::string("f32le"));
            if (dtype != "f32le") throw FormatError("array '" + id + "' has unsupported dtype " + dtype);
            const auto shape = a.at("shape").get<std::vector<int>>();
            const auto raw = io::read_raw<float>(dir / a.at("file").get<std::string>(), shape_count(shape), id);
            rc.arrays.emplace_back(id, shape, std::vector<double>(raw.begin(), raw.end()));
        }
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(hp.string() + ": " + e.what());
    }
    return rc;
}

} // namespace detail

inline MapContainer read_map_container(const std::filesystem::path& path) {
    auto rc = detail::read_container(path);
    MapContainer m;
    m.name = rc.header.value("name", "");
    m.height = rc.header.at("height").get<int>();
    m.width = rc.header.at("width").get<int>();
    for (auto& [id, shape, data] : rc.arrays) m.arrays.emplace_back(id, std::move(data));
    return m;
}

/// Reads `dataset.json` (or the directory holding it) and validates every
/// invariant. Arrays: "structure" [H, W]; "response" [H, W, L] for spectral
/// payloads; "vectors" [H, W, 3] for vector3 payloads.
inline Dataset load_dataset(const std::filesystem::path& path) {
    auto rc = detail::read_container(path);
    Dataset ds;
    try {
        ds.name = rc.header.value("name", "");
        ds.height = rc.header.at("height").get<int>();
        ds.width = rc.header.at("width").get<int>();
        ds.payload = payload_from_string(rc.header.value("payload", std::string("none")));
        if (rc.header.contains("voltage_waveform"))
            ds.voltage_waveform = rc.header.at("voltage_waveform").get<std::vector<double>>();
        if (rc.header.contains("metadata")) ds.metadata = rc.header.at("metadata");
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("dataset header: ") + e.what());
    }
    if (ds.height <= 0 || ds.width <= 0) throw FormatError("dataset grid must be non-empty");
    const std::size_t n = ds.size();
    auto find = [&](const std::string& id) -> const std::tuple<std::string, std::vector<int>, std::vector<double>>* {
        for (const auto& a : rc.arrays)
            if (std::get<0>(a) == id) return &a;
        return nullptr;
    };
    const auto* st = find("structure");
    if (!st) throw FormatError("dataset has no 'structure' array");
    if (std::get<2>(*st).size() != n)
        throw FormatError("array 'structure' has " + std::to_string(std::get<2>(*st).size()) +
                          " values, grid has " + std::to_string(n));
    ds.structure.resize(ds.height, ds.width);
    for (int r = 0; r < ds.height; ++r)
        for (int c = 0; c < ds.width; ++c)
            ds.structure(r, c) = std::get<2>(*st)[static_cast<std::size_t>(r) * ds.width + c];

    if (ds.payload == PayloadKind::Spectral) {
        const auto* rs = find("response");
        if (!rs) throw FormatError("spectral dataset has no 'response' array");
        const std::size_t L = ds.voltage_waveform.size();
        if (L == 0 || std::get<2>(*rs).size() != n * L)
            throw FormatError("array 'response' does not hold " + std::to_string(L) + " samples per pixel");
        ds.response.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(L));
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t k = 0; k < L; ++k)
                ds.response(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) = std::get<2>(*rs)[i * L + k];
    } else if (ds.payload == PayloadKind::Vector3) {
        const auto* vs = find("vectors");
        if (!vs) throw FormatError("vector3 dataset has no 'vectors' array");
        if (std::get<2>(*vs).size() != n * 3) throw FormatError("array 'vectors' does not hold 3 values per pixel");
        ds.vectors = VectorField(ds.height, ds.width);
        for (std::size_t i = 0; i < n; ++i)
            for (int k = 0; k < 3; ++k) ds.vectors.v(static_cast<Eigen::Index>(i), k) = std::get<2>(*vs)[i * 3 + k];
    }
    ds.validate();
    return ds;
}

inline void save_dataset(const Dataset& ds, const std::filesystem::path& dir, bool png_previews = false) {
    ds.validate();
    std::vector<std::tuple<std::string, std::vector<int>, std::vector<double>>> arrays;
    std::vector<double> st(ds.size());
    for (int r = 0; r < ds.height; ++r)
        for (int c = 0; c < ds.width; ++c) st[static_cast<std::size_t>(r) * ds.width + c] = ds.structure(r, c);
    arrays.emplace_back("structure", std::vector<int>{ds.height, ds.width}, std::move(st));
    if (ds.payload == PayloadKind::Spectral) {
        const auto L = static_cast<int>(ds.voltage_waveform.size());
        std::vector<double> resp(ds.size() * L);
        for (std::size_t i = 0; i < ds.size(); ++i)
            for (int k = 0; k < L; ++k) resp[i * L + k] = ds.response(static_cast<Eigen::Index>(i), k);
        arrays.emplace_back("response", std::vector<int>{ds.height, ds.width, L}, std::move(resp));
    } else if (ds.payload == PayloadKind::Vector3) {
        std::vector<double> vec(ds.size() * 3);
        for (std::size_t i = 0; i < ds.size(); ++i)
            for (int k = 0; k < 3; ++k) vec[i * 3 + k] = ds.vectors.v(static_cast<Eigen::Index>(i), k);
        arrays.emplace_back("vectors", std::vector<int>{ds.height, ds.width, 3}, std::move(vec));
    }
    write_container(dir, ds.name, ds.height, ds.width, ds.payload, arrays, ds.voltage_waveform, ds.metadata,
                    png_previews);
}

// ---------------------------------------------------------------------------
// Patches

/// Global min/max used to scale every patch of one dataset.
struct PatchScale {
    double lo = 0.0;
    double hi = 1.0;

    static PatchScale of(const Eigen::MatrixXd& grid) { return {grid.minCoeff(), grid.maxCoeff()}; }

    double apply(double v) const { return hi > lo ? std::clamp((v - lo) / (hi - lo), 0.0, 1.0) : 0.5; }
};

namespace detail {

// Mirror reflection without repeating the edge pixel.
inline int reflect(int i, int n) {
    if (n == 1) return 0;
    const int period = 2 * (n - 1);
    i %= period;
    if (i < 0) i += period;
    return i >= n ? period - i : i;
}

} // namespace detail

inline PatchTensor extract_patch(const Eigen::MatrixXd& grid, GridIndex center, int window, const PatchScale& scale) {
    if (window < 1 || window % 2 == 0) throw ConfigError("patch window must be odd, got " + std::to_string(window));
    if (center.row < 0 || center.row >= grid.rows() || center.col < 0 || center.col >= grid.cols())
        throw InputError("patch center outside grid");
    const int h = window / 2;
    const int H = static_cast<int>(grid.rows()), W = static_cast<int>(grid.cols());
    PatchTensor p;
    p.center = center;
    p.values.resize(window, window);
    for (int dr = -h; dr <= h; ++dr)
        for (int dc = -h; dc <= h; ++dc)
            p.values(dr + h, dc + h) =
                scale.apply(grid(detail::reflect(center.row + dr, H), detail::reflect(center.col + dc, W)));
    return p;
}

inline PatchTensor extract_patch(const Eigen::MatrixXd& grid, GridIndex center, int window) {
    return extract_patch(grid, center, window, PatchScale::of(grid));
}

/// Flattened patches for every pixel, one row per pixel id.
inline Eigen::MatrixXd all_patch_inputs(const Eigen::MatrixXd& grid, int window) {
    const auto scale = PatchScale::of(grid);
    const int H = static_cast<int>(grid.rows()), W = static_cast<int>(grid.cols());
    Eigen::MatrixXd out(static_cast<Eigen::Index>(H) * W, static_cast<Eigen::Index>(window) * window);
    for (int r = 0; r < H; ++r)
        for (int c = 0; c < W; ++c)
            out.row(static_cast<Eigen::Index>(r) * W + c) = extract_patch(grid, {r, c}, window, scale).flatten().transpose();
    return out;
}

// ---------------------------------------------------------------------------
// Scalar analyses

/// Absolute shoelace area of the polygon through the loop points, closed
/// last -> first.
inline double loop_area(const HysteresisLoop& loop) {
    loop.validate();
    const std::size_t n = loop.size();
    // Coordinates relative to the first point; a flat response then sums to exactly zero.
    const double v0 = loop.voltage[0], r0 = loop.response[0];
    double twice = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t j = (i + 1) % n;
        twice += (loop.voltage[i] - v0) * (loop.response[j] - r0) - (loop.voltage[j] - v0) * (loop.response[i] - r0);
    }
    return 0.5 * std::abs(twice);
}

/// (v - min) / (max - min); a constant input maps to 0.5.
inline std::vector<double> normalize_scalars(const std::vector<double>& values) {
    if (values.empty()) throw InputError("normalize_scalars needs a non-empty input");
    const auto [mn, mx] = std::minmax_element(values.begin(), values.end());
    const double lo = *mn, hi = *mx;
    std::vector<double> out(values.size(), 0.5);
    if (hi > lo)
        for (std::size_t i = 0; i < values.size(); ++i) out[i] = (values[i] - lo) / (hi - lo);
    return out;
}

/// Counts of values in [0, 1] falling into `bins` equal-width bins; 1.0 lands
/// in the last bin.
inline std::vector<int> unit_histogram(const std::vector<double>& values, int bins = 10) {
    std::vector<int> h(static_cast<std::size_t>(bins), 0);
    for (double v : values) {
        if (!std::isfinite(v)) continue;
        int k = static_cast<int>(std::floor(std::clamp(v, 0.0, 1.0) * bins));
        h[static_cast<std::size_t>(std::min(k, bins - 1))]++;
    }
    return h;
}

struct AngleConfig {
    int radius = 5;
    double bin_width = 5.0;

    void validate() const {
        if (radius < 1) throw ConfigError("angle radius must be >= 1");
        if (!(bin_width > 0.0 && bin_width <= 180.0)) throw ConfigError("angle bin width must lie in (0, 180]");
    }
};

/// Angle between two vectors in degrees, or nullopt if either is zero.
inline std::optional<double> vector_angle_deg(const Eigen::Vector3d& u, const Eigen::Vector3d& v) {
    const double cross = u.cross(v).norm();
    const double dot = u.dot(v);
    if (u.squaredNorm() == 0.0 || v.squaredNorm() == 0.0) return std::nullopt;
    return std::atan2(cross, dot) * 180.0 / std::numbers::pi;
}

/// Histogram of angles between vectors at point + o and point - o for every
/// offset o in the upper half-disk of `radius`; returns the centre of the
/// most populated bin (smaller angle wins ties).
inline double characteristic_angle(const VectorField& field, GridIndex point, const AngleConfig& cfg = {}) {
    cfg.validate();
    if (!field.inside(point.row, point.col)) throw InputError("point outside vector field");
    const int nbins = static_cast<int>(std::ceil(180.0 / cfg.bin_width - 1e-12));
    std::vector<int> hist(static_cast<std::size_t>(nbins), 0);
    int support = 0;
    const int R = cfg.radius;
    for (int dr = 0; dr <= R; ++dr)
        for (int dc = -R; dc <= R; ++dc) {
            if (dr == 0 && dc <= 0) continue;
            if (dr * dr + dc * dc > R * R) continue;
            const int r1 = point.row + dr, c1 = point.col + dc;
            const int r2 = point.row - dr, c2 = point.col - dc;
            if (!field.inside(r1, c1) || !field.inside(r2, c2)) continue;
            const auto ang = vector_angle_deg(field.at(r1, c1), field.at(r2, c2));
            if (!ang) continue;
            const int k = std::min(static_cast<int>(std::floor(*ang / cfg.bin_width)), nbins - 1);
            hist[static_cast<std::size_t>(k)]++;
            ++support;
        }
    if (support == 0)
        throw InsufficientSupportError("no symmetric vector pair around (" + std::to_string(point.row) + ", " +
                                       std::to_string(point.col) + ") within radius " + std::to_string(R));
    const auto best = std::max_element(hist.begin(), hist.end()) - hist.begin();
    return std::min((static_cast<double>(best) + 0.5) * cfg.bin_width, 180.0);
}

struct WallCharge {
    double value = 0.0; // +1 tail-to-tail (diverging), -1 head-to-head (converging)
    bool no_wall = false;
};

/// Divergence-sign proxy for the bound charge of a nearby wall. The wall normal
/// is the principal direction of the in-plane polarization-angle gradient
/// inside `radius`; the result averages
/// (P(p + t n) - P(p - t n)) . n / (|P(p + t n)| + |P(p - t n)|) over t = 1..radius.
inline WallCharge wall_charge_character(const VectorField& field, GridIndex point, int radius,
                                        double min_gradient = 1e-6) {
    if (radius < 1) throw ConfigError("wall charge radius must be >= 1");
    if (!field.inside(point.row, point.col)) throw InputError("point outside vector field");
    auto phase = [&](int r, int c) {
        const auto p = field.at(r, c);
        return std::atan2(p.y(), p.x());
    };
    auto wrap = [](double a) {
        constexpr double pi = std::numbers::pi;
        a = std::fmod(a + pi, 2.0 * pi);
        if (a < 0.0) a += 2.0 * pi;
        return a - pi;
    };
    double txx = 0.0, txy = 0.0, tyy = 0.0;
    int count = 0;
    for (int dr = -radius; dr <= radius; ++dr)
        for (int dc = -radius; dc <= radius; ++dc) {
            if (dr * dr + dc * dc > radius * radius) continue;
            const int r = point.row + dr, c = point.col + dc;
            if (!field.inside(r, c)) continue;
            const double gx = field.inside(r, c + 1) ? wrap(phase(r, c + 1) - phase(r, c)) : 0.0;
            const double gy = field.inside(r + 1, c) ? wrap(phase(r + 1, c) - phase(r, c)) : 0.0;
            txx += gx * gx;
            txy += gx * gy;
            tyy += gy * gy;
            ++count;
        }
    WallCharge out;
    if (count == 0 || (txx + tyy) / count < min_gradient) {
        out.no_wall = true;
        return out;
    }
    // principal eigenvector of [[txx, txy], [txy, tyy]]
    const double theta = 0.5 * std::atan2(2.0 * txy, txx - tyy);
    double nx = std::cos(theta), ny = std::sin(theta);
    if (std::abs(nx) < std::abs(ny) ? ny < 0.0 : nx < 0.0) {
        nx = -nx;
        ny = -ny;
    }
    double acc = 0.0;
    int used = 0;
    for (int t = 1; t <= radius; ++t) {
        const int rp = point.row + static_cast<int>(std::lround(t * ny));
        const int cp = point.col + static_cast<int>(std::lround(t * nx));
        const int rm = point.row - static_cast<int>(std::lround(t * ny));
        const int cm = point.col - static_cast<int>(std::lround(t * nx));
        if (!field.inside(rp, cp) || !field.inside(rm, cm)) continue;
        const auto pp = field.at(rp, cp), pm = field.at(rm, cm);
        const double denom = pp.norm() + pm.norm();
        if (denom == 0.0) continue;
        acc += ((pp.x() - pm.x()) * nx + (pp.y() - pm.y()) * ny) / denom;
        ++used;
    }
    if (used == 0) {
        out.no_wall = true;
        return out;
    }
    out.value = std::clamp(acc / used, -1.0, 1.0);
    return out;
}

// ---------------------------------------------------------------------------
// Whole-grid maps (row-major, one value per pixel id)

enum class GroundTruthMap { LoopArea, CharAngle, WallCharge };

inline std::string to_string(GroundTruthMap m) {
    switch (m) {
    case GroundTruthMap::LoopArea: return "loop_area";
    case GroundTruthMap::CharAngle: return "char_angle";
    case GroundTruthMap::WallCharge: return "wall_charge";
    }
    return "?";
}

inline GroundTruthMap ground_truth_from_string(const std::string& s) {
    if (s == "loop_area") return GroundTruthMap::LoopArea;
    if (s == "char_angle") return GroundTruthMap::CharAngle;
    if (s == "wall_charge") return GroundTruthMap::WallCharge;
    throw ConfigError("unknown analysis map '" + s + "'");
}

inline std::vector<double> loop_area_map(const Dataset& ds) {
    std::vector<double> out(ds.size());
    for (std::size_t i = 0; i < ds.size(); ++i) out[i] = loop_area(ds.loop(i));
    return out;
}

/// Pixels without symmetric support get NaN.
inline std::vector<double> char_angle_map(const VectorField& field, const AngleConfig& cfg = {}) {
    std::vector<double> out(static_cast<std::size_t>(field.height) * field.width);
    for (int r = 0; r < field.height; ++r)
        for (int c = 0; c < field.width; ++c) {
            try {
                out[static_cast<std::size_t>(field.id(r, c))] = characteristic_angle(field, {r, c}, cfg);
            } catch (const InsufficientSupportError&) {
                out[static_cast<std::size_t>(field.id(r, c))] = std::nan("");
            }
        }
    return out;
}

inline std::vector<double> wall_charge_map(const VectorField& field, int radius = 3) {
    std::vector<double> out(static_cast<std::size_t>(field.height) * field.width);
    for (int r = 0; r < field.height; ++r)
        for (int c = 0; c < field.width; ++c)
            out[static_cast<std::size_t>(field.id(r, c))] = wall_charge_character(field, {r, c}, radius).value;
    return out;
}

inline std::vector<double> analysis_map(const Dataset& ds, GroundTruthMap kind, const AngleConfig& angle = {},
                                        int charge_radius = 3) {
    switch (kind) {
    case GroundTruthMap::LoopArea:
        if (ds.payload != PayloadKind::Spectral) throw ConfigError("loop_area needs a spectral dataset");
        return loop_area_map(ds);
    case GroundTruthMap::CharAngle:
        if (ds.payload != PayloadKind::Vector3) throw ConfigError("char_angle needs a vector3 dataset");
        return char_angle_map(ds.vectors, angle);
    case GroundTruthMap::WallCharge:
        if (ds.payload != PayloadKind::Vector3) throw ConfigError("wall_charge needs a vector3 dataset");
        return wall_charge_map(ds.vectors, charge_radius);
    }
    return {};
}

} // namespace dkpl

#endif
