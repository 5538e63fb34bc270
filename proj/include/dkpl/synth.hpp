#ifndef DKPL_SYNTH_HPP
#define DKPL_SYNTH_HPP

// Synthetic datasets standing in for measured scans: a striped film with
// per-pixel hysteresis loops, rhombohedral domains with 71/180 degree walls,
// and curved charged walls.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <vector>

#include <Eigen/Dense>

#include "domaindata.hpp"

namespace dkpl::synth {

struct StripeOptions {
    int height = 32;
    int width = 32;
    double period = 12.0;     // stripe period in pixels
    double slope = 0.5;       // stripe tilt (column shift per row)
    double sharpness = 3.0;   // domain contrast; larger -> more two-level
    double coercive_noise = 0.02;
    double image_noise = 0.03;
    int loop_points = 32;
    std::uint64_t seed = 1;
};

/// Striped film: "c-domain" stripes with wide loops alternating with
/// "a-domain" stripes with nearly closed loops. The structure image is an
/// amplitude map carrying the same stripes plus noise.
inline Dataset stripe_loops(const StripeOptions& o = {}) {
    std::mt19937_64 rng(o.seed);
    std::normal_distribution<double> gauss(0.0, 1.0);
    Dataset ds;
    ds.name = "synthetic-stripes";
    ds.height = o.height;
    ds.width = o.width;
    ds.payload = PayloadKind::Spectral;
    ds.structure.resize(o.height, o.width);
    const int half = o.loop_points / 2;
    for (int k = 0; k < half; ++k) ds.voltage_waveform.push_back(1.0 - 2.0 * k / (half - 1));
    for (int k = 0; k < half; ++k) ds.voltage_waveform.push_back(-1.0 + 2.0 * k / (half - 1));
    ds.response.resize(static_cast<Eigen::Index>(ds.size()), o.loop_points);
    for (int r = 0; r < o.height; ++r)
        for (int c = 0; c < o.width; ++c) {
            const double phase = 2.0 * std::numbers::pi * (c + o.slope * r) / o.period;
            const double u = 0.5 * (1.0 + std::tanh(o.sharpness * std::sin(phase)));
            ds.structure(r, c) = 0.2 + 0.8 * u + o.image_noise * gauss(rng);
            const double vc = std::max(0.0, 0.05 + 0.6 * u + o.coercive_noise * gauss(rng));
            const auto id = static_cast<Eigen::Index>(ds.id({r, c}));
            for (int k = 0; k < o.loop_points; ++k) {
                const double v = ds.voltage_waveform[static_cast<std::size_t>(k)];
                const double shift = k < half ? vc : -vc;
                ds.response(id, k) = std::tanh((v + shift) / 0.15);
            }
        }
    ds.metadata = {{"units", {{"voltage", "V"}, {"response", "a.u."}}},
                   {"response_channel", "synthetic piezoresponse"},
                   {"provenance", "dkpl::synth::stripe_loops"}};
    return ds;
}

/// Unit rhombohedral polarization directions <111>.
inline Eigen::Vector3d rhombo(int sx, int sy, int sz) { return Eigen::Vector3d(sx, sy, sz) / std::sqrt(3.0); }

struct WallOptions {
    int height = 32;
    int width = 48;
    double domain_width = 8.0;
    double slope = 0.25;     // wall tilt (column shift per row)
    double wall_width = 0.7; // tanh half-width of the wall profile
    double image_noise = 0.02;
    std::uint64_t seed = 1;
};

/// Domains A | B | C | D | A ... along x with A=[111], B=[11-1], C=[-1-11],
/// D=[-1-1-1]: walls alternate between ~71 and 180 degrees. The structure
/// image is the total amplitude, which dips deeply at 180 degree walls.
inline Dataset rhombohedral_walls(const WallOptions& o = {}) {
    std::mt19937_64 rng(o.seed);
    std::normal_distribution<double> gauss(0.0, 1.0);
    const Eigen::Vector3d seq[4] = {rhombo(1, 1, 1), rhombo(1, 1, -1), rhombo(-1, -1, 1), rhombo(-1, -1, -1)};
    Dataset ds;
    ds.name = "synthetic-rhombohedral-walls";
    ds.height = o.height;
    ds.width = o.width;
    ds.payload = PayloadKind::Vector3;
    ds.vectors = VectorField(o.height, o.width);
    ds.structure.resize(o.height, o.width);
    for (int r = 0; r < o.height; ++r)
        for (int c = 0; c < o.width; ++c) {
            const double x = c - o.slope * r + o.domain_width * 0.5;
            const int k = static_cast<int>(std::floor(x / o.domain_width));
            const double local = x - k * o.domain_width; // position inside domain k
            auto dom = [&](int i) { return seq[((i % 4) + 4) % 4]; };
            Eigen::Vector3d p;
            if (local < o.domain_width * 0.5) {
                const double t = 0.5 * (1.0 + std::tanh(local / o.wall_width));
                p = (1.0 - t) * dom(k - 1) + t * dom(k);
            } else {
                const double t = 0.5 * (1.0 + std::tanh((local - o.domain_width) / o.wall_width));
                p = (1.0 - t) * dom(k) + t * dom(k + 1);
            }
            ds.vectors.set(r, c, p);
            ds.structure(r, c) = p.norm() + o.image_noise * gauss(rng);
        }
    ds.metadata = {{"units", {{"vectors", "a.u."}}}, {"provenance", "dkpl::synth::rhombohedral_walls"}};
    return ds;
}

struct ChargedWallOptions {
    int height = 32;
    int width = 32;
    double amplitude = 4.0; // wall meander in pixels
    double wavelength = 24.0;
    double image_noise = 0.02;
    std::uint64_t seed = 1;
};

/// In-plane +x / -x domains separated by meandering walls; walls alternate
/// head-to-head and tail-to-tail, and their charge varies with the local wall
/// orientation. The structure image is the x component (phase-like contrast).
inline Dataset charged_walls(const ChargedWallOptions& o = {}) {
    std::mt19937_64 rng(o.seed);
    std::normal_distribution<double> gauss(0.0, 1.0);
    Dataset ds;
    ds.name = "synthetic-charged-walls";
    ds.height = o.height;
    ds.width = o.width;
    ds.payload = PayloadKind::Vector3;
    ds.vectors = VectorField(o.height, o.width);
    ds.structure.resize(o.height, o.width);
    const double w1 = o.width / 3.0, w2 = 2.0 * o.width / 3.0;
    for (int r = 0; r < o.height; ++r) {
        const double m = o.amplitude * std::sin(2.0 * std::numbers::pi * r / o.wavelength);
        for (int c = 0; c < o.width; ++c) {
            // +x left, -x middle (head-to-head at wall 1), +x right (tail-to-tail at wall 2)
            const double s1 = std::tanh((c - (w1 + m)) / 0.8);
            const double s2 = std::tanh((c - (w2 - m)) / 0.8);
            const double px = 1.0 - (s1 + 1.0) + (s2 + 1.0);
            const Eigen::Vector3d p(std::clamp(px, -1.0, 1.0), 0.0, 0.1);
            ds.vectors.set(r, c, p);
            ds.structure(r, c) = p.x() + o.image_noise * gauss(rng);
        }
    }
    ds.metadata = {{"units", {{"vectors", "a.u."}}}, {"provenance", "dkpl::synth::charged_walls"}};
    return ds;
}

} // namespace dkpl::synth

#endif
