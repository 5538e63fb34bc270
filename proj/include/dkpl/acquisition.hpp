#ifndef DKPL_ACQUISITION_HPP
#define DKPL_ACQUISITION_HPP

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "errors.hpp"

namespace dkpl {

enum class Strategy { UcbPair, UcbPlusMaxVariance };

inline std::string to_string(Strategy s) {
    return s == Strategy::UcbPair ? "ucb_pair" : "ucb_plus_max_variance";
}

inline Strategy strategy_from_string(const std::string& s) {
    if (s == "ucb_pair") return Strategy::UcbPair;
    if (s == "ucb_plus_max_variance") return Strategy::UcbPlusMaxVariance;
    throw ConfigError("unknown acquisition strategy '" + s + "'");
}

/// beta over an inclusive range of 1-based step indices; open-ended when
/// `last` is empty.
struct BetaRange {
    int first = 1;
    std::optional<int> last;
    double beta = 5.0;
};

struct AcquisitionConfig {
    std::vector<BetaRange> beta_schedule{BetaRange{1, std::nullopt, 5.0}};
    Strategy strategy = Strategy::UcbPair;
    bool exclude_measured = true;

    /// Ranges must start at step 1, be contiguous and non-overlapping.
    /// `n_steps` (when given) must be covered.
    void validate(std::optional<int> n_steps = std::nullopt) const {
        if (beta_schedule.empty()) throw ConfigError("beta_schedule is empty");
        int expect = 1;
        for (std::size_t i = 0; i < beta_schedule.size(); ++i) {
            const auto& r = beta_schedule[i];
            if (!(r.beta >= 0.0) || !std::isfinite(r.beta)) throw ConfigError("beta must be finite and >= 0");
            if (r.first != expect)
                throw ConfigError("beta_schedule range starting at step " + std::to_string(r.first) +
                                  " leaves a gap or overlap (expected " + std::to_string(expect) + ")");
            if (!r.last) {
                if (i + 1 != beta_schedule.size()) throw ConfigError("only the last beta range may be open-ended");
                return;
            }
            if (*r.last < r.first) throw ConfigError("beta range ends before it starts");
            expect = *r.last + 1;
        }
        if (n_steps && *n_steps >= expect)
            throw ConfigError("beta_schedule covers steps 1.." + std::to_string(expect - 1) + " but the run has " +
                              std::to_string(*n_steps) + " steps");
    }

    double beta_at(int step) const {
        for (const auto& r : beta_schedule)
            if (step >= r.first && (!r.last || step <= *r.last)) return r.beta;
        throw ConfigError("no beta defined for step " + std::to_string(step));
    }

    nlohmann::json to_json() const {
        nlohmann::json sched = nlohmann::json::array();
        for (const auto& r : beta_schedule) {
            nlohmann::json steps = nlohmann::json::array({r.first});
            steps.push_back(r.last ? nlohmann::json(*r.last) : nlohmann::json(nullptr));
            sched.push_back({{"steps", steps}, {"beta", r.beta}});
        }
        return {{"beta_schedule", sched}, {"strategy", to_string(strategy)}, {"exclude_measured", exclude_measured}};
    }

    static AcquisitionConfig from_json(const nlohmann::json& j) {
        AcquisitionConfig c;
        if (j.contains("beta_schedule")) {
            c.beta_schedule.clear();
            for (const auto& e : j.at("beta_schedule")) {
                const auto& steps = e.at("steps");
                if (!steps.is_array() || steps.size() != 2) throw ConfigError("beta range 'steps' must be [first, last]");
                BetaRange r;
                r.first = steps[0].get<int>();
                if (!steps[1].is_null()) r.last = steps[1].get<int>();
                r.beta = e.at("beta").get<double>();
                c.beta_schedule.push_back(r);
            }
        } else if (j.contains("beta")) {
            c.beta_schedule = {BetaRange{1, std::nullopt, j.at("beta").get<double>()}};
        }
        if (j.contains("strategy")) c.strategy = strategy_from_string(j.at("strategy").get<std::string>());
        c.exclude_measured = j.value("exclude_measured", true);
        c.validate();
        return c;
    }
};

/// Unordered candidate pair, stored with the smaller id first.
struct CandidatePair {
    std::size_t lo = 0;
    std::size_t hi = 0;

    static CandidatePair of(std::size_t a, std::size_t b) { return a < b ? CandidatePair{a, b} : CandidatePair{b, a}; }
    friend bool operator==(const CandidatePair&, const CandidatePair&) = default;
    friend auto operator<=>(const CandidatePair&, const CandidatePair&) = default;
};

/// Orientation matters for presentation: `a` is shown first.
struct ComparisonRequest {
    std::size_t a = 0;
    std::size_t b = 0;

    CandidatePair key() const { return CandidatePair::of(a, b); }
};

struct SelectionResult {
    std::size_t first = 0;
    std::size_t second = 0;
    double beta = 0.0;
};

/// mean + sqrt(beta) * sqrt(variance)
inline Eigen::VectorXd ucb_scores(const Eigen::VectorXd& mean, const Eigen::VectorXd& variance, double beta) {
    if (mean.size() != variance.size()) throw InputError("mean and variance lengths differ");
    if (!(beta >= 0.0)) throw InputError("beta must be >= 0");
    if ((variance.array() < 0.0).any()) throw InputError("negative variance passed to ucb_scores");
    return mean + std::sqrt(beta) * variance.cwiseSqrt();
}

namespace detail {

// Highest score among allowed ids; lowest id on ties.
inline std::optional<std::size_t> argmax_allowed(const Eigen::VectorXd& score, const std::vector<bool>& blocked) {
    std::optional<std::size_t> best;
    for (Eigen::Index i = 0; i < score.size(); ++i) {
        const auto id = static_cast<std::size_t>(i);
        if (id < blocked.size() && blocked[id]) continue;
        if (!best || score[i] > score[static_cast<Eigen::Index>(*best)]) best = id;
    }
    return best;
}

} // namespace detail

/// Picks the next two candidates. `measured[i]` marks grid ids already measured.
inline SelectionResult select_pair(const Eigen::VectorXd& mean, const Eigen::VectorXd& variance,
                                   const AcquisitionConfig& cfg, const std::vector<bool>& measured, int step) {
    const double beta = cfg.beta_at(step);
    const Eigen::VectorXd score = ucb_scores(mean, variance, beta);
    std::vector<bool> blocked(static_cast<std::size_t>(mean.size()), false);
    if (cfg.exclude_measured)
        for (std::size_t i = 0; i < blocked.size() && i < measured.size(); ++i) blocked[i] = measured[i];
    const auto available = std::count(blocked.begin(), blocked.end(), false);
    if (available < 2)
        throw ExhaustionSignal("fewer than two unmeasured candidates remain (" + std::to_string(available) + ")");

    SelectionResult sel;
    sel.beta = beta;
    sel.first = *detail::argmax_allowed(score, blocked);
    blocked[sel.first] = true;
    if (cfg.strategy == Strategy::UcbPair)
        sel.second = *detail::argmax_allowed(score, blocked);
    else
        sel.second = *detail::argmax_allowed(variance, blocked);
    return sel;
}

/// Highest posterior mean among measured candidates, lowest id on ties.
inline std::size_t current_best(const Eigen::VectorXd& mean, const std::vector<bool>& measured) {
    std::vector<bool> blocked(static_cast<std::size_t>(mean.size()), true);
    bool any = false;
    for (std::size_t i = 0; i < blocked.size() && i < measured.size(); ++i)
        if (measured[i]) {
            blocked[i] = false;
            any = true;
        }
    if (!any) throw StateError("current_best requires at least one measured candidate");
    return *detail::argmax_allowed(mean, blocked);
}

/// (first, second), (first, best), (second, best), dropping self-pairs and
/// duplicates.
inline std::vector<ComparisonRequest> build_comparison_requests(std::size_t first, std::size_t second,
                                                                std::size_t best) {
    if (first == second) throw InputError("selected candidates must differ");
    std::vector<ComparisonRequest> out{{first, second}};
    for (auto [a, b] : {std::pair{first, best}, std::pair{second, best}}) {
        if (a == b) continue;
        const auto k = CandidatePair::of(a, b);
        if (std::none_of(out.begin(), out.end(), [&](const ComparisonRequest& r) { return r.key() == k; }))
            out.push_back({a, b});
    }
    return out;
}

} // namespace dkpl

#endif
