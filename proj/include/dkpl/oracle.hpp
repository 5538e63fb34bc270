#ifndef DKPL_ORACLE_HPP
#define DKPL_ORACLE_HPP

// Synthetic expert: judges a pair by comparing ground-truth scalars.

#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <sstream>
#include <string>

#include <nlohmann/json.hpp>

#include "errors.hpp"
#include "prefgp.hpp"

namespace dkpl {

enum class Confidence { Weak, Moderate, Strong };

inline std::string to_string(Confidence c) {
    switch (c) {
    case Confidence::Weak: return "WEAK";
    case Confidence::Moderate: return "MODERATE";
    case Confidence::Strong: return "STRONG";
    }
    return "?";
}

inline Confidence confidence_from_string(const std::string& s) {
    if (s == "WEAK") return Confidence::Weak;
    if (s == "MODERATE") return Confidence::Moderate;
    if (s == "STRONG") return Confidence::Strong;
    throw InputError("unknown confidence '" + s + "' (expected WEAK, MODERATE or STRONG)");
}

enum class JudgeSource { Oracle, Human };

inline std::string to_string(JudgeSource s) { return s == JudgeSource::Oracle ? "ORACLE" : "HUMAN"; }

/// Training weight per confidence level.
struct ConfidenceWeights {
    double weak = 0.25;
    double moderate = 0.5;
    double strong = 1.0;

    double of(Confidence c) const {
        switch (c) {
        case Confidence::Weak: return weak;
        case Confidence::Moderate: return moderate;
        case Confidence::Strong: return strong;
        }
        return 1.0;
    }

    void validate() const {
        for (double w : {weak, moderate, strong})
            if (!(w > 0.0 && w <= 1.0)) throw ConfigError("confidence weights must lie in (0, 1]");
    }
};

struct OracleConfig {
    double tie_band = 0.05;
    double noise_std = 0.0;
    double m_weak = 0.1;
    double m_strong = 0.3;
    std::uint64_t seed = 0;
    // Never answer TIE: pairs inside the band get a coin-flip winner, as a
    // judge would when forced to choose between indistinguishable outcomes.
    bool forced_choice = false;

    void validate() const {
        if (!(tie_band >= 0.0)) throw ConfigError("oracle tie_band must be >= 0");
        if (!(noise_std >= 0.0)) throw ConfigError("oracle noise_std must be >= 0");
        if (!(m_weak < m_strong)) throw ConfigError("oracle margins need m_weak < m_strong");
    }
};

struct Judgment {
    std::size_t a = 0;
    std::size_t b = 0;
    Outcome outcome = Outcome::APreferred;
    Confidence confidence = Confidence::Moderate;
    JudgeSource source = JudgeSource::Oracle;
    std::optional<double> noisy_a; // oracle's internal scalars, for audit
    std::optional<double> noisy_b;

    nlohmann::json to_json() const {
        nlohmann::json j{{"a", a},
                         {"b", b},
                         {"outcome", to_string(outcome)},
                         {"confidence", to_string(confidence)},
                         {"source", to_string(source)}};
        if (noisy_a) j["noisy_a"] = *noisy_a;
        if (noisy_b) j["noisy_b"] = *noisy_b;
        return j;
    }

    static Judgment from_json(const nlohmann::json& j) {
        Judgment out;
        out.a = j.at("a").get<std::size_t>();
        out.b = j.at("b").get<std::size_t>();
        out.outcome = outcome_from_string(j.at("outcome").get<std::string>());
        out.confidence = confidence_from_string(j.at("confidence").get<std::string>());
        out.source = j.at("source").get<std::string>() == "HUMAN" ? JudgeSource::Human : JudgeSource::Oracle;
        if (j.contains("noisy_a")) out.noisy_a = j.at("noisy_a").get<double>();
        if (j.contains("noisy_b")) out.noisy_b = j.at("noisy_b").get<double>();
        return out;
    }
};

inline Confidence margin_confidence(double margin, const OracleConfig& cfg) {
    if (margin < cfg.m_weak) return Confidence::Weak;
    if (margin >= cfg.m_strong) return Confidence::Strong;
    return Confidence::Moderate;
}

/// Deterministic core of the oracle once the noisy scalars are drawn.
/// `coin_first` decides forced choices inside the tie band.
inline Judgment oracle_judge(double noisy_a, double noisy_b, const OracleConfig& cfg, bool coin_first = true) {
    Judgment j;
    j.noisy_a = noisy_a;
    j.noisy_b = noisy_b;
    const double gap = std::abs(noisy_a - noisy_b);
    if (gap <= cfg.tie_band) {
        if (!cfg.forced_choice) {
            j.outcome = Outcome::Tie;
            j.confidence = gap <= 0.5 * cfg.tie_band ? Confidence::Strong : Confidence::Moderate;
            return j;
        }
        j.outcome = coin_first ? Outcome::APreferred : Outcome::BPreferred;
        j.confidence = margin_confidence(gap, cfg);
        return j;
    }
    j.outcome = noisy_a > noisy_b ? Outcome::APreferred : Outcome::BPreferred;
    j.confidence = margin_confidence(gap, cfg);
    return j;
}

inline Judgment oracle_compare(double a_scalar, double b_scalar, const OracleConfig& cfg, std::mt19937_64& rng) {
    if (!std::isfinite(a_scalar) || !std::isfinite(b_scalar)) throw InputError("oracle scalars must be finite");
    double na = a_scalar, nb = b_scalar;
    if (cfg.noise_std > 0.0) {
        std::normal_distribution<double> noise(0.0, cfg.noise_std);
        na += noise(rng);
        nb += noise(rng);
    }
    bool coin = true;
    if (cfg.forced_choice && std::abs(na - nb) <= cfg.tie_band) coin = (rng() & 1u) == 0u;
    return oracle_judge(na, nb, cfg, coin);
}

/// Owns the seeded random stream of one experiment.
class Oracle {
public:
    explicit Oracle(OracleConfig cfg) : cfg_(cfg), rng_(cfg.seed) { cfg_.validate(); }

    const OracleConfig& config() const { return cfg_; }

    Judgment compare(std::size_t a, std::size_t b, double a_scalar, double b_scalar) {
        Judgment j = oracle_compare(a_scalar, b_scalar, cfg_, rng_);
        j.a = a;
        j.b = b;
        return j;
    }

    std::string rng_state() const {
        std::ostringstream os;
        os << rng_;
        return os.str();
    }

    void set_rng_state(const std::string& s) {
        std::istringstream is(s);
        is >> rng_;
        if (!is) throw FormatError("corrupt oracle random state");
    }

private:
    OracleConfig cfg_;
    std::mt19937_64 rng_;
};

} // namespace dkpl

#endif
