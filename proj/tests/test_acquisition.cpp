#include <gtest/gtest.h>

#include <algorithm>
#include <limits>
#include <numeric>
#include <random>

#include "dkpl/acquisition.hpp"

using namespace dkpl;

namespace {

Eigen::VectorXd vec(std::initializer_list<double> v) {
    Eigen::VectorXd out(static_cast<Eigen::Index>(v.size()));
    Eigen::Index i = 0;
    for (double x : v) out[i++] = x;
    return out;
}

AcquisitionConfig constant_beta(double beta, Strategy s = Strategy::UcbPair) {
    AcquisitionConfig c;
    c.beta_schedule = {BetaRange{1, std::nullopt, beta}};
    c.strategy = s;
    return c;
}

// Exhaustive reference: best allowed index by score, lowest id on ties.
std::size_t brute_argmax(const Eigen::VectorXd& s, const std::vector<bool>& blocked) {
    double top = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < blocked.size(); ++i)
        if (!blocked[i]) top = std::max(top, s[static_cast<Eigen::Index>(i)]);
    for (std::size_t i = 0; i < blocked.size(); ++i)
        if (!blocked[i] && s[static_cast<Eigen::Index>(i)] == top) return i;
    return blocked.size();
}

} // namespace

TEST(Ucb, ScoresMatchHandComputation) {
    const auto s = ucb_scores(vec({0.0, 1.0, -1.0}), vec({4.0, 0.0, 1.0}), 9.0);
    EXPECT_DOUBLE_EQ(s[0], 6.0);
    EXPECT_DOUBLE_EQ(s[1], 1.0);
    EXPECT_DOUBLE_EQ(s[2], 2.0);
}

TEST(Ucb, ZeroBetaIsMean) {
    const auto m = vec({0.3, -2.0, 5.0});
    EXPECT_EQ(ucb_scores(m, vec({1.0, 2.0, 3.0}), 0.0), m);
}

TEST(Ucb, RejectsBadInputs) {
    EXPECT_THROW(ucb_scores(vec({0.0}), vec({1.0, 1.0}), 1.0), InputError);
    EXPECT_THROW(ucb_scores(vec({0.0}), vec({-1.0}), 1.0), InputError);
    EXPECT_THROW(ucb_scores(vec({0.0}), vec({1.0}), -1.0), InputError);
}

TEST(SelectPair, TiesGoToLowestIds) {
    const auto sel = select_pair(vec({5, 9, 9, 1}), vec({0, 0, 0, 0}), constant_beta(1.0), {}, 1);
    EXPECT_EQ(sel.first, 1u);
    EXPECT_EQ(sel.second, 2u);
}

TEST(SelectPair, SkipsMeasured) {
    const auto sel =
        select_pair(vec({5, 9, 9, 1}), vec({0, 0, 0, 0}), constant_beta(1.0), {false, true, false, false}, 1);
    EXPECT_EQ(sel.first, 2u);
    EXPECT_EQ(sel.second, 0u);
}

TEST(SelectPair, ExclusionCanBeDisabled) {
    auto cfg = constant_beta(1.0);
    cfg.exclude_measured = false;
    const auto sel = select_pair(vec({5, 9, 9, 1}), vec({0, 0, 0, 0}), cfg, {true, true, true, true}, 1);
    EXPECT_EQ(sel.first, 1u);
    EXPECT_EQ(sel.second, 2u);
}

TEST(SelectPair, ExhaustionWhenFewerThanTwoRemain) {
    EXPECT_THROW(select_pair(vec({1, 2, 3}), vec({1, 1, 1}), constant_beta(1.0), {true, false, true}, 1),
                 ExhaustionSignal);
}

TEST(SelectPair, LargeBetaFavoursVariance) {
    const auto m = vec({1.0, 0.0, 0.5});
    const auto v = vec({0.01, 1.0, 0.5});
    EXPECT_EQ(select_pair(m, v, constant_beta(0.0), {}, 1).first, 0u);
    EXPECT_EQ(select_pair(m, v, constant_beta(1e4), {}, 1).first, 1u);
}

TEST(SelectPair, MaxVarianceSecondPick) {
    const auto m = vec({3.0, 2.0, 0.0, 0.0});
    const auto v = vec({0.1, 0.1, 0.5, 0.5});
    const auto sel = select_pair(m, v, constant_beta(1.0, Strategy::UcbPlusMaxVariance), {}, 1);
    EXPECT_EQ(sel.first, 0u);
    EXPECT_EQ(sel.second, 2u);
}

TEST(SelectPair, ReportsScheduledBeta) {
    AcquisitionConfig c;
    c.beta_schedule = {BetaRange{1, 10, 10000.0}, BetaRange{11, std::nullopt, 2.0}};
    EXPECT_DOUBLE_EQ(select_pair(vec({0, 1}), vec({1, 1}), c, {}, 10).beta, 10000.0);
    EXPECT_DOUBLE_EQ(select_pair(vec({0, 1}), vec({1, 1}), c, {}, 11).beta, 2.0);
}

TEST(SelectPair, MatchesExhaustiveScan) {
    std::mt19937_64 rng(7);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::uniform_int_distribution<int> coarse(0, 4);
    for (int trial = 0; trial < 200; ++trial) {
        const int n = 3 + trial % 20;
        Eigen::VectorXd m(n), v(n);
        std::vector<bool> measured(static_cast<std::size_t>(n));
        for (int i = 0; i < n; ++i) {
            m[i] = coarse(rng) * 0.25; // coarse values force ties
            v[i] = coarse(rng) * 0.1;
            measured[static_cast<std::size_t>(i)] = u(rng) < 0.3;
        }
        if (std::count(measured.begin(), measured.end(), false) < 2) continue;
        const auto strat = trial % 2 ? Strategy::UcbPair : Strategy::UcbPlusMaxVariance;
        const auto cfg = constant_beta(4.0, strat);
        const auto sel = select_pair(m, v, cfg, measured, 1);
        const Eigen::VectorXd s = m + 2.0 * v.cwiseSqrt();
        auto blocked = measured;
        EXPECT_EQ(sel.first, brute_argmax(s, blocked));
        blocked[sel.first] = true;
        EXPECT_EQ(sel.second, brute_argmax(strat == Strategy::UcbPair ? s : v, blocked));
        EXPECT_FALSE(measured[sel.first]);
        EXPECT_FALSE(measured[sel.second]);
        EXPECT_NE(sel.first, sel.second);
    }
}

TEST(SelectPair, PermutationEquivariantWithoutTies) {
    std::mt19937_64 rng(3);
    std::normal_distribution<double> g(0.0, 1.0);
    const int n = 12;
    Eigen::VectorXd m(n), v(n);
    for (int i = 0; i < n; ++i) {
        m[i] = g(rng);
        v[i] = std::abs(g(rng));
    }
    std::vector<int> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    Eigen::VectorXd pm(n), pv(n);
    for (int i = 0; i < n; ++i) {
        pm[i] = m[perm[static_cast<std::size_t>(i)]];
        pv[i] = v[perm[static_cast<std::size_t>(i)]];
    }
    const auto a = select_pair(m, v, constant_beta(2.0), {}, 1);
    const auto b = select_pair(pm, pv, constant_beta(2.0), {}, 1);
    EXPECT_EQ(static_cast<std::size_t>(perm[b.first]), a.first);
    EXPECT_EQ(static_cast<std::size_t>(perm[b.second]), a.second);
}

TEST(CurrentBest, OnlyMeasuredCount) {
    EXPECT_EQ(current_best(vec({9, 1, 3, 3}), {false, true, true, true}), 2u);
    EXPECT_THROW(current_best(vec({1, 2}), {false, false}), StateError);
}

TEST(Requests, ThreeDistinctComparisons) {
    const auto r = build_comparison_requests(4, 7, 2);
    ASSERT_EQ(r.size(), 3u);
    EXPECT_EQ(r[0].a, 4u);
    EXPECT_EQ(r[0].b, 7u);
    EXPECT_EQ(r[1].a, 4u);
    EXPECT_EQ(r[1].b, 2u);
    EXPECT_EQ(r[2].a, 7u);
    EXPECT_EQ(r[2].b, 2u);
}

TEST(Requests, BestAmongSelectedGivesOne) {
    EXPECT_EQ(build_comparison_requests(4, 7, 4).size(), 1u);
    EXPECT_EQ(build_comparison_requests(4, 7, 7).size(), 1u);
    EXPECT_THROW(build_comparison_requests(3, 3, 1), InputError);
}

TEST(BetaSchedule, ParsesRanges) {
    const auto j = nlohmann::json::parse(
        R"({"beta_schedule":[{"steps":[1,10],"beta":10000},{"steps":[11,null],"beta":2}],"strategy":"ucb_plus_max_variance"})");
    const auto c = AcquisitionConfig::from_json(j);
    EXPECT_EQ(c.strategy, Strategy::UcbPlusMaxVariance);
    EXPECT_DOUBLE_EQ(c.beta_at(1), 10000.0);
    EXPECT_DOUBLE_EQ(c.beta_at(10), 10000.0);
    EXPECT_DOUBLE_EQ(c.beta_at(500), 2.0);
    EXPECT_EQ(AcquisitionConfig::from_json(c.to_json()).to_json(), c.to_json());
}

TEST(BetaSchedule, RejectsGapsOverlapsAndShortCoverage) {
    AcquisitionConfig c;
    c.beta_schedule = {BetaRange{1, 5, 1.0}, BetaRange{7, std::nullopt, 1.0}};
    EXPECT_THROW(c.validate(), ConfigError);
    c.beta_schedule = {BetaRange{1, 5, 1.0}, BetaRange{5, std::nullopt, 1.0}};
    EXPECT_THROW(c.validate(), ConfigError);
    c.beta_schedule = {BetaRange{2, std::nullopt, 1.0}};
    EXPECT_THROW(c.validate(), ConfigError);
    c.beta_schedule = {BetaRange{1, 5, 1.0}};
    EXPECT_NO_THROW(c.validate(5));
    EXPECT_THROW(c.validate(6), ConfigError);
    EXPECT_THROW(c.beta_at(6), ConfigError);
    c.beta_schedule = {BetaRange{1, std::nullopt, -1.0}};
    EXPECT_THROW(c.validate(), ConfigError);
    EXPECT_THROW(strategy_from_string("thompson"), ConfigError);
}
