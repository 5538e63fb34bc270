#ifndef DKPL_ORCHESTRATOR_HPP
#define DKPL_ORCHESTRATOR_HPP

// The active-learning loop: seed, judge, train, predict, acquire, repeat.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "acquisition.hpp"
#include "diffnet.hpp"
#include "domaindata.hpp"
#include "errors.hpp"
#include "io.hpp"
#include "oracle.hpp"
#include "prefgp.hpp"
#include "snapshot.hpp"
#include "synth.hpp"

namespace dkpl {

enum class JudgeMode { Oracle, Human };

struct ExportOptions {
    bool png = false;
    int top_k = 20;
    int bottom_k = 20;
    bool include_timing = false;
};

struct ExperimentConfig {
    nlohmann::json dataset;                // path string, or {"synthetic": kind, ...options}
    std::filesystem::path base_dir = "."; // relative dataset paths resolve here
    std::optional<GroundTruthMap> ground_truth;
    JudgeMode judge = JudgeMode::Oracle;
    OracleConfig oracle;
    double human_timeout_s = 0.0; // 0 waits indefinitely
    int n_initial_random = 10;
    int n_steps = 30;
    int epochs = 1000;
    int patch_window = 9;
    std::optional<Architecture> architecture;
    double init_lengthscale = 1.0;
    double init_amplitude = 1.0;
    double init_jitter = 1e-6;
    LikelihoodConfig likelihood;
    ConfidenceWeights weights;
    AcquisitionConfig acquisition;
    TrainOptions optimizer;
    AngleConfig angle;
    int charge_radius = 3;
    std::uint64_t seed = 0;
    bool cold_start = false;
    ExportOptions export_opts;

    Architecture arch() const { return architecture ? *architecture : Architecture::for_window(patch_window); }

    std::uint64_t oracle_seed() const { return seed * 2 + 1; }

    void validate() const {
        if (n_initial_random < 2) throw ConfigError("n_initial_random must be >= 2");
        if (n_steps < 0) throw ConfigError("n_steps must be >= 0");
        if (epochs < 1) throw ConfigError("epochs must be >= 1");
        if (patch_window < 1 || patch_window % 2 == 0) throw ConfigError("patch_window must be odd");
        const auto a = arch();
        if (a.layer_sizes.front() != patch_window * patch_window)
            throw ConfigError("architecture input size " + std::to_string(a.layer_sizes.front()) +
                              " does not match patch_window^2 = " + std::to_string(patch_window * patch_window));
        if (!(init_lengthscale > 0.0 && init_amplitude > 0.0 && init_jitter >= 1e-10))
            throw ConfigError("kernel initial values must be positive (jitter >= 1e-10)");
        likelihood.validate();
        weights.validate();
        acquisition.validate(n_steps);
        angle.validate();
        if (judge == JudgeMode::Oracle) {
            oracle.validate();
            if (!ground_truth) throw ConfigError("oracle judge needs a ground_truth map");
        }
        if (charge_radius < 1) throw ConfigError("charge_radius must be >= 1");
        if (export_opts.top_k < 0 || export_opts.bottom_k < 0) throw ConfigError("overlay sizes must be >= 0");
    }

    nlohmann::json to_json() const {
        nlohmann::json judge_j;
        if (judge == JudgeMode::Oracle)
            judge_j = {{"mode", "oracle"},          {"tie_band", oracle.tie_band}, {"noise_std", oracle.noise_std},
                       {"m_weak", oracle.m_weak},   {"m_strong", oracle.m_strong},
                       {"forced_choice", oracle.forced_choice}};
        else
            judge_j = {{"mode", "human"}, {"timeout_s", human_timeout_s}};
        nlohmann::json j{
            {"dataset", dataset},
            {"judge", judge_j},
            {"n_initial_random", n_initial_random},
            {"n_steps", n_steps},
            {"epochs", epochs},
            {"patch_window", patch_window},
            {"architecture", arch().to_json()},
            {"kernel", {{"lengthscale", init_lengthscale}, {"amplitude", init_amplitude}, {"jitter", init_jitter}}},
            {"likelihood",
             {{"tie_tolerance", likelihood.tie_tolerance},
              {"noise_scale", likelihood.noise_scale},
              {"tie_support", likelihood.tie_support},
              {"confidence_weighting", likelihood.confidence_weighting}}},
            {"confidence_weights", {{"weak", weights.weak}, {"moderate", weights.moderate}, {"strong", weights.strong}}},
            {"acquisition", acquisition.to_json()},
            {"optimizer",
             {{"learning_rate", optimizer.learning_rate},
              {"beta1", optimizer.beta1},
              {"beta2", optimizer.beta2},
              {"eps", optimizer.eps},
              {"train_jitter", optimizer.train_jitter}}},
            {"angle", {{"radius", angle.radius}, {"bin_width", angle.bin_width}}},
            {"charge_radius", charge_radius},
            {"seed", seed},
            {"cold_start", cold_start},
            {"export",
             {{"png", export_opts.png},
              {"top_k", export_opts.top_k},
              {"bottom_k", export_opts.bottom_k},
              {"include_timing", export_opts.include_timing}}}};
        if (ground_truth) j["ground_truth"] = to_string(*ground_truth);
        return j;
    }

    static ExperimentConfig from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = ".") {
        ExperimentConfig c;
        c.base_dir = base_dir;
        try {
            c.dataset = j.at("dataset");
            if (j.contains("ground_truth")) c.ground_truth = ground_truth_from_string(j.at("ground_truth").get<std::string>());
            if (j.contains("judge")) {
                const auto& jj = j.at("judge");
                const auto mode = jj.value("mode", "oracle");
                if (mode == "oracle") {
                    c.judge = JudgeMode::Oracle;
                    c.oracle.tie_band = jj.value("tie_band", c.oracle.tie_band);
                    c.oracle.noise_std = jj.value("noise_std", c.oracle.noise_std);
                    c.oracle.m_weak = jj.value("m_weak", c.oracle.m_weak);
                    c.oracle.m_strong = jj.value("m_strong", c.oracle.m_strong);
                    c.oracle.forced_choice = jj.value("forced_choice", c.oracle.forced_choice);
                } else if (mode == "human") {
                    c.judge = JudgeMode::Human;
                    c.human_timeout_s = jj.value("timeout_s", 0.0);
                } else {
                    throw ConfigError("judge mode must be 'oracle' or 'human', got '" + mode + "'");
                }
            }
            c.n_initial_random = j.value("n_initial_random", c.n_initial_random);
            c.n_steps = j.value("n_steps", c.n_steps);
            c.epochs = j.value("epochs", c.epochs);
            c.patch_window = j.value("patch_window", c.patch_window);
            if (j.contains("architecture")) c.architecture = Architecture::from_json(j.at("architecture"));
            if (j.contains("kernel")) {
                const auto& k = j.at("kernel");
                c.init_lengthscale = k.value("lengthscale", c.init_lengthscale);
                c.init_amplitude = k.value("amplitude", c.init_amplitude);
                c.init_jitter = k.value("jitter", c.init_jitter);
            }
            if (j.contains("likelihood")) {
                const auto& l = j.at("likelihood");
                c.likelihood.tie_tolerance = l.value("tie_tolerance", c.likelihood.tie_tolerance);
                c.likelihood.noise_scale = l.value("noise_scale", c.likelihood.noise_scale);
                c.likelihood.tie_support = l.value("tie_support", c.likelihood.tie_support);
                c.likelihood.confidence_weighting = l.value("confidence_weighting", c.likelihood.confidence_weighting);
            }
            if (j.contains("confidence_weights")) {
                const auto& w = j.at("confidence_weights");
                c.weights.weak = w.value("weak", c.weights.weak);
                c.weights.moderate = w.value("moderate", c.weights.moderate);
                c.weights.strong = w.value("strong", c.weights.strong);
            }
            if (j.contains("acquisition")) c.acquisition = AcquisitionConfig::from_json(j.at("acquisition"));
            if (j.contains("optimizer")) {
                const auto& o = j.at("optimizer");
                c.optimizer.learning_rate = o.value("learning_rate", c.optimizer.learning_rate);
                c.optimizer.beta1 = o.value("beta1", c.optimizer.beta1);
                c.optimizer.beta2 = o.value("beta2", c.optimizer.beta2);
                c.optimizer.eps = o.value("eps", c.optimizer.eps);
                c.optimizer.train_jitter = o.value("train_jitter", c.optimizer.train_jitter);
            }
            if (j.contains("angle")) {
                c.angle.radius = j.at("angle").value("radius", c.angle.radius);
                c.angle.bin_width = j.at("angle").value("bin_width", c.angle.bin_width);
            }
            c.charge_radius = j.value("charge_radius", c.charge_radius);
            c.seed = j.value("seed", c.seed);
            c.cold_start = j.value("cold_start", c.cold_start);
            if (j.contains("export")) {
                const auto& e = j.at("export");
                c.export_opts.png = e.value("png", c.export_opts.png);
                c.export_opts.top_k = e.value("top_k", c.export_opts.top_k);
                c.export_opts.bottom_k = e.value("bottom_k", c.export_opts.bottom_k);
                c.export_opts.include_timing = e.value("include_timing", c.export_opts.include_timing);
            }
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError(std::string("experiment config: ") + e.what());
        }
        // Without tie support the oracle must pick a side.
        if (!c.likelihood.tie_support) c.oracle.forced_choice = true;
        c.validate();
        return c;
    }
};

inline ExperimentConfig load_config(const std::filesystem::path& path) {
    nlohmann::json j;
    try {
        j = io::read_json(path);
    } catch (const FormatError& e) {
        throw ConfigError(e.what());
    }
    return ExperimentConfig::from_json(j, path.parent_path().empty() ? std::filesystem::path(".") : path.parent_path());
}

/// Applies "ties=on,weights=off" style ablation switches.
inline void apply_variant(ExperimentConfig& cfg, const std::string& spec) {
    std::stringstream ss(spec);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (item.empty()) continue;
        const auto eq = item.find('=');
        if (eq == std::string::npos) throw ConfigError("variant entry '" + item + "' is not key=value");
        const auto key = item.substr(0, eq), val = item.substr(eq + 1);
        bool on;
        if (val == "on" || val == "true" || val == "1")
            on = true;
        else if (val == "off" || val == "false" || val == "0")
            on = false;
        else
            throw ConfigError("variant value for '" + key + "' must be on or off");
        if (key == "ties")
            cfg.likelihood.tie_support = on;
        else if (key == "weights")
            cfg.likelihood.confidence_weighting = on;
        else
            throw ConfigError("unknown variant key '" + key + "' (expected ties or weights)");
    }
    cfg.oracle.forced_choice = !cfg.likelihood.tie_support;
}

inline Dataset resolve_dataset(const ExperimentConfig& cfg) {
    const auto& d = cfg.dataset;
    if (d.is_string()) {
        std::filesystem::path p = d.get<std::string>();
        if (p.is_relative()) p = cfg.base_dir / p;
        return load_dataset(p);
    }
    if (!d.is_object() || !d.contains("synthetic")) throw ConfigError("dataset must be a path or {\"synthetic\": kind}");
    const auto kind = d.at("synthetic").get<std::string>();
    const auto seed = d.value("seed", std::uint64_t{1});
    if (kind == "stripes") {
        synth::StripeOptions o;
        o.height = d.value("height", o.height);
        o.width = d.value("width", o.width);
        o.period = d.value("period", o.period);
        o.slope = d.value("slope", o.slope);
        o.sharpness = d.value("sharpness", o.sharpness);
        o.seed = seed;
        return synth::stripe_loops(o);
    }
    if (kind == "rhombohedral_walls") {
        synth::WallOptions o;
        o.height = d.value("height", o.height);
        o.width = d.value("width", o.width);
        o.domain_width = d.value("domain_width", o.domain_width);
        o.seed = seed;
        return synth::rhombohedral_walls(o);
    }
    if (kind == "charged_walls") {
        synth::ChargedWallOptions o;
        o.height = d.value("height", o.height);
        o.width = d.value("width", o.width);
        o.seed = seed;
        return synth::charged_walls(o);
    }
    throw ConfigError("unknown synthetic dataset '" + kind + "'");
}

/// Ground-truth map rescaled to [0, 1]; cells without a defined value take
/// the map minimum first.
inline std::vector<double> normalized_ground_truth(const Dataset& ds, GroundTruthMap kind, const AngleConfig& angle,
                                                   int charge_radius) {
    auto raw = analysis_map(ds, kind, angle, charge_radius);
    double lo = std::numeric_limits<double>::infinity();
    for (double v : raw)
        if (std::isfinite(v)) lo = std::min(lo, v);
    if (!std::isfinite(lo)) throw DataError("ground-truth map has no defined values");
    for (double& v : raw)
        if (!std::isfinite(v)) v = lo;
    return normalize_scalars(raw);
}

/// Step 0 is initialization: `selected` holds the random initial points.
struct StepTrace {
    int step = 0;
    std::optional<double> beta;
    std::vector<std::size_t> selected;
    std::optional<std::size_t> best;
    std::vector<ComparisonRequest> requests;
    std::vector<Judgment> judgments;
    double objective = 0.0;       // -evidence after training
    double objective_start = 0.0; // -evidence before the first update
    std::size_t clamped_variances = 0;
    Eigen::VectorXd mean;
    Eigen::VectorXd variance;
    double duration_s = 0.0;

    nlohmann::json to_json(bool timing) const {
        nlohmann::json reqs = nlohmann::json::array(), js = nlohmann::json::array();
        for (const auto& r : requests) reqs.push_back({r.a, r.b});
        for (const auto& j : judgments) js.push_back(j.to_json());
        nlohmann::json out{{"step", step},
                           {"beta", beta ? nlohmann::json(*beta) : nlohmann::json(nullptr)},
                           {"selected", selected},
                           {"best", best ? nlohmann::json(*best) : nlohmann::json(nullptr)},
                           {"requests", reqs},
                           {"judgments", js},
                           {"objective", objective},
                           {"objective_start", objective_start},
                           {"clamped_variances", clamped_variances}};
        if (timing) out["duration_s"] = duration_s;
        return out;
    }

    static StepTrace from_json(const nlohmann::json& j) {
        StepTrace t;
        t.step = j.at("step").get<int>();
        if (!j.at("beta").is_null()) t.beta = j.at("beta").get<double>();
        t.selected = j.at("selected").get<std::vector<std::size_t>>();
        if (!j.at("best").is_null()) t.best = j.at("best").get<std::size_t>();
        for (const auto& r : j.at("requests")) t.requests.push_back({r[0].get<std::size_t>(), r[1].get<std::size_t>()});
        for (const auto& x : j.at("judgments")) t.judgments.push_back(Judgment::from_json(x));
        t.objective = j.at("objective").get<double>();
        t.objective_start = j.at("objective_start").get<double>();
        t.clamped_variances = j.at("clamped_variances").get<std::size_t>();
        t.duration_s = j.value("duration_s", 0.0);
        return t;
    }
};

enum class Phase { Fresh, Awaiting, Ready, Exhausted };

inline std::string to_string(Phase p) {
    switch (p) {
    case Phase::Fresh: return "fresh";
    case Phase::Awaiting: return "awaiting";
    case Phase::Ready: return "ready";
    case Phase::Exhausted: return "exhausted";
    }
    return "?";
}

inline Phase phase_from_string(const std::string& s) {
    if (s == "fresh") return Phase::Fresh;
    if (s == "awaiting") return Phase::Awaiting;
    if (s == "ready") return Phase::Ready;
    if (s == "exhausted") return Phase::Exhausted;
    throw FormatError("unknown session phase '" + s + "'");
}

/// One experiment. Judgments arrive either from the built-in oracle or from
/// outside (begin / finish), which is how the feedback service drives it.
class Session {
public:
    Session(ExperimentConfig cfg, Dataset ds) : cfg_(std::move(cfg)), ds_(std::move(ds)) {
        cfg_.validate();
        ds_.validate();
        if (static_cast<std::size_t>(cfg_.n_initial_random) > ds_.size())
            throw ConfigError("dataset has " + std::to_string(ds_.size()) + " candidates, fewer than n_initial_random=" +
                              std::to_string(cfg_.n_initial_random));
        inputs_ = all_patch_inputs(ds_.structure, cfg_.patch_window);
        if (cfg_.ground_truth)
            truth_ = normalized_ground_truth(ds_, *cfg_.ground_truth, cfg_.angle, cfg_.charge_radius);
        if (cfg_.judge == JudgeMode::Oracle) {
            OracleConfig oc = cfg_.oracle;
            oc.seed = cfg_.oracle_seed();
            oracle_.emplace(oc);
        }
        measured_flag_.assign(ds_.size(), false);
        model_.net = init_params(cfg_.arch(), cfg_.seed);
        model_.hp = initial_kernel();
    }

    explicit Session(ExperimentConfig cfg) : Session(cfg, resolve_dataset(cfg)) {}

    const ExperimentConfig& config() const { return cfg_; }
    const Dataset& dataset() const { return ds_; }
    const Eigen::MatrixXd& inputs() const { return inputs_; }
    Phase phase() const { return phase_; }
    int step() const { return step_; }
    const std::vector<std::size_t>& measured() const { return measured_; }
    const std::vector<bool>& measured_flags() const { return measured_flag_; }
    const std::vector<Judgment>& judgments() const { return judgments_; }
    const std::vector<ComparisonRequest>& pending() const { return pending_; }
    const std::vector<StepTrace>& traces() const { return traces_; }
    const PrefModel& model() const { return model_; }
    const std::optional<std::vector<double>>& ground_truth() const { return truth_; }
    bool finished() const { return phase_ == Phase::Exhausted || (phase_ == Phase::Ready && step_ >= cfg_.n_steps); }

    const Eigen::VectorXd& mean() const { return require_maps().mean; }
    const Eigen::VectorXd& variance() const { return require_maps().variance; }

    std::optional<std::size_t> best() const {
        if (traces_.empty() || measured_.empty()) return std::nullopt;
        return current_best(traces_.back().mean, measured_flag_);
    }

    /// beta for the step that is pending or would be issued next.
    std::optional<double> beta_in_effect() const {
        if (phase_ == Phase::Fresh) return std::nullopt;
        if (phase_ == Phase::Awaiting) return draft_.beta;
        if (step_ >= cfg_.n_steps) return std::nullopt;
        return cfg_.acquisition.beta_at(step_ + 1);
    }

    /// Issues the initial comparisons (fresh session) or the next step's
    /// comparisons. Throws ExhaustionSignal once fewer than two candidates
    /// remain.
    const std::vector<ComparisonRequest>& begin() {
        if (phase_ == Phase::Awaiting) return pending_;
        if (phase_ == Phase::Exhausted) throw ExhaustionSignal("experiment already exhausted");
        draft_ = StepTrace{};
        started_ = std::chrono::steady_clock::now();
        if (phase_ == Phase::Fresh) {
            draft_.step = 0;
            draft_.selected = draw_initial();
            draft_.requests = initial_pairs(draft_.selected);
        } else {
            if (step_ >= cfg_.n_steps) throw StateError("all " + std::to_string(cfg_.n_steps) + " steps completed");
            const auto& last = traces_.back();
            SelectionResult sel;
            try {
                sel = select_pair(last.mean, last.variance, cfg_.acquisition, measured_flag_, step_ + 1);
            } catch (const ExhaustionSignal&) {
                phase_ = Phase::Exhausted;
                throw;
            }
            const auto b = current_best(last.mean, measured_flag_);
            draft_.step = step_ + 1;
            draft_.beta = sel.beta;
            draft_.selected = {sel.first, sel.second};
            draft_.best = b;
            draft_.requests = build_comparison_requests(sel.first, sel.second, b);
        }
        pending_ = draft_.requests;
        phase_ = Phase::Awaiting;
        return pending_;
    }

    /// Validates an externally supplied judgment against the session config.
    void check_judgment(const Judgment& j) const {
        if (j.outcome == Outcome::Tie && !cfg_.likelihood.tie_support)
            throw ValidationError("TIE outcome rejected: tie_support_enabled is false for this session");
    }

    /// Consumes one judgment per pending request, in request order, then
    /// retrains and refreshes the maps.
    const StepTrace& finish(std::vector<Judgment> js) {
        if (phase_ != Phase::Awaiting) throw StateError("no comparisons are pending");
        if (js.size() != pending_.size())
            throw InputError("expected " + std::to_string(pending_.size()) + " judgments, got " +
                             std::to_string(js.size()));
        for (std::size_t i = 0; i < js.size(); ++i) {
            const auto& r = pending_[i];
            if (js[i].a == r.b && js[i].b == r.a) {
                std::swap(js[i].a, js[i].b);
                std::swap(js[i].noisy_a, js[i].noisy_b);
                js[i].outcome = flipped(js[i].outcome);
            }
            if (js[i].a != r.a || js[i].b != r.b) throw InputError("judgment does not match pending request " + std::to_string(i));
            check_judgment(js[i]);
        }
        for (std::size_t id : draft_.selected) mark_measured(id);
        judgments_.insert(judgments_.end(), js.begin(), js.end());
        draft_.judgments = std::move(js);
        train_and_predict(draft_);
        draft_.duration_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - started_).count();
        traces_.push_back(std::move(draft_));
        draft_ = StepTrace{};
        pending_.clear();
        step_ = traces_.back().step;
        phase_ = Phase::Ready;
        return traces_.back();
    }

    Judgment oracle_judge(const ComparisonRequest& r) {
        if (!oracle_) throw StateError("session has no oracle judge");
        return oracle_->compare(r.a, r.b, (*truth_)[r.a], (*truth_)[r.b]);
    }

    const StepTrace& initialize() {
        if (phase_ != Phase::Fresh) throw StateError("session already initialized");
        return judge_pending();
    }

    const StepTrace& run_step() {
        if (phase_ == Phase::Fresh) throw StateError("initialize the session first");
        return judge_pending();
    }

    std::vector<ComparisonRecord> records() const {
        std::vector<std::size_t> pos(ds_.size(), 0);
        for (std::size_t i = 0; i < measured_.size(); ++i) pos[measured_[i]] = i;
        std::vector<ComparisonRecord> out;
        out.reserve(judgments_.size());
        for (const auto& j : judgments_) out.push_back({pos[j.a], pos[j.b], j.outcome, cfg_.weights.of(j.confidence)});
        return out;
    }

    void save(const std::filesystem::path& dir) const;
    static Session load(const std::filesystem::path& dir, std::optional<Dataset> ds = std::nullopt);

private:
    KernelHyperparams initial_kernel() const {
        return KernelHyperparams::defaults(cfg_.arch().latent_dim(), cfg_.init_lengthscale, cfg_.init_amplitude,
                                           cfg_.init_jitter);
    }

    const StepTrace& require_maps() const {
        if (traces_.empty()) throw StateError("no utility maps before initialization completes");
        return traces_.back();
    }

    const StepTrace& judge_pending() {
        const auto reqs = begin();
        std::vector<Judgment> js;
        for (const auto& r : reqs) js.push_back(oracle_judge(r));
        return finish(std::move(js));
    }

    std::vector<std::size_t> draw_initial() const {
        std::mt19937_64 rng(cfg_.seed);
        std::vector<std::size_t> pool(ds_.size());
        std::iota(pool.begin(), pool.end(), std::size_t{0});
        const auto n = static_cast<std::size_t>(cfg_.n_initial_random);
        for (std::size_t i = 0; i < n; ++i) {
            std::uniform_int_distribution<std::size_t> pick(i, pool.size() - 1);
            std::swap(pool[i], pool[pick(rng)]);
        }
        pool.resize(n);
        return pool;
    }

    // Disjoint consecutive pairs plus (last, first) so every point is compared.
    static std::vector<ComparisonRequest> initial_pairs(const std::vector<std::size_t>& ids) {
        std::vector<ComparisonRequest> out;
        for (std::size_t i = 0; i + 1 < ids.size(); i += 2) out.push_back({ids[i], ids[i + 1]});
        const ComparisonRequest closure{ids.back(), ids.front()};
        if (std::none_of(out.begin(), out.end(), [&](const auto& r) { return r.key() == closure.key(); }))
            out.push_back(closure);
        return out;
    }

    void mark_measured(std::size_t id) {
        if (measured_flag_[id]) return;
        measured_flag_[id] = true;
        measured_.push_back(id);
    }

    void train_and_predict(StepTrace& t) {
        const auto n = static_cast<Eigen::Index>(measured_.size());
        Eigen::MatrixXd X(n, inputs_.cols());
        for (Eigen::Index i = 0; i < n; ++i) X.row(i) = inputs_.row(static_cast<Eigen::Index>(measured_[i]));
        PrefModel start = model_;
        std::optional<Eigen::VectorXd> alpha0;
        if (cfg_.cold_start) {
            start = PrefModel{init_params(cfg_.arch(), cfg_.seed), initial_kernel(), {}};
        } else if (model_.posterior) {
            alpha0 = Eigen::VectorXd::Zero(n);
            const auto& a = model_.posterior->alpha;
            alpha0->head(a.size()) = a;
        }
        TrainOptions opt = cfg_.optimizer;
        opt.epochs = cfg_.epochs;
        const auto res =
            train_joint(start, X, records(), cfg_.likelihood, opt, measured_, alpha0 ? &*alpha0 : nullptr);
        model_ = res.model;
        t.objective = res.objective;
        t.objective_start = res.objective_trace.front();
        const auto pred = predict_inputs(*model_.posterior, inputs_);
        t.mean = pred.mean;
        t.variance = pred.variance;
        t.clamped_variances = pred.clamped;
    }

    ExperimentConfig cfg_;
    Dataset ds_;
    Eigen::MatrixXd inputs_;
    std::optional<std::vector<double>> truth_;
    std::optional<Oracle> oracle_;
    PrefModel model_;
    Phase phase_ = Phase::Fresh;
    int step_ = 0;
    std::vector<std::size_t> measured_;
    std::vector<bool> measured_flag_;
    std::vector<Judgment> judgments_;
    std::vector<ComparisonRequest> pending_;
    std::vector<StepTrace> traces_;
    StepTrace draft_;
    std::chrono::steady_clock::time_point started_{};
};

inline void Session::save(const std::filesystem::path& dir) const {
    F64Bundle b;
    b.header["format"] = "dkpl-session";
    nlohmann::json cfgj = cfg_.to_json();
    if (cfg_.dataset.is_string()) {
        std::filesystem::path p = cfg_.dataset.get<std::string>();
        if (p.is_relative()) p = std::filesystem::absolute(cfg_.base_dir / p);
        cfgj["dataset"] = p.string();
    }
    b.header["config"] = cfgj;
    b.header["phase"] = to_string(phase_);
    b.header["step"] = step_;
    b.header["measured"] = measured_;
    nlohmann::json js = nlohmann::json::array();
    for (const auto& j : judgments_) js.push_back(j.to_json());
    b.header["judgments"] = js;
    if (oracle_) b.header["oracle_rng"] = oracle_->rng_state();
    nlohmann::json traces = nlohmann::json::array();
    for (std::size_t k = 0; k < traces_.size(); ++k) {
        traces.push_back(traces_[k].to_json(true));
        b.add("trace_" + std::to_string(k) + "_mean", Eigen::MatrixXd(traces_[k].mean));
        b.add("trace_" + std::to_string(k) + "_variance", Eigen::MatrixXd(traces_[k].variance));
    }
    b.header["traces"] = traces;
    if (phase_ == Phase::Awaiting) b.header["draft"] = draft_.to_json(false);
    add_model(b, model_);
    b.write(dir, "session");
}

inline Session Session::load(const std::filesystem::path& dir, std::optional<Dataset> ds) {
    const auto b = F64Bundle::read(dir, "session");
    if (b.header.value("format", "") != "dkpl-session") throw FormatError(dir.string() + " is not a session snapshot");
    auto cfg = ExperimentConfig::from_json(b.header.at("config"), dir);
    Session s = ds ? Session(cfg, std::move(*ds)) : Session(cfg);
    try {
        s.phase_ = phase_from_string(b.header.at("phase").get<std::string>());
        s.step_ = b.header.at("step").get<int>();
        for (std::size_t id : b.header.at("measured").get<std::vector<std::size_t>>()) {
            if (id >= s.ds_.size()) throw FormatError("measured id out of range");
            s.mark_measured(id);
        }
        for (const auto& j : b.header.at("judgments")) s.judgments_.push_back(Judgment::from_json(j));
        if (s.oracle_ && b.header.contains("oracle_rng")) s.oracle_->set_rng_state(b.header.at("oracle_rng"));
        const auto& tr = b.header.at("traces");
        for (std::size_t k = 0; k < tr.size(); ++k) {
            auto t = StepTrace::from_json(tr[k]);
            t.mean = b.vector("trace_" + std::to_string(k) + "_mean");
            t.variance = b.vector("trace_" + std::to_string(k) + "_variance");
            s.traces_.push_back(std::move(t));
        }
        if (s.phase_ == Phase::Awaiting) {
            s.draft_ = StepTrace::from_json(b.header.at("draft"));
            s.pending_ = s.draft_.requests;
            s.started_ = std::chrono::steady_clock::now();
        }
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("session snapshot: ") + e.what());
    }
    s.model_ = read_model(b);
    return s;
}

// ---------------------------------------------------------------------------
// Running and exporting

struct RunOptions {
    std::function<void(const StepTrace&)> on_step;
    std::optional<std::filesystem::path> checkpoint_dir; // session saved after every step
};

/// Initializes (if needed) and advances until n_steps or exhaustion.
inline void run_to_end(Session& s, const RunOptions& opt = {}) {
    if (s.phase() == Phase::Fresh) {
        const auto& t = s.initialize();
        if (opt.on_step) opt.on_step(t);
        if (opt.checkpoint_dir) s.save(*opt.checkpoint_dir);
    }
    while (!s.finished()) {
        try {
            const auto& t = s.run_step();
            if (opt.on_step) opt.on_step(t);
        } catch (const ExhaustionSignal&) {
            break;
        }
        if (opt.checkpoint_dir) s.save(*opt.checkpoint_dir);
    }
}

inline void export_trace(const Session& s, const std::filesystem::path& out);

/// Full oracle-mode experiment. With `out` set, the trace is exported, also
/// when a step fails part-way.
inline Session run_experiment(const ExperimentConfig& cfg, const std::optional<std::filesystem::path>& out = {},
                              const RunOptions& opt = {}) {
    if (cfg.judge != JudgeMode::Oracle) throw ConfigError("run_experiment needs an oracle judge; use serve for human mode");
    Session s(cfg);
    try {
        run_to_end(s, opt);
    } catch (...) {
        if (out && !s.traces().empty()) export_trace(s, *out);
        throw;
    }
    if (out) export_trace(s, *out);
    return s;
}

namespace detail {

inline std::vector<double> to_std(const Eigen::VectorXd& v) { return {v.data(), v.data() + v.size()}; }

inline std::string step_tag(int step) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "step_%03d", step);
    return buf;
}

inline nlohmann::json cell_list(const Dataset& ds, const std::vector<std::size_t>& ids, const Eigen::VectorXd& mean) {
    nlohmann::json out = nlohmann::json::array();
    for (auto id : ids) {
        const auto g = ds.index(id);
        out.push_back({{"id", id}, {"row", g.row}, {"col", g.col}, {"mean", mean[static_cast<Eigen::Index>(id)]}});
    }
    return out;
}

} // namespace detail

/// Ids of the k highest (or lowest) values, ties by lowest id.
inline std::vector<std::size_t> extreme_cells(const Eigen::VectorXd& v, std::size_t k, bool highest) {
    std::vector<std::size_t> ids(static_cast<std::size_t>(v.size()));
    std::iota(ids.begin(), ids.end(), std::size_t{0});
    k = std::min(k, ids.size());
    std::partial_sort(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(k), ids.end(), [&](auto a, auto b) {
        const double va = v[static_cast<Eigen::Index>(a)], vb = v[static_cast<Eigen::Index>(b)];
        if (va != vb) return highest ? va > vb : va < vb;
        return a < b;
    });
    ids.resize(k);
    return ids;
}

/// trace.json, steps.jsonl, maps/, sampling.json, histogram.json (when a
/// ground-truth map is configured), overlay_top.json / overlay_bottom.json and
/// model/.
inline void export_trace(const Session& s, const std::filesystem::path& out) {
    namespace fs = std::filesystem;
    const auto& cfg = s.config();
    const auto& ds = s.dataset();
    const bool timing = cfg.export_opts.include_timing;
    fs::create_directories(out);

    std::string lines;
    for (const auto& t : s.traces())
        if (t.step > 0) lines += t.to_json(timing).dump() + "\n";
    io::write_text(out / "steps.jsonl", lines);

    MapContainer maps;
    maps.name = ds.name + "-utility";
    maps.height = ds.height;
    maps.width = ds.width;
    for (const auto& t : s.traces()) {
        const std::string tag = t.step == 0 ? "init" : detail::step_tag(t.step);
        maps.arrays.emplace_back(tag + "_mean", detail::to_std(t.mean));
        maps.arrays.emplace_back(tag + "_variance", detail::to_std(t.variance));
    }
    if (!maps.arrays.empty()) write_map_container(out / "maps", maps, cfg.export_opts.png);

    // Sampling order: initial points carry step 0.
    nlohmann::json sampling = nlohmann::json::array();
    {
        std::vector<int> step_of(ds.size(), -1);
        for (const auto& t : s.traces())
            for (auto id : t.selected)
                if (step_of[id] < 0) step_of[id] = t.step;
        std::size_t order = 0;
        for (auto id : s.measured()) {
            const auto g = ds.index(id);
            sampling.push_back({{"order", order++}, {"id", id}, {"row", g.row}, {"col", g.col}, {"step", step_of[id]}});
        }
    }
    io::write_text(out / "sampling.json", sampling.dump(2) + "\n");

    if (s.ground_truth()) {
        const auto& truth = *s.ground_truth();
        std::vector<double> all, active;
        std::size_t n_init = s.traces().empty() ? 0 : s.traces().front().selected.size();
        for (std::size_t i = 0; i < s.measured().size(); ++i) {
            all.push_back(truth[s.measured()[i]]);
            if (i >= n_init) active.push_back(truth[s.measured()[i]]);
        }
        nlohmann::json edges = nlohmann::json::array();
        for (int k = 0; k < 10; ++k) edges.push_back({k / 10.0, (k + 1) / 10.0});
        nlohmann::json h{{"ground_truth", to_string(*cfg.ground_truth)},
                         {"normalization", "min-max over the full grid"},
                         {"bins", edges},
                         {"counts_measured", unit_histogram(all, 10)},
                         {"counts_active", unit_histogram(active, 10)},
                         {"values_measured", all}};
        io::write_text(out / "histogram.json", h.dump(2) + "\n");
    }

    if (!s.traces().empty()) {
        const auto& mean = s.traces().back().mean;
        auto overlay = [&](int k, bool highest, const std::string& stem) {
            if (k <= 0) return;
            const auto ids = extreme_cells(mean, static_cast<std::size_t>(k), highest);
            nlohmann::json o{{"kind", highest ? "top" : "bottom"},
                             {"k", ids.size()},
                             {"step", s.traces().back().step},
                             {"cells", detail::cell_list(ds, ids, mean)}};
            io::write_text(out / (stem + ".json"), o.dump(2) + "\n");
            if (cfg.export_opts.png) {
                std::vector<double> mask(ds.size(), 0.0);
                for (auto id : ids) mask[id] = 1.0;
                io::write_png_preview(out / (stem + ".png"), mask, ds.height, ds.width);
            }
        };
        overlay(cfg.export_opts.top_k, true, "overlay_top");
        overlay(cfg.export_opts.bottom_k, false, "overlay_bottom");
        save_model(out / "model", s.model(), cfg.patch_window);
    }

    nlohmann::json summary{{"format", "dkpl-trace"},
                           {"config", cfg.to_json()},
                           {"dataset", {{"name", ds.name}, {"height", ds.height}, {"width", ds.width}}},
                           {"phase", to_string(s.phase())},
                           {"steps_completed", s.step()},
                           {"n_measured", s.measured().size()},
                           {"n_comparisons", s.judgments().size()},
                           {"measured", s.measured()}};
    if (!s.traces().empty()) {
        summary["initialization"] = s.traces().front().to_json(timing);
        summary["best"] = *s.best();
        summary["final_objective"] = s.traces().back().objective;
    }
    io::write_text(out / "trace.json", summary.dump(2) + "\n");
}

} // namespace dkpl

#endif
