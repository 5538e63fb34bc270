#ifndef DKPL_FEEDBACKD_HPP
#define DKPL_FEEDBACKD_HPP

// Feedback service core: pending comparisons, judgment intake, state
// snapshots and the event log. Transport lives in feedbackd_server.hpp.

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <ctime>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "errors.hpp"
#include "io.hpp"
#include "orchestrator.hpp"

namespace dkpl {

struct Event {
    std::uint64_t seq = 0;
    std::string type; // new_pending, step_completed, map_updated, step_suspended, finished, error
    nlohmann::json data;

    nlohmann::json to_json() const { return {{"seq", seq}, {"type", type}, {"data", data}}; }
};

struct Ack {
    std::uint64_t comparison_id = 0;
    bool accepted = true;
    bool replay = false;
    std::size_t remaining = 0;
    Outcome outcome = Outcome::APreferred;
    Confidence confidence = Confidence::Moderate;

    nlohmann::json to_json() const {
        return {{"comparison_id", comparison_id},
                {"accepted", accepted},
                {"replay", replay},
                {"remaining", remaining},
                {"outcome", to_string(outcome)},
                {"confidence", to_string(confidence)}};
    }
};

inline Outcome parse_outcome(const std::string& s) {
    if (s == "A" || s == "A_PREFERRED") return Outcome::APreferred;
    if (s == "B" || s == "B_PREFERRED") return Outcome::BPreferred;
    if (s == "TIE") return Outcome::Tie;
    throw ValidationError("outcome must be A, B or TIE, got '" + s + "'");
}

inline Confidence parse_confidence(const std::string& s) {
    try {
        return confidence_from_string(s);
    } catch (const InputError& e) {
        throw ValidationError(e.what());
    }
}

namespace detail {

inline std::string utc_now() {
    const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

// Polyline raster of a loop, y up, for a quick look in the browser.
inline std::string loop_png(const HysteresisLoop& loop, int size = 64) {
    std::vector<std::uint8_t> px(static_cast<std::size_t>(size) * size, 255);
    const auto [vlo, vhi] = std::minmax_element(loop.voltage.begin(), loop.voltage.end());
    const auto [rlo, rhi] = std::minmax_element(loop.response.begin(), loop.response.end());
    auto sx = [&](double v) { return *vhi > *vlo ? (v - *vlo) / (*vhi - *vlo) * (size - 1) : 0.5 * (size - 1); };
    auto sy = [&](double r) { return *rhi > *rlo ? (1.0 - (r - *rlo) / (*rhi - *rlo)) * (size - 1) : 0.5 * (size - 1); };
    for (std::size_t k = 0; k < loop.voltage.size(); ++k) {
        const std::size_t n = (k + 1) % loop.voltage.size();
        const double x0 = sx(loop.voltage[k]), y0 = sy(loop.response[k]);
        const double x1 = sx(loop.voltage[n]), y1 = sy(loop.response[n]);
        const int steps = 1 + static_cast<int>(std::max(std::abs(x1 - x0), std::abs(y1 - y0)));
        for (int t = 0; t <= steps; ++t) {
            const double u = static_cast<double>(t) / steps;
            const auto c = static_cast<int>(std::lround(x0 + u * (x1 - x0)));
            const auto r = static_cast<int>(std::lround(y0 + u * (y1 - y0)));
            px[static_cast<std::size_t>(r) * size + static_cast<std::size_t>(c)] = 0;
        }
    }
    return io::encode_png_gray(px, size, size);
}

// What the expert sees for one candidate. Never includes ground truth.
inline nlohmann::json candidate_view(const Session& s, std::size_t id) {
    const auto& ds = s.dataset();
    const auto g = ds.index(id);
    const int w = s.config().patch_window;
    const auto patch = extract_patch(ds.structure, g, w);
    std::vector<double> rowmajor;
    for (int r = 0; r < w; ++r)
        for (int c = 0; c < w; ++c) rowmajor.push_back(patch.values(r, c));
    nlohmann::json v{{"candidate_id", id},
                     {"row", g.row},
                     {"col", g.col},
                     {"patch", {{"window", w}, {"values", rowmajor}}},
                     {"patch_png", io::base64_encode(io::encode_png_gray(io::to_gray8(rowmajor), w, w))}};
    if (ds.payload == PayloadKind::Spectral) {
        const auto loop = ds.loop(id);
        v["payload"] = {{"kind", "spectral"}, {"voltage", loop.voltage}, {"response", loop.response}};
        v["payload_png"] = io::base64_encode(loop_png(loop));
    } else if (ds.payload == PayloadKind::Vector3) {
        nlohmann::json vecs = nlohmann::json::array();
        std::vector<double> angle;
        const int h = w / 2;
        for (int dr = -h; dr <= h; ++dr)
            for (int dc = -h; dc <= h; ++dc) {
                const int r = detail::reflect(g.row + dr, ds.height), c = detail::reflect(g.col + dc, ds.width);
                const auto p = ds.vectors.at(r, c);
                vecs.push_back({p.x(), p.y(), p.z()});
                angle.push_back(std::atan2(p.y(), p.x()));
            }
        v["payload"] = {{"kind", "vector3"}, {"window", w}, {"vectors", vecs}};
        v["payload_png"] = io::base64_encode(io::encode_png_gray(io::to_gray8(angle), w, w));
    } else {
        v["payload"] = {{"kind", "none"}};
    }
    return v;
}

// Block mean over k x k cells; edge blocks average what they cover.
inline std::vector<double> downsample(const Eigen::VectorXd& map, int height, int width, int k, int& oh, int& ow) {
    oh = (height + k - 1) / k;
    ow = (width + k - 1) / k;
    std::vector<double> out(static_cast<std::size_t>(oh) * ow, 0.0);
    for (int R = 0; R < oh; ++R)
        for (int C = 0; C < ow; ++C) {
            double sum = 0.0;
            int n = 0;
            for (int r = R * k; r < std::min(height, (R + 1) * k); ++r)
                for (int c = C * k; c < std::min(width, (C + 1) * k); ++c, ++n)
                    sum += map[static_cast<Eigen::Index>(r) * width + c];
            out[static_cast<std::size_t>(R) * ow + C] = sum / n;
        }
    return out;
}

} // namespace detail

struct ServiceOptions {
    std::optional<std::filesystem::path> state_dir; // session checkpoint after every step and on timeout
};

/// One HUMAN-mode session behind the HTTP/WS surface. Session mutations happen
/// on the runner thread; request handlers touch only the tables under `mu_`.
class FeedbackService {
public:
    FeedbackService(std::string id, Session session, ServiceOptions opt = {})
        : id_(std::move(id)), session_(std::move(session)), opt_(std::move(opt)) {
        refresh_snapshot();
    }

    ~FeedbackService() { stop(); }

    FeedbackService(const FeedbackService&) = delete;
    FeedbackService& operator=(const FeedbackService&) = delete;

    const std::string& id() const { return id_; }

    void start() {
        std::lock_guard lk(mu_);
        if (runner_.joinable()) return;
        stop_ = false;
        runner_ = std::thread([this] { run(); });
    }

    void stop() {
        {
            std::lock_guard lk(mu_);
            stop_ = true;
        }
        cv_.notify_all();
        if (runner_.joinable()) runner_.join();
    }

    nlohmann::json get_pending() const {
        std::lock_guard lk(mu_);
        nlohmann::json out = nlohmann::json::array();
        for (auto cid : current_)
            if (!acks_.count(cid)) out.push_back(views_.at(cid));
        return out;
    }

    Ack submit_judgment(std::uint64_t comparison_id, Outcome outcome, Confidence confidence) {
        std::unique_lock lk(mu_);
        if (auto it = acks_.find(comparison_id); it != acks_.end()) {
            Ack a = it->second;
            a.replay = true;
            return a;
        }
        auto it = requests_.find(comparison_id);
        if (it == requests_.end()) throw NotFoundError("unknown comparison id " + std::to_string(comparison_id));
        if (outcome == Outcome::Tie && !tie_support_)
            throw ValidationError("TIE outcome rejected: tie_support_enabled is false for this session");
        Judgment j;
        j.a = it->second.a;
        j.b = it->second.b;
        j.outcome = outcome;
        j.confidence = confidence;
        j.source = JudgeSource::Human;
        answers_[comparison_id] = j;
        Ack a;
        a.comparison_id = comparison_id;
        a.outcome = outcome;
        a.confidence = confidence;
        a.remaining = static_cast<std::size_t>(
            std::count_if(current_.begin(), current_.end(), [&](auto c) { return !answers_.count(c); }));
        acks_[comparison_id] = a;
        lk.unlock();
        cv_.notify_all();
        return a;
    }

    nlohmann::json get_state(int downsample = 1) const {
        if (downsample < 1) throw ValidationError("downsample must be >= 1");
        std::shared_ptr<const nlohmann::json> snap;
        std::shared_ptr<const std::pair<Eigen::VectorXd, Eigen::VectorXd>> maps;
        {
            std::lock_guard lk(mu_);
            snap = snapshot_;
            maps = maps_;
        }
        nlohmann::json out = *snap;
        const int H = out.at("height").get<int>(), W = out.at("width").get<int>();
        if (maps) {
            int oh = 0, ow = 0;
            out["mean"] = detail::downsample(maps->first, H, W, downsample, oh, ow);
            out["variance"] = detail::downsample(maps->second, H, W, downsample, oh, ow);
            out["map_height"] = oh;
            out["map_width"] = ow;
        } else {
            out["mean"] = nullptr;
            out["variance"] = nullptr;
        }
        out["downsample"] = downsample;
        {
            std::lock_guard lk(mu_);
            out["pending_count"] = std::count_if(current_.begin(), current_.end(), [&](auto c) { return !acks_.count(c); });
            out["last_event_seq"] = events_.empty() ? 0 : events_.back().seq;
        }
        return out;
    }

    std::vector<Event> events_since(std::uint64_t seq) const {
        std::lock_guard lk(mu_);
        std::vector<Event> out;
        for (const auto& e : events_)
            if (e.seq > seq) out.push_back(e);
        return out;
    }

    /// Called for every new event, from the thread that publishes it.
    using Listener = std::function<void(const Event&)>;
    std::uint64_t subscribe(Listener fn) {
        std::lock_guard lk(mu_);
        listeners_[++next_listener_] = std::move(fn);
        return next_listener_;
    }
    void unsubscribe(std::uint64_t token) {
        std::lock_guard lk(mu_);
        listeners_.erase(token);
    }

    /// Blocks until `pred(state)` holds or the timeout passes.
    bool wait_for(const std::function<bool(const nlohmann::json&)>& pred, std::chrono::milliseconds timeout) const {
        const auto deadline = std::chrono::steady_clock::now() + timeout;
        while (std::chrono::steady_clock::now() < deadline) {
            if (pred(get_state(1))) return true;
            std::this_thread::sleep_for(std::chrono::milliseconds(10));
        }
        return pred(get_state(1));
    }

    bool finished() const {
        std::lock_guard lk(mu_);
        return done_;
    }

    /// Number of judgments the session has consumed.
    std::size_t records() const {
        std::lock_guard lk(mu_);
        return consumed_;
    }

private:
    void publish(const std::string& type, nlohmann::json data) {
        std::vector<Listener> ls;
        Event e;
        {
            std::lock_guard lk(mu_);
            e.seq = ++seq_;
            e.type = type;
            e.data = std::move(data);
            events_.push_back(e);
            for (const auto& [k, fn] : listeners_) ls.push_back(fn);
        }
        for (const auto& fn : ls) fn(e);
    }

    // Runner thread only (and the constructor).
    void refresh_snapshot() {
        const auto& ds = session_.dataset();
        nlohmann::json m = nlohmann::json::array();
        for (auto id : session_.measured()) {
            const auto g = ds.index(id);
            m.push_back({{"id", id}, {"row", g.row}, {"col", g.col}});
        }
        const auto best = session_.best();
        const auto beta = session_.beta_in_effect();
        auto snap = std::make_shared<nlohmann::json>(nlohmann::json{
            {"session_id", id_},
            {"step", session_.step()},
            {"initialized", !session_.traces().empty()},
            {"phase", to_string(session_.phase())},
            {"height", ds.height},
            {"width", ds.width},
            {"payload", to_string(ds.payload)},
            {"measured", m},
            {"current_best", best ? nlohmann::json(*best) : nlohmann::json(nullptr)},
            {"beta", beta ? nlohmann::json(*beta) : nlohmann::json(nullptr)},
            {"n_comparisons", session_.judgments().size()},
            {"tie_support_enabled", session_.config().likelihood.tie_support},
            {"confidence_weighting_enabled", session_.config().likelihood.confidence_weighting},
            {"n_steps", session_.config().n_steps}});
        std::shared_ptr<const std::pair<Eigen::VectorXd, Eigen::VectorXd>> maps;
        if (!session_.traces().empty())
            maps = std::make_shared<const std::pair<Eigen::VectorXd, Eigen::VectorXd>>(session_.mean(), session_.variance());
        std::lock_guard lk(mu_);
        snapshot_ = std::move(snap);
        maps_ = std::move(maps);
        tie_support_ = session_.config().likelihood.tie_support;
        consumed_ = session_.judgments().size();
    }

    void checkpoint() {
        if (opt_.state_dir) session_.save(*opt_.state_dir);
    }

    void run() {
        try {
            for (;;) {
                if (session_.finished()) break;
                std::vector<ComparisonRequest> reqs;
                try {
                    reqs = session_.begin();
                } catch (const ExhaustionSignal&) {
                    break;
                }
                const int step = session_.phase() == Phase::Awaiting && session_.traces().empty() ? 0 : session_.step() + 1;
                nlohmann::json ids = nlohmann::json::array();
                {
                    std::lock_guard lk(mu_);
                    current_.clear();
                    for (const auto& r : reqs) {
                        const auto cid = ++next_comparison_;
                        requests_[cid] = r;
                        current_.push_back(cid);
                        views_[cid] = {{"comparison_id", cid},
                                       {"step", step},
                                       {"issued_at", detail::utc_now()},
                                       {"a", detail::candidate_view(session_, r.a)},
                                       {"b", detail::candidate_view(session_, r.b)}};
                        ids.push_back(cid);
                    }
                }
                refresh_snapshot();
                publish("new_pending", {{"step", step}, {"comparison_ids", ids}});

                std::vector<Judgment> js;
                {
                    std::unique_lock lk(mu_);
                    auto all_answered = [&] {
                        return stop_ || std::all_of(current_.begin(), current_.end(), [&](auto c) { return answers_.count(c) > 0; });
                    };
                    const double timeout = session_.config().human_timeout_s;
                    if (timeout > 0.0) {
                        if (!cv_.wait_for(lk, std::chrono::duration<double>(timeout), all_answered)) {
                            lk.unlock();
                            checkpoint();
                            publish("step_suspended", {{"step", step}});
                            lk.lock();
                        }
                    }
                    cv_.wait(lk, all_answered);
                    if (stop_) break;
                    for (auto c : current_) js.push_back(answers_.at(c));
                }
                session_.finish(std::move(js));
                {
                    std::lock_guard lk(mu_);
                    current_.clear();
                }
                refresh_snapshot();
                checkpoint();
                publish("step_completed", {{"step", session_.step()}});
                publish("map_updated", {{"step", session_.step()}});
            }
            {
                std::lock_guard lk(mu_);
                done_ = true;
            }
            refresh_snapshot();
            publish("finished", {{"step", session_.step()}});
        } catch (const std::exception& e) {
            try {
                checkpoint();
            } catch (...) {
            }
            {
                std::lock_guard lk(mu_);
                done_ = true;
            }
            publish("error", {{"message", e.what()}});
        }
    }

    std::string id_;
    Session session_;
    ServiceOptions opt_;

    mutable std::mutex mu_;
    std::condition_variable cv_;
    std::thread runner_;
    bool stop_ = false;
    bool done_ = false;
    bool tie_support_ = true;
    std::size_t consumed_ = 0;
    std::uint64_t next_comparison_ = 0;
    std::uint64_t seq_ = 0;
    std::uint64_t next_listener_ = 0;
    std::vector<std::uint64_t> current_;
    std::map<std::uint64_t, ComparisonRequest> requests_;
    std::map<std::uint64_t, nlohmann::json> views_;
    std::map<std::uint64_t, Judgment> answers_;
    std::map<std::uint64_t, Ack> acks_;
    std::vector<Event> events_;
    std::map<std::uint64_t, Listener> listeners_;
    std::shared_ptr<const nlohmann::json> snapshot_;
    std::shared_ptr<const std::pair<Eigen::VectorXd, Eigen::VectorXd>> maps_;
};

/// Session id -> service. Holds one session unless `multi` is set.
class ServiceRegistry {
public:
    explicit ServiceRegistry(bool multi = false) : multi_(multi) {}

    std::shared_ptr<FeedbackService> add(std::shared_ptr<FeedbackService> s) {
        std::lock_guard lk(mu_);
        if (!multi_ && !map_.empty()) throw StateError("registry holds a single session; enable multi-session mode");
        if (map_.count(s->id())) throw StateError("session '" + s->id() + "' already registered");
        map_[s->id()] = s;
        return s;
    }

    std::shared_ptr<FeedbackService> get(const std::string& id) const {
        std::lock_guard lk(mu_);
        auto it = map_.find(id);
        if (it == map_.end()) throw NotFoundError("unknown session '" + id + "'");
        return it->second;
    }

private:
    bool multi_;
    mutable std::mutex mu_;
    std::map<std::string, std::shared_ptr<FeedbackService>> map_;
};

} // namespace dkpl

#endif
