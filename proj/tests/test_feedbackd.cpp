#include <gtest/gtest.h>

#include <chrono>
#include <filesystem>
#include <functional>

#include "dkpl/feedbackd.hpp"
#include "dkpl/feedbackd_server.hpp"

using namespace dkpl;
using namespace std::chrono_literals;
namespace fs = std::filesystem;
namespace http = boost::beast::http;

namespace {

ExperimentConfig human_config(int steps = 3, bool ties = true) {
    ExperimentConfig c;
    c.dataset = {{"synthetic", "stripes"}, {"seed", 1}, {"height", 10}, {"width", 10}};
    c.judge = JudgeMode::Human;
    c.patch_window = 3;
    c.n_initial_random = 6;
    c.n_steps = steps;
    c.epochs = 20;
    c.seed = 5;
    c.likelihood.tie_support = ties;
    c.validate();
    return c;
}

std::shared_ptr<FeedbackService> make_service(ExperimentConfig cfg, const std::string& id = "s1",
                                              ServiceOptions opt = {}) {
    return std::make_shared<FeedbackService>(id, Session(std::move(cfg)), opt);
}

bool wait_pending(const FeedbackService& svc, std::size_t at_least = 1) {
    return svc.wait_for([&](const nlohmann::json& s) { return s["pending_count"].get<std::size_t>() >= at_least; },
                        10s);
}

// Answers every pending comparison with A.
void answer_all(FeedbackService& svc) {
    for (const auto& p : svc.get_pending())
        svc.submit_judgment(p["comparison_id"].get<std::uint64_t>(), Outcome::APreferred, Confidence::Strong);
}

bool has_key_containing(const nlohmann::json& j, const std::string& needle) {
    if (j.is_object())
        for (const auto& [k, v] : j.items())
            if (k.find(needle) != std::string::npos || has_key_containing(v, needle)) return true;
    if (j.is_array())
        for (const auto& v : j)
            if (has_key_containing(v, needle)) return true;
    return false;
}

// Minimal synchronous HTTP client.
std::pair<int, nlohmann::json> request(unsigned short port, http::verb verb, const std::string& target,
                                       const std::string& body = "") {
    boost::asio::io_context ioc;
    boost::beast::tcp_stream stream(ioc);
    stream.connect(boost::asio::ip::tcp::endpoint(boost::asio::ip::make_address("127.0.0.1"), port));
    http::request<http::string_body> req{verb, target, 11};
    req.set(http::field::host, "127.0.0.1");
    req.set(http::field::content_type, "application/json");
    req.body() = body;
    req.prepare_payload();
    http::write(stream, req);
    boost::beast::flat_buffer buf;
    http::response<http::string_body> res;
    http::read(stream, buf, res);
    boost::beast::error_code ec;
    stream.socket().shutdown(boost::asio::ip::tcp::socket::shutdown_both, ec);
    return {static_cast<int>(res.result_int()), nlohmann::json::parse(res.body())};
}

} // namespace

TEST(Parse, OutcomesAndConfidences) {
    EXPECT_EQ(parse_outcome("A"), Outcome::APreferred);
    EXPECT_EQ(parse_outcome("B_PREFERRED"), Outcome::BPreferred);
    EXPECT_EQ(parse_outcome("TIE"), Outcome::Tie);
    EXPECT_THROW(parse_outcome("maybe"), ValidationError);
    EXPECT_EQ(parse_confidence("WEAK"), Confidence::Weak);
    EXPECT_THROW(parse_confidence("VERY"), ValidationError);
}

TEST(Route, ParsesPathAndQuery) {
    const auto r = server::parse_route("/api/session/abc/state?downsample=4&x=1");
    ASSERT_TRUE(r);
    EXPECT_EQ(r->session, "abc");
    EXPECT_EQ(r->action, "state");
    EXPECT_EQ(r->query.at("downsample"), "4");
    EXPECT_FALSE(server::parse_route("/api/other"));
    EXPECT_FALSE(server::parse_route("/api/session//state"));
}

TEST(Downsample, BlockMeans) {
    Eigen::VectorXd m(6);
    m << 1, 2, 3, 4, 5, 6; // 2 x 3
    int oh = 0, ow = 0;
    const auto d = detail::downsample(m, 2, 3, 2, oh, ow);
    EXPECT_EQ(oh, 1);
    EXPECT_EQ(ow, 2);
    EXPECT_DOUBLE_EQ(d[0], (1 + 2 + 4 + 5) / 4.0);
    EXPECT_DOUBLE_EQ(d[1], (3 + 6) / 2.0);
}

TEST(Service, InitialPendingThenStepOfThree) {
    auto svc = make_service(human_config());
    svc->start();
    ASSERT_TRUE(wait_pending(*svc));
    const auto init = svc->get_pending();
    EXPECT_EQ(init.size(), 4u); // 3 disjoint pairs + closure
    for (const auto& p : init) {
        EXPECT_EQ(p["step"], 0);
        EXPECT_TRUE(p["a"].contains("patch_png"));
        EXPECT_EQ(p["a"]["payload"]["kind"], "spectral");
    }
    answer_all(*svc);
    ASSERT_TRUE(svc->wait_for([](const nlohmann::json& s) { return s["step"] == 0 && s["initialized"] == true &&
                                                                   s["pending_count"].get<int>() > 0; },
                              10s));
    const auto step1 = svc->get_pending();
    const auto st = svc->get_state();
    ASSERT_FALSE(step1.empty());
    EXPECT_EQ(step1[0]["step"], 1);
    // One record per distinct pair among (first, second, best).
    const auto best = st["current_best"].get<std::size_t>();
    const auto a = step1[0]["a"]["candidate_id"].get<std::size_t>(), b = step1[0]["b"]["candidate_id"].get<std::size_t>();
    EXPECT_EQ(step1.size(), best == a || best == b ? 1u : 3u);
    svc->stop();
}

TEST(Service, AckCountsRemainingAndReplayIsIdempotent) {
    auto svc = make_service(human_config());
    svc->start();
    ASSERT_TRUE(wait_pending(*svc));
    const auto pending = svc->get_pending();
    const auto first = pending[0]["comparison_id"].get<std::uint64_t>();
    const auto ack = svc->submit_judgment(first, Outcome::BPreferred, Confidence::Weak);
    EXPECT_TRUE(ack.accepted);
    EXPECT_FALSE(ack.replay);
    EXPECT_EQ(ack.remaining, pending.size() - 1);
    const auto again = svc->submit_judgment(first, Outcome::APreferred, Confidence::Strong);
    EXPECT_TRUE(again.replay);
    EXPECT_EQ(again.outcome, Outcome::BPreferred); // the first answer stands
    EXPECT_EQ(svc->get_pending().size(), pending.size() - 1);

    answer_all(*svc);
    ASSERT_TRUE(svc->wait_for([](const nlohmann::json& s) { return s["initialized"] == true; }, 10s));
    EXPECT_EQ(svc->records(), pending.size());
    svc->submit_judgment(first, Outcome::APreferred, Confidence::Strong);
    EXPECT_EQ(svc->records(), pending.size());
    EXPECT_THROW(svc->submit_judgment(999999, Outcome::APreferred, Confidence::Weak), NotFoundError);
    svc->stop();
}

TEST(Service, TieRejectedWhenDisabled) {
    auto svc = make_service(human_config(2, false));
    svc->start();
    ASSERT_TRUE(wait_pending(*svc));
    const auto cid = svc->get_pending()[0]["comparison_id"].get<std::uint64_t>();
    try {
        svc->submit_judgment(cid, Outcome::Tie, Confidence::Strong);
        FAIL() << "expected ValidationError";
    } catch (const ValidationError& e) {
        EXPECT_NE(std::string(e.what()).find("tie_support_enabled"), std::string::npos);
    }
    EXPECT_FALSE(svc->get_state()["tie_support_enabled"].get<bool>());
    EXPECT_NO_THROW(svc->submit_judgment(cid, Outcome::APreferred, Confidence::Strong));
    svc->stop();
}

TEST(Service, StateDimensionsAndDownsample) {
    auto svc = make_service(human_config());
    auto st = svc->get_state();
    EXPECT_EQ(st["height"], 10);
    EXPECT_EQ(st["width"], 10);
    EXPECT_TRUE(st["mean"].is_null());
    EXPECT_FALSE(st["initialized"].get<bool>());
    svc->start();
    ASSERT_TRUE(wait_pending(*svc));
    answer_all(*svc);
    ASSERT_TRUE(svc->wait_for([](const nlohmann::json& s) { return s["initialized"] == true; }, 10s));
    st = svc->get_state(1);
    EXPECT_EQ(st["mean"].size(), 100u);
    EXPECT_EQ(st["measured"].size(), 6u);
    const auto d = svc->get_state(3);
    EXPECT_EQ(d["map_height"], 4);
    EXPECT_EQ(d["map_width"], 4);
    EXPECT_EQ(d["mean"].size(), 16u);
    EXPECT_THROW(svc->get_state(0), ValidationError);
    svc->stop();
}

TEST(Service, EventsAreOrderedAndCoverAStep) {
    std::vector<Event> live;
    std::mutex mu;
    auto svc = make_service(human_config(1));
    svc->subscribe([&](const Event& e) {
        std::lock_guard lk(mu);
        live.push_back(e);
    });
    svc->start();
    for (int round = 0; round < 2; ++round) {
        ASSERT_TRUE(svc->wait_for(
            [&](const nlohmann::json& s) {
                const auto p = svc->get_pending();
                return s["pending_count"] > 0 && !p.empty() && p[0]["step"] == round;
            },
            10s));
        answer_all(*svc);
    }
    ASSERT_TRUE(svc->wait_for([&](const nlohmann::json&) { return svc->finished(); }, 10s));
    svc->stop();
    const auto all = svc->events_since(0);
    std::vector<std::string> types;
    for (std::size_t i = 0; i < all.size(); ++i) {
        EXPECT_EQ(all[i].seq, i + 1);
        types.push_back(all[i].type);
    }
    const std::vector<std::string> expect{"new_pending", "step_completed", "map_updated",
                                          "new_pending", "step_completed", "map_updated", "finished"};
    EXPECT_EQ(types, expect);
    EXPECT_EQ(svc->events_since(5).size(), 2u);
    std::lock_guard lk(mu);
    EXPECT_EQ(live.size(), all.size());
}

TEST(Service, TimeoutSuspendsAndCheckpoints) {
    auto cfg = human_config(1);
    cfg.human_timeout_s = 0.05;
    const auto dir = fs::temp_directory_path() / "dkpl_test_feedbackd_suspend";
    fs::remove_all(dir);
    auto svc = make_service(cfg, "s1", {dir});
    svc->start();
    ASSERT_TRUE(svc->wait_for(
        [&](const nlohmann::json&) {
            for (const auto& e : svc->events_since(0))
                if (e.type == "step_suspended") return true;
            return false;
        },
        10s));
    const auto resumed = Session::load(dir);
    EXPECT_EQ(resumed.phase(), Phase::Awaiting);
    answer_all(*svc); // late answers still complete the step
    ASSERT_TRUE(svc->wait_for([](const nlohmann::json& s) { return s["initialized"] == true; }, 10s));
    svc->stop();
}

TEST(Service, NoGroundTruthInPayloads) {
    auto cfg = human_config();
    cfg.ground_truth = GroundTruthMap::LoopArea;
    auto svc = make_service(cfg);
    svc->start();
    ASSERT_TRUE(wait_pending(*svc));
    const auto pending = svc->get_pending();
    EXPECT_FALSE(has_key_containing(pending, "truth"));
    EXPECT_FALSE(has_key_containing(pending, "loop_area"));
    EXPECT_FALSE(has_key_containing(svc->get_state(), "truth"));
    svc->stop();
}

TEST(Registry, SingleSessionByDefault) {
    server::Reply r;
    ServiceRegistry reg;
    reg.add(make_service(human_config(), "one"));
    EXPECT_THROW(reg.add(make_service(human_config(), "two")), StateError);
    EXPECT_THROW(reg.get("two"), NotFoundError);
    ServiceRegistry multi(true);
    multi.add(make_service(human_config(), "one"));
    multi.add(make_service(human_config(), "two"));
    EXPECT_THROW(multi.add(make_service(human_config(), "two")), StateError);
}

TEST(Handle, StatusCodes) {
    ServiceRegistry reg;
    auto svc = reg.add(make_service(human_config(), "s1"));
    svc->start();
    ASSERT_TRUE(wait_pending(*svc));
    using server::handle;
    EXPECT_EQ(handle(reg, http::verb::get, "/api/session/nope/pending", "").status, http::status::not_found);
    EXPECT_EQ(handle(reg, http::verb::get, "/api/session/s1/bogus", "").status, http::status::not_found);
    EXPECT_EQ(handle(reg, http::verb::get, "/elsewhere", "").status, http::status::not_found);
    EXPECT_EQ(handle(reg, http::verb::post, "/api/session/s1/pending", "").status, http::status::method_not_allowed);
    EXPECT_EQ(handle(reg, http::verb::get, "/api/session/s1/judgment", "").status, http::status::method_not_allowed);
    EXPECT_EQ(handle(reg, http::verb::post, "/api/session/s1/judgment", "{").status, http::status::unprocessable_entity);
    EXPECT_EQ(handle(reg, http::verb::post, "/api/session/s1/judgment", R"({"comparison_id":1})").status,
              http::status::unprocessable_entity);
    EXPECT_EQ(handle(reg, http::verb::post, "/api/session/s1/judgment",
                     R"({"comparison_id":1,"outcome":"X","confidence":"WEAK"})")
                  .status,
              http::status::unprocessable_entity);
    EXPECT_EQ(handle(reg, http::verb::post, "/api/session/s1/judgment",
                     R"({"comparison_id":12345,"outcome":"A","confidence":"WEAK"})")
                  .status,
              http::status::not_found);
    EXPECT_EQ(handle(reg, http::verb::get, "/api/session/s1/state?downsample=x", "").status,
              http::status::unprocessable_entity);
    const auto ok = handle(reg, http::verb::post, "/api/session/s1/judgment",
                           R"({"comparison_id":1,"outcome":"TIE","confidence":"MODERATE"})");
    EXPECT_EQ(ok.status, http::status::ok);
    EXPECT_EQ(ok.body["remaining"], 3);
    svc->stop();
}

TEST(Server, HttpAndWebSocketRoundTrip) {
    ServiceRegistry reg;
    auto svc = reg.add(make_service(human_config(1), "live"));
    server::Server srv(reg, 0);
    srv.start();
    svc->start();
    ASSERT_TRUE(wait_pending(*svc));
    const auto port = srv.port();

    auto [code, pending] = request(port, http::verb::get, "/api/session/live/pending");
    EXPECT_EQ(code, 200);
    ASSERT_EQ(pending.size(), 4u);
    EXPECT_EQ(request(port, http::verb::get, "/api/session/other/pending").first, 404);

    namespace websocket = boost::beast::websocket;
    boost::asio::io_context ioc;
    websocket::stream<boost::beast::tcp_stream> ws(ioc);
    boost::beast::get_lowest_layer(ws).connect(
        boost::asio::ip::tcp::endpoint(boost::asio::ip::make_address("127.0.0.1"), port));
    boost::beast::get_lowest_layer(ws).expires_after(30s);
    ws.handshake("127.0.0.1", "/api/session/live/events?since=0");

    auto next = [&] {
        boost::beast::flat_buffer buf;
        ws.read(buf);
        return nlohmann::json::parse(boost::beast::buffers_to_string(buf.data()));
    };
    const auto replayed = next();
    EXPECT_EQ(replayed["seq"], 1);
    EXPECT_EQ(replayed["type"], "new_pending");

    for (const auto& p : pending) {
        const auto body = nlohmann::json{{"comparison_id", p["comparison_id"]}, {"outcome", "A"}, {"confidence", "STRONG"}};
        const auto [c, ack] = request(port, http::verb::post, "/api/session/live/judgment", body.dump());
        EXPECT_EQ(c, 200);
        EXPECT_TRUE(ack["accepted"].get<bool>());
    }
    const auto e2 = next();
    EXPECT_EQ(e2["seq"], 2);
    EXPECT_EQ(e2["type"], "step_completed");
    EXPECT_EQ(next()["type"], "map_updated");

    const auto [sc, state] = request(port, http::verb::get, "/api/session/live/state?downsample=2");
    EXPECT_EQ(sc, 200);
    EXPECT_TRUE(state["initialized"].get<bool>());
    EXPECT_EQ(state["mean"].size(), 25u);

    boost::beast::error_code ec;
    ws.close(websocket::close_code::normal, ec);
    svc->stop();
    srv.stop();
}
