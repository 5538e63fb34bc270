#ifndef DKPL_FEEDBACKD_SERVER_HPP
#define DKPL_FEEDBACKD_SERVER_HPP

// HTTP + WebSocket transport for the feedback service (Boost.Beast).
//
//   GET  /api/session/{id}/pending
//   POST /api/session/{id}/judgment   {"comparison_id":n,"outcome":"A|B|TIE","confidence":"WEAK|MODERATE|STRONG"}
//   GET  /api/session/{id}/state?downsample=k
//   WS   /api/session/{id}/events?since=seq

#include <deque>
#include <memory>
#include <optional>
#include <string>
#include <thread>

#include <boost/asio.hpp>
#include <boost/beast.hpp>
#include <boost/beast/websocket.hpp>
#include <nlohmann/json.hpp>

#include "feedbackd.hpp"

namespace dkpl::server {

namespace beast = boost::beast;
namespace http = beast::http;
namespace websocket = beast::websocket;
namespace net = boost::asio;
using tcp = net::ip::tcp;

struct Route {
    std::string session;
    std::string action; // pending, judgment, state, events
    std::map<std::string, std::string> query;
};

inline std::optional<Route> parse_route(std::string_view target) {
    Route r;
    std::string_view path = target, query;
    if (const auto q = target.find('?'); q != std::string_view::npos) {
        path = target.substr(0, q);
        query = target.substr(q + 1);
    }
    constexpr std::string_view prefix = "/api/session/";
    if (path.substr(0, prefix.size()) != prefix) return std::nullopt;
    path.remove_prefix(prefix.size());
    const auto slash = path.find('/');
    if (slash == std::string_view::npos || slash == 0) return std::nullopt;
    r.session = std::string(path.substr(0, slash));
    r.action = std::string(path.substr(slash + 1));
    while (!query.empty()) {
        const auto amp = query.find('&');
        const auto item = query.substr(0, amp);
        const auto eq = item.find('=');
        if (eq != std::string_view::npos) r.query[std::string(item.substr(0, eq))] = std::string(item.substr(eq + 1));
        query = amp == std::string_view::npos ? std::string_view{} : query.substr(amp + 1);
    }
    return r;
}

struct Reply {
    http::status status = http::status::ok;
    nlohmann::json body;
};

inline Reply error_reply(http::status st, const std::string& kind, const std::string& msg) {
    return {st, {{"error", kind}, {"message", msg}}};
}

/// Request dispatch without any socket; the server and tests share it.
inline Reply handle(const ServiceRegistry& reg, http::verb method, std::string_view target, const std::string& body) {
    const auto route = parse_route(target);
    if (!route) return error_reply(http::status::not_found, "not_found", "no such endpoint");
    try {
        const auto svc = reg.get(route->session);
        if (route->action == "pending") {
            if (method != http::verb::get) return error_reply(http::status::method_not_allowed, "method", "use GET");
            return {http::status::ok, svc->get_pending()};
        }
        if (route->action == "state") {
            if (method != http::verb::get) return error_reply(http::status::method_not_allowed, "method", "use GET");
            int k = 1;
            if (auto it = route->query.find("downsample"); it != route->query.end()) {
                try {
                    k = std::stoi(it->second);
                } catch (const std::exception&) {
                    throw ValidationError("downsample must be an integer");
                }
            }
            return {http::status::ok, svc->get_state(k)};
        }
        if (route->action == "judgment") {
            if (method != http::verb::post) return error_reply(http::status::method_not_allowed, "method", "use POST");
            nlohmann::json j;
            try {
                j = nlohmann::json::parse(body);
            } catch (const nlohmann::json::exception& e) {
                throw ValidationError(std::string("judgment body is not JSON: ") + e.what());
            }
            if (!j.is_object() || !j.contains("comparison_id") || !j.contains("outcome") || !j.contains("confidence") ||
                !j["comparison_id"].is_number_unsigned() || !j["outcome"].is_string() || !j["confidence"].is_string())
                throw ValidationError("judgment body needs comparison_id, outcome and confidence");
            const auto ack = svc->submit_judgment(j["comparison_id"].get<std::uint64_t>(),
                                                  parse_outcome(j["outcome"].get<std::string>()),
                                                  parse_confidence(j["confidence"].get<std::string>()));
            return {http::status::ok, ack.to_json()};
        }
        return error_reply(http::status::not_found, "not_found", "no such endpoint");
    } catch (const NotFoundError& e) {
        return error_reply(http::status::not_found, "not_found", e.what());
    } catch (const ValidationError& e) {
        return error_reply(http::status::unprocessable_entity, "validation", e.what());
    } catch (const std::exception& e) {
        return error_reply(http::status::internal_server_error, "internal", e.what());
    }
}

class WsSession : public std::enable_shared_from_this<WsSession> {
public:
    WsSession(tcp::socket&& sock, std::shared_ptr<FeedbackService> svc, std::uint64_t since)
        : ws_(std::move(sock)), svc_(std::move(svc)), since_(since) {}

    ~WsSession() {
        if (token_) svc_->unsubscribe(*token_);
    }

    void run(http::request<http::string_body> req) {
        ws_.set_option(websocket::stream_base::timeout::suggested(beast::role_type::server));
        ws_.async_accept(req, beast::bind_front_handler(&WsSession::on_accept, shared_from_this()));
    }

private:
    void on_accept(beast::error_code ec) {
        if (ec) return;
        std::weak_ptr<WsSession> weak = shared_from_this();
        auto exec = ws_.get_executor();
        // Subscribe first, then replay history: an event may arrive twice,
        // never zero times. Clients drop duplicates by sequence number.
        token_ = svc_->subscribe([weak, exec](const Event& e) {
            net::post(exec, [weak, e] {
                if (auto self = weak.lock()) self->send(e);
            });
        });
        for (const auto& e : svc_->events_since(since_)) send(e);
        do_read();
    }

    void send(const Event& e) {
        if (e.seq <= last_sent_) return;
        last_sent_ = e.seq;
        queue_.push_back(e.to_json().dump());
        if (queue_.size() == 1) do_write();
    }

    void do_write() {
        ws_.text(true);
        ws_.async_write(net::buffer(queue_.front()), [self = shared_from_this()](beast::error_code ec, std::size_t) {
            if (ec) return;
            self->queue_.pop_front();
            if (!self->queue_.empty()) self->do_write();
        });
    }

    void do_read() {
        ws_.async_read(buf_, [self = shared_from_this()](beast::error_code ec, std::size_t) {
            if (ec) return; // closed; resync through /state
            self->buf_.consume(self->buf_.size());
            self->do_read();
        });
    }

    websocket::stream<beast::tcp_stream> ws_;
    std::shared_ptr<FeedbackService> svc_;
    std::uint64_t since_;
    std::uint64_t last_sent_ = 0;
    std::optional<std::uint64_t> token_;
    beast::flat_buffer buf_;
    std::deque<std::string> queue_;
};

class HttpSession : public std::enable_shared_from_this<HttpSession> {
public:
    HttpSession(tcp::socket&& sock, const ServiceRegistry& reg) : stream_(std::move(sock)), reg_(reg) {}

    void run() { do_read(); }

private:
    void do_read() {
        req_ = {};
        stream_.expires_after(std::chrono::seconds(60));
        http::async_read(stream_, buf_, req_, beast::bind_front_handler(&HttpSession::on_read, shared_from_this()));
    }

    void on_read(beast::error_code ec, std::size_t) {
        if (ec) return;
        if (websocket::is_upgrade(req_)) {
            const auto route = parse_route(std::string_view(req_.target().data(), req_.target().size()));
            std::shared_ptr<FeedbackService> svc;
            try {
                if (route && route->action == "events") svc = reg_.get(route->session);
            } catch (const NotFoundError&) {
            }
            if (!svc) {
                write(error_reply(http::status::not_found, "not_found", "no such event stream"), false);
                return;
            }
            std::uint64_t since = 0;
            if (auto it = route->query.find("since"); it != route->query.end()) since = std::stoull(it->second);
            stream_.expires_never();
            std::make_shared<WsSession>(stream_.release_socket(), svc, since)->run(std::move(req_));
            return;
        }
        write(handle(reg_, req_.method(), std::string_view(req_.target().data(), req_.target().size()), req_.body()), req_.keep_alive());
    }

    void write(const Reply& r, bool keep_alive) {
        auto res = std::make_shared<http::response<http::string_body>>(r.status, req_.version());
        res->set(http::field::server, "dkpl-feedbackd");
        res->set(http::field::content_type, "application/json");
        res->set(http::field::access_control_allow_origin, "*");
        res->keep_alive(keep_alive);
        res->body() = r.body.dump();
        res->prepare_payload();
        http::async_write(stream_, *res, [self = shared_from_this(), res](beast::error_code ec, std::size_t) {
            if (ec) return;
            if (!res->keep_alive()) {
                self->stream_.socket().shutdown(tcp::socket::shutdown_send, ec);
                return;
            }
            self->do_read();
        });
    }

    beast::tcp_stream stream_;
    const ServiceRegistry& reg_;
    beast::flat_buffer buf_;
    http::request<http::string_body> req_;
};

/// Listens on 127.0.0.1 (or `address`) and serves the registry on one I/O
/// thread until stop().
class Server {
public:
    Server(const ServiceRegistry& reg, unsigned short port, const std::string& address = "127.0.0.1")
        : reg_(reg), acceptor_(ioc_) {
        const tcp::endpoint ep(net::ip::make_address(address), port);
        acceptor_.open(ep.protocol());
        acceptor_.set_option(net::socket_base::reuse_address(true));
        acceptor_.bind(ep);
        acceptor_.listen(net::socket_base::max_listen_connections);
    }

    ~Server() { stop(); }

    unsigned short port() const { return acceptor_.local_endpoint().port(); }

    void start() {
        do_accept();
        thread_ = std::thread([this] { ioc_.run(); });
    }

    void stop() {
        ioc_.stop();
        if (thread_.joinable()) thread_.join();
    }

    /// Runs on the calling thread.
    void run() {
        do_accept();
        ioc_.run();
    }

private:
    void do_accept() {
        acceptor_.async_accept(net::make_strand(ioc_), [this](beast::error_code ec, tcp::socket sock) {
            if (!ec) std::make_shared<HttpSession>(std::move(sock), reg_)->run();
            if (acceptor_.is_open()) do_accept();
        });
    }

    const ServiceRegistry& reg_;
    net::io_context ioc_{1};
    tcp::acceptor acceptor_;
    std::thread thread_;
};

} // namespace dkpl::server

#endif
