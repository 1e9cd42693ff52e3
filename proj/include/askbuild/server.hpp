#pragma once

// HTTP + WebSocket front end for play sessions. One thread per connection;
// each WebSocket connection owns one Session.

#include <atomic>
#include <filesystem>
#include <fstream>
#include <memory>
#include <mutex>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <boost/asio/ip/tcp.hpp>
#include <boost/beast/core.hpp>
#include <boost/beast/http.hpp>
#include <boost/beast/websocket.hpp>

#include "askbuild/session.hpp"

namespace askbuild {

struct ServerOptions {
    std::string address = "127.0.0.1";
    unsigned short port = 8080;  // 0 picks a free port
    std::filesystem::path assets;  // console build directory; empty serves a placeholder
    std::size_t max_steps = kDefaultMaxSteps;
};

namespace detail {

inline std::string mime_type(const std::filesystem::path& p) {
    auto ext = p.extension().string();
    if (ext == ".html") return "text/html";
    if (ext == ".js" || ext == ".mjs") return "application/javascript";
    if (ext == ".css") return "text/css";
    if (ext == ".json") return "application/json";
    if (ext == ".svg") return "image/svg+xml";
    if (ext == ".png") return "image/png";
    return "application/octet-stream";
}

inline constexpr const char* kPlaceholderPage =
    "<!doctype html><html><head><title>builder</title></head><body>"
    "<p>Console assets not installed. Connect a WebSocket client to this address.</p></body></html>";

}  // namespace detail

class PlayServer {
public:
    PlayServer(std::shared_ptr<const Predictor> predictor, ServerOptions options)
        : predictor_(std::move(predictor)), options_(std::move(options)) {}

    ~PlayServer() { stop(); }

    PlayServer(const PlayServer&) = delete;
    PlayServer& operator=(const PlayServer&) = delete;

    /// Binds and starts accepting in the background. Returns the bound port.
    unsigned short start() {
        namespace net = boost::asio;
        auto addr = net::ip::make_address(options_.address);
        acceptor_ = std::make_unique<net::ip::tcp::acceptor>(ioc_);
        net::ip::tcp::endpoint ep(addr, options_.port);
        acceptor_->open(ep.protocol());
        acceptor_->set_option(net::socket_base::reuse_address(true));
        acceptor_->bind(ep);
        acceptor_->listen();
        port_ = acceptor_->local_endpoint().port();
        running_ = true;
        accept_thread_ = std::thread([this] { accept_loop(); });
        return port_;
    }

    /// Blocks until stop() is called from elsewhere.
    void wait() {
        if (accept_thread_.joinable()) accept_thread_.join();
    }

    void stop() {
        if (!running_.exchange(false)) {
            if (accept_thread_.joinable()) accept_thread_.join();
            return;
        }
        // Wake the blocking accept with a throwaway connection.
        try {
            boost::asio::io_context ioc;
            boost::asio::ip::tcp::socket s(ioc);
            s.connect({boost::asio::ip::make_address(options_.address == "0.0.0.0" ? "127.0.0.1" : options_.address), port_});
        } catch (const std::exception&) {
        }
        if (accept_thread_.joinable()) accept_thread_.join();
        std::vector<std::thread> workers;
        {
            std::lock_guard lock(mu_);
            for (auto& c : open_) {
                boost::system::error_code ec;
                c->shutdown(boost::asio::ip::tcp::socket::shutdown_both, ec);
                c->close(ec);
            }
            workers.swap(workers_);
        }
        for (auto& t : workers) t.join();
    }

    unsigned short port() const { return port_; }
    std::size_t sessions_started() const { return session_counter_.load(); }

private:
    using Socket = boost::asio::ip::tcp::socket;

    void accept_loop() {
        while (running_) {
            auto sock = std::make_shared<Socket>(ioc_);
            boost::system::error_code ec;
            acceptor_->accept(*sock, ec);
            if (!running_) break;
            if (ec) continue;
            std::lock_guard lock(mu_);
            open_.push_back(sock);
            workers_.emplace_back([this, sock] {
                serve(sock);
                std::lock_guard inner(mu_);
                std::erase(open_, sock);
            });
        }
        boost::system::error_code ec;
        acceptor_->close(ec);
    }

    void serve(const std::shared_ptr<Socket>& sock) {
        namespace beast = boost::beast;
        namespace http = beast::http;
        try {
            beast::flat_buffer buffer;
            for (;;) {
                http::request<http::string_body> req;
                http::read(*sock, buffer, req);
                if (beast::websocket::is_upgrade(req)) {
                    websocket(sock, std::move(req));
                    return;
                }
                auto res = respond(req);
                http::write(*sock, res);
                if (!req.keep_alive()) break;
            }
        } catch (const std::exception&) {
            // client went away
        }
        boost::system::error_code ec;
        sock->shutdown(Socket::shutdown_both, ec);
    }

    boost::beast::http::response<boost::beast::http::string_body> respond(
        const boost::beast::http::request<boost::beast::http::string_body>& req) {
        namespace http = boost::beast::http;
        http::response<http::string_body> res;
        res.version(req.version());
        res.keep_alive(req.keep_alive());
        auto target = std::string(req.target());
        if (auto q = target.find('?'); q != std::string::npos) target.resize(q);
        if (req.method() != http::verb::get) {
            res.result(http::status::method_not_allowed);
            res.body() = "method not allowed\n";
        } else if (target == "/healthz") {
            res.result(http::status::ok);
            res.set(http::field::content_type, "text/plain");
            res.body() = "ok\n";
        } else {
            serve_asset(target, res);
        }
        res.prepare_payload();
        return res;
    }

    void serve_asset(const std::string& target, boost::beast::http::response<boost::beast::http::string_body>& res) {
        namespace http = boost::beast::http;
        namespace fs = std::filesystem;
        if (options_.assets.empty()) {
            if (target == "/" || target == "/index.html") {
                res.result(http::status::ok);
                res.set(http::field::content_type, "text/html");
                res.body() = detail::kPlaceholderPage;
            } else {
                res.result(http::status::not_found);
                res.body() = "not found\n";
            }
            return;
        }
        std::string rel = target == "/" ? "index.html" : target.substr(1);
        if (rel.find("..") != std::string::npos) {
            res.result(http::status::bad_request);
            res.body() = "bad path\n";
            return;
        }
        fs::path p = options_.assets / rel;
        std::ifstream in(p, std::ios::binary);
        if (!fs::is_regular_file(p) || !in) {
            res.result(http::status::not_found);
            res.body() = "not found\n";
            return;
        }
        std::ostringstream buf;
        buf << in.rdbuf();
        res.result(http::status::ok);
        res.set(http::field::content_type, detail::mime_type(p));
        res.body() = buf.str();
    }

    void websocket(const std::shared_ptr<Socket>& sock, boost::beast::http::request<boost::beast::http::string_body> req) {
        namespace beast = boost::beast;
        beast::websocket::stream<Socket&> ws(*sock);
        ws.accept(req);
        ws.text(true);
        Session session("session-" + std::to_string(++session_counter_), predictor_, options_.max_steps);
        auto emit = [&](const nlohmann::json& m) { ws.write(boost::asio::buffer(m.dump())); };
        beast::flat_buffer buffer;
        for (;;) {
            buffer.clear();
            boost::system::error_code ec;
            ws.read(buffer, ec);
            if (ec) return;
            session.handle_text(beast::buffers_to_string(buffer.data()), emit);
        }
    }

    std::shared_ptr<const Predictor> predictor_;
    ServerOptions options_;
    boost::asio::io_context ioc_;
    std::unique_ptr<boost::asio::ip::tcp::acceptor> acceptor_;
    std::thread accept_thread_;
    std::atomic<bool> running_{false};
    unsigned short port_ = 0;
    std::atomic<std::size_t> session_counter_{0};
    std::mutex mu_;
    std::vector<std::shared_ptr<Socket>> open_;
    std::vector<std::thread> workers_;
};

}  // namespace askbuild
