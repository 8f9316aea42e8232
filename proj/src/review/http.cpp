#include <httplib.h>

#include "ctreason/review.hpp"

namespace ctreason::review {

struct HttpServer::Impl {
    explicit Impl(ReviewService& s) : service(s) {}
    ReviewService& service;
    httplib::Server svr;
};

namespace {

void send(httplib::Response& res, const ApiResponse& r) {
    res.status = r.status;
    res.set_content(r.body.dump(), "application/json");
}

std::int64_t path_id(const httplib::Request& req) { return std::stoll(req.matches[1].str()); }

}  // namespace

HttpServer::HttpServer(ReviewService& service) : impl_(std::make_unique<Impl>(service)) {
    auto& svr = impl_->svr;
    auto& s = impl_->service;

    // The review UI is served from a different origin during development.
    svr.set_default_headers({{"Access-Control-Allow-Origin", "*"},
                             {"Access-Control-Allow-Headers", "Content-Type, X-Actor"},
                             {"Access-Control-Allow-Methods", "GET, POST, OPTIONS"}});
    svr.Options(R"(/api/.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });

    svr.Get("/api/items", [&s](const httplib::Request& req, httplib::Response& res) {
        send(res, s.list_items(req.get_param_value("state"), req.get_param_value("page"),
                               req.get_param_value("page_size")));
    });
    svr.Get(R"(/api/items/(\d+))", [&s](const httplib::Request& req, httplib::Response& res) {
        send(res, s.get_item(path_id(req)));
    });
    svr.Post(R"(/api/items/(\d+)/transition)", [&s](const httplib::Request& req, httplib::Response& res) {
        Json body;
        try {
            body = Json::parse(req.body);
        } catch (const Json::exception& e) {
            send(res, error(400, "bad_request", std::string("malformed JSON body: ") + e.what()));
            return;
        }
        send(res, s.transition(path_id(req), body, req.get_header_value("X-Actor")));
    });
    svr.Get(R"(/api/items/(\d+)/overlay)", [&s](const httplib::Request& req, httplib::Response& res) {
        const auto r = s.overlay(path_id(req), req.get_param_value("mask"), req.get_param_value("bbox"),
                                 req.get_param_value("center"));
        res.status = r.status;
        res.set_content(r.bytes, r.content_type);
    });
    svr.Get("/api/export", [&s](const httplib::Request& req, httplib::Response& res) {
        if (req.get_param_value("format") == "jsonl") {
            res.set_content(s.export_jsonl(), "application/x-ndjson");
            return;
        }
        send(res, s.export_items());
    });
    svr.Get("/api/schema", [](const httplib::Request&, httplib::Response& res) {
        send(res, ok(Json::parse(curation::appearance_schema_text())));
    });

    svr.set_error_handler([](const httplib::Request&, httplib::Response& res) {
        if (!res.body.empty()) return;
        send(res, error(res.status, res.status == 404 ? "not_found" : "http_error", "no such route"));
    });
    svr.set_exception_handler([](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
        std::string msg = "internal error";
        try {
            std::rethrow_exception(ep);
        } catch (const std::exception& e) {
            msg = e.what();
        } catch (...) {
        }
        send(res, error(500, "internal", msg));
    });
}

HttpServer::~HttpServer() { stop(); }

bool HttpServer::listen(const std::string& host, int port) { return impl_->svr.listen(host, port); }

int HttpServer::bind_any(const std::string& host) { return impl_->svr.bind_to_any_port(host); }

bool HttpServer::serve() { return impl_->svr.listen_after_bind(); }

void HttpServer::stop() {
    if (impl_->svr.is_running()) impl_->svr.stop();
}

void HttpServer::wait_until_ready() const { impl_->svr.wait_until_ready(); }

}  // namespace ctreason::review
