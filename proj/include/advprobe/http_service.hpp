#pragma once

// HTTP front end for SessionManager (JSON bodies):
//   POST   /sessions              -> 201 {id, trial, context, ...}
//   POST   /sessions/{id}/action  -> 200 {reward, observation, trial, done, summary?}
//   GET    /sessions/{id}         -> 200 state
//   GET    /sessions/{id}/log     -> 200 NDJSON transcript
//   DELETE /sessions/{id}         -> 204
// Errors: 400 validation, 404 unknown, 409 conflict; body {"error", "message"}.

#include <functional>
#include <string>

#include <httplib.h>
#include <json.hpp>

#include "advprobe/session.hpp"

namespace advprobe {

inline int http_status_for(const Error& e) {
    const std::string_view k = e.kind();
    if (k == "not-found") return 404;
    if (k == "conflict") return 409;
    return 400;
}

namespace detail {

inline void send_json(httplib::Response& res, int status, const nlohmann::json& body) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
}

inline void send_error(httplib::Response& res, int status, std::string_view kind, const std::string& message) {
    send_json(res, status, {{"error", kind}, {"message", message}});
}

/// Runs `fn`, mapping library errors onto status codes.
inline void guarded(httplib::Response& res, const std::function<void()>& fn) {
    try {
        fn();
    } catch (const Error& e) {
        send_error(res, http_status_for(e), e.kind(), e.what());
    } catch (const nlohmann::json::exception& e) {
        send_error(res, 400, "invalid-input", e.what());
    } catch (const std::exception& e) {
        send_error(res, 500, "internal", e.what());
    }
}

inline nlohmann::json parse_body(const httplib::Request& req) {
    if (req.body.empty()) return nlohmann::json::object();
    try {
        return nlohmann::json::parse(req.body);
    } catch (const nlohmann::json::exception& e) {
        throw InvalidInput(std::string("request body is not valid JSON: ") + e.what());
    }
}

}  // namespace detail

/// Registers the session routes on `server`. `manager` must outlive it.
inline void install_session_routes(httplib::Server& server, SessionManager& manager) {
    using detail::guarded;
    using detail::parse_body;
    using detail::send_json;

    server.Post("/sessions", [&manager](const httplib::Request& req, httplib::Response& res) {
        guarded(res, [&] { send_json(res, 201, manager.create(parse_body(req))); });
    });
    server.Post(R"(/sessions/([^/]+)/action)", [&manager](const httplib::Request& req, httplib::Response& res) {
        guarded(res, [&] { send_json(res, 200, manager.advance(req.matches[1], parse_body(req))); });
    });
    server.Get(R"(/sessions/([^/]+)/log)", [&manager](const httplib::Request& req, httplib::Response& res) {
        guarded(res, [&] {
            res.status = 200;
            res.set_content(manager.log_ndjson(req.matches[1]), "application/x-ndjson");
        });
    });
    server.Get(R"(/sessions/([^/]+))", [&manager](const httplib::Request& req, httplib::Response& res) {
        guarded(res, [&] { send_json(res, 200, manager.state(req.matches[1])); });
    });
    server.Delete(R"(/sessions/([^/]+))", [&manager](const httplib::Request& req, httplib::Response& res) {
        guarded(res, [&] {
            manager.remove(req.matches[1]);
            res.status = 204;
        });
    });
    server.Get("/health", [](const httplib::Request&, httplib::Response& res) {
        send_json(res, 200, {{"status", "ok"}});
    });
}

}  // namespace advprobe
