// HTTP front end for SessionManager; the only translation unit that sees cpp-httplib.
// Eigen must precede httplib: <resolv.h> defines a `_res` macro that clashes with Eigen internals.
#include "volseg/segserve.hpp"

#include <httplib.h>

namespace volseg::serve {

struct Server::Impl {
  explicit Impl(SessionManager& s) : sessions(s) {}
  SessionManager& sessions;
  httplib::Server http;
};

namespace {

void send_json(httplib::Response& res, const nlohmann::json& j, int status = 200) {
  res.status = status;
  res.set_content(j.dump(), "application/json");
}

void send_error(httplib::Response& res, Errc code, const std::string& message) {
  if (code == Errc::busy) res.set_header("Retry-After", "1");
  send_json(res, {{"error", to_string(code)}, {"message", message}}, http_status(code));
}

std::span<const std::uint8_t> bytes(const std::string& s) {
  return {reinterpret_cast<const std::uint8_t*>(s.data()), s.size()};
}

std::optional<double> query_number(const httplib::Request& req, const char* key) {
  if (!req.has_param(key)) return std::nullopt;
  const auto v = req.get_param_value(key);
  if (v.empty()) return std::nullopt;
  std::size_t used = 0;
  double x = 0.0;
  try {
    x = std::stod(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != v.size() || !std::isfinite(x)) throw Error(Errc::config, std::string("bad number for ") + key);
  return x;
}

int path_int(const std::string& s) {
  std::size_t used = 0;
  int x = 0;
  try {
    x = std::stoi(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != s.size()) throw Error(Errc::out_of_bounds, "bad integer " + s);
  return x;
}

template <class F>
httplib::Server::Handler guarded(F f) {
  return [f](const httplib::Request& req, httplib::Response& res) {
    try {
      f(req, res);
    } catch (const Error& e) {
      send_error(res, e.code(), e.what());
    } catch (const nlohmann::json::exception& e) {
      send_error(res, Errc::config, e.what());
    } catch (const std::exception& e) {
      send_json(res, {{"error", "internal"}, {"message", e.what()}}, 500);
    }
  };
}

}  // namespace

Server::Server(SessionManager& sessions, std::size_t max_payload_bytes)
    : impl_(std::make_unique<Impl>(sessions)) {
  auto& http = impl_->http;
  auto& mgr = impl_->sessions;
  http.set_payload_max_length(max_payload_bytes);

  http.Get("/healthz", [](const httplib::Request&, httplib::Response& res) { send_json(res, {{"status", "ok"}}); });

  http.Post("/sessions", guarded([&mgr](const httplib::Request& req, httplib::Response& res) {
              std::string volume;
              std::optional<std::string> gt;
              if (req.is_multipart_form_data()) {
                if (!req.has_file("volume")) throw Error(Errc::parse, "multipart field 'volume' is missing");
                volume = req.get_file_value("volume").content;
                if (req.has_file("gt")) gt = req.get_file_value("gt").content;
              } else {
                volume = req.body;
              }
              const auto info = gt ? mgr.create(bytes(volume), bytes(*gt)) : mgr.create(bytes(volume));
              send_json(res, {{"id", info.id}, {"dims", info.dims}, {"spacing", info.spacing}}, 201);
            }));

  http.Post(R"(/sessions/([0-9a-f]+)/clicks)", guarded([&mgr](const httplib::Request& req, httplib::Response& res) {
              const auto body = nlohmann::json::parse(req.body);
              PointPrompt p;
              p.coord = {body.at("i").get<int>(), body.at("j").get<int>(), body.at("k").get<int>()};
              const auto label = body.value("label", std::string("positive"));
              if (label == "positive" || label == "+") {
                p.label = PromptLabel::positive;
              } else if (label == "negative" || label == "-") {
                p.label = PromptLabel::negative;
              } else {
                throw Error(Errc::config, "label must be positive or negative");
              }
              send_json(res, to_json(mgr.add_click(req.matches[1], p)));
            }));

  http.Delete(R"(/sessions/([0-9a-f]+)/clicks/last)",
              guarded([&mgr](const httplib::Request& req, httplib::Response& res) {
                send_json(res, to_json(mgr.undo_click(req.matches[1])));
              }));

  http.Get(R"(/sessions/([0-9a-f]+)/slices/([a-z]+)/(-?[0-9]+))",
           guarded([&mgr](const httplib::Request& req, httplib::Response& res) {
             const auto img = mgr.slice(req.matches[1], parse_axis(req.matches[2].str()), path_int(req.matches[3]),
                                        query_number(req, "window"), query_number(req, "level"));
             const std::string raw(img.pixels.begin(), img.pixels.end());
             nlohmann::json j{{"pixels_b64", httplib::detail::base64_encode(raw)},
                              {"frame", to_json(img.frame)},
                              {"mask_rle", img.mask_rle.empty() ? nlohmann::json(nullptr) : nlohmann::json(img.mask_rle)}};
             send_json(res, j);
           }));

  http.Get(R"(/sessions/([0-9a-f]+)/mask)", guarded([&mgr](const httplib::Request& req, httplib::Response& res) {
             const auto format = req.has_param("format") ? req.get_param_value("format") : std::string("rle");
             if (format == "rle") {
               const auto m = mgr.mask(req.matches[1]);
               send_json(res, {{"dims", m.dims}, {"rle", rle_encode(m.data)}});
             } else if (format == "nifti") {
               const auto b = mgr.mask_nifti(req.matches[1]);
               res.set_content(std::string(b.begin(), b.end()), "application/gzip");
             } else {
               throw Error(Errc::config, "format must be rle or nifti");
             }
           }));

  http.set_error_handler([](const httplib::Request&, httplib::Response& res) {
    if (!res.body.empty()) return;
    if (res.status == 413) {
      send_error(res, Errc::payload_too_large, "request body exceeds limit");
    } else if (res.status == 404) {
      send_json(res, {{"error", "not_found"}, {"message", "no such route"}}, 404);
    }
  });
}

Server::~Server() { stop(); }

int Server::bind(const std::string& host, int port) {
  if (port == 0) {
    const int p = impl_->http.bind_to_any_port(host);
    if (p <= 0) throw Error(Errc::io, "cannot bind " + host);
    return p;
  }
  if (!impl_->http.bind_to_port(host, port)) throw Error(Errc::io, "cannot bind " + host + ":" + std::to_string(port));
  return port;
}

void Server::run() { impl_->http.listen_after_bind(); }

void Server::stop() {
  if (impl_ && impl_->http.is_running()) impl_->http.stop();
}

}  // namespace volseg::serve
