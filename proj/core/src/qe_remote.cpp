// Copyright 2026 The dqoforge Authors
// SPDX-License-Identifier: Apache-2.0

#include "dqoforge/qe_remote.hpp"

#include <arpa/inet.h>
#include <netinet/in.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <condition_variable>
#include <exception>
#include <list>
#include <mutex>
#include <thread>

#include <httplib.h>

#include "dqoforge/error.hpp"
#include "log.hpp"

namespace dqoforge {

void RemoteQeConfig::validate() const {
  if (host.empty()) throw ConfigError("qe: host is empty");
  if (port < 1 || port > 65535) throw ConfigError("qe: port out of range");
  if (max_batch < 1) throw ConfigError("qe: max_batch must be >= 1");
  if (max_in_flight < 1) throw ConfigError("qe: max_in_flight must be >= 1");
  if (max_retries < 0) throw ConfigError("qe: max_retries must be >= 0");
  if (initial_backoff_ms < 0 || max_backoff_ms < 0) throw ConfigError("qe: negative backoff");
  if (!(backoff_factor >= 1.0)) throw ConfigError("qe: backoff_factor must be >= 1");
  if (timeout_ms < 1) throw ConfigError("qe: timeout_ms must be >= 1");
}

void to_json(nlohmann::json& j, const RemoteQeConfig& c) {
  j = {{"host", c.host},
       {"port", c.port},
       {"max_batch", c.max_batch},
       {"max_in_flight", c.max_in_flight},
       {"max_retries", c.max_retries},
       {"initial_backoff_ms", c.initial_backoff_ms},
       {"backoff_factor", c.backoff_factor},
       {"max_backoff_ms", c.max_backoff_ms},
       {"timeout_ms", c.timeout_ms}};
}

void from_json(const nlohmann::json& j, RemoteQeConfig& c) {
  c = RemoteQeConfig{};
  for (const auto& [key, v] : j.items()) {
    if (key == "host") c.host = v.get<std::string>();
    else if (key == "port") c.port = v.get<int>();
    else if (key == "max_batch") c.max_batch = v.get<int>();
    else if (key == "max_in_flight") c.max_in_flight = v.get<int>();
    else if (key == "max_retries") c.max_retries = v.get<int>();
    else if (key == "initial_backoff_ms") c.initial_backoff_ms = v.get<int>();
    else if (key == "backoff_factor") c.backoff_factor = v.get<double>();
    else if (key == "max_backoff_ms") c.max_backoff_ms = v.get<int>();
    else if (key == "timeout_ms") c.timeout_ms = v.get<int>();
    else throw ConfigError("qe: unknown key '" + key + "'");
  }
  c.validate();
}

nlohmann::json encode_score_request(std::span<const QeItem> items) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& it : items) {
    arr.push_back({{"src", join_tokens(it.source)}, {"hyp", join_tokens(it.candidate)}, {"lang", it.lang}});
  }
  return {{"items", std::move(arr)}};
}

std::vector<QeItem> decode_score_request(const std::string& body) {
  try {
    const auto j = nlohmann::json::parse(body);
    std::vector<QeItem> items;
    for (const auto& e : j.at("items")) {
      items.push_back(QeItem{e.at("lang").get<std::string>(), parse_tokens(e.at("src").get<std::string>()),
                             parse_tokens(e.at("hyp").get<std::string>())});
    }
    return items;
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("malformed score request: ") + e.what());
  }
}

std::vector<QEScore> decode_score_response(const std::string& body, std::size_t expected) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(body);
  } catch (const nlohmann::json::exception& e) {
    throw ProtocolError(std::string("score response is not JSON: ") + e.what());
  }
  if (!j.is_object() || !j.contains("scores") || !j["scores"].is_array()) {
    throw ProtocolError("score response lacks a \"scores\" array");
  }
  const auto& arr = j["scores"];
  if (arr.size() != expected) {
    throw ProtocolError("score response has " + std::to_string(arr.size()) + " scores for " +
                        std::to_string(expected) + " items");
  }
  std::vector<QEScore> out;
  out.reserve(expected);
  for (std::size_t i = 0; i < arr.size(); ++i) {
    if (!arr[i].is_number()) throw ProtocolError("score " + std::to_string(i) + " is not a number");
    const double v = arr[i].get<double>();
    if (!(v >= 0.0 && v <= 1.0)) {
      throw ProtocolError("score " + std::to_string(i) + " = " + std::to_string(v) + " outside [0, 1]");
    }
    out.emplace_back(v);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Client

RemoteQeClient::RemoteQeClient(RemoteQeConfig config) : config_(std::move(config)) { config_.validate(); }

std::vector<QEScore> RemoteQeClient::post_with_retry(std::span<const QeItem> items) {
  const std::string body = encode_score_request(items).dump();
  const std::string request_id = "dqo-" + std::to_string(next_id_.fetch_add(1));
  httplib::Client cli(config_.host, config_.port);
  const auto timeout = std::chrono::milliseconds(config_.timeout_ms);
  cli.set_connection_timeout(timeout);
  cli.set_read_timeout(timeout);
  cli.set_write_timeout(timeout);
  const httplib::Headers headers{{"x-request-id", request_id}};

  double backoff = config_.initial_backoff_ms;
  std::string last_failure;
  for (int attempt = 0; attempt <= config_.max_retries; ++attempt) {
    if (attempt > 0) {
      ++retries_;
      detail::log()->warn("qe request {} retry {}/{} after {}: waiting {:.0f} ms", request_id, attempt,
                          config_.max_retries, last_failure, backoff);
      std::this_thread::sleep_for(std::chrono::duration<double, std::milli>(backoff));
      backoff = std::min(backoff * config_.backoff_factor, static_cast<double>(config_.max_backoff_ms));
    }
    ++requests_;
    auto res = cli.Post("/v1/score", headers, body, "application/json");
    if (!res) {
      last_failure = "transport error (" + httplib::to_string(res.error()) + ")";
      continue;
    }
    if (res->status == 429 || res->status >= 500) {
      last_failure = "HTTP " + std::to_string(res->status);
      continue;
    }
    if (res->status != 200) {
      throw ProtocolError("score service answered HTTP " + std::to_string(res->status) + ": " + res->body);
    }
    const auto echoed = res->get_header_value("x-request-id");
    if (echoed != request_id) {
      throw ProtocolError("score service echoed request id '" + echoed + "' for '" + request_id + "'");
    }
    return decode_score_response(res->body, items.size());
  }
  throw TransportError("score request " + request_id + " failed after " + std::to_string(config_.max_retries + 1) +
                       " attempts: " + last_failure);
}

std::vector<QEScore> RemoteQeClient::score_batch(std::span<const QeItem> items) {
  std::vector<QEScore> out(items.size());
  const std::size_t batch = static_cast<std::size_t>(config_.max_batch);
  const std::size_t num_batches = (items.size() + batch - 1) / batch;
  if (num_batches == 0) return out;

  std::vector<std::exception_ptr> errors(num_batches);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t b = next.fetch_add(1); b < num_batches; b = next.fetch_add(1)) {
      const std::size_t lo = b * batch;
      const std::size_t n = std::min(batch, items.size() - lo);
      try {
        auto scores = post_with_retry(items.subspan(lo, n));
        std::copy(scores.begin(), scores.end(), out.begin() + static_cast<std::ptrdiff_t>(lo));
      } catch (...) {
        errors[b] = std::current_exception();
      }
    }
  };
  const std::size_t threads = std::min<std::size_t>(num_batches, static_cast<std::size_t>(config_.max_in_flight));
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Mock server

namespace {

int listen_socket(const std::string& host, int port, int& bound_port) {
  const int fd = ::socket(AF_INET, SOCK_STREAM, 0);
  if (fd < 0) throw TransportError("socket() failed");
  const int one = 1;
  ::setsockopt(fd, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = htons(static_cast<std::uint16_t>(port));
  if (::inet_pton(AF_INET, host.c_str(), &addr.sin_addr) != 1) {
    ::close(fd);
    throw TransportError("mock server: host must be an IPv4 address, got '" + host + "'");
  }
  if (::bind(fd, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0 || ::listen(fd, 64) != 0) {
    ::close(fd);
    throw TransportError("mock server: cannot bind " + host + ":" + std::to_string(port));
  }
  socklen_t len = sizeof(addr);
  ::getsockname(fd, reinterpret_cast<sockaddr*>(&addr), &len);
  bound_port = ntohs(addr.sin_port);
  return fd;
}

int connect_local(int port) {
  const int fd = ::socket(AF_INET, SOCK_STREAM, 0);
  if (fd < 0) return -1;
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = htons(static_cast<std::uint16_t>(port));
  addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
  if (::connect(fd, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0) {
    ::close(fd);
    return -1;
  }
  return fd;
}

// Copies bytes both ways until either side closes or `stop` is set.
void pump(int a, int b, const std::atomic<bool>& stop) {
  char buf[16384];
  pollfd fds[2] = {{a, POLLIN, 0}, {b, POLLIN, 0}};
  while (!stop.load()) {
    const int ready = ::poll(fds, 2, 100);
    if (ready < 0) break;
    if (ready == 0) continue;
    bool closed = false;
    for (int i = 0; i < 2 && !closed; ++i) {
      if (!(fds[i].revents & (POLLIN | POLLHUP | POLLERR))) continue;
      const ssize_t n = ::recv(fds[i].fd, buf, sizeof(buf), 0);
      if (n <= 0) {
        closed = true;
        break;
      }
      const int to = fds[1 - i].fd;
      for (ssize_t off = 0; off < n;) {
        const ssize_t w = ::send(to, buf + off, static_cast<std::size_t>(n - off), MSG_NOSIGNAL);
        if (w <= 0) {
          closed = true;
          break;
        }
        off += w;
      }
    }
    if (closed) break;
  }
  ::shutdown(a, SHUT_RDWR);
  ::shutdown(b, SHUT_RDWR);
  ::close(a);
  ::close(b);
}

}  // namespace

struct MockQeServer::Impl {
  const LanguageRegistry& registry;
  MockQeFaults faults;
  httplib::Server http;
  std::thread http_thread;
  int http_port = 0;

  // Front listener, present only when connections are to be dropped.
  int front_fd = -1;
  int front_port = 0;
  std::thread accept_thread;
  std::mutex pumps_mu;
  std::list<std::thread> pumps;

  std::atomic<bool> stopping{false};
  std::atomic<std::uint64_t> requests{0};
  std::atomic<std::uint64_t> dropped{0};
  std::atomic<std::size_t> status_index{0};
  std::mutex wait_mu;
  std::condition_variable wait_cv;
  bool running = false;

  Impl(const LanguageRegistry& r, MockQeFaults f) : registry(r), faults(std::move(f)) {
    http.Post("/v1/score", [this](const httplib::Request& req, httplib::Response& res) { handle(req, res); });
    // httplib's default sets SO_REUSEPORT, which lets a second server share a
    // busy port; an occupied port must fail to bind instead.
    http.set_socket_options([](socket_t sock) {
      int yes = 1;
      setsockopt(sock, SOL_SOCKET, SO_REUSEADDR, &yes, sizeof yes);
    });
    http.set_logger([](const httplib::Request& req, const httplib::Response& res) {
      detail::log()->info("mock qe: {} {} id={} -> {} ({} bytes in)", req.method, req.path,
                          req.get_header_value("x-request-id"), res.status, req.body.size());
    });
  }

  void handle(const httplib::Request& req, httplib::Response& res) {
    ++requests;
    const std::string id = req.get_header_value("x-request-id");
    res.set_header("x-request-id", faults.wrong_request_id ? id + "-other" : id);
    const std::size_t k = status_index.fetch_add(1);
    if (k < faults.statuses.size()) {
      res.status = faults.statuses[k];
      res.set_content(R"({"error":"scripted failure"})", "application/json");
      return;
    }
    std::vector<QeItem> items;
    try {
      items = decode_score_request(req.body);
    } catch (const std::exception& e) {
      res.status = 400;
      res.set_content(nlohmann::json{{"error", e.what()}}.dump(), "application/json");
      return;
    }
    if (faults.garbage_body) {
      res.set_content("<html>not json</html>", "text/html");
      return;
    }
    nlohmann::json scores = nlohmann::json::array();
    try {
      for (const auto& it : items) {
        scores.push_back(faults.fixed_score ? *faults.fixed_score
                                            : oracle_qe(it.source, it.candidate, registry.at(it.lang)).value());
      }
    } catch (const std::exception& e) {
      res.status = 400;
      res.set_content(nlohmann::json{{"error", e.what()}}.dump(), "application/json");
      return;
    }
    for (int i = 0; i < faults.extra_scores; ++i) scores.push_back(0.5);
    res.set_content(nlohmann::json{{"scores", scores}}.dump(), "application/json");
  }

  void accept_loop() {
    while (!stopping.load()) {
      pollfd p{front_fd, POLLIN, 0};
      if (::poll(&p, 1, 100) <= 0) continue;
      const int client = ::accept(front_fd, nullptr, nullptr);
      if (client < 0) continue;
      if (dropped.load() < static_cast<std::uint64_t>(faults.drop_connections)) {
        ++dropped;
        detail::log()->debug("mock qe: dropping connection {}", dropped.load());
        ::shutdown(client, SHUT_RDWR);
        ::close(client);
        continue;
      }
      const int upstream = connect_local(http_port);
      if (upstream < 0) {
        ::close(client);
        continue;
      }
      std::lock_guard lock(pumps_mu);
      pumps.emplace_back(pump, client, upstream, std::cref(stopping));
    }
  }
};

MockQeServer::MockQeServer(const LanguageRegistry& registry, MockQeFaults faults)
    : impl_(std::make_unique<Impl>(registry, std::move(faults))) {}

MockQeServer::~MockQeServer() { stop(); }

void MockQeServer::start(const std::string& host, int port) {
  Impl& s = *impl_;
  if (s.running) throw InputError("mock server already started");
  const bool proxied = s.faults.drop_connections > 0;
  if (proxied) {
    s.front_fd = listen_socket(host, port, s.front_port);
    s.http_port = s.http.bind_to_any_port("127.0.0.1");
  } else if (port == 0) {
    s.http_port = s.http.bind_to_any_port(host);
  } else {
    s.http_port = s.http.bind_to_port(host, port) ? port : -1;
  }
  if (s.http_port < 0) throw TransportError("mock server: cannot bind " + host + ":" + std::to_string(port));
  s.http_thread = std::thread([&s] { s.http.listen_after_bind(); });
  s.http.wait_until_ready();
  if (proxied) s.accept_thread = std::thread([&s] { s.accept_loop(); });
  std::lock_guard lock(s.wait_mu);
  s.running = true;
}

void MockQeServer::wait() {
  std::unique_lock lock(impl_->wait_mu);
  impl_->wait_cv.wait(lock, [this] { return !impl_->running; });
}

void MockQeServer::stop() {
  Impl& s = *impl_;
  {
    std::lock_guard lock(s.wait_mu);
    if (!s.running) return;
  }
  s.stopping = true;
  if (s.accept_thread.joinable()) s.accept_thread.join();
  {
    std::lock_guard lock(s.pumps_mu);
    for (auto& t : s.pumps) t.join();
    s.pumps.clear();
  }
  if (s.front_fd >= 0) ::close(s.front_fd);
  s.front_fd = -1;
  s.http.stop();
  if (s.http_thread.joinable()) s.http_thread.join();
  {
    std::lock_guard lock(s.wait_mu);
    s.running = false;
  }
  s.wait_cv.notify_all();
}

int MockQeServer::port() const { return impl_->faults.drop_connections > 0 ? impl_->front_port : impl_->http_port; }
std::uint64_t MockQeServer::requests() const { return impl_->requests.load(); }
std::uint64_t MockQeServer::dropped_connections() const { return impl_->dropped.load(); }

}  // namespace dqoforge
