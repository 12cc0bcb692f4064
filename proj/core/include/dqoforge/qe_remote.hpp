// Copyright 2026 The dqoforge Authors
// SPDX-License-Identifier: Apache-2.0
//
// HTTP scoring service: client with retries, plus an oracle-backed mock server
// with scriptable faults for integration tests and `dqoforge qe-serve`.
//
//   POST /v1/score   {"items":[{"src":"5 9 7","hyp":"30 31 2","lang":"de"}]}
//   200              {"scores":[0.83]}
//
// 429 and 5xx are retried; the x-request-id header is echoed back.

#pragma once

#include <atomic>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dqoforge/qescore.hpp"

namespace dqoforge {

struct RemoteQeConfig {
  std::string host = "127.0.0.1";
  int port = 8080;
  int max_batch = 256;      // items per request
  int max_in_flight = 2;    // concurrent requests
  int max_retries = 4;      // attempts = 1 + max_retries
  int initial_backoff_ms = 50;
  double backoff_factor = 2.0;
  int max_backoff_ms = 5000;
  int timeout_ms = 30000;

  void validate() const;
};

void to_json(nlohmann::json& j, const RemoteQeConfig& c);
void from_json(const nlohmann::json& j, RemoteQeConfig& c);

/// Encodes items as the request body.
nlohmann::json encode_score_request(std::span<const QeItem> items);
/// Parses a request body; throws InputError when malformed.
std::vector<QeItem> decode_score_request(const std::string& body);
/// Parses and validates a response body; throws ProtocolError.
std::vector<QEScore> decode_score_response(const std::string& body, std::size_t expected);

class RemoteQeClient {
 public:
  explicit RemoteQeClient(RemoteQeConfig config);

  /// Splits into batches of at most max_batch, keeps up to max_in_flight
  /// requests open, and returns scores in request order. Throws
  /// TransportError once retries are exhausted and ProtocolError on a bad
  /// response.
  std::vector<QEScore> score_batch(std::span<const QeItem> items);

  const RemoteQeConfig& config() const noexcept { return config_; }
  std::uint64_t requests() const noexcept { return requests_.load(); }
  std::uint64_t retries() const noexcept { return retries_.load(); }

 private:
  std::vector<QEScore> post_with_retry(std::span<const QeItem> items);

  RemoteQeConfig config_;
  std::atomic<std::uint64_t> next_id_{0};
  std::atomic<std::uint64_t> requests_{0};
  std::atomic<std::uint64_t> retries_{0};
};

class RemoteScorer final : public QeScorer {
 public:
  explicit RemoteScorer(RemoteQeConfig config) : client_(std::move(config)) {}
  std::string_view tag() const override { return "remote"; }
  std::vector<QEScore> score_batch(std::span<const QeItem> items) override { return client_.score_batch(items); }
  RemoteQeClient& client() noexcept { return client_; }

 private:
  RemoteQeClient client_;
};

/// Scripted misbehaviour for the mock server.
struct MockQeFaults {
  int drop_connections = 0;          // first N TCP connections closed unanswered
  std::vector<int> statuses;         // first requests answered with these codes
  std::optional<double> fixed_score; // reply with this value for every item
  bool garbage_body = false;         // reply 200 with a non-JSON body
  int extra_scores = 0;              // append this many scores
  bool wrong_request_id = false;     // echo a different x-request-id
};

/// Serves oracle scores for `registry`.
class MockQeServer {
 public:
  explicit MockQeServer(const LanguageRegistry& registry, MockQeFaults faults = {});
  ~MockQeServer();
  MockQeServer(const MockQeServer&) = delete;
  MockQeServer& operator=(const MockQeServer&) = delete;

  /// Binds (port 0 picks a free port) and serves on background threads.
  void start(const std::string& host = "127.0.0.1", int port = 0);
  /// Blocks until stop() is called from another thread.
  void wait();
  void stop();

  int port() const;
  std::uint64_t requests() const;
  std::uint64_t dropped_connections() const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace dqoforge
