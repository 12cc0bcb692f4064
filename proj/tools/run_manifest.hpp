// Copyright 2026 The dqoforge Authors
// SPDX-License-Identifier: Apache-2.0
//
// manifest.json written next to the outputs of every batch command.

#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace dqoforge::tools {

/// SHA-1 of "blob <size>\0<content>", as git computes it, in hex.
std::string git_blob_hash(const std::filesystem::path& file);
std::string git_blob_hash_bytes(const std::string& content);

struct RunManifest {
  std::string run_id;
  std::string command;
  std::vector<std::string> argv;
  nlohmann::json config = nlohmann::json::object();  // snapshot the hash is computed from
  std::string config_hash;
  std::map<std::string, std::string> inputs;  // path -> git blob hash
  std::string started_at;
  std::string finished_at;
  std::string status = "running";  // running | ok | failed
  std::string error;
  int exit_code = 0;
  std::string tool_version;

  /// Fills config_hash and a run id derived from the command, the config
  /// hash and the input hashes (so identical invocations share an id).
  void seal();
  /// Adds every regular file under `path` (or `path` itself).
  void add_input(const std::filesystem::path& path);
  /// Writes atomically (temporary file, then rename).
  void save(const std::filesystem::path& path) const;
  static RunManifest load(const std::filesystem::path& path);
};

void to_json(nlohmann::json& j, const RunManifest& m);
void from_json(const nlohmann::json& j, RunManifest& m);

/// Current UTC time as "2026-10-19T11:13:19Z".
std::string utc_timestamp();

}  // namespace dqoforge::tools
