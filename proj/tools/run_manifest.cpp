// Copyright 2026 The dqoforge Authors
// SPDX-License-Identifier: Apache-2.0

#include "run_manifest.hpp"

#include <openssl/evp.h>

#include <array>
#include <ctime>
#include <fstream>
#include <memory>
#include <stdexcept>

#include "dqoforge/experiment.hpp"

namespace dqoforge::tools {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

class Sha1 {
 public:
  Sha1() : ctx_(EVP_MD_CTX_new(), EVP_MD_CTX_free) {
    if (!ctx_ || EVP_DigestInit_ex(ctx_.get(), EVP_sha1(), nullptr) != 1) throw std::runtime_error("sha1 init failed");
  }
  void update(const char* data, std::size_t n) { EVP_DigestUpdate(ctx_.get(), data, n); }
  std::string hex() {
    std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
    unsigned int len = 0;
    EVP_DigestFinal_ex(ctx_.get(), md.data(), &len);
    static constexpr char kHex[] = "0123456789abcdef";
    std::string out;
    for (unsigned i = 0; i < len; ++i) {
      out += kHex[md[i] >> 4];
      out += kHex[md[i] & 15];
    }
    return out;
  }

 private:
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx_;
};

std::string blob_header(std::uintmax_t size) { return "blob " + std::to_string(size) + '\0'; }

}  // namespace

std::string git_blob_hash_bytes(const std::string& content) {
  Sha1 h;
  const std::string head = blob_header(content.size());
  h.update(head.data(), head.size());
  h.update(content.data(), content.size());
  return h.hex();
}

std::string git_blob_hash(const fs::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + file.string());
  Sha1 h;
  const std::string head = blob_header(fs::file_size(file));
  h.update(head.data(), head.size());
  std::array<char, 1 << 16> buf{};
  while (in) {
    in.read(buf.data(), buf.size());
    h.update(buf.data(), static_cast<std::size_t>(in.gcount()));
  }
  return h.hex();
}

void RunManifest::add_input(const fs::path& path) {
  if (fs::is_directory(path)) {
    for (const auto& e : fs::recursive_directory_iterator(path)) {
      // A directory input never includes the manifest of the run that produced it.
      if (e.is_regular_file() && e.path().filename() != "manifest.json")
        inputs[e.path().lexically_normal().string()] = git_blob_hash(e.path());
    }
  } else {
    inputs[path.lexically_normal().string()] = git_blob_hash(path);
  }
}

void RunManifest::seal() {
  config_hash = dqoforge::config_hash(config);
  json key{{"command", command}, {"config_hash", config_hash}, {"inputs", inputs}};
  run_id = command + "-" + dqoforge::config_hash(key).substr(0, 12);
}

void RunManifest::save(const fs::path& path) const {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out << json(*this).dump(2) << '\n';
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
  }
  fs::rename(tmp, path);
}

RunManifest RunManifest::load(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return json::parse(in).get<RunManifest>();
}

void to_json(json& j, const RunManifest& m) {
  j = json{{"run_id", m.run_id},
           {"command", m.command},
           {"argv", m.argv},
           {"config", m.config},
           {"config_hash", m.config_hash},
           {"inputs", m.inputs},
           {"started_at", m.started_at},
           {"finished_at", m.finished_at},
           {"status", m.status},
           {"exit_code", m.exit_code},
           {"tool_version", m.tool_version}};
  if (!m.error.empty()) j["error"] = m.error;
}

void from_json(const json& j, RunManifest& m) {
  j.at("run_id").get_to(m.run_id);
  j.at("command").get_to(m.command);
  j.at("argv").get_to(m.argv);
  m.config = j.at("config");
  j.at("config_hash").get_to(m.config_hash);
  j.at("inputs").get_to(m.inputs);
  j.at("started_at").get_to(m.started_at);
  j.at("finished_at").get_to(m.finished_at);
  j.at("status").get_to(m.status);
  j.at("exit_code").get_to(m.exit_code);
  j.at("tool_version").get_to(m.tool_version);
  m.error = j.value("error", "");
}

std::string utc_timestamp() {
  const std::time_t t = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

}  // namespace dqoforge::tools
