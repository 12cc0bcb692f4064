// Copyright 2026 The dqoforge Authors
// SPDX-License-Identifier: Apache-2.0
//
// Small pre-LayerNorm Transformer encoder-decoder over a shared vocabulary.
// Parameters live in one flat vector; every block is a view into it, which
// makes optimizer updates, checkpoints and finite-difference probes trivial.

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dqoforge/autodiff.hpp"
#include "dqoforge/rng.hpp"
#include "dqoforge/vocab.hpp"

namespace dqoforge {

/// Architecture descriptor. The defaults are the reference micro-architecture
/// (~125k parameters at V = 80).
struct ArchConfig {
  int vocab_size = 80;
  int d_model = 64;
  int encoder_layers = 2;
  int decoder_layers = 1;
  int heads = 2;        // self-attention heads (encoder and decoder)
  int cross_heads = 1;  // decoder cross-attention heads
  int ffn_dim = 128;
  int max_len = 64;     // longest source or target, EOS included

  void validate() const;
  bool operator==(const ArchConfig&) const = default;
};

void to_json(nlohmann::json& j, const ArchConfig& a);
void from_json(const nlohmann::json& j, ArchConfig& a);

struct ParamBlock {
  std::string name;
  int rows = 0;
  int cols = 0;
  std::size_t offset = 0;
  std::size_t size() const noexcept { return static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols); }
};

/// Deterministic ordering of parameter blocks inside theta.
class ParamLayout {
 public:
  explicit ParamLayout(const ArchConfig& arch);
  const std::vector<ParamBlock>& blocks() const noexcept { return blocks_; }
  std::size_t total() const noexcept { return total_; }

 private:
  std::vector<ParamBlock> blocks_;
  std::size_t total_ = 0;
};

/// The trainable policy pi_theta.
class PolicyModel {
 public:
  /// Random initialization, deterministic in `init_seed`.
  PolicyModel(const ArchConfig& arch, std::uint64_t init_seed);
  /// Wraps an existing parameter vector; throws InputError on a size mismatch.
  PolicyModel(const ArchConfig& arch, std::vector<double> theta);

  const ArchConfig& arch() const noexcept { return arch_; }
  Vocab vocab() const { return Vocab(arch_.vocab_size); }
  const ParamLayout& layout() const noexcept { return *layout_; }
  std::span<const double> params() const noexcept { return theta_; }
  std::span<double> mutable_params() noexcept { return theta_; }
  std::size_t num_params() const noexcept { return theta_.size(); }

 private:
  ArchConfig arch_;
  std::shared_ptr<const ParamLayout> layout_;
  std::vector<double> theta_;
};

/// Frozen snapshot of a policy: pi_ref.
class ReferenceModel {
 public:
  explicit ReferenceModel(const PolicyModel& policy) : model_(policy) {}
  const PolicyModel& model() const noexcept { return model_; }
  const ArchConfig& arch() const noexcept { return model_.arch(); }

 private:
  const PolicyModel model_;
};

/// Per-token log-probabilities are clamped from below here so that
/// preference log-ratios stay finite.
inline constexpr double kLogProbFloor = -80.0;

/// Sum over t of log p(target_t | source, target_<t). `target` must be
/// non-empty and end with EOS; both sides must fit in max_len.
double sequence_log_prob(const PolicyModel& model, std::span<const TokenId> source,
                         std::span<const TokenId> target);
double sequence_log_prob(const ReferenceModel& model, std::span<const TokenId> source,
                         std::span<const TokenId> target);

/// Same quantity, also returning each clamped per-token term.
std::vector<double> token_log_probs(const PolicyModel& model, std::span<const TokenId> source,
                                    std::span<const TokenId> target);

/// Softmax over the vocabulary for the token after `prefix` (prefix excludes BOS).
std::vector<double> next_token_distribution(const PolicyModel& model, std::span<const TokenId> source,
                                            std::span<const TokenId> prefix);

struct SamplerParams {
  int top_k = 40;
  double top_p = 0.8;
  int max_len = 64;

  void validate() const;
};

/// Keeps the top_k most probable tokens (ties to the lower id), renormalizes,
/// then keeps the shortest descending-probability prefix whose mass reaches
/// top_p (inclusive), and renormalizes again. Output is indexed by token id.
std::vector<double> top_k_top_p_filter(std::span<const double> probs, int top_k, double top_p);

/// Index drawn from a normalized distribution by inverse CDF in id order.
TokenId sample_index(std::span<const double> dist, RngStream& rng);

/// Argmax decoding, ties to the lowest id. Output always ends with EOS: if the
/// model has not emitted EOS after max_len - 1 tokens, EOS is forced.
Tokens greedy_decode(const PolicyModel& model, std::span<const TokenId> source, int max_len = 64);

/// Ancestral sampling with the combined top-K then top-P filter at temperature 1.
Tokens sample_top_k_top_p(const PolicyModel& model, std::span<const TokenId> source,
                          const SamplerParams& params, RngStream& rng);

/// Greedy output followed by one sample per stream; identical to separate
/// greedy_decode / sample_top_k_top_p calls but encodes the source once.
std::vector<Tokens> decode_candidates(const PolicyModel& model, std::span<const TokenId> source,
                                      const SamplerParams& params, std::span<RngStream> streams);

/// One (source, target) whose log-probability enters a differentiable scalar.
struct LogProbQuery {
  std::span<const TokenId> source;
  std::span<const TokenId> target;
};

/// Builds the scalar objective on the tape from the per-query log-prob nodes.
using ScalarBuilder = std::function<ad::Var(ad::Tape&, std::span<const ad::Var>)>;

struct ScalarGrad {
  double value = 0.0;
  std::vector<double> log_probs;
  std::vector<double> grad;  // d value / d theta, same layout as params()
};

/// Exact reverse-mode gradient of builder(log_probs(queries)) w.r.t. theta.
/// Queries sharing a source reuse one encoder pass.
ScalarGrad grad_of_scalar(const PolicyModel& model, std::span<const LogProbQuery> queries,
                          const ScalarBuilder& builder);

/// Checkpoint file: magic line, one JSON header line, raw little-endian
/// float64 parameters. Saving a loaded checkpoint reproduces it byte for byte.
struct Checkpoint {
  PolicyModel model;
  nlohmann::json meta = nlohmann::json::object();
};

void write_checkpoint(std::ostream& out, const PolicyModel& model,
                      const nlohmann::json& meta = nlohmann::json::object());
void save_checkpoint(const std::filesystem::path& path, const PolicyModel& model,
                     const nlohmann::json& meta = nlohmann::json::object());
Checkpoint read_checkpoint(std::istream& in);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace dqoforge
