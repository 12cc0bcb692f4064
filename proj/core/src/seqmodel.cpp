// Copyright 2026 The dqoforge Authors
// SPDX-License-Identifier: Apache-2.0

#include "dqoforge/seqmodel.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

#include "dqoforge/error.hpp"

namespace dqoforge {

using ad::Matrix;
using ConstMap = Eigen::Map<const Matrix>;

// ---------------------------------------------------------------------------
// Architecture and layout

void ArchConfig::validate() const {
  auto fail = [](const std::string& m) { throw InputError("architecture: " + m); };
  if (vocab_size < Vocab::kMinSize) fail("vocab_size must be >= 8");
  if (d_model < 2) fail("d_model must be >= 2");
  if (encoder_layers < 1 || decoder_layers < 1) fail("need at least one encoder and one decoder layer");
  if (heads < 1 || d_model % heads != 0) fail("heads must divide d_model");
  if (cross_heads < 1 || d_model % cross_heads != 0) fail("cross_heads must divide d_model");
  if (ffn_dim < 1) fail("ffn_dim must be positive");
  if (max_len < 2) fail("max_len must be >= 2");
}

void to_json(nlohmann::json& j, const ArchConfig& a) {
  j = nlohmann::json{{"vocab_size", a.vocab_size}, {"d_model", a.d_model},
                     {"encoder_layers", a.encoder_layers}, {"decoder_layers", a.decoder_layers},
                     {"heads", a.heads}, {"cross_heads", a.cross_heads},
                     {"ffn_dim", a.ffn_dim}, {"max_len", a.max_len}};
}

void from_json(const nlohmann::json& j, ArchConfig& a) {
  a.vocab_size = j.at("vocab_size").get<int>();
  a.d_model = j.at("d_model").get<int>();
  a.encoder_layers = j.at("encoder_layers").get<int>();
  a.decoder_layers = j.at("decoder_layers").get<int>();
  a.heads = j.at("heads").get<int>();
  a.cross_heads = j.at("cross_heads").get<int>();
  a.ffn_dim = j.at("ffn_dim").get<int>();
  a.max_len = j.at("max_len").get<int>();
}

namespace {

struct AttnIdx {
  int wq, wk, wv, wo;
};
struct FfnIdx {
  int w1, b1, w2, b2;
};
struct EncLayerIdx {
  int ln1_g, ln1_b;
  AttnIdx self;
  int ln2_g, ln2_b;
  FfnIdx ffn;
};
struct DecLayerIdx {
  int ln1_g, ln1_b;
  AttnIdx self;
  int ln2_g, ln2_b;
  AttnIdx cross;
  int ln3_g, ln3_b;
  FfnIdx ffn;
};
struct ModelIdx {
  int embed;
  std::vector<EncLayerIdx> enc;
  int enc_ln_g, enc_ln_b;
  std::vector<DecLayerIdx> dec;
  int dec_ln_g, dec_ln_b;
  int out_w, out_b;
};

/// Single source of truth for block order; ParamLayout and ModelIdx both
/// come from here.
ModelIdx build_layout(const ArchConfig& a, std::vector<ParamBlock>* blocks) {
  std::size_t offset = 0;
  auto add = [&](std::string name, int r, int c) {
    ParamBlock b{std::move(name), r, c, offset};
    offset += b.size();
    blocks->push_back(std::move(b));
    return static_cast<int>(blocks->size() - 1);
  };
  const int d = a.d_model;
  auto attn = [&](const std::string& p) {
    return AttnIdx{add(p + ".wq", d, d), add(p + ".wk", d, d), add(p + ".wv", d, d), add(p + ".wo", d, d)};
  };
  auto ffn = [&](const std::string& p) {
    return FfnIdx{add(p + ".w1", d, a.ffn_dim), add(p + ".b1", 1, a.ffn_dim), add(p + ".w2", a.ffn_dim, d),
                  add(p + ".b2", 1, d)};
  };
  ModelIdx m{};
  m.embed = add("embed", a.vocab_size, d);
  for (int l = 0; l < a.encoder_layers; ++l) {
    const std::string p = "enc" + std::to_string(l);
    EncLayerIdx e{};
    e.ln1_g = add(p + ".ln1.g", 1, d);
    e.ln1_b = add(p + ".ln1.b", 1, d);
    e.self = attn(p + ".self");
    e.ln2_g = add(p + ".ln2.g", 1, d);
    e.ln2_b = add(p + ".ln2.b", 1, d);
    e.ffn = ffn(p + ".ffn");
    m.enc.push_back(e);
  }
  m.enc_ln_g = add("enc.ln.g", 1, d);
  m.enc_ln_b = add("enc.ln.b", 1, d);
  for (int l = 0; l < a.decoder_layers; ++l) {
    const std::string p = "dec" + std::to_string(l);
    DecLayerIdx e{};
    e.ln1_g = add(p + ".ln1.g", 1, d);
    e.ln1_b = add(p + ".ln1.b", 1, d);
    e.self = attn(p + ".self");
    e.ln2_g = add(p + ".ln2.g", 1, d);
    e.ln2_b = add(p + ".ln2.b", 1, d);
    e.cross = attn(p + ".cross");
    e.ln3_g = add(p + ".ln3.g", 1, d);
    e.ln3_b = add(p + ".ln3.b", 1, d);
    e.ffn = ffn(p + ".ffn");
    m.dec.push_back(e);
  }
  m.dec_ln_g = add("dec.ln.g", 1, d);
  m.dec_ln_b = add("dec.ln.b", 1, d);
  m.out_w = add("out.w", d, a.vocab_size);
  m.out_b = add("out.b", 1, a.vocab_size);
  return m;
}

ModelIdx model_index(const ArchConfig& a) {
  std::vector<ParamBlock> scratch;
  return build_layout(a, &scratch);
}

Matrix positional_encoding(int rows, int d) {
  Matrix pe(rows, d);
  for (int p = 0; p < rows; ++p) {
    for (int i = 0; i < d; ++i) {
      const double freq = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / d);
      pe(p, i) = (i % 2 == 0) ? std::sin(p * freq) : std::cos(p * freq);
    }
  }
  return pe;
}

const Matrix& cached_positional_encoding(int rows, int d) {
  thread_local std::map<std::pair<int, int>, Matrix> cache;
  auto it = cache.find({rows, d});
  if (it == cache.end()) it = cache.emplace(std::make_pair(rows, d), positional_encoding(rows, d)).first;
  return it->second;
}

}  // namespace

ParamLayout::ParamLayout(const ArchConfig& arch) {
  arch.validate();
  build_layout(arch, &blocks_);
  total_ = blocks_.empty() ? 0 : blocks_.back().offset + blocks_.back().size();
}

PolicyModel::PolicyModel(const ArchConfig& arch, std::uint64_t init_seed)
    : arch_(arch), layout_(std::make_shared<const ParamLayout>(arch)), theta_(layout_->total(), 0.0) {
  RngStream rng(init_seed, {hash_name("init")});
  for (const ParamBlock& b : layout_->blocks()) {
    double* p = theta_.data() + b.offset;
    const bool is_gain = b.name.ends_with(".g");
    const bool is_bias = b.rows == 1 && !is_gain;
    if (is_gain) {
      std::fill(p, p + b.size(), 1.0);
    } else if (is_bias) {
      std::fill(p, p + b.size(), 0.0);
    } else {
      const double stddev = b.name == "embed" ? 1.0 : 1.0 / std::sqrt(static_cast<double>(b.rows));
      for (std::size_t i = 0; i < b.size(); ++i) p[i] = stddev * rng.normal();
    }
  }
}

PolicyModel::PolicyModel(const ArchConfig& arch, std::vector<double> theta)
    : arch_(arch), layout_(std::make_shared<const ParamLayout>(arch)), theta_(std::move(theta)) {
  if (theta_.size() != layout_->total()) {
    throw InputError("parameter vector has " + std::to_string(theta_.size()) + " entries, architecture needs " +
                     std::to_string(layout_->total()));
  }
}

// ---------------------------------------------------------------------------
// Inference path (no tape). The decoder runs one position at a time with a
// key/value cache; teacher-forced scoring and decoding share this code.

namespace {

class Weights {
 public:
  explicit Weights(const PolicyModel& m) : m_(m), idx_(model_index(m.arch())) {}
  ConstMap operator()(int block) const {
    const ParamBlock& b = m_.layout().blocks()[static_cast<std::size_t>(block)];
    return ConstMap(m_.params().data() + b.offset, b.rows, b.cols);
  }
  const ModelIdx& idx() const noexcept { return idx_; }
  const ArchConfig& arch() const noexcept { return m_.arch(); }

 private:
  const PolicyModel& m_;
  ModelIdx idx_;
};

Matrix layer_norm(const Matrix& x, const ConstMap& g, const ConstMap& b) {
  Matrix out(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const double mu = x.row(i).mean();
    const double var = (x.row(i).array() - mu).square().mean();
    const double rstd = 1.0 / std::sqrt(var + 1e-5);
    out.row(i) = ((x.row(i).array() - mu) * rstd * g.row(0).array() + b.row(0).array()).matrix();
  }
  return out;
}

Matrix gelu(Matrix x) {
  constexpr double c = 0.79788456080286535588;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double v = x.data()[i];
    x.data()[i] = 0.5 * v * (1.0 + std::tanh(c * (v + 0.044715 * v * v * v)));
  }
  return x;
}

/// Attention of every query row against all key rows (callers pass only the
/// visible keys).
Matrix attend(const Matrix& q, const Matrix& k, const Matrix& v, int heads) {
  const Eigen::Index d = q.cols();
  const Eigen::Index dh = d / heads;
  const double s = 1.0 / std::sqrt(static_cast<double>(dh));
  Matrix out(q.rows(), d);
  for (int h = 0; h < heads; ++h) {
    Matrix scores = (q.middleCols(h * dh, dh) * k.middleCols(h * dh, dh).transpose()) * s;
    for (Eigen::Index i = 0; i < scores.rows(); ++i) {
      const double mx = scores.row(i).maxCoeff();
      scores.row(i) = (scores.row(i).array() - mx).exp();
      scores.row(i) /= scores.row(i).sum();
    }
    out.middleCols(h * dh, dh).noalias() = scores * v.middleCols(h * dh, dh);
  }
  return out;
}

Matrix ffn(const Weights& w, const FfnIdx& f, const Matrix& h) {
  Matrix hidden = (h * w(f.w1)).rowwise() + w(f.b1).row(0);
  Matrix out = (gelu(std::move(hidden)) * w(f.w2)).rowwise() + w(f.b2).row(0);
  return out;
}

void check_lengths(const ArchConfig& a, std::span<const TokenId> source, std::size_t target_len) {
  Vocab(a.vocab_size).check(source, "source");
  if (source.empty()) throw InputError("source sequence is empty");
  if (static_cast<int>(source.size()) > a.max_len) {
    throw InputError("source length " + std::to_string(source.size()) + " exceeds max_len " + std::to_string(a.max_len));
  }
  if (static_cast<int>(target_len) > a.max_len) {
    throw InputError("target length " + std::to_string(target_len) + " exceeds max_len " + std::to_string(a.max_len));
  }
}

Matrix encode(const Weights& w, std::span<const TokenId> source) {
  const ArchConfig& a = w.arch();
  const ModelIdx& ix = w.idx();
  const auto n = static_cast<Eigen::Index>(source.size());
  const ConstMap embed = w(ix.embed);
  Matrix x(n, a.d_model);
  for (Eigen::Index i = 0; i < n; ++i) x.row(i) = embed.row(source[static_cast<std::size_t>(i)]);
  x += cached_positional_encoding(a.max_len, a.d_model).topRows(n);
  for (const EncLayerIdx& l : ix.enc) {
    Matrix h = layer_norm(x, w(l.ln1_g), w(l.ln1_b));
    Matrix q = h * w(l.self.wq);
    Matrix k = h * w(l.self.wk);
    Matrix v = h * w(l.self.wv);
    x.noalias() += attend(q, k, v, a.heads) * w(l.self.wo);
    h = layer_norm(x, w(l.ln2_g), w(l.ln2_b));
    x += ffn(w, l.ffn, h);
  }
  return layer_norm(x, w(ix.enc_ln_g), w(ix.enc_ln_b));
}

/// Incremental decoder with per-layer self-attention caches.
class DecoderState {
 public:
  DecoderState(const Weights& w, const Matrix& memory) : w_(w) {
    for (const DecLayerIdx& l : w.idx().dec) {
      Layer layer;
      layer.cross_k = memory * w(l.cross.wk);
      layer.cross_v = memory * w(l.cross.wv);
      layer.self_k.resize(0, w.arch().d_model);
      layer.self_v.resize(0, w.arch().d_model);
      layers_.push_back(std::move(layer));
    }
  }

  /// Feeds `token` at the next position; returns the next-token logits (1 x V).
  Matrix step(TokenId token) {
    const ArchConfig& a = w_.arch();
    const ModelIdx& ix = w_.idx();
    Matrix x = w_(ix.embed).row(token);
    x += cached_positional_encoding(a.max_len, a.d_model).row(pos_);
    for (std::size_t li = 0; li < ix.dec.size(); ++li) {
      const DecLayerIdx& l = ix.dec[li];
      Layer& c = layers_[li];
      Matrix h = layer_norm(x, w_(l.ln1_g), w_(l.ln1_b));
      append_row(c.self_k, h * w_(l.self.wk));
      append_row(c.self_v, h * w_(l.self.wv));
      Matrix q = h * w_(l.self.wq);
      x.noalias() += attend(q, c.self_k, c.self_v, a.heads) * w_(l.self.wo);
      h = layer_norm(x, w_(l.ln2_g), w_(l.ln2_b));
      q = h * w_(l.cross.wq);
      x.noalias() += attend(q, c.cross_k, c.cross_v, a.cross_heads) * w_(l.cross.wo);
      h = layer_norm(x, w_(l.ln3_g), w_(l.ln3_b));
      x += ffn(w_, l.ffn, h);
    }
    ++pos_;
    Matrix h = layer_norm(x, w_(ix.dec_ln_g), w_(ix.dec_ln_b));
    Matrix logits = (h * w_(ix.out_w)).rowwise() + w_(ix.out_b).row(0);
    return logits;
  }

 private:
  struct Layer {
    Matrix cross_k, cross_v, self_k, self_v;
  };
  static void append_row(Matrix& m, const Matrix& row) {
    m.conservativeResize(m.rows() + 1, Eigen::NoChange);
    m.row(m.rows() - 1) = row.row(0);
  }

  const Weights& w_;
  std::vector<Layer> layers_;
  int pos_ = 0;
};

std::vector<double> softmax_row(const Matrix& logits) {
  std::vector<double> p(static_cast<std::size_t>(logits.cols()));
  const double mx = logits.row(0).maxCoeff();
  double z = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    p[i] = std::exp(logits(0, static_cast<Eigen::Index>(i)) - mx);
    z += p[i];
  }
  for (double& v : p) v /= z;
  return p;
}

double log_softmax_at(const Matrix& logits, TokenId y) {
  const double mx = logits.row(0).maxCoeff();
  const double lse = mx + std::log((logits.row(0).array() - mx).exp().sum());
  return logits(0, y) - lse;
}

TokenId argmax_lowest(const Matrix& logits) {
  TokenId best = 0;
  for (Eigen::Index i = 1; i < logits.cols(); ++i) {
    if (logits(0, i) > logits(0, best)) best = static_cast<TokenId>(i);
  }
  return best;
}

template <typename Pick>
Tokens decode_from(const Weights& w, const Matrix& memory, int max_len, Pick&& pick) {
  DecoderState state(w, memory);
  Tokens out;
  TokenId prev = Vocab::kBos;
  while (static_cast<int>(out.size()) < max_len - 1) {
    Matrix logits = state.step(prev);
    prev = pick(logits);
    out.push_back(prev);
    if (prev == Vocab::kEos) return out;
  }
  out.push_back(Vocab::kEos);
  return out;
}

template <typename Pick>
Tokens decode(const PolicyModel& model, std::span<const TokenId> source, int max_len, Pick&& pick) {
  const ArchConfig& a = model.arch();
  check_lengths(a, source, 0);
  if (max_len < 1) throw InputError("max decode length must be positive");
  Weights w(model);
  return decode_from(w, encode(w, source), std::min(max_len, a.max_len), pick);
}

}  // namespace

std::vector<double> token_log_probs(const PolicyModel& model, std::span<const TokenId> source,
                                    std::span<const TokenId> target) {
  const ArchConfig& a = model.arch();
  if (target.empty()) throw InputError("target sequence is empty");
  if (target.back() != Vocab::kEos) throw InputError("target sequence must end with EOS");
  check_lengths(a, source, target.size());
  Vocab(a.vocab_size).check(target, "target");
  Weights w(model);
  Matrix memory = encode(w, source);
  DecoderState state(w, memory);
  std::vector<double> out;
  out.reserve(target.size());
  TokenId prev = Vocab::kBos;
  for (TokenId y : target) {
    Matrix logits = state.step(prev);
    out.push_back(std::max(log_softmax_at(logits, y), kLogProbFloor));
    prev = y;
  }
  return out;
}

double sequence_log_prob(const PolicyModel& model, std::span<const TokenId> source,
                         std::span<const TokenId> target) {
  const auto terms = token_log_probs(model, source, target);
  return std::accumulate(terms.begin(), terms.end(), 0.0);
}

double sequence_log_prob(const ReferenceModel& model, std::span<const TokenId> source,
                         std::span<const TokenId> target) {
  return sequence_log_prob(model.model(), source, target);
}

std::vector<double> next_token_distribution(const PolicyModel& model, std::span<const TokenId> source,
                                            std::span<const TokenId> prefix) {
  const ArchConfig& a = model.arch();
  check_lengths(a, source, prefix.size() + 1);
  Vocab(a.vocab_size).check(prefix, "prefix");
  Weights w(model);
  Matrix memory = encode(w, source);
  DecoderState state(w, memory);
  Matrix logits = state.step(Vocab::kBos);
  for (TokenId t : prefix) logits = state.step(t);
  return softmax_row(logits);
}

void SamplerParams::validate() const {
  if (top_k < 1) throw InputError("sampler: top_k must be >= 1");
  if (!(top_p > 0.0 && top_p <= 1.0)) throw InputError("sampler: top_p must lie in (0, 1]");
  if (max_len < 1) throw InputError("sampler: max_len must be positive");
}

std::vector<double> top_k_top_p_filter(std::span<const double> probs, int top_k, double top_p) {
  SamplerParams{top_k, top_p, 1}.validate();
  std::vector<std::size_t> order(probs.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return probs[x] > probs[y]; });
  const std::size_t k = std::min(order.size(), static_cast<std::size_t>(top_k));
  double kept_mass = 0.0;
  for (std::size_t i = 0; i < k; ++i) kept_mass += probs[order[i]];
  if (!(kept_mass > 0.0)) throw InputError("top_k_top_p_filter: distribution has no mass");
  // Nucleus over the renormalized top-K distribution.
  std::size_t keep = 0;
  double cum = 0.0;
  while (keep < k) {
    cum += probs[order[keep]] / kept_mass;
    ++keep;
    if (cum >= top_p) break;
  }
  double nucleus_mass = 0.0;
  for (std::size_t i = 0; i < keep; ++i) nucleus_mass += probs[order[i]];
  std::vector<double> out(probs.size(), 0.0);
  for (std::size_t i = 0; i < keep; ++i) out[order[i]] = probs[order[i]] / nucleus_mass;
  return out;
}

TokenId sample_index(std::span<const double> dist, RngStream& rng) {
  const double u = rng.uniform();
  double cum = 0.0;
  TokenId last_positive = 0;
  for (std::size_t i = 0; i < dist.size(); ++i) {
    if (dist[i] <= 0.0) continue;
    cum += dist[i];
    last_positive = static_cast<TokenId>(i);
    if (u < cum) return last_positive;
  }
  return last_positive;  // u landed in the rounding gap at the top
}

Tokens greedy_decode(const PolicyModel& model, std::span<const TokenId> source, int max_len) {
  return decode(model, source, max_len, [](const Matrix& logits) { return argmax_lowest(logits); });
}

Tokens sample_top_k_top_p(const PolicyModel& model, std::span<const TokenId> source,
                          const SamplerParams& params, RngStream& rng) {
  params.validate();
  return decode(model, source, params.max_len, [&](const Matrix& logits) {
    const auto dist = top_k_top_p_filter(softmax_row(logits), params.top_k, params.top_p);
    return sample_index(dist, rng);
  });
}

std::vector<Tokens> decode_candidates(const PolicyModel& model, std::span<const TokenId> source,
                                      const SamplerParams& params, std::span<RngStream> streams) {
  params.validate();
  check_lengths(model.arch(), source, 0);
  const int max_len = std::min(params.max_len, model.arch().max_len);
  Weights w(model);
  const Matrix memory = encode(w, source);
  std::vector<Tokens> out;
  out.reserve(streams.size() + 1);
  out.push_back(decode_from(w, memory, max_len, [](const Matrix& logits) { return argmax_lowest(logits); }));
  for (RngStream& rng : streams) {
    out.push_back(decode_from(w, memory, max_len, [&](const Matrix& logits) {
      const auto dist = top_k_top_p_filter(softmax_row(logits), params.top_k, params.top_p);
      return sample_index(dist, rng);
    }));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Tape path

namespace {

class TapeModel {
 public:
  TapeModel(ad::Tape& tape, const PolicyModel& model) : t_(tape), m_(model), idx_(model_index(model.arch())) {
    for (const ParamBlock& b : model.layout().blocks()) {
      leaves_.push_back(t_.leaf(ConstMap(model.params().data() + b.offset, b.rows, b.cols), "param"));
    }
  }

  ad::Var p(int block) const { return leaves_[static_cast<std::size_t>(block)]; }

  ad::Var embed_positions(std::span<const TokenId> ids) {
    const ArchConfig& a = m_.arch();
    ad::Var x = t_.rows(p(idx_.embed), ids);
    ad::Var pe = t_.constant(cached_positional_encoding(a.max_len, a.d_model).topRows(static_cast<Eigen::Index>(ids.size())),
                             "positions");
    return t_.add(x, pe);
  }

  ad::Var ffn(const FfnIdx& f, ad::Var h) {
    ad::Var hidden = t_.gelu(t_.add_row(t_.matmul(h, p(f.w1)), p(f.b1)));
    return t_.add_row(t_.matmul(hidden, p(f.w2)), p(f.b2));
  }

  ad::Var attention(const AttnIdx& w, ad::Var from, ad::Var to, int heads, bool causal) {
    ad::Var q = t_.matmul(from, p(w.wq));
    ad::Var k = t_.matmul(to, p(w.wk));
    ad::Var v = t_.matmul(to, p(w.wv));
    return t_.matmul(t_.attention(q, k, v, heads, causal), p(w.wo));
  }

  ad::Var encode(std::span<const TokenId> source) {
    const ArchConfig& a = m_.arch();
    ad::Var x = embed_positions(source);
    for (const EncLayerIdx& l : idx_.enc) {
      ad::Var h = t_.layer_norm(x, p(l.ln1_g), p(l.ln1_b));
      x = t_.add(x, attention(l.self, h, h, a.heads, false));
      h = t_.layer_norm(x, p(l.ln2_g), p(l.ln2_b));
      x = t_.add(x, ffn(l.ffn, h));
    }
    return t_.layer_norm(x, p(idx_.enc_ln_g), p(idx_.enc_ln_b));
  }

  ad::Var log_prob(ad::Var memory, std::span<const TokenId> target) {
    const ArchConfig& a = m_.arch();
    Tokens input;
    input.reserve(target.size());
    input.push_back(Vocab::kBos);
    input.insert(input.end(), target.begin(), target.end() - 1);
    ad::Var x = embed_positions(input);
    for (const DecLayerIdx& l : idx_.dec) {
      ad::Var h = t_.layer_norm(x, p(l.ln1_g), p(l.ln1_b));
      x = t_.add(x, attention(l.self, h, h, a.heads, true));
      h = t_.layer_norm(x, p(l.ln2_g), p(l.ln2_b));
      x = t_.add(x, attention(l.cross, h, memory, a.cross_heads, false));
      h = t_.layer_norm(x, p(l.ln3_g), p(l.ln3_b));
      x = t_.add(x, ffn(l.ffn, h));
    }
    ad::Var h = t_.layer_norm(x, p(idx_.dec_ln_g), p(idx_.dec_ln_b));
    ad::Var logits = t_.add_row(t_.matmul(h, p(idx_.out_w)), p(idx_.out_b));
    return t_.target_log_prob(logits, target, kLogProbFloor);
  }

  void collect(std::vector<double>& grad) const {
    const auto& blocks = m_.layout().blocks();
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      const Matrix& g = t_.grad(leaves_[i]);
      if (g.size() == 0) continue;
      std::copy(g.data(), g.data() + g.size(), grad.begin() + static_cast<std::ptrdiff_t>(blocks[i].offset));
    }
  }

 private:
  ad::Tape& t_;
  const PolicyModel& m_;
  ModelIdx idx_;
  std::vector<ad::Var> leaves_;
};

}  // namespace

ScalarGrad grad_of_scalar(const PolicyModel& model, std::span<const LogProbQuery> queries,
                          const ScalarBuilder& builder) {
  const ArchConfig& a = model.arch();
  const Vocab vocab(a.vocab_size);
  ad::Tape tape;
  TapeModel tm(tape, model);
  std::map<Tokens, ad::Var> encoded;
  std::vector<ad::Var> lps;
  lps.reserve(queries.size());
  for (const LogProbQuery& q : queries) {
    if (q.target.empty() || q.target.back() != Vocab::kEos) {
      throw InputError("grad_of_scalar: every target must be non-empty and end with EOS");
    }
    check_lengths(a, q.source, q.target.size());
    vocab.check(q.target, "target");
    Tokens key(q.source.begin(), q.source.end());
    auto it = encoded.find(key);
    if (it == encoded.end()) it = encoded.emplace(std::move(key), tm.encode(q.source)).first;
    lps.push_back(tm.log_prob(it->second, q.target));
  }
  ad::Var out = builder(tape, lps);
  if (tape.value(out).size() != 1) throw InputError("grad_of_scalar: builder must return a 1x1 node");
  ScalarGrad result;
  result.value = tape.scalar(out);
  for (ad::Var v : lps) result.log_probs.push_back(tape.scalar(v));
  const ad::Seed seed{out, 1.0};
  tape.backward(std::span<const ad::Seed>(&seed, 1));
  result.grad.assign(model.num_params(), 0.0);
  tm.collect(result.grad);
  return result;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {
constexpr std::string_view kMagic = "DQOFORGE-CHECKPOINT v1\n";
static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");
}  // namespace

void write_checkpoint(std::ostream& out, const PolicyModel& model, const nlohmann::json& meta) {
  nlohmann::json header;
  header["arch"] = model.arch();
  header["vocab"] = {{"size", model.arch().vocab_size}, {"pad", Vocab::kPad}, {"bos", Vocab::kBos}, {"eos", Vocab::kEos}};
  header["num_params"] = model.num_params();
  header["dtype"] = "float64-le";
  header["meta"] = meta;
  out.write(kMagic.data(), static_cast<std::streamsize>(kMagic.size()));
  const std::string h = header.dump();
  out.write(h.data(), static_cast<std::streamsize>(h.size()));
  out.put('\n');
  const auto params = model.params();
  out.write(reinterpret_cast<const char*>(params.data()), static_cast<std::streamsize>(params.size() * sizeof(double)));
}

void save_checkpoint(const std::filesystem::path& path, const PolicyModel& model, const nlohmann::json& meta) {
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open " + tmp.string() + " for writing");
    write_checkpoint(out, model, meta);
    if (!out) throw std::runtime_error("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint read_checkpoint(std::istream& in) {
  std::string magic(kMagic.size(), '\0');
  in.read(magic.data(), static_cast<std::streamsize>(magic.size()));
  if (!in || magic != kMagic) throw InputError("not a dqoforge checkpoint (bad magic)");
  std::string header_line;
  if (!std::getline(in, header_line)) throw InputError("checkpoint header missing");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(header_line);
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("checkpoint header is not JSON: ") + e.what());
  }
  if (header.value("dtype", "") != "float64-le") throw InputError("unsupported checkpoint dtype");
  const auto arch = header.at("arch").get<ArchConfig>();
  const auto n = header.at("num_params").get<std::size_t>();
  std::vector<double> theta(n);
  in.read(reinterpret_cast<char*>(theta.data()), static_cast<std::streamsize>(n * sizeof(double)));
  if (static_cast<std::size_t>(in.gcount()) != n * sizeof(double)) throw InputError("checkpoint truncated");
  if (in.peek() != std::char_traits<char>::eof()) throw InputError("trailing bytes after checkpoint parameters");
  return Checkpoint{PolicyModel(arch, std::move(theta)), header.value("meta", nlohmann::json::object())};
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
  return read_checkpoint(in);
}

}  // namespace dqoforge
