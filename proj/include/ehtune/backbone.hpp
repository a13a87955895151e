#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "ehtune/graph.hpp"
#include "ehtune/param_store.hpp"

namespace ehtune::model {

// Reserved token ids. Content tokens start at kFirstContentToken.
inline constexpr int kClsToken = 0;
inline constexpr int kSepToken = 1;
inline constexpr int kMaskToken = 2;
inline constexpr int kFirstContentToken = 3;

struct BackboneConfig {
  int vocab_size = 64;
  int max_seq_len = 32;
  int d_model = 64;
  int n_heads = 4;
  int n_layers = 2;
  int d_ff = 128;
  double dropout = 0.0;

  // Throws Config error on inconsistent dimensions.
  void validate() const;
  bool operator==(const BackboneConfig&) const = default;
};

// Transformer encoder (post-LN, learned absolute positions) plus an MLM
// output projection used only for pretraining. Parameter names:
//   embed.tok.weight [V,d]  embed.pos.weight [S,d]  embed.ln.{gain,bias}
//   layer.<i>.attn.{q,k,v,o}.{weight [d,d], bias}
//   layer.<i>.ln1.{gain,bias}  layer.<i>.ln2.{gain,bias}
//   layer.<i>.ffn.in.{weight [F,d], bias}  layer.<i>.ffn.out.{weight [d,F], bias}
//   mlm.out.{weight [V,d], bias}
struct Backbone {
  BackboneConfig config;
  ParamStore params;
};

// Weights ~ N(0, 0.02^2), biases 0, layer-norm gains 1.
Backbone build_backbone(const BackboneConfig& cfg, std::uint64_t seed);

// Closed-form number of scalars in build_backbone(cfg).
std::size_t backbone_param_count(const BackboneConfig& cfg);

// Names that belong to the MLM pretraining projection, not to f(x).
bool is_mlm_param(const std::string& name);

struct TokenBatch {
  int batch = 0;
  int seq = 0;
  std::vector<int> ids;  // batch*seq, row-major

  void validate(const BackboneConfig& cfg) const;
};

// LoRA factors on the query and value projections of every layer:
//   lora.layer.<i>.<q|v>.A [r, d]   (scaled normal)
//   lora.layer.<i>.<q|v>.B [d, r]   (zeros)
// Projection output gains (alpha / r) * (x A^T) B^T.
struct LoraAdapter {
  int rank = 0;
  float alpha = 0.0f;
  ParamStore params;

  float scaling() const { return alpha / static_cast<float>(rank); }
};

// Learned key/value vectors prepended in every layer:
//   prefix.layer.<i>.key [L, d]   prefix.layer.<i>.value [L, d]
// Empty when length == 0.
struct PrefixState {
  int length = 0;
  ParamStore params;
};

// Binds named parameters of several stores into one graph. Qualified names
// are: backbone names as-is, "head.<name>", "adapter.<name>".
class Binder {
 public:
  // `trainable` may be null (everything frozen).
  Binder(nc::Graph& graph, const std::set<std::string>* trainable)
      : graph_(graph), trainable_(trainable) {}

  nc::Var bind(const ParamStore& store, const std::string& qualifier, const std::string& name);
  nc::Graph& graph() { return graph_; }

 private:
  nc::Graph& graph_;
  const std::set<std::string>* trainable_;
  std::map<std::string, nc::Var> cache_;
};

std::string qualify(const std::string& qualifier, const std::string& name);

struct Attachments {
  const LoraAdapter* lora = nullptr;
  const PrefixState* prefix = nullptr;
};

// Final-layer hidden states for every position: [batch*seq, d].
nc::Var forward_hidden(Binder& binder, const Backbone& bb, const TokenBatch& tokens,
                       const Attachments& att = {});

// Pooled features: final-layer state at position 0 of every sequence.
nc::Var forward_features(Binder& binder, const Backbone& bb, const TokenBatch& tokens,
                         const Attachments& att = {});

// Cross-entropy of the MLM projection over the masked positions only.
// `mask_positions` index flattened (row*seq + t) positions.
nc::Var forward_mlm_loss(Binder& binder, const Backbone& bb, const TokenBatch& tokens,
                         const std::vector<int>& mask_positions, const std::vector<int>& original_ids);

// Graph-free convenience: features with all parameters frozen, [batch, d].
nc::Tensor extract_features(const Backbone& bb, const TokenBatch& tokens, const Attachments& att = {});

}  // namespace ehtune::model
