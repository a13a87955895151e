#include "ehtune/backbone.hpp"

#include <cmath>

#include "ehtune/error.hpp"
#include "ehtune/rng.hpp"

namespace ehtune::model {

namespace {

constexpr double kInitStd = 0.02;

nc::Tensor normal_tensor(nc::Shape shape, Rng& rng, double stddev) {
  nc::Tensor t = nc::Tensor::zeros(std::move(shape));
  for (float& x : t.data) x = static_cast<float>(rng.normal() * stddev);
  return t;
}

std::string layer_name(int i, const std::string& rest) { return "layer." + std::to_string(i) + "." + rest; }

}  // namespace

void BackboneConfig::validate() const {
  auto bad = [](const std::string& what) { fail(ErrorKind::Config, "backbone config: " + what); };
  if (vocab_size < kFirstContentToken + 1) bad("vocab_size must exceed the reserved ids");
  if (max_seq_len < 2) bad("max_seq_len must be at least 2");
  if (d_model < 1 || n_heads < 1 || n_layers < 1 || d_ff < 1) bad("all dimensions must be >= 1");
  if (d_model % n_heads != 0) bad("d_model must be divisible by n_heads");
  if (dropout != 0.0) bad("dropout must be 0");
}

void TokenBatch::validate(const BackboneConfig& cfg) const {
  if (batch < 1 || seq < 1) fail(ErrorKind::Shape, "token batch must be non-empty");
  if (static_cast<std::size_t>(batch) * seq != ids.size()) {
    fail(ErrorKind::Shape, "token batch holds " + std::to_string(ids.size()) + " ids, expected " +
                               std::to_string(batch) + "x" + std::to_string(seq));
  }
  if (seq > cfg.max_seq_len) {
    fail(ErrorKind::Shape, "sequence length " + std::to_string(seq) + " exceeds max_seq_len " +
                               std::to_string(cfg.max_seq_len));
  }
  for (int id : ids) {
    if (id < 0 || id >= cfg.vocab_size) {
      fail(ErrorKind::Index, "token id " + std::to_string(id) + " outside vocabulary of " + std::to_string(cfg.vocab_size));
    }
  }
}

Backbone build_backbone(const BackboneConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Backbone bb{cfg, {}};
  Rng rng(derive_seed(seed, "backbone.init"));
  const int d = cfg.d_model;
  auto& p = bb.params;
  p.add("embed.tok.weight", normal_tensor({cfg.vocab_size, d}, rng, kInitStd));
  p.add("embed.pos.weight", normal_tensor({cfg.max_seq_len, d}, rng, kInitStd));
  p.add("embed.ln.gain", nc::Tensor::full({d}, 1.0f));
  p.add("embed.ln.bias", nc::Tensor::zeros({d}));
  for (int i = 0; i < cfg.n_layers; ++i) {
    for (const char* proj : {"q", "k", "v", "o"}) {
      p.add(layer_name(i, std::string("attn.") + proj + ".weight"), normal_tensor({d, d}, rng, kInitStd));
      p.add(layer_name(i, std::string("attn.") + proj + ".bias"), nc::Tensor::zeros({d}));
    }
    p.add(layer_name(i, "ln1.gain"), nc::Tensor::full({d}, 1.0f));
    p.add(layer_name(i, "ln1.bias"), nc::Tensor::zeros({d}));
    p.add(layer_name(i, "ffn.in.weight"), normal_tensor({cfg.d_ff, d}, rng, kInitStd));
    p.add(layer_name(i, "ffn.in.bias"), nc::Tensor::zeros({cfg.d_ff}));
    p.add(layer_name(i, "ffn.out.weight"), normal_tensor({d, cfg.d_ff}, rng, kInitStd));
    p.add(layer_name(i, "ffn.out.bias"), nc::Tensor::zeros({d}));
    p.add(layer_name(i, "ln2.gain"), nc::Tensor::full({d}, 1.0f));
    p.add(layer_name(i, "ln2.bias"), nc::Tensor::zeros({d}));
  }
  p.add("mlm.out.weight", normal_tensor({cfg.vocab_size, d}, rng, kInitStd));
  p.add("mlm.out.bias", nc::Tensor::zeros({cfg.vocab_size}));
  return bb;
}

std::size_t backbone_param_count(const BackboneConfig& cfg) {
  const std::size_t v = static_cast<std::size_t>(cfg.vocab_size);
  const std::size_t s = static_cast<std::size_t>(cfg.max_seq_len);
  const std::size_t d = static_cast<std::size_t>(cfg.d_model);
  const std::size_t f = static_cast<std::size_t>(cfg.d_ff);
  const std::size_t embed = v * d + s * d + 2 * d;
  const std::size_t layer = 4 * (d * d + d) + 4 * d + (f * d + f) + (d * f + d);
  const std::size_t mlm = v * d + v;
  return embed + static_cast<std::size_t>(cfg.n_layers) * layer + mlm;
}

bool is_mlm_param(const std::string& name) { return name.rfind("mlm.", 0) == 0; }

std::string qualify(const std::string& qualifier, const std::string& name) {
  return qualifier.empty() ? name : qualifier + "." + name;
}

nc::Var Binder::bind(const ParamStore& store, const std::string& qualifier, const std::string& name) {
  std::string key = qualify(qualifier, name);
  if (auto it = cache_.find(key); it != cache_.end()) return it->second;
  const nc::Tensor& t = store.at(name);
  nc::Var v;
  if (trainable_ && trainable_->count(key)) {
    // Trainable tensors are owned by the caller's mutable model state.
    v = graph_.param(const_cast<nc::Tensor&>(t), true);
  } else {
    v = graph_.param(t);
  }
  cache_.emplace(std::move(key), v);
  return v;
}

namespace {

nc::Var projection(Binder& b, const Backbone& bb, const Attachments& att, int layer, const char* proj, nc::Var x) {
  const std::string base = layer_name(layer, std::string("attn.") + proj);
  nc::Var y = nc::linear(x, b.bind(bb.params, "", base + ".weight"), b.bind(bb.params, "", base + ".bias"));
  if (att.lora) {
    const std::string lbase = "lora." + layer_name(layer, proj);
    if (att.lora->params.contains(lbase + ".A")) {
      nc::Var a = b.bind(att.lora->params, "adapter", lbase + ".A");
      nc::Var bm = b.bind(att.lora->params, "adapter", lbase + ".B");
      nc::Var delta = nc::matmul_nt(nc::matmul_nt(x, a), bm);
      y = nc::add(y, nc::scale(delta, att.lora->scaling()));
    }
  }
  return y;
}

}  // namespace

nc::Var forward_hidden(Binder& b, const Backbone& bb, const TokenBatch& tokens, const Attachments& att) {
  const BackboneConfig& cfg = bb.config;
  tokens.validate(cfg);
  const int n = tokens.batch * tokens.seq;
  std::vector<int> positions(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) positions[static_cast<std::size_t>(i)] = i % tokens.seq;

  nc::Var x = nc::add(nc::embedding(b.bind(bb.params, "", "embed.tok.weight"), tokens.ids),
                      nc::embedding(b.bind(bb.params, "", "embed.pos.weight"), positions));
  x = nc::layer_norm(x, b.bind(bb.params, "", "embed.ln.gain"), b.bind(bb.params, "", "embed.ln.bias"));

  const bool use_prefix = att.prefix && att.prefix->length > 0;
  for (int i = 0; i < cfg.n_layers; ++i) {
    nc::Var q = projection(b, bb, att, i, "q", x);
    nc::Var k = projection(b, bb, att, i, "k", x);
    nc::Var v = projection(b, bb, att, i, "v", x);
    std::optional<nc::Var> pk, pv;
    if (use_prefix) {
      pk = b.bind(att.prefix->params, "adapter", "prefix." + layer_name(i, "key"));
      pv = b.bind(att.prefix->params, "adapter", "prefix." + layer_name(i, "value"));
    }
    nc::Var a = nc::attention(q, k, v, pk, pv, tokens.batch, tokens.seq, cfg.n_heads);
    nc::Var o = projection(b, bb, att, i, "o", a);
    x = nc::layer_norm(nc::add(x, o), b.bind(bb.params, "", layer_name(i, "ln1.gain")),
                       b.bind(bb.params, "", layer_name(i, "ln1.bias")));
    nc::Var h = nc::gelu(nc::linear(x, b.bind(bb.params, "", layer_name(i, "ffn.in.weight")),
                                    b.bind(bb.params, "", layer_name(i, "ffn.in.bias"))));
    nc::Var f = nc::linear(h, b.bind(bb.params, "", layer_name(i, "ffn.out.weight")),
                           b.bind(bb.params, "", layer_name(i, "ffn.out.bias")));
    x = nc::layer_norm(nc::add(x, f), b.bind(bb.params, "", layer_name(i, "ln2.gain")),
                       b.bind(bb.params, "", layer_name(i, "ln2.bias")));
  }
  return x;
}

nc::Var forward_features(Binder& b, const Backbone& bb, const TokenBatch& tokens, const Attachments& att) {
  nc::Var hidden = forward_hidden(b, bb, tokens, att);
  std::vector<int> pooled(static_cast<std::size_t>(tokens.batch));
  for (int i = 0; i < tokens.batch; ++i) pooled[static_cast<std::size_t>(i)] = i * tokens.seq;
  return nc::gather_rows(hidden, pooled);
}

nc::Var forward_mlm_loss(Binder& b, const Backbone& bb, const TokenBatch& tokens,
                         const std::vector<int>& mask_positions, const std::vector<int>& original_ids) {
  if (mask_positions.empty()) fail(ErrorKind::Contract, "forward_mlm_loss: empty mask set");
  if (mask_positions.size() != original_ids.size()) {
    fail(ErrorKind::Contract, "forward_mlm_loss: mask positions and original ids differ in length");
  }
  nc::Var hidden = forward_hidden(b, bb, tokens);
  nc::Var rows = nc::gather_rows(hidden, mask_positions);
  nc::Var logits = nc::linear(rows, b.bind(bb.params, "", "mlm.out.weight"), b.bind(bb.params, "", "mlm.out.bias"));
  return nc::cross_entropy(logits, original_ids);
}

nc::Tensor extract_features(const Backbone& bb, const TokenBatch& tokens, const Attachments& att) {
  nc::Graph g;
  Binder binder(g, nullptr);
  nc::Var f = forward_features(binder, bb, tokens, att);
  return nc::Tensor(f.shape(), std::vector<float>(f.value().begin(), f.value().end()));
}

}  // namespace ehtune::model
