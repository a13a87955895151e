#include "ehtune/pet.hpp"

#include <Eigen/Core>
#include <cmath>

#include "ehtune/error.hpp"
#include "ehtune/rng.hpp"

namespace ehtune::pet {

namespace {

constexpr const char* kHead = "head.";
constexpr const char* kAdapter = "adapter.";

bool starts_with(const std::string& s, const char* prefix) { return s.rfind(prefix, 0) == 0; }

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

std::string lora_base(int layer, const char* proj) {
  return "lora.layer." + std::to_string(layer) + "." + proj;
}

// Layer index of a backbone name "layer.<i>.*", or -1.
int layer_of(const std::string& name) {
  if (!starts_with(name, "layer.")) return -1;
  const auto dot = name.find('.', 6);
  return std::stoi(name.substr(6, dot - 6));
}

}  // namespace

bool is_head_name(const std::string& q) { return starts_with(q, kHead); }
bool is_adapter_name(const std::string& q) { return starts_with(q, kAdapter); }
bool is_backbone_name(const std::string& q) { return !is_head_name(q) && !is_adapter_name(q); }

model::Attachments Model::attachments() const {
  return {lora ? &*lora : nullptr, prefix ? &*prefix : nullptr};
}

std::vector<std::string> Model::qualified_names() const {
  std::vector<std::string> out = backbone.params.names();
  for (const auto& n : head.params.names()) out.push_back(kHead + n);
  if (lora) for (const auto& n : lora->params.names()) out.push_back(kAdapter + n);
  if (prefix) for (const auto& n : prefix->params.names()) out.push_back(kAdapter + n);
  return out;
}

const nc::Tensor& Model::tensor(const std::string& q) const {
  return const_cast<Model*>(this)->tensor(q);
}

nc::Tensor& Model::tensor(const std::string& q) {
  if (is_head_name(q)) return head.params.at(q.substr(5));
  if (is_adapter_name(q)) {
    const std::string name = q.substr(8);
    if (lora && lora->params.contains(name)) return lora->params.at(name);
    if (prefix && prefix->params.contains(name)) return prefix->params.at(name);
    fail(ErrorKind::Contract, "unknown adapter parameter '" + q + "'");
  }
  return backbone.params.at(q);
}

ParamPartition finetune_partition(const Model& m) {
  return make_partition(m, [](const std::string&) { return true; });
}

ParamPartition probe_partition(const Model& m) {
  return make_partition(m, [](const std::string& n) { return is_head_name(n); });
}

ParamPartition apply_bitfit(const Model& m) {
  return make_partition(m, [](const std::string& n) {
    return is_head_name(n) || (is_backbone_name(n) && ends_with(n, ".bias"));
  });
}

ParamPartition attach_lora(Model& m, int rank, float alpha, std::uint64_t seed) {
  const model::BackboneConfig& cfg = m.backbone.config;
  if (rank < 1 || rank > cfg.d_model) {
    fail(ErrorKind::Config, "lora rank " + std::to_string(rank) + " outside [1, " + std::to_string(cfg.d_model) + "]");
  }
  if (alpha <= 0.0f) fail(ErrorKind::Config, "lora alpha must be positive");
  if (m.lora) fail(ErrorKind::Contract, "lora adapter already attached");
  model::LoraAdapter adapter{rank, alpha, {}};
  Rng rng(derive_seed(seed, "lora.init"));
  const int d = cfg.d_model;
  const double a_std = 1.0 / std::sqrt(static_cast<double>(d));
  for (int i = 0; i < cfg.n_layers; ++i) {
    for (const char* proj : {"q", "v"}) {
      nc::Tensor a = nc::Tensor::zeros({rank, d});
      for (float& x : a.data) x = static_cast<float>(rng.normal() * a_std);
      adapter.params.add(lora_base(i, proj) + ".A", std::move(a));
      adapter.params.add(lora_base(i, proj) + ".B", nc::Tensor::zeros({d, rank}));
    }
  }
  m.lora = std::move(adapter);
  return make_partition(m, [](const std::string& n) { return is_head_name(n) || is_adapter_name(n); });
}

void merge_lora(Model& m) {
  if (!m.lora) fail(ErrorKind::Contract, "merge_lora: no adapter attached");
  using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  const model::LoraAdapter& ad = *m.lora;
  const int d = m.backbone.config.d_model;
  for (int i = 0; i < m.backbone.config.n_layers; ++i) {
    for (const char* proj : {"q", "v"}) {
      const nc::Tensor& a = ad.params.at(lora_base(i, proj) + ".A");
      const nc::Tensor& b = ad.params.at(lora_base(i, proj) + ".B");
      nc::Tensor& w = m.backbone.params.at("layer." + std::to_string(i) + ".attn." + proj + ".weight");
      Eigen::Map<const RowMat> am(a.data.data(), ad.rank, d);
      Eigen::Map<const RowMat> bm(b.data.data(), d, ad.rank);
      Eigen::Map<RowMat> wm(w.data.data(), d, d);
      wm.noalias() += ad.scaling() * (bm * am);
    }
  }
  m.lora.reset();
}

ParamPartition attach_prefix(Model& m, int length, std::uint64_t seed) {
  const model::BackboneConfig& cfg = m.backbone.config;
  if (length < 0 || length > cfg.max_seq_len) {
    fail(ErrorKind::Config, "prefix length " + std::to_string(length) + " outside [0, " +
                                std::to_string(cfg.max_seq_len) + "]");
  }
  if (m.prefix) fail(ErrorKind::Contract, "prefix already attached");
  model::PrefixState state{length, {}};
  Rng rng(derive_seed(seed, "prefix.init"));
  if (length > 0) {
    for (int i = 0; i < cfg.n_layers; ++i) {
      for (const char* part : {"key", "value"}) {
        nc::Tensor t = nc::Tensor::zeros({length, cfg.d_model});
        for (float& x : t.data) x = static_cast<float>(rng.normal() * 0.02);
        state.params.add("prefix.layer." + std::to_string(i) + "." + part, std::move(t));
      }
    }
  }
  m.prefix = std::move(state);
  return make_partition(m, [](const std::string& n) { return is_head_name(n) || is_adapter_name(n); });
}

ParamPartition apply_topk(const Model& m, int k) {
  const int layers = m.backbone.config.n_layers;
  if (k < 1 || k > layers) {
    fail(ErrorKind::Config, "top-k: k=" + std::to_string(k) + " outside [1, " + std::to_string(layers) + "]");
  }
  const int first = layers - k;
  ParamPartition p = make_partition(m, [first](const std::string& n) {
    return is_head_name(n) || (is_backbone_name(n) && layer_of(n) >= first);
  });
  // Top-k over all layers is plain finetuning, embeddings included.
  if (k == layers) return finetune_partition(m);
  return p;
}

void restore_backbone(Model& m, const ParamStore& snapshot, RestoreMode mode) {
  if (mode == RestoreMode::Reserve) return;
  if (snapshot.size() != m.backbone.params.size()) {
    fail(ErrorKind::Checkpoint, "restore: snapshot has " + std::to_string(snapshot.size()) + " tensors, backbone has " +
                                    std::to_string(m.backbone.params.size()));
  }
  for (const auto& [name, t] : snapshot) {
    if (!m.backbone.params.contains(name)) fail(ErrorKind::Checkpoint, "restore: unknown tensor '" + name + "'");
    nc::Tensor& dst = m.backbone.params.at(name);
    if (dst.shape != t.shape) {
      fail(ErrorKind::Checkpoint, "restore: shape mismatch for '" + name + "': " + nc::shape_str(dst.shape) + " vs " +
                                      nc::shape_str(t.shape));
    }
  }
  for (const auto& [name, t] : snapshot) m.backbone.params.at(name).data = t.data;
  m.lora.reset();
  m.prefix.reset();
}

double trainable_fraction(const ParamPartition& partition, const Model& m) {
  std::size_t denom = 0;
  for (const auto& [name, t] : m.backbone.params) {
    if (!model::is_mlm_param(name)) denom += t.size();
  }
  std::size_t numer = 0;
  for (const auto& name : partition.trainable) {
    if (is_head_name(name) || model::is_mlm_param(name)) continue;
    numer += m.tensor(name).size();
  }
  return denom == 0 ? 0.0 : static_cast<double>(numer) / static_cast<double>(denom);
}

std::size_t lora_param_count(const model::BackboneConfig& cfg, int rank) {
  return static_cast<std::size_t>(cfg.n_layers) * 2 * rank * (cfg.d_model + cfg.d_model);
}

std::size_t prefix_param_count(const model::BackboneConfig& cfg, int length) {
  return static_cast<std::size_t>(cfg.n_layers) * length * 2 * cfg.d_model;
}

}  // namespace ehtune::pet
