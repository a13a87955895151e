#include "ehtune/head.hpp"

#include "ehtune/error.hpp"
#include "ehtune/rng.hpp"

namespace ehtune::model {

void HeadConfig::validate() const {
  if (d_model < 1 || d_mid < 1 || n_classes < 1) {
    fail(ErrorKind::Config, "head config: all dimensions must be >= 1");
  }
}

Head build_head(const HeadConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Head head{cfg, {}};
  Rng rng(derive_seed(seed, "head.init"));
  auto normal = [&rng](nc::Shape shape) {
    nc::Tensor t = nc::Tensor::zeros(std::move(shape));
    for (float& x : t.data) x = static_cast<float>(rng.normal() * 0.02);
    return t;
  };
  head.params.add("W1", normal({cfg.d_model, cfg.d_mid}));
  head.params.add("b1", nc::Tensor::zeros({cfg.d_mid}));
  head.params.add("W2", normal({cfg.d_mid, cfg.n_classes}));
  head.params.add("b2", nc::Tensor::zeros({cfg.n_classes}));
  return head;
}

std::size_t head_param_count(const HeadConfig& cfg) {
  const std::size_t d = static_cast<std::size_t>(cfg.d_model);
  const std::size_t m = static_cast<std::size_t>(cfg.d_mid);
  const std::size_t c = static_cast<std::size_t>(cfg.n_classes);
  return d * m + m + m * c + c;
}

nc::Var head_mid(Binder& b, const Head& head, nc::Var features) {
  if (features.shape().size() != 2 || features.cols() != head.config.d_model) {
    fail(ErrorKind::Shape, "head: feature shape " + nc::shape_str(features.shape()) + " does not match d_model " +
                               std::to_string(head.config.d_model));
  }
  nc::Var pre = nc::add_rowvec(nc::matmul(features, b.bind(head.params, "head", "W1")), b.bind(head.params, "head", "b1"));
  return nc::tanh(pre);
}

nc::Var head_logits(Binder& b, const Head& head, nc::Var features) {
  nc::Var mid = head_mid(b, head, features);
  return nc::add_rowvec(nc::matmul(mid, b.bind(head.params, "head", "W2")), b.bind(head.params, "head", "b2"));
}

namespace {

nc::Tensor to_tensor(nc::Var v) { return nc::Tensor(v.shape(), std::vector<float>(v.value().begin(), v.value().end())); }

}  // namespace

nc::Tensor forward_logits(const Head& head, const nc::Tensor& features) {
  nc::Graph g;
  Binder b(g, nullptr);
  return to_tensor(head_logits(b, head, g.constant(features)));
}

nc::Tensor mid_features(const Head& head, const nc::Tensor& features) {
  nc::Graph g;
  Binder b(g, nullptr);
  return to_tensor(head_mid(b, head, g.constant(features)));
}

void transplant_head(const Head& from, Head& to) {
  if (!(from.config == to.config)) fail(ErrorKind::Shape, "transplant_head: head dimensions differ");
  for (const auto& [name, t] : from.params) to.params.at(name).data = t.data;
}

}  // namespace ehtune::model
