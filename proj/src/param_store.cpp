#include "ehtune/param_store.hpp"

#include <cstring>

#include "ehtune/error.hpp"

namespace ehtune {

nc::Tensor& ParamStore::add(const std::string& name, nc::Tensor t) {
  auto [it, inserted] = params_.emplace(name, std::move(t));
  if (!inserted) fail(ErrorKind::Contract, "duplicate parameter name '" + name + "'");
  return it->second;
}

nc::Tensor& ParamStore::at(const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end()) fail(ErrorKind::Contract, "unknown parameter '" + name + "'");
  return it->second;
}

const nc::Tensor& ParamStore::at(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) fail(ErrorKind::Contract, "unknown parameter '" + name + "'");
  return it->second;
}

std::vector<std::string> ParamStore::names() const {
  std::vector<std::string> out;
  out.reserve(params_.size());
  for (const auto& [name, _] : params_) out.push_back(name);
  return out;
}

std::size_t ParamStore::count() const {
  std::size_t n = 0;
  for (const auto& [_, t] : params_) n += t.size();
  return n;
}

void ParamStore::zero_grad() {
  for (auto& [_, t] : params_) t.zero_grad();
}

void ParamStore::clear_grad() {
  for (auto& [_, t] : params_) {
    t.grad.clear();
    t.grad.shrink_to_fit();
  }
}

bool bit_equal(const ParamStore& a, const ParamStore& b) {
  if (a.size() != b.size()) return false;
  auto ia = a.begin();
  auto ib = b.begin();
  for (; ia != a.end(); ++ia, ++ib) {
    if (ia->first != ib->first || !nc::bit_equal(ia->second, ib->second)) return false;
  }
  return true;
}

std::uint64_t tensor_hash(const nc::Tensor& t) {
  std::uint64_t h = 1469598103934665603ULL;
  auto mix = [&h](const void* p, std::size_t n) {
    const auto* bytes = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= bytes[i];
      h *= 1099511628211ULL;
    }
  };
  for (int d : t.shape) mix(&d, sizeof d);
  if (!t.data.empty()) mix(t.data.data(), t.data.size() * sizeof(float));
  return h;
}

}  // namespace ehtune
