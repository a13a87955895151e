#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "ehtune/tensor.hpp"

namespace ehtune {

// Ordered name -> tensor map. Iteration order is lexicographic, which is also
// the canonical checkpoint order.
class ParamStore {
 public:
  using Map = std::map<std::string, nc::Tensor>;

  nc::Tensor& add(const std::string& name, nc::Tensor t);
  nc::Tensor& at(const std::string& name);
  const nc::Tensor& at(const std::string& name) const;
  bool contains(const std::string& name) const { return params_.count(name) != 0; }
  void erase(const std::string& name) { params_.erase(name); }

  std::vector<std::string> names() const;
  std::size_t size() const noexcept { return params_.size(); }
  bool empty() const noexcept { return params_.empty(); }
  // Total number of scalar parameters.
  std::size_t count() const;

  void zero_grad();
  void clear_grad();

  Map::iterator begin() { return params_.begin(); }
  Map::iterator end() { return params_.end(); }
  Map::const_iterator begin() const { return params_.begin(); }
  Map::const_iterator end() const { return params_.end(); }

 private:
  Map params_;
};

// Same names, shapes and bitwise-identical data.
bool bit_equal(const ParamStore& a, const ParamStore& b);

// FNV-1a 64 over shape and raw float bytes.
std::uint64_t tensor_hash(const nc::Tensor& t);

}  // namespace ehtune
