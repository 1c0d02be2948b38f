#pragma once

// Flat parameter storage. Every learnable tensor in the network registers a
// named slice of one contiguous vector; gradients and momentum buffers are
// parallel vectors of the same length. This keeps the SGD update a single
// loop, makes serialization a walk over the registry, and lets the finite-
// difference checker perturb any parameter by global index.

#include <cstddef>
#include <map>
#include <string>
#include <vector>

#include "propl/rng.hpp"
#include "propl/tensor.hpp"

namespace propl {

struct ParamEntry {
  std::string name;
  std::vector<int> shape;
  std::size_t offset = 0;
  std::size_t count = 0;
};

template <typename S>
class ParamStore {
 public:
  std::size_t add(const std::string& name, std::vector<int> shape) {
    require(index_.find(name) == index_.end(), "duplicate parameter: " + name);
    std::size_t count = 1;
    for (int d : shape) count *= static_cast<std::size_t>(d);
    ParamEntry e{name, std::move(shape), value.size(), count};
    index_[name] = entries_.size();
    entries_.push_back(e);
    value.resize(value.size() + count, S{0});
    return e.offset;
  }

  const std::vector<ParamEntry>& entries() const { return entries_; }

  const ParamEntry& entry(const std::string& name) const {
    auto it = index_.find(name);
    require(it != index_.end(), "unknown parameter: " + name);
    return entries_[it->second];
  }

  std::size_t size() const { return value.size(); }

  S* data() { return value.data(); }
  const S* data() const { return value.data(); }

  AVec<S> value;

 private:
  std::vector<ParamEntry> entries_;
  std::map<std::string, std::size_t> index_;
};

}  // namespace propl
