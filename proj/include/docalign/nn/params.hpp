#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "docalign/io.hpp"
#include "docalign/nn/graph.hpp"
#include "docalign/rng.hpp"

namespace docalign::nn {

// Named learnable tensors in registration order.
template <class T>
class ParamSet {
 public:
  Tensor<T>& add(const std::string& name, std::vector<int> shape) {
    if (index_.count(name)) throw InvalidArgument("duplicate parameter " + name);
    index_[name] = tensors_.size();
    names_.push_back(name);
    tensors_.emplace_back(std::move(shape));
    return tensors_.back();
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  Tensor<T>& at(const std::string& name) { return tensors_[lookup(name)]; }
  const Tensor<T>& at(const std::string& name) const { return tensors_[lookup(name)]; }
  Tensor<T>& at(std::size_t i) { return tensors_[i]; }
  const Tensor<T>& at(std::size_t i) const { return tensors_[i]; }

  const std::vector<std::string>& names() const { return names_; }
  std::size_t size() const { return tensors_.size(); }

  std::size_t count() const {
    std::size_t n = 0;
    for (const auto& t : tensors_) n += t.size();
    return n;
  }

  // Same names and shapes, all zero.
  ParamSet zeros_like() const {
    ParamSet out;
    for (std::size_t i = 0; i < size(); ++i) out.add(names_[i], tensors_[i].shape());
    return out;
  }

  void zero() {
    for (auto& t : tensors_) t.fill(T(0));
  }

  bool all_finite() const {
    for (const auto& t : tensors_) {
      for (T v : t.data()) {
        if (!std::isfinite(static_cast<double>(v))) return false;
      }
    }
    return true;
  }

  template <class U>
  ParamSet<U> cast() const {
    ParamSet<U> out;
    for (std::size_t i = 0; i < size(); ++i) out.add(names_[i], tensors_[i].shape()) = tensors_[i].template cast<U>();
    return out;
  }

  friend bool operator==(const ParamSet& a, const ParamSet& b) {
    return a.names_ == b.names_ && a.tensors_ == b.tensors_;
  }

 private:
  std::size_t lookup(const std::string& name) const {
    const auto it = index_.find(name);
    if (it == index_.end()) throw InvalidArgument("unknown parameter " + name);
    return it->second;
  }

  std::vector<std::string> names_;
  std::vector<Tensor<T>> tensors_;
  std::map<std::string, std::size_t> index_;
};

// Binds parameters onto a graph on first use. Gradients land in `grads`
// (matching names) when it is non-null.
template <class T>
class ParamBinder {
 public:
  ParamBinder(Graph<T>& graph, const ParamSet<T>& params, ParamSet<T>* grads = nullptr)
      : graph_(graph), params_(params), grads_(grads) {}

  Var operator()(const std::string& name) {
    const auto it = bound_.find(name);
    if (it != bound_.end()) return it->second;
    const Var v = graph_.bind(params_.at(name), grads_ ? &grads_->at(name) : nullptr);
    bound_[name] = v;
    return v;
  }

  Graph<T>& graph() { return graph_; }
  const ParamSet<T>& params() const { return params_; }

  // Names bound so far, in binding order.
  std::vector<std::string> bound_names() const {
    std::vector<std::pair<int, std::string>> order;
    for (const auto& [name, v] : bound_) order.emplace_back(v.id, name);
    std::sort(order.begin(), order.end());
    std::vector<std::string> out;
    for (auto& [id, name] : order) out.push_back(std::move(name));
    return out;
  }

 private:
  Graph<T>& graph_;
  const ParamSet<T>& params_;
  ParamSet<T>* grads_;
  std::map<std::string, Var> bound_;
};

// Checkpoint container: "DAPM", u32 version, u32 tensor count, then per
// tensor u32 name length, name bytes, u32 rank, rank x u32 dims, f32 payload.
// All little-endian.
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline Bytes encode_checkpoint(const ParamSet<float>& params) {
  Bytes out{'D', 'A', 'P', 'M'};
  docalign::detail::put_u32(out, kCheckpointVersion);
  docalign::detail::put_u32(out, static_cast<std::uint32_t>(params.size()));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& name = params.names()[i];
    const auto& t = params.at(i);
    docalign::detail::put_u32(out, static_cast<std::uint32_t>(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    docalign::detail::put_u32(out, static_cast<std::uint32_t>(t.rank()));
    for (int d : t.shape()) docalign::detail::put_u32(out, static_cast<std::uint32_t>(d));
    for (float v : t.data()) docalign::detail::put_f32(out, v);
  }
  return out;
}

inline ParamSet<float> decode_checkpoint(const Bytes& bytes) {
  std::size_t pos = 0;
  const auto need = [&](std::size_t n, const char* what) {
    if (bytes.size() - pos < n) {
      throw ParseError("checkpoint truncated at byte offset " + std::to_string(pos) + " reading " + what);
    }
  };
  const auto u32 = [&](const char* what) {
    need(4, what);
    const std::uint32_t v = docalign::detail::get_u32(bytes, pos);
    pos += 4;
    return v;
  };
  need(4, "magic");
  if (!std::equal(bytes.begin(), bytes.begin() + 4, "DAPM")) throw ParseError("bad checkpoint magic at byte offset 0");
  pos = 4;
  const std::uint32_t version = u32("version");
  if (version != kCheckpointVersion) {
    throw ParseError("unsupported checkpoint version " + std::to_string(version) + " at byte offset 4");
  }
  const std::uint32_t count = u32("tensor count");
  ParamSet<float> params;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t len = u32("name length");
    need(len, "name");
    std::string name(bytes.begin() + pos, bytes.begin() + pos + len);
    pos += len;
    const std::size_t rank_at = pos;
    const std::uint32_t rank = u32("rank");
    if (rank > 8) throw ParseError("implausible tensor rank " + std::to_string(rank) + " at byte offset " + std::to_string(rank_at));
    std::vector<int> shape;
    std::size_t n = 1;
    for (std::uint32_t r = 0; r < rank; ++r) {
      const std::uint32_t d = u32("dimension");
      if (d == 0 || d > (1u << 24)) throw ParseError("bad dimension for " + name + " at byte offset " + std::to_string(pos - 4));
      shape.push_back(static_cast<int>(d));
      n *= d;
    }
    need(n * 4, "payload");
    if (params.contains(name)) throw ParseError("duplicate tensor " + name + " at byte offset " + std::to_string(rank_at));
    Tensor<float>& t = params.add(name, shape);
    for (std::size_t k = 0; k < n; ++k, pos += 4) t[k] = docalign::detail::get_f32(bytes, pos);
  }
  if (pos != bytes.size()) throw ParseError("trailing bytes after checkpoint at byte offset " + std::to_string(pos));
  return params;
}

inline void save_checkpoint(const std::filesystem::path& path, const ParamSet<float>& params) {
  write_bytes(path, encode_checkpoint(params));
}

inline ParamSet<float> load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(read_bytes(path));
}

}  // namespace docalign::nn
