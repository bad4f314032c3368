// Copyright 2026 The t2sd Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstring>
#include <map>
#include <string>

#include "t2sd/tensor.hpp"

namespace t2sd {

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Named parameter tensors plus their Adam first/second moments. Map iteration
/// is in name order, which makes every whole-store operation deterministic.
template <typename S>
class ParamStore {
 public:
  struct Entry {
    Tensor<S> value;
    Tensor<S> m;  // first moment
    Tensor<S> v;  // second moment
  };

  void add(const std::string& name, Tensor<S> value) {
    if (entries_.count(name)) throw DataError("duplicate parameter name: " + name);
    Entry e;
    e.m = Tensor<S>(value.shape());
    e.v = Tensor<S>(value.shape());
    e.value = std::move(value);
    entries_.emplace(name, std::move(e));
  }

  bool has(const std::string& name) const { return entries_.count(name) != 0; }

  Tensor<S>& at(const std::string& name) {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw DataError("unknown parameter: " + name);
    return it->second.value;
  }
  const Tensor<S>& at(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw DataError("unknown parameter: " + name);
    return it->second.value;
  }

  const std::map<std::string, Entry>& entries() const { return entries_; }
  std::map<std::string, Entry>& entries() { return entries_; }
  size_t size() const { return entries_.size(); }
  int64_t step() const { return step_; }
  void set_step(int64_t s) { step_ = s; }

  /// One Adam update with bias correction. `grads` may cover a subset of the
  /// parameters; missing entries (and their moments) are left untouched.
  void adam_step(const std::map<std::string, Tensor<S>>& grads, const AdamConfig& cfg) {
    ++step_;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step_));
    for (const auto& [name, g] : grads) {
      auto it = entries_.find(name);
      if (it == entries_.end()) throw DataError("adam_step: gradient for unknown parameter " + name);
      Entry& e = it->second;
      if (!g.same_shape(e.value)) {
        throw DataError("adam_step: gradient shape " + shape_str(g.shape()) + " does not match parameter " +
                        name + " " + shape_str(e.value.shape()));
      }
      if (!g.all_finite()) throw NumericalError("adam_step: non-finite gradient for parameter " + name);
      for (int64_t i = 0; i < g.numel(); ++i) {
        const double gi = static_cast<double>(g[i]);
        const double m = cfg.beta1 * static_cast<double>(e.m[i]) + (1.0 - cfg.beta1) * gi;
        const double v = cfg.beta2 * static_cast<double>(e.v[i]) + (1.0 - cfg.beta2) * gi * gi;
        e.m[i] = static_cast<S>(m);
        e.v[i] = static_cast<S>(v);
        const double mhat = m / bc1;
        const double vhat = v / bc2;
        e.value[i] = static_cast<S>(static_cast<double>(e.value[i]) - cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps));
      }
    }
  }

  /// FNV-1a over names and raw value bits; used to assert that frozen stages
  /// really were left untouched by downstream training.
  uint64_t checksum() const {
    uint64_t h = fnv1a64("t2sd-params");
    for (const auto& [name, e] : entries_) {
      h = fnv1a64(name, h);
      const char* bytes = reinterpret_cast<const char*>(e.value.data());
      h = fnv1a64(std::string_view(bytes, sizeof(S) * static_cast<size_t>(e.value.numel())), h);
    }
    return h;
  }

  template <typename T>
  ParamStore<T> cast() const {
    ParamStore<T> out;
    for (const auto& [name, e] : entries_) out.add(name, e.value.template cast<T>());
    out.set_step(step_);
    return out;
  }

 private:
  std::map<std::string, Entry> entries_;
  int64_t step_ = 0;
};

}  // namespace t2sd
